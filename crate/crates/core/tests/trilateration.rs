mod common;

use common::{cost, lattice_minimum, linear_oracle, random_instance};
use nalgebra::Point3;
use oio_core::belief::{extract_vertex, BeliefError, RangeSphere, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn noiseless_instances_match_the_linear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (truth, spheres) = random_instance(&mut rng, 0.0);
        let fit = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
        let oracle = linear_oracle(&spheres);
        assert!((fit.position - oracle).norm() < 1e-6, "{:?} vs {oracle:?}", fit.position);
        assert!((fit.position - truth).norm() < 1e-6);
    }
}

#[test]
fn noisy_instances_match_the_lattice_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (_, spheres) = random_instance(&mut rng, 0.01);
        let fit = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
        let lattice = lattice_minimum(&spheres, linear_oracle(&spheres));
        let gap = fit.position - lattice;
        assert!(gap.amax() <= 1.0, "vertex {:?} lattice {lattice:?}", fit.position);
        assert!(cost(&spheres, &fit.position) <= cost(&spheres, &lattice) + 1e-9);
        assert!(fit.residual > 0.0);
    }
}

#[test]
fn coplanar_centres_are_rejected() {
    let spheres: Vec<_> = [(0.0, 0.0), (200.0, 0.0), (0.0, 200.0), (200.0, 200.0), (100.0, 50.0)]
        .iter()
        .map(|&(x, y)| RangeSphere {
            center: Point3::new(x, y, 100.0),
            radius: 150.0,
            weight: 1.0,
        })
        .collect();
    assert_eq!(
        extract_vertex(&spheres, &SolverOptions::default()).unwrap_err(),
        BeliefError::DegenerateGeometry
    );
}

#[test]
fn returned_vertex_is_sphere_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (_, mut spheres) = random_instance(&mut rng, 0.02);
        for s in &mut spheres {
            s.weight = rng.random_range(0.5..2.0);
        }
        let fit = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
        let n = spheres.len() as f64;
        let mean_w = spheres.iter().map(|s| s.weight).sum::<f64>() / n;
        for s in &spheres {
            let miss = ((fit.position - s.center).norm() - s.radius).abs();
            assert!(miss <= fit.residual * (n * mean_w / s.weight).sqrt() + 1e-9);
        }
    }
}
