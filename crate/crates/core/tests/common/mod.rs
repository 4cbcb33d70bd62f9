use nalgebra::{Matrix3, Point3, Vector3};
use oio_core::belief::RangeSphere;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Subtracts the first sphere equation from the others and solves the
/// resulting 3×3 linear system.
pub fn linear_oracle(spheres: &[RangeSphere]) -> Point3<f64> {
    let c0 = spheres[0].center.coords;
    let r0 = spheres[0].radius;
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (row, s) in spheres[1..4].iter().enumerate() {
        let ci = s.center.coords;
        a.set_row(row, &(2.0 * (ci - c0)).transpose());
        b[row] = r0 * r0 - s.radius * s.radius + ci.norm_squared() - c0.norm_squared();
    }
    Point3::from(a.lu().solve(&b).expect("non-degenerate instance"))
}

pub fn cost(spheres: &[RangeSphere], p: &Point3<f64>) -> f64 {
    spheres.iter().map(|s| ((p - s.center).norm() - s.radius).powi(2)).sum()
}

/// Best point of a 1 mm lattice: a coarse sweep followed by a unit-spacing
/// sweep around the coarse winner.
pub fn lattice_minimum(spheres: &[RangeSphere], around: Point3<f64>) -> Point3<f64> {
    let search = |centre: Point3<f64>, half: i32, step: f64| {
        let mut best = (f64::INFINITY, centre);
        for i in -half..=half {
            for j in -half..=half {
                for k in -half..=half {
                    let p = centre + Vector3::new(i as f64, j as f64, k as f64) * step;
                    let c = cost(spheres, &p);
                    if c < best.0 {
                        best = (c, p);
                    }
                }
            }
        }
        best.1
    };
    let snapped = around.map(f64::round);
    let coarse = search(snapped, 8, 8.0);
    search(coarse, 10, 1.0)
}

/// Largest eigenvalue ratio of the centre scatter accepted as non-degenerate.
pub const MAX_CONDITION: f64 = 10.0;

/// Source in the workspace, four centres within 400 mm of it per axis.
pub fn random_instance(rng: &mut ChaCha8Rng, noise: f64) -> (Point3<f64>, Vec<RangeSphere>) {
    loop {
        let truth = Point3::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(0.0..300.0));
        let centers: Vec<Point3<f64>> = (0..4)
            .map(|_| truth + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 400.0)
            .collect();
        let mean = centers.iter().fold(Vector3::zeros(), |acc, c| acc + c.coords) / 4.0;
        let gram = centers.iter().fold(Matrix3::zeros(), |acc, c| {
            let d = c.coords - mean;
            acc + d * d.transpose()
        });
        let eig = gram.symmetric_eigenvalues();
        if eig.max() > MAX_CONDITION * eig.min() {
            continue;
        }
        let spheres = centers
            .iter()
            .map(|c| {
                let r = (truth - c).norm();
                RangeSphere {
                    center: *c,
                    radius: r * (1.0 + noise * rng.random_range(-1.0..1.0)),
                    weight: 1.0,
                }
            })
            .collect();
        return (truth, spheres);
    }
}
