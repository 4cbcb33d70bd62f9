//! Olfactory-inertial odometry toolkit: a simulated arm carrying a gas-sensor
//! pair through a decaying plume, bout detection, uncertainty calibration,
//! range-sphere localization and EKF fusion.

pub mod arm;
pub mod belief;
pub mod bout;
pub mod calibration;
pub mod ekf;
pub mod nav;
pub mod plume;
pub mod runner;
pub mod scenario;
pub mod sensor;
pub mod world;
