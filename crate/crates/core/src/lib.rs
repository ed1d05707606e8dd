//! Racing simulator for 1:10-scale cars.
//!
//! The crate covers the vehicle model ([`vehicle`]), racetracks and their
//! geometry queries ([`track`]), simulated LiDAR and odometry ([`sensors`]),
//! the classical base controllers ([`controllers`]) and the racing MDP
//! including the evaluation race protocol ([`env`]).

pub mod controllers;
pub mod env;
pub mod geometry;
pub mod sensors;
pub mod track;
pub mod vehicle;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("body-frame speed {0:.4} m/s is below the kinematic switch")]
    DegenerateSpeed(f64),
    #[error("vehicle state became non-finite")]
    NonFiniteState,
    #[error("track generation failed after {attempts} attempts: {reason}")]
    TrackGeneration { attempts: usize, reason: String },
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("scan has {got} readings, expected {expected}")]
    ScanLength { got: usize, expected: usize },
    #[error("environment used before reset")]
    NotReset,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
