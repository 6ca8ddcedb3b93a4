//! Benchmark problem generators.

mod corridor;
mod grid;
mod maze;
mod person;

pub use corridor::{build_corridor_nav, CorridorConfig, Heading, CorridorSensing};
pub use grid::{build_grid_nav, line_of_sight, signature_index, Cell, GridMap, GridNavConfig};
pub use maze::{build_two_corridor_maze, MazeConfig};
pub use person::{build_person_finding, PersonFinding, PersonFindingModel, RobotAction, OFFICE_MAP, ROBOT_ACTIONS};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::pomdp::Belief;

/// A von Mises distribution discretized onto `support_size` circular states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VonMisesSpec {
    pub support_size: usize,
    pub mean: usize,
    pub concentration: f64,
}

/// `p(i) ∝ exp(κ cos(2π (i − mean) / n))`.
pub fn discretized_von_mises(spec: &VonMisesSpec) -> Result<Belief> {
    Belief::new(von_mises_weights(spec)?)
}

pub(crate) fn von_mises_weights(spec: &VonMisesSpec) -> Result<Vec<f64>> {
    let n = spec.support_size;
    if n == 0 {
        return Err(Error::Config("von Mises support must have at least one state".into()));
    }
    if !(spec.concentration >= 0.0) || !spec.concentration.is_finite() {
        return Err(Error::Config(format!("von Mises concentration {} must be finite and >= 0", spec.concentration)));
    }
    let k = spec.concentration;
    // Shifted by the maximum so that large κ stays finite.
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let d = (i as f64 - spec.mean as f64) / n as f64;
            (k * ((2.0 * PI * d).cos() - 1.0)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}
