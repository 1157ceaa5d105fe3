//! Differentiable layers with hand-written backward passes, and SGD with momentum.

mod conv;
mod linear;
mod loss;
mod optim;

pub use conv::{Conv2d, ConvGrads};
pub use linear::{relu_backward, relu_forward, Linear};
pub use loss::softmax_cross_entropy;
pub use optim::SgdMomentum;


use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// `sqrt(1 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f32 {
    (1.0 / fan_in as f64).sqrt() as f32
}

/// Weight initialisation: uniform in `[-a, a]`, biases zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// `a = sqrt(1 / fan_in)` for every layer.
    FanIn,
    /// Variance preserving: `a = sqrt(6 / fan_in)` for layers feeding a ReLU,
    /// `sqrt(3 / fan_in)` otherwise.
    #[default]
    Scaled,
}

impl Init {
    pub fn bound(self, fan_in: usize, feeds_relu: bool) -> f32 {
        let gain: f64 = match (self, feeds_relu) {
            (Init::FanIn, _) => 1.0,
            (Init::Scaled, true) => 6.0,
            (Init::Scaled, false) => 3.0,
        };
        (gain / fan_in as f64).sqrt() as f32
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::FanIn => "fan_in",
            Init::Scaled => "scaled",
        })
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan_in" => Ok(Init::FanIn),
            "scaled" => Ok(Init::Scaled),
            other => Err(Error::invalid(format!("unknown init `{other}` (fan_in, scaled)"))),
        }
    }
}
