//! Velocity fields: a common evaluation interface plus closed-form oracles.
//!
//! Time runs over `σ ∈ [0, 1]` with `σ = 0` the noise end (`x0 ~ N(0, I)`) and `σ = 1`
//! the data end. Learned fields (MLP, mini-DiT) implement [`VelocityField`] in
//! `training` and `editing`.

mod analytic;
mod coupling;
mod linear;
mod mixture;

use serde::{Deserialize, Serialize};

pub use analytic::AnalyticGaussianFlow;
pub use coupling::ConstantCouplingField;
pub use linear::LinearField;
pub use mixture::GaussianMixtureScore;

use crate::error::{FlowError, Result};
use crate::numerics::Tensor;

/// Token-id prompt plus classifier-free guidance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub tokens: Vec<u32>,
    pub guidance: f64,
}

impl Condition {
    pub fn new(tokens: Vec<u32>, guidance: f64) -> Self {
        Self { tokens, guidance }
    }

    pub fn with_guidance(&self, guidance: f64) -> Self {
        Self { tokens: self.tokens.clone(), guidance }
    }
}

/// A time-dependent vector field `v(x, σ, condition)` evaluated on a batch `[n, d]`.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// `tokens = None` requests the unconditional (null-prompt) velocity.
    fn velocity(&self, x: &Tensor, sigma: f64, tokens: Option<&[u32]>) -> Result<Tensor>;

    fn supports_unconditional(&self) -> bool {
        true
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, x: &Tensor, sigma: f64, tokens: Option<&[u32]>) -> Result<Tensor> {
        (**self).velocity(x, sigma, tokens)
    }

    fn supports_unconditional(&self) -> bool {
        (**self).supports_unconditional()
    }
}

pub(crate) fn check_request(x: &Tensor, sigma: f64, dim: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(FlowError::invalid(format!("sigma {sigma} outside [0, 1]")));
    }
    if x.cols() != dim {
        return Err(FlowError::invalid(format!("state dimension {} but field expects {dim}", x.cols())));
    }
    x.ensure_finite("field input")
}

/// JSON-serializable description of an oracle field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero { dim: usize },
    AnalyticGaussian { mu: Vec<f64>, s: f64 },
    Linear { dim: usize, nodes: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    ConstantCoupling { x0: Vec<Vec<f64>>, x1: Vec<Vec<f64>> },
}

impl FieldSpec {
    pub fn build(&self) -> Result<Box<dyn VelocityField + Send + Sync>> {
        Ok(match self {
            FieldSpec::Zero { dim } => {
                if *dim == 0 {
                    return Err(FlowError::Configuration("zero field needs a positive dimension".into()));
                }
                Box::new(ZeroField(*dim))
            }
            FieldSpec::AnalyticGaussian { mu, s } => Box::new(AnalyticGaussianFlow::new(mu.clone(), *s)?),
            FieldSpec::Linear { dim, nodes, a, b } => {
                Box::new(LinearField::new(*dim, nodes.clone(), a.clone(), b.clone())?)
            }
            FieldSpec::ConstantCoupling { x0, x1 } => {
                Box::new(ConstantCouplingField::new(Tensor::from_rows(x0)?, Tensor::from_rows(x1)?)?)
            }
        })
    }
}

/// The zero field, handy as a sanity baseline.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn velocity(&self, x: &Tensor, sigma: f64, _tokens: Option<&[u32]>) -> Result<Tensor> {
        check_request(x, sigma, self.0)?;
        Ok(Tensor::zeros(x.shape()))
    }
}
