use serde::{Deserialize, Serialize};

use super::{check_request, VelocityField};
use crate::error::{FlowError, Result};
use crate::numerics::Tensor;

/// The straight-line velocity `x1 - x0` of one fixed coupling, constant in `x` and `σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantCouplingField {
    pub x0: Tensor,
    pub x1: Tensor,
}

impl ConstantCouplingField {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        x0.same_shape(&x1)?;
        Ok(Self { x0, x1 })
    }

    pub fn displacement(&self) -> Tensor {
        // shapes validated at construction
        self.x1.sub(&self.x0).expect("coupling endpoints share a shape")
    }
}

impl VelocityField for ConstantCouplingField {
    fn dim(&self) -> usize {
        self.x0.cols()
    }

    fn velocity(&self, x: &Tensor, sigma: f64, _tokens: Option<&[u32]>) -> Result<Tensor> {
        check_request(x, sigma, self.dim())?;
        let v = self.displacement();
        if x.shape() == v.shape() {
            return Ok(v);
        }
        if v.rows() == 1 {
            let mut out = x.clone();
            for i in 0..out.rows() {
                out.row_mut(i).copy_from_slice(v.row(0));
            }
            return Ok(out);
        }
        Err(FlowError::invalid(format!(
            "coupling of shape {:?} cannot evaluate a batch of shape {:?}",
            v.shape(),
            x.shape()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_of_state_and_time() {
        let x0 = Tensor::row_vector(&[0.5, -1.0]).unwrap();
        let x1 = Tensor::row_vector(&[2.0, 3.0]).unwrap();
        let f = ConstantCouplingField::new(x0, x1).unwrap();
        for sigma in [0.0, 0.3, 1.0] {
            let v = f.velocity(&Tensor::row_vector(&[9.0, -7.0]).unwrap(), sigma, None).unwrap();
            assert_eq!(v.data(), &[1.5, 4.0]);
        }
        let batch = Tensor::zeros(&[3, 2]);
        let v = f.velocity(&batch, 0.5, None).unwrap();
        assert_eq!(v.row(2), &[1.5, 4.0]);
    }
}
