//! Checkpoint files: one line of JSON header, then the parameters as little-endian f64.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Mlp, MlpArch, TrainableField};
use crate::editing::{DitArch, MiniDiT};
use crate::error::{FlowError, Result};
use crate::fields::VelocityField;
use crate::numerics::{RngStream, Tensor};

pub const CHECKPOINT_FORMAT: &str = "flowinv-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpArch),
    MiniDit(DitArch),
}

impl Architecture {
    pub fn data_dim(&self) -> usize {
        match self {
            Architecture::Mlp(a) => a.dim,
            Architecture::MiniDit(a) => a.data_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: usize,
    /// Mean batch loss over the last 100 steps.
    pub final_loss: f64,
    pub loss_threshold: f64,
    pub loss_warning: bool,
    pub dataset: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: Architecture,
    param_count: usize,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(arch: Architecture, params: Vec<f64>, meta: CheckpointMeta) -> Result<Self> {
        let ck = Self { arch, params, meta };
        ck.model()?;
        Ok(ck)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            arch: self.arch.clone(),
            param_count: self.params.len(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        let header: Header = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(FlowError::Configuration(format!("unsupported checkpoint format {:?}", header.format)));
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        if body.len() != 8 * header.param_count {
            return Err(FlowError::Configuration(format!(
                "checkpoint declares {} parameters but holds {} bytes",
                header.param_count,
                body.len()
            )));
        }
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Self::new(header.arch, params, header.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}

/// A trained network of either architecture.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Mlp(Mlp),
    MiniDit(MiniDiT),
}

impl Model {
    pub fn init(arch: &Architecture, rng: &mut RngStream) -> Result<Self> {
        Ok(match arch {
            Architecture::Mlp(a) => Model::Mlp(Mlp::new(*a, rng)?),
            Architecture::MiniDit(a) => Model::MiniDit(MiniDiT::new(*a, rng)?),
        })
    }

    pub fn from_params(arch: &Architecture, params: Vec<f64>) -> Result<Self> {
        Ok(match arch {
            Architecture::Mlp(a) => Model::Mlp(Mlp::from_params(*a, params)?),
            Architecture::MiniDit(a) => Model::MiniDit(MiniDiT::from_params(*a, params)?),
        })
    }

    pub fn as_dit(&self) -> Option<&MiniDiT> {
        match self {
            Model::MiniDit(m) => Some(m),
            Model::Mlp(_) => None,
        }
    }

    fn inner(&self) -> &dyn TrainableField {
        match self {
            Model::Mlp(m) => m,
            Model::MiniDit(m) => m,
        }
    }
}

impl VelocityField for Model {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn velocity(&self, x: &Tensor, sigma: f64, tokens: Option<&[u32]>) -> Result<Tensor> {
        self.inner().velocity(x, sigma, tokens)
    }
}

impl TrainableField for Model {
    fn params(&self) -> &[f64] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Mlp(m) => m.params_mut(),
            Model::MiniDit(m) => m.params_mut(),
        }
    }

    fn squared_error_grad(
        &self,
        x: &[f64],
        sigma: f64,
        tokens: Option<&[u32]>,
        target: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.inner().squared_error_grad(x, sigma, tokens, target, weight, grad)
    }
}
