//! Rectified-flow training with hand-derived gradients.
//!
//! The loss is `mean ||(x1 - x0) - v(x_σ, σ)||²` with `x_σ = σ x1 + (1 - σ) x0`,
//! `x0 ~ N(0, I)`, `x1` from the dataset and `σ ~ U[0, 1]`.

mod checkpoint;
mod dataset;
mod mlp;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Architecture, Checkpoint, CheckpointMeta, Model};
pub use dataset::{
    decode_prompt, make_dataset, nearest_mean, two_factor_prompt, DatasetSpec, Samples, SyntheticDataset, NULL_TOKEN,
    TOKEN_A, TOKEN_B, VOCAB,
};
pub use mlp::{Mlp, MlpArch};

use crate::error::{FlowError, Result};
use crate::fields::VelocityField;
use crate::numerics::{finite_diff_check, GradCheckReport, RngStream, Tensor};

/// A velocity field with a flat parameter vector and a per-sample gradient.
pub trait TrainableField: VelocityField {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Returns `||v(x, σ) - target||²` for one sample and adds `weight` times its
    /// parameter gradient to `grad`.
    fn squared_error_grad(
        &self,
        x: &[f64],
        sigma: f64,
        tokens: Option<&[u32]>,
        target: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64>;
}

/// One minibatch of `(x0, x1, σ)` triples; prompts are `None` for dropped conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub sigmas: Vec<f64>,
    pub prompts: Option<Vec<Option<Vec<u32>>>>,
}

impl Batch {
    pub fn draw(data: &mut SyntheticDataset, rng: &mut RngStream, n: usize, cond_dropout: f64) -> Result<Self> {
        if n == 0 {
            return Err(FlowError::invalid("batch must be nonempty"));
        }
        let samples = data.sample(n)?;
        let x0 = rng.gaussian(&[n, data.dim()])?;
        let sigmas = (0..n).map(|_| rng.uniform()).collect();
        let prompts = samples
            .prompts
            .map(|ps| ps.into_iter().map(|p| if rng.uniform() < cond_dropout { None } else { Some(p) }).collect());
        Ok(Self { x0, x1: samples.x, sigmas, prompts })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Mean squared velocity residual over the batch and its parameter gradient.
pub fn rf_loss<M: TrainableField + ?Sized>(model: &M, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    if n == 0 {
        return Err(FlowError::invalid("batch must be nonempty"));
    }
    batch.x0.same_shape(&batch.x1)?;
    if batch.x0.rows() != n {
        return Err(FlowError::invalid("batch tensors and sigma draws disagree on size"));
    }
    let mut grad = vec![0.0; model.params().len()];
    let mut total = 0.0;
    let weight = 1.0 / n as f64;
    for i in 0..n {
        let (x0, x1, s) = (batch.x0.row(i), batch.x1.row(i), batch.sigmas[i]);
        let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| s * b + (1.0 - s) * a).collect();
        let target: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
        let tokens = batch.prompts.as_ref().and_then(|p| p[i].as_deref());
        let se = model.squared_error_grad(&xt, s, tokens, &target, weight, &mut grad)?;
        if !se.is_finite() {
            return Err(FlowError::numerical(format!("non-finite loss at batch index {i}")));
        }
        total += se;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FlowError::numerical("non-finite gradient"));
    }
    Ok((total / n as f64, grad))
}

/// The value of [`rf_loss`] from forward passes only.
pub fn rf_loss_value<M: VelocityField + ?Sized>(model: &M, batch: &Batch) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(FlowError::invalid("batch must be nonempty"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (x0, x1, s) = (batch.x0.row(i), batch.x1.row(i), batch.sigmas[i]);
        let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| s * b + (1.0 - s) * a).collect();
        let tokens = batch.prompts.as_ref().and_then(|p| p[i].as_deref());
        let v = model.velocity(&Tensor::row_vector(&xt)?, s, tokens)?;
        total += v.row(0).iter().zip(x0.iter().zip(x1)).map(|(v, (a, b))| (b - a - v).powi(2)).sum::<f64>();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub const MOMENTUM: f64 = 0.9;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Self { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = Self::MOMENTUM * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Probability of training a sample with the null prompt.
    pub cond_dropout: f64,
    /// Final-loss warning level; defaults to the dataset's documented threshold.
    pub loss_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 5000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            cond_dropout: 0.1,
            loss_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(FlowError::Configuration("batch size and step count must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FlowError::Configuration(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(FlowError::Configuration(format!("cond_dropout {} outside [0, 1)", self.cond_dropout)));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Expected loss of the exact velocity for `N(mean, std² I)` data, `d · E_σ Var(x1 - x0 | x_σ)`.
pub fn gaussian_loss_floor(dim: usize, std: f64) -> f64 {
    let s2 = std * std;
    let n = 10_000;
    let mut acc = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) / n as f64;
        let cov = t * s2 - (1.0 - t);
        let var_x = t * t * s2 + (1.0 - t) * (1.0 - t);
        acc += s2 + 1.0 - cov * cov / var_x;
    }
    dim as f64 * acc / n as f64
}

/// Final-loss level above which training is flagged as under-fit.
pub fn default_loss_threshold(spec: &DatasetSpec) -> f64 {
    match spec {
        DatasetSpec::Gaussian { mean, std } => gaussian_loss_floor(mean.len(), *std) + 0.05,
        DatasetSpec::Gmm2d { .. } => 1.6,
        DatasetSpec::TwoFactor { .. } => 2.0,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Trains `arch` on `data` and returns the checkpoint with its loss curve.
pub fn train_field(arch: &Architecture, cfg: &TrainConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.data_dim() != data.dim() {
        return Err(FlowError::Configuration(format!(
            "architecture dim {} vs dataset dim {}",
            arch.data_dim(),
            data.dim()
        )));
    }
    let root = RngStream::new(cfg.seed);
    let mut model = Model::init(arch, &mut root.substream(0))?;
    let mut batch_rng = root.substream(1);
    let mut data = data.clone();
    let mut opt = Optimizer::new(cfg.optimizer, model.params().len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::draw(&mut data, &mut batch_rng, cfg.batch_size, cfg.cond_dropout)?;
        let (loss, grad) = rf_loss(&model, &batch).map_err(|e| match e {
            FlowError::Numerical(msg) => FlowError::numerical(format!("training diverged at step {step}: {msg}")),
            other => other,
        })?;
        curve.push(loss);
        let lr = cfg.lr_at(step);
        opt.step(model.params_mut(), &grad, lr);
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(FlowError::numerical(format!("training diverged at step {step}: non-finite parameters")));
        }
    }
    let tail = curve.len().min(100);
    let final_loss = curve[curve.len() - tail..].iter().sum::<f64>() / tail as f64;
    let threshold = cfg.loss_threshold.unwrap_or_else(|| default_loss_threshold(&data.spec));
    let meta = CheckpointMeta {
        seed: cfg.seed,
        steps: cfg.steps,
        final_loss,
        loss_threshold: threshold,
        loss_warning: final_loss > threshold,
        dataset: data.spec.clone(),
    };
    Ok(TrainOutcome { checkpoint: Checkpoint::new(arch.clone(), model.params().to_vec(), meta)?, loss_curve: curve })
}

/// Central-difference check of [`rf_loss`] at a random parameter point of `arch`
/// (every parameter drawn from `N(0, 0.3²)`) on a small batch of `data`.
pub fn check_rf_gradient(
    arch: &Architecture,
    data: &SyntheticDataset,
    seed: u64,
    batch_size: usize,
) -> Result<GradCheckReport> {
    let root = RngStream::new(seed);
    let base = Model::init(arch, &mut root.substream(0))?;
    let mut rng = root.substream(1);
    let params: Vec<f64> = (0..base.params().len()).map(|_| 0.3 * rng.normal()).collect();
    let model = Model::from_params(arch, params)?;
    let mut data = data.clone();
    let batch = Batch::draw(&mut data, &mut root.substream(2), batch_size, 0.5)?;
    let (_, grad) = rf_loss(&model, &batch)?;
    let probe = std::cell::RefCell::new(model.clone());
    let loss = |q: &[f64]| {
        let mut m = probe.borrow_mut();
        m.params_mut().copy_from_slice(q);
        rf_loss_value(&*m, &batch).unwrap_or(f64::NAN)
    };
    finite_diff_check(loss, model.params(), &grad, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ConstantCouplingField;

    /// `v(x, σ) = θ` for every input; enough to probe the loss bookkeeping.
    struct ConstantModel(Vec<f64>);

    impl VelocityField for ConstantModel {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, x: &Tensor, _: f64, _: Option<&[u32]>) -> Result<Tensor> {
            let mut out = x.clone();
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&self.0);
            }
            Ok(out)
        }
    }

    impl TrainableField for ConstantModel {
        fn params(&self) -> &[f64] {
            &self.0
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.0
        }
        fn squared_error_grad(
            &self,
            _: &[f64],
            _: f64,
            _: Option<&[u32]>,
            t: &[f64],
            w: f64,
            g: &mut [f64],
        ) -> Result<f64> {
            let mut se = 0.0;
            for k in 0..t.len() {
                let r = self.0[k] - t[k];
                se += r * r;
                g[k] += 2.0 * w * r;
            }
            Ok(se)
        }
    }

    fn batch_from(x0: Tensor, x1: Tensor, rng: &mut RngStream) -> Batch {
        let sigmas = (0..x0.rows()).map(|_| rng.uniform()).collect();
        Batch { x0, x1, sigmas, prompts: None }
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let x0 = Tensor::from_rows(&[vec![0.1, -0.3], vec![0.1, -0.3]]).unwrap();
        let x1 = Tensor::from_rows(&[vec![2.0, 1.5], vec![2.0, 1.5]]).unwrap();
        let oracle = ConstantCouplingField::new(x0.clone(), x1.clone()).unwrap().displacement();
        let model = ConstantModel(oracle.row(0).to_vec());
        let (loss, grad) = rf_loss(&model, &batch_from(x0, x1, &mut RngStream::new(0))).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_network_loss_is_twice_dimension() {
        let d = 3;
        let mut rng = RngStream::new(11);
        let x0 = rng.gaussian(&[10_000, d]).unwrap();
        let x1 = rng.gaussian(&[10_000, d]).unwrap();
        let (loss, _) = rf_loss(&ConstantModel(vec![0.0; d]), &batch_from(x0, x1, &mut rng)).unwrap();
        assert!((loss - 2.0 * d as f64).abs() <= 0.05 * 2.0 * d as f64, "{loss}");
    }

    #[test]
    fn non_finite_loss_names_batch_index() {
        let mut rng = RngStream::new(1);
        let x0 = rng.gaussian(&[3, 1]).unwrap();
        let x1 = rng.gaussian(&[3, 1]).unwrap();
        let err = rf_loss(&ConstantModel(vec![f64::INFINITY]), &batch_from(x0, x1, &mut rng)).unwrap_err();
        assert!(err.to_string().contains("batch index 0"), "{err}");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7, "{p:?}");
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::Momentum, 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], 1.0);
        opt.step(&mut p, &[1.0], 1.0);
        assert_eq!(p[0], -(1.0 + 1.9));
    }

    #[test]
    fn gaussian_floor_limits() {
        // std = 1: Var(D | x) = 2 - (2t - 1)² / (t² + (1 - t)²), integrated numerically elsewhere
        let f = gaussian_loss_floor(1, 1.0);
        assert!(f > 0.0 && f < 2.0);
        // degenerate data (std → 0): D = mu - x0 is fully determined by x_t for t < 1
        assert!(gaussian_loss_floor(2, 1e-6) < 1e-3);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
