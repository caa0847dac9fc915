//! Invariance-controlled editing on the mini-DiT.
//!
//! An edit inverts a sample under the source prompt, computes compensations, then
//! regenerates two branches in lockstep. The source branch replays the reconstruction
//! and records its text features and attention inputs; the target branch runs the
//! target prompt with the unedited text-token rows replaced by the source branch's
//! rows for the first `⌊S·T⌋` steps, and optionally with source Q/K/V injected for
//! the first `⌊τ·T⌋` steps. Hooks only touch the conditional pass; the null-prompt
//! pass of classifier-free guidance runs unmodified.

mod dit;
mod experiment;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use dit::{DitArch, FeaturePoint, ForwardHook, MiniDiT, NoHook};
pub use experiment::{factor_b_trials, output_displacements, EditTrial, TrialPlan, TrialSummary};

use crate::error::{FlowError, Result};
use crate::fields::{Condition, VelocityField};
use crate::inversion::{compute_compensations, invert, relative_linf, FixedPointConfig, InversionResult};
use crate::numerics::Tensor;
use crate::samplers::TimeGrid;

/// `j × d` text-token features with the prompt that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub matrix: Tensor,
    pub prompt_tokens: Vec<u32>,
}

impl TokenFeatures {
    pub fn new(matrix: Tensor, prompt_tokens: Vec<u32>) -> Result<Self> {
        if prompt_tokens.is_empty() || matrix.rows() != prompt_tokens.len() {
            return Err(FlowError::invalid(format!(
                "{} feature rows for {} tokens",
                matrix.rows(),
                prompt_tokens.len()
            )));
        }
        Ok(Self { matrix, prompt_tokens })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QkvComponent {
    Q,
    K,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionInjection {
    pub components: Vec<QkvComponent>,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditSpec {
    pub source_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    /// Positions where the prompts differ.
    pub edited_indices: Vec<usize>,
    /// Fraction of regeneration steps, counted from the noise end, with the Map active.
    pub s_fraction: f64,
    pub attention_injection: Option<AttentionInjection>,
}

impl EditSpec {
    pub fn new(
        source_tokens: Vec<u32>,
        target_tokens: Vec<u32>,
        s_fraction: f64,
        attention_injection: Option<AttentionInjection>,
    ) -> Result<Self> {
        if source_tokens.len() != target_tokens.len() {
            return Err(FlowError::invalid(format!(
                "source prompt has {} tokens, target {}",
                source_tokens.len(),
                target_tokens.len()
            )));
        }
        check_fraction("S_fraction", s_fraction)?;
        if let Some(inj) = &attention_injection {
            check_fraction("injection fraction", inj.fraction)?;
        }
        let edited_indices = (0..source_tokens.len()).filter(|&k| source_tokens[k] != target_tokens[k]).collect();
        Ok(Self { source_tokens, target_tokens, edited_indices, s_fraction, attention_injection })
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(FlowError::invalid(format!("{name} {f} outside [0, 1]")));
    }
    Ok(())
}

/// Number of leading steps a fraction covers, `⌊fraction · total⌋`.
///
/// A tolerance of 1e-9 absorbs decimal fractions that are not representable, so
/// `0.29 · 100` counts 29 steps.
pub fn active_steps(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64 + 1e-9).floor() as usize).min(total)
}

/// Row-wise feature replacement: before step `⌊S·T⌋` the unedited rows come from the
/// source features and the edited rows from the target; afterwards the target is
/// returned unchanged.
pub fn adaln_map(
    m_source: &TokenFeatures,
    m_target: &TokenFeatures,
    spec: &EditSpec,
    step: usize,
    total: usize,
) -> Result<TokenFeatures> {
    if m_source.matrix.shape() != m_target.matrix.shape() {
        return Err(FlowError::invalid(format!(
            "source features {:?} vs target {:?}",
            m_source.matrix.shape(),
            m_target.matrix.shape()
        )));
    }
    if step >= active_steps(spec.s_fraction, total) {
        return Ok(m_target.clone());
    }
    let mut out = m_target.clone();
    for k in 0..out.matrix.rows() {
        if !spec.edited_indices.contains(&k) {
            out.matrix.row_mut(k).copy_from_slice(m_source.matrix.row(k));
        }
    }
    Ok(out)
}

/// Attention inputs over the joint token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvTensors {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Replaces the named components of the target's attention inputs with the source's
/// for the first `⌊τ·T⌋` steps.
pub fn attention_inject(
    source_cache: Option<&QkvTensors>,
    target: QkvTensors,
    components: &[QkvComponent],
    step: usize,
    total: usize,
    fraction: f64,
) -> Result<QkvTensors> {
    check_fraction("injection fraction", fraction)?;
    if step >= active_steps(fraction, total) || components.is_empty() {
        return Ok(target);
    }
    let src = source_cache.ok_or_else(|| FlowError::State(format!("no source attention cache for step {step}")))?;
    let mut out = target;
    for c in components {
        let (dst, from) = match c {
            QkvComponent::Q => (&mut out.q, &src.q),
            QkvComponent::K => (&mut out.k, &src.k),
            QkvComponent::V => (&mut out.v, &src.v),
        };
        from.same_shape(dst)?;
        *dst = from.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionScope {
    /// Every token of the joint sequence.
    #[default]
    AllTokens,
    /// Data tokens only; text-token rows keep the target's values.
    DataTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationGuidance {
    /// Compensations under the inversion weight `w_inv`.
    Inversion,
    /// Compensations under the editing weight `w_edit`, so the source branch
    /// replays the reconstruction at the weight the target branch uses.
    #[default]
    Editing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditOptions {
    pub feature_point: FeaturePoint,
    /// Blocks where the Map applies; `None` means every block.
    pub map_blocks: Option<Vec<usize>>,
    pub injection_scope: InjectionScope,
    pub compensation_guidance: CompensationGuidance,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            feature_point: FeaturePoint::PostModulation,
            map_blocks: None,
            injection_scope: InjectionScope::AllTokens,
            compensation_guidance: CompensationGuidance::Editing,
        }
    }
}

/// Source-branch activations of one sample in one block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockCache {
    pub text_features: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Source-branch caches of one regeneration step, indexed `[sample][block]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepCache {
    pub samples: Vec<Vec<BlockCache>>,
}

/// Both regeneration branches plus the source caches, all indexed by grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchState {
    pub source: Vec<Tensor>,
    pub target: Vec<Tensor>,
    pub caches: Vec<StepCache>,
}

impl DualBranchState {
    /// Writes the caches as a JSON header line followed by little-endian f64 values in
    /// `step, sample, block, [text_features, q, k, v]` order.
    pub fn write_cache_dump(&self, out: &mut impl Write, arch: &DitArch) -> Result<()> {
        let samples = self.caches.first().map_or(0, |c| c.samples.len());
        let header = serde_json::json!({
            "format": "flowinv-cache-v1",
            "steps": self.caches.len(),
            "samples": samples,
            "blocks": arch.blocks,
            "order": ["text_features", "q", "k", "v"],
            "text_features": [arch.text_len, arch.width],
            "q": [arch.tokens(), arch.width],
            "k": [arch.tokens(), arch.width],
            "v": [arch.tokens(), arch.width],
        });
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for step in &self.caches {
            for sample in &step.samples {
                for block in sample {
                    for v in block.text_features.iter().chain(&block.q).chain(&block.k).chain(&block.v) {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }
}

struct CaptureHook {
    point: FeaturePoint,
    samples: Vec<Vec<BlockCache>>,
}

impl ForwardHook for CaptureHook {
    fn feature_point(&self) -> FeaturePoint {
        self.point
    }

    fn text_features(&mut self, sample: usize, block: usize, features: &mut [f64]) {
        self.samples[sample][block].text_features = features.to_vec();
    }

    fn qkv(&mut self, sample: usize, block: usize, q: &mut [f64], k: &mut [f64], v: &mut [f64]) {
        let c = &mut self.samples[sample][block];
        c.q = q.to_vec();
        c.k = k.to_vec();
        c.v = v.to_vec();
    }
}

struct EditHook<'a> {
    spec: &'a EditSpec,
    opts: &'a EditOptions,
    cache: &'a StepCache,
    arch: DitArch,
    step: usize,
    total: usize,
    mapped: bool,
    injected: bool,
    error: Option<FlowError>,
}

impl EditHook<'_> {
    fn record(&mut self, r: Result<()>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl ForwardHook for EditHook<'_> {
    fn feature_point(&self) -> FeaturePoint {
        self.opts.feature_point
    }

    fn text_features(&mut self, sample: usize, block: usize, features: &mut [f64]) {
        if self.opts.map_blocks.as_ref().is_some_and(|b| !b.contains(&block)) {
            return;
        }
        if self.step >= active_steps(self.spec.s_fraction, self.total) {
            return;
        }
        let (j, d) = (self.arch.text_len, self.arch.width);
        let src = &self.cache.samples[sample][block].text_features;
        let r = (|| {
            let m_source = TokenFeatures::new(Tensor::new(vec![j, d], src.clone())?, self.spec.source_tokens.clone())?;
            let m_target =
                TokenFeatures::new(Tensor::new(vec![j, d], features.to_vec())?, self.spec.target_tokens.clone())?;
            let mapped = adaln_map(&m_source, &m_target, self.spec, self.step, self.total)?;
            features.copy_from_slice(mapped.matrix.data());
            Ok(())
        })();
        self.mapped = true;
        self.record(r);
    }

    fn qkv(&mut self, sample: usize, block: usize, q: &mut [f64], k: &mut [f64], v: &mut [f64]) {
        let Some(inj) = &self.spec.attention_injection else { return };
        if self.step >= active_steps(inj.fraction, self.total) || inj.components.is_empty() {
            return;
        }
        let (n, d) = (self.arch.tokens(), self.arch.width);
        let c = &self.cache.samples[sample][block];
        let r = (|| {
            let t = |s: &[f64]| Tensor::new(vec![n, d], s.to_vec());
            let src = QkvTensors { q: t(&c.q)?, k: t(&c.k)?, v: t(&c.v)? };
            let tgt = QkvTensors { q: t(q)?, k: t(k)?, v: t(v)? };
            let out = attention_inject(Some(&src), tgt, &inj.components, self.step, self.total, inj.fraction)?;
            let first = match self.opts.injection_scope {
                InjectionScope::AllTokens => 0,
                InjectionScope::DataTokens => self.arch.text_len * d,
            };
            q[first..].copy_from_slice(&out.q.data()[first..]);
            k[first..].copy_from_slice(&out.k.data()[first..]);
            v[first..].copy_from_slice(&out.v.data()[first..]);
            Ok(())
        })();
        self.injected = true;
        self.record(r);
    }
}

/// Guided velocity with hooks on the conditional pass only; arithmetic matches
/// [`crate::samplers::cfg_velocity`] so unhooked branches agree bitwise.
fn hooked_guided_velocity(
    model: &MiniDiT,
    x: &Tensor,
    sigma: f64,
    tokens: &[u32],
    w: f64,
    hook: &mut dyn ForwardHook,
) -> Result<Tensor> {
    let cond = model.forward_hooked(x, sigma, Some(tokens), hook)?;
    if w == 1.0 {
        return Ok(cond);
    }
    let uncond = model.velocity(x, sigma, None)?;
    let diff = cond.sub(&uncond)?;
    uncond.axpy(w, &diff)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditMetrics {
    /// Steps in which the Map replaced at least one block's features.
    pub map_steps: usize,
    /// Steps in which attention inputs were injected.
    pub injection_steps: usize,
    /// Relative L∞ error of the source-branch reconstruction.
    pub recon_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited: Tensor,
    pub reconstruction: Tensor,
    pub inversion: InversionResult,
    pub state: DualBranchState,
    pub metrics: EditMetrics,
}

/// Guidance weights and inversion settings of an edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSettings {
    pub grid: TimeGrid,
    pub fixed_point: FixedPointConfig,
    pub w_inv: f64,
    pub w_edit: f64,
    pub options: EditOptions,
}

pub fn edit_pipeline(model: &MiniDiT, x1: &Tensor, spec: &EditSpec, settings: &EditSettings) -> Result<EditOutcome> {
    let arch = *model.arch();
    if spec.source_tokens.len() != arch.text_len {
        return Err(FlowError::invalid(format!(
            "prompts have {} tokens, model expects {}",
            spec.source_tokens.len(),
            arch.text_len
        )));
    }
    let grid = &settings.grid;
    let total = grid.steps();
    let src = Condition::new(spec.source_tokens.clone(), settings.w_inv);
    let inv = invert(model, x1, grid, Some(&src), &settings.fixed_point)?;
    let w_src = match settings.options.compensation_guidance {
        CompensationGuidance::Inversion => settings.w_inv,
        CompensationGuidance::Editing => settings.w_edit,
    };
    let inv = compute_compensations(model, &inv, Some(&src.with_guidance(w_src)))?;

    let n = x1.rows();
    let mut source = vec![inv.noise_latent().clone()];
    let mut target = vec![inv.noise_latent().clone()];
    let mut caches = Vec::with_capacity(total);
    let (mut map_steps, mut injection_steps) = (0, 0);
    for t in 0..total {
        let sigma = grid.sigma(t);
        let h = grid.sigma(t + 1) - sigma;
        let mut capture = CaptureHook {
            point: settings.options.feature_point,
            samples: vec![vec![BlockCache::default(); arch.blocks]; n],
        };
        let v_src = hooked_guided_velocity(model, &source[t], sigma, &spec.source_tokens, w_src, &mut capture)?;
        let next_src = source[t].axpy(h, &v_src)?.add(&inv.compensations[t])?;
        let cache = StepCache { samples: capture.samples };

        let mut hook = EditHook {
            spec,
            opts: &settings.options,
            cache: &cache,
            arch,
            step: t,
            total,
            mapped: false,
            injected: false,
            error: None,
        };
        let v_tgt = hooked_guided_velocity(model, &target[t], sigma, &spec.target_tokens, settings.w_edit, &mut hook)?;
        if let Some(e) = hook.error {
            return Err(e);
        }
        map_steps += usize::from(hook.mapped);
        injection_steps += usize::from(hook.injected);
        let next_tgt = target[t].axpy(h, &v_tgt)?.add(&inv.compensations[t])?;
        next_tgt.ensure_finite(&format!("target branch step {t}"))?;
        source.push(next_src);
        target.push(next_tgt);
        caches.push(cache);
    }
    let reconstruction = source[total].clone();
    let edited = target[total].clone();
    let recon_rel_err = relative_linf(&reconstruction, x1)?;
    Ok(EditOutcome {
        edited,
        reconstruction,
        inversion: inv,
        state: DualBranchState { source, target, caches },
        metrics: EditMetrics { map_steps, injection_steps, recon_rel_err },
    })
}

/// Edit quality on the two-factor dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorMetrics {
    /// Mean L2 displacement of the unedited factors' coordinates from the input.
    pub preservation_error: f64,
    /// Fraction of samples whose edited factors classify to the target prompt's means.
    pub attainment_rate: f64,
}

/// Scores an edit of two-factor samples: factor `k` occupies coordinates `2k..2k+2`.
pub fn factor_metrics(
    x1: &Tensor,
    edited: &Tensor,
    spec: &EditSpec,
    means: &[[[f64; 2]; 2]; 2],
) -> Result<FactorMetrics> {
    x1.same_shape(edited)?;
    if x1.cols() != 4 || spec.target_tokens.len() != 2 {
        return Err(FlowError::invalid("factor metrics need two-factor samples and prompts"));
    }
    let (ta, tb) = crate::training::decode_prompt(&spec.target_tokens)?;
    let target_idx = [ta, tb];
    let mut preservation = 0.0;
    let mut hits = 0usize;
    for i in 0..x1.rows() {
        let (a, b) = (x1.row(i), edited.row(i));
        let mut all_hit = true;
        for f in 0..2 {
            let r = 2 * f..2 * f + 2;
            if spec.edited_indices.contains(&f) {
                all_hit &= crate::training::nearest_mean(&b[r], &means[f]) == target_idx[f];
            } else {
                preservation += a[r.clone()].iter().zip(&b[r]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            }
        }
        hits += usize::from(all_hit);
    }
    let rows = x1.rows() as f64;
    let kept = (0..2).filter(|f| !spec.edited_indices.contains(f)).count() as f64;
    Ok(FactorMetrics {
        preservation_error: if kept > 0.0 { preservation / (rows * kept) } else { 0.0 },
        attainment_rate: hits as f64 / rows,
    })
}
