//! Two-stream AdaLN transformer over `[text; data]` tokens with joint single-head attention.
//!
//! Per block and stream, `SiLU(c)` of the timestep embedding `c` is projected to
//! `(shift1, scale1, gate1, shift2, scale2, gate2)`. Each token is normalized, modulated
//! (`LN(x)(1 + scale) + shift`), projected to Q/K/V with the stream's own weights and
//! attended jointly; the attention output and a SiLU feed-forward are added back through
//! the gates. The data tokens leave through a final modulated norm and a linear head.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::{check_request, VelocityField};
use crate::nn::{
    check_embedding_width, layer_norm, layer_norm_backward, silu, silu_grad, sinusoidal_embedding, Dense, Layout,
};
use crate::numerics::{RngStream, Tensor};
use crate::training::TrainableField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitArch {
    pub data_dim: usize,
    /// Coordinates per data token.
    pub patch: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub width: usize,
    pub ff: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub max_freq: f64,
    /// Adds the mean of a second embedding of the other prompt tokens to each text
    /// token, so a token's features depend on its context.
    #[serde(default)]
    pub text_context: bool,
}

impl Default for DitArch {
    fn default() -> Self {
        Self {
            data_dim: 4,
            patch: 2,
            text_len: 2,
            vocab: 5,
            width: 16,
            ff: 32,
            blocks: 2,
            time_features: 16,
            max_freq: 100.0,
            text_context: false,
        }
    }
}

impl DitArch {
    pub fn data_tokens(&self) -> usize {
        self.data_dim / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.text_len + self.data_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::Configuration(m));
        if self.patch == 0 || self.data_dim == 0 || !self.data_dim.is_multiple_of(self.patch) {
            return bad(format!("data dim {} is not a multiple of patch {}", self.data_dim, self.patch));
        }
        if self.text_len == 0 || self.vocab == 0 || self.width == 0 || self.ff == 0 || self.blocks == 0 {
            return bad("mini-DiT sizes must be positive".into());
        }
        check_embedding_width(self.time_features)
    }
}

/// Where text-token features are exposed to hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePoint {
    /// After AdaLN modulation, before the Q/K/V projections.
    #[default]
    PostModulation,
    /// The residual stream entering the block.
    BlockInput,
}

/// Capture/override points of a forward pass. Slices are row-major `tokens × width`.
pub trait ForwardHook {
    fn feature_point(&self) -> FeaturePoint {
        FeaturePoint::PostModulation
    }

    /// Text-token features of `block` (`text_len` rows).
    fn text_features(&mut self, _sample: usize, _block: usize, _features: &mut [f64]) {}

    /// Joint-attention inputs over `[text; data]`.
    fn qkv(&mut self, _sample: usize, _block: usize, _q: &mut [f64], _k: &mut [f64], _v: &mut [f64]) {}
}

pub struct NoHook;

impl ForwardHook for NoHook {}

#[derive(Debug, Clone, PartialEq)]
struct StreamOffsets {
    ada: Dense,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct Offsets {
    tok_emb: usize,
    ctx_emb: Option<usize>,
    text_pos: usize,
    data_in: Dense,
    data_pos: usize,
    t1: Dense,
    t2: Dense,
    blocks: Vec<[StreamOffsets; 2]>,
    final_ada: Dense,
    head: Dense,
}

fn build_layout(a: &DitArch) -> (Layout, Offsets) {
    let d = a.width;
    let mut l = Layout::default();
    let tok_emb = l.push("tok_emb", a.vocab, d);
    let ctx_emb = a.text_context.then(|| l.push("ctx_emb", a.vocab, d));
    let text_pos = l.push("text_pos", a.text_len, d);
    let data_in = l.dense("data_in", d, a.patch, true);
    let data_pos = l.push("data_pos", a.data_tokens(), d);
    let t1 = l.dense("time.0", d, a.time_features, true);
    let t2 = l.dense("time.1", d, d, true);
    let mut blocks = Vec::with_capacity(a.blocks);
    for b in 0..a.blocks {
        let stream = |l: &mut Layout, s: &str| {
            let p = format!("blocks.{b}.{s}");
            StreamOffsets {
                ada: l.dense(&format!("{p}.ada"), 6 * d, d, true),
                q: l.dense(&format!("{p}.q"), d, d, true),
                k: l.dense(&format!("{p}.k"), d, d, false),
                v: l.dense(&format!("{p}.v"), d, d, true),
                o: l.dense(&format!("{p}.o"), d, d, true),
                ff1: l.dense(&format!("{p}.ff1"), a.ff, d, true),
                ff2: l.dense(&format!("{p}.ff2"), d, a.ff, true),
            }
        };
        let text = stream(&mut l, "text");
        let data = stream(&mut l, "data");
        blocks.push([text, data]);
    }
    let final_ada = l.dense("final.ada", 2 * d, d, true);
    let head = l.dense("head", a.patch, d, true);
    (l, Offsets { tok_emb, ctx_emb, text_pos, data_in, data_pos, t1, t2, blocks, final_ada, head })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniDiT {
    arch: DitArch,
    layout: Layout,
    off: Offsets,
    params: Vec<f64>,
}

struct BlockTape {
    mods: [Vec<f64>; 2],
    n1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
    y: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    f: Vec<f64>,
}

struct Tape {
    tokens: Vec<u32>,
    patches: Vec<f64>,
    emb: Vec<f64>,
    t1z: Vec<f64>,
    c: Vec<f64>,
    m: Vec<f64>,
    blocks: Vec<BlockTape>,
    fmod: Vec<f64>,
    nf: Vec<f64>,
    invf: Vec<f64>,
    zf: Vec<f64>,
}

impl MiniDiT {
    /// Random initialization with zeroed gates and output head.
    pub fn new(arch: DitArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let (layout, off) = build_layout(&arch);
        let mut p = vec![0.0; layout.total()];
        let d = arch.width;
        for v in &mut p[off.tok_emb..off.tok_emb + arch.vocab * d] {
            *v = rng.normal();
        }
        if let Some(ctx) = off.ctx_emb {
            for v in &mut p[ctx..ctx + arch.vocab * d] {
                *v = rng.normal();
            }
        }
        for i in
            (off.text_pos..off.text_pos + arch.text_len * d).chain(off.data_pos..off.data_pos + arch.data_tokens() * d)
        {
            p[i] = 0.1 * rng.normal();
        }
        off.data_in.init(&mut p, rng, 1.0);
        off.t1.init(&mut p, rng, 1.0);
        off.t2.init(&mut p, rng, 1.0);
        for block in &off.blocks {
            for s in block {
                s.ada.init(&mut p, rng, 0.5);
                for gate in [2, 5] {
                    p[s.ada.w + gate * d * d..s.ada.w + (gate + 1) * d * d].fill(0.0);
                }
                for dense in [&s.q, &s.k, &s.v, &s.o, &s.ff1, &s.ff2] {
                    dense.init(&mut p, rng, 1.0);
                }
            }
        }
        off.final_ada.init(&mut p, rng, 0.5);
        Ok(Self { arch, layout, off, params: p })
    }

    pub fn from_params(arch: DitArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (layout, off) = build_layout(&arch);
        if params.len() != layout.total() {
            return Err(FlowError::Configuration(format!(
                "mini-DiT expects {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Configuration("non-finite mini-DiT parameter".into()));
        }
        Ok(Self { arch, layout, off, params })
    }

    pub fn arch(&self) -> &DitArch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn resolve_tokens(&self, tokens: Option<&[u32]>) -> Result<Vec<u32>> {
        match tokens {
            None => Ok(vec![0; self.arch.text_len]),
            Some(t) => {
                if t.len() != self.arch.text_len {
                    return Err(FlowError::invalid(format!(
                        "prompt has {} tokens, model expects {}",
                        t.len(),
                        self.arch.text_len
                    )));
                }
                if let Some(bad) = t.iter().find(|&&id| id as usize >= self.arch.vocab) {
                    return Err(FlowError::invalid(format!("unknown token id {bad}")));
                }
                Ok(t.to_vec())
            }
        }
    }

    /// Velocity over the data tokens with hooks applied.
    pub fn forward_hooked(
        &self,
        x: &Tensor,
        sigma: f64,
        tokens: Option<&[u32]>,
        hook: &mut dyn ForwardHook,
    ) -> Result<Tensor> {
        check_request(x, sigma, self.arch.data_dim)?;
        let toks = self.resolve_tokens(tokens)?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let (v, _) = self.forward_one(x.row(i), sigma, &toks, Some((hook, i)));
            out.row_mut(i).copy_from_slice(&v);
        }
        out.ensure_finite("mini-DiT output")?;
        Ok(out)
    }

    fn forward_one(
        &self,
        x: &[f64],
        sigma: f64,
        tokens: &[u32],
        mut hook: Option<(&mut dyn ForwardHook, usize)>,
    ) -> (Vec<f64>, Tape) {
        let a = &self.arch;
        let p = &self.params;
        let o = &self.off;
        let d = a.width;
        let jt = a.text_len;
        let nt = a.tokens();

        let mut h = vec![0.0; nt * d];
        for (k, &tok) in tokens.iter().enumerate() {
            let e = &p[o.tok_emb + tok as usize * d..o.tok_emb + (tok as usize + 1) * d];
            let pos = &p[o.text_pos + k * d..o.text_pos + (k + 1) * d];
            for c in 0..d {
                h[k * d + c] = e[c] + pos[c];
            }
            if let (Some(ctx), true) = (o.ctx_emb, jt > 1) {
                let w = 1.0 / (jt - 1) as f64;
                for (j, &other) in tokens.iter().enumerate() {
                    if j != k {
                        for c in 0..d {
                            h[k * d + c] += w * p[ctx + other as usize * d + c];
                        }
                    }
                }
            }
        }
        for n in 0..a.data_tokens() {
            let row = &mut h[(jt + n) * d..(jt + n + 1) * d];
            o.data_in.forward(p, &x[n * a.patch..(n + 1) * a.patch], row);
            for c in 0..d {
                row[c] += p[o.data_pos + n * d + c];
            }
        }

        let emb = sinusoidal_embedding(sigma, a.time_features, a.max_freq);
        let t1z = o.t1.apply(p, &emb);
        let t1a: Vec<f64> = t1z.iter().map(|&v| silu(v)).collect();
        let c = o.t2.apply(p, &t1a);
        let m: Vec<f64> = c.iter().map(|&v| silu(v)).collect();

        let stream_of = |i: usize| usize::from(i >= jt);
        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(a.blocks);
        for (bi, so) in o.blocks.iter().enumerate() {
            let mods = [so[0].ada.apply(p, &m), so[1].ada.apply(p, &m)];
            if let Some((hk, sample)) = hook.as_mut() {
                if hk.feature_point() == FeaturePoint::BlockInput {
                    hk.text_features(*sample, bi, &mut h[..jt * d]);
                }
            }
            let mut n1 = vec![0.0; nt * d];
            let mut inv1 = vec![0.0; nt];
            let mut h1 = vec![0.0; nt * d];
            for i in 0..nt {
                let md = &mods[stream_of(i)];
                let (y, inv) = layer_norm(&h[i * d..(i + 1) * d]);
                for c in 0..d {
                    h1[i * d + c] = y[c] * (1.0 + md[d + c]) + md[c];
                }
                n1[i * d..(i + 1) * d].copy_from_slice(&y);
                inv1[i] = inv;
            }
            if let Some((hk, sample)) = hook.as_mut() {
                if hk.feature_point() == FeaturePoint::PostModulation {
                    hk.text_features(*sample, bi, &mut h1[..jt * d]);
                }
            }
            let mut q = vec![0.0; nt * d];
            let mut k = vec![0.0; nt * d];
            let mut v = vec![0.0; nt * d];
            for i in 0..nt {
                let s = &so[stream_of(i)];
                let hi = &h1[i * d..(i + 1) * d];
                s.q.forward(p, hi, &mut q[i * d..(i + 1) * d]);
                s.k.forward(p, hi, &mut k[i * d..(i + 1) * d]);
                s.v.forward(p, hi, &mut v[i * d..(i + 1) * d]);
            }
            if let Some((hk, sample)) = hook.as_mut() {
                hk.qkv(*sample, bi, &mut q, &mut k, &mut v);
            }
            let mut probs = vec![0.0; nt * nt];
            let mut att = vec![0.0; nt * d];
            for i in 0..nt {
                let row = &mut probs[i * nt..(i + 1) * nt];
                for j in 0..nt {
                    row[j] = scale * dot(&q[i * d..(i + 1) * d], &k[j * d..(j + 1) * d]);
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                for j in 0..nt {
                    let pij = row[j];
                    for c in 0..d {
                        att[i * d + c] += pij * v[j * d + c];
                    }
                }
            }
            let mut y = vec![0.0; nt * d];
            let mut n2 = vec![0.0; nt * d];
            let mut inv2 = vec![0.0; nt];
            let mut z1 = vec![0.0; nt * a.ff];
            let mut a1 = vec![0.0; nt * a.ff];
            let mut f = vec![0.0; nt * d];
            for i in 0..nt {
                let s = &so[stream_of(i)];
                let md = &mods[stream_of(i)];
                s.o.forward(p, &att[i * d..(i + 1) * d], &mut y[i * d..(i + 1) * d]);
                for c in 0..d {
                    h[i * d + c] += md[2 * d + c] * y[i * d + c];
                }
                let (ny, inv) = layer_norm(&h[i * d..(i + 1) * d]);
                let h2: Vec<f64> = (0..d).map(|c| ny[c] * (1.0 + md[4 * d + c]) + md[3 * d + c]).collect();
                s.ff1.forward(p, &h2, &mut z1[i * a.ff..(i + 1) * a.ff]);
                for r in 0..a.ff {
                    a1[i * a.ff + r] = silu(z1[i * a.ff + r]);
                }
                s.ff2.forward(p, &a1[i * a.ff..(i + 1) * a.ff], &mut f[i * d..(i + 1) * d]);
                for c in 0..d {
                    h[i * d + c] += md[5 * d + c] * f[i * d + c];
                }
                n2[i * d..(i + 1) * d].copy_from_slice(&ny);
                inv2[i] = inv;
            }
            blocks.push(BlockTape { mods, n1, inv1, h1, q, k, v, p: probs, o: att, y, n2, inv2, z1, a1, f });
        }

        let fmod = o.final_ada.apply(p, &m);
        let nd = a.data_tokens();
        let mut nf = vec![0.0; nd * d];
        let mut invf = vec![0.0; nd];
        let mut zf = vec![0.0; nd * d];
        let mut out = vec![0.0; a.data_dim];
        for n in 0..nd {
            let i = jt + n;
            let (ny, inv) = layer_norm(&h[i * d..(i + 1) * d]);
            for c in 0..d {
                zf[n * d + c] = ny[c] * (1.0 + fmod[d + c]) + fmod[c];
            }
            o.head.forward(p, &zf[n * d..(n + 1) * d], &mut out[n * a.patch..(n + 1) * a.patch]);
            nf[n * d..(n + 1) * d].copy_from_slice(&ny);
            invf[n] = inv;
        }
        let tape = Tape { tokens: tokens.to_vec(), patches: x.to_vec(), emb, t1z, c, m, blocks, fmod, nf, invf, zf };
        (out, tape)
    }

    fn backward_one(&self, tape: &Tape, dout: &[f64], g: &mut [f64]) {
        let a = &self.arch;
        let p = &self.params;
        let o = &self.off;
        let d = a.width;
        let jt = a.text_len;
        let nt = a.tokens();
        let nd = a.data_tokens();
        let stream_of = |i: usize| usize::from(i >= jt);
        let scale = 1.0 / (d as f64).sqrt();

        let mut dm = vec![0.0; d];
        let mut dh = vec![0.0; nt * d];
        let mut dfmod = vec![0.0; 2 * d];
        for n in 0..nd {
            let i = jt + n;
            let mut dz = vec![0.0; d];
            o.head.backward(p, &tape.zf[n * d..(n + 1) * d], &dout[n * a.patch..(n + 1) * a.patch], g, Some(&mut dz));
            let ny = &tape.nf[n * d..(n + 1) * d];
            let mut dn = vec![0.0; d];
            for c in 0..d {
                dfmod[c] += dz[c];
                dfmod[d + c] += dz[c] * ny[c];
                dn[c] = dz[c] * (1.0 + tape.fmod[d + c]);
            }
            layer_norm_backward(ny, tape.invf[n], &dn, &mut dh[i * d..(i + 1) * d]);
        }
        o.final_ada.backward(p, &tape.m, &dfmod, g, Some(&mut dm));

        for (bi, so) in o.blocks.iter().enumerate().rev() {
            let t = &tape.blocks[bi];
            let mut dmods = [vec![0.0; 6 * d], vec![0.0; 6 * d]];
            let mut datt = vec![0.0; nt * d];
            for i in 0..nt {
                let st = stream_of(i);
                let s = &so[st];
                let md = &t.mods[st];
                let dmd = &mut dmods[st];
                let dhi: Vec<f64> = dh[i * d..(i + 1) * d].to_vec();
                // feed-forward branch
                let mut df = vec![0.0; d];
                for c in 0..d {
                    dmd[5 * d + c] += dhi[c] * t.f[i * d + c];
                    df[c] = dhi[c] * md[5 * d + c];
                }
                let mut da1 = vec![0.0; a.ff];
                s.ff2.backward(p, &t.a1[i * a.ff..(i + 1) * a.ff], &df, g, Some(&mut da1));
                let dz1: Vec<f64> = (0..a.ff).map(|r| da1[r] * silu_grad(t.z1[i * a.ff + r])).collect();
                let ny = &t.n2[i * d..(i + 1) * d];
                let h2: Vec<f64> = (0..d).map(|c| ny[c] * (1.0 + md[4 * d + c]) + md[3 * d + c]).collect();
                let mut dh2 = vec![0.0; d];
                s.ff1.backward(p, &h2, &dz1, g, Some(&mut dh2));
                let mut dn2 = vec![0.0; d];
                for c in 0..d {
                    dmd[3 * d + c] += dh2[c];
                    dmd[4 * d + c] += dh2[c] * ny[c];
                    dn2[c] = dh2[c] * (1.0 + md[4 * d + c]);
                }
                layer_norm_backward(ny, t.inv2[i], &dn2, &mut dh[i * d..(i + 1) * d]);
                // attention branch
                let mut dy = vec![0.0; d];
                for c in 0..d {
                    let dmid = dh[i * d + c];
                    dmd[2 * d + c] += dmid * t.y[i * d + c];
                    dy[c] = dmid * md[2 * d + c];
                }
                s.o.backward(p, &t.o[i * d..(i + 1) * d], &dy, g, Some(&mut datt[i * d..(i + 1) * d]));
            }
            let mut dq = vec![0.0; nt * d];
            let mut dk = vec![0.0; nt * d];
            let mut dv = vec![0.0; nt * d];
            for i in 0..nt {
                let pi = &t.p[i * nt..(i + 1) * nt];
                let doi = &datt[i * d..(i + 1) * d];
                let dp: Vec<f64> = (0..nt).map(|j| dot(doi, &t.v[j * d..(j + 1) * d])).collect();
                let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..nt {
                    for c in 0..d {
                        dv[j * d + c] += pi[j] * doi[c];
                    }
                    let ds = pi[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        dq[i * d + c] += ds * t.k[j * d + c];
                        dk[j * d + c] += ds * t.q[i * d + c];
                    }
                }
            }
            for i in 0..nt {
                let st = stream_of(i);
                let s = &so[st];
                let md = &t.mods[st];
                let hi = &t.h1[i * d..(i + 1) * d];
                let mut dh1 = vec![0.0; d];
                s.q.backward(p, hi, &dq[i * d..(i + 1) * d], g, Some(&mut dh1));
                s.k.backward(p, hi, &dk[i * d..(i + 1) * d], g, Some(&mut dh1));
                s.v.backward(p, hi, &dv[i * d..(i + 1) * d], g, Some(&mut dh1));
                let ny = &t.n1[i * d..(i + 1) * d];
                let mut dn1 = vec![0.0; d];
                let dmd = &mut dmods[st];
                for c in 0..d {
                    dmd[c] += dh1[c];
                    dmd[d + c] += dh1[c] * ny[c];
                    dn1[c] = dh1[c] * (1.0 + md[d + c]);
                }
                layer_norm_backward(ny, t.inv1[i], &dn1, &mut dh[i * d..(i + 1) * d]);
            }
            so[0].ada.backward(p, &tape.m, &dmods[0], g, Some(&mut dm));
            so[1].ada.backward(p, &tape.m, &dmods[1], g, Some(&mut dm));
        }

        for (k, &tok) in tape.tokens.iter().enumerate() {
            for c in 0..d {
                g[o.tok_emb + tok as usize * d + c] += dh[k * d + c];
                g[o.text_pos + k * d + c] += dh[k * d + c];
            }
            if let (Some(ctx), true) = (o.ctx_emb, jt > 1) {
                let w = 1.0 / (jt - 1) as f64;
                for (j, &other) in tape.tokens.iter().enumerate() {
                    if j != k {
                        for c in 0..d {
                            g[ctx + other as usize * d + c] += w * dh[k * d + c];
                        }
                    }
                }
            }
        }
        for n in 0..nd {
            let row = &dh[(jt + n) * d..(jt + n + 1) * d];
            for c in 0..d {
                g[o.data_pos + n * d + c] += row[c];
            }
            o.data_in.backward(p, &tape.patches[n * a.patch..(n + 1) * a.patch], row, g, None);
        }

        let dc: Vec<f64> = (0..d).map(|c| dm[c] * silu_grad(tape.c[c])).collect();
        let t1a: Vec<f64> = tape.t1z.iter().map(|&v| silu(v)).collect();
        let mut dt1a = vec![0.0; d];
        o.t2.backward(p, &t1a, &dc, g, Some(&mut dt1a));
        let dt1z: Vec<f64> = (0..d).map(|r| dt1a[r] * silu_grad(tape.t1z[r])).collect();
        o.t1.backward(p, &tape.emb, &dt1z, g, None);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl VelocityField for MiniDiT {
    fn dim(&self) -> usize {
        self.arch.data_dim
    }

    fn velocity(&self, x: &Tensor, sigma: f64, tokens: Option<&[u32]>) -> Result<Tensor> {
        self.forward_hooked(x, sigma, tokens, &mut NoHook)
    }
}

impl TrainableField for MiniDiT {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
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
        let toks = self.resolve_tokens(tokens)?;
        let (v, tape) = self.forward_one(x, sigma, &toks, None);
        let resid: Vec<f64> = v.iter().zip(target).map(|(a, b)| a - b).collect();
        let se = resid.iter().map(|r| r * r).sum::<f64>();
        let dout: Vec<f64> = resid.iter().map(|r| 2.0 * weight * r).collect();
        self.backward_one(&tape, &dout, grad);
        Ok(se)
    }
}
