//! Quantization-aware transformer: linear layers whose three GEMMs each
//! carry their own precision setting, attention blocks with full-precision
//! internals, and GPT-style (GELU + LayerNorm + learned positions) and
//! LLaMA-style (SwiGLU + RMSNorm + rotary) families.
//!
//! Master weights are full precision and never mutated by quantization;
//! forward runs on transient quantized copies and the weight gradient is
//! assigned straight through to the master parameter. Quantization touches
//! GEMM operand values only — control flow is identical with it disabled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{quantize_tensor, AxisSemantics, Granularity, QuantConfig};
use crate::recipe::{GemmPrecision, GemmTriple, LinearRole, PrecisionRecipe};
use crate::tensor::{
    cross_entropy, embedding, gelu, gelu_prime, layer_norm_bwd, layer_norm_fwd, rms_norm_bwd,
    rms_norm_fwd, silu, silu_prime, softmax_rows, Tensor, NORM_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Gpt,
    Llama,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelFamily::Gpt => write!(f, "gpt"),
            ModelFamily::Llama => write!(f, "llama"),
        }
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(ModelFamily::Gpt),
            "llama" => Ok(ModelFamily::Llama),
            _ => Err(Error::Config(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub family: ModelFamily,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.hidden == 0
            || self.ffn_hidden == 0
            || self.heads == 0
            || self.seq_len == 0
            || self.vocab == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.family == ModelFamily::Llama && (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(
                "rotary embeddings need an even head dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Accumulator for parameter gradients, keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    map: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accum(&mut self, name: &str, t: Tensor) {
        match self.map.get_mut(name) {
            Some(existing) => existing
                .add_scaled(&t, 1.0)
                .expect("gradient shapes are fixed per parameter"),
            None => {
                self.map.insert(name.to_string(), t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A linear layer `y = x @ w^T (+ b)` whose three GEMMs quantize their
/// operands per the active recipe. The stored weight is the master copy.
#[derive(Debug, Clone)]
pub struct QuantLinear {
    pub name: String,
    pub role: LinearRole,
    pub weight: Tensor,       // [out, in]
    pub bias: Option<Tensor>, // [out]
}

/// Quantized operands saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct LinearCache {
    pub qx: Tensor,
    pub qw: Tensor,
}

/// Adapt a GEMM-level granularity to one operand: row/column granularities
/// pair up as per-token on activations and per-channel on weights.
fn operand_cfg(cfg: &QuantConfig, sem: AxisSemantics) -> QuantConfig {
    let granularity = match (cfg.granularity, sem) {
        (Granularity::PerToken | Granularity::PerChannel, AxisSemantics::Weight) => {
            Granularity::PerChannel
        }
        (Granularity::PerToken | Granularity::PerChannel, AxisSemantics::Activation) => {
            Granularity::PerToken
        }
        (g, _) => g,
    };
    QuantConfig {
        granularity,
        ..cfg.clone()
    }
}

fn q_operand(x: &Tensor, p: &GemmPrecision, sem: AxisSemantics, enabled: bool) -> Result<Tensor> {
    match p {
        GemmPrecision::Quantized(cfg) if enabled => {
            let (q, _) = quantize_tensor(x, &operand_cfg(cfg, sem), sem)?;
            Ok(q)
        }
        _ => Ok(x.clone()),
    }
}

impl QuantLinear {
    fn new(name: String, role: LinearRole, weight: Tensor, bias: Option<Tensor>) -> Self {
        QuantLinear {
            name,
            role,
            weight,
            bias,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `y = Q(x) @ Q(w)^T + b`, saving the quantized operands.
    pub fn forward(
        &self,
        x: &Tensor,
        triple: &GemmTriple,
        enabled: bool,
    ) -> Result<(Tensor, LinearCache)> {
        let qx = q_operand(x, &triple.fwd, AxisSemantics::Activation, enabled)?;
        let qw = q_operand(&self.weight, &triple.fwd, AxisSemantics::Weight, enabled)?;
        let mut y = qx.matmul_nt(&qw)?;
        if let Some(b) = &self.bias {
            let (rows, cols) = y.dims2()?;
            let data = y.data_mut();
            for r in 0..rows {
                for (c, bv) in b.data().iter().enumerate().take(cols) {
                    data[r * cols + c] += bv;
                }
            }
        }
        Ok((y, LinearCache { qx, qw }))
    }

    /// Backward: `dx = Q(dy) @ Q(qw)`, `dw = Q(dy)^T @ Q(qx)`. The weight
    /// gradient is computed at the quantized weight and assigned to the
    /// master weight unchanged (straight-through estimator).
    pub fn backward(
        &self,
        cache: &LinearCache,
        dy: &Tensor,
        triple: &GemmTriple,
        enabled: bool,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let qdy_d = q_operand(dy, &triple.dgrad, AxisSemantics::Activation, enabled)?;
        let qw_d = q_operand(&cache.qw, &triple.dgrad, AxisSemantics::Weight, enabled)?;
        let dx = qdy_d.matmul(&qw_d)?;

        let qdy_w = q_operand(dy, &triple.wgrad, AxisSemantics::Activation, enabled)?;
        let qx_w = q_operand(&cache.qx, &triple.wgrad, AxisSemantics::Activation, enabled)?;
        let dw = qdy_w.matmul_tn(&qx_w)?;
        grads.accum(&format!("{}.w", self.name), dw);

        if self.bias.is_some() {
            let (rows, cols) = dy.dims2()?;
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for (c, dbv) in db.iter_mut().enumerate() {
                    *dbv += dy.data()[r * cols + c];
                }
            }
            grads.accum(&format!("{}.b", self.name), Tensor::from_vec(vec![cols], db)?);
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    Layer,
    Rms,
}

#[derive(Debug, Clone)]
struct Norm {
    name: String,
    kind: NormKind,
    gamma: Tensor,
    beta: Option<Tensor>,
}

struct NormCache {
    x: Tensor,
    means: Vec<f64>,
    inv: Vec<f64>,
}

impl Norm {
    fn new(name: String, kind: NormKind, hidden: usize) -> Self {
        Norm {
            name,
            kind,
            gamma: Tensor::from_vec(vec![hidden], vec![1.0; hidden]).unwrap(),
            beta: match kind {
                NormKind::Layer => Some(Tensor::zeros(vec![hidden])),
                NormKind::Rms => None,
            },
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        match self.kind {
            NormKind::Layer => {
                let beta = self.beta.as_ref().expect("layer norm has beta");
                let (y, means, inv) = layer_norm_fwd(x, self.gamma.data(), beta.data(), NORM_EPS);
                (
                    y,
                    NormCache {
                        x: x.clone(),
                        means,
                        inv,
                    },
                )
            }
            NormKind::Rms => {
                let (y, inv) = rms_norm_fwd(x, self.gamma.data(), NORM_EPS);
                (
                    y,
                    NormCache {
                        x: x.clone(),
                        means: Vec::new(),
                        inv,
                    },
                )
            }
        }
    }

    fn backward(&self, cache: &NormCache, dy: &Tensor, grads: &mut GradStore) -> Tensor {
        match self.kind {
            NormKind::Layer => {
                let (dx, dg, db) =
                    layer_norm_bwd(&cache.x, self.gamma.data(), &cache.means, &cache.inv, dy);
                let n = dg.len();
                grads.accum(
                    &format!("{}.g", self.name),
                    Tensor::from_vec(vec![n], dg).unwrap(),
                );
                grads.accum(
                    &format!("{}.b", self.name),
                    Tensor::from_vec(vec![n], db).unwrap(),
                );
                dx
            }
            NormKind::Rms => {
                let (dx, dg) = rms_norm_bwd(&cache.x, self.gamma.data(), &cache.inv, dy);
                let n = dg.len();
                grads.accum(
                    &format!("{}.g", self.name),
                    Tensor::from_vec(vec![n], dg).unwrap(),
                );
                dx
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: QuantLinear,
    proj: QuantLinear,
    heads: usize,
    head_dim: usize,
    rope: bool,
}

struct AttnCache {
    qkv_cache: LinearCache,
    proj_cache: LinearCache,
    q: Tensor, // [S, h], post-rotary
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>, // per head, [S, S]
    ctx: Tensor,
}

/// Copy head `hd` columns out of a `[S, h]` tensor into `[S, d]`.
fn head_slice(x: &Tensor, hd: usize, d: usize) -> Tensor {
    let (s, h) = x.dims2().expect("rank 2");
    let mut out = Vec::with_capacity(s * d);
    for r in 0..s {
        let row = &x.data()[r * h..r * h + h];
        out.extend_from_slice(&row[hd * d..(hd + 1) * d]);
    }
    Tensor::from_vec(vec![s, d], out).unwrap()
}

fn head_scatter_add(dst: &mut Tensor, src: &Tensor, hd: usize, d: usize) {
    let (s, h) = dst.dims2().expect("rank 2");
    for r in 0..s {
        for c in 0..d {
            dst.data_mut()[r * h + hd * d + c] += src.data()[r * d + c];
        }
    }
}

/// Rotary position embedding applied in place per head; `inverse` applies
/// the transpose rotation (the exact backward of the forward map).
fn rope_apply(x: &mut Tensor, heads: usize, d: usize, inverse: bool) {
    let (s, h) = x.dims2().expect("rank 2");
    debug_assert_eq!(h, heads * d);
    let sign = if inverse { -1.0 } else { 1.0 };
    for pos in 0..s {
        let row = &mut x.data_mut()[pos * h..(pos + 1) * h];
        for hd in 0..heads {
            for j in 0..d / 2 {
                let theta = 10_000f64.powf(-2.0 * j as f64 / d as f64);
                let angle = pos as f64 * theta;
                let (sn, cs) = (angle.sin() * sign, angle.cos());
                let i0 = hd * d + 2 * j;
                let (x0, x1) = (row[i0], row[i0 + 1]);
                row[i0] = x0 * cs - x1 * sn;
                row[i0 + 1] = x0 * sn + x1 * cs;
            }
        }
    }
}

impl Attention {
    fn forward(
        &self,
        x: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
    ) -> Result<(Tensor, AttnCache)> {
        let (s, _h) = x.dims2()?;
        let (qkv_out, qkv_cache) = self.qkv.forward(x, &recipe.triple(LinearRole::AttnQkv), enabled)?;
        let hidden = self.heads * self.head_dim;
        let mut q = Tensor::zeros(vec![s, hidden]);
        let mut k = Tensor::zeros(vec![s, hidden]);
        let mut v = Tensor::zeros(vec![s, hidden]);
        for r in 0..s {
            let row = qkv_out.row(r);
            q.data_mut()[r * hidden..(r + 1) * hidden].copy_from_slice(&row[..hidden]);
            k.data_mut()[r * hidden..(r + 1) * hidden].copy_from_slice(&row[hidden..2 * hidden]);
            v.data_mut()[r * hidden..(r + 1) * hidden].copy_from_slice(&row[2 * hidden..]);
        }
        if self.rope {
            rope_apply(&mut q, self.heads, self.head_dim, false);
            rope_apply(&mut k, self.heads, self.head_dim, false);
        }

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        let mut ctx = Tensor::zeros(vec![s, hidden]);
        for hd in 0..self.heads {
            let qh = head_slice(&q, hd, self.head_dim);
            let kh = head_slice(&k, hd, self.head_dim);
            let vh = head_slice(&v, hd, self.head_dim);
            let mut scores = qh.matmul_nt(&kh)?.scale(scale);
            // Causal mask: position i attends to positions <= i.
            for i in 0..s {
                for j in (i + 1)..s {
                    scores.data_mut()[i * s + j] = f64::NEG_INFINITY;
                }
            }
            let p = softmax_rows(&scores);
            let ctx_h = p.matmul(&vh)?;
            head_scatter_add(&mut ctx, &ctx_h, hd, self.head_dim);
            probs.push(p);
        }

        let (y, proj_cache) = self
            .proj
            .forward(&ctx, &recipe.triple(LinearRole::AttnOut), enabled)?;
        Ok((
            y,
            AttnCache {
                qkv_cache,
                proj_cache,
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    fn backward(
        &self,
        cache: &AttnCache,
        dy: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let s = cache.ctx.shape()[0];
        let hidden = self.heads * self.head_dim;
        let dctx = self.proj.backward(
            &cache.proj_cache,
            dy,
            &recipe.triple(LinearRole::AttnOut),
            enabled,
            grads,
        )?;

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut dq = Tensor::zeros(vec![s, hidden]);
        let mut dk = Tensor::zeros(vec![s, hidden]);
        let mut dv = Tensor::zeros(vec![s, hidden]);
        for hd in 0..self.heads {
            let dctx_h = head_slice(&dctx, hd, self.head_dim);
            let qh = head_slice(&cache.q, hd, self.head_dim);
            let kh = head_slice(&cache.k, hd, self.head_dim);
            let vh = head_slice(&cache.v, hd, self.head_dim);
            let p = &cache.probs[hd];

            let dp = dctx_h.matmul_nt(&vh)?;
            let dv_h = p.matmul_tn(&dctx_h)?;
            // Softmax backward: ds = p * (dp - sum_j dp_j p_j); masked
            // entries carry p = 0 and drop out automatically.
            let mut ds = Tensor::zeros(vec![s, s]);
            for i in 0..s {
                let pi = p.row(i);
                let dpi = &dp.data()[i * s..(i + 1) * s];
                let inner: f64 = pi.iter().zip(dpi).map(|(a, b)| a * b).sum();
                let dsi = &mut ds.data_mut()[i * s..(i + 1) * s];
                for j in 0..s {
                    dsi[j] = pi[j] * (dpi[j] - inner) * scale;
                }
            }
            let dq_h = ds.matmul(&kh)?;
            let dk_h = ds.matmul_tn(&qh)?;
            head_scatter_add(&mut dq, &dq_h, hd, self.head_dim);
            head_scatter_add(&mut dk, &dk_h, hd, self.head_dim);
            head_scatter_add(&mut dv, &dv_h, hd, self.head_dim);
        }

        if self.rope {
            rope_apply(&mut dq, self.heads, self.head_dim, true);
            rope_apply(&mut dk, self.heads, self.head_dim, true);
        }

        let mut dqkv = Tensor::zeros(vec![s, 3 * hidden]);
        for r in 0..s {
            let row = &mut dqkv.data_mut()[r * 3 * hidden..(r + 1) * 3 * hidden];
            row[..hidden].copy_from_slice(&dq.data()[r * hidden..(r + 1) * hidden]);
            row[hidden..2 * hidden].copy_from_slice(&dk.data()[r * hidden..(r + 1) * hidden]);
            row[2 * hidden..].copy_from_slice(&dv.data()[r * hidden..(r + 1) * hidden]);
        }
        self.qkv.backward(
            &cache.qkv_cache,
            &dqkv,
            &recipe.triple(LinearRole::AttnQkv),
            enabled,
            grads,
        )
    }
}

#[derive(Debug, Clone)]
struct Ffn {
    family: ModelFamily,
    gate: Option<QuantLinear>,
    up: QuantLinear,
    down: QuantLinear,
}

struct FfnCache {
    gate_cache: Option<LinearCache>,
    up_cache: LinearCache,
    down_cache: LinearCache,
    gate_pre: Option<Tensor>,
    up_pre: Tensor,
}

impl Ffn {
    fn forward(
        &self,
        x: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
    ) -> Result<(Tensor, FfnCache)> {
        match self.family {
            ModelFamily::Gpt => {
                let (a, up_cache) = self.up.forward(x, &recipe.triple(LinearRole::FfnUp), enabled)?;
                let h = a.map(gelu);
                let (y, down_cache) =
                    self.down
                        .forward(&h, &recipe.triple(LinearRole::FfnDown), enabled)?;
                Ok((
                    y,
                    FfnCache {
                        gate_cache: None,
                        up_cache,
                        down_cache,
                        gate_pre: None,
                        up_pre: a,
                    },
                ))
            }
            ModelFamily::Llama => {
                let gate = self.gate.as_ref().expect("llama ffn has a gate");
                let (g, gate_cache) =
                    gate.forward(x, &recipe.triple(LinearRole::FfnGate), enabled)?;
                let (a, up_cache) = self.up.forward(x, &recipe.triple(LinearRole::FfnUp), enabled)?;
                let h = crate::tensor::swiglu(&g, &a)?;
                let (y, down_cache) =
                    self.down
                        .forward(&h, &recipe.triple(LinearRole::FfnDown), enabled)?;
                Ok((
                    y,
                    FfnCache {
                        gate_cache: Some(gate_cache),
                        up_cache,
                        down_cache,
                        gate_pre: Some(g),
                        up_pre: a,
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        cache: &FfnCache,
        dy: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let dh = self.down.backward(
            &cache.down_cache,
            dy,
            &recipe.triple(LinearRole::FfnDown),
            enabled,
            grads,
        )?;
        match self.family {
            ModelFamily::Gpt => {
                let a = &cache.up_pre;
                let mut da = dh;
                for (d, &pre) in da.data_mut().iter_mut().zip(a.data()) {
                    *d *= gelu_prime(pre);
                }
                self.up.backward(
                    &cache.up_cache,
                    &da,
                    &recipe.triple(LinearRole::FfnUp),
                    enabled,
                    grads,
                )
            }
            ModelFamily::Llama => {
                let gate = self.gate.as_ref().expect("llama ffn has a gate");
                let g = cache.gate_pre.as_ref().expect("llama cache has gate");
                let a = &cache.up_pre;
                let mut dg = Tensor::zeros(vec![g.shape()[0], g.shape()[1]]);
                let mut da = Tensor::zeros(vec![a.shape()[0], a.shape()[1]]);
                for i in 0..g.len() {
                    let gv = g.data()[i];
                    let av = a.data()[i];
                    let dhv = dh.data()[i];
                    dg.data_mut()[i] = dhv * av * silu_prime(gv);
                    da.data_mut()[i] = dhv * silu(gv);
                }
                let dx_gate = gate.backward(
                    cache.gate_cache.as_ref().expect("llama cache"),
                    &dg,
                    &recipe.triple(LinearRole::FfnGate),
                    enabled,
                    grads,
                )?;
                let dx_up = self.up.backward(
                    &cache.up_cache,
                    &da,
                    &recipe.triple(LinearRole::FfnUp),
                    enabled,
                    grads,
                )?;
                dx_gate.add(&dx_up)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
}

struct BlockCache {
    n1: NormCache,
    attn: AttnCache,
    n2: NormCache,
    ffn: FfnCache,
}

impl Block {
    fn forward(
        &self,
        x: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
    ) -> Result<(Tensor, BlockCache)> {
        let (n1_out, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&n1_out, recipe, enabled)?;
        let x1 = x.add(&a)?;
        let (n2_out, n2) = self.norm2.forward(&x1);
        let (f, ffn) = self.ffn.forward(&n2_out, recipe, enabled)?;
        let y = x1.add(&f)?;
        Ok((y, BlockCache { n1, attn, n2, ffn }))
    }

    fn backward(
        &self,
        cache: &BlockCache,
        dy: &Tensor,
        recipe: &PrecisionRecipe,
        enabled: bool,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let dn2 = self.ffn.backward(&cache.ffn, dy, recipe, enabled, grads)?;
        let mut dx1 = self.norm2.backward(&cache.n2, &dn2, grads);
        dx1.add_scaled(dy, 1.0)?;
        let dn1 = self.attn.backward(&cache.attn, &dx1, recipe, enabled, grads)?;
        let mut dx = self.norm1.backward(&cache.n1, &dn1, grads);
        dx.add_scaled(&dx1, 1.0)?;
        Ok(dx)
    }
}

/// One batch of next-token training windows.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

pub struct Model {
    pub config: TransformerConfig,
    pub recipe: PrecisionRecipe,
    quant_enabled: bool,
    tok_emb: Tensor,
    pos_emb: Option<Tensor>,
    blocks: Vec<Block>,
    final_norm: Norm,
    lm_head: QuantLinear,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn init_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal(rng, std)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

impl Model {
    /// Build a model with seeded initialization. The draw order is fixed, so
    /// a given (config, seed) pair always yields identical parameters.
    pub fn new(config: TransformerConfig, recipe: PrecisionRecipe, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let f = config.ffn_hidden;
        let std = 0.02;
        // Residual-path projections are damped by depth.
        let std_resid = std / ((2 * config.layers) as f64).sqrt();
        let use_bias = config.family == ModelFamily::Gpt;
        let norm_kind = match config.family {
            ModelFamily::Gpt => NormKind::Layer,
            ModelFamily::Llama => NormKind::Rms,
        };

        let tok_emb = init_weight(&mut rng, vec![config.vocab, h], std);
        let pos_emb = match config.family {
            ModelFamily::Gpt => Some(init_weight(&mut rng, vec![config.seq_len, h], std)),
            ModelFamily::Llama => None,
        };

        let bias = |n: usize, on: bool| if on { Some(Tensor::zeros(vec![n])) } else { None };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let qkv = QuantLinear::new(
                format!("{p}.attn.qkv"),
                LinearRole::AttnQkv,
                init_weight(&mut rng, vec![3 * h, h], std),
                bias(3 * h, use_bias),
            );
            let proj = QuantLinear::new(
                format!("{p}.attn.proj"),
                LinearRole::AttnOut,
                init_weight(&mut rng, vec![h, h], std_resid),
                bias(h, use_bias),
            );
            let gate = match config.family {
                ModelFamily::Llama => Some(QuantLinear::new(
                    format!("{p}.ffn.gate"),
                    LinearRole::FfnGate,
                    init_weight(&mut rng, vec![f, h], std),
                    None,
                )),
                ModelFamily::Gpt => None,
            };
            let up = QuantLinear::new(
                format!("{p}.ffn.up"),
                LinearRole::FfnUp,
                init_weight(&mut rng, vec![f, h], std),
                bias(f, use_bias),
            );
            let down = QuantLinear::new(
                format!("{p}.ffn.down"),
                LinearRole::FfnDown,
                init_weight(&mut rng, vec![h, f], std_resid),
                bias(h, use_bias),
            );
            blocks.push(Block {
                norm1: Norm::new(format!("{p}.norm1"), norm_kind, h),
                attn: Attention {
                    qkv,
                    proj,
                    heads: config.heads,
                    head_dim: config.head_dim(),
                    rope: config.family == ModelFamily::Llama,
                },
                norm2: Norm::new(format!("{p}.norm2"), norm_kind, h),
                ffn: Ffn {
                    family: config.family,
                    gate,
                    up,
                    down,
                },
            });
        }

        let final_norm = Norm::new("final_norm".into(), norm_kind, h);
        let lm_head = QuantLinear::new(
            "lm_head".into(),
            LinearRole::LmHead,
            init_weight(&mut rng, vec![config.vocab, h], std),
            None,
        );

        Ok(Model {
            config,
            recipe,
            quant_enabled: true,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        })
    }

    /// Whether recipe quantization is applied; the target-precision stage
    /// turns it off without touching anything else.
    pub fn quant_enabled(&self) -> bool {
        self.quant_enabled
    }

    pub fn set_quant_enabled(&mut self, enabled: bool) {
        self.quant_enabled = enabled;
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("tok_emb", &self.tok_emb);
        if let Some(p) = &self.pos_emb {
            f("pos_emb", p);
        }
        for b in &self.blocks {
            visit_norm(&b.norm1, f);
            visit_linear(&b.attn.qkv, f);
            visit_linear(&b.attn.proj, f);
            visit_norm(&b.norm2, f);
            if let Some(g) = &b.ffn.gate {
                visit_linear(g, f);
            }
            visit_linear(&b.ffn.up, f);
            visit_linear(&b.ffn.down, f);
        }
        visit_norm(&self.final_norm, f);
        visit_linear(&self.lm_head, f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        if let Some(p) = &mut self.pos_emb {
            f("pos_emb", p);
        }
        for b in &mut self.blocks {
            visit_norm_mut(&mut b.norm1, f);
            visit_linear_mut(&mut b.attn.qkv, f);
            visit_linear_mut(&mut b.attn.proj, f);
            visit_norm_mut(&mut b.norm2, f);
            if let Some(g) = &mut b.ffn.gate {
                visit_linear_mut(g, f);
            }
            visit_linear_mut(&mut b.ffn.up, f);
            visit_linear_mut(&mut b.ffn.down, f);
        }
        visit_norm_mut(&mut self.final_norm, f);
        visit_linear_mut(&mut self.lm_head, f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Add `delta` to one element of one parameter (finite-difference probes).
    pub fn nudge_param(&mut self, name: &str, index: usize, delta: f64) {
        let mut hit = false;
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                t.data_mut()[index] += delta;
                hit = true;
            }
        });
        assert!(hit, "unknown parameter {name}");
    }

    fn forward_seq(
        &self,
        ids: &[usize],
        want_caches: bool,
    ) -> Result<(Tensor, Vec<BlockCache>, NormCache, LinearCache, Tensor)> {
        let s = ids.len();
        if s > self.config.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {s} exceeds model seq_len {}",
                self.config.seq_len
            )));
        }
        let mut x = embedding(&self.tok_emb, ids)?;
        if let Some(pos) = &self.pos_emb {
            let h = self.config.hidden;
            for r in 0..s {
                let pr = pos.row(r).to_vec();
                let xr = &mut x.data_mut()[r * h..(r + 1) * h];
                for (a, b) in xr.iter_mut().zip(pr) {
                    *a += b;
                }
            }
        }
        let mut caches = Vec::with_capacity(if want_caches { self.blocks.len() } else { 0 });
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, &self.recipe, self.quant_enabled)?;
            x = y;
            if want_caches {
                caches.push(cache);
            }
        }
        let (n_out, n_cache) = self.final_norm.forward(&x);
        let (logits, head_cache) = self.lm_head.forward(
            &n_out,
            &self.recipe.triple(LinearRole::LmHead),
            self.quant_enabled,
        )?;
        Ok((logits, caches, n_cache, head_cache, x))
    }

    /// Mean next-token cross-entropy over the batch; with `want_grads`,
    /// gradients for every master parameter.
    pub fn forward_backward(
        &self,
        batch: &TokenBatch,
        want_grads: bool,
    ) -> Result<(f64, Option<GradStore>)> {
        if batch.inputs.len() != batch.batch * batch.seq
            || batch.targets.len() != batch.inputs.len()
        {
            return Err(Error::ShapeMismatch(
                "token batch dimensions are inconsistent".into(),
            ));
        }
        let mut total_loss = 0.0;
        let mut grads = want_grads.then(GradStore::new);
        let inv_b = 1.0 / batch.batch as f64;
        for b in 0..batch.batch {
            let ids = &batch.inputs[b * batch.seq..(b + 1) * batch.seq];
            let targets = &batch.targets[b * batch.seq..(b + 1) * batch.seq];
            let (logits, caches, n_cache, head_cache, _) = self.forward_seq(ids, want_grads)?;
            let (loss, dlogits) = cross_entropy(&logits, targets, want_grads)?;
            total_loss += loss * inv_b;
            let Some(grads) = grads.as_mut() else {
                continue;
            };
            let dlogits = dlogits.expect("grad requested").scale(inv_b);
            let dn = self.lm_head.backward(
                &head_cache,
                &dlogits,
                &self.recipe.triple(LinearRole::LmHead),
                self.quant_enabled,
                grads,
            )?;
            let mut dx = self.final_norm.backward(&n_cache, &dn, grads);
            for (block, cache) in self.blocks.iter().zip(&caches).rev() {
                dx = block.backward(cache, &dx, &self.recipe, self.quant_enabled, grads)?;
            }
            // Embedding gradients: scatter rows by token id; positions add
            // their rows directly.
            let h = self.config.hidden;
            let mut d_tok = Tensor::zeros(vec![self.config.vocab, h]);
            for (r, &id) in ids.iter().enumerate() {
                let src = dx.row(r).to_vec();
                let dst = &mut d_tok.data_mut()[id * h..(id + 1) * h];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            grads.accum("tok_emb", d_tok);
            if self.pos_emb.is_some() {
                let mut d_pos = Tensor::zeros(vec![self.config.seq_len, h]);
                d_pos.data_mut()[..ids.len() * h].copy_from_slice(&dx.data()[..ids.len() * h]);
                grads.accum("pos_emb", d_pos);
            }
        }
        Ok((total_loss, grads))
    }

    /// Evaluation loss on one batch (no gradients).
    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        Ok(self.forward_backward(batch, false)?.0)
    }

    /// Attention probabilities per layer for one sequence: `[heads, S, S]`.
    pub fn attention_maps(&self, ids: &[usize]) -> Result<Vec<Tensor>> {
        let s = ids.len();
        if s > self.config.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {s} exceeds model seq_len {}",
                self.config.seq_len
            )));
        }
        let mut x = embedding(&self.tok_emb, ids)?;
        if let Some(pos) = &self.pos_emb {
            let h = self.config.hidden;
            for r in 0..s {
                let pr = pos.row(r).to_vec();
                let xr = &mut x.data_mut()[r * h..(r + 1) * h];
                for (a, b) in xr.iter_mut().zip(pr) {
                    *a += b;
                }
            }
        }
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, &self.recipe, self.quant_enabled)?;
            let mut stacked = Vec::with_capacity(self.config.heads * s * s);
            for p in &cache.attn.probs {
                stacked.extend_from_slice(p.data());
            }
            maps.push(Tensor::from_vec(vec![self.config.heads, s, s], stacked)?);
            x = y;
        }
        Ok(maps)
    }
}

fn visit_linear(l: &QuantLinear, f: &mut impl FnMut(&str, &Tensor)) {
    f(&format!("{}.w", l.name), &l.weight);
    if let Some(b) = &l.bias {
        f(&format!("{}.b", l.name), b);
    }
}

fn visit_linear_mut(l: &mut QuantLinear, f: &mut impl FnMut(&str, &mut Tensor)) {
    f(&format!("{}.w", l.name), &mut l.weight);
    if let Some(b) = &mut l.bias {
        f(&format!("{}.b", l.name), b);
    }
}

fn visit_norm(n: &Norm, f: &mut impl FnMut(&str, &Tensor)) {
    f(&format!("{}.g", n.name), &n.gamma);
    if let Some(b) = &n.beta {
        f(&format!("{}.b", n.name), b);
    }
}

fn visit_norm_mut(n: &mut Norm, f: &mut impl FnMut(&str, &mut Tensor)) {
    f(&format!("{}.g", n.name), &mut n.gamma);
    if let Some(b) = &mut n.beta {
        f(&format!("{}.b", n.name), b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::FpFormat;
    use approx::assert_abs_diff_eq;

    fn tiny_config(family: ModelFamily) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            hidden: 16,
            ffn_hidden: 32,
            heads: 2,
            seq_len: 8,
            vocab: 32,
            family,
        }
    }

    fn batch_from(rng: &mut ChaCha8Rng, cfg: &TransformerConfig, b: usize, s: usize) -> TokenBatch {
        let inputs: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let targets: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..cfg.vocab)).collect();
        TokenBatch {
            batch: b,
            seq: s,
            inputs,
            targets,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(ModelFamily::Gpt);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ModelFamily::Llama);
        cfg.hidden = 16;
        cfg.heads = 16; // head_dim 1 is odd -> no rotary pairs
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn initial_loss_is_near_uniform_entropy() {
        for family in [ModelFamily::Gpt, ModelFamily::Llama] {
            let cfg = tiny_config(family);
            let model = Model::new(cfg.clone(), PrecisionRecipe::preset("baseline").unwrap(), 7)
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let batch = batch_from(&mut rng, &cfg, 4, 8);
            let loss = model.loss(&batch).unwrap();
            let uniform = (cfg.vocab as f64).ln();
            assert!(
                (loss - uniform).abs() / uniform < 0.05,
                "{family}: loss {loss} vs ln(vocab) {uniform}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_small_model() {
        // Spot-check a handful of elements of every parameter on both
        // families; the acceptance suite sweeps every element.
        for family in [ModelFamily::Gpt, ModelFamily::Llama] {
            let cfg = tiny_config(family);
            let recipe = PrecisionRecipe::preset("baseline").unwrap();
            let mut model = Model::new(cfg.clone(), recipe, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let batch = batch_from(&mut rng, &cfg, 2, 6);
            let (_, grads) = model.forward_backward(&batch, true).unwrap();
            let grads = grads.unwrap();
            let names = model.param_names();
            for name in names {
                let g = grads.get(&name).cloned();
                let len = {
                    let mut l = 0;
                    model.visit_params(&mut |n, t| {
                        if n == name {
                            l = t.len();
                        }
                    });
                    l
                };
                for idx in [0, len / 2, len - 1] {
                    let h = 1e-4;
                    model.nudge_param(&name, idx, h);
                    let lp = model.loss(&batch).unwrap();
                    model.nudge_param(&name, idx, -2.0 * h);
                    let lm = model.loss(&batch).unwrap();
                    model.nudge_param(&name, idx, h);
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g.as_ref().map(|t| t.data()[idx]).unwrap_or(0.0);
                    let tol = 1e-3 * fd.abs().max(an.abs()) + 1e-7;
                    assert!(
                        (fd - an).abs() <= tol,
                        "{family} {name}[{idx}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn full_precision_recipe_matches_baseline_bitwise() {
        let cfg = tiny_config(ModelFamily::Gpt);
        let baseline = Model::new(
            cfg.clone(),
            PrecisionRecipe::preset("baseline").unwrap(),
            11,
        )
        .unwrap();
        // A recipe whose every setting is explicitly "full".
        let mut explicit = PrecisionRecipe::new("explicit-full");
        for role in LinearRole::ALL {
            explicit.set(role, GemmTriple::full());
        }
        let model2 = Model::new(cfg.clone(), explicit, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = batch_from(&mut rng, &cfg, 2, 8);
        let l1 = baseline.loss(&batch).unwrap();
        let l2 = model2.loss(&batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn disabling_quantization_equals_baseline_bitwise() {
        let cfg = tiny_config(ModelFamily::Gpt);
        let baseline = Model::new(
            cfg.clone(),
            PrecisionRecipe::preset("baseline").unwrap(),
            13,
        )
        .unwrap();
        let mut quantized = Model::new(
            cfg.clone(),
            PrecisionRecipe::preset("all-fp4").unwrap(),
            13,
        )
        .unwrap();
        quantized.set_quant_enabled(false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = batch_from(&mut rng, &cfg, 2, 8);
        assert_eq!(
            baseline.loss(&batch).unwrap().to_bits(),
            quantized.loss(&batch).unwrap().to_bits()
        );
    }

    #[test]
    fn quantized_forward_differs_from_baseline() {
        let cfg = tiny_config(ModelFamily::Gpt);
        let baseline = Model::new(
            cfg.clone(),
            PrecisionRecipe::preset("baseline").unwrap(),
            13,
        )
        .unwrap();
        let quantized = Model::new(
            cfg.clone(),
            PrecisionRecipe::preset("all-fp4").unwrap(),
            13,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = batch_from(&mut rng, &cfg, 2, 8);
        assert_ne!(
            baseline.loss(&batch).unwrap(),
            quantized.loss(&batch).unwrap()
        );
    }

    #[test]
    fn attention_rows_are_normalized_and_causal() {
        for family in [ModelFamily::Gpt, ModelFamily::Llama] {
            let cfg = tiny_config(family);
            let model =
                Model::new(cfg.clone(), PrecisionRecipe::preset("baseline").unwrap(), 17).unwrap();
            let ids: Vec<usize> = (0..8).map(|i| (i * 5) % cfg.vocab).collect();
            let maps = model.attention_maps(&ids).unwrap();
            assert_eq!(maps.len(), cfg.layers);
            for map in &maps {
                assert_eq!(map.shape(), &[cfg.heads, 8, 8]);
                for hd in 0..cfg.heads {
                    for i in 0..8 {
                        let row = &map.data()[hd * 64 + i * 8..hd * 64 + (i + 1) * 8];
                        let sum: f64 = row.iter().sum();
                        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
                        for (j, &p) in row.iter().enumerate() {
                            if j > i {
                                assert_eq!(p, 0.0, "causal mask leak at ({i},{j})");
                            } else {
                                assert!(p >= 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ste_two_path_identity() {
        // Path A: quantized forward (weight and activation), full-precision
        // wgrad. Path B: full-precision layer whose weight is Q(w), fed the
        // pre-quantized activation. dw must agree bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let w = init_weight(&mut rng, vec![4, 4], 1.0);
            let x = init_weight(&mut rng, vec![4, 4], 1.0);
            let dy = init_weight(&mut rng, vec![4, 4], 1.0);

            let fwd_cfg = QuantConfig::new(FpFormat::E2M1);
            let triple_a = GemmTriple {
                fwd: GemmPrecision::Quantized(fwd_cfg.clone()),
                dgrad: GemmPrecision::Full,
                wgrad: GemmPrecision::Full,
            };
            // Pre-quantize x so path A's activation quantization is a no-op
            // (idempotence) and the two paths see identical operands.
            let (qx, _) = quantize_tensor(&x, &fwd_cfg, AxisSemantics::Activation).unwrap();

            let lin_a = QuantLinear::new("a".into(), LinearRole::FfnUp, w.clone(), None);
            let (ya, cache_a) = lin_a.forward(&qx, &triple_a, true).unwrap();
            let mut grads_a = GradStore::new();
            lin_a
                .backward(&cache_a, &dy, &triple_a, true, &mut grads_a)
                .unwrap();

            let (qw, _) = quantize_tensor(
                &w,
                &operand_cfg(&fwd_cfg, AxisSemantics::Weight),
                AxisSemantics::Weight,
            )
            .unwrap();
            let lin_b = QuantLinear::new("b".into(), LinearRole::FfnUp, qw, None);
            let (yb, cache_b) = lin_b.forward(&qx, &GemmTriple::full(), true).unwrap();
            let mut grads_b = GradStore::new();
            lin_b
                .backward(&cache_b, &dy, &GemmTriple::full(), true, &mut grads_b)
                .unwrap();

            assert_eq!(ya.data(), yb.data(), "trial {trial}: forward mismatch");
            let dwa = grads_a.get("a.w").unwrap();
            let dwb = grads_b.get("b.w").unwrap();
            for (a, b) in dwa.data().iter().zip(dwb.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}: dw mismatch");
            }
        }
    }

    #[test]
    fn linear_forward_saves_quantized_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = init_weight(&mut rng, vec![3, 3], 1.0);
        let x = init_weight(&mut rng, vec![2, 3], 1.0);
        let lin = QuantLinear::new("l".into(), LinearRole::FfnUp, w.clone(), None);
        let triple = GemmTriple {
            fwd: GemmPrecision::quantized(FpFormat::E2M1, Granularity::PerTensor),
            dgrad: GemmPrecision::Full,
            wgrad: GemmPrecision::Full,
        };
        let (y, cache) = lin.forward(&x, &triple, true).unwrap();
        // Forward result equals the plain matmul of the saved operands.
        let y2 = cache.qx.matmul_nt(&cache.qw).unwrap();
        assert_eq!(y.data(), y2.data());
        // Master weight untouched.
        assert_eq!(lin.weight.data(), w.data());
        assert_ne!(cache.qw.data(), w.data());
    }

    #[test]
    fn identical_sequences_give_identical_losses() {
        let cfg = tiny_config(ModelFamily::Llama);
        let model =
            Model::new(cfg.clone(), PrecisionRecipe::preset("paper-default").unwrap(), 5).unwrap();
        let ids: Vec<usize> = (0..8).map(|i| (3 * i + 1) % cfg.vocab).collect();
        let tgt: Vec<usize> = (0..8).map(|i| (3 * i + 2) % cfg.vocab).collect();
        let one = TokenBatch {
            batch: 1,
            seq: 8,
            inputs: ids.clone(),
            targets: tgt.clone(),
        };
        let two = TokenBatch {
            batch: 2,
            seq: 8,
            inputs: [ids.clone(), ids].concat(),
            targets: [tgt.clone(), tgt].concat(),
        };
        let l1 = model.loss(&one).unwrap();
        let l2 = model.loss(&two).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let cfg = tiny_config(ModelFamily::Gpt);
        let model =
            Model::new(cfg.clone(), PrecisionRecipe::preset("baseline").unwrap(), 5).unwrap();
        let batch = TokenBatch {
            batch: 1,
            seq: 2,
            inputs: vec![0, cfg.vocab],
            targets: vec![1, 1],
        };
        assert!(matches!(
            model.loss(&batch),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn param_registry_is_stable_and_complete() {
        let cfg = tiny_config(ModelFamily::Llama);
        let model =
            Model::new(cfg.clone(), PrecisionRecipe::preset("baseline").unwrap(), 5).unwrap();
        let names = model.param_names();
        assert!(names.contains(&"tok_emb".to_string()));
        assert!(names.contains(&"layer0.ffn.gate.w".to_string()));
        assert!(names.contains(&"final_norm.g".to_string()));
        assert!(names.contains(&"lm_head.w".to_string()));
        // No biases or beta in the llama family.
        assert!(!names.iter().any(|n| n.ends_with(".b")));
        assert_eq!(names, model.param_names());
    }
}
