//! Floating-point quantization: scaling, clipping, step selection, rounding.
//!
//! The pipeline for a value `x` under scale `alpha` and format `F` is:
//! clip to `[-alpha * qmax, alpha * qmax]`, pick the quantization level
//! `v` from the clipped magnitude's binade, then round to a multiple of
//! `alpha_tilde * v` where `alpha_tilde = 2^-bias * alpha`. Two modes ship:
//! `Formula` implements exactly that, `ExactNearest` rounds to the truly
//! nearest representable scaled value via the enumerated grid. The formula
//! assigns the binade from a rounded log2 and therefore disagrees with the
//! oracle in a narrow band around binade midpoints (by at most one step);
//! both modes always land on the scaled grid.
//!
//! Inputs that already sit exactly on the scaled grid pass through both
//! modes unchanged: the rounded-log2 binade choice would otherwise kick
//! binade-top values one binade up (1.5 -> 2.0 for E2M1 at unit scale),
//! breaking idempotence. Off-grid inputs take the formula path verbatim.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats::{exp2i, FpFormat, FpGrid};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// Scale factor `alpha` together with the derived step base
/// `alpha_tilde = 2^-bias * alpha` (exact in f64: power-of-two scaling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    alpha: f64,
    alpha_tilde: f64,
    b_tilde: f64,
}

impl ScaleParams {
    pub fn new(alpha: f64, format: &FpFormat) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::NonpositiveScale(alpha));
        }
        let alpha_tilde = alpha * exp2i(-(format.bias() as i64));
        Ok(ScaleParams {
            alpha,
            alpha_tilde,
            b_tilde: -alpha_tilde.log2(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_tilde(&self) -> f64 {
        self.alpha_tilde
    }

    /// `-log2(alpha_tilde)`; informational, not required to be an integer.
    pub fn b_tilde(&self) -> f64 {
        self.b_tilde
    }
}

/// Grouping over which one scale factor is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    PerBlock(usize),
}

impl Granularity {
    pub fn per_block_default() -> Self {
        Granularity::PerBlock(DEFAULT_BLOCK_SIZE)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTensor => write!(f, "tensor"),
            Granularity::PerToken => write!(f, "token"),
            Granularity::PerChannel => write!(f, "channel"),
            Granularity::PerBlock(n) => write!(f, "block:{n}"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Granularity::PerTensor),
            "token" => Ok(Granularity::PerToken),
            "channel" => Ok(Granularity::PerChannel),
            "block" => Ok(Granularity::per_block_default()),
            _ => {
                let n = s
                    .strip_prefix("block:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| {
                        Error::GranularityMismatch(format!(
                            "expected tensor|token|channel|block:<N>, got {s:?}"
                        ))
                    })?;
                Ok(Granularity::PerBlock(n))
            }
        }
    }
}

/// How `alpha` is chosen per group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalePolicy {
    /// `alpha = max|x| / qmax` per group; an all-zero group uses `alpha = 1`
    /// and quantizes to zeros. Clipping never alters values under this
    /// policy, so `saturation_count` stays 0.
    AbsMax,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    #[default]
    Formula,
    ExactNearest,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::Formula => write!(f, "formula"),
            QuantMode::ExactNearest => write!(f, "exact-nearest"),
        }
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "formula" => Ok(QuantMode::Formula),
            "exact-nearest" => Ok(QuantMode::ExactNearest),
            _ => Err(Error::Config(format!(
                "expected formula|exact-nearest, got {s:?}"
            ))),
        }
    }
}

/// Which operand a matrix is, for row/column granularities.
///
/// Per-token groups the rows of an activation (or gradient) operand;
/// per-channel groups the columns of an activation, or the output channels
/// (stored rows) of a weight matrix laid out `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisSemantics {
    Activation,
    Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub format: FpFormat,
    pub granularity: Granularity,
    pub scale_policy: ScalePolicy,
    pub mode: QuantMode,
}

impl QuantConfig {
    pub fn new(format: FpFormat) -> Self {
        QuantConfig {
            format,
            granularity: Granularity::PerTensor,
            scale_policy: ScalePolicy::AbsMax,
            mode: QuantMode::Formula,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_scale_policy(mut self, policy: ScalePolicy) -> Self {
        self.scale_policy = policy;
        self
    }

    pub fn with_mode(mut self, mode: QuantMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Aggregate quantization statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QuantStats {
    /// Nonzero inputs that quantized to exactly zero.
    pub underflow_count: u64,
    /// Inputs clipped at the scaled range bound (fixed-scale policy only).
    pub saturation_count: u64,
    /// Mean squared quantization error over all elements.
    pub mse: f64,
    pub element_count: u64,
}

impl QuantStats {
    pub fn merge(&mut self, other: &QuantStats) {
        let total = self.element_count + other.element_count;
        if total > 0 {
            self.mse = (self.mse * self.element_count as f64
                + other.mse * other.element_count as f64)
                / total as f64;
        }
        self.underflow_count += other.underflow_count;
        self.saturation_count += other.saturation_count;
        self.element_count = total;
    }
}

/// Integer quantization: `alpha * round(clip(x / alpha, qmin, qmax))`,
/// ties to even.
pub fn quantize_int(x: f64, alpha: f64, qmin: i64, qmax: i64) -> Result<f64> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::NonpositiveScale(alpha));
    }
    if qmin >= qmax {
        return Err(Error::InvalidQuantRange { qmin, qmax });
    }
    let t = (x / alpha).clamp(qmin as f64, qmax as f64);
    Ok(alpha * t.round_ties_even())
}

/// Clip `x` to the scaled representable range `[-alpha*qmax, alpha*qmax]`.
pub fn clip_to_range(x: f64, scale: &ScaleParams, format: &FpFormat) -> f64 {
    let bound = scale.alpha() * format.qmax();
    x.clamp(-bound, bound)
}

/// Quantization level `v` for a clipped nonzero value.
///
/// `k = round(log2(|x| / alpha_tilde))`; normals get `v = 2^(k - m)` with `k`
/// clamped to the top binade `2^e - 1` (the unclamped formula would overshoot
/// the grid for inputs near the range bound), subnormals get `v = 2^(1 - m)`.
pub fn quant_level(x_clipped: f64, scale: &ScaleParams, format: &FpFormat) -> Result<f64> {
    if x_clipped == 0.0 {
        return Err(Error::ZeroQuantInput);
    }
    Ok(quant_level_unchecked(x_clipped, scale, format))
}

fn quant_level_unchecked(x_clipped: f64, scale: &ScaleParams, format: &FpFormat) -> f64 {
    let k = (x_clipped.abs() / scale.alpha_tilde())
        .log2()
        .round_ties_even();
    let m = format.mantissa_bits() as i64;
    if k >= 1.0 {
        let top = ((1i64 << format.exponent_bits()) - 1) as f64;
        exp2i(k.min(top) as i64 - m)
    } else {
        exp2i(1 - m)
    }
}

/// Quantize one value. Both modes consult the format grid, so this
/// enumerates it per call; use [`quantize_tensor`] for bulk work, it
/// caches the grid. Errors only if the grid is too large to enumerate.
pub fn quantize_fp(x: f64, scale: &ScaleParams, format: &FpFormat, mode: QuantMode) -> Result<f64> {
    let grid = format.enumerate_grid()?;
    Ok(match mode {
        QuantMode::Formula => quantize_fp_formula(x, scale, format, &grid),
        QuantMode::ExactNearest => quantize_fp_nearest(x, scale, &grid),
    })
}

fn quantize_fp_formula(x: f64, scale: &ScaleParams, format: &FpFormat, grid: &FpGrid) -> f64 {
    // Representable inputs are fixed points; returning the nearest-match
    // canonicalizes -0.0 to 0.0.
    let q_near = quantize_fp_nearest(x, scale, grid);
    if q_near == x {
        return q_near;
    }
    let clipped = clip_to_range(x, scale, format);
    if clipped == 0.0 {
        return 0.0;
    }
    let v = quant_level_unchecked(clipped, scale, format);
    let step = scale.alpha_tilde() * v;
    let q = step * (clipped / step).round_ties_even();
    // Normalize -0.0 so underflowed values serialize identically.
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

fn quantize_fp_nearest(x: f64, scale: &ScaleParams, grid: &FpGrid) -> f64 {
    scale.alpha() * grid.nearest(x / scale.alpha())
}

enum Grouping {
    Whole,
    Rows,
    Cols,
    Blocks(usize),
}

fn resolve_grouping(g: Granularity, sem: AxisSemantics, shape: &[usize]) -> Result<Grouping> {
    match g {
        Granularity::PerTensor => Ok(Grouping::Whole),
        Granularity::PerToken => {
            if shape.len() < 2 {
                return Err(Error::GranularityMismatch(format!(
                    "per-token needs a matrix, got rank {}",
                    shape.len()
                )));
            }
            match sem {
                AxisSemantics::Activation => Ok(Grouping::Rows),
                AxisSemantics::Weight => Err(Error::GranularityMismatch(
                    "per-token applies to activation operands; weights use per-channel".into(),
                )),
            }
        }
        Granularity::PerChannel => {
            if shape.len() < 2 {
                return Err(Error::GranularityMismatch(format!(
                    "per-channel needs a matrix, got rank {}",
                    shape.len()
                )));
            }
            match sem {
                AxisSemantics::Activation => Ok(Grouping::Cols),
                AxisSemantics::Weight => Ok(Grouping::Rows),
            }
        }
        Granularity::PerBlock(n) => {
            if n < 1 {
                return Err(Error::GranularityMismatch("block size must be >= 1".into()));
            }
            if shape.is_empty() {
                return Err(Error::GranularityMismatch(
                    "per-block needs at least rank 1".into(),
                ));
            }
            Ok(Grouping::Blocks(n))
        }
    }
}

struct StatsAcc {
    underflow: u64,
    saturation: u64,
    sq_err: f64,
    count: u64,
}

impl StatsAcc {
    fn new() -> Self {
        StatsAcc {
            underflow: 0,
            saturation: 0,
            sq_err: 0.0,
            count: 0,
        }
    }

    fn finish(self) -> QuantStats {
        QuantStats {
            underflow_count: self.underflow,
            saturation_count: self.saturation,
            mse: if self.count == 0 {
                0.0
            } else {
                self.sq_err / self.count as f64
            },
            element_count: self.count,
        }
    }
}

/// Quantize every group of `x` under its own scale; returns the quantized
/// tensor (same shape) and aggregated stats.
pub fn quantize_tensor(
    x: &Tensor,
    cfg: &QuantConfig,
    sem: AxisSemantics,
) -> Result<(Tensor, QuantStats)> {
    let grouping = resolve_grouping(cfg.granularity, sem, x.shape())?;
    let grid = cfg.format.enumerate_grid()?;
    let data = x.data();
    let mut out = vec![0.0f64; data.len()];
    let mut acc = StatsAcc::new();

    let last = *x.shape().last().unwrap_or(&0);
    let rows = if last == 0 { 0 } else { data.len() / last };

    match grouping {
        Grouping::Whole => {
            quantize_group(
                data,
                &mut out,
                &mut (0..data.len()),
                cfg,
                &grid,
                &mut acc,
            )?;
        }
        Grouping::Rows => {
            for r in 0..rows {
                quantize_group(
                    data,
                    &mut out,
                    &mut (r * last..(r + 1) * last),
                    cfg,
                    &grid,
                    &mut acc,
                )?;
            }
        }
        Grouping::Cols => {
            for c in 0..last {
                quantize_group(
                    data,
                    &mut out,
                    &mut (0..rows).map(|r| r * last + c),
                    cfg,
                    &grid,
                    &mut acc,
                )?;
            }
        }
        Grouping::Blocks(n) => {
            for r in 0..rows {
                let mut start = r * last;
                let row_end = (r + 1) * last;
                while start < row_end {
                    let end = (start + n).min(row_end);
                    quantize_group(data, &mut out, &mut (start..end), cfg, &grid, &mut acc)?;
                    start = end;
                }
            }
        }
    }

    let out = Tensor::from_vec(x.shape().to_vec(), out)?;
    Ok((out, acc.finish()))
}

fn quantize_group<I>(
    data: &[f64],
    out: &mut [f64],
    indices: &mut I,
    cfg: &QuantConfig,
    grid: &FpGrid,
    acc: &mut StatsAcc,
) -> Result<()>
where
    I: Iterator<Item = usize> + Clone,
{
    let qmax = cfg.format.qmax();
    let alpha = match cfg.scale_policy {
        ScalePolicy::AbsMax => {
            let absmax = indices
                .clone()
                .map(|i| data[i].abs())
                .fold(0.0f64, f64::max);
            if absmax == 0.0 {
                // All-zero group: convention alpha = 1, output zeros.
                for i in indices {
                    out[i] = 0.0;
                    acc.count += 1;
                }
                return Ok(());
            }
            absmax / qmax
        }
        ScalePolicy::Fixed(a) => a,
    };
    let scale = ScaleParams::new(alpha, &cfg.format)?;
    let fixed = matches!(cfg.scale_policy, ScalePolicy::Fixed(_));
    let bound = scale.alpha() * qmax;
    for i in indices {
        let xi = data[i];
        let q = match cfg.mode {
            QuantMode::Formula => quantize_fp_formula(xi, &scale, &cfg.format, grid),
            QuantMode::ExactNearest => quantize_fp_nearest(xi, &scale, grid),
        };
        if xi != 0.0 && q == 0.0 {
            acc.underflow += 1;
        }
        if fixed && xi.abs() > bound {
            acc.saturation += 1;
        }
        let err = xi - q;
        acc.sq_err += err * err;
        acc.count += 1;
        out[i] = q;
    }
    Ok(())
}
