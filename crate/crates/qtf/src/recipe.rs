//! Precision recipes: which format/granularity each GEMM of each linear
//! role runs at.
//!
//! Every linear layer owns three GEMMs (forward, activation gradient,
//! weight gradient) and each can carry its own setting. Multi-head
//! attention internals, norms, embeddings, and biases are always full
//! precision. Settings are spelled `"<format>[:<granularity>]"` or
//! `"full"`, e.g. `e2m1:block:128`, `e4m3:token`, `e5m2`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::formats::FpFormat;
use crate::quant::{Granularity, QuantConfig, QuantMode, ScalePolicy};

/// Quantized linear layers by position in the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinearRole {
    AttnQkv,
    AttnOut,
    FfnGate,
    FfnUp,
    FfnDown,
    LmHead,
}

impl LinearRole {
    pub const ALL: [LinearRole; 6] = [
        LinearRole::AttnQkv,
        LinearRole::AttnOut,
        LinearRole::FfnGate,
        LinearRole::FfnUp,
        LinearRole::FfnDown,
        LinearRole::LmHead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LinearRole::AttnQkv => "attn-qkv",
            LinearRole::AttnOut => "attn-out",
            LinearRole::FfnGate => "ffn-gate",
            LinearRole::FfnUp => "ffn-up",
            LinearRole::FfnDown => "ffn-down",
            LinearRole::LmHead => "lm-head",
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, LinearRole::AttnQkv | LinearRole::AttnOut)
    }

    pub fn is_ffn(&self) -> bool {
        matches!(
            self,
            LinearRole::FfnGate | LinearRole::FfnUp | LinearRole::FfnDown
        )
    }
}

impl fmt::Display for LinearRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinearRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LinearRole::ALL
            .iter()
            .find(|r| r.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Recipe(format!("unknown linear role {s:?}")))
    }
}

/// Precision of one GEMM: full precision or quantized operands.
#[derive(Debug, Clone, PartialEq)]
pub enum GemmPrecision {
    Full,
    Quantized(QuantConfig),
}

impl GemmPrecision {
    pub fn is_full(&self) -> bool {
        matches!(self, GemmPrecision::Full)
    }

    pub fn quantized(format: FpFormat, granularity: Granularity) -> Self {
        GemmPrecision::Quantized(QuantConfig {
            format,
            granularity,
            scale_policy: ScalePolicy::AbsMax,
            mode: QuantMode::Formula,
        })
    }

    /// Canonical spelling, e.g. `full`, `e2m1:block:128`, `e4m3:token`.
    pub fn spelling(&self) -> String {
        match self {
            GemmPrecision::Full => "full".into(),
            GemmPrecision::Quantized(cfg) => format!("{}:{}", cfg.format, cfg.granularity),
        }
    }
}

impl fmt::Display for GemmPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spelling())
    }
}

impl FromStr for GemmPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(GemmPrecision::Full);
        }
        let (fmt_str, gran) = match s.find(':') {
            Some(pos) => (&s[..pos], s[pos + 1..].parse::<Granularity>()?),
            None => (s, Granularity::PerTensor),
        };
        let format: FpFormat = fmt_str.parse()?;
        Ok(GemmPrecision::quantized(format, gran))
    }
}

/// The three GEMM precisions of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmTriple {
    pub fwd: GemmPrecision,
    pub dgrad: GemmPrecision,
    pub wgrad: GemmPrecision,
}

impl GemmTriple {
    pub fn full() -> Self {
        GemmTriple {
            fwd: GemmPrecision::Full,
            dgrad: GemmPrecision::Full,
            wgrad: GemmPrecision::Full,
        }
    }

    pub fn uniform(p: GemmPrecision) -> Self {
        GemmTriple {
            fwd: p.clone(),
            dgrad: p.clone(),
            wgrad: p,
        }
    }
}

/// Map from linear role to its GEMM precisions. Roles not present are full
/// precision; MHA internals are full precision unconditionally.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecipe {
    name: String,
    roles: BTreeMap<LinearRole, GemmTriple>,
}

fn fp8_token() -> GemmPrecision {
    GemmPrecision::quantized(FpFormat::E4M3, Granularity::PerToken)
}

fn fp4_block() -> GemmPrecision {
    GemmPrecision::quantized(FpFormat::E2M1, Granularity::per_block_default())
}

impl PrecisionRecipe {
    pub const PRESET_NAMES: [&'static str; 5] =
        ["baseline", "all-fp4", "row2", "row3", "paper-default"];

    pub fn new(name: impl Into<String>) -> Self {
        PrecisionRecipe {
            name: name.into(),
            roles: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set(&mut self, role: LinearRole, triple: GemmTriple) {
        self.roles.insert(role, triple);
    }

    pub fn triple(&self, role: LinearRole) -> GemmTriple {
        self.roles
            .get(&role)
            .cloned()
            .unwrap_or_else(GemmTriple::full)
    }

    pub fn roles(&self) -> impl Iterator<Item = (LinearRole, &GemmTriple)> {
        self.roles.iter().map(|(r, t)| (*r, t))
    }

    pub fn is_fully_full_precision(&self) -> bool {
        LinearRole::ALL.iter().all(|&r| {
            let t = self.triple(r);
            t.fwd.is_full() && t.dgrad.is_full() && t.wgrad.is_full()
        })
    }

    /// Named preset. The ablation grid covers the attention-linear forward,
    /// FFN-linear forward, and all-linear backward precisions; the head is
    /// always full precision.
    pub fn preset(name: &str) -> Result<Self> {
        let (attn_fwd, ffn_fwd, bwd) = match name {
            // Everything full precision.
            "baseline" => return Ok(PrecisionRecipe::new("baseline")),
            // Every linear GEMM at FP4, block-128 scaling.
            "all-fp4" => (fp4_block(), fp4_block(), fp4_block()),
            // FP4 attention forward, FP8 FFN forward, FP8 backward.
            "row2" => (fp4_block(), fp8_token(), fp8_token()),
            // FP8 attention forward, FP4 FFN forward, FP4 backward.
            "row3" => (fp8_token(), fp4_block(), fp4_block()),
            // FP8 attention-neighbor linears, FP4 FFN forward, FP8 backward:
            // attention stays protected and gradients keep the wider format.
            "paper-default" => (fp8_token(), fp4_block(), fp8_token()),
            _ => {
                return Err(Error::Recipe(format!(
                    "unknown preset {name:?} (expected one of {:?})",
                    Self::PRESET_NAMES
                )))
            }
        };
        let mut r = PrecisionRecipe::new(name);
        for role in [LinearRole::AttnQkv, LinearRole::AttnOut] {
            r.set(
                role,
                GemmTriple {
                    fwd: attn_fwd.clone(),
                    dgrad: bwd.clone(),
                    wgrad: bwd.clone(),
                },
            );
        }
        for role in [LinearRole::FfnGate, LinearRole::FfnUp, LinearRole::FfnDown] {
            r.set(
                role,
                GemmTriple {
                    fwd: ffn_fwd.clone(),
                    dgrad: bwd.clone(),
                    wgrad: bwd.clone(),
                },
            );
        }
        Ok(r)
    }

    /// Parse the recipe file format: one table per role with `fwd`, `dgrad`,
    /// `wgrad` spellings. Unknown tables or keys are rejected.
    pub fn from_toml_str(name: impl Into<String>, text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Recipe(format!("recipe parse: {e}")))?;
        let mut recipe = PrecisionRecipe::new(name);
        for (key, value) in table {
            let role: LinearRole = key.parse()?;
            let toml::Value::Table(entries) = value else {
                return Err(Error::Recipe(format!(
                    "role {key} must be a table of fwd/dgrad/wgrad"
                )));
            };
            let mut triple = GemmTriple::full();
            for (k, v) in entries {
                let toml::Value::String(s) = v else {
                    return Err(Error::Recipe(format!("{key}.{k} must be a string")));
                };
                let p: GemmPrecision = s.parse()?;
                match k.as_str() {
                    "fwd" => triple.fwd = p,
                    "dgrad" => triple.dgrad = p,
                    "wgrad" => triple.wgrad = p,
                    _ => {
                        return Err(Error::Recipe(format!(
                            "unknown key {key}.{k} (expected fwd/dgrad/wgrad)"
                        )))
                    }
                }
            }
            recipe.set(role, triple);
        }
        Ok(recipe)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for (role, triple) in &self.roles {
            out.push_str(&format!(
                "[{role}]\nfwd = \"{}\"\ndgrad = \"{}\"\nwgrad = \"{}\"\n\n",
                triple.fwd, triple.dgrad, triple.wgrad
            ));
        }
        out
    }

    /// Resolve a preset name or a recipe file path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if Self::PRESET_NAMES.contains(&name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = std::path::Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Recipe(format!(
                "{name_or_path:?} is neither a preset name {:?} nor an existing file",
                Self::PRESET_NAMES
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name_or_path.to_string());
        Self::from_toml_str(name, &text)
    }
}
