use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Bidirectional encoder trained with masked language modeling.
    Bert,
    /// Causal decoder trained with next-token prediction.
    Gpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    FfnWider,
    /// FFN split into an outer FFN and an inner FFN living inside attention.
    Caa,
    /// Extra top-1 MoE sublayer before the FFN.
    Moe,
    /// The MoE relocated inside attention, with the own-position key masked.
    MoeCea,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `LN(x + sublayer(x))`; all projections carry biases.
    PostLn,
    /// `x + sublayer(RMS(x))`; projections are bias-free.
    PreRms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Learned,
    Rotary,
}

/// Non-negative rational in lowest terms, written `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(LabError::Invalid("ratio with zero denominator".into()));
        }
        let g = gcd(num, den).max(1);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub const ONE: Ratio = Ratio { num: 1, den: 1 };
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `self · width` when that is an integer.
    pub fn split(&self, width: usize) -> Option<usize> {
        let scaled = self.num as u128 * width as u128;
        (scaled % self.den as u128 == 0).then(|| (scaled / self.den as u128) as usize)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || LabError::Invalid(format!("cannot parse ratio {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d);
        }
        if let Ok(n) = s.parse::<u64>() {
            return Ratio::new(n, 1);
        }
        // decimal such as 0.375
        let (int, frac) = s.split_once('.').ok_or_else(bad)?;
        if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let den = 10u64.pow(frac.len() as u32);
        let frac: u64 = frac.parse().map_err(|_| bad())?;
        Ratio::new(int * den + frac, den)
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_true() -> bool {
    true
}

/// Complete architecture description; a model is a deterministic function
/// of this plus a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub variant: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// FFN intermediate width as a multiple of `hidden`.
    pub ffn_mult: usize,
    /// Share of the FFN width kept in the outer position (CAA only).
    #[serde(default = "Ratio::one")]
    pub outer_ratio: Ratio,
    /// Left at 0 in a config file, filled in from the tokenizer.
    #[serde(default)]
    pub vocab: usize,
    pub max_seq: usize,
    pub norm: NormStyle,
    pub pos_enc: PosEncoding,
    #[serde(default)]
    pub experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub expert_inner: usize,
    #[serde(default)]
    pub aux_loss_coeff: f64,
    /// Own-position query/key/value bypass the inner FFN (CAA only).
    #[serde(default = "default_true")]
    pub direct_pathway: bool,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_top_k() -> usize {
    1
}

impl Ratio {
    fn one() -> Self {
        Self::ONE
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Invalid(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.max_seq == 0 {
            return bad("hidden, layers, heads and max_seq must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.pos_enc == PosEncoding::Rotary && self.head_dim() % 2 != 0 {
            return bad(format!(
                "rotary needs an even head width, got {}",
                self.head_dim()
            ));
        }
        if self.vocab < crate::data::NUM_SPECIALS + 1 {
            return bad(format!("vocab {} too small", self.vocab));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.outer_ratio.to_f64() > 1.0 {
            return bad(format!("outer_ratio {} exceeds 1", self.outer_ratio));
        }
        if self.variant != Variant::Caa && self.outer_ratio != Ratio::ONE {
            return bad("outer_ratio applies to the caa variant only".into());
        }
        self.outer_width()?;
        match self.variant {
            Variant::Moe | Variant::MoeCea => {
                if self.top_k != 1 {
                    return bad(format!("MoE routing is top-1, got top_k {}", self.top_k));
                }
                if self.experts == 0 || self.expert_inner == 0 {
                    return bad("MoE needs experts ≥ 1 and expert_inner ≥ 1".into());
                }
                if self.variant == Variant::MoeCea && self.family != Family::Gpt {
                    return bad("moe_cea is defined for the causal family only".into());
                }
            }
            _ => {}
        }
        if !self.aux_loss_coeff.is_finite() || self.aux_loss_coeff < 0.0 {
            return bad("aux_loss_coeff must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    pub fn uses_bias(&self) -> bool {
        self.norm == NormStyle::PostLn
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.variant, Variant::Moe | Variant::MoeCea)
    }

    /// Width of the FFN in its usual position.
    pub fn outer_width(&self) -> Result<usize> {
        let w = self.ffn_width();
        if self.variant != Variant::Caa {
            return Ok(w);
        }
        self.outer_ratio.split(w).ok_or_else(|| {
            let r = self.outer_ratio.to_f64() * w as f64;
            let lo = Ratio::new(r.floor() as u64, w as u64).expect("w > 0");
            let hi = Ratio::new(r.ceil() as u64, w as u64).expect("w > 0");
            LabError::UnrepresentableRatio {
                requested: self.outer_ratio.to_string(),
                width: w,
                below: lo.to_string(),
                above: hi.to_string(),
            }
        })
    }

    /// Width of the FFN relocated inside attention (zero when absent).
    pub fn inner_width(&self) -> Result<usize> {
        if self.variant != Variant::Caa {
            return Ok(0);
        }
        Ok(self.ffn_width() - self.outer_width()?)
    }

    /// Desk-scale model: d=64, 4 layers, 2 heads.
    pub fn desk(family: Family, variant: Variant, vocab: usize) -> Self {
        let ffn_mult = match variant {
            Variant::FfnWider | Variant::Caa => 32,
            _ => 4,
        };
        let (experts, expert_inner) = if matches!(variant, Variant::Moe | Variant::MoeCea) {
            (4, 64)
        } else {
            (0, 0)
        };
        Self {
            family,
            variant,
            hidden: 64,
            layers: 4,
            heads: 2,
            ffn_mult,
            outer_ratio: Ratio::ONE,
            vocab,
            max_seq: 64,
            norm: NormStyle::PostLn,
            pos_enc: PosEncoding::Learned,
            experts,
            top_k: 1,
            expert_inner,
            aux_loss_coeff: if experts > 0 { 0.01 } else { 0.0 },
            direct_pathway: true,
            tie_embeddings: false,
        }
    }

    /// Desk MoE backbone: pre-RMSNorm, rotary positions, causal.
    pub fn moe_desk(variant: Variant, vocab: usize) -> Self {
        Self {
            norm: NormStyle::PreRms,
            pos_enc: PosEncoding::Rotary,
            ..Self::desk(Family::Gpt, variant, vocab)
        }
    }

    /// Small published configuration: d=128, 12 layers, 2 heads, 30,522 tokens.
    pub fn paper_small(family: Family, variant: Variant) -> Self {
        Self {
            hidden: 128,
            layers: 12,
            heads: 2,
            vocab: 30_522,
            max_seq: 128,
            tie_embeddings: true,
            ..Self::desk(family, variant, 30_522)
        }
    }

    /// Large published configuration: d=768, 12 layers, 12 heads.
    pub fn paper_large(family: Family, variant: Variant) -> Self {
        Self {
            hidden: 768,
            heads: 12,
            ..Self::paper_small(family, variant)
        }
    }

    /// CAA at a given outer ratio, keeping the FFN-Wider total width.
    pub fn with_outer_ratio(mut self, r: Ratio) -> Self {
        self.variant = Variant::Caa;
        self.ffn_mult = 32;
        self.outer_ratio = r;
        self
    }

    /// Combination-enhanced preset: all width inside attention for BERT,
    /// one eighth kept outside for GPT.
    pub fn cea(family: Family, base: ArchSpec) -> Self {
        let r = match family {
            Family::Bert => Ratio::ZERO,
            Family::Gpt => Ratio { num: 1, den: 8 },
        };
        ArchSpec { family, ..base }.with_outer_ratio(r)
    }

    /// Alternate aligned CAA ratios: 1/8 for BERT, 3/8 for GPT.
    pub fn caa_aligned(family: Family, base: ArchSpec) -> Self {
        let r = match family {
            Family::Bert => Ratio { num: 1, den: 8 },
            Family::Gpt => Ratio { num: 3, den: 8 },
        };
        ArchSpec { family, ..base }.with_outer_ratio(r)
    }
}
