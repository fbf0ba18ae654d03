//! Closed-form parameter counts, computed without building a model.

use indexmap::IndexMap;

use super::spec::{ArchSpec, Family, NormStyle, PosEncoding, Variant};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: IndexMap<String, usize>,
}

fn norm_size(spec: &ArchSpec) -> usize {
    match spec.norm {
        NormStyle::PostLn => 2 * spec.hidden,
        NormStyle::PreRms => spec.hidden,
    }
}

/// `d → width → d` FFN; `out_bias` controls the `d`-sized output bias.
fn ffn_size(d: usize, width: usize, bias: bool, out_bias: bool) -> usize {
    if width == 0 {
        return 0;
    }
    2 * d * width + if bias { width } else { 0 } + if bias && out_bias { d } else { 0 }
}

fn moe_size(spec: &ArchSpec) -> usize {
    let d = spec.hidden;
    d * spec.experts + spec.experts * ffn_size(d, spec.expert_inner, spec.uses_bias(), true)
}

/// Post-LN blocks keep the FFN-position norm even when the outer FFN has
/// zero width (`LN(h + 0)`); pre-RMS blocks drop it.
pub(crate) fn has_ffn_norm(spec: &ArchSpec, outer_width: usize) -> bool {
    outer_width > 0 || spec.norm == NormStyle::PostLn
}

pub fn param_count(spec: &ArchSpec) -> Result<ParamCount> {
    spec.validate()?;
    let d = spec.hidden;
    let bias = spec.uses_bias();
    let mut parts: IndexMap<String, usize> = IndexMap::new();

    parts.insert("embedding".into(), spec.vocab * d);
    if spec.pos_enc == PosEncoding::Learned {
        parts.insert("position".into(), spec.max_seq * d);
    }
    if spec.family == Family::Bert && spec.norm == NormStyle::PostLn {
        parts.insert("embedding_norm".into(), 2 * d);
    }

    let attn = 4 * d * d + if bias { 4 * d } else { 0 };
    let inner = ffn_size(d, spec.inner_width()?, bias, false);
    let outer_w = spec.outer_width()?;
    let outer = ffn_size(d, outer_w, bias, true);
    let (moe, inner_moe) = match spec.variant {
        Variant::Moe => (moe_size(spec) + norm_size(spec), 0),
        Variant::MoeCea => (0, moe_size(spec) + norm_size(spec)),
        _ => (0, 0),
    };
    let per_block = [
        ("attention", attn + norm_size(spec)),
        ("inner_ffn", inner),
        ("inner_moe", inner_moe),
        ("moe", moe),
        (
            "outer_ffn",
            outer
                + if has_ffn_norm(spec, outer_w) {
                    norm_size(spec)
                } else {
                    0
                },
        ),
    ];
    for (name, size) in per_block {
        if size > 0 {
            parts.insert(format!("blocks.{name}"), size * spec.layers);
        }
    }
    if spec.norm == NormStyle::PreRms {
        parts.insert("final_norm".into(), d);
    }
    let head_bias = if bias { spec.vocab } else { 0 };
    let head = if spec.tie_embeddings {
        head_bias
    } else {
        spec.vocab * d + head_bias
    };
    if head > 0 {
        parts.insert("lm_head".into(), head);
    }
    Ok(ParamCount {
        total: parts.values().sum(),
        breakdown: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::Ratio;

    fn wider() -> ArchSpec {
        ArchSpec::desk(Family::Gpt, Variant::FfnWider, 64)
    }

    #[test]
    fn caa_count_is_constant_over_ratio() {
        let base = param_count(&wider()).unwrap().total;
        for r in ["1", "7/8", "3/4", "1/2", "1/4", "1/8"] {
            let s = wider().with_outer_ratio(r.parse().unwrap());
            assert_eq!(param_count(&s).unwrap().total, base, "r = {r}");
        }
    }

    #[test]
    fn zero_ratio_drops_outer_bias_only() {
        let s = wider().with_outer_ratio(Ratio::ZERO);
        let diff = param_count(&wider()).unwrap().total - param_count(&s).unwrap().total;
        // the removed outer FFN's d-sized output bias, once per block
        assert_eq!(diff, 64 * 4);
    }

    #[test]
    fn moe_cea_matches_moe() {
        let a = param_count(&ArchSpec::moe_desk(Variant::Moe, 64))
            .unwrap()
            .total;
        let b = param_count(&ArchSpec::moe_desk(Variant::MoeCea, 64))
            .unwrap()
            .total;
        assert_eq!(a, b);
    }

    #[test]
    fn published_small_counts() {
        let v = param_count(&ArchSpec::paper_small(Family::Bert, Variant::Vanilla))
            .unwrap()
            .total as f64;
        assert!((v / 6.3e6 - 1.0).abs() < 0.05, "{v}");
        let w = param_count(&ArchSpec::paper_small(Family::Bert, Variant::FfnWider))
            .unwrap()
            .total as f64;
        assert!((w / 17.3e6 - 1.0).abs() < 0.05, "{w}");
    }
}
