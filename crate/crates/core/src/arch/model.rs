use std::rc::Rc;

use indexmap::IndexMap;

use super::count::{has_ffn_norm, param_count};
use super::spec::{ArchSpec, Family, NormStyle, PosEncoding, Variant};
use crate::analysis::ActivationTrace;
use crate::autodiff::{Graph, Var};
use crate::data::PAD;
use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const RMS_EPS: f64 = 1e-6;

/// `rows` sequences of `seq` token ids, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub rows: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if rows == 0 || seq == 0 || ids.len() != rows * seq {
            return Err(LabError::Invalid(format!(
                "token batch of {} ids is not {rows}×{seq}",
                ids.len()
            )));
        }
        Ok(Self { rows, seq, ids })
    }

    pub fn single(ids: Vec<usize>) -> Result<Self> {
        Self::new(1, ids.len(), ids)
    }
}

/// Flat batch positions whose representations are recorded, with the target
/// token for each.
#[derive(Clone, Debug, Default)]
pub struct CaptureSpec {
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[rows·seq × vocab]`.
    pub logits: Tensor,
    pub trace: Option<ActivationTrace>,
    pub aux_losses: IndexMap<String, f64>,
    /// Per MoE layer, tokens routed to each expert.
    pub routing_stats: Vec<Vec<usize>>,
}

/// Result of one differentiated forward pass.
pub struct StepResult {
    /// Cross-entropy plus auxiliary losses.
    pub loss: f64,
    pub lm_loss: f64,
    pub grads: IndexMap<String, Tensor>,
    pub routing_stats: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub params: ParamStore,
}

/// What the attention sublayer transforms context keys/values with.
#[derive(Clone, Copy, PartialEq)]
enum Inner {
    None,
    Ffn { direct_pathway: bool },
    Moe,
}

struct Ctx {
    seq: usize,
    mask: Vec<bool>,
    /// Same mask with every own-position entry removed.
    offdiag_mask: Vec<bool>,
    positions: Rc<[usize]>,
}

struct Built {
    logits: Var,
    aux: Vec<(String, Var)>,
    sites: Vec<(String, Var)>,
    routing: Vec<Vec<usize>>,
}

impl Model {
    pub fn build(spec: ArchSpec, rng: &SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng.substream("init");
        let mut p = ParamStore::new();
        let d = spec.hidden;
        let bias = spec.uses_bias();
        let mut mat = |p: &mut ParamStore, name: String, r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.truncated_normal(INIT_STD)).collect();
            p.insert(name, Tensor::new(vec![r, c], data)?)
        };
        let vec0 = |p: &mut ParamStore, name: String, n: usize| p.insert(name, Tensor::zeros(&[n]));
        let norm = |p: &mut ParamStore, prefix: String| -> Result<()> {
            p.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0))?;
            if spec.norm == NormStyle::PostLn {
                p.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
            }
            Ok(())
        };

        mat(&mut p, "embed.tok".into(), spec.vocab, d)?;
        if spec.pos_enc == PosEncoding::Learned {
            mat(&mut p, "embed.pos".into(), spec.max_seq, d)?;
        }
        if spec.family == Family::Bert && spec.norm == NormStyle::PostLn {
            norm(&mut p, "embed.norm".into())?;
        }
        let inner_w = spec.inner_width()?;
        let outer_w = spec.outer_width()?;
        for l in 0..spec.layers {
            let b = format!("block{l}");
            for w in ["q", "k", "v", "o"] {
                mat(&mut p, format!("{b}.mha.w{w}"), d, d)?;
                if bias {
                    vec0(&mut p, format!("{b}.mha.b{w}"), d)?;
                }
            }
            if inner_w > 0 {
                let f = format!("{b}.mha.inner_ffn");
                mat(&mut p, format!("{f}.w1"), d, inner_w)?;
                if bias {
                    vec0(&mut p, format!("{f}.b1"), inner_w)?;
                }
                mat(&mut p, format!("{f}.w2"), inner_w, d)?;
            }
            norm(&mut p, format!("{b}.norm1"))?;
            let moe_prefix = match spec.variant {
                Variant::Moe => Some(format!("{b}.moe")),
                Variant::MoeCea => Some(format!("{b}.mha.inner_moe")),
                _ => None,
            };
            if let Some(m) = moe_prefix {
                norm(&mut p, format!("{m}.norm"))?;
                mat(&mut p, format!("{m}.gate"), d, spec.experts)?;
                for e in 0..spec.experts {
                    let f = format!("{m}.expert{e}");
                    mat(&mut p, format!("{f}.w1"), d, spec.expert_inner)?;
                    if bias {
                        vec0(&mut p, format!("{f}.b1"), spec.expert_inner)?;
                    }
                    mat(&mut p, format!("{f}.w2"), spec.expert_inner, d)?;
                    if bias {
                        vec0(&mut p, format!("{f}.b2"), d)?;
                    }
                }
            }
            if outer_w > 0 {
                let f = format!("{b}.ffn");
                mat(&mut p, format!("{f}.w1"), d, outer_w)?;
                if bias {
                    vec0(&mut p, format!("{f}.b1"), outer_w)?;
                }
                mat(&mut p, format!("{f}.w2"), outer_w, d)?;
                if bias {
                    vec0(&mut p, format!("{f}.b2"), d)?;
                }
            }
            if has_ffn_norm(&spec, outer_w) {
                norm(&mut p, format!("{b}.norm2"))?;
            }
        }
        if spec.norm == NormStyle::PreRms {
            norm(&mut p, "final_norm".into())?;
        }
        if !spec.tie_embeddings {
            mat(&mut p, "head.w".into(), d, spec.vocab)?;
        }
        if bias {
            vec0(&mut p, "head.b".into(), spec.vocab)?;
        }
        let expected = param_count(&spec)?.total;
        debug_assert_eq!(p.num_scalars(), expected);
        if p.num_scalars() != expected {
            return Err(LabError::Invalid(format!(
                "built {} parameters, closed form says {expected}",
                p.num_scalars()
            )));
        }
        Ok(Self { spec, params: p })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(
        &self,
        batch: &TokenBatch,
        capture: Option<&CaptureSpec>,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let built = self.build_graph(&mut g, batch, false)?;
        let trace = capture
            .map(|c| self.collect_sites(&g, &built.sites, c))
            .transpose()?;
        let aux_losses = built
            .aux
            .iter()
            .map(|(name, v)| (name.clone(), g.value(*v).scalar()))
            .collect();
        Ok(ForwardOutput {
            logits: g.value(built.logits).clone(),
            trace,
            aux_losses,
            routing_stats: built.routing,
        })
    }

    /// Mean cross-entropy over non-ignored targets, without gradients.
    pub fn lm_loss(&self, batch: &TokenBatch, targets: &[i64]) -> Result<f64> {
        let mut g = Graph::new();
        let built = self.build_graph(&mut g, batch, false)?;
        let ce = g.cross_entropy(built.logits, targets)?;
        Ok(g.value(ce).scalar())
    }

    /// Sum of per-target negative log-likelihoods and the number of targets.
    pub fn nll_sum(&self, batch: &TokenBatch, targets: &[i64]) -> Result<(f64, usize)> {
        let out = self.forward(batch, None)?;
        let v = self.spec.vocab;
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            total -= log_softmax_at(&out.logits.data()[r * v..(r + 1) * v], t as usize);
            count += 1;
        }
        Ok((total, count))
    }

    pub fn loss_and_grads(&self, batch: &TokenBatch, targets: &[i64]) -> Result<StepResult> {
        let mut g = Graph::new();
        let built = self.build_graph(&mut g, batch, true)?;
        let ce = g.cross_entropy(built.logits, targets)?;
        let lm_loss = g.value(ce).scalar();
        let mut total = ce;
        for (_, a) in &built.aux {
            total = g.add(total, *a)?;
        }
        let grads = g.backward(total)?;
        let used = g.param_grads(&grads);
        // experts that received no token never entered the graph
        let grads = self
            .params
            .iter()
            .map(|(name, t)| {
                let gt = used
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), gt)
            })
            .collect();
        Ok(StepResult {
            loss: g.value(total).scalar(),
            lm_loss,
            grads,
            routing_stats: built.routing,
        })
    }

    fn collect_sites(
        &self,
        g: &Graph,
        sites: &[(String, Var)],
        cap: &CaptureSpec,
    ) -> Result<ActivationTrace> {
        if cap.positions.len() != cap.targets.len() {
            return Err(LabError::Invalid(
                "capture positions/targets length mismatch".into(),
            ));
        }
        let d = self.spec.hidden;
        let mut names = Vec::with_capacity(sites.len());
        let mut reps = Vec::with_capacity(sites.len());
        for (name, v) in sites {
            let t = g.value(*v);
            let mut m = Vec::with_capacity(cap.positions.len() * d);
            for &p in &cap.positions {
                if p * d >= t.len() {
                    return Err(LabError::Invalid(format!(
                        "capture position {p} out of range"
                    )));
                }
                m.extend_from_slice(t.row(p));
            }
            names.push(name.clone());
            reps.push(m);
        }
        ActivationTrace::new(names, d, reps, cap.targets.clone())
    }

    fn p(&self, g: &mut Graph, name: &str, train: bool) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| LabError::Invalid(format!("missing parameter {name}")))?;
        if train {
            g.param(name, t)
        } else {
            g.constant(t.clone())
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: Option<&str>, train: bool) -> Result<Var> {
        let wv = self.p(g, w, train)?;
        let y = g.matmul(x, wv)?;
        match b {
            Some(b) if self.params.contains(b) => {
                let bv = self.p(g, b, train)?;
                g.add_row(y, bv)
            }
            _ => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str, train: bool) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}.gain"), train)?;
        match self.spec.norm {
            NormStyle::PostLn => {
                let bias = self.p(g, &format!("{prefix}.bias"), train)?;
                g.layer_norm(x, gain, bias, LN_EPS)
            }
            NormStyle::PreRms => g.rms_norm(x, gain, RMS_EPS),
        }
    }

    /// `w2 · gelu(w1 · x + b1) + b2`; absent biases are skipped.
    fn ffn(&self, g: &mut Graph, x: Var, prefix: &str, train: bool) -> Result<Var> {
        let h = self.linear(
            g,
            x,
            &format!("{prefix}.w1"),
            Some(&format!("{prefix}.b1")),
            train,
        )?;
        let h = g.gelu(h)?;
        self.linear(
            g,
            h,
            &format!("{prefix}.w2"),
            Some(&format!("{prefix}.b2")),
            train,
        )
    }

    /// Top-1 routed mixture of experts over every row of `x`.
    fn moe(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        train: bool,
        aux: &mut Vec<(String, Var)>,
        routing: &mut Vec<Vec<usize>>,
    ) -> Result<Var> {
        let n = g.value(x).rows_cols().0;
        let e_count = self.spec.experts;
        let logits = self.linear(g, x, &format!("{prefix}.gate"), None, train)?;
        let choice = top1(g.value(logits));
        let probs = g.softmax_rows(logits, None)?;
        let mut hist = vec![0usize; e_count];
        for &c in &choice {
            hist[c] += 1;
        }
        let mut combined: Option<Var> = None;
        for e in 0..e_count {
            let rows: Vec<usize> = (0..n).filter(|&r| choice[r] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &rows)?;
            let he = self.ffn(g, xe, &format!("{prefix}.expert{e}"), train)?;
            let placed = g.scatter_rows(he, &rows, n)?;
            combined = Some(match combined {
                Some(c) => g.add(c, placed)?,
                None => placed,
            });
        }
        let combined = combined.expect("every token routes to some expert");
        let gate_p = g.gather_cols(probs, &choice)?;
        let out = g.mul_col(gate_p, combined)?;
        if self.spec.aux_loss_coeff > 0.0 {
            // E · Σ_e f_e · P_e, with f_e the routed fraction (constant)
            let scale = self.spec.aux_loss_coeff * e_count as f64 / n as f64;
            let f = Tensor::new(
                vec![1, e_count],
                hist.iter().map(|&c| c as f64 * scale).collect(),
            )?;
            let fv = g.constant(f)?;
            let mean_p = g.mean_rows(probs)?;
            let prod = g.mul(mean_p, fv)?;
            aux.push((format!("{prefix}.load_balance"), g.sum(prod)?));
        }
        routing.push(hist);
        Ok(out)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        inner: Inner,
        ctx: &Ctx,
        train: bool,
        aux: &mut Vec<(String, Var)>,
        routing: &mut Vec<Vec<usize>>,
    ) -> Result<Var> {
        let y = match inner {
            Inner::None => x,
            Inner::Ffn { .. } => self.ffn(g, x, &format!("{prefix}.inner_ffn"), train)?,
            Inner::Moe => {
                let m = format!("{prefix}.inner_moe");
                let xn = self.norm(g, x, &format!("{m}.norm"), train)?;
                self.moe(g, xn, &m, train, aux, routing)?
            }
        };
        let direct = matches!(
            inner,
            Inner::Ffn {
                direct_pathway: true
            }
        );
        let q_src = match inner {
            Inner::Ffn {
                direct_pathway: false,
            } => y,
            _ => x,
        };
        let lin = |g: &mut Graph, src: Var, w: &str| {
            self.linear(
                g,
                src,
                &format!("{prefix}.w{w}"),
                Some(&format!("{prefix}.b{w}")),
                train,
            )
        };
        let q = lin(g, q_src, "q")?;
        let k = lin(g, y, "k")?;
        let v = lin(g, y, "v")?;
        let self_kv = if direct {
            Some((lin(g, x, "k")?, lin(g, x, "v")?))
        } else {
            None
        };
        let mask = if inner == Inner::Moe {
            &ctx.offdiag_mask
        } else {
            &ctx.mask
        };
        let dh = self.spec.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let rotary = self.spec.pos_enc == PosEncoding::Rotary;
        let mut heads = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let mut qh = g.slice_cols(q, h * dh, dh)?;
            let mut kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            if rotary {
                qh = g.rotary(qh, ctx.positions.clone())?;
                kh = g.rotary(kh, ctx.positions.clone())?;
            }
            let mut scores = g.qk_t(qh, kh, ctx.seq)?;
            if let Some((kx, _)) = self_kv {
                let mut kxh = g.slice_cols(kx, h * dh, dh)?;
                if rotary {
                    kxh = g.rotary(kxh, ctx.positions.clone())?;
                }
                let own = g.row_dot(qh, kxh)?;
                scores = g.set_diag(scores, own, ctx.seq)?;
            }
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax_rows(scores, Some(mask))?;
            let out = match self_kv {
                Some((_, vx)) => {
                    let vxh = g.slice_cols(vx, h * dh, dh)?;
                    let ctx_p = g.zero_diag(probs, ctx.seq)?;
                    let own_p = g.take_diag(probs, ctx.seq)?;
                    let from_ctx = g.pv(ctx_p, vh, ctx.seq)?;
                    let from_self = g.mul_col(own_p, vxh)?;
                    g.add(from_ctx, from_self)?
                }
                None => g.pv(probs, vh, ctx.seq)?,
            };
            heads.push(out);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        lin(g, cat, "o")
    }

    fn make_ctx(&self, batch: &TokenBatch) -> Ctx {
        let s = batch.seq;
        let causal = self.spec.family == Family::Gpt;
        let n = batch.rows * s;
        let mut mask = vec![false; n * s];
        let mut offdiag_mask = vec![false; n * s];
        for r in 0..n {
            let (b, i) = (r / s, r % s);
            for j in 0..s {
                let ok = (!causal || j <= i) && batch.ids[b * s + j] != PAD;
                mask[r * s + j] = ok;
                offdiag_mask[r * s + j] = ok && j != i;
            }
        }
        Ctx {
            seq: s,
            mask,
            offdiag_mask,
            positions: (0..n).map(|r| r % s).collect::<Vec<_>>().into(),
        }
    }

    fn build_graph(&self, g: &mut Graph, batch: &TokenBatch, train: bool) -> Result<Built> {
        let spec = &self.spec;
        if batch.seq > spec.max_seq {
            return Err(LabError::SequenceTooLong {
                len: batch.seq,
                max: spec.max_seq,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= spec.vocab) {
            return Err(LabError::UnknownToken {
                id: bad,
                vocab: spec.vocab,
            });
        }
        let ctx = self.make_ctx(batch);
        let mut aux = Vec::new();
        let mut routing = Vec::new();
        let mut sites = Vec::with_capacity(1 + 2 * spec.layers);

        let tok = self.p(g, "embed.tok", train)?;
        let mut x = g.embedding(tok, &batch.ids)?;
        if spec.pos_enc == PosEncoding::Learned {
            let pos = self.p(g, "embed.pos", train)?;
            let pe = g.embedding(pos, &ctx.positions)?;
            x = g.add(x, pe)?;
        }
        if self.params.contains("embed.norm.gain") {
            x = self.norm(g, x, "embed.norm", train)?;
        }
        sites.push(("embed".to_string(), x));

        let inner = match spec.variant {
            Variant::Caa if spec.inner_width()? > 0 => Inner::Ffn {
                direct_pathway: spec.direct_pathway,
            },
            Variant::MoeCea => Inner::Moe,
            _ => Inner::None,
        };
        for l in 0..spec.layers {
            let b = format!("block{l}");
            let mha = format!("{b}.mha");
            let has_outer = self.params.contains(&format!("{b}.ffn.w1"));
            match spec.norm {
                NormStyle::PostLn => {
                    let a =
                        self.attention(g, x, &mha, inner, &ctx, train, &mut aux, &mut routing)?;
                    let h = g.add(x, a)?;
                    let mut h = self.norm(g, h, &format!("{b}.norm1"), train)?;
                    sites.push((format!("L{}.mha", l + 1), h));
                    if spec.variant == Variant::Moe {
                        let m =
                            self.moe(g, h, &format!("{b}.moe"), train, &mut aux, &mut routing)?;
                        let s = g.add(h, m)?;
                        h = self.norm(g, s, &format!("{b}.moe.norm"), train)?;
                    }
                    if has_outer {
                        let f = self.ffn(g, h, &format!("{b}.ffn"), train)?;
                        h = g.add(h, f)?;
                    }
                    x = self.norm(g, h, &format!("{b}.norm2"), train)?;
                }
                NormStyle::PreRms => {
                    let xn = self.norm(g, x, &format!("{b}.norm1"), train)?;
                    let a =
                        self.attention(g, xn, &mha, inner, &ctx, train, &mut aux, &mut routing)?;
                    let mut h = g.add(x, a)?;
                    sites.push((format!("L{}.mha", l + 1), h));
                    if spec.variant == Variant::Moe {
                        let hn = self.norm(g, h, &format!("{b}.moe.norm"), train)?;
                        let m =
                            self.moe(g, hn, &format!("{b}.moe"), train, &mut aux, &mut routing)?;
                        h = g.add(h, m)?;
                    }
                    if has_outer {
                        let hn = self.norm(g, h, &format!("{b}.norm2"), train)?;
                        let f = self.ffn(g, hn, &format!("{b}.ffn"), train)?;
                        h = g.add(h, f)?;
                    }
                    x = h;
                }
            }
            sites.push((format!("L{}.ffn", l + 1), x));
        }
        if spec.norm == NormStyle::PreRms {
            x = self.norm(g, x, "final_norm", train)?;
        }
        let logits = if spec.tie_embeddings {
            let tok = self.p(g, "embed.tok", train)?;
            let wt = g.transpose(tok)?;
            g.matmul(x, wt)?
        } else {
            let w = self.p(g, "head.w", train)?;
            g.matmul(x, w)?
        };
        let logits = if self.params.contains("head.b") {
            let b = self.p(g, "head.b", train)?;
            g.add_row(logits, b)?
        } else {
            logits
        };
        Ok(Built {
            logits,
            aux,
            sites,
            routing,
        })
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
fn top1(logits: &Tensor) -> Vec<usize> {
    let (m, n) = logits.rows_cols();
    (0..m)
        .map(|r| {
            let row = &logits.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[t] - lse
}
