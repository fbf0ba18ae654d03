//! Loop-per-position model evaluation: every attention row rebuilds its own
//! key/value lists and every token is dispatched to its expert one at a time.

use archlab_core::arch::{Family, Model, NormStyle, PosEncoding, Variant};
use archlab_core::data::PAD;

type Vector = Vec<f64>;

fn p<'a>(m: &'a Model, name: &str) -> Option<&'a [f64]> {
    m.params.get(name).map(|t| t.data())
}

/// `x · W + b` with `W` stored `[in × out]`.
fn linear(m: &Model, x: &[f64], w: &str, b: Option<String>) -> Vector {
    let wt = &m.params.get(w).unwrap_or_else(|| panic!("missing {w}"));
    let (din, dout) = (wt.shape()[0], wt.shape()[1]);
    assert_eq!(x.len(), din);
    let mut y = vec![0.0; dout];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..dout {
            y[j] += xi * wt.data()[i * dout + j];
        }
    }
    if let Some(bv) = b.and_then(|b| p(m, &b)) {
        for (yj, bj) in y.iter_mut().zip(bv) {
            *yj += bj;
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn norm(m: &Model, x: &[f64], prefix: &str) -> Vector {
    let g = p(m, &format!("{prefix}.gain")).unwrap();
    let n = x.len() as f64;
    match m.spec.norm {
        NormStyle::PostLn => {
            let b = p(m, &format!("{prefix}.bias")).unwrap();
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * g[i] + b[i])
                .collect()
        }
        NormStyle::PreRms => {
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / n + 1e-6).sqrt();
            x.iter().enumerate().map(|(i, v)| v / rms * g[i]).collect()
        }
    }
}

fn ffn(m: &Model, x: &[f64], prefix: &str) -> Vector {
    let h: Vector = linear(m, x, &format!("{prefix}.w1"), Some(format!("{prefix}.b1")))
        .into_iter()
        .map(gelu)
        .collect();
    linear(m, &h, &format!("{prefix}.w2"), Some(format!("{prefix}.b2")))
}

/// Top-1 expert (lowest index on ties) scaled by its gate probability.
pub fn moe_token(m: &Model, x: &[f64], prefix: &str) -> (Vector, usize) {
    let logits = linear(m, x, &format!("{prefix}.gate"), None);
    let mut best = 0;
    for e in 1..logits.len() {
        if logits[e] > logits[best] {
            best = e;
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let prob = (logits[best] - max).exp() / z;
    let out = ffn(m, x, &format!("{prefix}.expert{best}"));
    (out.into_iter().map(|v| v * prob).collect(), best)
}

fn rotate(v: &mut [f64], pos: usize) {
    let d = v.len();
    for i in 0..d / 2 {
        let ang = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * ang.cos() - b * ang.sin();
        v[2 * i + 1] = a * ang.sin() + b * ang.cos();
    }
}

/// Attention over one sequence `xs`, query row by query row.
pub fn attention(m: &Model, xs: &[Vector], ids: &[usize], prefix: &str) -> Vec<Vector> {
    let spec = &m.spec;
    let s = xs.len();
    let d = spec.hidden;
    let dh = d / spec.heads;
    let inner_ffn = m.params.contains(&format!("{prefix}.inner_ffn.w1"));
    let inner_moe = spec.variant == Variant::MoeCea;
    let transformed: Vec<Vector> = xs
        .iter()
        .map(|x| {
            if inner_ffn {
                ffn(m, x, &format!("{prefix}.inner_ffn"))
            } else if inner_moe {
                let pre = format!("{prefix}.inner_moe");
                moe_token(m, &norm(m, x, &format!("{pre}.norm")), &pre).0
            } else {
                x.clone()
            }
        })
        .collect();
    let proj = |x: &[f64], w: &str| {
        linear(
            m,
            x,
            &format!("{prefix}.w{w}"),
            Some(format!("{prefix}.b{w}")),
        )
    };
    let direct = inner_ffn && spec.direct_pathway;
    let mut outs = Vec::with_capacity(s);
    for i in 0..s {
        let q_src = if inner_ffn && !spec.direct_pathway {
            &transformed[i]
        } else {
            &xs[i]
        };
        let q = proj(q_src, "q");
        // this row's own key/value lists
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        let mut pos = Vec::new();
        for j in 0..s {
            let visible =
                ids[j] != PAD && (spec.family == Family::Bert || j <= i) && !(inner_moe && j == i);
            if !visible {
                continue;
            }
            let src = if direct && j == i {
                &xs[j]
            } else {
                &transformed[j]
            };
            keys.push(proj(src, "k"));
            vals.push(proj(src, "v"));
            pos.push(j);
        }
        let mut cat = vec![0.0; d];
        for h in 0..spec.heads {
            let r = h * dh..(h + 1) * dh;
            let mut qh = q[r.clone()].to_vec();
            if spec.pos_enc == PosEncoding::Rotary {
                rotate(&mut qh, i);
            }
            let scores: Vec<f64> = keys
                .iter()
                .zip(&pos)
                .map(|(k, &j)| {
                    let mut kh = k[r.clone()].to_vec();
                    if spec.pos_enc == PosEncoding::Rotary {
                        rotate(&mut kh, j);
                    }
                    qh.iter().zip(&kh).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            if scores.is_empty() {
                continue;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|sc| (sc - max).exp()).sum();
            for (sc, v) in scores.iter().zip(&vals) {
                let w = (sc - max).exp() / z;
                for (c, vv) in cat[r.clone()].iter_mut().zip(&v[r.clone()]) {
                    *c += w * vv;
                }
            }
        }
        outs.push(proj(&cat, "o"));
    }
    outs
}

fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Logits for every position of every row, `[rows·seq × vocab]`.
pub fn forward(m: &Model, rows: usize, seq: usize, ids: &[usize]) -> Vec<f64> {
    let spec = &m.spec;
    let mut logits = Vec::new();
    for b in 0..rows {
        let row_ids = &ids[b * seq..(b + 1) * seq];
        let mut xs: Vec<Vector> = row_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let d = spec.hidden;
                let mut x = p(m, "embed.tok").unwrap()[t * d..(t + 1) * d].to_vec();
                if let Some(pe) = p(m, "embed.pos") {
                    x = add(&x, &pe[i * d..(i + 1) * d]);
                }
                if m.params.contains("embed.norm.gain") {
                    x = norm(m, &x, "embed.norm");
                }
                x
            })
            .collect();
        for l in 0..spec.layers {
            let blk = format!("block{l}");
            let has_outer = m.params.contains(&format!("{blk}.ffn.w1"));
            xs = match spec.norm {
                NormStyle::PostLn => {
                    let a = attention(m, &xs, row_ids, &format!("{blk}.mha"));
                    xs.iter()
                        .zip(&a)
                        .map(|(x, a)| {
                            let mut h = norm(m, &add(x, a), &format!("{blk}.norm1"));
                            if spec.variant == Variant::Moe {
                                let (o, _) = moe_token(m, &h, &format!("{blk}.moe"));
                                h = norm(m, &add(&h, &o), &format!("{blk}.moe.norm"));
                            }
                            if has_outer {
                                h = add(&h, &ffn(m, &h, &format!("{blk}.ffn")));
                            }
                            norm(m, &h, &format!("{blk}.norm2"))
                        })
                        .collect()
                }
                NormStyle::PreRms => {
                    let normed: Vec<Vector> = xs
                        .iter()
                        .map(|x| norm(m, x, &format!("{blk}.norm1")))
                        .collect();
                    let a = attention(m, &normed, row_ids, &format!("{blk}.mha"));
                    xs.iter()
                        .zip(&a)
                        .map(|(x, a)| {
                            let mut h = add(x, a);
                            if spec.variant == Variant::Moe {
                                let hn = norm(m, &h, &format!("{blk}.moe.norm"));
                                h = add(&h, &moe_token(m, &hn, &format!("{blk}.moe")).0);
                            }
                            if has_outer {
                                let hn = norm(m, &h, &format!("{blk}.norm2"));
                                h = add(&h, &ffn(m, &hn, &format!("{blk}.ffn")));
                            }
                            h
                        })
                        .collect()
                }
            };
        }
        for x in &xs {
            let x = if spec.norm == NormStyle::PreRms {
                norm(m, x, "final_norm")
            } else {
                x.clone()
            };
            let mut out = if spec.tie_embeddings {
                let d = spec.hidden;
                let e = p(m, "embed.tok").unwrap();
                (0..spec.vocab)
                    .map(|v| (0..d).map(|k| x[k] * e[v * d + k]).sum())
                    .collect()
            } else {
                linear(m, &x, "head.w", None)
            };
            if let Some(hb) = p(m, "head.b") {
                out = add(&out, hb);
            }
            logits.extend(out);
        }
    }
    logits
}
