//! Forward and backward passes of one document through `g_t(., y)` and
//! `d(., t)`. Gradients flow through the mask with the straight-through rule:
//! whatever mask values were used in the forward pass, the gradient with
//! respect to the mask is handed unchanged to the relaxed probabilities.

use rand::Rng;

use super::params::{CarParams, DiscriminatorParams, GeneratorParams};
use crate::bow_model::Document;
use crate::error::{CarError, Result};
use crate::objectives::PROB_EPS;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the mask used in the forward pass is produced from the relaxed
/// probabilities.
pub enum MaskMode<'a, R: Rng + ?Sized> {
    /// Independent Bernoulli draws.
    Sample(&'a mut R),
    /// The probabilities themselves.
    Relaxed,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub relaxed: Vec<f64>,
    pub mask: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    /// Discriminator output before clamping.
    pub d_raw: f64,
}

impl Pass {
    pub fn d(&self) -> f64 {
        self.d_raw.clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    fn clamped(&self) -> bool {
        !(PROB_EPS..=1.0 - PROB_EPS).contains(&self.d_raw)
    }
}

/// Check that `doc` fits the parameter dimensions and the variant.
pub(crate) fn check_document(params: &CarParams, doc: &Document) -> Result<()> {
    doc.validate(params.vocab_size)?;
    if doc.label >= params.class_count {
        return Err(CarError::ClassOutOfRange {
            class: doc.label,
            class_count: params.class_count,
        });
    }
    if matches!(params.variant, super::Variant::Sequence) {
        match &doc.tokens {
            None => {
                return Err(CarError::InvalidConfig(
                    "sequence variant needs tokenized documents".into(),
                ))
            }
            Some(t) if t.is_empty() => return Err(CarError::EmptyInput("document tokens")),
            Some(_) => {}
        }
    }
    Ok(())
}

fn tokens(doc: &Document) -> &[usize] {
    doc.tokens.as_deref().expect("checked by check_document")
}

/// Neighbour positions of `k` in a sequence of length `len`.
fn neighbors(k: usize, len: usize) -> impl Iterator<Item = usize> {
    let left = k.checked_sub(1);
    let right = (k + 1 < len).then_some(k + 1);
    left.into_iter().chain(right)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

/// Relaxed selection probabilities of `g_t(., y)`: one per word for bags
/// (zero for absent words), one per position for sequences.
pub(crate) fn generator_probs(params: &CarParams, t: usize, doc: &Document, y: usize) -> Vec<f64> {
    match &params.generators[t] {
        GeneratorParams::Bow { logits } => doc
            .bag
            .iter()
            .zip(logits.row(&[y]))
            .map(|(&present, &l)| if present { sigmoid(l) } else { 0.0 })
            .collect(),
        GeneratorParams::Sequence {
            embed,
            self_weight,
            neighbor_weight,
            label_weight,
        } => {
            let toks = tokens(doc);
            let own: Vec<f64> = toks.iter().map(|&w| dot(embed.row(&[w]), &self_weight.data)).collect();
            let near: Vec<f64> = toks
                .iter()
                .map(|&w| dot(embed.row(&[w]), &neighbor_weight.data))
                .collect();
            (0..toks.len())
                .map(|k| {
                    let (sum, count) = neighbors(k, toks.len()).fold((0.0, 0usize), |(s, c), n| (s + near[n], c + 1));
                    let context = if count > 0 { sum / count as f64 } else { 0.0 };
                    sigmoid(own[k] + context + label_weight.data[y])
                })
                .collect()
        }
    }
}

/// Run `doc` (with label input `y`) through `g_t` and `d(., t)`.
pub(crate) fn forward<R: Rng + ?Sized>(
    params: &CarParams,
    t: usize,
    doc: &Document,
    y: usize,
    mode: &mut MaskMode<'_, R>,
) -> Pass {
    let relaxed = generator_probs(params, t, doc, y);
    let mask: Vec<f64> = match mode {
        MaskMode::Relaxed => relaxed.clone(),
        MaskMode::Sample(rng) => relaxed
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect(),
    };
    discriminate(params, t, doc, relaxed, mask)
}

fn discriminate(params: &CarParams, t: usize, doc: &Document, relaxed: Vec<f64>, mask: Vec<f64>) -> Pass {
    match &params.discriminator {
        DiscriminatorParams::Bow { weights, bias } => {
            let score = bias.data[t] + dot(weights.row(&[t]), &mask);
            Pass {
                relaxed,
                mask,
                pooled: Vec::new(),
                argmax: Vec::new(),
                d_raw: sigmoid(score),
            }
        }
        DiscriminatorParams::Sequence { embed, readout, bias } => {
            let toks = tokens(doc);
            let hidden = readout.shape[1];
            let mut pooled = vec![f64::NEG_INFINITY; hidden];
            let mut argmax = vec![0; hidden];
            for (k, &w) in toks.iter().enumerate() {
                let row = embed.row(&[t, w]);
                for j in 0..hidden {
                    let v = mask[k] * row[j];
                    if v > pooled[j] {
                        pooled[j] = v;
                        argmax[j] = k;
                    }
                }
            }
            let score = bias.data[t] + dot(readout.row(&[t]), &pooled);
            Pass {
                relaxed,
                mask,
                pooled,
                argmax,
                d_raw: sigmoid(score),
            }
        }
    }
}

/// Accumulate into `grad` the gradient of an objective whose derivative is
/// `g_d` with respect to the clamped discriminator output and `g_mask` with
/// respect to the mask entries directly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    params: &CarParams,
    t: usize,
    doc: &Document,
    y: usize,
    pass: &Pass,
    g_d: f64,
    g_mask: Option<&[f64]>,
    grad: &mut CarParams,
) {
    let g_score = if pass.clamped() {
        0.0
    } else {
        g_d * pass.d_raw * (1.0 - pass.d_raw)
    };
    let mut g_sel: Vec<f64> = match g_mask {
        Some(g) => g.to_vec(),
        None => vec![0.0; pass.mask.len()],
    };

    match (&params.discriminator, &mut grad.discriminator) {
        (DiscriminatorParams::Bow { weights, .. }, DiscriminatorParams::Bow { weights: gw, bias: gb }) => {
            gb.data[t] += g_score;
            axpy(gw.row_mut(&[t]), g_score, &pass.mask);
            axpy(&mut g_sel, g_score, weights.row(&[t]));
        }
        (
            DiscriminatorParams::Sequence { embed, readout, .. },
            DiscriminatorParams::Sequence {
                embed: ge,
                readout: gr,
                bias: gb,
            },
        ) => {
            gb.data[t] += g_score;
            axpy(gr.row_mut(&[t]), g_score, &pass.pooled);
            let toks = tokens(doc);
            let u = readout.row(&[t]);
            for (j, &k) in pass.argmax.iter().enumerate() {
                let g_pool = g_score * u[j];
                let w = toks[k];
                ge.row_mut(&[t, w])[j] += g_pool * pass.mask[k];
                g_sel[k] += g_pool * embed.row(&[t, w])[j];
            }
        }
        _ => unreachable!("gradient buffer built from the same parameters"),
    }

    match (&params.generators[t], &mut grad.generators[t]) {
        (GeneratorParams::Bow { .. }, GeneratorParams::Bow { logits: gl }) => {
            let row = gl.row_mut(&[y]);
            for (i, (&g, &r)) in g_sel.iter().zip(&pass.relaxed).enumerate() {
                if doc.bag[i] {
                    row[i] += g * r * (1.0 - r);
                }
            }
        }
        (
            GeneratorParams::Sequence {
                embed,
                self_weight,
                neighbor_weight,
                ..
            },
            GeneratorParams::Sequence {
                embed: ge,
                self_weight: gs,
                neighbor_weight: gn,
                label_weight: gl,
            },
        ) => {
            let toks = tokens(doc);
            for (k, (&g, &r)) in g_sel.iter().zip(&pass.relaxed).enumerate() {
                let g_pre = g * r * (1.0 - r);
                if g_pre == 0.0 {
                    continue;
                }
                let w = toks[k];
                gl.data[y] += g_pre;
                axpy(&mut gs.data, g_pre, embed.row(&[w]));
                axpy(ge.row_mut(&[w]), g_pre, &self_weight.data);
                let count = neighbors(k, toks.len()).count();
                if count == 0 {
                    continue;
                }
                let share = g_pre / count as f64;
                for n in neighbors(k, toks.len()) {
                    let wn = toks[n];
                    axpy(&mut gn.data, share, embed.row(&[wn]));
                    axpy(ge.row_mut(&[wn]), share, &neighbor_weight.data);
                }
            }
        }
        _ => unreachable!("gradient buffer built from the same parameters"),
    }
}
