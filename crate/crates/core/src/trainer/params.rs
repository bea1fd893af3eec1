use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{CarError, Result};

/// Dense row-major array with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-scale..=scale)).collect(),
        }
    }

    /// Contiguous slice along the leading axes.
    pub fn row(&self, index: &[usize]) -> &[f64] {
        let (start, len) = self.span(index);
        &self.data[start..start + len]
    }

    pub fn row_mut(&mut self, index: &[usize]) -> &mut [f64] {
        let (start, len) = self.span(index);
        &mut self.data[start..start + len]
    }

    fn span(&self, index: &[usize]) -> (usize, usize) {
        let len: usize = self.shape[index.len()..].iter().product();
        let mut start = 0;
        for (k, &i) in index.iter().enumerate() {
            start = start * self.shape[k] + i;
        }
        (start * len, len)
    }

    fn check(&self, name: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape || self.data.len() != shape.iter().product::<usize>() {
            return Err(CarError::InvalidConfig(format!(
                "parameter {name} has shape {:?} ({} values), expected {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CarError::InvalidConfig(format!("parameter {name} is not finite")));
        }
        Ok(())
    }
}

/// Parameters of the class-`t` generator `g_t(., y)`; the label input `y`
/// selects the factual (`y = t`) or counterfactual mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorParams {
    /// One selection logit per (label input, word): shape `[C, N]`.
    Bow { logits: Tensor },
    /// Token scorer over `embed[w] (+) mean(neighbour embeds) (+) onehot(y)`.
    Sequence {
        /// `[N, D]`
        embed: Tensor,
        /// `[D]`
        self_weight: Tensor,
        /// `[D]`
        neighbor_weight: Tensor,
        /// `[C]`
        label_weight: Tensor,
    },
}

/// Discriminator `d(., t)` shared across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DiscriminatorParams {
    /// Logistic score over selected-word indicators: weights `[C, N]`, bias `[C]`.
    Bow { weights: Tensor, bias: Tensor },
    /// Per-token features `mask_k * embed[t, w_k]` max-pooled over positions,
    /// then a linear read-out: embed `[C, N, H]`, readout `[C, H]`, bias `[C]`.
    Sequence {
        embed: Tensor,
        readout: Tensor,
        bias: Tensor,
    },
}

/// All trainable parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub variant: Variant,
    pub class_count: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub generators: Vec<GeneratorParams>,
    pub discriminator: DiscriminatorParams,
}

pub const INIT_SCALE: f64 = 0.1;

impl CarParams {
    /// Parameters drawn i.i.d. uniform in `[-0.1, 0.1]`.
    pub fn init<R: Rng + ?Sized>(
        variant: Variant,
        class_count: usize,
        vocab_size: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(CarError::InvalidConfig(format!(
                "need at least two classes, got {class_count}"
            )));
        }
        if vocab_size == 0 {
            return Err(CarError::InvalidConfig("empty vocabulary".into()));
        }
        let (c, n, d) = (class_count, vocab_size, embed_dim);
        let s = INIT_SCALE;
        let (generators, discriminator) = match variant {
            Variant::Bow => (
                (0..c)
                    .map(|_| GeneratorParams::Bow {
                        logits: Tensor::uniform(&[c, n], s, rng),
                    })
                    .collect(),
                DiscriminatorParams::Bow {
                    weights: Tensor::uniform(&[c, n], s, rng),
                    bias: Tensor::uniform(&[c], s, rng),
                },
            ),
            Variant::Sequence => {
                if embed_dim == 0 {
                    return Err(CarError::InvalidConfig("sequence variant needs embed_dim >= 1".into()));
                }
                (
                    (0..c)
                        .map(|_| GeneratorParams::Sequence {
                            embed: Tensor::uniform(&[n, d], s, rng),
                            self_weight: Tensor::uniform(&[d], s, rng),
                            neighbor_weight: Tensor::uniform(&[d], s, rng),
                            label_weight: Tensor::uniform(&[c], s, rng),
                        })
                        .collect(),
                    DiscriminatorParams::Sequence {
                        embed: Tensor::uniform(&[c, n, d], s, rng),
                        readout: Tensor::uniform(&[c, d], s, rng),
                        bias: Tensor::uniform(&[c], s, rng),
                    },
                )
            }
        };
        Ok(Self {
            variant,
            class_count,
            vocab_size,
            embed_dim,
            generators,
            discriminator,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn generator_tensors(&self, t: usize) -> Vec<&Tensor> {
        match &self.generators[t] {
            GeneratorParams::Bow { logits } => vec![logits],
            GeneratorParams::Sequence {
                embed,
                self_weight,
                neighbor_weight,
                label_weight,
            } => vec![embed, self_weight, neighbor_weight, label_weight],
        }
    }

    fn generator_tensors_mut(gen: &mut GeneratorParams) -> Vec<&mut Tensor> {
        match gen {
            GeneratorParams::Bow { logits } => vec![logits],
            GeneratorParams::Sequence {
                embed,
                self_weight,
                neighbor_weight,
                label_weight,
            } => vec![embed, self_weight, neighbor_weight, label_weight],
        }
    }

    pub fn discriminator_tensors(&self) -> Vec<&Tensor> {
        match &self.discriminator {
            DiscriminatorParams::Bow { weights, bias } => vec![weights, bias],
            DiscriminatorParams::Sequence { embed, readout, bias } => vec![embed, readout, bias],
        }
    }

    fn discriminator_tensors_mut(disc: &mut DiscriminatorParams) -> Vec<&mut Tensor> {
        match disc {
            DiscriminatorParams::Bow { weights, bias } => vec![weights, bias],
            DiscriminatorParams::Sequence { embed, readout, bias } => vec![embed, readout, bias],
        }
    }

    /// Every tensor: generators in class order, then the discriminator.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = (0..self.generators.len())
            .flat_map(|t| self.generator_tensors(t))
            .collect();
        out.extend(self.discriminator_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .generators
            .iter_mut()
            .flat_map(Self::generator_tensors_mut)
            .collect();
        out.extend(Self::discriminator_tensors_mut(&mut self.discriminator));
        out
    }

    /// All parameters flattened in [`CarParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.data.len()).sum();
        if total != values.len() {
            return Err(CarError::DimensionMismatch {
                what: "flat parameter vector",
                expected: total,
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// `self[t-generator] += scale * grad[t-generator]`.
    pub fn step_generator(&mut self, t: usize, grad: &CarParams, scale: f64) {
        let src = grad.generator_tensors(t);
        for (dst, src) in Self::generator_tensors_mut(&mut self.generators[t])
            .into_iter()
            .zip(src)
        {
            dst.data.iter_mut().zip(&src.data).for_each(|(p, g)| *p += scale * g);
        }
    }

    /// `self[discriminator] += scale * grad[discriminator]`.
    pub fn step_discriminator(&mut self, grad: &CarParams, scale: f64) {
        let src = grad.discriminator_tensors();
        for (dst, src) in Self::discriminator_tensors_mut(&mut self.discriminator)
            .into_iter()
            .zip(src)
        {
            dst.data.iter_mut().zip(&src.data).for_each(|(p, g)| *p += scale * g);
        }
    }

    /// Check shapes against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let (c, n, d) = (self.class_count, self.vocab_size, self.embed_dim);
        if self.generators.len() != c {
            return Err(CarError::InvalidConfig(format!(
                "{} generators for {c} classes",
                self.generators.len()
            )));
        }
        for gen in &self.generators {
            match (self.variant, gen) {
                (Variant::Bow, GeneratorParams::Bow { logits }) => logits.check("logits", &[c, n])?,
                (
                    Variant::Sequence,
                    GeneratorParams::Sequence {
                        embed,
                        self_weight,
                        neighbor_weight,
                        label_weight,
                    },
                ) => {
                    embed.check("generator embed", &[n, d])?;
                    self_weight.check("self_weight", &[d])?;
                    neighbor_weight.check("neighbor_weight", &[d])?;
                    label_weight.check("label_weight", &[c])?;
                }
                _ => return Err(CarError::InvalidConfig("generator variant mismatch".into())),
            }
        }
        match (self.variant, &self.discriminator) {
            (Variant::Bow, DiscriminatorParams::Bow { weights, bias }) => {
                weights.check("weights", &[c, n])?;
                bias.check("bias", &[c])?;
            }
            (Variant::Sequence, DiscriminatorParams::Sequence { embed, readout, bias }) => {
                embed.check("discriminator embed", &[c, n, d])?;
                readout.check("readout", &[c, d])?;
                bias.check("bias", &[c])?;
            }
            _ => return Err(CarError::InvalidConfig("discriminator variant mismatch".into())),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }
}
