//! Alternating gradient training of the three-player game.
//!
//! For every class `t` there is a generator `g_t(., y)` whose label input
//! selects factual (`y = t`) or counterfactual (`y != t`) mode, and a shared
//! discriminator `d(., t)` that tells factual rationales from counterfactual
//! ones. One round updates `t = 0, 1, ..., C - 1` in turn; each class step
//! moves the discriminator down its loss and the class-`t` generator up its
//! objective minus the sparsity/continuity penalty, both from the same
//! forward pass.

mod network;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bow_model::{sample_document, BowModel, Document};
use crate::equilibrium::SelectionPolicy;
use crate::error::{check_class, CarError, Result};
use crate::objectives::{
    batch_penalty, discriminator_loss, generator_objective, HKind, HPair, MaskLayout, RegularizerConfig, Role,
};
use crate::rng::{self, streams, LabRng};

pub use network::MaskMode;
use network::{backward, check_document, forward, generator_probs, sigmoid, Pass};
pub use params::{CarParams, DiscriminatorParams, GeneratorParams, Tensor};

/// Network family: per-word logits over bags, or a token scorer over
/// sequences with a max-pooling discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Bow,
    Sequence,
}

impl FromStr for Variant {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(Self::Bow),
            "sequence" => Ok(Self::Sequence),
            other => Err(CarError::InvalidConfig(format!(
                "unknown variant {other:?} (expected bow or sequence)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bow => "bow",
            Self::Sequence => "sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub h_kind: HKind,
    pub reg: RegularizerConfig,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Documents per role in every class step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub embed_dim: usize,
}

impl TrainConfig {
    /// Defaults for `variant`: linear pair, plain SGD at 0.05 (bow) or 0.01
    /// (sequence), 32 documents per role.
    pub fn new(variant: Variant) -> Self {
        let (lr, embed_dim) = match variant {
            Variant::Bow => (0.05, 0),
            Variant::Sequence => (0.01, 8),
        };
        Self {
            h_kind: HKind::Linear,
            reg: RegularizerConfig::new(1.0, 0.0, 0.2),
            lr_generator: lr,
            lr_discriminator: lr,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            variant,
            embed_dim,
        }
    }

    /// All problems at once, so a caller can report them before any compute.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.h_kind == HKind::Custom {
            out.push("h_kind must be log or linear".to_string());
        }
        if let Err(e) = self.reg.validate() {
            out.push(e.to_string());
        }
        if !(self.lr_generator > 0.0 && self.lr_generator.is_finite()) {
            out.push(format!("lr_generator must be positive, got {}", self.lr_generator));
        }
        if !(self.lr_discriminator > 0.0 && self.lr_discriminator.is_finite()) {
            out.push(format!(
                "lr_discriminator must be positive, got {}",
                self.lr_discriminator
            ));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".to_string());
        }
        if self.variant == Variant::Sequence && self.embed_dim == 0 {
            out.push("sequence variant needs embed_dim >= 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CarError::InvalidConfig(problems.join("; ")))
        }
    }

    fn layout(&self) -> MaskLayout {
        match self.variant {
            Variant::Bow => MaskLayout::Bag,
            Variant::Sequence => MaskLayout::Sequence,
        }
    }
}

/// Binary rationale over words (bow) or positions (sequence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleMask {
    pub selected: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed: Option<Vec<f64>>,
}

impl RationaleMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Number of positions where the mask switches on or off.
    pub fn transitions(&self) -> usize {
        self.selected.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// Sample `S_k ~ Bernoulli(probs_k)`. In training, gradients with respect to
/// `S` are applied to `probs` unchanged.
pub fn straight_through_mask<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<RationaleMask> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CarError::InvalidConfig(format!(
            "selection probability {p} outside [0,1]"
        )));
    }
    Ok(RationaleMask {
        selected: probs.iter().map(|&p| rng.random::<f64>() < p).collect(),
        relaxed: Some(probs.to_vec()),
    })
}

/// Initial parameters, uniform in `[-0.1, 0.1]`, drawn from the seed's init
/// stream.
pub fn init_params(vocab_size: usize, class_count: usize, cfg: &TrainConfig) -> Result<CarParams> {
    let embed_dim = match cfg.variant {
        Variant::Bow => 0,
        Variant::Sequence => cfg.embed_dim,
    };
    CarParams::init(
        cfg.variant,
        class_count,
        vocab_size,
        embed_dim,
        &mut rng::stream(cfg.seed, streams::INIT),
    )
}

/// Scalar objectives of one class step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Discriminator loss (minimized).
    DiscriminatorLoss,
    /// Mean `h0(d)` over factual documents (maximized).
    Factual,
    /// Mean `h1(d)` over counterfactual documents (maximized).
    Counterfactual,
    /// Sparsity/continuity penalty on the factual masks.
    Penalty,
}

/// Losses of one class step, measured on the forward pass before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub disc_loss: f64,
    /// Factual plus counterfactual generator objective.
    pub gen_obj: f64,
    /// Mean relaxed selected fraction of the factual masks.
    pub sparsity: f64,
    pub penalty: f64,
}

struct Forward<'a> {
    docs: &'a [Document],
    passes: Vec<Pass>,
    factual: Vec<usize>,
    counterfactual: Vec<usize>,
}

fn run_forward<'a, R: Rng + ?Sized>(
    params: &CarParams,
    t: usize,
    docs: &'a [Document],
    mode: &mut MaskMode<'_, R>,
) -> Result<Forward<'a>> {
    check_class(t, params.class_count)?;
    for doc in docs {
        check_document(params, doc)?;
    }
    let (factual, counterfactual): (Vec<usize>, Vec<usize>) = (0..docs.len()).partition(|&i| docs[i].label == t);
    if factual.is_empty() || counterfactual.is_empty() {
        return Err(CarError::InvalidConfig(format!(
            "class-{t} batch needs documents with and without label {t}"
        )));
    }
    let passes = docs
        .iter()
        .map(|doc| forward(params, t, doc, doc.label, mode))
        .collect();
    Ok(Forward {
        docs,
        passes,
        factual,
        counterfactual,
    })
}

/// Value of `objective` and its derivatives with respect to each document's
/// discriminator output and mask.
struct Upstream {
    value: f64,
    g_d: Vec<f64>,
    g_mask: Vec<Option<Vec<f64>>>,
}

fn class_prior(prior: &[f64], t: usize) -> [f64; 2] {
    [prior[t], 1.0 - prior[t]]
}

fn upstream(fwd: &Forward<'_>, objective: Objective, t: usize, cfg: &TrainConfig, prior: &[f64]) -> Result<Upstream> {
    let n = fwd.passes.len();
    let mut g_d = vec![0.0; n];
    let mut g_mask = vec![None; n];
    let d_of = |idx: &[usize]| idx.iter().map(|&i| fwd.passes[i].d()).collect::<Vec<_>>();
    let (nf, nc) = (fwd.factual.len() as f64, fwd.counterfactual.len() as f64);
    let value = match objective {
        Objective::DiscriminatorLoss => {
            let p = class_prior(prior, t);
            for &i in &fwd.factual {
                g_d[i] = -p[0] / (nf * fwd.passes[i].d());
            }
            for &i in &fwd.counterfactual {
                g_d[i] = p[1] / (nc * (1.0 - fwd.passes[i].d()));
            }
            discriminator_loss(&d_of(&fwd.factual), &d_of(&fwd.counterfactual), p)?
        }
        Objective::Factual | Objective::Counterfactual => {
            let h = HPair::from_kind(cfg.h_kind)?;
            let (role, idx, count) = if objective == Objective::Factual {
                (Role::Factual, &fwd.factual, nf)
            } else {
                (Role::Counterfactual, &fwd.counterfactual, nc)
            };
            for &i in idx {
                g_d[i] = h.derivative(role, fwd.passes[i].d()) / count;
            }
            generator_objective(&d_of(idx), &h, role)?
        }
        Objective::Penalty => {
            let masks: Vec<&[f64]> = fwd.factual.iter().map(|&i| fwd.passes[i].mask.as_slice()).collect();
            let (value, grads) = batch_penalty(
                &masks,
                cfg.reg.lambda1,
                cfg.reg.lambda2,
                cfg.reg.alpha_for(t),
                cfg.layout(),
            )?;
            for (&i, g) in fwd.factual.iter().zip(grads) {
                g_mask[i] = Some(g);
            }
            value
        }
    };
    Ok(Upstream { value, g_d, g_mask })
}

fn gradient(params: &CarParams, t: usize, fwd: &Forward<'_>, parts: &[(f64, &Upstream)]) -> CarParams {
    let mut grad = params.zeros_like();
    for (i, (doc, pass)) in fwd.docs.iter().zip(&fwd.passes).enumerate() {
        let g_d: f64 = parts.iter().map(|(w, u)| w * u.g_d[i]).sum();
        let mut g_mask: Option<Vec<f64>> = None;
        for (w, u) in parts {
            if let Some(g) = &u.g_mask[i] {
                let acc = g_mask.get_or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
            }
        }
        backward(params, t, doc, doc.label, pass, g_d, g_mask.as_deref(), &mut grad);
    }
    grad
}

/// Value and gradient (with respect to every parameter) of `objective` on
/// relaxed masks, i.e. with the mask equal to the selection probabilities.
pub fn objective_gradient(
    params: &CarParams,
    t: usize,
    docs: &[Document],
    cfg: &TrainConfig,
    prior: &[f64],
    objective: Objective,
) -> Result<(f64, CarParams)> {
    let fwd = run_forward::<LabRng>(params, t, docs, &mut MaskMode::Relaxed)?;
    let up = upstream(&fwd, objective, t, cfg, prior)?;
    let grad = gradient(params, t, &fwd, &[(1.0, &up)]);
    Ok((up.value, grad))
}

/// Value of `objective` on relaxed masks.
pub fn objective_value(
    params: &CarParams,
    t: usize,
    docs: &[Document],
    cfg: &TrainConfig,
    prior: &[f64],
    objective: Objective,
) -> Result<f64> {
    let fwd = run_forward::<LabRng>(params, t, docs, &mut MaskMode::Relaxed)?;
    Ok(upstream(&fwd, objective, t, cfg, prior)?.value)
}

/// One simultaneous update of `d(., t)` and `g_t` on `docs`.
///
/// Documents labelled `t` run through factual mode, the rest through
/// counterfactual mode with their own label as input. With `rng` the masks
/// are Bernoulli samples (straight-through); without, the relaxed
/// probabilities are used directly. `prior` is the class prior.
pub fn train_step_class(
    params: &mut CarParams,
    t: usize,
    docs: &[Document],
    cfg: &TrainConfig,
    prior: &[f64],
    rng: Option<&mut LabRng>,
) -> Result<StepLosses> {
    if prior.len() != params.class_count {
        return Err(CarError::DimensionMismatch {
            what: "prior",
            expected: params.class_count,
            got: prior.len(),
        });
    }
    let fwd = match rng {
        Some(r) => run_forward(params, t, docs, &mut MaskMode::Sample(r))?,
        None => run_forward::<LabRng>(params, t, docs, &mut MaskMode::Relaxed)?,
    };
    let disc = upstream(&fwd, Objective::DiscriminatorLoss, t, cfg, prior)?;
    let fact = upstream(&fwd, Objective::Factual, t, cfg, prior)?;
    let counter = upstream(&fwd, Objective::Counterfactual, t, cfg, prior)?;
    let penalty = upstream(&fwd, Objective::Penalty, t, cfg, prior)?;

    let g_disc = gradient(params, t, &fwd, &[(1.0, &disc)]);
    let g_gen = gradient(params, t, &fwd, &[(1.0, &fact), (1.0, &counter), (-1.0, &penalty)]);

    let sparsity = fwd
        .factual
        .iter()
        .map(|&i| {
            let r = &fwd.passes[i].relaxed;
            r.iter().sum::<f64>() / r.len() as f64
        })
        .sum::<f64>()
        / fwd.factual.len() as f64;
    let losses = StepLosses {
        disc_loss: disc.value,
        gen_obj: fact.value + counter.value,
        sparsity,
        penalty: penalty.value,
    };

    params.step_discriminator(&g_disc, -cfg.lr_discriminator);
    params.step_generator(t, &g_gen, cfg.lr_generator);
    Ok(losses)
}

/// Where training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Fresh bag-of-words documents sampled from the model every step.
    Model(&'a BowModel),
    /// A fixed corpus over `class_count` classes, resampled with replacement.
    Corpus { docs: &'a [Document], class_count: usize },
}

struct BatchSource<'a> {
    data: TrainData<'a>,
    vocab_size: usize,
    class_count: usize,
    prior: Vec<f64>,
    by_class: Vec<Vec<&'a Document>>,
}

impl<'a> BatchSource<'a> {
    fn new(data: TrainData<'a>) -> Result<Self> {
        match data {
            TrainData::Model(model) => {
                model.validate()?;
                Ok(Self {
                    data,
                    vocab_size: model.vocab_size(),
                    class_count: model.class_count(),
                    prior: model.prior().to_vec(),
                    by_class: Vec::new(),
                })
            }
            TrainData::Corpus { docs, class_count } => {
                let first = docs.first().ok_or(CarError::EmptyInput("corpus"))?;
                let vocab_size = first.bag.len();
                let mut by_class = vec![Vec::new(); class_count];
                for doc in docs {
                    doc.validate(vocab_size)?;
                    check_class(doc.label, class_count)?;
                    by_class[doc.label].push(doc);
                }
                if let Some(missing) = by_class.iter().position(Vec::is_empty) {
                    return Err(CarError::MissingClass(missing));
                }
                let total = docs.len() as f64;
                let prior = by_class.iter().map(|v| v.len() as f64 / total).collect();
                Ok(Self {
                    data,
                    vocab_size,
                    class_count,
                    prior,
                    by_class,
                })
            }
        }
    }

    fn draw(&self, y: usize, rng: &mut LabRng) -> Result<Document> {
        match self.data {
            TrainData::Model(model) => sample_document(model, y, rng),
            TrainData::Corpus { .. } => {
                let pool = &self.by_class[y];
                Ok(pool[rng.random_range(0..pool.len())].clone())
            }
        }
    }

    /// `batch` documents labelled `t`, then `batch` documents whose labels
    /// follow the prior restricted to the other classes.
    fn batch(&self, t: usize, batch: usize, rng: &mut LabRng) -> Result<Vec<Document>> {
        let others: Vec<usize> = (0..self.class_count).filter(|&y| y != t).collect();
        let weights: Vec<f64> = others.iter().map(|&y| self.prior[y]).collect();
        let pick = WeightedIndex::new(&weights)
            .or_else(|_| WeightedIndex::new(vec![1.0; others.len()]))
            .map_err(|e| CarError::InvalidModel(e.to_string()))?;
        let mut docs = Vec::with_capacity(2 * batch);
        for _ in 0..batch {
            docs.push(self.draw(t, rng)?);
        }
        for _ in 0..batch {
            let y = others[pick.sample(rng)];
            docs.push(self.draw(y, rng)?);
        }
        Ok(docs)
    }
}

/// One row per class step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub t: usize,
    pub disc_loss: f64,
    pub gen_obj: f64,
    pub sparsity: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "step,t,disc_loss,gen_obj,sparsity,penalty";

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.t, r.disc_loss, r.gen_obj, r.sparsity, r.penalty
            ));
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<HistoryRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Mean factual sparsity of class `t` over the last `window` steps.
    pub fn recent_sparsity(&self, t: usize, window: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .rows
            .iter()
            .rev()
            .filter(|r| r.t == t)
            .take(window)
            .map(|r| r.sparsity)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: CarParams,
    pub history: History,
}

/// Two-class training.
pub fn train(data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let source = BatchSource::new(data)?;
    if source.class_count != 2 {
        return Err(CarError::InvalidConfig(format!(
            "train expects two classes, got {}; use multiclass_train",
            source.class_count
        )));
    }
    run(&source, cfg)
}

/// Training over `C >= 2` classes: each round steps `t = 0..C-1`; the
/// counterfactual side of class `t` draws documents of every other class.
pub fn multiclass_train(data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let source = BatchSource::new(data)?;
    if source.class_count < 2 {
        return Err(CarError::InvalidConfig("need at least two classes".into()));
    }
    run(&source, cfg)
}

fn run(source: &BatchSource<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut params = init_params(source.vocab_size, source.class_count, cfg)?;
    if cfg.variant == Variant::Sequence {
        for pool in &source.by_class {
            for doc in pool {
                check_document(&params, doc)?;
            }
        }
        if matches!(source.data, TrainData::Model(_)) {
            return Err(CarError::InvalidConfig(
                "sequence variant trains on a tokenized corpus, not a model".into(),
            ));
        }
    }
    let mut rng = rng::stream(cfg.seed, streams::TRAIN);
    let mut history = History::default();
    for step in 0..cfg.steps {
        for t in 0..source.class_count {
            let docs = source.batch(t, cfg.batch_size, &mut rng)?;
            let losses = train_step_class(&mut params, t, &docs, cfg, &source.prior, Some(&mut rng))?;
            history.rows.push(HistoryRow {
                step,
                t,
                disc_loss: losses.disc_loss,
                gen_obj: losses.gen_obj,
                sparsity: losses.sparsity,
                penalty: losses.penalty,
            });
        }
    }
    Ok(TrainOutput { params, history })
}

/// Deterministic rationale for `doc` from generator `g_t`, thresholded at 0.5.
///
/// Without a label the factual mode `g_t(., t)` runs whatever the document's
/// true class; with `label = y` the label input is `y`, which is factual
/// mode when `y = t` and counterfactual mode otherwise.
pub fn infer_rationale(params: &CarParams, doc: &Document, t: usize, label: Option<usize>) -> Result<RationaleMask> {
    check_class(t, params.class_count)?;
    let y = label.unwrap_or(t);
    check_class(y, params.class_count)?;
    let mut probe = doc.clone();
    probe.label = y;
    check_document(params, &probe)?;
    let probs = generator_probs(params, t, doc, y);
    Ok(RationaleMask {
        selected: probs.iter().map(|&p| p > 0.5).collect(),
        relaxed: Some(probs),
    })
}

/// Per-word selection probabilities of the bow generator `g_t(., label)`.
pub fn bow_selection_policy(params: &CarParams, t: usize, label: usize) -> Result<SelectionPolicy> {
    check_class(t, params.class_count)?;
    check_class(label, params.class_count)?;
    let GeneratorParams::Bow { logits } = &params.generators[t] else {
        return Err(CarError::InvalidConfig(
            "selection policies exist for the bow variant only".into(),
        ));
    };
    let role = if label == t {
        Role::Factual
    } else {
        Role::Counterfactual
    };
    SelectionPolicy::new(t, logits.row(&[label]).iter().map(|&l| sigmoid(l)).collect(), role)
}
