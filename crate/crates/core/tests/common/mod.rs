#![allow(dead_code, clippy::needless_range_loop)]

use car_core::bow_model::{sample_sequence_corpus, BowModel, Document, SequenceCorpusConfig};
use car_core::equilibrium::{eligible_words, ELIGIBILITY_TOL};
use car_core::objectives::RegularizerConfig;
use car_core::rng;
use car_core::trainer::{TrainConfig, Variant};
use rand::Rng;

pub fn six_word() -> BowModel {
    BowModel::new(
        vec![vec![0.1, 0.1, 0.7, 0.6, 0.9, 0.9], vec![0.7, 0.6, 0.1, 0.1, 0.9, 0.9]],
        vec![0.5, 0.5],
    )
    .unwrap()
}

/// Two-class model with `n` words in `n_range`, each a class-0 word, a
/// class-1 word or a neutral word (equal occurrence in both classes).
pub fn random_model(seed: u64, n_range: std::ops::RangeInclusive<usize>) -> BowModel {
    let mut r = rng::stream(seed, 7);
    loop {
        let n = r.random_range(n_range.clone());
        let p0 = r.random_range(0.3..=0.7);
        let mut occ = vec![vec![0.0; n]; 2];
        let mut kinds = Vec::with_capacity(n);
        for i in 0..n {
            let kind = r.random_range(0..3usize);
            kinds.push(kind);
            if kind == 2 {
                let v = r.random_range(0.05..=0.95);
                occ[0][i] = v;
                occ[1][i] = v;
            } else {
                let own = r.random_range(0.4..=0.95);
                let other = r.random_range(0.05..=own - 0.25);
                occ[kind][i] = own;
                occ[1 - kind][i] = other;
            }
        }
        if kinds.contains(&0) && kinds.contains(&1) {
            return BowModel::new(occ, vec![p0, 1.0 - p0]).unwrap();
        }
    }
}

/// Expected length of the eligible word set of class `t`.
pub fn eligible_budget(model: &BowModel, t: usize) -> f64 {
    let occ = model.occurrence(t);
    eligible_words(model, t, ELIGIBILITY_TOL)
        .unwrap()
        .iter()
        .map(|&i| occ[i])
        .sum()
}

/// Bow training setup whose per-class sparsity target is the eligible
/// budget spread over the vocabulary.
pub fn bow_config(model: &BowModel, seed: u64) -> TrainConfig {
    let n = model.vocab_size() as f64;
    let mut cfg = TrainConfig::new(Variant::Bow);
    cfg.steps = 20_000;
    cfg.lr_generator = 1.0;
    cfg.lr_discriminator = 1.0;
    cfg.batch_size = 32;
    cfg.seed = seed;
    let mut reg = RegularizerConfig::new(3.0, 0.0, 0.0);
    reg.class_alpha = Some((0..2).map(|t| eligible_budget(model, t) / n).collect());
    cfg.reg = reg;
    cfg
}

pub const CLASS_WORDS: usize = 8;
pub const NEUTRAL_WORDS: usize = 16;

/// Eight class words per class with graded occurrence 0.9 .. 0.4 in their
/// own class and 0.1 in the other, plus sixteen neutral words at 0.5.
pub fn phrase_model() -> BowModel {
    let n = 2 * CLASS_WORDS + NEUTRAL_WORDS;
    let mut occ = vec![vec![0.5; n]; 2];
    for t in 0..2 {
        for k in 0..CLASS_WORDS {
            occ[t][t * CLASS_WORDS + k] = 0.9 - 0.5 * k as f64 / (CLASS_WORDS - 1) as f64;
            occ[1 - t][t * CLASS_WORDS + k] = 0.1;
        }
    }
    BowModel::new(occ, vec![0.5, 0.5]).unwrap()
}

pub fn phrase_corpus(model: &BowModel, docs_per_class: usize) -> Vec<Document> {
    let mut cfg = SequenceCorpusConfig::new(docs_per_class, 30, 6);
    cfg.mixed_background = true;
    sample_sequence_corpus(model, &cfg, 42).unwrap()
}

pub fn sequence_config(lambda2: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Variant::Sequence);
    cfg.steps = 60_000;
    cfg.lr_generator = 0.05;
    cfg.lr_discriminator = 0.05;
    cfg.batch_size = 32;
    cfg.embed_dim = 8;
    cfg.seed = 1;
    cfg.reg = RegularizerConfig::new(40.0, lambda2, 0.2);
    cfg
}

pub mod gradcheck {
    use car_core::bow_model::{sample_bow_corpus, sample_sequence_corpus, Document, SequenceCorpusConfig};
    use car_core::objectives::{HKind, RegularizerConfig};
    use car_core::rng;
    use car_core::trainer::{
        init_params, objective_gradient, objective_value, CarParams, Objective, TrainConfig, Variant,
    };
    use rand::Rng;

    pub const STEP: f64 = 1e-5;
    pub const FLOOR: f64 = 1e-6;

    #[derive(Debug, Clone, Copy, Default)]
    pub struct Worst {
        pub rel_error: f64,
        pub checked: usize,
    }

    fn docs_for(variant: Variant, seed: u64) -> (Vec<Document>, usize) {
        let model = super::phrase_model();
        let docs = match variant {
            Variant::Bow => sample_bow_corpus(&model, 4, seed).unwrap(),
            Variant::Sequence => {
                let mut cfg = SequenceCorpusConfig::new(3, 8, 3);
                cfg.mixed_background = true;
                sample_sequence_corpus(&model, &cfg, seed).unwrap()
            }
        };
        (docs, model.vocab_size())
    }

    fn cases(variant: Variant) -> Vec<(Objective, HKind, RegularizerConfig)> {
        let lambda2 = if variant == Variant::Sequence { 0.7 } else { 0.0 };
        let reg = RegularizerConfig::new(1.5, lambda2, 0.3);
        vec![
            (Objective::DiscriminatorLoss, HKind::Linear, reg.clone()),
            (Objective::Factual, HKind::Linear, reg.clone()),
            (Objective::Factual, HKind::Log, reg.clone()),
            (Objective::Counterfactual, HKind::Linear, reg.clone()),
            (Objective::Counterfactual, HKind::Log, reg.clone()),
            (Objective::Penalty, HKind::Linear, reg),
        ]
    }

    /// Central differences against analytic gradients at `points` random
    /// parameter vectors (entries uniform in [-1, 1]) for every objective.
    pub fn run(variant: Variant, points: usize, seed: u64) -> Worst {
        let mut worst = Worst::default();
        let mut r = rng::stream(seed, 11);
        let prior = [0.5, 0.5];
        for point in 0..points {
            let (docs, vocab) = docs_for(variant, seed.wrapping_add(point as u64));
            let mut cfg = TrainConfig::new(variant);
            cfg.embed_dim = 4;
            let mut params: CarParams = init_params(vocab, 2, &cfg).unwrap();
            let flat: Vec<f64> = (0..params.to_flat().len())
                .map(|_| r.random_range(-1.0..=1.0))
                .collect();
            params.set_flat(&flat).unwrap();
            let t = point % 2;
            for (objective, h_kind, reg) in cases(variant) {
                cfg.h_kind = h_kind;
                cfg.reg = reg;
                let (_, grad) = objective_gradient(&params, t, &docs, &cfg, &prior, objective).unwrap();
                let analytic = grad.to_flat();
                let mut probe = params.clone();
                let mut x = flat.clone();
                for i in 0..x.len() {
                    let orig = x[i];
                    x[i] = orig + STEP;
                    probe.set_flat(&x).unwrap();
                    let up = objective_value(&probe, t, &docs, &cfg, &prior, objective).unwrap();
                    x[i] = orig - STEP;
                    probe.set_flat(&x).unwrap();
                    let down = objective_value(&probe, t, &docs, &cfg, &prior, objective).unwrap();
                    x[i] = orig;
                    let numeric = (up - down) / (2.0 * STEP);
                    let a = analytic[i];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                    worst.rel_error = worst.rel_error.max(rel);
                    worst.checked += 1;
                }
            }
        }
        worst
    }
}
