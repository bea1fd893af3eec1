//! Class-conditional bag-of-words text model.
//!
//! Each word `i` occurs in a document of class `y` independently with
//! probability `occurrence[y][i]`. The model is also the source of the
//! synthetic sequence corpora used for rationale evaluation: documents with a
//! planted phrase of class words embedded in background text.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_class, CarError, Result};
use crate::rng;

pub const DEFAULT_POLARITY_TOL: f64 = 1e-6;
const PRIOR_TOL: f64 = 1e-12;

/// Class-conditional Bernoulli occurrence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowModel {
    vocab_size: usize,
    class_count: usize,
    prior: Vec<f64>,
    /// Row-major `[class_count x vocab_size]`.
    occurrence: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word_names: Option<Vec<String>>,
}

impl BowModel {
    /// Build a model from per-class occurrence rows and a class prior.
    pub fn new(occurrence: Vec<Vec<f64>>, prior: Vec<f64>) -> Result<Self> {
        let class_count = occurrence.len();
        let vocab_size = occurrence.first().map_or(0, Vec::len);
        if let Some((y, row)) = occurrence.iter().enumerate().find(|(_, r)| r.len() != vocab_size) {
            return Err(CarError::InvalidModel(format!(
                "occurrence row {y} has {} entries, expected {vocab_size}",
                row.len()
            )));
        }
        let model = Self {
            vocab_size,
            class_count,
            prior,
            occurrence: occurrence.into_iter().flatten().collect(),
            word_names: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_word_names(mut self, names: Vec<String>) -> Result<Self> {
        self.word_names = Some(names);
        self.validate()?;
        Ok(self)
    }

    /// Model with planted polarity structure.
    ///
    /// Words are laid out class by class (`class_words[0]` class-0 words, then
    /// class-1 words, ...) followed by neutral words. The `k`-th word of class
    /// `t` occurs with probability `high[k % high.len()]` in class `t` and
    /// `low` in every other class; neutral words occur with `neutral` in all
    /// classes.
    pub fn planted(spec: &PlantedSpec) -> Result<Self> {
        let class_count = spec.prior.len();
        if spec.class_words.len() != class_count {
            return Err(CarError::InvalidConfig(format!(
                "{} class word counts given for {class_count} classes",
                spec.class_words.len()
            )));
        }
        let planted: usize = spec.class_words.iter().sum();
        if planted > spec.vocab_size {
            return Err(CarError::InvalidConfig(format!(
                "{planted} class words do not fit in a vocabulary of {}",
                spec.vocab_size
            )));
        }
        if spec.high.is_empty() {
            return Err(CarError::InvalidConfig("empty occurrence level list".into()));
        }
        let mut occurrence = vec![vec![spec.neutral; spec.vocab_size]; class_count];
        let mut names = Vec::with_capacity(spec.vocab_size);
        let mut word = 0;
        for (t, &count) in spec.class_words.iter().enumerate() {
            for k in 0..count {
                for (y, row) in occurrence.iter_mut().enumerate() {
                    row[word] = if y == t {
                        spec.high[k % spec.high.len()]
                    } else {
                        spec.low
                    };
                }
                names.push(format!("c{t}_{k}"));
                word += 1;
            }
        }
        for k in 0..spec.vocab_size - planted {
            names.push(format!("n_{k}"));
        }
        Self::new(occurrence, spec.prior.clone())?.with_word_names(names)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// `p(X_i = 1 | Y = y)` for every word.
    pub fn occurrence(&self, y: usize) -> &[f64] {
        &self.occurrence[y * self.vocab_size..(y + 1) * self.vocab_size]
    }

    pub fn word_names(&self) -> Option<&[String]> {
        self.word_names.as_deref()
    }

    /// Display name of word `i`, falling back to its index.
    pub fn word_name(&self, i: usize) -> String {
        self.word_names
            .as_ref()
            .and_then(|n| n.get(i).cloned())
            .unwrap_or_else(|| i.to_string())
    }

    /// Check every model invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(CarError::InvalidModel("vocab_size must be at least 1".into()));
        }
        if self.class_count < 2 {
            return Err(CarError::InvalidModel(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.prior.len() != self.class_count {
            return Err(CarError::InvalidModel(format!(
                "prior has {} entries for {} classes",
                self.prior.len(),
                self.class_count
            )));
        }
        if self.occurrence.len() != self.class_count * self.vocab_size {
            return Err(CarError::InvalidModel(format!(
                "occurrence has {} entries, expected {}",
                self.occurrence.len(),
                self.class_count * self.vocab_size
            )));
        }
        if let Some((y, p)) = self
            .prior
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0 && p.is_finite()))
        {
            return Err(CarError::InvalidModel(format!("prior[{y}] = {p} is negative")));
        }
        let total: f64 = self.prior.iter().sum();
        if (total - 1.0).abs() > PRIOR_TOL {
            return Err(CarError::InvalidModel(format!("prior not normalized: sums to {total}")));
        }
        if let Some(k) = self.occurrence.iter().position(|p| !(0.0..=1.0).contains(p)) {
            let (y, i) = (k / self.vocab_size, k % self.vocab_size);
            return Err(CarError::InvalidModel(format!(
                "occurrence ({y},{i}) = {} outside [0,1]",
                self.occurrence[k]
            )));
        }
        if let Some(names) = &self.word_names {
            if names.len() != self.vocab_size {
                return Err(CarError::InvalidModel(format!(
                    "{} word names for a vocabulary of {}",
                    names.len(),
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Parameters of [`BowModel::planted`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub vocab_size: usize,
    pub class_words: Vec<usize>,
    pub high: Vec<f64>,
    pub low: f64,
    pub neutral: f64,
    pub prior: Vec<f64>,
}

/// A sampled text instance: a binary bag over the vocabulary and, for the
/// sequence variant, the ordered tokens with their planted rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub label: usize,
    #[serde(with = "bits")]
    pub bag: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_bits")]
    pub truth_mask: Option<Vec<bool>>,
}

impl Document {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.bag.len() != vocab_size {
            return Err(CarError::DimensionMismatch {
                what: "document bag",
                expected: vocab_size,
                got: self.bag.len(),
            });
        }
        if let Some(tokens) = &self.tokens {
            if let Some(&bad) = tokens.iter().find(|&&w| w >= vocab_size) {
                return Err(CarError::InvalidModel(format!(
                    "token id {bad} outside a vocabulary of {vocab_size}"
                )));
            }
            if let Some(mask) = &self.truth_mask {
                if mask.len() != tokens.len() {
                    return Err(CarError::DimensionMismatch {
                        what: "truth mask",
                        expected: tokens.len(),
                        got: mask.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of scoring units: tokens for sequences, vocabulary for bags.
    pub fn len(&self) -> usize {
        self.tokens.as_ref().map_or(self.bag.len(), Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write a corpus as JSON lines, one document per line.
pub fn corpus_to_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_from_jsonl(text: &str) -> Result<Vec<Document>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CarError::from))
        .collect()
}

/// Per-word polarity tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Class(usize),
    Neutral,
}

/// Tag each word with the class whose occurrence exceeds every other class
/// by more than `tol`; everything else is neutral.
pub fn word_polarity(model: &BowModel, tol: f64) -> Vec<Polarity> {
    (0..model.vocab_size())
        .map(|i| {
            let (best, best_p) = (0..model.class_count()).map(|y| (y, model.occurrence(y)[i])).fold(
                (0, f64::NEG_INFINITY),
                |acc, (y, p)| if p > acc.1 { (y, p) } else { acc },
            );
            let dominates = (0..model.class_count())
                .filter(|&y| y != best)
                .all(|y| best_p - model.occurrence(y)[i] > tol);
            if dominates {
                Polarity::Class(best)
            } else {
                Polarity::Neutral
            }
        })
        .collect()
}

/// Draw a bag-of-words document of class `y`.
pub fn sample_document<R: Rng + ?Sized>(model: &BowModel, y: usize, rng: &mut R) -> Result<Document> {
    check_class(y, model.class_count())?;
    let bag = model.occurrence(y).iter().map(|&p| rng.random::<f64>() < p).collect();
    Ok(Document {
        label: y,
        bag,
        tokens: None,
        truth_mask: None,
    })
}

/// Balanced bag-of-words corpus; document `j` has label `j % class_count`.
pub fn sample_bow_corpus(model: &BowModel, docs_per_class: usize, seed: u64) -> Result<Vec<Document>> {
    let corpus_seed = rng::derive_seed(seed, rng::streams::CORPUS);
    let c = model.class_count();
    (0..docs_per_class * c)
        .into_par_iter()
        .map(|j| sample_document(model, j % c, &mut rng::stream(corpus_seed, j as u64)))
        .collect()
}

/// Shape of a planted-phrase corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceCorpusConfig {
    pub docs_per_class: usize,
    pub seq_len: usize,
    pub phrase_len: usize,
    /// Allow other classes' words in the background (mixed-sentiment text).
    pub mixed_background: bool,
    pub polarity_tol: f64,
}

impl SequenceCorpusConfig {
    pub fn new(docs_per_class: usize, seq_len: usize, phrase_len: usize) -> Self {
        Self {
            docs_per_class,
            seq_len,
            phrase_len,
            mixed_background: false,
            polarity_tol: DEFAULT_POLARITY_TOL,
        }
    }
}

struct ClassSampler {
    phrase: Option<(Vec<usize>, WeightedIndex<f64>)>,
    background: Option<(Vec<usize>, WeightedIndex<f64>)>,
}

fn weighted(words: Vec<usize>, weights: &[f64]) -> Option<(Vec<usize>, WeightedIndex<f64>)> {
    let w: Vec<f64> = words.iter().map(|&i| weights[i]).collect();
    // Zero-weight word sets fall back to uniform draws.
    let dist = WeightedIndex::new(&w)
        .or_else(|_| WeightedIndex::new(vec![1.0; words.len()]))
        .ok()?;
    Some((words, dist))
}

/// Token-sequence corpus with one planted phrase of class-`y` words per
/// document; `truth_mask` marks the phrase positions.
pub fn sample_sequence_corpus(model: &BowModel, cfg: &SequenceCorpusConfig, seed: u64) -> Result<Vec<Document>> {
    if cfg.phrase_len > cfg.seq_len {
        return Err(CarError::InvalidConfig(format!(
            "phrase_len {} exceeds seq_len {}",
            cfg.phrase_len, cfg.seq_len
        )));
    }
    let polarity = word_polarity(model, cfg.polarity_tol);
    let c = model.class_count();
    let samplers = (0..c)
        .map(|y| {
            let occ = model.occurrence(y);
            let own: Vec<usize> = (0..model.vocab_size())
                .filter(|&i| polarity[i] == Polarity::Class(y))
                .collect();
            let background: Vec<usize> = (0..model.vocab_size())
                .filter(|&i| match polarity[i] {
                    Polarity::Neutral => true,
                    Polarity::Class(t) => cfg.mixed_background && t != y,
                })
                .collect();
            let phrase = if cfg.phrase_len > 0 {
                if own.is_empty() {
                    return Err(CarError::NoClassWords(y));
                }
                weighted(own, occ)
            } else {
                None
            };
            let background = if cfg.seq_len > cfg.phrase_len {
                if background.is_empty() {
                    return Err(CarError::InvalidModel(format!(
                        "no background words available for class {y}"
                    )));
                }
                weighted(background, occ)
            } else {
                None
            };
            Ok(ClassSampler { phrase, background })
        })
        .collect::<Result<Vec<_>>>()?;

    let corpus_seed = rng::derive_seed(seed, rng::streams::CORPUS);
    let docs = (0..cfg.docs_per_class * c)
        .into_par_iter()
        .map(|j| {
            let y = j % c;
            let mut rng = rng::stream(corpus_seed, j as u64);
            let sampler = &samplers[y];
            let offset = rng.random_range(0..=cfg.seq_len - cfg.phrase_len);
            let mut tokens = Vec::with_capacity(cfg.seq_len);
            let mut truth = Vec::with_capacity(cfg.seq_len);
            for k in 0..cfg.seq_len {
                let in_phrase = k >= offset && k < offset + cfg.phrase_len;
                let (words, dist) = if in_phrase {
                    sampler.phrase.as_ref()
                } else {
                    sampler.background.as_ref()
                }
                .expect("sampler exists for every position kind in use");
                tokens.push(words[dist.sample(&mut rng)]);
                truth.push(in_phrase);
            }
            let mut bag = vec![false; model.vocab_size()];
            for &w in &tokens {
                bag[w] = true;
            }
            Document {
                label: y,
                bag,
                tokens: Some(tokens),
                truth_mask: Some(truth),
            }
        })
        .collect();
    Ok(docs)
}

mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("bit value {other} not in {{0,1}}"))),
            })
            .collect()
    }
}

mod opt_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<bool>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::bits::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<bool>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::bits")] Vec<bool>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_word() -> BowModel {
        BowModel::new(
            vec![vec![0.1, 0.1, 0.7, 0.6, 0.9, 0.9], vec![0.7, 0.6, 0.1, 0.1, 0.9, 0.9]],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_model_validates() {
        six_word().validate().unwrap();
    }

    #[test]
    fn unnormalized_prior_is_rejected() {
        let err = BowModel::new(vec![vec![0.5; 3], vec![0.5; 3]], vec![0.6, 0.6]).unwrap_err();
        assert!(err.to_string().contains("prior not normalized"), "{err}");
    }

    #[test]
    fn out_of_range_occurrence_names_entry() {
        let mut occ = vec![vec![0.5; 5], vec![0.5; 5]];
        occ[0][3] = 1.2;
        let err = BowModel::new(occ, vec![0.5, 0.5]).unwrap_err();
        assert!(err.to_string().contains("(0,3)"), "{err}");
    }

    #[test]
    fn single_class_rejected() {
        assert!(BowModel::new(vec![vec![0.5; 3]], vec![1.0]).is_err());
    }

    #[test]
    fn degenerate_bernoulli_bags() {
        let model = BowModel::new(vec![vec![1.0; 4], vec![0.0; 4]], vec![0.5, 0.5]).unwrap();
        let mut r = rng::stream(3, 0);
        assert_eq!(sample_document(&model, 0, &mut r).unwrap().bag, vec![true; 4]);
        assert_eq!(sample_document(&model, 1, &mut r).unwrap().bag, vec![false; 4]);
        assert!(sample_document(&model, 2, &mut r).is_err());
    }

    #[test]
    fn empirical_occurrence_matches() {
        let model = six_word();
        let mut r = rng::stream(11, 0);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| sample_document(&model, 0, &mut r).unwrap().bag[2])
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.7).abs() < 0.02, "{freq}");
    }

    #[test]
    fn polarity_tags() {
        let model = BowModel::new(vec![vec![0.7, 0.9, 0.105], vec![0.1, 0.9, 0.1]], vec![0.5, 0.5]).unwrap();
        assert_eq!(
            word_polarity(&model, 0.01),
            vec![Polarity::Class(0), Polarity::Neutral, Polarity::Neutral]
        );
        assert_eq!(word_polarity(&six_word(), DEFAULT_POLARITY_TOL)[0], Polarity::Class(1));
    }

    #[test]
    fn multiclass_polarity_uses_argmax() {
        let model = BowModel::new(
            vec![vec![0.8, 0.5], vec![0.2, 0.5], vec![0.7, 0.1]],
            vec![0.3, 0.3, 0.4],
        )
        .unwrap();
        assert_eq!(word_polarity(&model, 0.05), vec![Polarity::Class(0), Polarity::Neutral]);
    }

    #[test]
    fn phrase_extremes() {
        let model = six_word();
        let none = sample_sequence_corpus(&model, &SequenceCorpusConfig::new(5, 8, 0), 1).unwrap();
        assert!(none.iter().all(|d| d.truth_mask.as_ref().unwrap().iter().all(|b| !b)));
        let full = sample_sequence_corpus(&model, &SequenceCorpusConfig::new(5, 8, 8), 1).unwrap();
        assert!(full.iter().all(|d| d.truth_mask.as_ref().unwrap().iter().all(|&b| b)));
        assert!(sample_sequence_corpus(&model, &SequenceCorpusConfig::new(5, 4, 5), 1).is_err());
    }

    #[test]
    fn planted_tokens_are_class_words() {
        let model = six_word();
        let docs = sample_sequence_corpus(&model, &SequenceCorpusConfig::new(1000, 12, 3), 9).unwrap();
        let polarity = word_polarity(&model, DEFAULT_POLARITY_TOL);
        for doc in &docs {
            doc.validate(6).unwrap();
            let toks = doc.tokens.as_ref().unwrap();
            let truth = doc.truth_mask.as_ref().unwrap();
            for (k, &w) in toks.iter().enumerate() {
                if truth[k] {
                    assert_eq!(polarity[w], Polarity::Class(doc.label));
                    if doc.label == 0 {
                        assert!(w == 2 || w == 3);
                    }
                } else {
                    assert_eq!(polarity[w], Polarity::Neutral);
                }
            }
            // exactly one contiguous run
            let starts = (0..truth.len())
                .filter(|&k| truth[k] && (k == 0 || !truth[k - 1]))
                .count();
            assert_eq!(starts, 1);
        }
        assert_eq!(docs.iter().filter(|d| d.label == 0).count(), 1000);
    }

    #[test]
    fn mixed_background_admits_opposite_words() {
        let model = six_word();
        let mut cfg = SequenceCorpusConfig::new(200, 20, 4);
        cfg.mixed_background = true;
        let docs = sample_sequence_corpus(&model, &cfg, 5).unwrap();
        let polarity = word_polarity(&model, DEFAULT_POLARITY_TOL);
        let opposite = docs.iter().any(|d| {
            d.tokens
                .as_ref()
                .unwrap()
                .iter()
                .any(|&w| polarity[w] == Polarity::Class(1 - d.label))
        });
        assert!(opposite);
    }

    #[test]
    fn missing_class_words_is_an_error() {
        let model = BowModel::new(vec![vec![0.5, 0.9], vec![0.5, 0.1]], vec![0.5, 0.5]).unwrap();
        // word 1 is class-0; class 1 has no words
        let err = sample_sequence_corpus(&model, &SequenceCorpusConfig::new(2, 4, 2), 0).unwrap_err();
        assert!(matches!(err, CarError::NoClassWords(1)));
    }

    #[test]
    fn planted_layout() {
        let model = BowModel::planted(&PlantedSpec {
            vocab_size: 6,
            class_words: vec![2, 2],
            high: vec![0.7],
            low: 0.1,
            neutral: 0.5,
            prior: vec![0.7, 0.3],
        })
        .unwrap();
        let pol = word_polarity(&model, DEFAULT_POLARITY_TOL);
        assert_eq!(pol.iter().filter(|p| **p == Polarity::Class(0)).count(), 2);
        assert_eq!(pol.iter().filter(|p| **p == Polarity::Class(1)).count(), 2);
        assert_eq!(pol.iter().filter(|p| **p == Polarity::Neutral).count(), 2);
        assert_eq!(model.prior(), &[0.7, 0.3]);
    }

    #[test]
    fn json_roundtrip_and_layout() {
        let model = six_word();
        let text = model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["occurrence"].as_array().unwrap().len(), 12);
        assert_eq!(BowModel::from_json(&text).unwrap(), model);
    }

    #[test]
    fn corpus_jsonl_roundtrip() {
        let docs = sample_sequence_corpus(&six_word(), &SequenceCorpusConfig::new(3, 6, 2), 2).unwrap();
        let text = corpus_to_jsonl(&docs).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("\"bag\":[0,") || text.contains("\"bag\":[1,"));
        assert_eq!(corpus_from_jsonl(&text).unwrap(), docs);
    }
}
