//! Scoring of rationales: micro-averaged precision/recall/F1 against reference
//! masks, the share of selections spent on neutral words, and the per-word
//! curves comparing occurrence bounds with induced rationale marginals.

use serde::{Deserialize, Serialize};

use crate::bow_model::{word_polarity, BowModel, Document, Polarity};
use crate::equilibrium::{induced_distribution, SelectionPolicy};
use crate::error::{check_class, CarError, Result};
use crate::trainer::RationaleMask;

impl AsRef<[bool]> for RationaleMask {
    fn as_ref(&self) -> &[bool] {
        &self.selected
    }
}

/// Pooled counts behind a [`MetricsReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positive: usize,
    pub selected: usize,
    pub truth: usize,
    pub tokens: usize,
}

impl Counts {
    pub fn of(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(CarError::DimensionMismatch {
                what: "predicted mask",
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        Ok(Self {
            true_positive: predicted.iter().zip(truth).filter(|(&p, &g)| p && g).count(),
            selected: predicted.iter().filter(|&&p| p).count(),
            truth: truth.iter().filter(|&&g| g).count(),
            tokens: truth.len(),
        })
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            true_positive: self.true_positive + other.true_positive,
            selected: self.selected + other.selected,
            truth: self.truth + other.truth,
            tokens: self.tokens + other.tokens,
        }
    }

    pub fn report(self) -> MetricsReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positive, self.selected);
        let recall = ratio(self.true_positive, self.truth);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MetricsReport {
            sparsity: ratio(self.selected, self.tokens),
            precision,
            recall,
            f1,
            counts: self,
        }
    }
}

/// Micro-averaged scores; precision of an empty selection is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sparsity: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// Pool true positives, selections and truth over all documents, then take
/// ratios.
pub fn prf1<P: AsRef<[bool]>, T: AsRef<[bool]>>(predicted: &[P], truth: &[T]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(CarError::DimensionMismatch {
            what: "number of predicted masks",
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let counts = predicted.iter().zip(truth).try_fold(Counts::default(), |acc, (p, g)| {
        Ok::<_, CarError>(acc.merge(Counts::of(p.as_ref(), g.as_ref())?))
    })?;
    Ok(counts.report())
}

/// Word id behind mask entry `k`: the token at position `k` for sequences,
/// `k` itself for bags.
fn word_at(doc: &Document, k: usize) -> usize {
    doc.tokens.as_ref().map_or(k, |t| t[k])
}

/// Fraction of selected word occurrences whose polarity is neutral (0 when
/// nothing is selected).
pub fn degeneration_score<P: AsRef<[bool]>>(masks: &[P], documents: &[Document], model: &BowModel) -> Result<f64> {
    if masks.len() != documents.len() {
        return Err(CarError::DimensionMismatch {
            what: "number of masks",
            expected: documents.len(),
            got: masks.len(),
        });
    }
    let polarity = word_polarity(model, crate::bow_model::DEFAULT_POLARITY_TOL);
    let (mut selected, mut neutral) = (0usize, 0usize);
    for (mask, doc) in masks.iter().zip(documents) {
        let mask = mask.as_ref();
        if mask.len() != doc.len() {
            return Err(CarError::DimensionMismatch {
                what: "mask",
                expected: doc.len(),
                got: mask.len(),
            });
        }
        for k in (0..mask.len()).filter(|&k| mask[k]) {
            let w = word_at(doc, k);
            if w >= polarity.len() {
                return Err(CarError::DimensionMismatch {
                    what: "vocabulary",
                    expected: polarity.len(),
                    got: w + 1,
                });
            }
            selected += 1;
            if polarity[w] == Polarity::Neutral {
                neutral += 1;
            }
        }
    }
    Ok(if selected == 0 {
        0.0
    } else {
        neutral as f64 / selected as f64
    })
}

/// Entries of `doc` holding a word of polarity class `t`.
pub fn class_word_mask(doc: &Document, polarity: &[Polarity], t: usize) -> Vec<bool> {
    (0..doc.len())
        .map(|k| {
            let w = word_at(doc, k);
            let present = doc.tokens.is_some() || doc.bag[w];
            present && polarity.get(w) == Some(&Polarity::Class(t))
        })
        .collect()
}

/// Mean number of on/off switches per mask.
pub fn mean_transitions(masks: &[RationaleMask]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks.iter().map(|m| m.transitions() as f64).sum::<f64>() / masks.len() as f64
}

/// One word of the curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub rank: usize,
    pub word: String,
    /// Occurrence in class-`t` text (factual upper bound).
    pub p_x_t: f64,
    /// Occurrence in the other class's text (counterfactual upper bound).
    pub p_x_other: f64,
    /// Induced factual rationale marginal.
    pub p_zf: f64,
    /// Induced counterfactual rationale marginal.
    pub p_zc: f64,
}

/// Per-word bounds and rationale marginals, sorted by the occurrence gap
/// `occurrence[t] - occurrence[other]`, largest first (ties by word index).
pub fn export_curves(
    model: &BowModel,
    factual: &SelectionPolicy,
    counterfactual: &SelectionPolicy,
    t: usize,
) -> Result<Vec<CurveRow>> {
    if model.class_count() != 2 {
        return Err(CarError::InvalidModel(format!(
            "curves need a two-class model, got {} classes",
            model.class_count()
        )));
    }
    check_class(t, 2)?;
    let other = 1 - t;
    for policy in [factual, counterfactual] {
        if policy.select_prob.len() != model.vocab_size() {
            return Err(CarError::DimensionMismatch {
                what: "selection policy",
                expected: model.vocab_size(),
                got: policy.select_prob.len(),
            });
        }
    }
    let zf = induced_distribution(factual, model, t)?;
    let zc = induced_distribution(counterfactual, model, other)?;
    let (pt, po) = (model.occurrence(t), model.occurrence(other));
    let mut order: Vec<usize> = (0..model.vocab_size()).collect();
    order.sort_by(|&a, &b| (pt[b] - po[b]).total_cmp(&(pt[a] - po[a])));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| CurveRow {
            rank: rank + 1,
            word: model.word_name(i),
            p_x_t: pt[i],
            p_x_other: po[i],
            p_zf: zf[i],
            p_zc: zc[i],
        })
        .collect())
}

/// CSV with header `rank,word,p_x_t,p_x_other,p_zf,p_zc`.
pub fn curves_to_csv(rows: &[CurveRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    if rows.is_empty() {
        writer.write_record(["rank", "word", "p_x_t", "p_x_other", "p_zf", "p_zc"])?;
    }
    let bytes = writer.into_inner().map_err(|e| CarError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::best_response_counterfactual;
    use crate::objectives::Role;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    fn six_word() -> BowModel {
        BowModel::new(
            vec![vec![0.1, 0.1, 0.7, 0.6, 0.9, 0.9], vec![0.7, 0.6, 0.1, 0.1, 0.9, 0.9]],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn bag_doc(label: usize, bag: &[u8]) -> Document {
        Document {
            label,
            bag: mask(bag),
            tokens: None,
            truth_mask: None,
        }
    }

    #[test]
    fn prf1_examples() {
        let truth = vec![mask(&[0, 0, 1, 1, 0, 0])];
        let r = prf1(&truth, &truth).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let pred = vec![mask(&[0, 0, 1, 1, 1, 0])];
        let r = prf1(&pred, &truth).unwrap();
        assert_abs_diff_eq!(r.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.recall, 1.0);
        assert_abs_diff_eq!(r.f1, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(r.sparsity, 0.5, epsilon = 1e-15);

        let empty = vec![mask(&[0; 6])];
        let r = prf1(&empty, &truth).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        assert!(prf1(&[mask(&[1, 0])], &truth).is_err());
        assert!(prf1(&pred, &[truth[0].clone(), truth[0].clone()]).is_err());
    }

    #[test]
    fn degeneration_examples() {
        let m = six_word();
        let docs = vec![bag_doc(0, &[1, 1, 1, 1, 1, 1])];
        let class_only = vec![mask(&[1, 0, 1, 0, 0, 0])];
        assert_eq!(degeneration_score(&class_only, &docs, &m).unwrap(), 0.0);
        let neutral_only = vec![mask(&[0, 0, 0, 0, 1, 1])];
        assert_eq!(degeneration_score(&neutral_only, &docs, &m).unwrap(), 1.0);
        let half = vec![mask(&[0, 0, 1, 0, 1, 0])];
        assert_eq!(degeneration_score(&half, &docs, &m).unwrap(), 0.5);
        let none = vec![mask(&[0; 6])];
        assert_eq!(degeneration_score(&none, &docs, &m).unwrap(), 0.0);
    }

    #[test]
    fn degeneration_on_token_positions() {
        let m = six_word();
        let doc = Document {
            label: 0,
            bag: mask(&[0, 0, 1, 0, 1, 0]),
            tokens: Some(vec![4, 2, 2, 4]),
            truth_mask: None,
        };
        let sel = vec![mask(&[1, 1, 1, 0])];
        assert_abs_diff_eq!(
            degeneration_score(&sel, &[doc], &m).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn class_word_positions() {
        let m = six_word();
        let pol = word_polarity(&m, 1e-6);
        let doc = Document {
            label: 1,
            bag: mask(&[1, 0, 1, 1, 1, 0]),
            tokens: Some(vec![0, 2, 4, 3]),
            truth_mask: None,
        };
        assert_eq!(class_word_mask(&doc, &pol, 0), mask(&[0, 1, 0, 1]));
        assert_eq!(class_word_mask(&doc, &pol, 1), mask(&[1, 0, 0, 0]));
        let bag = bag_doc(0, &[1, 0, 1, 0, 1, 1]);
        assert_eq!(class_word_mask(&bag, &pol, 0), mask(&[0, 0, 1, 0, 0, 0]));
    }

    #[test]
    fn curves_for_zero_and_equilibrium_policies() {
        let m = six_word();
        let zero_f = SelectionPolicy::new(0, vec![0.0; 6], Role::Factual).unwrap();
        let zero_c = SelectionPolicy::new(0, vec![0.0; 6], Role::Counterfactual).unwrap();
        let rows = export_curves(&m, &zero_f, &zero_c, 0).unwrap();
        for r in &rows {
            assert_eq!((r.p_zf, r.p_zc), (0.0, 0.0));
        }
        let gaps: Vec<f64> = rows.iter().map(|r| r.p_x_t - r.p_x_other).collect();
        assert!(gaps.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(rows[0].word, m.word_name(2));

        let fact = SelectionPolicy::from_index_set(0, 6, &[2, 3], Role::Factual);
        let counter = best_response_counterfactual(&fact, &m, 0).unwrap();
        let rows = export_curves(&m, &fact, &counter, 0).unwrap();
        for r in &rows {
            assert!(r.p_zf <= r.p_x_t);
            assert_abs_diff_eq!(r.p_zc, r.p_zf.min(r.p_x_other), epsilon = 1e-12);
        }
        let csv = curves_to_csv(&rows).unwrap();
        assert!(csv.starts_with("rank,word,p_x_t,p_x_other,p_zf,p_zc\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn transitions() {
        let m = RationaleMask {
            selected: mask(&[0, 1, 1, 0, 1]),
            relaxed: None,
        };
        assert_eq!(m.transitions(), 3);
        assert_eq!(mean_transitions(&[m.clone(), m]), 3.0);
    }

    fn doc_pair() -> impl Strategy<Value = Vec<(Vec<bool>, Vec<bool>)>> {
        prop::collection::vec(
            (1usize..12).prop_flat_map(|k| {
                (
                    prop::collection::vec(any::<bool>(), k),
                    prop::collection::vec(any::<bool>(), k),
                )
            }),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn prf1_invariants(docs in doc_pair(), rot in 0usize..8) {
            let (pred, truth): (Vec<_>, Vec<_>) = docs.iter().cloned().unzip();
            let r = prf1(&pred, &truth).unwrap();
            for v in [r.precision, r.recall, r.f1, r.sparsity] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let expect = if r.precision + r.recall > 0.0 {
                2.0 * r.precision * r.recall / (r.precision + r.recall)
            } else { 0.0 };
            prop_assert!((r.f1 - expect).abs() < 1e-12);

            let mut rotated = docs.clone();
            rotated.rotate_left(rot % docs.len());
            let (p2, t2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(prf1(&p2, &t2).unwrap(), r);

            let flat_p: Vec<bool> = pred.concat();
            let flat_t: Vec<bool> = truth.concat();
            prop_assert_eq!(prf1(&[flat_p], &[flat_t]).unwrap(), r);

            let rev_p: Vec<Vec<bool>> = pred.iter().map(|m| m.iter().rev().copied().collect()).collect();
            let rev_t: Vec<Vec<bool>> = truth.iter().map(|m| m.iter().rev().copied().collect()).collect();
            prop_assert_eq!(prf1(&rev_p, &rev_t).unwrap(), r);
        }

        #[test]
        fn curves_respect_bounds(f in prop::collection::vec(0.0f64..=1.0, 6), c in prop::collection::vec(0.0f64..=1.0, 6)) {
            let m = six_word();
            let fp = SelectionPolicy::new(1, f, Role::Factual).unwrap();
            let cp = SelectionPolicy::new(1, c, Role::Counterfactual).unwrap();
            for r in export_curves(&m, &fp, &cp, 1).unwrap() {
                prop_assert!(r.p_zf <= r.p_x_t + 1e-15);
                prop_assert!(r.p_zc <= r.p_x_other + 1e-15);
            }
        }
    }
}
