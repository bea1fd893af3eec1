//! Closed-form equilibria of the two-class bag-of-words game.
//!
//! Policies are parameterized conditionally: `select_prob[i]` is the
//! probability of selecting word `i` given that it is present, so the induced
//! marginal `occurrence[y][i] * select_prob[i]` can never exceed the word's
//! occurrence. All solvers work in induced-marginal space.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bow_model::BowModel;
use crate::error::{check_class, CarError, Result};
use crate::objectives::{clamp_prob, HPair, Role};
use crate::rng;

/// Strict-inequality tolerance for word eligibility.
pub const ELIGIBILITY_TOL: f64 = 1e-9;
/// Largest index set handled by exhaustive enumeration.
pub const MAX_EXACT_WORDS: usize = 20;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
const BUDGET_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub class_t: usize,
    pub select_prob: Vec<f64>,
    pub role: Role,
}

impl SelectionPolicy {
    pub fn new(class_t: usize, select_prob: Vec<f64>, role: Role) -> Result<Self> {
        if let Some(p) = select_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CarError::InvalidConfig(format!(
                "selection probability {p} outside [0,1]"
            )));
        }
        Ok(Self {
            class_t,
            select_prob,
            role,
        })
    }

    /// Policy selecting exactly the words of `index_set` whenever present.
    pub fn from_index_set(class_t: usize, vocab_size: usize, index_set: &[usize], role: Role) -> Self {
        let mut select_prob = vec![0.0; vocab_size];
        for &i in index_set {
            select_prob[i] = 1.0;
        }
        Self {
            class_t,
            select_prob,
            role,
        }
    }
}

fn other_class(model: &BowModel, t: usize) -> Result<usize> {
    if model.class_count() != 2 {
        return Err(CarError::InvalidModel(format!(
            "closed-form equilibria need a two-class model, got {} classes",
            model.class_count()
        )));
    }
    check_class(t, 2)?;
    Ok(1 - t)
}

/// Per-word marginals `occurrence[y][i] * select_prob[i]`.
pub fn induced_distribution(policy: &SelectionPolicy, model: &BowModel, y: usize) -> Result<Vec<f64>> {
    check_class(y, model.class_count())?;
    if policy.select_prob.len() != model.vocab_size() {
        return Err(CarError::DimensionMismatch {
            what: "selection policy",
            expected: model.vocab_size(),
            got: policy.select_prob.len(),
        });
    }
    Ok(model
        .occurrence(y)
        .iter()
        .zip(&policy.select_prob)
        .map(|(p, s)| p * s)
        .collect())
}

/// Optimal discriminator output for a rationale with joint masses
/// `p(z, Y=t)` under the factual generator and `p(z, Y!=t)` under the
/// counterfactual one.
pub fn optimal_discriminator(mass_factual: f64, mass_counterfactual: f64) -> Result<f64> {
    if mass_factual < 0.0 || mass_counterfactual < 0.0 {
        return Err(CarError::Undefined(format!(
            "negative mass ({mass_factual}, {mass_counterfactual})"
        )));
    }
    let total = mass_factual + mass_counterfactual;
    if total == 0.0 {
        return Err(CarError::Undefined(
            "optimal discriminator undefined where both masses vanish".into(),
        ));
    }
    Ok(mass_factual / total)
}

/// Counterfactual best response: induced marginal on class `1 - t` equals
/// `min(factual induced on class t, occurrence[1 - t])` word by word.
pub fn best_response_counterfactual(factual: &SelectionPolicy, model: &BowModel, t: usize) -> Result<SelectionPolicy> {
    let other = other_class(model, t)?;
    if factual.class_t != t {
        return Err(CarError::InvalidConfig(format!(
            "factual policy explains class {}, not {t}",
            factual.class_t
        )));
    }
    let target = induced_distribution(factual, model, t)?;
    let upper = model.occurrence(other);
    let select_prob = target
        .iter()
        .zip(upper)
        .map(|(&p, &q)| if q > 0.0 { (p.min(q) / q).min(1.0) } else { 0.0 })
        .collect();
    Ok(SelectionPolicy {
        class_t: t,
        select_prob,
        role: Role::Counterfactual,
    })
}

/// Words whose class-`t` occurrence exceeds the other class's by more than `tol`.
pub fn eligible_words(model: &BowModel, t: usize, tol: f64) -> Result<Vec<usize>> {
    let other = other_class(model, t)?;
    let (p, q) = (model.occurrence(t), model.occurrence(other));
    Ok((0..model.vocab_size()).filter(|&i| p[i] > q[i] + tol).collect())
}

/// Factual best response without a sparsity budget: select every eligible
/// word whenever present, never select the rest (where the objective is
/// indifferent).
pub fn unconstrained_factual_best_response(model: &BowModel, t: usize) -> Result<SelectionPolicy> {
    let eligible = eligible_words(model, t, ELIGIBILITY_TOL)?;
    Ok(SelectionPolicy::from_index_set(
        t,
        model.vocab_size(),
        &eligible,
        Role::Factual,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MiMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    /// Zero for exact enumeration.
    pub std_error: f64,
}

fn check_index_set(model: &BowModel, index_set: &[usize]) -> Result<()> {
    if let Some(&bad) = index_set.iter().find(|&&i| i >= model.vocab_size()) {
        return Err(CarError::DimensionMismatch {
            what: "index set entry",
            expected: model.vocab_size(),
            got: bad,
        });
    }
    Ok(())
}

/// `p(x_I | y)` for the outcome encoded by the bits of `code`.
fn outcome_prob(occ: &[f64], index_set: &[usize], code: u32) -> f64 {
    index_set
        .iter()
        .enumerate()
        .map(|(k, &i)| if code >> k & 1 == 1 { occ[i] } else { 1.0 - occ[i] })
        .product()
}

/// Class-wise mutual information `E_{X ~ p(.|t)} h0(p(X_I|t) / p(X_I))`.
pub fn classwise_mi(
    model: &BowModel,
    index_set: &[usize],
    t: usize,
    h: &HPair,
    method: MiMethod,
) -> Result<MiEstimate> {
    check_class(t, model.class_count())?;
    check_index_set(model, index_set)?;
    let prior = model.prior();
    let ratio = |x_prob: &dyn Fn(usize) -> f64| {
        let marginal: f64 = (0..model.class_count()).map(|y| prior[y] * x_prob(y)).sum();
        x_prob(t) / marginal
    };
    match method {
        MiMethod::Exact => {
            if index_set.len() > MAX_EXACT_WORDS {
                return Err(CarError::TooLarge {
                    size: index_set.len(),
                    limit: MAX_EXACT_WORDS,
                });
            }
            let value = (0..1u32 << index_set.len())
                .map(|code| {
                    let px = |y: usize| outcome_prob(model.occurrence(y), index_set, code);
                    let p_t = px(t);
                    if p_t == 0.0 {
                        0.0
                    } else {
                        p_t * h.h0(ratio(&px))
                    }
                })
                .sum();
            Ok(MiEstimate { value, std_error: 0.0 })
        }
        MiMethod::MonteCarlo { samples, seed } => {
            if samples < 1 {
                return Err(CarError::InvalidConfig("Monte Carlo needs at least one sample".into()));
            }
            let mut rng = rng::stream(rng::derive_seed(seed, rng::streams::MONTE_CARLO), t as u64);
            let occ_t = model.occurrence(t);
            let mut bits = vec![false; index_set.len()];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..samples {
                for (b, &i) in bits.iter_mut().zip(index_set) {
                    *b = rng.random::<f64>() < occ_t[i];
                }
                let px = |y: usize| {
                    let occ = model.occurrence(y);
                    bits.iter()
                        .zip(index_set)
                        .map(|(&b, &i)| if b { occ[i] } else { 1.0 - occ[i] })
                        .product::<f64>()
                };
                let v = h.h0(ratio(&px));
                sum += v;
                sum_sq += v * v;
            }
            let n = samples as f64;
            let mean = sum / n;
            let var = if samples > 1 {
                ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(MiEstimate {
                value: mean,
                std_error: (var / n).sqrt(),
            })
        }
    }
}

fn entropy_bits(p: f64) -> f64 {
    [p, 1.0 - p].iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Shannon mutual information `I(Y; X_I)` in nats, computed as
/// `H(X_I) - H(X_I | Y)`.
pub fn shannon_mi(model: &BowModel, index_set: &[usize]) -> Result<f64> {
    check_index_set(model, index_set)?;
    if index_set.len() > MAX_EXACT_WORDS {
        return Err(CarError::TooLarge {
            size: index_set.len(),
            limit: MAX_EXACT_WORDS,
        });
    }
    let prior = model.prior();
    let joint_entropy: f64 = (0..1u32 << index_set.len())
        .map(|code| {
            let p: f64 = (0..model.class_count())
                .map(|y| prior[y] * outcome_prob(model.occurrence(y), index_set, code))
                .sum();
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    // Words are independent given the class.
    let conditional: f64 = (0..model.class_count())
        .map(|y| {
            let occ = model.occurrence(y);
            prior[y] * index_set.iter().map(|&i| entropy_bits(occ[i])).sum::<f64>()
        })
        .sum();
    Ok(joint_entropy - conditional)
}

/// Optimal factual index set together with the matching policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub class_t: usize,
    pub index_set: Vec<usize>,
    pub objective: f64,
    pub factual_policy: SelectionPolicy,
    pub counterfactual_policy: SelectionPolicy,
    pub budget: f64,
    pub budget_used: f64,
}

impl EquilibriumSolution {
    /// Unused budget; non-zero slack means no all-or-nothing subset exhausts it.
    pub fn slack(&self) -> f64 {
        self.budget - self.budget_used
    }

    pub fn to_file(&self) -> SolutionFile {
        SolutionFile {
            class_t: self.class_t,
            budget: self.budget,
            index_set: self.index_set.clone(),
            objective: self.objective,
            budget_used: self.budget_used,
            factual_select_prob: self.factual_policy.select_prob.clone(),
            counterfactual_select_prob: self.counterfactual_policy.select_prob.clone(),
        }
    }
}

/// On-disk form of an [`EquilibriumSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub class_t: usize,
    pub budget: f64,
    pub index_set: Vec<usize>,
    pub objective: f64,
    pub budget_used: f64,
    pub factual_select_prob: Vec<f64>,
    pub counterfactual_select_prob: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    budget: f64,
    subset: Vec<usize>,
}

/// Higher objective, then smaller budget, then lexicographically smaller subset.
fn better(a: Candidate, b: Candidate) -> Candidate {
    use std::cmp::Ordering::*;
    let order = b
        .value
        .total_cmp(&a.value)
        .then(a.budget.total_cmp(&b.budget))
        .then(a.subset.cmp(&b.subset));
    match order {
        Less | Equal => a,
        Greater => b,
    }
}

/// Brute-force search over subsets of eligible words whose expected length
/// `sum occurrence[t][i]` fits in `budget`, maximizing class-wise MI.
pub fn optimal_factual_index_set(model: &BowModel, t: usize, budget: f64, h: &HPair) -> Result<EquilibriumSolution> {
    let eligible = eligible_words(model, t, ELIGIBILITY_TOL)?;
    if eligible.len() > MAX_EXACT_WORDS {
        return Err(CarError::TooLarge {
            size: eligible.len(),
            limit: MAX_EXACT_WORDS,
        });
    }
    let occ = model.occurrence(t);
    let best = (0..1u32 << eligible.len())
        .into_par_iter()
        .filter_map(|code| {
            let subset: Vec<usize> = eligible
                .iter()
                .enumerate()
                .filter(|(k, _)| code >> k & 1 == 1)
                .map(|(_, &i)| i)
                .collect();
            let used: f64 = subset.iter().map(|&i| occ[i]).sum();
            if used > budget + BUDGET_TOL {
                return None;
            }
            let value = classwise_mi(model, &subset, t, h, MiMethod::Exact).ok()?.value;
            Some(Candidate {
                value,
                budget: used,
                subset,
            })
        })
        .reduce_with(better);
    match best {
        Some(best) => solution_from_index_set(model, t, budget, best.subset, best.value),
        None => empty_solution(model, t, budget, h),
    }
}

fn solution_from_index_set(
    model: &BowModel,
    t: usize,
    budget: f64,
    index_set: Vec<usize>,
    objective: f64,
) -> Result<EquilibriumSolution> {
    let factual = SelectionPolicy::from_index_set(t, model.vocab_size(), &index_set, Role::Factual);
    let counterfactual = best_response_counterfactual(&factual, model, t)?;
    let budget_used = index_set.iter().map(|&i| model.occurrence(t)[i]).sum();
    Ok(EquilibriumSolution {
        class_t: t,
        index_set,
        objective,
        factual_policy: factual,
        counterfactual_policy: counterfactual,
        budget,
        budget_used,
    })
}

/// Solution for budgets too small for any eligible word: the empty set,
/// whose objective is `h0(1)`.
pub fn empty_solution(model: &BowModel, t: usize, budget: f64, h: &HPair) -> Result<EquilibriumSolution> {
    solution_from_index_set(model, t, budget, Vec::new(), h.h0(1.0))
}

/// Distances of a policy pair from the closed-form equilibrium conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// L-infinity distance between the counterfactual induced marginal and
    /// `min(factual induced, counterfactual upper bound)`.
    pub counterfactual_distance: f64,
    /// Every word selected with probability above one half is eligible.
    pub support_eligible: bool,
    pub ineligible_support: Vec<usize>,
    pub budget_used: f64,
    pub budget_slack: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn verify_equilibrium(
    factual: &SelectionPolicy,
    counterfactual: &SelectionPolicy,
    model: &BowModel,
    t: usize,
    budget: f64,
    tol: f64,
) -> Result<EquilibriumReport> {
    let other = other_class(model, t)?;
    let p = induced_distribution(factual, model, t)?;
    let q = induced_distribution(counterfactual, model, other)?;
    let upper = model.occurrence(other);
    let counterfactual_distance = p
        .iter()
        .zip(&q)
        .zip(upper)
        .map(|((&p, &q), &u)| (q - p.min(u)).abs())
        .fold(0.0, f64::max);
    let eligible = eligible_words(model, t, ELIGIBILITY_TOL)?;
    let ineligible_support: Vec<usize> = factual
        .select_prob
        .iter()
        .enumerate()
        .filter(|(i, &s)| s > 0.5 && !eligible.contains(i))
        .map(|(i, _)| i)
        .collect();
    let budget_used: f64 = p.iter().sum();
    let budget_slack = budget - budget_used;
    let support_eligible = ineligible_support.is_empty();
    Ok(EquilibriumReport {
        counterfactual_distance,
        support_eligible,
        ineligible_support,
        budget_used,
        budget_slack,
        tol,
        passed: counterfactual_distance <= tol && support_eligible && budget_slack >= -tol,
    })
}

/// Exact expected objectives of the class-`t` game for independent induced
/// marginals, with the discriminator at its closed-form optimum.
///
/// `factual` and `counterfactual` are induced marginals `p_i(1)` and
/// `q_i(1)`; `prior` weighs the factual (`Y = t`) and counterfactual sides.
#[derive(Debug, Clone)]
pub struct GameValue<'a> {
    pub factual: &'a [f64],
    pub counterfactual: &'a [f64],
    pub prior: [f64; 2],
}

impl GameValue<'_> {
    fn check(&self) -> Result<()> {
        if self.factual.len() != self.counterfactual.len() {
            return Err(CarError::DimensionMismatch {
                what: "counterfactual marginals",
                expected: self.factual.len(),
                got: self.counterfactual.len(),
            });
        }
        if self.factual.len() > MAX_EXACT_WORDS {
            return Err(CarError::TooLarge {
                size: self.factual.len(),
                limit: MAX_EXACT_WORDS,
            });
        }
        Ok(())
    }

    fn prob(marginals: &[f64], code: u32) -> f64 {
        marginals
            .iter()
            .enumerate()
            .map(|(k, &m)| if code >> k & 1 == 1 { m } else { 1.0 - m })
            .product()
    }

    fn prob_without(marginals: &[f64], code: u32, skip: usize) -> f64 {
        marginals
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != skip)
            .map(|(k, &m)| if code >> k & 1 == 1 { m } else { 1.0 - m })
            .product()
    }

    /// Optimal discriminator output on every rationale outcome (`None` where
    /// both sides have zero mass).
    pub fn optimal_discriminator_table(&self) -> Result<Vec<Option<f64>>> {
        self.check()?;
        Ok((0..1u32 << self.factual.len())
            .map(|code| {
                let a = self.prior[0] * Self::prob(self.factual, code);
                let b = self.prior[1] * Self::prob(self.counterfactual, code);
                optimal_discriminator(a, b).ok()
            })
            .collect())
    }

    /// `E[h(d*(Z))]` for the given role.
    pub fn value(&self, h: &HPair, role: Role) -> Result<f64> {
        let table = self.optimal_discriminator_table()?;
        let marginals = match role {
            Role::Factual => self.factual,
            Role::Counterfactual => self.counterfactual,
        };
        Ok(table
            .iter()
            .enumerate()
            .filter_map(|(code, d)| {
                let m = Self::prob(marginals, code as u32);
                d.filter(|_| m > 0.0).map(|d| m * h.apply(role, clamp_prob(d)))
            })
            .sum())
    }

    /// Gradient of the counterfactual value with respect to each `q_j(1)`,
    /// holding the discriminator at its optimum.
    pub fn counterfactual_gradient(&self, h: &HPair) -> Result<Vec<f64>> {
        let table = self.optimal_discriminator_table()?;
        let n = self.factual.len();
        Ok((0..n)
            .map(|j| {
                table
                    .iter()
                    .enumerate()
                    .filter_map(|(code, d)| {
                        let rho = clamp_prob((*d)?);
                        let inner = h.h1(rho) - h.dh1(rho) * rho * (1.0 - rho);
                        let code = code as u32;
                        let sign = if code >> j & 1 == 1 { 1.0 } else { -1.0 };
                        Some(sign * Self::prob_without(self.counterfactual, code, j) * inner)
                    })
                    .sum()
            })
            .collect())
    }
}
