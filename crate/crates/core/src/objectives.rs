//! Losses of the three-player game, the admissible `(h0, h1)` pairs, the
//! sparsity/continuity regularizer and the f-divergence view of the factual
//! objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};

/// Log arguments and discriminator outputs are clamped to `[EPS, 1 - EPS]`.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HKind {
    Log,
    Linear,
    Custom,
}

impl fmt::Display for HKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HKind::Log => "log",
            HKind::Linear => "linear",
            HKind::Custom => "custom",
        })
    }
}

impl FromStr for HKind {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(HKind::Log),
            "linear" => Ok(HKind::Linear),
            other => Err(CarError::InvalidConfig(format!(
                "unknown h pair {other:?}; expected \"log\" or \"linear\""
            ))),
        }
    }
}

type RealFn = fn(f64) -> f64;

/// Monotone functions applied to the discriminator output by the factual
/// (`h0`) and counterfactual (`h1`) generators, with their derivatives.
#[derive(Clone, Copy)]
pub struct HPair {
    kind: HKind,
    h0: RealFn,
    dh0: RealFn,
    h1: RealFn,
    dh1: RealFn,
}

impl fmt::Debug for HPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HPair").field("kind", &self.kind).finish()
    }
}

impl HPair {
    /// `h0 = log x`, `h1 = -log(1 - x)`: the GAN objective.
    pub fn log() -> Self {
        Self {
            kind: HKind::Log,
            h0: f64::ln,
            dh0: |x| 1.0 / x,
            h1: |x| -(1.0 - x).ln(),
            dh1: |x| 1.0 / (1.0 - x),
        }
    }

    /// `h0 = h1 = x`.
    pub fn linear() -> Self {
        Self {
            kind: HKind::Linear,
            h0: |x| x,
            dh0: |_| 1.0,
            h1: |x| x,
            dh1: |_| 1.0,
        }
    }

    pub fn from_kind(kind: HKind) -> Result<Self> {
        match kind {
            HKind::Log => Ok(Self::log()),
            HKind::Linear => Ok(Self::linear()),
            HKind::Custom => Err(CarError::InvalidConfig(
                "custom h pairs must be registered with HPair::register".into(),
            )),
        }
    }

    /// Custom pair without any admissibility check. See [`HPair::register`].
    pub fn custom_unchecked(h0: RealFn, dh0: RealFn, h1: RealFn, dh1: RealFn) -> Self {
        Self {
            kind: HKind::Custom,
            h0,
            dh0,
            h1,
            dh1,
        }
    }

    /// Custom pair, accepted only if it passes [`check_h_conditions`] at a
    /// grid step of 0.01.
    pub fn register(h0: RealFn, dh0: RealFn, h1: RealFn, dh1: RealFn) -> Result<Self> {
        let pair = Self::custom_unchecked(h0, dh0, h1, dh1);
        let report = check_h_conditions(&pair, 0.01);
        if report.passed {
            Ok(pair)
        } else {
            Err(CarError::InvalidConfig(format!(
                "h pair rejected: {}",
                report.failure.unwrap_or_default()
            )))
        }
    }

    pub fn kind(&self) -> HKind {
        self.kind
    }

    pub fn h0(&self, x: f64) -> f64 {
        (self.h0)(x)
    }

    pub fn h1(&self, x: f64) -> f64 {
        (self.h1)(x)
    }

    pub fn dh0(&self, x: f64) -> f64 {
        (self.dh0)(x)
    }

    pub fn dh1(&self, x: f64) -> f64 {
        (self.dh1)(x)
    }

    /// `h` for the given role: `h0` for factual, `h1` for counterfactual.
    pub fn apply(&self, role: Role, x: f64) -> f64 {
        match role {
            Role::Factual => self.h0(x),
            Role::Counterfactual => self.h1(x),
        }
    }

    pub fn derivative(&self, role: Role, x: f64) -> f64 {
        match role {
            Role::Factual => self.dh0(x),
            Role::Counterfactual => self.dh1(x),
        }
    }
}

impl FromStr for HPair {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_kind(s.parse()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Factual,
    Counterfactual,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Discriminator loss for one class-`t` game:
/// `-prior[0] * mean(log d_f) - prior[1] * mean(log(1 - d_c))`.
///
/// `prior[0]` weighs the factual side (`Y = t`), `prior[1]` the
/// counterfactual side.
pub fn discriminator_loss(d_factual: &[f64], d_counterfactual: &[f64], prior: [f64; 2]) -> Result<f64> {
    if d_factual.is_empty() {
        return Err(CarError::EmptyInput("factual discriminator outputs"));
    }
    if d_counterfactual.is_empty() {
        return Err(CarError::EmptyInput("counterfactual discriminator outputs"));
    }
    let fact = mean(d_factual.iter().map(|&d| clamp_prob(d).ln()));
    let counter = mean(d_counterfactual.iter().map(|&d| (1.0 - clamp_prob(d)).ln()));
    Ok(-prior[0] * fact - prior[1] * counter)
}

/// Mean of `h0(d)` (factual) or `h1(d)` (counterfactual). Higher is better
/// for both generators.
pub fn generator_objective(d_outputs: &[f64], h: &HPair, role: Role) -> Result<f64> {
    generator_objective_multiclass(d_outputs, |x| h.apply(role, x))
}

/// Same aggregation as [`generator_objective`] with an arbitrary `h`.
///
/// In the multi-class game the caller decides which documents feed in: the
/// factual role uses documents with `Y = t`, the counterfactual role those
/// with `Y != t`.
pub fn generator_objective_multiclass(d_outputs: &[f64], h: impl Fn(f64) -> f64) -> Result<f64> {
    if d_outputs.is_empty() {
        return Err(CarError::EmptyInput("discriminator outputs"));
    }
    Ok(mean(d_outputs.iter().map(|&d| h(clamp_prob(d)))))
}

/// Outcome of the grid check of the `h` admissibility conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HConditionReport {
    pub passed: bool,
    pub h0_monotone: bool,
    pub h1_monotone: bool,
    pub h0_convex: bool,
    pub h1_concave: bool,
    /// Description of the first failing point, if any.
    pub failure: Option<String>,
}

const CURVATURE_TOL: f64 = 1e-9;

/// Check on a grid over `(x, a) in (0, 1]^2` that `h0`, `h1` are increasing,
/// `x * h0(x / (x + a))` is convex in `x` and `x * h1(a / (x + a))` is
/// concave in `x`.
pub fn check_h_conditions(h: &HPair, grid_step: f64) -> HConditionReport {
    let steps = (1.0 / grid_step).round().max(2.0) as usize;
    let grid: Vec<f64> = (1..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut failure: Option<String> = None;
    let mut note = |msg: String| {
        if failure.is_none() {
            failure = Some(msg);
        }
    };

    // h0 on (0, 1], h1 on [0, 1).
    let h0_monotone = grid.windows(2).all(|w| {
        let ok = h.h0(w[1]) >= h.h0(w[0]);
        if !ok {
            note(format!("h0 decreases between x={} and x={}", w[0], w[1]));
        }
        ok
    });
    let h1_grid: Vec<f64> = (0..steps).map(|k| k as f64 / steps as f64).collect();
    let h1_monotone = h1_grid.windows(2).all(|w| {
        let ok = h.h1(w[1]) >= h.h1(w[0]);
        if !ok {
            note(format!("h1 decreases between x={} and x={}", w[0], w[1]));
        }
        ok
    });

    let mut h0_convex = true;
    let mut h1_concave = true;
    for &a in &grid {
        let phi = |x: f64| x * h.h0(x / (x + a));
        let psi = |x: f64| x * h.h1(a / (x + a));
        for w in grid.windows(3) {
            let second = |f: &dyn Fn(f64) -> f64| f(w[0]) - 2.0 * f(w[1]) + f(w[2]);
            let d0 = second(&phi);
            if (d0 < -CURVATURE_TOL || d0.is_nan()) && h0_convex {
                h0_convex = false;
                note(format!(
                    "x*h0(x/(x+a)) not convex at x={}, a={a} (second difference {d0:e})",
                    w[1]
                ));
            }
            let d1 = second(&psi);
            if (d1 > CURVATURE_TOL || d1.is_nan()) && h1_concave {
                h1_concave = false;
                note(format!(
                    "x*h1(a/(x+a)) not concave at x={}, a={a} (second difference {d1:e})",
                    w[1]
                ));
            }
        }
    }
    HConditionReport {
        passed: h0_monotone && h1_monotone && h0_convex && h1_concave,
        h0_monotone,
        h1_monotone,
        h0_convex,
        h1_concave,
        failure,
    }
}

/// Generator of the f-divergence behind the factual objective:
/// `f(x) = x * h0(x) - h0(1)`.
#[derive(Debug, Clone, Copy)]
pub struct FDivergence {
    h: HPair,
    /// Grid second differences on `(0, 4]` are all non-negative.
    pub convex: bool,
    pub f_at_one: f64,
}

impl FDivergence {
    pub fn eval(&self, x: f64) -> f64 {
        x * self.h.h0(x) - self.h.h0(1.0)
    }
}

pub fn f_from_h(h: &HPair) -> FDivergence {
    let mut fd = FDivergence {
        h: *h,
        convex: true,
        f_at_one: 0.0,
    };
    fd.f_at_one = fd.eval(1.0);
    let step = 0.01;
    let grid: Vec<f64> = (1..=400).map(|k| k as f64 * step).collect();
    fd.convex = grid
        .windows(3)
        .all(|w| fd.eval(w[0]) - 2.0 * fd.eval(w[1]) + fd.eval(w[2]) >= -CURVATURE_TOL);
    fd
}

/// Weights of the sparsity and continuity terms and the sparsity target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Target fraction of selected units.
    pub alpha: f64,
    /// Per-class targets overriding `alpha` for the class-`t` generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_alpha: Option<Vec<f64>>,
}

impl RegularizerConfig {
    pub fn new(lambda1: f64, lambda2: f64, alpha: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            alpha,
            class_alpha: None,
        }
    }

    pub fn alpha_for(&self, t: usize) -> f64 {
        self.class_alpha
            .as_ref()
            .and_then(|a| a.get(t).copied())
            .unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(CarError::InvalidConfig(format!(
                "regularizer weights must be non-negative (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )));
        }
        let alphas = std::iter::once(self.alpha).chain(self.class_alpha.iter().flatten().copied());
        for a in alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(CarError::InvalidConfig(format!("alpha {a} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Whether consecutive mask entries are neighbours in the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLayout {
    Sequence,
    Bag,
}

/// `lambda1 * |mean(mask) - alpha| + lambda2 * sum_k |mask_k - mask_{k-1}|`.
/// The continuity term vanishes for unordered bag masks.
pub fn sparsity_continuity_penalty(mask: &[f64], cfg: &RegularizerConfig, layout: MaskLayout) -> Result<f64> {
    let (value, _) = batch_penalty(&[mask], cfg.lambda1, cfg.lambda2, cfg.alpha, layout)?;
    Ok(value)
}

/// Batch form used in training: the sparsity term compares the batch-mean
/// selected fraction with `alpha`, the continuity term averages transitions
/// over documents. Returns the value and its (sub)gradient with respect to
/// every mask entry.
pub fn batch_penalty(
    masks: &[&[f64]],
    lambda1: f64,
    lambda2: f64,
    alpha: f64,
    layout: MaskLayout,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if masks.is_empty() || masks.iter().any(|m| m.is_empty()) {
        return Err(CarError::EmptyInput("mask"));
    }
    let n = masks.len() as f64;
    let fraction = masks
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .sum::<f64>()
        / n;
    let gap = fraction - alpha;
    let sparsity_sign = sign(gap);
    let mut value = lambda1 * gap.abs();
    let mut grads: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| vec![lambda1 * sparsity_sign / (n * m.len() as f64); m.len()])
        .collect();
    if layout == MaskLayout::Sequence && lambda2 != 0.0 {
        for (m, g) in masks.iter().zip(grads.iter_mut()) {
            for k in 1..m.len() {
                let diff = m[k] - m[k - 1];
                value += lambda2 * diff.abs() / n;
                let s = lambda2 * sign(diff) / n;
                g[k] += s;
                g[k - 1] -= s;
            }
        }
    }
    Ok((value, grads))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn discriminator_loss_examples() {
        let eps = 1e-9;
        let perfect = discriminator_loss(&[1.0 - eps], &[eps], [0.3, 0.7]).unwrap();
        assert!(perfect < 1e-6, "{perfect}");
        let confused = discriminator_loss(&[0.5], &[0.5], [0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(confused, std::f64::consts::LN_2, epsilon = 1e-12);
        // 0.5 * -(ln 0.8 + ln 0.6)/2 + 0.5 * -ln 0.7
        let mixed = discriminator_loss(&[0.8, 0.6], &[0.3], [0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(mixed, 0.361_829_8, epsilon = 1e-6);
        assert!(discriminator_loss(&[], &[0.5], [0.5, 0.5]).is_err());
        assert!(discriminator_loss(&[0.5], &[], [0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_clamps_at_the_boundary() {
        let v = discriminator_loss(&[0.0], &[1.0], [0.5, 0.5]).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -(PROB_EPS).ln(), epsilon = 1e-9);
    }

    #[test]
    fn generator_objective_examples() {
        let lin = HPair::linear();
        let log = HPair::log();
        assert_abs_diff_eq!(generator_objective(&[0.7], &lin, Role::Factual).unwrap(), 0.7);
        assert_abs_diff_eq!(
            generator_objective(&[0.5], &log, Role::Counterfactual).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            generator_objective(&[0.25, 0.75], &log, Role::Factual).unwrap(),
            -0.836_988_1,
            epsilon = 1e-6
        );
        assert!(generator_objective(&[], &lin, Role::Factual).is_err());
    }

    #[test]
    fn multiclass_objective_reduces() {
        let lin = HPair::linear();
        let d = [0.2, 0.4, 0.9];
        assert_abs_diff_eq!(generator_objective_multiclass(&d, |x| x).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(generator_objective_multiclass(&[0.5], |x| x).unwrap(), 0.5);
        let log = HPair::log();
        assert_eq!(
            generator_objective_multiclass(&d, |x| log.h1(x)).unwrap(),
            generator_objective(&d, &log, Role::Counterfactual).unwrap()
        );
        assert_eq!(
            generator_objective_multiclass(&d, |x| lin.h0(x)).unwrap(),
            generator_objective(&d, &lin, Role::Factual).unwrap()
        );
    }

    #[test]
    fn shipped_pairs_are_admissible() {
        for h in [HPair::linear(), HPair::log()] {
            let report = check_h_conditions(&h, 0.01);
            assert!(report.passed, "{:?}: {report:?}", h.kind());
        }
    }

    #[test]
    fn pathological_pairs_fail() {
        // decreasing h0
        let dec = HPair::custom_unchecked(|x| 1.0 / (x * x), |x| -2.0 / (x * x * x), |x| x, |_| 1.0);
        let r = check_h_conditions(&dec, 0.01);
        assert!(!r.passed && !r.h0_monotone);
        // increasing but x*h0(x/(x+a)) concave
        let conc = HPair::custom_unchecked(|x| -1.0 / (x * x), |x| 2.0 / (x * x * x), |x| x, |_| 1.0);
        let r = check_h_conditions(&conc, 0.01);
        assert!(!r.passed && r.h0_monotone && !r.h0_convex, "{r:?}");
        assert!(r.failure.is_some());
        assert!(HPair::register(|x| 1.0 / (x * x), |x| -2.0 / (x * x * x), |x| x, |_| 1.0).is_err());
        assert!(HPair::register(|x| x, |_| 1.0, |x| x, |_| 1.0).is_ok());
    }

    #[test]
    fn f_divergence_generators() {
        let lin = f_from_h(&HPair::linear());
        assert!(lin.convex);
        assert_eq!(lin.f_at_one, 0.0);
        assert_abs_diff_eq!(lin.eval(3.0), 8.0, epsilon = 1e-12);
        let log = f_from_h(&HPair::log());
        assert!(log.convex);
        assert_eq!(log.f_at_one, 0.0);
        assert_abs_diff_eq!(log.eval(2.0), 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn penalty_examples() {
        let cfg = RegularizerConfig::new(1.0, 1.0, 0.2);
        let mut mask = vec![0.0; 10];
        mask[4] = 1.0;
        mask[5] = 1.0;
        assert_abs_diff_eq!(
            sparsity_continuity_penalty(&mask, &cfg, MaskLayout::Sequence).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            sparsity_continuity_penalty(&[1.0; 10], &cfg, MaskLayout::Sequence).unwrap(),
            0.8,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            sparsity_continuity_penalty(&[0.2; 10], &cfg, MaskLayout::Sequence).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // bag masks carry no continuity term
        assert_abs_diff_eq!(
            sparsity_continuity_penalty(&mask, &cfg, MaskLayout::Bag).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert!(sparsity_continuity_penalty(&[], &cfg, MaskLayout::Bag).is_err());
    }

    #[test]
    fn regularizer_validation() {
        assert!(RegularizerConfig::new(1.0, 0.0, 1.5).validate().is_err());
        assert!(RegularizerConfig::new(-1.0, 0.0, 0.5).validate().is_err());
        let mut cfg = RegularizerConfig::new(1.0, 0.0, 0.5);
        cfg.class_alpha = Some(vec![0.1, 0.3]);
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha_for(1), 0.3);
        assert_eq!(cfg.alpha_for(5), 0.5);
    }

    #[test]
    fn h_kind_parsing() {
        assert_eq!("log".parse::<HKind>().unwrap(), HKind::Log);
        assert_eq!("linear".parse::<HPair>().unwrap().kind(), HKind::Linear);
        assert!("cubic".parse::<HKind>().is_err());
    }
}
