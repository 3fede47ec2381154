//! Sequential Dirichlet-process learning of one subgroup distribution,
//! quenched by a KLD stopping rule over a data-driven partition.
//!
//! The partition vertices are the distinct observed values. Cells are
//! half-open, `(-inf, v_1), [v_1, v_2), ..., [v_k, +inf)`, so every atom
//! sits at the left endpoint of its cell. The posterior induces a
//! Dirichlet on the cells with parameter `nu0 * F0(cell) + atoms(cell)`.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dirichlet;
use crate::error::{Error, Result};

/// Lower clamp on cell parameters so `ln Γ` and `ψ` stay finite.
pub const ALPHA_FLOOR: f64 = 1e-12;

/// Prior expected distribution `F0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseMeasure {
    Uniform { min: f64, max: f64 },
    Gaussian { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub base: BaseMeasure,
    /// Prior degrees of freedom.
    pub nu0: f64,
}

impl PriorSpec {
    pub fn uniform(min: f64, max: f64, nu0: f64) -> Result<Self> {
        let p = Self { base: BaseMeasure::Uniform { min, max }, nu0 };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(mean: f64, sd: f64, nu0: f64) -> Result<Self> {
        let p = Self { base: BaseMeasure::Gaussian { mean, sd }, nu0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu0 > 0.0 && self.nu0.is_finite()) {
            return Err(Error::Config(format!("nu0 must be positive and finite, got {}", self.nu0)));
        }
        match self.base {
            BaseMeasure::Uniform { min, max } => {
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return Err(Error::Config(format!("uniform prior needs min < max, got [{min}, {max}]")));
                }
            }
            BaseMeasure::Gaussian { mean, sd } => {
                if !(mean.is_finite() && sd > 0.0 && sd.is_finite()) {
                    return Err(Error::Config(format!("gaussian prior needs sd > 0, got N({mean}, {sd})")));
                }
            }
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        match self.base {
            BaseMeasure::Uniform { min, max } => ((x - min) / (max - min)).clamp(0.0, 1.0),
            BaseMeasure::Gaussian { mean, sd } => normal(mean, sd).cdf(x),
        }
    }

    /// `F0`-probability of `[a, b)`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        debug_assert!(a <= b);
        match self.base {
            BaseMeasure::Uniform { .. } => (self.cdf(b) - self.cdf(a)).max(0.0),
            BaseMeasure::Gaussian { mean, sd } => {
                // Difference of survival functions keeps precision in the upper tail.
                if a >= mean {
                    let n = normal(mean, sd);
                    let sf = |t: f64| if t == f64::INFINITY { 0.0 } else { n.sf(t) };
                    (sf(a) - sf(b)).max(0.0)
                } else {
                    (self.cdf(b) - self.cdf(a)).max(0.0)
                }
            }
        }
    }

    fn support_contains(&self, x: f64) -> bool {
        match self.base {
            BaseMeasure::Uniform { min, max } => (min..=max).contains(&x),
            BaseMeasure::Gaussian { .. } => true,
        }
    }
}

fn normal(mean: f64, sd: f64) -> Normal {
    Normal::new(mean, sd).expect("validated gaussian prior")
}

/// `F0`-probability of `[a, b)`.
pub fn prior_mass(prior: &PriorSpec, a: f64, b: f64) -> f64 {
    prior.mass(a, b)
}

/// Which divergence between successive posteriors drives the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingStatistic {
    /// KLD between the posterior mean cell distributions of the two Dirichlets.
    #[default]
    MeanKld,
    /// KLD between the two Dirichlet distributions on the simplex.
    DirichletKld,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    pub epsilon: f64,
    /// Trailing-mean smoothing window over the KLD sequence.
    pub window: usize,
    pub k_min: usize,
    pub statistic: StoppingStatistic,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, window: 10, k_min: 10, statistic: StoppingStatistic::MeanKld }
    }
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.window < 1 {
            return Err(Error::Config("smoothing window must be at least 1".into()));
        }
        if self.k_min < 2 {
            return Err(Error::Config(format!("k_min must be at least 2, got {}", self.k_min)));
        }
        Ok(())
    }
}

/// Dirichlet parameters over a vertex partition, kept as the prior part
/// `nu0 * F0(cell)` and the atom count of each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletState {
    vertices: Vec<f64>,
    prior_part: Vec<f64>,
    atoms: Vec<u64>,
}

impl DirichletState {
    /// One cell spanning the real line with parameter `nu0`.
    pub fn initial(prior: &PriorSpec) -> Self {
        Self { vertices: Vec::new(), prior_part: vec![prior.nu0], atoms: vec![0] }
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    pub fn cell_count(&self) -> usize {
        self.prior_part.len()
    }

    /// Atom count at each vertex, in vertex order.
    pub fn multiplicities(&self) -> &[u64] {
        &self.atoms[1..]
    }

    pub fn cell_alpha(&self, cell: usize) -> f64 {
        (self.prior_part[cell] + self.atoms[cell] as f64).max(ALPHA_FLOOR)
    }

    pub fn alpha(&self) -> Vec<f64> {
        (0..self.cell_count()).map(|c| self.cell_alpha(c)).collect()
    }

    pub fn total(&self) -> f64 {
        self.alpha().iter().sum()
    }

    /// Index of the cell containing `x`.
    pub fn cell_of(&self, x: f64) -> usize {
        self.vertices.partition_point(|&v| v <= x)
    }

    fn cell_bounds(&self, cell: usize) -> (f64, f64) {
        let left = if cell == 0 { f64::NEG_INFINITY } else { self.vertices[cell - 1] };
        let right = self.vertices.get(cell).copied().unwrap_or(f64::INFINITY);
        (left, right)
    }

    fn is_vertex(&self, x: f64) -> bool {
        let c = self.cell_of(x);
        c > 0 && self.vertices[c - 1] == x
    }

    /// Splits the cell containing `x` at `x`; returns the index of the new
    /// right cell `[x, next)`. The prior part divides by prior mass; atoms
    /// stay in the left cell, where they sit.
    fn split(&mut self, prior: &PriorSpec, x: f64) -> usize {
        let c = self.cell_of(x);
        let (_, right) = self.cell_bounds(c);
        let right_part = (prior.nu0 * prior.mass(x, right)).min(self.prior_part[c]);
        self.prior_part[c] -= right_part;
        self.vertices.insert(c, x);
        self.prior_part.insert(c + 1, right_part);
        self.atoms.insert(c + 1, 0);
        c + 1
    }

    /// The same posterior expressed on the partition refined by `x`.
    pub fn refine(&self, prior: &PriorSpec, x: f64) -> Self {
        let mut out = self.clone();
        if !out.is_vertex(x) {
            out.split(prior, x);
        }
        out
    }

    fn check(&self) -> Result<()> {
        if self.prior_part.len() != self.vertices.len() + 1 || self.atoms.len() != self.prior_part.len() {
            return Err(Error::Invariant("cell vectors do not match the vertex count".into()));
        }
        if self.vertices.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invariant("vertices are not strictly increasing".into()));
        }
        Ok(())
    }
}

/// Divergence of `curr` from `prev` after expressing `prev` on `curr`'s partition.
pub fn kld_step(
    prior: &PriorSpec,
    prev: &DirichletState,
    curr: &DirichletState,
    statistic: StoppingStatistic,
) -> Result<f64> {
    prev.check()?;
    curr.check()?;
    let refined = match curr.vertices.len() - prev.vertices.len() {
        0 if curr.vertices == prev.vertices => prev.clone(),
        1 => {
            let new = curr
                .vertices
                .iter()
                .copied()
                .find(|v| !prev.is_vertex(*v))
                .ok_or_else(|| Error::Invariant("no new vertex found".into()))?;
            let r = prev.refine(prior, new);
            if r.vertices != curr.vertices {
                return Err(Error::Invariant("partition is not a one-vertex refinement".into()));
            }
            r
        }
        _ => return Err(Error::Invariant("partition is not a one-vertex refinement".into())),
    };
    let a = curr.alpha();
    let b = refined.alpha();
    let kl = match statistic {
        StoppingStatistic::MeanKld => dirichlet::mean_kl_divergence(&a, &b),
        StoppingStatistic::DirichletKld => dirichlet::kl_divergence(&a, &b),
    };
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LearnerRepr", into = "LearnerRepr")]
pub struct SubgroupLearner {
    prior: PriorSpec,
    config: StoppingConfig,
    state: DirichletState,
    kld_history: Vec<f64>,
    smoothed_kld: f64,
    absorbed: usize,
    quenched: bool,
    warned_outside_support: bool,
}

impl PartialEq for SubgroupLearner {
    fn eq(&self, other: &Self) -> bool {
        self.prior == other.prior
            && self.config == other.config
            && self.state == other.state
            && self.kld_history == other.kld_history
            && self.absorbed == other.absorbed
            && self.quenched == other.quenched
    }
}

/// Serialized learner; the smoothed statistic is recomputed on load.
#[derive(Serialize, Deserialize)]
struct LearnerRepr {
    prior: PriorSpec,
    config: StoppingConfig,
    state: DirichletState,
    kld_history: Vec<f64>,
    absorbed: usize,
    quenched: bool,
}

impl From<SubgroupLearner> for LearnerRepr {
    fn from(l: SubgroupLearner) -> Self {
        LearnerRepr {
            prior: l.prior,
            config: l.config,
            state: l.state,
            kld_history: l.kld_history,
            absorbed: l.absorbed,
            quenched: l.quenched,
        }
    }
}

impl TryFrom<LearnerRepr> for SubgroupLearner {
    type Error = Error;

    fn try_from(r: LearnerRepr) -> Result<Self> {
        r.prior.validate()?;
        r.config.validate()?;
        r.state.check()?;
        let bad = |m: &str| Err(Error::Snapshot(format!("inconsistent learner: {m}")));
        if r.state.atoms.iter().sum::<u64>() != r.absorbed as u64 {
            return bad("atom counts do not sum to the absorbed count");
        }
        if r.kld_history.len() != r.absorbed.saturating_sub(1) || r.kld_history.iter().any(|k| !(*k >= 0.0)) {
            return bad("divergence history does not match the absorbed count");
        }
        let w = r.config.window.min(r.kld_history.len());
        let smoothed_kld = if w == 0 {
            f64::INFINITY
        } else {
            r.kld_history[r.kld_history.len() - w..].iter().sum::<f64>() / w as f64
        };
        let should_quench = smoothed_kld < r.config.epsilon && r.absorbed >= r.config.k_min;
        if r.quenched && !should_quench {
            return bad("marked quenched but the stopping rule is not met");
        }
        Ok(Self {
            prior: r.prior,
            config: r.config,
            state: r.state,
            kld_history: r.kld_history,
            smoothed_kld,
            absorbed: r.absorbed,
            quenched: r.quenched,
            warned_outside_support: false,
        })
    }
}

/// Creates a learner with the whole real line as its only cell.
pub fn init_learner(prior: PriorSpec, config: StoppingConfig) -> Result<SubgroupLearner> {
    SubgroupLearner::new(prior, config)
}

impl SubgroupLearner {
    pub fn new(prior: PriorSpec, config: StoppingConfig) -> Result<Self> {
        prior.validate()?;
        config.validate()?;
        Ok(Self {
            state: DirichletState::initial(&prior),
            prior,
            config,
            kld_history: Vec::new(),
            smoothed_kld: f64::INFINITY,
            absorbed: 0,
            quenched: false,
            warned_outside_support: false,
        })
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn config(&self) -> &StoppingConfig {
        &self.config
    }

    pub fn state(&self) -> &DirichletState {
        &self.state
    }

    pub fn vertices(&self) -> &[f64] {
        self.state.vertices()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.state.alpha()
    }

    pub fn kld_history(&self) -> &[f64] {
        &self.kld_history
    }

    pub fn smoothed_kld(&self) -> f64 {
        self.smoothed_kld
    }

    pub fn absorbed(&self) -> usize {
        self.absorbed
    }

    pub fn is_quenched(&self) -> bool {
        self.quenched
    }

    /// Posterior total `nu0 + k`.
    pub fn nu(&self) -> f64 {
        self.prior.nu0 + self.absorbed as f64
    }

    /// Adds one observation, refining the partition if `x` is new, and
    /// re-evaluates the stopping rule.
    pub fn absorb(&mut self, x: f64) -> Result<()> {
        if self.quenched {
            return Err(Error::Quenched);
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteFeature { index: self.absorbed, value: x });
        }
        if !self.warned_outside_support && !self.prior.support_contains(x) {
            warn!("observation {x} lies outside the prior support {:?}; cell parameters are clamped", self.prior.base);
            self.warned_outside_support = true;
        }

        let b0 = self.nu();
        let cell = if self.state.is_vertex(x) {
            self.state.cell_of(x)
        } else {
            self.state.split(&self.prior, x)
        };
        let br = self.state.cell_alpha(cell);
        self.state.atoms[cell] += 1;
        self.absorbed += 1;
        let ar = self.state.cell_alpha(cell);
        let a0 = b0 + (ar - br);

        if self.absorbed >= 2 {
            let kl = match self.config.statistic {
                StoppingStatistic::MeanKld => dirichlet::mean_kl_divergence_one_cell(a0, b0, ar, br),
                StoppingStatistic::DirichletKld => dirichlet::kl_divergence_one_cell(a0, b0, ar, br),
            };
            if !(kl >= -1e-9) {
                return Err(Error::Invariant(format!("negative KLD step {kl}")));
            }
            self.kld_history.push(kl.max(0.0));
            let w = self.config.window.min(self.kld_history.len());
            let tail = &self.kld_history[self.kld_history.len() - w..];
            self.smoothed_kld = tail.iter().sum::<f64>() / w as f64;
            if self.smoothed_kld < self.config.epsilon && self.absorbed >= self.config.k_min {
                self.quenched = true;
            }
        }
        Ok(())
    }

    /// Absorbs observations until the learner quenches or the input runs
    /// out; returns how many were consumed.
    pub fn absorb_until_quenched<I: IntoIterator<Item = f64>>(&mut self, xs: I) -> Result<usize> {
        let mut used = 0;
        for x in xs {
            if self.quenched {
                break;
            }
            self.absorb(x)?;
            used += 1;
        }
        Ok(used)
    }

    /// The stopping number `n̂`.
    pub fn stopping_number(&self) -> Result<usize> {
        if self.quenched {
            Ok(self.absorbed)
        } else {
            Err(Error::NotStopped { absorbed: self.absorbed, smoothed_kld: self.smoothed_kld })
        }
    }

    /// Posterior mean CDF `(nu0 F0(x) + #{x_j <= x}) / (nu0 + k)`.
    pub fn posterior_mean_cdf(&self, x: f64) -> f64 {
        let c = self.state.cell_of(x);
        let below: u64 = self.state.atoms[1..=c].iter().sum();
        let k = self.absorbed as f64;
        let weight = k / (self.prior.nu0 + k);
        let empirical = if self.absorbed == 0 { 0.0 } else { below as f64 / k };
        (1.0 - weight) * self.prior.cdf(x) + weight * empirical
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> StoppingConfig {
        StoppingConfig::default()
    }

    #[test]
    fn init_examples() {
        let l = init_learner(PriorSpec::uniform(-5.0, 5.0, 0.001).unwrap(), cfg()).unwrap();
        assert_eq!(l.alpha(), vec![0.001]);
        assert!(l.vertices().is_empty());
        assert!(!l.is_quenched());
        assert_eq!(l.absorbed(), 0);

        let l = init_learner(PriorSpec::gaussian(0.0, 1.0, 1.0).unwrap(), cfg()).unwrap();
        assert_eq!(l.alpha(), vec![1.0]);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let prior = PriorSpec::uniform(0.0, 1.0, 1.0).unwrap();
        let bad = StoppingConfig { epsilon: 0.0, ..cfg() };
        assert!(matches!(init_learner(prior, bad), Err(Error::Config(_))));
        let bad = StoppingConfig { window: 0, ..cfg() };
        assert!(matches!(init_learner(prior, bad), Err(Error::Config(_))));
        let bad = StoppingConfig { k_min: 1, ..cfg() };
        assert!(matches!(init_learner(prior, bad), Err(Error::Config(_))));
        assert!(PriorSpec::uniform(1.0, 1.0, 1.0).is_err());
        assert!(PriorSpec::gaussian(0.0, 0.0, 1.0).is_err());
        assert!(PriorSpec::uniform(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn prior_mass_examples() {
        let u = PriorSpec::uniform(0.0, 10.0, 1.0).unwrap();
        assert!((prior_mass(&u, 2.0, 4.0) - 0.2).abs() < 1e-15);
        assert_eq!(prior_mass(&u, f64::NEG_INFINITY, 0.0), 0.0);
        let g = PriorSpec::gaussian(0.0, 1.0, 1.0).unwrap();
        assert!((prior_mass(&g, f64::NEG_INFINITY, 0.0) - 0.5).abs() < 1e-15);
        assert!((prior_mass(&g, 0.0, f64::INFINITY) - 0.5).abs() < 1e-15);
        // Far upper tail keeps relative precision.
        let tail = prior_mass(&g, 9.0, 10.0);
        assert!(tail > 1e-19 && tail < 1e-18, "{tail}");
    }

    #[test]
    fn first_absorb_splits_the_real_line() {
        let mut l = init_learner(PriorSpec::uniform(-5.0, 5.0, 1.0).unwrap(), cfg()).unwrap();
        l.absorb(0.3).unwrap();
        assert_eq!(l.vertices(), &[0.3]);
        let a = l.alpha();
        assert!((a[0] - 0.53).abs() < 1e-12);
        assert!((a[1] - 1.47).abs() < 1e-12);
        assert!(l.kld_history().is_empty());
    }

    #[test]
    fn refinement_between_existing_vertices() {
        let prior = PriorSpec::uniform(0.0, 4.0, 1.0).unwrap();
        let mut l = init_learner(prior, cfg()).unwrap();
        l.absorb(1.0).unwrap();
        l.absorb(3.0).unwrap();
        let before = l.alpha();
        l.absorb(2.0).unwrap();
        assert_eq!(l.vertices(), &[1.0, 2.0, 3.0]);
        let a = l.alpha();
        // [1,3) had one atom at 1 plus 0.5 prior; the atom stays in [1,2).
        assert!((before[1] - 1.5).abs() < 1e-12);
        assert!((a[1] - 1.25).abs() < 1e-12);
        assert!((a[2] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn duplicate_value_does_not_split() {
        let mut l = init_learner(PriorSpec::uniform(0.0, 4.0, 1.0).unwrap(), cfg()).unwrap();
        for x in [1.0, 3.0, 1.0] {
            l.absorb(x).unwrap();
        }
        assert_eq!(l.vertices(), &[1.0, 3.0]);
        assert_eq!(l.state().multiplicities(), &[2, 1]);
        assert_eq!(l.kld_history().len(), 2);
    }

    #[test]
    fn huge_epsilon_quenches_at_k_min() {
        let c = StoppingConfig { epsilon: 1e300, ..cfg() };
        let mut l = init_learner(PriorSpec::uniform(0.0, 1.0, 0.001).unwrap(), c).unwrap();
        let used = l.absorb_until_quenched((0..100).map(|i| i as f64 / 100.0)).unwrap();
        assert_eq!(used, 10);
        assert_eq!(l.stopping_number().unwrap(), 10);
        assert!(matches!(l.absorb(0.5), Err(Error::Quenched)));
    }

    #[test]
    fn stopping_number_before_quench_errors() {
        let l = init_learner(PriorSpec::uniform(0.0, 1.0, 0.001).unwrap(), cfg()).unwrap();
        assert!(matches!(l.stopping_number(), Err(Error::NotStopped { .. })));
    }

    #[test]
    fn posterior_mean_cdf_examples() {
        let prior = PriorSpec::uniform(-5.0, 5.0, 0.001).unwrap();
        let mut l = init_learner(prior, cfg()).unwrap();
        assert_eq!(l.posterior_mean_cdf(1.0), prior.cdf(1.0));
        l.absorb(0.0).unwrap();
        let alpha1 = 1.0 / 1.001;
        let want = (1.0 - alpha1) * prior.cdf(2.0) + alpha1;
        assert!((l.posterior_mean_cdf(2.0) - want).abs() < 1e-15);
        let want = (1.0 - alpha1) * prior.cdf(-1.0);
        assert!((l.posterior_mean_cdf(-1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_cdf_tracks_empirical_cdf() {
        let prior = PriorSpec::uniform(0.0, 1.0, 0.001).unwrap();
        let c = StoppingConfig { epsilon: 1e-300, ..cfg() };
        let mut l = init_learner(prior, c).unwrap();
        let xs: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 2000) as f64 / 2000.0).collect();
        for &x in &xs {
            l.absorb(x).unwrap();
        }
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        for (i, &v) in sorted.iter().enumerate() {
            let ecdf = (i + 1) as f64 / sorted.len() as f64;
            assert!((l.posterior_mean_cdf(v) - ecdf).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_states_have_zero_step() {
        let prior = PriorSpec::uniform(0.0, 1.0, 0.5).unwrap();
        let mut l = init_learner(prior, cfg()).unwrap();
        l.absorb(0.4).unwrap();
        for stat in [StoppingStatistic::MeanKld, StoppingStatistic::DirichletKld] {
            assert_eq!(kld_step(&prior, l.state(), l.state(), stat).unwrap(), 0.0);
        }
    }

    #[test]
    fn kld_step_rejects_non_refinements() {
        let prior = PriorSpec::uniform(0.0, 1.0, 0.5).unwrap();
        let mut a = init_learner(prior, cfg()).unwrap();
        a.absorb(0.2).unwrap();
        let mut b = a.clone();
        b.absorb(0.4).unwrap();
        b.absorb(0.6).unwrap();
        assert!(matches!(
            kld_step(&prior, a.state(), b.state(), StoppingStatistic::MeanKld),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn outside_support_is_clamped_not_fatal() {
        let prior = PriorSpec::uniform(0.0, 1.0, 0.001).unwrap();
        let mut l = init_learner(prior, cfg()).unwrap();
        for x in [2.0, 3.0, 2.5, -1.0] {
            l.absorb(x).unwrap();
        }
        assert!(l.alpha().iter().all(|&a| a >= ALPHA_FLOOR));
        assert!(l.kld_history().iter().all(|k| k.is_finite()));
    }

    fn arb_stream() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(-3.0..3.0f64), (0i32..6).prop_map(|i| i as f64 * 0.5)], 1..120)
    }

    fn arb_prior() -> impl Strategy<Value = PriorSpec> {
        prop_oneof![
            (0.001..2.0f64).prop_map(|nu| PriorSpec::uniform(-4.0, 4.0, nu).unwrap()),
            (-2.0..2.0f64, 0.5..2.0f64, 0.001..2.0f64).prop_map(|(m, s, nu)| PriorSpec::gaussian(m, s, nu).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn mass_is_conserved(prior in arb_prior(), xs in arb_stream()) {
            let c = StoppingConfig { epsilon: 1e-300, ..cfg() };
            let mut l = init_learner(prior, c).unwrap();
            for &x in &xs {
                l.absorb(x).unwrap();
                let total = l.state().total();
                prop_assert!((total - l.nu()).abs() <= 1e-9 * l.nu());
            }
            prop_assert_eq!(l.kld_history().len(), xs.len().saturating_sub(1));
        }

        #[test]
        fn refinement_preserves_parent_mass(prior in arb_prior(), xs in arb_stream(), probe in -3.5..3.5f64) {
            let mut l = init_learner(prior, StoppingConfig { epsilon: 1e-300, ..cfg() }).unwrap();
            for &x in &xs { l.absorb(x).unwrap(); }
            let s = l.state();
            prop_assume!(!s.is_vertex(probe));
            let parent_cell = s.cell_of(probe);
            let parent = s.prior_part[parent_cell] + s.atoms[parent_cell] as f64;
            let r = s.refine(&prior, probe);
            let c = r.cell_of(probe);
            let children = r.prior_part[c - 1] + r.atoms[c - 1] as f64 + r.prior_part[c] + r.atoms[c] as f64;
            prop_assert!((children - parent).abs() <= 4.0 * f64::EPSILON * parent.max(1.0));
        }

        #[test]
        fn incremental_steps_match_kld_step(prior in arb_prior(), xs in arb_stream(), dir in any::<bool>()) {
            let statistic = if dir { StoppingStatistic::DirichletKld } else { StoppingStatistic::MeanKld };
            let c = StoppingConfig { epsilon: 1e-300, statistic, ..cfg() };
            let mut l = init_learner(prior, c).unwrap();
            let mut prev = l.state().clone();
            for (i, &x) in xs.iter().enumerate() {
                l.absorb(x).unwrap();
                if i >= 1 {
                    let full = kld_step(&prior, &prev, l.state(), statistic).unwrap();
                    let fast = l.kld_history()[i - 1];
                    prop_assert!(full >= 0.0);
                    prop_assert!((full - fast).abs() <= 1e-7 * full.max(1.0), "{} vs {}", full, fast);
                }
                prev = l.state().clone();
            }
        }

        #[test]
        fn learning_is_deterministic(prior in arb_prior(), xs in arb_stream()) {
            let c = StoppingConfig { epsilon: 0.05, k_min: 2, ..cfg() };
            let mut a = init_learner(prior, c).unwrap();
            let mut b = init_learner(prior, c).unwrap();
            a.absorb_until_quenched(xs.iter().copied()).unwrap();
            b.absorb_until_quenched(xs.iter().copied()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
