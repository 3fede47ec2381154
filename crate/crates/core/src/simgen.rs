//! Seeded generators for the simulated feature laws and labelled mixtures.

use log::{debug, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::datamodel::{AttributeWeights, LabelledDatum, ResearchDataset, SubgroupKey};
use crate::error::{Error, Result};
use crate::stopping::SubgroupLearner;

/// Draw budget for [`sample_until_quenched`].
pub const DEFAULT_DRAW_CAP: u64 = 10_000_000;

/// Finite mixture of Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        let g = Self { weights, means, sds };
        g.validate()?;
        Ok(g)
    }

    /// `0.8 N(-1, 1) + 0.2 N(-5, 0.5²)`.
    pub fn minority_component() -> Self {
        Self { weights: vec![0.8, 0.2], means: vec![-1.0, -5.0], sds: vec![1.0, 0.5] }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sds.len() != k {
            return Err(Error::Config("mixture needs equally many weights, means and sds".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights {:?} are not a distribution", self.weights)));
        }
        if self.sds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite and sds positive".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (m, s))| w * (s * s + m * m))
            .sum();
        second - self.mean().powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let c = if self.weights.len() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
        };
        Normal::new(self.means[c], self.sds[c]).expect("validated sd").sample(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoricalRepr {
    q: usize,
}

/// Discretized standard normal on the grid `-5 + 10 i / q`, `i = 0..=q`.
/// Grid point `i < q` carries `Φ(x_{i+1}) - Φ(x_i)`; the last point has no mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CategoricalRepr", into = "CategoricalRepr")]
pub struct CategoricalSpec {
    q: usize,
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<CategoricalRepr> for CategoricalSpec {
    type Error = Error;

    fn try_from(r: CategoricalRepr) -> Result<Self> {
        Self::new(r.q)
    }
}

impl From<CategoricalSpec> for CategoricalRepr {
    fn from(c: CategoricalSpec) -> Self {
        CategoricalRepr { q: c.q }
    }
}

impl CategoricalSpec {
    pub fn new(q: usize) -> Result<Self> {
        if q < 1 {
            return Err(Error::Config("categorical law needs q >= 1".into()));
        }
        let support: Vec<f64> = (0..=q).map(|i| -5.0 + 10.0 * i as f64 / q as f64).collect();
        let phi = NormalDist::standard();
        let mut probs: Vec<f64> = support.windows(2).map(|w| phi.cdf(w[1]) - phi.cdf(w[0])).collect();
        probs.push(0.0);
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { q, support, probs })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support.iter().zip(&self.probs).map(|(x, p)| p * (x - m).powi(2)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = WeightedIndex::new(&self.probs).expect("valid categorical").sample(rng);
        self.support[i]
    }
}

/// Law of a scalar feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureLaw {
    Gaussian { mean: f64, sd: f64 },
    Gmm(GmmSpec),
    Categorical(CategoricalSpec),
}

impl FeatureLaw {
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        FeatureLaw::Gaussian { mean, sd }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureLaw::Gaussian { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0) || !sd.is_finite() {
                    return Err(Error::Config(format!("invalid Gaussian N({mean}, {sd}²)")));
                }
                Ok(())
            }
            FeatureLaw::Gmm(g) => g.validate(),
            FeatureLaw::Categorical(_) => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            FeatureLaw::Gaussian { mean, .. } => *mean,
            FeatureLaw::Gmm(g) => g.mean(),
            FeatureLaw::Categorical(c) => c.mean(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            FeatureLaw::Gaussian { sd, .. } => sd * sd,
            FeatureLaw::Gmm(g) => g.variance(),
            FeatureLaw::Categorical(c) => c.variance(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            FeatureLaw::Gaussian { mean, sd } => Normal::new(*mean, *sd).expect("validated sd").sample(rng),
            FeatureLaw::Gmm(g) => g.sample(rng),
            FeatureLaw::Categorical(c) => c.sample(rng),
        }
    }
}

/// Four `(u, s)`-conditional feature laws with subgroup probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModelSpec {
    /// In [`SubgroupKey::ALL`] order.
    pub conditionals: [FeatureLaw; 4],
    pub weights: AttributeWeights,
}

impl MixtureModelSpec {
    pub fn new(conditionals: [FeatureLaw; 4], weights: AttributeWeights) -> Result<Self> {
        let m = Self { conditionals, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for law in &self.conditionals {
            law.validate()?;
        }
        AttributeWeights::new(self.weights.as_array()).map(|_| ())
    }

    /// Gaussian subgroups with `Pr[s|u] = 0.5` and the given `Pr[U=0]`.
    pub fn representation_bias(pr_u0: f64) -> Result<Self> {
        if !(pr_u0 > 0.0 && pr_u0 < 1.0) {
            return Err(Error::Config(format!("Pr[U=0] must lie in (0, 1), got {pr_u0}")));
        }
        Self::new(
            [
                FeatureLaw::gaussian(-1.0, 1.0),
                FeatureLaw::gaussian(1.0, 1.2),
                FeatureLaw::gaussian(-0.5, 1.2),
                FeatureLaw::gaussian(1.5, 0.8),
            ],
            AttributeWeights::balanced_within_u(pr_u0)?,
        )
    }

    /// Two-component mixtures in every subgroup, with unequal subgroup shares.
    pub fn intersectionality() -> Self {
        let gmm = |w: [f64; 2], m: [f64; 2], s: [f64; 2]| {
            FeatureLaw::Gmm(GmmSpec { weights: w.to_vec(), means: m.to_vec(), sds: s.to_vec() })
        };
        Self {
            conditionals: [
                gmm([0.8, 0.2], [-1.0, -5.0], [1.0, 0.5]),
                gmm([0.6, 0.4], [1.0, -1.75], [1.2, 0.5]),
                gmm([0.5, 0.5], [-1.0, 3.5], [1.0, 1.2]),
                gmm([0.1, 0.9], [-2.0, 5.0], [0.8, 1.5]),
            ],
            weights: AttributeWeights::new([0.18, 0.12, 0.42, 0.28]).expect("weights sum to one"),
        }
    }

    pub fn law(&self, key: SubgroupKey) -> &FeatureLaw {
        &self.conditionals[key.index()]
    }

    fn key_sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.weights.as_array()).expect("validated weights")
    }
}

/// `n` i.i.d. labelled draws: `(u, s)` by the subgroup weights, then `x`
/// from that subgroup's law.
pub fn sample_labelled<R: Rng + ?Sized>(spec: &MixtureModelSpec, n: usize, rng: &mut R) -> Vec<LabelledDatum> {
    let keys = spec.key_sampler();
    (0..n)
        .map(|_| {
            let k = SubgroupKey::from_index(keys.sample(rng));
            LabelledDatum::new(spec.law(k).sample(rng), k.u, k.s)
        })
        .collect()
}

/// `n` draws from one subgroup's law.
pub fn sample_subgroup<R: Rng + ?Sized>(spec: &MixtureModelSpec, key: SubgroupKey, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| spec.law(key).sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct QuenchOutcome {
    /// Data each learner absorbed, in arrival order.
    pub data: ResearchDataset,
    pub learners: [SubgroupLearner; 4],
    pub stopping_numbers: [usize; 4],
    /// Total labelled draws taken.
    pub draws: u64,
    /// Draws that arrived for an already quenched subgroup.
    pub discarded: [u64; 4],
}

/// Streams labelled draws into the four learners until all have quenched.
/// Draws for a quenched subgroup are dropped.
pub fn sample_until_quenched<R: Rng + ?Sized>(
    spec: &MixtureModelSpec,
    mut learners: [SubgroupLearner; 4],
    rng: &mut R,
    draw_cap: u64,
) -> Result<QuenchOutcome> {
    let keys = spec.key_sampler();
    let mut data = ResearchDataset::default();
    let mut discarded = [0u64; 4];
    let mut draws = 0u64;
    while !learners.iter().all(SubgroupLearner::is_quenched) {
        if draws >= draw_cap {
            return Err(Error::NonConvergence { draws, smoothed: learners.each_ref().map(|l| l.smoothed_kld()) });
        }
        draws += 1;
        let k = SubgroupKey::from_index(keys.sample(rng));
        let x = spec.law(k).sample(rng);
        let l = &mut learners[k.index()];
        if l.is_quenched() {
            discarded[k.index()] += 1;
            continue;
        }
        l.absorb(x)?;
        data.push(k, x);
    }
    let stopping_numbers = learners.each_ref().map(|l| l.absorbed());
    debug!("all learners quenched after {draws} draws: n̂ = {stopping_numbers:?}, discarded {discarded:?}");
    Ok(QuenchOutcome { data, learners, stopping_numbers, draws, discarded })
}

/// `round(p_{u,s} · total)` per subgroup.
pub fn biased_counts(weights: &AttributeWeights, total: usize) -> [usize; 4] {
    weights.as_array().map(|p| (p * total as f64).round() as usize)
}

/// A sample with the model's own subgroup proportions and total size
/// `Σ n̂`, drawn with exact counts per subgroup.
pub fn biased_sample<R: Rng + ?Sized>(spec: &MixtureModelSpec, stopping_numbers: &[usize; 4], rng: &mut R) -> ResearchDataset {
    let counts = biased_counts(&spec.weights, stopping_numbers.iter().sum());
    let mut groups: [Vec<f64>; 4] = Default::default();
    for k in SubgroupKey::ALL {
        let n = counts[k.index()];
        if n == 0 {
            warn!("subgroup {k} receives no data in the biased sample");
        }
        groups[k.index()] = sample_subgroup(spec, k, n, rng);
    }
    ResearchDataset::from_groups(groups).expect("generated features are finite")
}
