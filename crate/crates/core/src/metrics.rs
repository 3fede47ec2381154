//! Residual unfairness and repair damage, estimated with shared-edge
//! histograms.

use serde::{Deserialize, Serialize};

use crate::datamodel::{empirical_weights, AttributeWeights, ResearchDataset, SubgroupKey};
use crate::error::{Error, Result};

/// Padding added on both sides of the pooled range.
pub const EDGE_PADDING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Pseudo-count added to every bin.
    pub smoothing: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: 50, smoothing: 1e-6 }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.smoothing > 0.0) || !self.smoothing.is_finite() {
            return Err(Error::Config(format!("smoothing must be positive, got {}", self.smoothing)));
        }
        Ok(())
    }
}

/// Smoothed bin masses over a set of edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDensity {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl HistogramDensity {
    /// Histogram of `sample` over `edges`; `(count + λ) / (n + Bλ)` per bin.
    /// Values outside the edges fall in the end bins.
    pub fn from_sample(sample: &[f64], edges: &[f64], smoothing: f64) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::Estimation("empty sample".into()));
        }
        if edges.len() < 3 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Estimation("bin edges must be strictly increasing with at least 2 bins".into()));
        }
        let b = edges.len() - 1;
        let mut counts = vec![0usize; b];
        for &x in sample {
            let i = edges[1..b].partition_point(|&e| e <= x);
            counts[i] += 1;
        }
        let denom = sample.len() as f64 + b as f64 * smoothing;
        let masses = counts.iter().map(|&c| (c as f64 + smoothing) / denom).collect();
        Ok(Self { edges: edges.to_vec(), masses })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// `B` equal-width bins over the pooled range of both samples.
pub fn shared_edges(a: &[f64], b: &[f64], bins: usize) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Estimation("empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let (lo, hi) = a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (lo, hi) = (lo - EDGE_PADDING, hi + EDGE_PADDING);
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    edges[bins] = hi;
    Ok(edges)
}

pub fn estimate_hist(a: &[f64], b: &[f64], config: &HistogramConfig) -> Result<(HistogramDensity, HistogramDensity)> {
    config.validate()?;
    let edges = shared_edges(a, b, config.bins)?;
    Ok((
        HistogramDensity::from_sample(a, &edges, config.smoothing)?,
        HistogramDensity::from_sample(b, &edges, config.smoothing)?,
    ))
}

/// `Σ p_i ln(p_i / q_i)`.
pub fn kld(p: &HistogramDensity, q: &HistogramDensity) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::IncompatibleDensities);
    }
    Ok(p.masses
        .iter()
        .zip(&q.masses)
        .map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum::<f64>()
        .max(0.0))
}

/// `0.5 D[p||q] + 0.5 D[q||p]`.
pub fn sym_kld(p: &HistogramDensity, q: &HistogramDensity) -> Result<f64> {
    // Summed termwise so the result is exactly symmetric.
    if p.edges != q.edges {
        return Err(Error::IncompatibleDensities);
    }
    Ok(0.5
        * p.masses
            .iter()
            .zip(&q.masses)
            .map(|(&a, &b)| if a == b { 0.0 } else { (a - b) * (a.ln() - b.ln()) })
            .sum::<f64>())
}

fn sample_kld(a: &[f64], b: &[f64], config: &HistogramConfig, symmetric: bool) -> Result<f64> {
    let (p, q) = estimate_hist(a, b, config)?;
    if symmetric {
        sym_kld(&p, &q)
    } else {
        kld(&p, &q)
    }
}

fn require_nonempty(data: &ResearchDataset) -> Result<()> {
    match SubgroupKey::ALL.into_iter().find(|&k| data.count(k) == 0) {
        Some(k) => Err(Error::EmptySubgroup(k)),
        None => Ok(()),
    }
}

/// Per-`u` symmetrized divergences between the `s = 0` and `s = 1` features.
pub fn unfairness_components(data: &ResearchDataset, config: &HistogramConfig) -> Result<[f64; 2]> {
    require_nonempty(data)?;
    let e = |u: u8| {
        sample_kld(
            data.features(SubgroupKey::new(u, 0)),
            data.features(SubgroupKey::new(u, 1)),
            config,
            true,
        )
    };
    Ok([e(0)?, e(1)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Unfairness {
    pub per_u: [f64; 2],
    pub total: f64,
}

/// `E = Σ_u Pr[u] E_u` with empirical `Pr[u]`.
pub fn unfairness(data: &ResearchDataset, config: &HistogramConfig) -> Result<Unfairness> {
    let per_u = unfairness_components(data, config)?;
    let w = empirical_weights(data)?;
    Ok(Unfairness { per_u, total: w.pr_u(0) * per_u[0] + w.pr_u(1) * per_u[1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub e_pre: f64,
    pub e_post: f64,
    pub e_hat: f64,
    pub per_u_pre: [f64; 2],
    pub per_u_post: [f64; 2],
    pub histogram: HistogramConfig,
}

impl FairnessReport {
    /// Natural log of `e_hat`; `-inf` for a perfectly fair repair.
    pub fn log_e_hat(&self) -> f64 {
        self.e_hat.ln()
    }
}

fn check_aligned(pre: &ResearchDataset, post: &ResearchDataset) -> Result<()> {
    if pre.counts() != post.counts() {
        return Err(Error::Misaligned(format!(
            "subgroup counts differ: {:?} vs {:?}",
            pre.counts(),
            post.counts()
        )));
    }
    Ok(())
}

/// `Ê = E(post) / E(pre)`, both weighted by the group shares of `pre`.
pub fn e_hat(pre: &ResearchDataset, post: &ResearchDataset, config: &HistogramConfig) -> Result<FairnessReport> {
    check_aligned(pre, post)?;
    let w = empirical_weights(pre)?;
    let per_u_pre = unfairness_components(pre, config)?;
    let per_u_post = unfairness_components(post, config)?;
    let total = |e: [f64; 2]| w.pr_u(0) * e[0] + w.pr_u(1) * e[1];
    let (e_pre, e_post) = (total(per_u_pre), total(per_u_post));
    if !(e_pre > 0.0) {
        return Err(Error::UndefinedRatio);
    }
    Ok(FairnessReport { e_pre, e_post, e_hat: e_post / e_pre, per_u_pre, per_u_post, histogram: *config })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageReport {
    /// `D[F_{u,s} || F'_{u,s}]` in [`SubgroupKey::ALL`] order.
    pub per_subgroup: [f64; 4],
    pub total: f64,
    pub weights: AttributeWeights,
    pub histogram: HistogramConfig,
}

impl DamageReport {
    /// `Σ_u Pr[u] Σ_s Pr[s|u] D_{u,s}` from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        weighted_damage(&self.per_subgroup, &self.weights)
    }
}

fn weighted_damage(d: &[f64; 4], w: &AttributeWeights) -> f64 {
    SubgroupKey::ALL
        .iter()
        .map(|&k| w.pr_u(k.u) * w.pr_s_given_u(k).unwrap_or(0.0) * d[k.index()])
        .sum()
}

/// Per-subgroup divergence of the repaired features from the originals.
pub fn damage(pre: &ResearchDataset, post: &ResearchDataset, config: &HistogramConfig) -> Result<DamageReport> {
    check_aligned(pre, post)?;
    require_nonempty(pre)?;
    let weights = empirical_weights(pre)?;
    let mut per_subgroup = [0.0; 4];
    for k in SubgroupKey::ALL {
        per_subgroup[k.index()] = sample_kld(pre.features(k), post.features(k), config, false)?;
    }
    Ok(DamageReport { per_subgroup, total: weighted_damage(&per_subgroup, &weights), weights, histogram: *config })
}
