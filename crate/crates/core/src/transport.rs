//! Optimal-transport repair operators built from quenched learners.
//!
//! For each `u`, the two quantized conditionals (`s = 0` and `s = 1`) are
//! coupled by the squared-distance optimal plan. A datum is rounded onto
//! its own side's grid by a Bernoulli trial, its partner index is drawn
//! from the plan row (or column), and the repaired value is the midpoint
//! of the two centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttributeWeights, LabelledDatum, ResearchDataset, SubgroupKey};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::stopping::{DirichletState, SubgroupLearner};

/// Tolerance on plan marginals.
pub const MARGINAL_TOLERANCE: f64 = 1e-10;

/// Interior-cell centroids of a learned partition with their masses.
///
/// Each interior cell `[v_j, v_{j+1})` carries the atoms observed at `v_j`,
/// so with distinct observations every centroid has mass `1/m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedConditional {
    centroids: Vec<f64>,
    weights: Vec<f64>,
}

impl QuantizedConditional {
    pub fn new(centroids: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::InsufficientSupport { distinct: 0 });
        }
        if centroids.len() != weights.len() {
            return Err(Error::Config("centroid and weight counts differ".into()));
        }
        if centroids.iter().any(|c| !c.is_finite()) || centroids.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("centroids must be finite and strictly increasing".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("centroid weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { centroids, weights })
    }

    pub fn uniform(centroids: Vec<f64>) -> Result<Self> {
        let m = centroids.len();
        Self::new(centroids, vec![1.0; m])
    }

    /// Midpoints of consecutive vertices, weighted by the atoms each
    /// interior cell holds.
    pub fn from_vertices(vertices: &[f64], multiplicities: &[u64]) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::InsufficientSupport { distinct: vertices.len() });
        }
        debug_assert_eq!(vertices.len(), multiplicities.len());
        let centroids = vertices.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let weights = multiplicities[..vertices.len() - 1].iter().map(|&c| c as f64).collect();
        Self::new(centroids, weights)
    }

    pub fn from_state(state: &DirichletState) -> Result<Self> {
        Self::from_vertices(state.vertices(), state.multiplicities())
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() < 1e-12)
    }
}

/// Quantized conditional of a quenched learner.
pub fn centroids_from_learner(learner: &SubgroupLearner) -> Result<QuantizedConditional> {
    learner.stopping_number()?;
    QuantizedConditional::from_state(learner.state())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub row: usize,
    pub col: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanRepr {
    rows: usize,
    cols: usize,
    entries: Vec<PlanEntry>,
}

/// Monotone coupling stored by its support. Entries are sorted by row and
/// by column at once, so every row and every column is a contiguous run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    entries: Vec<PlanEntry>,
    row_start: Vec<usize>,
    col_start: Vec<usize>,
    // Running mass within each row, and within each column.
    row_cum: Vec<f64>,
    col_cum: Vec<f64>,
}

impl From<TransportPlan> for PlanRepr {
    fn from(p: TransportPlan) -> Self {
        PlanRepr { rows: p.rows, cols: p.cols, entries: p.entries }
    }
}

impl TryFrom<PlanRepr> for TransportPlan {
    type Error = Error;

    fn try_from(r: PlanRepr) -> Result<Self> {
        TransportPlan::from_entries(r.rows, r.cols, r.entries)
    }
}

impl TransportPlan {
    fn from_entries(rows: usize, cols: usize, entries: Vec<PlanEntry>) -> Result<Self> {
        if entries.iter().any(|e| e.row >= rows || e.col >= cols || !(e.mass > 0.0)) {
            return Err(Error::Snapshot("plan entry out of range or non-positive".into()));
        }
        if entries.windows(2).any(|w| !(w[0].row <= w[1].row && w[0].col <= w[1].col && (w[0].row, w[0].col) != (w[1].row, w[1].col))) {
            return Err(Error::Snapshot("plan support is not monotone".into()));
        }
        let mut row_start = vec![0; rows + 1];
        let mut col_start = vec![0; cols + 1];
        for e in &entries {
            row_start[e.row + 1] += 1;
            col_start[e.col + 1] += 1;
        }
        for i in 0..rows {
            row_start[i + 1] += row_start[i];
        }
        for j in 0..cols {
            col_start[j + 1] += col_start[j];
        }
        let mut row_cum = Vec::with_capacity(entries.len());
        let mut col_cum = vec![0.0; entries.len()];
        for i in 0..rows {
            let mut acc = 0.0;
            for e in &entries[row_start[i]..row_start[i + 1]] {
                acc += e.mass;
                row_cum.push(acc);
            }
        }
        for j in 0..cols {
            let mut acc = 0.0;
            for idx in col_start[j]..col_start[j + 1] {
                acc += entries[idx].mass;
                col_cum[idx] = acc;
            }
        }
        Ok(Self { rows, cols, entries, row_start, col_start, row_cum, col_cum })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[PlanEntry] {
        &self.entries[self.row_start[i]..self.row_start[i + 1]]
    }

    pub fn col(&self, j: usize) -> &[PlanEntry] {
        &self.entries[self.col_start[j]..self.col_start[j + 1]]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().map(|e| e.mass).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|j| self.col(j).iter().map(|e| e.mass).sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.cols]; self.rows];
        for e in &self.entries {
            m[e.row][e.col] += e.mass;
        }
        m
    }

    /// `Σ (q_i - q_j)² π_ij`, the squared 2-Wasserstein distance.
    pub fn cost(&self, mu0: &QuantizedConditional, mu1: &QuantizedConditional) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let d = mu0.centroids[e.row] - mu1.centroids[e.col];
                d * d * e.mass
            })
            .sum()
    }

    /// Draws a column from row `i`, with probabilities proportional to the row.
    pub fn sample_col<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<usize> {
        let (lo, hi) = (self.row_start[i], self.row_start[i + 1]);
        let cum = &self.row_cum[lo..hi];
        let e = sample_index(cum, rng).ok_or_else(|| Error::Invariant(format!("plan row {i} has no mass")))?;
        Ok(self.entries[lo + e].col)
    }

    /// Draws a row from column `j`.
    pub fn sample_row<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Result<usize> {
        let (lo, hi) = (self.col_start[j], self.col_start[j + 1]);
        let cum = &self.col_cum[lo..hi];
        let e = sample_index(cum, rng).ok_or_else(|| Error::Invariant(format!("plan column {j} has no mass")))?;
        Ok(self.entries[lo + e].row)
    }
}

fn sample_index<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> Option<usize> {
    let total = *cum.last()?;
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    Some(cum.partition_point(|&c| c <= u).min(cum.len() - 1))
}

/// Squared-distance optimal coupling of two quantized conditionals.
///
/// In one dimension the monotone (north-west corner) coupling of the
/// sorted supports is optimal for any convex cost.
pub fn solve_plan(mu0: &QuantizedConditional, mu1: &QuantizedConditional) -> TransportPlan {
    let cum = |w: &[f64]| {
        let mut acc = 0.0;
        let mut c: Vec<f64> = w
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        *c.last_mut().unwrap() = 1.0;
        c
    };
    let c0 = cum(&mu0.weights);
    let c1 = cum(&mu1.weights);
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut entries = Vec::with_capacity(c0.len() + c1.len());
    while i < c0.len() && j < c1.len() {
        let next = c0[i].min(c1[j]);
        if next > prev {
            entries.push(PlanEntry { row: i, col: j, mass: next - prev });
            prev = next;
        }
        if c0[i] <= next {
            i += 1;
        }
        if c1[j] <= next {
            j += 1;
        }
    }
    TransportPlan::from_entries(mu0.len(), mu1.len(), entries).expect("north-west corner plan is monotone")
}

/// Bernoulli rounding of `x` onto the grid: between neighbours `q_j <= x <
/// q_{j+1}` the upper index is chosen with probability
/// `(x - q_j) / (q_{j+1} - q_j)`. Values outside the grid clamp to the end
/// centroids. Returns a 0-based index.
pub fn round_to_grid<R: Rng + ?Sized>(x: f64, q: &QuantizedConditional, rng: &mut R) -> usize {
    let c = &q.centroids;
    let m = c.len();
    if x <= c[0] {
        return 0;
    }
    if x >= c[m - 1] {
        return m - 1;
    }
    let j = c.partition_point(|&v| v <= x) - 1;
    let p = ((x - c[j]) / (c[j + 1] - c[j])).clamp(0.0, 1.0);
    if p > 0.0 && rng.random::<f64>() < p {
        j + 1
    } else {
        j
    }
}

/// Repair operator for one `u` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRepair {
    /// Quantized conditional of `s = 0`.
    pub source: QuantizedConditional,
    /// Quantized conditional of `s = 1`.
    pub target: QuantizedConditional,
    pub plan: TransportPlan,
}

impl GroupRepair {
    pub fn new(source: QuantizedConditional, target: QuantizedConditional) -> Self {
        let plan = solve_plan(&source, &target);
        Self { source, target, plan }
    }

    fn check(&self) -> Result<()> {
        if self.plan.shape() != (self.source.len(), self.target.len()) {
            return Err(Error::Snapshot("plan shape does not match the conditionals".into()));
        }
        Ok(())
    }

    pub fn repair<R: Rng + ?Sized>(&self, x: f64, s: u8, t: f64, rng: &mut R) -> Result<f64> {
        let (j0, j1) = if s == 0 {
            let j0 = round_to_grid(x, &self.source, rng);
            (j0, self.plan.sample_col(j0, rng)?)
        } else {
            let j1 = round_to_grid(x, &self.target, rng);
            (self.plan.sample_row(j1, rng)?, j1)
        };
        Ok((1.0 - t) * self.source.centroids[j0] + t * self.target.centroids[j1])
    }
}

/// Fitted repair: one operator per `u`, applicable to any labelled datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairModel {
    groups: [Option<GroupRepair>; 2],
    weights: AttributeWeights,
    /// Position on the geodesic; 0.5 is the midpoint.
    t: f64,
}

impl RepairModel {
    pub const MIDPOINT: f64 = 0.5;

    pub fn new(groups: [Option<GroupRepair>; 2], weights: AttributeWeights) -> Result<Self> {
        for g in groups.iter().flatten() {
            g.check()?;
        }
        Ok(Self { groups, weights, t: Self::MIDPOINT })
    }

    /// Builds both group operators from four quenched learners in
    /// [`SubgroupKey::ALL`] order.
    pub fn fit(learners: &[SubgroupLearner; 4], weights: AttributeWeights) -> Result<Self> {
        let q = |u: u8, s: u8| centroids_from_learner(&learners[SubgroupKey::new(u, s).index()]);
        let g0 = GroupRepair::new(q(0, 0)?, q(0, 1)?);
        let g1 = GroupRepair::new(q(1, 0)?, q(1, 1)?);
        Self::new([Some(g0), Some(g1)], weights)
    }

    pub fn group(&self, u: u8) -> Option<&GroupRepair> {
        self.groups.get(u as usize).and_then(Option::as_ref)
    }

    pub fn weights(&self) -> &AttributeWeights {
        &self.weights
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.t != Self::MIDPOINT {
            return Err(Error::Snapshot(format!("unsupported interpolation parameter t = {}", self.t)));
        }
        for g in self.groups.iter().flatten() {
            g.check()?;
        }
        Ok(())
    }
}

/// Repaired feature for one datum.
pub fn repair<R: Rng + ?Sized>(model: &RepairModel, datum: &LabelledDatum, rng: &mut R) -> Result<f64> {
    let g = model.group(datum.u).ok_or(Error::UnfittedGroup { u: datum.u })?;
    g.repair(datum.x, datum.s, model.t, rng)
}

/// Repairs every datum with its own substream (`stream = index`) of `seed`;
/// labels and order are kept, only `x` changes.
pub fn repair_batch(model: &RepairModel, data: &[LabelledDatum], seed: u64) -> Result<Vec<LabelledDatum>> {
    data.iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = substream(seed, i as u64);
            Ok(LabelledDatum { x: repair(model, d, &mut rng)?, ..*d })
        })
        .collect()
}

/// [`repair_batch`] over a segmented dataset; the result keeps its segmentation.
pub fn repair_dataset(model: &RepairModel, data: &ResearchDataset, seed: u64) -> Result<ResearchDataset> {
    let repaired = repair_batch(model, &data.to_labelled(), seed)?;
    let mut groups: [Vec<f64>; 4] = Default::default();
    for d in repaired {
        groups[d.key().index()].push(d.x);
    }
    ResearchDataset::from_groups(groups)
}
