use bnprepair::datamodel::{AttributeWeights, LabelledDatum};
use bnprepair::rng::seeded;
use bnprepair::transport::{repair, repair_batch, solve_plan, GroupRepair, QuantizedConditional, RepairModel};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_conditional<R: Rng>(rng: &mut R, max_len: usize, uniform: bool) -> QuantizedConditional {
    let m = rng.random_range(1..=max_len);
    let mut c: Vec<f64> = (0..m).map(|_| rng.random_range(-20.0..20.0)).collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    let w = if uniform {
        vec![1.0; c.len()]
    } else {
        (0..c.len()).map(|_| rng.random_range(0.1..5.0)).collect()
    };
    QuantizedConditional::new(c, w).unwrap()
}

fn squared_cost(mu0: &QuantizedConditional, mu1: &QuantizedConditional, plan: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, row) in plan.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let d = mu0.centroids()[i] - mu1.centroids()[j];
            total += d * d * p;
        }
    }
    total
}

fn lp_optimum(mu0: &QuantizedConditional, mu1: &QuantizedConditional) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = mu0
        .centroids()
        .iter()
        .map(|a| {
            mu1.centroids()
                .iter()
                .map(|b| lp.add_var((a - b) * (a - b), (0.0, f64::INFINITY)))
                .collect()
        })
        .collect();
    for (i, w) in mu0.weights().iter().enumerate() {
        lp.add_constraint(vars[i].iter().map(|&v| (v, 1.0)), ComparisonOp::Eq, *w);
    }
    // The last column constraint is implied by the others.
    for (j, w) in mu1.weights().iter().enumerate().skip(1) {
        lp.add_constraint(vars.iter().map(|r| (r[j], 1.0)), ComparisonOp::Eq, *w);
    }
    lp.solve().expect("transport LP is feasible").objective()
}

/// North-west corner coupling of the marginals visited in the given
/// orders; feasible for any orders.
fn permuted_coupling(mu0: &QuantizedConditional, mu1: &QuantizedConditional, p0: &[usize], p1: &[usize]) -> Vec<Vec<f64>> {
    let mut plan = vec![vec![0.0; mu1.len()]; mu0.len()];
    let mut r0: Vec<f64> = mu0.weights().to_vec();
    let mut r1: Vec<f64> = mu1.weights().to_vec();
    let (mut a, mut b) = (0, 0);
    while a < p0.len() && b < p1.len() {
        let (i, j) = (p0[a], p1[b]);
        let m = r0[i].min(r1[j]);
        plan[i][j] += m;
        r0[i] -= m;
        r1[j] -= m;
        if r0[i] <= 1e-15 {
            a += 1;
        }
        if r1[j] <= 1e-15 {
            b += 1;
        }
    }
    plan
}

#[test]
fn plan_cost_matches_linear_programme() {
    let mut rng = seeded(2024);
    for trial in 0..100 {
        let mu0 = random_conditional(&mut rng, 8, trial % 2 == 0);
        let mu1 = random_conditional(&mut rng, 8, trial % 3 == 0);
        let plan = solve_plan(&mu0, &mu1);
        let ours = plan.cost(&mu0, &mu1);
        let lp = lp_optimum(&mu0, &mu1);
        assert!((ours - lp).abs() <= 1e-6 * lp.max(1.0), "trial {trial}: {ours} vs {lp}");
        assert!((ours - squared_cost(&mu0, &mu1, &plan.to_dense())).abs() < 1e-9 * ours.max(1.0));
    }
}

#[test]
fn no_feasible_coupling_is_cheaper() {
    let mut rng = seeded(77);
    for _ in 0..200 {
        let mu0 = random_conditional(&mut rng, 10, false);
        let mu1 = random_conditional(&mut rng, 10, false);
        let best = solve_plan(&mu0, &mu1).cost(&mu0, &mu1);
        let mut p0: Vec<usize> = (0..mu0.len()).collect();
        let mut p1: Vec<usize> = (0..mu1.len()).collect();
        p0.shuffle(&mut rng);
        p1.shuffle(&mut rng);
        let other = permuted_coupling(&mu0, &mu1, &p0, &p1);
        for (row, w) in other.iter().zip(mu0.weights()) {
            assert!((row.iter().sum::<f64>() - w).abs() < 1e-9);
        }
        assert!(squared_cost(&mu0, &mu1, &other) >= best - 1e-9);

        let product: Vec<Vec<f64>> =
            mu0.weights().iter().map(|a| mu1.weights().iter().map(|b| a * b).collect()).collect();
        assert!(squared_cost(&mu0, &mu1, &product) >= best - 1e-9);
    }
}

fn single_group_model(g: GroupRepair) -> RepairModel {
    RepairModel::new([Some(g), None], AttributeWeights::new([0.5, 0.5, 0.0, 0.0]).unwrap()).unwrap()
}

#[test]
fn repair_at_a_centroid_has_the_conditional_mean() {
    let q0 = QuantizedConditional::uniform(vec![-3.0, -1.0, 0.5, 2.0]).unwrap();
    let q1 = QuantizedConditional::uniform(vec![1.0, 4.0, 9.0]).unwrap();
    let g = GroupRepair::new(q0.clone(), q1.clone());
    let dense = g.plan.to_dense();
    let model = single_group_model(g);
    let mut rng = seeded(5);
    let draws = 100_000;
    for (j0, &c) in q0.centroids().iter().enumerate() {
        let row = &dense[j0];
        let row_mass: f64 = row.iter().sum();
        let partner: f64 = row.iter().zip(q1.centroids()).map(|(p, q)| p * q).sum::<f64>() / row_mass;
        let second: f64 = row.iter().zip(q1.centroids()).map(|(p, q)| p * q * q).sum::<f64>() / row_mass;
        let want = 0.5 * c + 0.5 * partner;
        let sd = 0.5 * (second - partner * partner).max(0.0).sqrt();
        let mean = (0..draws)
            .map(|_| repair(&model, &LabelledDatum::new(c, 0, 0), &mut rng).unwrap())
            .sum::<f64>()
            / draws as f64;
        let tol = 4.0 * sd / (draws as f64).sqrt() + 1e-12;
        assert!((mean - want).abs() <= tol, "centroid {j0}: {mean} vs {want} (tol {tol})");
    }
}

#[test]
fn partner_frequencies_follow_the_plan() {
    let q0 = QuantizedConditional::new(vec![0.0, 1.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
    let q1 = QuantizedConditional::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.1, 0.3, 0.4, 0.2]).unwrap();
    let g = GroupRepair::new(q0.clone(), q1.clone());
    let dense = g.plan.to_dense();
    let mut rng = seeded(11);
    let n = 50_000;
    let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
    for s in [0u8, 1] {
        for idx in 0..if s == 0 { 3 } else { 4 } {
            let probs: Vec<f64> = if s == 0 {
                let m: f64 = dense[idx].iter().sum();
                dense[idx].iter().map(|p| p / m).collect()
            } else {
                let m: f64 = dense.iter().map(|r| r[idx]).sum();
                dense.iter().map(|r| r[idx] / m).collect()
            };
            let x = if s == 0 { q0.centroids()[idx] } else { q1.centroids()[idx] };
            let mut counts = vec![0usize; probs.len()];
            for _ in 0..n {
                let y = g.repair(x, s, 0.5, &mut rng).unwrap();
                let other = 2.0 * y - x;
                counts[other.round() as usize] += 1;
            }
            let mut stat = 0.0;
            for (c, p) in counts.iter().zip(&probs) {
                if *p == 0.0 {
                    assert_eq!(*c, 0);
                    continue;
                }
                let e = p * n as f64;
                stat += (*c as f64 - e).powi(2) / e;
            }
            assert!(stat < crit, "s={s} idx={idx}: chi2 {stat} >= {crit}");
        }
    }
}

#[test]
fn batch_repair_of_source_atoms_matches_the_barycentre() {
    let q0 = QuantizedConditional::uniform(vec![0.0, 2.0, 4.0, 6.0]).unwrap();
    let q1 = QuantizedConditional::uniform(vec![10.0, 20.0]).unwrap();
    let g = GroupRepair::new(q0.clone(), q1.clone());
    let atoms: Vec<(f64, f64)> = g
        .plan
        .entries()
        .iter()
        .map(|e| (0.5 * q0.centroids()[e.row] + 0.5 * q1.centroids()[e.col], e.mass))
        .collect();
    let model = single_group_model(g);
    let mut rng = seeded(8);
    let n = 40_000;
    let data: Vec<LabelledDatum> = (0..n)
        .map(|_| LabelledDatum::new(q0.centroids()[rng.random_range(0..4)], 0, 0))
        .collect();
    let out = repair_batch(&model, &data, 99).unwrap();
    // Kolmogorov-Smirnov distance against the barycentric CDF.
    let mut xs: Vec<f64> = out.iter().map(|d| d.x).collect();
    xs.sort_by(f64::total_cmp);
    let mut ks: f64 = 0.0;
    for &(a, _) in &atoms {
        let emp = xs.partition_point(|&x| x <= a) as f64 / n as f64;
        let cdf: f64 = atoms.iter().filter(|(b, _)| *b <= a).map(|(_, m)| m).sum();
        ks = ks.max((emp - cdf).abs());
    }
    let crit = 1.95 / (n as f64).sqrt();
    assert!(ks < crit, "KS {ks} >= {crit}");
}
