//! Closed-form divergences between Dirichlet distributions.

use statrs::function::gamma::{digamma, ln_gamma};

/// `KLD(Dir(a) || Dir(b))`.
///
/// `ln Γ(a₀) − Σ ln Γ(aⱼ) − ln Γ(b₀) + Σ ln Γ(bⱼ) + Σ (aⱼ − bⱼ)(ψ(aⱼ) − ψ(a₀))`
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "Dirichlet parameter vectors differ in length");
    let a0: f64 = a.iter().sum();
    let b0: f64 = b.iter().sum();
    let psi_a0 = digamma(a0);
    let mut kl = ln_gamma(a0) - ln_gamma(b0);
    for (&aj, &bj) in a.iter().zip(b) {
        kl += ln_gamma(bj) - ln_gamma(aj);
        if aj != bj {
            kl += (aj - bj) * (digamma(aj) - psi_a0);
        }
    }
    kl
}

/// KLD between the mean cell distributions `a / a₀` and `b / b₀`.
pub fn mean_kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "Dirichlet parameter vectors differ in length");
    let a0: f64 = a.iter().sum();
    let b0: f64 = b.iter().sum();
    a.iter()
        .zip(b)
        .filter(|(&aj, _)| aj > 0.0)
        .map(|(&aj, &bj)| {
            let p = aj / a0;
            p * (p / (bj / b0)).ln()
        })
        .sum()
}

/// [`kl_divergence`] when `a` and `b` differ only in one coordinate.
///
/// `a0`, `b0` are the totals and `ar`, `br` the differing entries.
pub(crate) fn kl_divergence_one_cell(a0: f64, b0: f64, ar: f64, br: f64) -> f64 {
    ln_gamma(a0) - ln_gamma(b0) - ln_gamma(ar) + ln_gamma(br) + (ar - br) * (digamma(ar) - digamma(a0))
}

/// [`mean_kl_divergence`] when `a` and `b` differ only in one coordinate.
pub(crate) fn mean_kl_divergence_one_cell(a0: f64, b0: f64, ar: f64, br: f64) -> f64 {
    let rest = (a0 - ar) / a0 * (b0 / a0).ln();
    rest + ar / a0 * ((ar * b0) / (a0 * br)).ln()
}
