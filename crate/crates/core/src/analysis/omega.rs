//! Elementary symmetric sums of harmonic-type weights.
//!
//! `ω(s)` is the sum over all `0 ≤ i_1 < … < i_s < k` of
//! `Π 1/(t + i_j)`, the total weight of the gradient paths with `s` skip
//! hops under uniform attention. Writing `S_p = Σ_i (t+i)^{-p}`, it equals
//! `Σ_r ψ_{s−r} S_1^r / r!`, where `ψ` is generated by
//! `exp(Σ_{p≥2} (−1)^{p−1} S_p z^p / p)` and obeys
//! `ψ_l = Σ_{j=1}^{l} δ_j ψ_{l−j}` with
//! `δ_j = −[z^j] exp(−Σ_{p≥2} (−1)^{p−1} S_p z^p / p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `S_p = Σ_{i=0}^{k−1} (t+i)^{−p}`.
pub fn power_sum(t: usize, k: usize, p: i32) -> f64 {
    (0..k).map(|i| ((t + i) as f64).powi(-p)).sum()
}

/// `ω(s)` by direct enumeration of all index subsets of size `s`.
pub fn omega_brute(t: usize, k: usize, s: usize) -> f64 {
    fn rec(t: usize, k: usize, start: usize, left: usize, acc: f64) -> f64 {
        if left == 0 {
            return acc;
        }
        (start..k)
            .map(|i| rec(t, k, i + 1, left - 1, acc / (t + i) as f64))
            .sum()
    }
    rec(t, k, 0, s, 1.0)
}

/// Coefficients `0..=len` of `exp(P(z))` for a series with `P(0) = 0`.
fn exp_series(p: &[f64], len: usize) -> Vec<f64> {
    let mut e = vec![0.0; len + 1];
    e[0] = 1.0;
    for n in 1..=len {
        let mut acc = 0.0;
        for k in 1..=n.min(p.len() - 1) {
            acc += k as f64 * p[k] * e[n - k];
        }
        e[n] = acc / n as f64;
    }
    e
}

/// `δ_1 … δ_s` (index 0 unused and zero).
pub fn deltas(t: usize, k: usize, s: usize) -> Vec<f64> {
    let mut p = vec![0.0; s + 1];
    for (i, slot) in p.iter_mut().enumerate().skip(2) {
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        *slot = -(sign * power_sum(t, k, i as i32) / i as f64);
    }
    let inv = exp_series(&p, s);
    let mut d: Vec<f64> = inv.iter().map(|c| -c).collect();
    d[0] = 0.0;
    d
}

pub fn psis(t: usize, k: usize, s: usize) -> Vec<f64> {
    let d = deltas(t, k, s);
    let mut psi = vec![0.0; s + 1];
    psi[0] = 1.0;
    for l in 1..=s {
        psi[l] = (1..=l).map(|j| d[j] * psi[l - j]).sum();
    }
    psi
}

/// `ω(s)` through the `ψ` recursion.
pub fn omega_formula(t: usize, k: usize, s: usize) -> f64 {
    let psi = psis(t, k, s);
    let s1 = power_sum(t, k, 1);
    let mut fact = 1.0;
    let mut total = 0.0;
    for r in 0..=s {
        if r > 0 {
            fact *= r as f64;
        }
        total += psi[s - r] * s1.powi(r as i32) / fact;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaRow {
    pub t: usize,
    pub k: usize,
    pub s: usize,
    pub brute: f64,
    pub formula: f64,
    pub abs_error: f64,
}

/// Compares both evaluations on every `t ≤ t_max`, `k ≤ k_max`, `s ≤ s_max`.
pub fn verify_omega_identity(t_max: usize, k_max: usize, s_max: usize, tol: f64) -> Result<Vec<OmegaRow>> {
    let mut rows = Vec::new();
    for t in 1..=t_max {
        for k in 1..=k_max {
            for s in 0..=s_max {
                let brute = omega_brute(t, k, s);
                let formula = omega_formula(t, k, s);
                rows.push(OmegaRow {
                    t,
                    k,
                    s,
                    brute,
                    formula,
                    abs_error: (brute - formula).abs(),
                });
            }
        }
    }
    if let Some(bad) = rows.iter().find(|r| !(r.abs_error <= tol)) {
        return Err(Error::Verification(format!(
            "omega mismatch at t={} k={} s={}: enumeration {} vs formula {}",
            bad.t, bad.k, bad.s, bad.brute, bad.formula
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_is_s1() {
        assert!((omega_formula(2, 5, 1) - power_sum(2, 5, 1)).abs() < 1e-15);
    }

    #[test]
    fn hand_enumerated_pair_sum() {
        // 1/(1·2) + 1/(1·3) + 1/(2·3) = 1
        assert!((omega_brute(1, 3, 2) - 1.0).abs() < 1e-15);
        let s1: f64 = 11.0 / 6.0;
        let s2: f64 = 49.0 / 36.0;
        assert!(((s1 * s1 - s2) / 2.0 - 1.0).abs() < 1e-15);
        assert!((omega_formula(1, 3, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn low_order_deltas() {
        let (t, k) = (2, 7);
        let (s2, s3, s4) = (power_sum(t, k, 2), power_sum(t, k, 3), power_sum(t, k, 4));
        let d = deltas(t, k, 4);
        assert!((d[1]).abs() < 1e-18);
        assert!((d[2] + s2 / 2.0).abs() < 1e-15);
        assert!((d[3] - s3 / 3.0).abs() < 1e-15);
        assert!((d[4] + (2.0 * s4 + s2 * s2) / 8.0).abs() < 1e-15);
    }

    #[test]
    fn ordered_partition_count_overstates_fourth_delta() {
        let (t, k) = (1, 6);
        let (s2, s4) = (power_sum(t, k, 2), power_sum(t, k, 4));
        let psi = psis(t, k, 4);
        let mut alt = psi.clone();
        let d = deltas(t, k, 4);
        let d4_alt = -(s4 + 2.0 * s2 * s2) / 8.0;
        alt[4] = alt[4] - d[4] + d4_alt;
        assert!((alt[4] - psi[4]).abs() > 1e-3);
    }
}
