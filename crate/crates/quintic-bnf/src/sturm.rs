//! Dirichlet Sturm-Liouville problem `-f'' + W f = lambda f` on `[0, pi]` in the sine basis.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{for_each_multiset, HomPoly, ModeSet, MonomialKey};
use crate::resonance::CosineSeries;
use crate::spectral::{bracket, FrequencySet};

/// Cosine series of an even potential sampled on `n` equispaced points of `[0, 2 pi)`.
pub fn cosine_series_from_samples(samples: &[f64]) -> Result<CosineSeries> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::InvalidInput("at least three samples are needed".into()));
    }
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = samples.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let odd = buf.iter().map(|z| z.im.abs()).fold(0.0, f64::max) / n as f64;
    if odd > 1e-12 * scale {
        return Err(Error::InvalidInput(format!("potential is not even (odd part {odd:.3e})")));
    }
    let mean = buf[0].re / n as f64;
    let coeffs = (1..n.div_ceil(2)).map(|k| 2.0 * buf[k].re / n as f64).collect();
    Ok(CosineSeries::new(mean, coeffs))
}

/// Lowest Dirichlet eigenpairs, eigenvectors expanded on `sqrt(2/pi) sin(m x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SLBasis {
    pub lambdas: Vec<f64>,
    /// `eigvecs[n - 1][m - 1]`, sign fixed by a positive diagonal entry.
    pub eigvecs: Vec<Vec<f64>>,
    pub potential: CosineSeries,
    pub avg_w: f64,
    pub n_basis: usize,
    /// Largest `||(A - lambda_n) c_n||`.
    pub residual: f64,
    /// Largest entry of `C^T C - I`.
    pub gram_error: f64,
}

fn galerkin_matrix(w: &CosineSeries, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let (m, k) = (i + 1, j + 1);
        let diag = if m == k { (m * m) as f64 + w.coeff(0) } else { 0.5 * w.coeff(m.abs_diff(k)) };
        diag - 0.5 * w.coeff(m + k)
    })
}

pub fn dirichlet_eig(w: &CosineSeries, n_max: usize, n_basis: usize) -> Result<SLBasis> {
    if n_max == 0 {
        return Err(Error::InvalidInput("n_max must be positive".into()));
    }
    if n_basis < 4 * n_max {
        return Err(Error::InvalidInput(format!("n_basis = {n_basis} must be at least 4 n_max = {}", 4 * n_max)));
    }
    let a = galerkin_matrix(w, n_basis);
    let eig = SymmetricEigen::try_new(a.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::EigenSolver("symmetric eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n_basis).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut lambdas = Vec::with_capacity(n_max);
    let mut eigvecs = Vec::with_capacity(n_max);
    let mut residual: f64 = 0.0;
    for (n, &i) in order.iter().take(n_max).enumerate() {
        let lam = eig.eigenvalues[i];
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        if v[n] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let col = nalgebra::DVector::from_column_slice(&v);
        residual = residual.max((&a * &col - col.scale(lam)).norm());
        lambdas.push(lam);
        eigvecs.push(v);
    }
    if !lambdas.windows(2).all(|p| p[0] < p[1]) {
        return Err(Error::EigenSolver("eigenvalues are not simple".into()));
    }
    let mut gram_error: f64 = 0.0;
    for i in 0..n_max {
        for j in 0..=i {
            let g: f64 = eigvecs[i].iter().zip(&eigvecs[j]).map(|(x, y)| x * y).sum();
            gram_error = gram_error.max((g - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    Ok(SLBasis { lambdas, eigvecs, potential: w.clone(), avg_w: w.coeff(0), n_basis, residual, gram_error })
}

/// `max_n |lambda_n(N) - lambda_n(2N)|`.
pub fn refinement_gap(w: &CosineSeries, n_max: usize, n_basis: usize) -> Result<f64> {
    let a = dirichlet_eig(w, n_max, n_basis)?;
    let b = dirichlet_eig(w, n_max, 2 * n_basis)?;
    Ok(a.lambdas.iter().zip(&b.lambdas).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

impl SLBasis {
    pub fn n_max(&self) -> usize {
        self.lambdas.len()
    }

    /// `|f_n^(k)|` for the odd extension normalized in `L^2(T)`.
    pub fn fourier_abs(&self, n: usize, k: i64) -> f64 {
        let m = k.unsigned_abs() as usize;
        if m == 0 || m > self.n_basis {
            return 0.0;
        }
        self.eigvecs[n - 1][m - 1].abs() / 2f64.sqrt()
    }

    /// `f_n` at the points `x`.
    pub fn eval(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let c = &self.eigvecs[n - 1];
        let s = (2.0 / PI).sqrt();
        x.iter()
            .map(|&x| s * c.iter().enumerate().map(|(m, a)| a * ((m + 1) as f64 * x).sin()).sum::<f64>())
            .collect()
    }
}

/// `max_n n |lambda_n - n^2 - avg W|`.
pub fn verify_ev_asymptotics(basis: &SLBasis) -> f64 {
    basis
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let n = (i + 1) as f64;
            n * (l - n * n - basis.avg_w).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub sigma: f64,
    /// Smallest `C` with `|f_n^(k)| <= C <|n|+|k|>^{-1} <|n|-|k|>^{-1-sigma}` over the computed pairs.
    pub fitted_c: f64,
    pub worst_n: usize,
    pub worst_k: i64,
    pub pairs: usize,
}

pub fn verify_ef_decay(basis: &SLBasis, sigma: f64) -> DecayReport {
    let mut rep = DecayReport { sigma, fitted_c: 0.0, worst_n: 0, worst_k: 0, pairs: 0 };
    for n in 1..=basis.n_max() {
        for m in 1..=basis.n_basis {
            if m == n {
                continue;
            }
            let (nf, mf) = (n as f64, m as f64);
            let weight = bracket(nf + mf).recip() * bracket(nf - mf).powf(-1.0 - sigma);
            // k = m and k = -m give the same modulus
            let c = basis.fourier_abs(n, m as i64) / weight;
            rep.pairs += 2;
            if c > rep.fitted_c {
                rep.fitted_c = c;
                rep.worst_n = n;
                rep.worst_k = m as i64;
            }
        }
    }
    rep
}

/// `omega_n = lambda_n` with integer part `n^2`.
pub fn freqs_mult(basis: &SLBasis) -> Result<FrequencySet> {
    let ms = ModeSet::dirichlet(basis.n_max() as u32);
    let int: Vec<i64> = (1..=basis.n_max() as i64).map(|n| n * n).collect();
    let frac = basis.lambdas.iter().zip(&int).map(|(l, i)| l - *i as f64).collect();
    FrequencySet::from_parts(&ms, int, frac)
}

/// Sextic interaction coefficients `Q = int_0^pi f_k1 f_k2 f_k3 f_l1 f_l2 f_l3` on modes `1..=window`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSextic {
    pub window: usize,
    /// One value per sorted 6-multiset of modes.
    pub entries: Vec<([u8; 6], f64)>,
    /// Smallest `C` with `|Q| <= C sum_{signs} <signed sum>^{-2}`.
    pub fitted_c: f64,
}

/// Largest window accepted by [`p6_eigen_coeffs`].
pub const MAX_EIGEN_WINDOW: usize = 12;

pub fn p6_eigen_coeffs(basis: &SLBasis, window: usize) -> Result<EigenSextic> {
    if window == 0 || window > MAX_EIGEN_WINDOW || window > basis.n_max() {
        return Err(Error::BudgetExceeded(format!(
            "eigenbasis window {window} must lie in 1..={}",
            MAX_EIGEN_WINDOW.min(basis.n_max())
        )));
    }
    // the product of six functions has sine content up to 6 N; a grid of 6N + 1 points on the
    // torus integrates it exactly, and the even product gives half the torus integral
    let g = 6 * basis.n_basis + 1;
    let xs: Vec<f64> = (0..g).map(|j| 2.0 * PI * j as f64 / g as f64).collect();
    let vals: Vec<Vec<f64>> = (1..=window).into_par_iter().map(|n| basis.eval(n, &xs)).collect();
    let h = PI / g as f64;
    let mut sets = Vec::new();
    for_each_multiset(window, 6, |m| sets.push([m[0], m[1], m[2], m[3], m[4], m[5]]));
    let entries: Vec<([u8; 6], f64)> = sets
        .into_par_iter()
        .map(|s| {
            let q: f64 = (0..g).map(|j| s.iter().map(|&i| vals[i as usize][j]).product::<f64>()).sum::<f64>() * h;
            (s, q)
        })
        .collect();
    let fitted_c = entries
        .iter()
        .map(|(s, q)| q.abs() / momentum_weight(s))
        .fold(0.0, f64::max);
    Ok(EigenSextic { window, entries, fitted_c })
}

/// `sum_{nu in {-1,1}^6} <nu . (s + 1)>^{-2}`.
fn momentum_weight(s: &[u8; 6]) -> f64 {
    (0u32..64)
        .map(|mask| {
            let t: i64 = s
                .iter()
                .enumerate()
                .map(|(b, &i)| if mask >> b & 1 == 1 { -(i as i64 + 1) } else { i as i64 + 1 })
                .sum();
            bracket(t as f64).powi(-2)
        })
        .sum()
}

impl EigenSextic {
    pub fn value(&self, modes: &[usize; 6]) -> f64 {
        let mut s = modes.map(|m| (m - 1) as u8);
        s.sort_unstable();
        self.entries.binary_search_by(|e| e.0.cmp(&s)).map_or(0.0, |i| self.entries[i].1)
    }

    /// `scale * sum Q_{k,l} u_k1 u_k2 u_k3 conj(u_l1 u_l2 u_l3)` on the Dirichlet window.
    pub fn to_hompoly(&self, scale: f64) -> Result<HomPoly> {
        let ms = ModeSet::dirichlet(self.window as u32);
        let mut items = Vec::new();
        for_each_multiset(self.window, 3, |k| {
            for_each_multiset(self.window, 3, |l| {
                let mut s = [k[0], k[1], k[2], l[0], l[1], l[2]];
                s.sort_unstable();
                if let Ok(i) = self.entries.binary_search_by(|e| e.0.cmp(&s)) {
                    let v = self.entries[i].1 * scale;
                    if v != 0.0 {
                        items.push((MonomialKey::new(k, l).expect("sorted key"), Complex64::new(v, 0.0)));
                    }
                }
            });
        });
        HomPoly::from_terms(&ms, 3, items)
    }
}

/// Ratio range of `||sum v_k f_k||_{H^s}^2 / sum <k>^{2s} |v_k|^2` over random `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevCheck {
    pub s: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `max(max_ratio, 1 / min_ratio)`.
    pub constant: f64,
}

pub fn sobolev_equivalence(basis: &SLBasis, s: f64, samples: usize, seed: u64) -> SobolevCheck {
    let n = basis.n_max();
    let ratios: Vec<f64> = (0..samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            // decaying random coefficients keep both sides dominated by resolved modes
            let v: Vec<f64> = (1..=n).map(|k| rng.sample::<f64, _>(StandardNormal) / k as f64).collect();
            let mut coef = vec![0.0; basis.n_basis];
            for (k, vk) in v.iter().enumerate() {
                for (c, e) in coef.iter_mut().zip(&basis.eigvecs[k]) {
                    *c += vk * e;
                }
            }
            let lhs: f64 = coef.iter().enumerate().map(|(m, c)| bracket((m + 1) as f64).powf(2.0 * s) * c * c).sum();
            let rhs: f64 = v.iter().enumerate().map(|(k, c)| bracket((k + 1) as f64).powf(2.0 * s) * c * c).sum();
            lhs / rhs
        })
        .collect();
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    SobolevCheck { s, min_ratio, max_ratio, constant: max_ratio.max(1.0 / min_ratio) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resonance::sample_mult_potential;

    #[test]
    fn free_and_constant_potentials() {
        let b = dirichlet_eig(&CosineSeries::new(0.0, vec![]), 10, 40).unwrap();
        for (i, l) in b.lambdas.iter().enumerate() {
            assert!((l - ((i + 1) * (i + 1)) as f64).abs() < 1e-10);
            assert!((b.eigvecs[i][i] - 1.0).abs() < 1e-12);
        }
        assert_eq!(verify_ev_asymptotics(&b), 0.0);
        let rep = verify_ef_decay(&b, 1.0);
        assert!(rep.fitted_c < 1e-12);
        let c = dirichlet_eig(&CosineSeries::new(0.7, vec![]), 10, 40).unwrap();
        for (i, l) in c.lambdas.iter().enumerate() {
            assert!((l - ((i + 1) * (i + 1)) as f64 - 0.7).abs() < 1e-10);
        }
        assert!(verify_ev_asymptotics(&c) < 1e-9);
        let om = freqs_mult(&c).unwrap();
        assert!(om.omega_frac().iter().all(|f| (f - 0.7).abs() < 1e-10));
    }

    #[test]
    fn random_potential_converges_under_refinement() {
        let w = sample_mult_potential(2.0, 64, 3).unwrap();
        let gap = refinement_gap(&w, 50, 200).unwrap();
        assert!(gap < 1e-8, "gap {gap}");
        let b = dirichlet_eig(&w, 50, 200).unwrap();
        assert!(b.gram_error < 1e-10);
        assert!(b.residual < 1e-9);
        // variational: more basis functions never raise an eigenvalue
        let small = dirichlet_eig(&w, 10, 40).unwrap();
        let big = dirichlet_eig(&w, 10, 80).unwrap();
        assert!(small.lambdas.iter().zip(&big.lambdas).all(|(a, b)| *b <= a + 1e-12));
    }

    #[test]
    fn first_order_perturbation_pattern() {
        let w = CosineSeries::new(0.0, vec![0.05]);
        let b = dirichlet_eig(&w, 20, 80).unwrap();
        for n in 5..=15 {
            for m in [n - 1, n + 1] {
                let pred = 0.025 / (b.lambdas[n - 1] - (m * m) as f64);
                let got = b.eigvecs[n - 1][m - 1];
                assert!((got / pred - 1.0).abs() < 0.05, "n={n} m={m} got={got} pred={pred}");
            }
        }
        assert!(verify_ef_decay(&b, 1.0).fitted_c.is_finite());
    }

    #[test]
    fn samples_round_trip_and_reject_odd() {
        let w = CosineSeries::new(0.3, vec![0.5, -0.25, 0.125]);
        let xs: Vec<f64> = (0..16).map(|j| w.eval(2.0 * PI * j as f64 / 16.0)).collect();
        let back = cosine_series_from_samples(&xs).unwrap();
        assert!((back.mean - 0.3).abs() < 1e-14);
        for k in 1..=3 {
            assert!((back.coeff(k) - w.coeff(k)).abs() < 1e-14);
        }
        let odd: Vec<f64> = (0..16).map(|j| (2.0 * PI * j as f64 / 16.0).sin()).collect();
        assert!(cosine_series_from_samples(&odd).is_err());
    }

    #[test]
    fn free_sextic_coefficients() {
        let b = dirichlet_eig(&CosineSeries::new(0.0, vec![]), 6, 24).unwrap();
        let q = p6_eigen_coeffs(&b, 4).unwrap();
        let want = 5.0 / (2.0 * PI * PI);
        assert!((q.value(&[1, 1, 1, 1, 1, 1]) - want).abs() < 1e-13);
        for (s, v) in &q.entries {
            let any_zero = (0u32..64).any(|mask| {
                s.iter()
                    .enumerate()
                    .map(|(b, &i)| if mask >> b & 1 == 1 { -(i as i64 + 1) } else { i as i64 + 1 })
                    .sum::<i64>()
                    == 0
            });
            if !any_zero {
                assert!(v.abs() < 1e-14, "{s:?} -> {v}");
            }
        }
        let p = q.to_hompoly(1.0).unwrap();
        assert!(p.is_real());
        assert!(p6_eigen_coeffs(&b, 13).is_err());
    }

    #[test]
    fn sobolev_ratios_are_bounded() {
        let w = sample_mult_potential(2.0, 64, 5).unwrap();
        let b = dirichlet_eig(&w, 30, 120).unwrap();
        let s0 = sobolev_equivalence(&b, 0.0, 20, 1);
        assert!((s0.constant - 1.0).abs() < 1e-10);
        let s1 = sobolev_equivalence(&b, 1.0, 20, 1);
        assert!(s1.constant < 10.0);
    }
}
