//! Random potentials and finite-window certification of weak and strong non-resonance.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::poly::ModeSet;
use crate::spectral::{bracket, FrequencySet};

/// Standard normal draw attached to the integer `k` under `seed`.
///
/// Each `k` owns its own stream, so enlarging a window extends a sample without
/// changing the values already drawn.
pub fn gaussian(seed: u64, k: i64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k << 1) ^ (k >> 63)) as u64);
    rng.sample(StandardNormal)
}

/// `V_k = X_k <k>^{-s_star}` for every mode of `ms`.
pub fn sample_conv_potential(s_star: f64, ms: &ModeSet, seed: u64) -> Result<Vec<Complex64>> {
    if !(s_star > 0.0) {
        return Err(Error::InvalidInput(format!("s_star = {s_star} must be positive")));
    }
    Ok(ms
        .modes()
        .iter()
        .map(|&k| Complex64::new(gaussian(seed, k as i64) * bracket(k as f64).powf(-s_star), 0.0))
        .collect())
}

/// Even real potential `sum_{k=1}^K c_k cos(k x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSeries {
    /// `coeffs[k - 1]` multiplies `cos(k x)`.
    pub coeffs: Vec<f64>,
    /// Constant term.
    #[serde(default)]
    pub mean: f64,
}

impl CosineSeries {
    pub fn new(mean: f64, coeffs: Vec<f64>) -> Self {
        Self { coeffs, mean }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.mean + self.coeffs.iter().enumerate().map(|(i, c)| c * ((i + 1) as f64 * x).cos()).sum::<f64>()
    }

    /// Cosine coefficient of order `k`, zero beyond the stored range.
    pub fn coeff(&self, k: usize) -> f64 {
        match k {
            0 => self.mean,
            _ => self.coeffs.get(k - 1).copied().unwrap_or(0.0),
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// `(mean^2 + sum_k c_k^2 <k>^{2 sigma} / 2)^{1/2}`, the `H^sigma` norm over `2 pi`.
    pub fn sobolev_norm(&self, sigma: f64) -> f64 {
        let c0 = self.mean * self.mean;
        let rest: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| 0.5 * c * c * bracket((i + 1) as f64).powf(2.0 * sigma))
            .sum();
        (c0 + rest).sqrt()
    }
}

/// `W(x) = sum_{k=1}^K X_k <k>^{-s_star} cos(k x)`.
pub fn sample_mult_potential(s_star: f64, order: usize, seed: u64) -> Result<CosineSeries> {
    if !(s_star > 1.5) {
        return Err(Error::InvalidInput(format!("s_star = {s_star} must exceed 3/2")));
    }
    let coeffs = (1..=order).map(|k| gaussian(seed, k as i64) * bracket(k as f64).powf(-s_star)).collect();
    Ok(CosineSeries::new(0.0, coeffs))
}

/// Finite window of the certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NRBounds {
    pub q_max: usize,
    pub m1_max: u32,
    pub h_max: u32,
    pub a_max: u64,
}

impl NRBounds {
    pub fn validate(&self) -> Result<()> {
        if self.q_max == 0 || self.m1_max == 0 || self.h_max == 0 || self.a_max == 0 {
            return Err(Error::InvalidInput("all certification bounds must be at least 1".into()));
        }
        if self.q_max > self.m1_max as usize {
            return Err(Error::InvalidInput("q_max cannot exceed m1_max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NRKind {
    Weak,
    Strong,
}

/// One combination `a + sum m_j omega_{h_j}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub m: Vec<i64>,
    pub h: Vec<i32>,
    pub a: i64,
    pub divisor: f64,
    /// Divisor divided by the right-hand side weight.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NRCertificate {
    pub kind: NRKind,
    /// Fitted `gamma` (weak) or `rho` (strong).
    pub constant: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_star: Option<f64>,
    pub bounds: NRBounds,
    pub enumerated: u64,
    pub worst_case: Option<Combination>,
    pub violations: Vec<Combination>,
}

impl NRCertificate {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.constant > 0.0
    }
}

/// Sign-and-magnitude patterns `m` of length `q` with nonzero entries and `|m|_1 <= m1`.
fn m_vectors(q: usize, m1: u32, zero_sum: bool) -> Vec<Vec<i64>> {
    fn rec(q: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if cur.len() == q {
            out.push(cur.clone());
            return;
        }
        let slots_after = (q - cur.len() - 1) as i64;
        for a in 1..=(left - slots_after) {
            for s in [a, -a] {
                cur.push(s);
                rec(q, left - a, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    if q as u32 <= m1 {
        rec(q, m1 as i64, &mut Vec::with_capacity(q), &mut out);
    }
    if zero_sum {
        out.retain(|m| m.iter().sum::<i64>() == 0);
    }
    out.sort();
    out
}

fn binom(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Modes of the window `|h| <= h_max` that carry a frequency.
fn window_positions(omega: &FrequencySet, h_max: u32) -> Vec<(i32, f64)> {
    let ms = omega.mode_set();
    ms.modes()
        .iter()
        .zip(omega.omega())
        .filter(|(h, _)| h.unsigned_abs() <= h_max)
        .map(|(&h, &w)| (h, w))
        .collect()
}

fn for_each_subset(n: usize, q: usize, mut f: impl FnMut(&[usize])) {
    if q > n {
        return;
    }
    let mut idx: Vec<usize> = (0..q).collect();
    loop {
        f(&idx);
        let mut i = q;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - q {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..q {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Absolute size below which a combination counts as an exact zero.
fn zero_tol(m: &[i64], w: &[f64], a: i64) -> f64 {
    let scale: f64 = m.iter().zip(w).map(|(mi, wi)| (*mi as f64 * wi).abs()).sum::<f64>() + a.abs() as f64;
    64.0 * f64::EPSILON * scale.max(1.0)
}

/// `|a + sum m_j omega_{h_j}|` and the weak right-hand side weight.
pub fn weak_ratio(omega: &FrequencySet, s_star: f64, m: &[i64], h: &[i32], a: i64) -> Result<(f64, f64)> {
    let w = lookup(omega, h)?;
    let d = (a as f64 + m.iter().zip(&w).map(|(mi, wi)| *mi as f64 * wi).sum::<f64>()).abs();
    Ok((d, d / weak_weight(s_star, m, h)))
}

/// `|sum m_j omega_{h_j}|` and its ratio to `(2 min <h_j>)^{-exp(alpha |m|_1)}`.
pub fn strong_ratio(omega: &FrequencySet, alpha: f64, m: &[i64], h: &[i32]) -> Result<(f64, f64)> {
    let w = lookup(omega, h)?;
    let d = m.iter().zip(&w).map(|(mi, wi)| *mi as f64 * wi).sum::<f64>().abs();
    Ok((d, d / strong_weight(alpha, m, h)))
}

fn lookup(omega: &FrequencySet, h: &[i32]) -> Result<Vec<f64>> {
    h.iter()
        .map(|&k| {
            omega
                .mode_set()
                .position(k)
                .map(|p| omega.omega()[p])
                .ok_or_else(|| Error::ModeSetMismatch(format!("mode {k} has no frequency")))
        })
        .collect()
}

fn weak_weight(s_star: f64, m: &[i64], h: &[i32]) -> f64 {
    let min_h = h.iter().map(|&k| bracket(k as f64)).fold(f64::INFINITY, f64::min);
    let prod: f64 = m
        .iter()
        .zip(h)
        .map(|(mi, &hi)| (mi.unsigned_abs() as f64).powi(-4) * bracket(hi as f64).powi(-4))
        .product();
    min_h.powf(-s_star) * prod
}

fn strong_weight(alpha: f64, m: &[i64], h: &[i32]) -> f64 {
    let min_h = h.iter().map(|&k| bracket(k as f64)).fold(f64::INFINITY, f64::min);
    let m1: i64 = m.iter().map(|x| x.abs()).sum();
    (2.0 * min_h).powf(-(alpha * m1 as f64).exp())
}

#[derive(Default)]
struct Partial {
    worst: Option<Combination>,
    violations: Vec<Combination>,
}

impl Partial {
    fn offer(&mut self, c: Combination, zero: bool) {
        if zero {
            self.violations.push(c.clone());
        }
        if self.worst.as_ref().is_none_or(|w| c.ratio < w.ratio) {
            self.worst = Some(c);
        }
    }

    fn merge(mut self, other: Partial) -> Partial {
        self.violations.extend(other.violations);
        if let Some(o) = other.worst {
            if self.worst.as_ref().is_none_or(|w| o.ratio < w.ratio) {
                self.worst = Some(o);
            }
        }
        self
    }
}

fn certify(
    omega: &FrequencySet,
    b: &NRBounds,
    kind: NRKind,
    param: f64,
    budget: &Budget,
) -> Result<NRCertificate> {
    b.validate()?;
    let win = window_positions(omega, b.h_max);
    let zero_sum = kind == NRKind::Strong;
    let partitions: Vec<(usize, Vec<i64>)> = (1..=b.q_max)
        .flat_map(|q| m_vectors(q, b.m1_max, zero_sum).into_iter().map(move |m| (q, m)))
        .collect();
    let enumerated: u64 = partitions
        .iter()
        .map(|(q, _)| binom(win.len() as u64, *q as u64))
        .fold(0u64, |a, x| a.saturating_add(x));
    budget.check_enumeration(enumerated, "non-resonance enumeration")?;

    let parts: Vec<Partial> = partitions
        .par_iter()
        .map(|(q, m)| {
            let mut part = Partial::default();
            let mut w = vec![0.0; *q];
            let mut h = vec![0i32; *q];
            for_each_subset(win.len(), *q, |idx| {
                for (j, &i) in idx.iter().enumerate() {
                    h[j] = win[i].0;
                    w[j] = win[i].1;
                }
                let s: f64 = m.iter().zip(&w).map(|(mi, wi)| *mi as f64 * wi).sum();
                let (a, weight) = match kind {
                    NRKind::Weak => {
                        let a = (-s).round().clamp(-(b.a_max as f64), b.a_max as f64) as i64;
                        (a, weak_weight(param, m, &h))
                    }
                    NRKind::Strong => (0, strong_weight(param, m, &h)),
                };
                let d = (a as f64 + s).abs();
                let zero = d <= zero_tol(m, &w, a);
                part.offer(Combination { m: m.clone(), h: h.clone(), a, divisor: d, ratio: d / weight }, zero);
            });
            part
        })
        .collect();
    budget.check_time("non-resonance enumeration")?;
    let total = parts.into_iter().fold(Partial::default(), Partial::merge);
    let constant = if total.violations.is_empty() { total.worst.as_ref().map_or(f64::INFINITY, |w| w.ratio) } else { 0.0 };
    let (alpha, s_star) = match kind {
        NRKind::Weak => (None, Some(param)),
        NRKind::Strong => (Some(param), None),
    };
    Ok(NRCertificate {
        kind,
        constant,
        alpha,
        s_star,
        bounds: *b,
        enumerated,
        worst_case: total.worst,
        violations: total.violations,
    })
}

/// Largest `gamma` with `|a + sum m_j omega_{h_j}| >= gamma (min <h_j>)^{-s_star} prod |m_j|^{-4} <h_j>^{-4}`
/// over the window.
pub fn certify_weak(omega: &FrequencySet, b: &NRBounds, s_star: f64, budget: &Budget) -> Result<NRCertificate> {
    if !(s_star > 0.0) {
        return Err(Error::InvalidInput("s_star must be positive".into()));
    }
    certify(omega, b, NRKind::Weak, s_star, budget)
}

/// Largest `rho` with `|sum m_j omega_{h_j}| >= rho (2 min <h_j>)^{-exp(alpha |m|_1)}` over zero-sum `m`.
pub fn certify_strong(omega: &FrequencySet, b: &NRBounds, alpha: f64, budget: &Budget) -> Result<NRCertificate> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput("alpha must be positive".into()));
    }
    certify(omega, b, NRKind::Strong, alpha, budget)
}

/// Outcome of the bootstrap that discards the negligible tail of a combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QStarReport {
    pub q_star: usize,
    /// `(C |m|_1^{4 q_star / s_star} <h_1>)^{exp(4 q_star / s_star)}`.
    pub gronwall_bound: f64,
    /// `<h_p>` for `p <= q_star`, each compared with the bound.
    pub gronwall_holds: bool,
    /// `|sum_j m_j omega_{h_j}|`.
    pub full: f64,
    /// `|sum_{j > q_star} m_j h_j^2 + sum_{j <= q_star} m_j omega_{h_j}|`.
    pub reduced: f64,
    /// `full >= reduced / 2`; trivially true when `q_star = q`.
    pub reduction_holds: bool,
}

/// Maximal `q_star` such that the tail beyond every `p <= q_star` is not negligible.
pub fn qstar_reduce(
    omega: &FrequencySet,
    m: &[i64],
    h: &[i32],
    gamma: f64,
    b_const: f64,
    s_star: f64,
) -> Result<QStarReport> {
    if m.len() != h.len() || m.is_empty() {
        return Err(Error::InvalidInput("m and h must have the same nonzero length".into()));
    }
    if m.contains(&0) {
        return Err(Error::InvalidInput("m entries must be nonzero".into()));
    }
    if !h.windows(2).all(|p| bracket(p[0] as f64) <= bracket(p[1] as f64)) {
        return Err(Error::InvalidInput("h must be sorted by <h>".into()));
    }
    if !(gamma > 0.0 && s_star > 0.0) {
        return Err(Error::InvalidInput("gamma and s_star must be positive".into()));
    }
    let ms = omega.mode_set();
    let need = ms
        .modes()
        .iter()
        .zip(omega.omega())
        .map(|(&k, &w)| (w - (k as f64) * (k as f64)).abs() * bracket(k as f64).powf(s_star))
        .fold(0.0, f64::max);
    if !(b_const >= need) {
        return Err(Error::InvalidInput(format!("B = {b_const} is below sup |omega_k - k^2| <k>^s = {need}")));
    }
    let w = lookup(omega, h)?;
    let q = m.len();
    let br: Vec<f64> = h.iter().map(|&k| bracket(k as f64)).collect();
    let threshold = |p: usize| {
        // p is 1-based
        let lhs: f64 = (p - 1..q).map(|j| b_const * m[j].unsigned_abs() as f64 * br[j].powf(-s_star)).sum();
        let rhs = 0.5
            * gamma
            * br[0].powf(-s_star)
            * (0..p - 1).map(|j| (m[j].unsigned_abs() as f64).powi(-4) * br[j].powi(-4)).product::<f64>();
        lhs >= rhs
    };
    let mut q_star = 1;
    while q_star < q && threshold(q_star + 1) {
        q_star += 1;
    }
    let m1: f64 = m.iter().map(|x| x.unsigned_abs() as f64).sum();
    let c = (2.0 * b_const / gamma).powf(1.0 / s_star);
    let e = 4.0 * q_star as f64 / s_star;
    let gronwall_bound = (c * m1.powf(e) * br[0]).powf(e.exp());
    let gronwall_holds = br[..q_star].iter().all(|&b| b <= gronwall_bound);
    let full = m.iter().zip(&w).map(|(mi, wi)| *mi as f64 * wi).sum::<f64>().abs();
    let reduced = (0..q)
        .map(|j| {
            let v = if j < q_star { w[j] } else { (h[j] as f64) * (h[j] as f64) };
            m[j] as f64 * v
        })
        .sum::<f64>()
        .abs();
    Ok(QStarReport {
        q_star,
        gronwall_bound,
        gronwall_holds,
        full,
        reduced,
        reduction_holds: full >= 0.5 * reduced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::freqs_conv;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn bounds(q: usize, m1: u32, h: u32) -> NRBounds {
        NRBounds { q_max: q, m1_max: m1, h_max: h, a_max: 10_000 }
    }

    #[test]
    fn sampling_is_deterministic_and_extends() {
        let a = sample_conv_potential(1.0, &ModeSet::window(4), 7).unwrap();
        let b = sample_conv_potential(1.0, &ModeSet::window(4), 7).unwrap();
        assert_eq!(a, b);
        let c = sample_conv_potential(1.0, &ModeSet::window(6), 7).unwrap();
        assert_eq!(&c[2..11], &a[..]);
        let d = sample_conv_potential(1.0, &ModeSet::window(4), 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn rescaled_samples_look_gaussian() {
        let ms = ModeSet::window(100);
        let mut xs: Vec<f64> = (0..50u64)
            .flat_map(|seed| {
                let v = sample_conv_potential(1.3, &ms, seed).unwrap();
                ms.modes()
                    .iter()
                    .zip(v)
                    .map(|(&k, z)| z.re * bracket(k as f64).powf(1.3))
                    .collect::<Vec<_>>()
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let nd = Normal::new(0.0, 1.0).unwrap();
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = nd.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / n.sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn conv_frequency_remainder_bound() {
        let ms = ModeSet::window(5);
        let v = sample_conv_potential(1.0, &ms, 3).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let vmax = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(om.frac_sup() <= (2.0 * std::f64::consts::PI).sqrt() * vmax * (1.0 + 1e-15));
    }

    #[test]
    fn mult_potential_is_even_and_mean_zero() {
        let w = sample_mult_potential(2.0, 16, 5).unwrap();
        for x in [0.1, 0.7, 2.3] {
            assert_eq!(w.eval(-x), w.eval(x));
        }
        assert_eq!(w.coeff(0), 0.0);
        assert_eq!(w, sample_mult_potential(2.0, 16, 5).unwrap());
        assert!(sample_mult_potential(1.5, 16, 5).is_err());
    }

    #[test]
    fn free_frequencies_fail_both_certificates() {
        let ms = ModeSet::window(8);
        let om = FrequencySet::free(&ms).unwrap();
        let strong = certify_strong(&om, &bounds(3, 4, 8), 1.0, &Budget::unlimited()).unwrap();
        assert_eq!(strong.constant, 0.0);
        assert!(strong.violations.iter().any(|c| c.h == vec![1, 5, 7] && c.m == vec![-1, 2, -1]));
        let weak = certify_weak(&om, &bounds(3, 4, 8), 1.0, &Budget::unlimited()).unwrap();
        assert_eq!(weak.constant, 0.0);
        assert!(!weak.passed());
    }

    #[test]
    fn weak_q1_matches_distance_to_integers() {
        let ms = ModeSet::window(6);
        let v = sample_conv_potential(1.0, &ms, 11).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let b = bounds(1, 3, 6);
        let cert = certify_weak(&om, &b, 1.0, &Budget::unlimited()).unwrap();
        let mut best = f64::INFINITY;
        for (&h, &w) in ms.modes().iter().zip(om.omega()) {
            for m in [-3i64, -2, -1, 1, 2, 3] {
                let x = m as f64 * w;
                let dist = (x - x.round()).abs();
                let weight = bracket(h as f64).powf(-1.0) * (m.abs() as f64).powi(-4) * bracket(h as f64).powi(-4);
                best = best.min(dist / weight);
            }
        }
        assert!((cert.constant - best).abs() <= 1e-12 * best);
    }

    #[test]
    fn certificate_worst_case_reproduces_constant() {
        let ms = ModeSet::window(10);
        let v = sample_conv_potential(1.0, &ms, 2).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let cert = certify_strong(&om, &bounds(3, 4, 10), 0.5, &Budget::unlimited()).unwrap();
        assert!(cert.passed());
        let wc = cert.worst_case.as_ref().unwrap();
        let (_, ratio) = strong_ratio(&om, 0.5, &wc.m, &wc.h).unwrap();
        assert!((ratio - cert.constant).abs() <= 1e-14 * cert.constant);
        let weak = certify_weak(&om, &bounds(2, 3, 10), 1.0, &Budget::unlimited()).unwrap();
        let wc = weak.worst_case.as_ref().unwrap();
        let (_, ratio) = weak_ratio(&om, 1.0, &wc.m, &wc.h, wc.a).unwrap();
        assert!((ratio - weak.constant).abs() <= 1e-14 * weak.constant);
    }

    #[test]
    fn larger_alpha_never_lowers_rho() {
        let ms = ModeSet::window(10);
        let v = sample_conv_potential(1.0, &ms, 4).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let b = bounds(3, 4, 10);
        let r1 = certify_strong(&om, &b, 0.3, &Budget::unlimited()).unwrap().constant;
        let r2 = certify_strong(&om, &b, 0.6, &Budget::unlimited()).unwrap().constant;
        assert!(r2 >= r1);
    }

    #[test]
    fn constant_shift_leaves_strong_divisors() {
        let ms = ModeSet::window(6);
        let v = sample_conv_potential(1.0, &ms, 9).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let shifted = FrequencySet::from_parts(
            &ms,
            om.omega_int().to_vec(),
            om.omega_frac().iter().map(|x| x + 0.375).collect(),
        )
        .unwrap();
        let b = bounds(3, 4, 6);
        let c1 = certify_strong(&om, &b, 0.5, &Budget::unlimited()).unwrap();
        let c2 = certify_strong(&shifted, &b, 0.5, &Budget::unlimited()).unwrap();
        assert_eq!(c1.worst_case.as_ref().unwrap().h, c2.worst_case.as_ref().unwrap().h);
        assert!((c1.constant - c2.constant).abs() <= 1e-9 * c1.constant);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let ms = ModeSet::window(20);
        let om = FrequencySet::free(&ms).unwrap();
        let err = certify_strong(&om, &bounds(3, 4, 20), 1.0, &Budget::new(usize::MAX, 100, None));
        assert!(matches!(err, Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn m_vector_enumeration() {
        assert_eq!(m_vectors(1, 2, false), vec![vec![-2], vec![-1], vec![1], vec![2]]);
        let z = m_vectors(3, 4, true);
        assert!(z.contains(&vec![2, -1, -1]));
        assert!(z.iter().all(|m| m.iter().sum::<i64>() == 0 && m.iter().map(|x| x.abs()).sum::<i64>() <= 4));
        let mut n = 0;
        for_each_subset(5, 3, |_| n += 1);
        assert_eq!(n, 10);
    }

    #[test]
    fn qstar_cases() {
        let ms = ModeSet::window(60);
        let v = sample_conv_potential(2.0, &ms, 1).unwrap();
        let om = freqs_conv(&v, &ms).unwrap();
        let b = ms
            .modes()
            .iter()
            .zip(om.omega_frac())
            .map(|(&k, f)| f.abs() * bracket(k as f64).powi(2))
            .fold(0.0, f64::max);
        let one = qstar_reduce(&om, &[3], &[2], 0.1, b, 2.0).unwrap();
        assert_eq!(one.q_star, 1);
        // comparable modes, tiny gamma: nothing is negligible
        let all = qstar_reduce(&om, &[1, 1, -2], &[1, 2, -2], 1e-12, b, 2.0).unwrap();
        assert_eq!(all.q_star, 3);
        // a far mode with a small remainder is discarded and the reduction holds
        let tail = qstar_reduce(&om, &[1, -1, 1], &[1, 2, 60], 1.0, b, 2.0).unwrap();
        assert!(tail.q_star < 3);
        assert!(tail.reduction_holds);
        assert!(tail.gronwall_holds);
        assert!(qstar_reduce(&om, &[1], &[1], 0.1, 0.5 * b, 2.0).is_err());
    }
}
