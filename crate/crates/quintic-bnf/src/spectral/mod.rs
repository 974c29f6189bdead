//! Frequencies, small divisors, spectral projectors and norm enclosures.

mod ascent;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{build_p6, multinomial, HomPoly, ModeSet, MonomialKey, State, MAX_HALF_DEGREE};

pub(crate) use ascent::PosPoly;

/// Japanese bracket `sqrt(1 + x^2)`.
pub fn bracket(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}

/// Frequencies split as integer part plus bounded remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySet {
    modes: ModeSet,
    omega: Vec<f64>,
    omega_int: Vec<i64>,
    omega_frac: Vec<f64>,
    int_sup: i64,
    frac_sup: f64,
}

impl FrequencySet {
    pub fn from_parts(ms: &ModeSet, omega_int: Vec<i64>, omega_frac: Vec<f64>) -> Result<Self> {
        if omega_int.len() != ms.len() || omega_frac.len() != ms.len() {
            return Err(Error::ModeSetMismatch("frequency vector length differs from mode set".into()));
        }
        if omega_int.iter().all(|&w| w == 0) {
            return Err(Error::InvalidInput("integer part of the frequencies must be nonzero".into()));
        }
        if omega_frac.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite frequency".into()));
        }
        let omega = omega_int.iter().zip(&omega_frac).map(|(&i, &f)| i as f64 + f).collect();
        let int_sup = omega_int.iter().map(|w| w.abs()).max().unwrap_or(0);
        let frac_sup = omega_frac.iter().map(|w| w.abs()).fold(0.0, f64::max);
        Ok(Self { modes: ms.clone(), omega, omega_int, omega_frac, int_sup, frac_sup })
    }

    /// Free frequencies `k^2`.
    pub fn free(ms: &ModeSet) -> Result<Self> {
        let int = ms.modes().iter().map(|&k| (k as i64) * (k as i64)).collect();
        Self::from_parts(ms, int, vec![0.0; ms.len()])
    }

    pub fn mode_set(&self) -> &ModeSet {
        &self.modes
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn omega_int(&self) -> &[i64] {
        &self.omega_int
    }

    pub fn omega_frac(&self) -> &[f64] {
        &self.omega_frac
    }

    /// `|omega_int|_inf`.
    pub fn int_sup(&self) -> i64 {
        self.int_sup
    }

    /// `|omega_frac|_inf`.
    pub fn frac_sup(&self) -> f64 {
        self.frac_sup
    }
}

/// `omega_k = k^2 + sqrt(2 pi) V_k` with integer part `k^2`.
pub fn freqs_conv(v: &[Complex64], ms: &ModeSet) -> Result<FrequencySet> {
    if v.len() != ms.len() {
        return Err(Error::ModeSetMismatch("potential length differs from mode set".into()));
    }
    if let Some(z) = v.iter().find(|z| z.im != 0.0) {
        return Err(Error::InvalidInput(format!("potential coefficient {z} is not real")));
    }
    let int = ms.modes().iter().map(|&k| (k as i64) * (k as i64)).collect();
    let frac = v.iter().map(|z| (2.0 * PI).sqrt() * z.re).collect();
    FrequencySet::from_parts(ms, int, frac)
}

/// `Omega(k, l) = sum omega_k - sum omega_l`, with shared entries cancelled first.
pub fn small_divisor(omega: &[f64], key: &MonomialKey) -> f64 {
    let (k, l) = (key.k(), key.l());
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < k.len() || j < l.len() {
        if j >= l.len() || (i < k.len() && k[i] < l[j]) {
            acc += omega[k[i] as usize];
            i += 1;
        } else if i >= k.len() || l[j] < k[i] {
            acc -= omega[l[j] as usize];
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    acc
}

/// Integer small divisor.
pub fn int_divisor(omega_int: &[i64], key: &MonomialKey) -> i64 {
    key.k().iter().map(|&p| omega_int[p as usize]).sum::<i64>()
        - key.l().iter().map(|&p| omega_int[p as usize]).sum::<i64>()
}

/// Keeps the keys whose integer divisor equals `a`.
pub fn project(p: &HomPoly, omega_int: &[i64], a: i64) -> HomPoly {
    p.filter(|t| int_divisor(omega_int, &t.key) == a)
}

/// Splits `p` into its spectral levels.
pub fn levels(p: &HomPoly, omega_int: &[i64]) -> BTreeMap<i64, HomPoly> {
    let mut groups: BTreeMap<i64, Vec<crate::poly::Term>> = BTreeMap::new();
    for t in p.terms() {
        groups.entry(int_divisor(omega_int, &t.key)).or_default().push(*t);
    }
    groups
        .into_iter()
        .map(|(a, terms)| (a, HomPoly::from_sorted_terms(p.mode_set(), p.half_degree(), terms)))
        .collect()
}

/// Lower value achieved at `witness`, rigorous upper bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEnclosure {
    pub lower: f64,
    pub upper: f64,
    pub witness: State,
    /// Spectral level realizing `lower`, for level-wise norms.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level: Option<i64>,
}

/// Controls for the multistart ascent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupNormOptions {
    pub starts: usize,
    pub steps: usize,
    pub seed: u64,
    /// Above this many term-steps a level-wise norm screens levels before refining.
    pub work_budget: f64,
}

impl Default for SupNormOptions {
    fn default() -> Self {
        Self { starts: 64, steps: 500, seed: 0x5eed, work_budget: 4e8 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct XKey {
    q: u8,
    idx: [u8; MAX_HALF_DEGREE],
}

impl XKey {
    fn new(s: &[u8]) -> Self {
        let mut idx = [0u8; MAX_HALF_DEGREE];
        idx[..s.len()].copy_from_slice(s);
        Self { q: s.len() as u8, idx }
    }
}

/// Rigorous bound on `sup_{|u| = 1} |P(u)|`.
///
/// Each monomial is bounded by `(x^k + x^l)/2` with `x = |u|^2` on the simplex, and the
/// resulting polynomial by its largest Bernstein coefficient. Never exceeds the l1 bound.
pub fn sup_upper(p: &HomPoly) -> f64 {
    let mut g: FxHashMap<XKey, f64> = FxHashMap::default();
    for t in p.terms() {
        let a = t.coeff.norm() * t.class_size;
        if t.key.is_diagonal() {
            *g.entry(XKey::new(t.key.k())).or_default() += a;
        } else {
            *g.entry(XKey::new(t.key.k())).or_default() += 0.5 * a;
            *g.entry(XKey::new(t.key.l())).or_default() += 0.5 * a;
        }
    }
    g.iter()
        .map(|(x, v)| v / multinomial(&x.idx[..x.q as usize]))
        .fold(0.0, f64::max)
}

fn pos_enclosure(m: &HomPoly, starts: usize, steps: usize, seed: u64, extra: &[Vec<f64>]) -> NormEnclosure {
    let pp = PosPoly::from_modulus(m);
    let (v, u) = ascent::maximize_pos(&pp, starts, steps, seed, extra);
    let upper = sup_upper(m);
    NormEnclosure { lower: v.min(upper), upper, witness: State::from_real(&u), level: None }
}

fn has_nonneg_coeffs(p: &HomPoly) -> bool {
    p.terms().iter().all(|t| t.coeff.im == 0.0 && t.coeff.re >= 0.0)
}

/// Enclosure of `sup_{|u| <= 1} |P(u)|`.
pub fn sup_norm(p: &HomPoly, opts: &SupNormOptions) -> NormEnclosure {
    if has_nonneg_coeffs(p) {
        return pos_enclosure(p, opts.starts, opts.steps, opts.seed, &[]);
    }
    let (v, u) = ascent::maximize_abs(p, opts.starts, opts.steps, opts.seed);
    let upper = sup_upper(p);
    NormEnclosure { lower: v.min(upper), upper, witness: State(u), level: None }
}

fn level_norm(p: &HomPoly, omega_int: &[i64], opts: &SupNormOptions, weighted: bool) -> NormEnclosure {
    let n = p.mode_set().len();
    if p.is_empty() {
        let mut w = State::zeros(n);
        w[0] = Complex64::new(1.0, 0.0);
        return NormEnclosure { lower: 0.0, upper: 0.0, witness: w, level: None };
    }
    let weight = |a: i64| if weighted { bracket(a as f64) } else { 1.0 };
    let lv: Vec<(i64, HomPoly)> = levels(p, omega_int).into_iter().map(|(a, q)| (a, q.modulus())).collect();
    let upper = lv.iter().map(|(a, q)| weight(*a) * sup_upper(q)).fold(0.0, f64::max);
    let seed_for = |a: i64| opts.seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);

    let work = p.len() as f64 * opts.starts as f64 * opts.steps as f64;
    let results: Vec<NormEnclosure> = if work <= opts.work_budget {
        lv.par_iter()
            .map(|(a, q)| {
                let mut e = pos_enclosure(q, opts.starts, opts.steps, seed_for(*a), &[]);
                e.lower *= weight(*a);
                e.level = Some(*a);
                e
            })
            .collect()
    } else {
        // Screen every level cheaply, then refine the most promising ones.
        let screen_starts = 4.min(opts.starts);
        let screen_steps = 60.min(opts.steps);
        let mut screened: Vec<(f64, usize, NormEnclosure)> = lv
            .par_iter()
            .enumerate()
            .map(|(i, (a, q))| {
                let mut e = pos_enclosure(q, screen_starts, screen_steps, seed_for(*a), &[]);
                e.lower *= weight(*a);
                e.level = Some(*a);
                (e.lower, i, e)
            })
            .collect();
        screened.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let refine: Vec<(usize, Vec<f64>)> = screened
            .iter()
            .take(8)
            .map(|(_, i, e)| (*i, e.witness.iter().map(|z| z.re).collect()))
            .collect();
        let mut out: Vec<NormEnclosure> = screened.into_iter().map(|(_, _, e)| e).collect();
        let refined: Vec<NormEnclosure> = refine
            .par_iter()
            .map(|(i, w)| {
                let (a, q) = &lv[*i];
                let mut e = pos_enclosure(q, opts.starts, opts.steps, seed_for(*a), std::slice::from_ref(w));
                e.lower *= weight(*a);
                e.level = Some(*a);
                e
            })
            .collect();
        out.extend(refined);
        out
    };
    let mut best = results[0].clone();
    for e in results.into_iter().skip(1) {
        if e.lower > best.lower || (e.lower == best.lower && e.level < best.level) {
            best = e;
        }
    }
    NormEnclosure { lower: best.lower.min(upper), upper, witness: best.witness, level: best.level }
}

/// `sup_a || modulus(project(P, a)) ||_inf`.
pub fn norm_h(p: &HomPoly, omega_int: &[i64], opts: &SupNormOptions) -> NormEnclosure {
    level_norm(p, omega_int, opts, false)
}

/// `sup_a <a> || modulus(project(P, a)) ||_inf`.
pub fn norm_c(p: &HomPoly, omega_int: &[i64], opts: &SupNormOptions) -> NormEnclosure {
    level_norm(p, omega_int, opts, true)
}

/// Upper bound of the level-wise norm without the ascent.
pub fn norm_h_upper(p: &HomPoly, omega_int: &[i64]) -> f64 {
    levels(p, omega_int).values().map(sup_upper).fold(0.0, f64::max)
}

pub fn norm_c_upper(p: &HomPoly, omega_int: &[i64]) -> f64 {
    levels(p, omega_int)
        .iter()
        .map(|(a, q)| bracket(*a as f64) * sup_upper(q))
        .fold(0.0, f64::max)
}

/// Compares the level-`a` sextic sum at `|u|` with its space-time integral form.
///
/// Returns `(direct, quadrature)`. The quadrature averages `e^{i tau a} ||v_tau||_6^6` over
/// `n_tau` equispaced times, where `v_tau = sum |u_k| e^{i(kx - tau k^2)}`.
pub fn strichartz_identity_check(
    ms: &ModeSet,
    a: i64,
    u: &State,
    c6: f64,
    n_tau: Option<usize>,
) -> Result<(f64, f64)> {
    if !ms.is_symmetric() {
        return Err(Error::InvalidModeSet("identity check needs a symmetric window".into()));
    }
    if u.len() != ms.len() {
        return Err(Error::ModeSetMismatch("state length differs from mode set".into()));
    }
    let m = ms.m_param() as i64;
    let required = (a.unsigned_abs() as usize) + 3 * (m * m) as usize + 1;
    let n_tau = n_tau.unwrap_or_else(|| required.max(12 * (m * m) as usize + 8));
    if n_tau < required {
        return Err(Error::InsufficientNodes { given: n_tau, required });
    }
    let omega_int: Vec<i64> = ms.modes().iter().map(|&k| (k as i64) * (k as i64)).collect();
    let absu = u.abs();
    let p6 = build_p6(ms, 1.0, c6);
    let direct = project(&p6, &omega_int, a).modulus().eval(&absu)?.re;

    let nx = 6 * m as usize + 1;
    let amp: Vec<f64> = absu.iter().map(|z| z.re).collect();
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..n_tau {
        let tau = 2.0 * PI * j as f64 / n_tau as f64;
        let mut l6 = 0.0;
        for i in 0..nx {
            let x = 2.0 * PI * i as f64 / nx as f64;
            let mut v = Complex64::new(0.0, 0.0);
            for (p, &k) in ms.modes().iter().enumerate() {
                let k = k as f64;
                v += Complex64::from_polar(amp[p], k * x - tau * k * k);
            }
            l6 += v.norm_sqr().powi(3);
        }
        l6 /= nx as f64;
        acc += Complex64::from_polar(l6, tau * a as f64);
    }
    let quadrature = c6 / 6.0 * acc.re / n_tau as f64;
    Ok((direct, quadrature))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn key(ms: &ModeSet, k: &[i32], l: &[i32]) -> MonomialKey {
        MonomialKey::from_modes(ms, k, l).unwrap()
    }

    fn opts() -> SupNormOptions {
        SupNormOptions::default()
    }

    #[test]
    fn conv_frequencies() {
        let ms = ModeSet::window(2);
        let mut v = vec![c(0.0, 0.0); 5];
        v[3] = c(1.0, 0.0);
        let om = freqs_conv(&v, &ms).unwrap();
        assert!((om.omega()[3] - (1.0 + (2.0 * PI).sqrt())).abs() < 1e-15);
        assert_eq!(om.omega()[0], 4.0);
        assert!((om.frac_sup() - (2.0 * PI).sqrt()).abs() < 1e-15);
        v[1] = c(0.0, 1e-3);
        assert!(freqs_conv(&v, &ms).is_err());
    }

    #[test]
    fn divisor_examples() {
        let ms = ModeSet::window(7);
        let om = FrequencySet::free(&ms).unwrap();
        assert_eq!(small_divisor(om.omega(), &key(&ms, &[1], &[1])), 0.0);
        assert_eq!(small_divisor(om.omega(), &key(&ms, &[0, 1, 2], &[-1, 1, 3])), -6.0);
        assert_eq!(small_divisor(om.omega(), &key(&ms, &[1, 7], &[5, 5])), 0.0);
        assert_eq!(int_divisor(om.omega_int(), &key(&ms, &[0, 1, 2], &[-1, 1, 3])), -6);
    }

    #[test]
    fn projection_levels() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let p6 = build_p6(&ms, 1.0, 1.0);
        let k = key(&ms, &[1, 1, -1], &[0, 0, 1]);
        assert_eq!(int_divisor(om.omega_int(), &k), 2);
        assert_ne!(project(&p6, om.omega_int(), 2).coeff(&k), c(0.0, 0.0));
        assert!(project(&p6, om.omega_int(), 7).is_empty());
        let lv = levels(&p6, om.omega_int());
        let mut sum = HomPoly::zero(&ms, 3);
        for q in lv.values() {
            sum = sum.add(q).unwrap();
        }
        assert_eq!(sum, p6);
        assert_eq!(lv.keys().copied().collect::<Vec<_>>(), vec![-2, 0, 2]);
    }

    #[test]
    fn sup_norm_of_single_action() {
        let ms = ModeSet::new(vec![1, 2], 2).unwrap();
        let p = HomPoly::from_terms(&ms, 1, [(key(&ms, &[1], &[1]), c(1.0, 0.0))]).unwrap();
        let e = sup_norm(&p, &opts());
        assert!((e.lower - 1.0).abs() < 1e-10 && (e.upper - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sup_norm_of_mixed_actions() {
        // |u1|^2 |u2|^4 peaks at x = 1/3 with value 4/27.
        let ms = ModeSet::new(vec![1, 2], 2).unwrap();
        let p = HomPoly::from_terms(&ms, 3, [(key(&ms, &[1, 2, 2], &[1, 2, 2]), c(1.0 / 9.0, 0.0))]).unwrap();
        let e = sup_norm(&p, &opts());
        assert!((e.lower - 4.0 / 27.0).abs() < 1e-10, "{}", e.lower);
        assert!(e.upper >= 4.0 / 27.0 - 1e-15);
        let at = p.eval(&e.witness).unwrap().re;
        assert!(at >= e.lower - 1e-12);
    }

    #[test]
    fn sup_norm_of_cross_term() {
        let ms = ModeSet::new(vec![1, 2], 2).unwrap();
        let p = HomPoly::from_terms(
            &ms,
            1,
            [(key(&ms, &[1], &[2]), c(1.0, 0.0)), (key(&ms, &[2], &[1]), c(1.0, 0.0))],
        )
        .unwrap();
        let e = sup_norm(&p, &opts());
        assert!((e.lower - 1.0).abs() < 1e-10);
        assert!((e.upper - 1.0).abs() < 1e-12);
        // signed version goes through the complex ascent
        let s = p.scale(c(0.0, 1.0));
        let e = sup_norm(&s, &opts());
        assert!((e.lower - 1.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_norm_h_is_sup_norm() {
        let ms = ModeSet::new(vec![1, 2, 3], 3).unwrap();
        let om = FrequencySet::free(&ms).unwrap();
        let p = HomPoly::from_terms(
            &ms,
            2,
            [
                (key(&ms, &[1, 2], &[1, 2]), c(0.5, 0.0)),
                (key(&ms, &[3, 3], &[3, 3]), c(-2.0, 0.0)),
            ],
        )
        .unwrap();
        let h = norm_h(&p, om.omega_int(), &opts());
        let s = sup_norm(&p.modulus(), &opts());
        assert!((h.lower - s.lower).abs() < 1e-12 && (h.upper - s.upper).abs() < 1e-12);
        assert_eq!(h.level, Some(0));
    }

    #[test]
    fn norm_c_matches_level_enumeration() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let p6 = build_p6(&ms, 1.0, 1.0);
        let e = norm_c(&p6, om.omega_int(), &opts());
        let mut best = 0.0f64;
        for a in -8..=8 {
            let lvl = project(&p6, om.omega_int(), a).modulus();
            if !lvl.is_empty() {
                best = best.max(bracket(a as f64) * sup_norm(&lvl, &opts()).lower);
            }
        }
        assert!((e.lower - best).abs() < 1e-12);
        assert!(e.upper >= e.lower);
    }

    #[test]
    fn bernstein_bound_is_below_l1() {
        let ms = ModeSet::window(2);
        let p6 = build_p6(&ms, 1.0, 1.0);
        assert!(sup_upper(&p6) <= p6.ell1());
        assert!(sup_upper(&p6) >= sup_norm(&p6, &opts()).lower);
    }

    #[test]
    fn identity_check_uniform() {
        let ms = ModeSet::window(1);
        let u = State::from_real(&[1.0 / 3f64.sqrt(); 3]);
        let (d, q) = strichartz_identity_check(&ms, 0, &u, 1.0, None).unwrap();
        assert!((d - q).abs() <= 1e-10 * d.abs());
        let (d, q) = strichartz_identity_check(&ms, 40, &u, 1.0, None).unwrap();
        assert_eq!(d, 0.0);
        assert!(q.abs() < 1e-12);
        assert!(matches!(
            strichartz_identity_check(&ms, 0, &u, 1.0, Some(3)),
            Err(Error::InsufficientNodes { .. })
        ));
    }

    #[test]
    fn identity_check_single_mode() {
        let ms = ModeSet::window(2);
        let mut u = State::zeros(5);
        u[3] = c(0.0, 0.8);
        let (d, q) = strichartz_identity_check(&ms, 0, &u, 1.0, None).unwrap();
        assert!((d - 0.8f64.powi(6) / 6.0).abs() < 1e-14);
        assert!((q - d).abs() < 1e-12);
        let (d, q) = strichartz_identity_check(&ms, 3, &u, 1.0, None).unwrap();
        assert_eq!(d, 0.0);
        assert!(q.abs() < 1e-12);
    }
}
