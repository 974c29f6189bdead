//! Birkhoff normal form: cohomological equation, Lie series, generator flows.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::flow::{Field, MidpointOptions};
use crate::poly::{for_each_multiset, poisson, CompiledPoly, HomPoly, ModeSet, MonomialKey, PolyJson, State, MAX_HALF_DEGREE};
use crate::spectral::{bracket, norm_c_upper, norm_h, norm_h_upper, small_divisor, FrequencySet, NormEnclosure, SupNormOptions};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Parameters of the normal form construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalFormConfig {
    /// Half-degree of the perturbation.
    pub p: usize,
    /// Target order: generators of half-degree `p..=r` are built.
    pub r: usize,
    pub gamma: f64,
    /// Largest half-degree kept in the series.
    pub j_max: usize,
    pub a_const: f64,
    pub b_p: f64,
    pub flow_dt: f64,
    pub flow_tol: f64,
}

impl NormalFormConfig {
    pub fn new(p: usize, r: usize, gamma: f64) -> Self {
        Self { p, r, gamma, j_max: 2 * r, a_const: 2.0, b_p: 100.0, flow_dt: 0.1, flow_tol: 1e-14 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.p < 2 {
            return bad(format!("p = {} must be at least 2", self.p));
        }
        if self.r + 1 < self.p {
            return bad(format!("r = {} must be at least p - 1 = {}", self.r, self.p - 1));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} must lie in (0, 1]", self.gamma));
        }
        if self.j_max < self.r + 1 {
            return bad(format!("j_max = {} must be at least r + 1 = {}", self.j_max, self.r + 1));
        }
        if self.j_max > MAX_HALF_DEGREE {
            return bad(format!("j_max = {} exceeds {}", self.j_max, MAX_HALF_DEGREE));
        }
        if !(self.a_const > 1.0 && self.b_p > 1.0) {
            return bad("A and B_p must exceed 1".into());
        }
        if !(self.flow_dt > 0.0 && self.flow_tol > 0.0) {
            return bad("flow_dt and flow_tol must be positive".into());
        }
        Ok(())
    }

    pub fn flow_options(&self) -> MidpointOptions {
        MidpointOptions { dt: self.flow_dt, tol: self.flow_tol, max_iter: 60 }
    }
}

/// A bracket skipped because its output exceeds the series cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Truncation {
    pub generator: usize,
    pub order: usize,
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEntry {
    pub j: usize,
    pub keys: usize,
    pub measured_upper: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub entries: Vec<TailEntry>,
    pub truncated: Vec<Truncation>,
}

impl TailReport {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated).count()
    }
}

/// Size control of one generator against the cohomological estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheck {
    pub half_degree: usize,
    pub keys: usize,
    pub chi_c_upper: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalFormResult {
    pub z2: HomPoly,
    pub resonant: BTreeMap<usize, HomPoly>,
    pub generators: Vec<HomPoly>,
    pub p_norm: NormEnclosure,
    pub eps_r: f64,
    pub tail_report: TailReport,
    pub generator_checks: Vec<GeneratorCheck>,
}

#[derive(Serialize)]
pub struct NormalFormJson<'a> {
    pub eps_r: f64,
    pub p_norm_h: &'a NormEnclosure,
    pub z2: PolyJson,
    pub generators: Vec<PolyJson>,
    pub resonant: BTreeMap<usize, PolyJson>,
    pub tail_report: &'a TailReport,
    pub generator_checks: &'a [GeneratorCheck],
}

impl NormalFormResult {
    pub fn to_json(&self) -> NormalFormJson<'_> {
        NormalFormJson {
            eps_r: self.eps_r,
            p_norm_h: &self.p_norm,
            z2: self.z2.to_json(),
            generators: self.generators.iter().map(HomPoly::to_json).collect(),
            resonant: self.resonant.iter().map(|(j, q)| (*j, q.to_json())).collect(),
            tail_report: &self.tail_report,
            generator_checks: &self.generator_checks,
        }
    }

    /// `Z2 + sum_j Q^(2j)` evaluated at `v`.
    pub fn eval_normal_form(&self, v: &State) -> Result<f64> {
        let mut acc = self.z2.eval(v)?.re;
        for q in self.resonant.values() {
            acc += q.eval(v)?.re;
        }
        Ok(acc)
    }
}

/// Splits `q` into the part removable by a generator and its resonant remainder.
///
/// Returns `(chi, q_res)` with `q + {chi, Z2} = q_res`.
pub fn solve_cohomological(q: &HomPoly, omega: &FrequencySet, gamma: f64) -> Result<(HomPoly, HomPoly)> {
    if !q.is_real() {
        return Err(Error::NonReal);
    }
    if q.mode_set() != omega.mode_set() {
        return Err(Error::ModeSetMismatch("polynomial and frequencies differ".into()));
    }
    let w = omega.omega();
    let chi = q.filter(|t| small_divisor(w, &t.key).abs() >= gamma).map_coeffs(|t| t.coeff / (I * small_divisor(w, &t.key)));
    let res = q.filter(|t| small_divisor(w, &t.key).abs() < gamma);
    Ok((chi, res))
}

/// Frequencies read off a diagonal quadratic `Z2`.
pub(crate) fn z2_frequencies(z2: &HomPoly) -> Result<Vec<f64>> {
    if z2.half_degree() != 1 || z2.terms().iter().any(|t| !t.key.is_diagonal()) {
        return Err(Error::InvalidInput("Z2 must be a diagonal quadratic form".into()));
    }
    let mut w = vec![0.0; z2.mode_set().len()];
    for t in z2.terms() {
        w[t.key.k()[0] as usize] = 2.0 * t.coeff.re;
    }
    Ok(w)
}

fn accumulate(map: &mut BTreeMap<usize, HomPoly>, d: usize, p: HomPoly) -> Result<()> {
    if p.is_empty() {
        return Ok(());
    }
    match map.remove(&d) {
        Some(old) => {
            let sum = old.add(&p)?;
            map.insert(d, sum);
        }
        None => {
            map.insert(d, p);
        }
    }
    Ok(())
}

/// `sum_n ad_chi^n / n!` applied to `Z2 + sum_j series[j]`, truncated at half-degree `j_max`.
///
/// The returned series excludes `Z2` itself, which the flow leaves unchanged at degree 2.
pub fn lie_transform(
    series: &BTreeMap<usize, HomPoly>,
    z2: &HomPoly,
    chi: &HomPoly,
    j_max: usize,
    budget: &Budget,
) -> Result<(BTreeMap<usize, HomPoly>, Vec<Truncation>)> {
    let s = chi.half_degree();
    if s < 2 {
        return Err(Error::InvalidInput("generator must have half-degree at least 2".into()));
    }
    let mut out = series.clone();
    let mut truncated = Vec::new();
    if chi.is_empty() {
        return Ok((out, truncated));
    }
    let w = z2_frequencies(z2)?;
    // {chi, Z2} = -i Omega chi
    let ad_z2 = chi.map_coeffs(|t| -I * small_divisor(&w, &t.key) * t.coeff);
    // Terms of equal degree s are regrouped with R = Q_s + {chi, Z2}: order n contributes
    // (n ad^n Q_s + ad^n R) / (n+1)! at degree s + n(s-1).
    let resonant = match series.get(&s) {
        Some(q) => cancel_add(q, &ad_z2)?,
        None => ad_z2,
    };
    if s > j_max {
        truncated.push(Truncation { generator: s, order: 1, source: 1, target: s });
    } else if resonant.is_empty() {
        out.remove(&s);
    } else {
        out.insert(s, resonant.clone());
    }

    let mut r_chain = (s <= j_max).then_some(resonant);
    let mut order = 1;
    let mut sources = series.clone();
    loop {
        let mut next = BTreeMap::new();
        for (&d, y) in &sources {
            let target = d + s - 1;
            if target > j_max {
                truncated.push(Truncation { generator: s, order, source: d, target });
                continue;
            }
            let b = poisson(chi, y)?.scale(Complex64::new(1.0 / order as f64, 0.0));
            budget.check_keys(b.len(), "bracket")?;
            accumulate(&mut next, target, b)?;
            budget.check_time("lie transform")?;
        }
        let target = s + order * (s - 1);
        let r_next = match r_chain.take() {
            Some(_) if target > j_max => {
                truncated.push(Truncation { generator: s, order, source: target - s + 1, target });
                None
            }
            Some(r) => {
                let b = poisson(chi, &r)?.scale(Complex64::new(1.0 / (order + 1) as f64, 0.0));
                budget.check_keys(b.len(), "bracket")?;
                budget.check_time("lie transform")?;
                Some(b).filter(|b| !b.is_empty())
            }
            None => None,
        };
        if next.is_empty() && r_next.is_none() {
            break;
        }
        for (&d, y) in &next {
            let y = if d == target {
                y.scale(Complex64::new(order as f64 / (order + 1) as f64, 0.0))
            } else {
                y.clone()
            };
            accumulate(&mut out, d, y)?;
        }
        if let Some(b) = &r_next {
            accumulate(&mut out, target, b.clone())?;
        }
        for (_, q) in out.range(target..) {
            budget.check_keys(q.len(), "series entry")?;
        }
        sources = next;
        r_chain = r_next;
        order += 1;
    }
    out.retain(|_, q| !q.is_empty());
    Ok((out, truncated))
}

/// Key-wise sum that drops entries cancelling to rounding level.
fn cancel_add(a: &HomPoly, b: &HomPoly) -> Result<HomPoly> {
    Ok(a.add(b)?.filter(|t| t.coeff.norm() > 1e-13 * (a.coeff(&t.key).norm() + b.coeff(&t.key).norm())))
}

/// `(gamma / (A B_p r^5 <|omega_frac|> ||P|| log <|omega_int|>))^{1/(2p-2)}`.
pub fn epsilon_r(cfg: &NormalFormConfig, norm_p_h: f64, omega: &FrequencySet) -> f64 {
    let denom = cfg.a_const
        * cfg.b_p
        * (cfg.r as f64).powi(5)
        * bracket(omega.frac_sup())
        * norm_p_h
        * bracket(omega.int_sup() as f64).ln();
    (cfg.gamma / denom).powf(1.0 / (2.0 * cfg.p as f64 - 2.0))
}

/// Runs the iterative normal form construction up to order `cfg.r`.
pub fn birkhoff(
    z2: &HomPoly,
    p: &HomPoly,
    omega: &FrequencySet,
    cfg: &NormalFormConfig,
    opts: &SupNormOptions,
    budget: &Budget,
) -> Result<NormalFormResult> {
    cfg.validate()?;
    if p.half_degree() != cfg.p {
        return Err(Error::InvalidInput(format!(
            "perturbation has half-degree {}, config says p = {}",
            p.half_degree(),
            cfg.p
        )));
    }
    if !p.is_real() {
        return Err(Error::NonReal);
    }
    if p.mode_set() != omega.mode_set() || z2.mode_set() != omega.mode_set() {
        return Err(Error::ModeSetMismatch("inputs live on different mode sets".into()));
    }
    let mut series: BTreeMap<usize, HomPoly> = BTreeMap::new();
    if !p.is_empty() {
        series.insert(cfg.p, p.clone());
    }
    let mut generators = Vec::new();
    let mut generator_checks = Vec::new();
    let mut truncated = Vec::new();
    for s in cfg.p..=cfg.r {
        let q = match series.get(&s) {
            Some(q) => q.clone(),
            None => continue,
        };
        let (chi, q_res) = solve_cohomological(&q, omega, cfg.gamma)?;
        if chi.is_empty() {
            continue;
        }
        generator_checks.push(GeneratorCheck {
            half_degree: s,
            keys: chi.len(),
            chi_c_upper: norm_c_upper(&chi, omega.omega_int()),
            bound: 8.0 * s as f64 / cfg.gamma * bracket(omega.frac_sup()) * norm_h_upper(&q, omega.omega_int()),
        });
        let (next, tr) = lie_transform(&series, z2, &chi, cfg.j_max, budget)?;
        series = next;
        truncated.extend(tr);
        if q_res.is_empty() {
            series.remove(&s);
        } else {
            series.insert(s, q_res);
        }
        generators.push(chi);
    }
    let p_norm = norm_h(p, omega.omega_int(), opts);
    let eps_r = epsilon_r(cfg, p_norm.upper, omega);
    let entries = (cfg.p..=cfg.j_max)
        .map(|j| {
            let (keys, measured) = series
                .get(&j)
                .map_or((0, 0.0), |q| (q.len(), norm_h_upper(q, omega.omega_int())));
            let bound = eps_r.powi(-2 * (j as i32 - cfg.p as i32)) * p_norm.upper;
            TailEntry { j, keys, measured_upper: measured, bound, violated: measured > bound }
        })
        .collect();
    truncated.sort();
    truncated.dedup();
    Ok(NormalFormResult {
        z2: z2.clone(),
        resonant: series,
        generators,
        p_norm,
        eps_r,
        tail_report: TailReport { entries, truncated },
        generator_checks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// Flow of `i du/dt = grad chi(u)` for time `t`.
pub fn generator_flow(chi: &HomPoly, u: &State, t: f64, opts: &MidpointOptions) -> Result<State> {
    if u.len() != chi.mode_set().len() {
        return Err(Error::ModeSetMismatch("state length differs from mode set".into()));
    }
    let cp = CompiledPoly::new(chi);
    let field = Field { lin: None, nl: Some(&cp) };
    Ok(State(field.advance(u, t, opts)?))
}

/// Applies the composed unit-time generator flows, or their inverse.
pub fn transform_state(u: &State, generators: &[HomPoly], direction: Direction, opts: &MidpointOptions) -> Result<State> {
    let mut x = u.clone();
    match direction {
        Direction::Forward => {
            for chi in generators {
                x = generator_flow(chi, &x, 1.0, opts)?;
            }
        }
        Direction::Inverse => {
            for chi in generators.iter().rev() {
                x = generator_flow(chi, &x, -1.0, opts)?;
            }
        }
    }
    Ok(x)
}

/// A small-divisor key whose monomial moves the action of the watched mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonantKey {
    pub k: Vec<i32>,
    pub l: Vec<i32>,
    pub divisor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrGammaReport {
    pub mode: i32,
    pub r: usize,
    pub gamma: f64,
    /// Off-diagonal keys covered by the enumeration.
    pub keys_checked: u64,
    pub offending: Vec<ResonantKey>,
}

impl KrGammaReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }
}

/// Lists every balanced key of half-degree `<= r` with `|Omega| <= gamma` that does not commute
/// with `|u_k|^2`.
pub fn check_krgamma(ms: &ModeSet, omega: &FrequencySet, k: i32, r: usize, gamma: f64) -> Result<KrGammaReport> {
    let kp = ms
        .position(k)
        .ok_or_else(|| Error::ModeSetMismatch(format!("mode {k} not in mode set")))? as u8;
    if omega.mode_set() != ms {
        return Err(Error::ModeSetMismatch("frequencies live on another mode set".into()));
    }
    if r > MAX_HALF_DEGREE {
        return Err(Error::DegreeOverflow(r));
    }
    let w = omega.omega();
    let wmax = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut offending = Vec::new();
    let mut checked = 0u64;
    for q in 1..=r {
        let mut sets: Vec<(f64, Vec<u8>)> = Vec::new();
        for_each_multiset(ms.len(), q, |m| {
            sets.push((m.iter().map(|&p| w[p as usize]).sum(), m.to_vec()));
        });
        sets.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        checked += (sets.len() as u64) * (sets.len() as u64 - 1);
        let slack = gamma + 1e-12 * q as f64 * wmax.max(1.0);
        for i in 0..sets.len() {
            let (si, ki) = &sets[i];
            let mut j = i;
            while j > 0 && si - sets[j - 1].0 <= slack {
                j -= 1;
            }
            while j < sets.len() && sets[j].0 - si <= slack {
                let lj = &sets[j].1;
                j += 1;
                if lj == ki {
                    continue;
                }
                let key = MonomialKey::new(ki, lj)?;
                let d = small_divisor(w, &key);
                if d.abs() <= gamma && key.mult_k(kp) != key.mult_l(kp) {
                    offending.push(ResonantKey { k: key.k_modes(ms), l: key.l_modes(ms), divisor: d });
                }
            }
        }
    }
    Ok(KrGammaReport { mode: k, r, gamma, keys_checked: checked, offending })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{build_p6, build_z2};
    use crate::spectral::{int_divisor, project};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn key(ms: &ModeSet, k: &[i32], l: &[i32]) -> MonomialKey {
        MonomialKey::from_modes(ms, k, l).unwrap()
    }

    #[test]
    fn cohomological_single_key() {
        let ms = ModeSet::new(vec![1, 2], 2).unwrap();
        let om = FrequencySet::from_parts(&ms, vec![1, 3], vec![0.0, 0.0]).unwrap();
        // Omega((1),(2)) = 1 - 3 = -2
        let q = HomPoly::from_terms(
            &ms,
            1,
            [(key(&ms, &[1], &[2]), c(0.7, 0.2)), (key(&ms, &[2], &[1]), c(0.7, -0.2))],
        )
        .unwrap();
        let (chi, res) = solve_cohomological(&q, &om, 1.0).unwrap();
        assert!(res.is_empty());
        let want = c(0.7, 0.2) / c(0.0, -2.0);
        assert!((chi.coeff(&key(&ms, &[1], &[2])) - want).norm() < 1e-15);
        assert!(chi.is_real());
        let z2 = build_z2(&om);
        let lhs = q.add(&poisson(&chi, &z2).unwrap()).unwrap();
        assert!(lhs.max_abs_coeff() < 1e-12);
    }

    #[test]
    fn cohomological_resonant_and_action_inputs() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let act = HomPoly::from_terms(&ms, 2, [(key(&ms, &[0, 1], &[0, 1]), c(1.0, 0.0))]).unwrap();
        let (chi, res) = solve_cohomological(&act, &om, 1e-9).unwrap();
        assert!(chi.is_empty());
        assert_eq!(res, act);
        let p6 = build_p6(&ms, 1.0, 1.0);
        let (chi, res) = solve_cohomological(&p6, &om, 100.0).unwrap();
        assert!(chi.is_empty());
        assert_eq!(res, p6);
    }

    #[test]
    fn lie_transform_identities() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let z2 = build_z2(&om);
        let p6 = build_p6(&ms, 1.0, 1.0);
        let series: BTreeMap<usize, HomPoly> = [(3, p6.clone())].into();
        let (out, tr) = lie_transform(&series, &z2, &HomPoly::zero(&ms, 3), 6, &Budget::unlimited()).unwrap();
        assert_eq!(out, series);
        assert!(tr.is_empty());
        // an action generator commutes with everything diagonal
        let act = HomPoly::from_terms(&ms, 2, [(key(&ms, &[0, 1], &[0, 1]), c(1.0, 0.0))]).unwrap();
        let diag: BTreeMap<usize, HomPoly> =
            [(3, HomPoly::from_terms(&ms, 3, [(key(&ms, &[1, 1, 0], &[1, 1, 0]), c(2.0, 0.0))]).unwrap())].into();
        let (out, _) = lie_transform(&diag, &z2, &act, 8, &Budget::unlimited()).unwrap();
        assert_eq!(out, diag);
    }

    #[test]
    fn lie_transform_two_term_oracle() {
        // two modes, one non-resonant sextic class and its conjugate
        let ms = ModeSet::new(vec![0, 1], 1).unwrap();
        let om = FrequencySet::from_parts(&ms, vec![1, 2], vec![0.1, -0.3]).unwrap();
        let z2 = build_z2(&om);
        let p = HomPoly::from_terms(
            &ms,
            3,
            [(key(&ms, &[0, 0, 1], &[0, 1, 1]), c(0.4, 0.1)), (key(&ms, &[0, 1, 1], &[0, 0, 1]), c(0.4, -0.1))],
        )
        .unwrap();
        let (chi, res) = solve_cohomological(&p, &om, 0.05).unwrap();
        assert!(res.is_empty());
        let series: BTreeMap<usize, HomPoly> = [(3, p.clone())].into();
        let (out, _) = lie_transform(&series, &z2, &chi, 5, &Budget::unlimited()).unwrap();
        let chi_z2 = poisson(&chi, &z2).unwrap();
        let want5 = poisson(&chi, &chi_z2)
            .unwrap()
            .scale(c(0.5, 0.0))
            .add(&poisson(&chi, &p).unwrap())
            .unwrap();
        let got5 = out.get(&5).cloned().unwrap_or_else(|| HomPoly::zero(&ms, 5));
        let diff = got5.sub(&want5).unwrap();
        assert!(diff.max_abs_coeff() <= 1e-13 * want5.max_abs_coeff().max(1.0));
        // degree 6 entry is p + {chi, Z2} = resonant part = 0
        assert!(out.get(&3).map_or(0.0, |q| q.max_abs_coeff()) < 1e-14);
    }

    #[test]
    fn birkhoff_on_resonant_input_is_identity() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let z2 = build_z2(&om);
        let act = HomPoly::from_terms(&ms, 3, [(key(&ms, &[0, 1, 1], &[0, 1, 1]), c(1.0, 0.0))]).unwrap();
        let cfg = NormalFormConfig::new(3, 5, 0.5);
        let res = birkhoff(&z2, &act, &om, &cfg, &SupNormOptions::default(), &Budget::unlimited()).unwrap();
        assert!(res.generators.is_empty());
        assert_eq!(res.resonant.len(), 1);
        assert_eq!(res.resonant[&3], act);
    }

    #[test]
    fn birkhoff_small_quintic_case() {
        let ms = ModeSet::window(1);
        let om = FrequencySet::free(&ms).unwrap();
        let z2 = build_z2(&om);
        let p6 = build_p6(&ms, 1.0, 1.0);
        let mut cfg = NormalFormConfig::new(3, 3, 0.5);
        cfg.j_max = 5;
        let res = birkhoff(&z2, &p6, &om, &cfg, &SupNormOptions::default(), &Budget::unlimited()).unwrap();
        assert_eq!(res.generators.len(), 1);
        // with integer frequencies the resonant part is exactly level 0
        assert_eq!(res.resonant[&3], project(&p6, om.omega_int(), 0));
        let chi = &res.generators[0];
        assert_eq!(chi.len(), p6.len() - project(&p6, om.omega_int(), 0).len());
        assert!(chi.terms().iter().all(|t| int_divisor(om.omega_int(), &t.key) != 0));
        assert!(res.resonant.get(&5).is_some_and(|q| !q.is_empty()));
        for q in res.resonant.values() {
            assert!(q.is_real());
        }
    }

    #[test]
    fn epsilon_r_scaling() {
        let ms = ModeSet::window(5);
        let om = FrequencySet::free(&ms).unwrap();
        let mut cfg = NormalFormConfig::new(3, 5, 0.1);
        let e1 = epsilon_r(&cfg, 1.0, &om);
        cfg.gamma = 0.2;
        let e2 = epsilon_r(&cfg, 1.0, &om);
        assert!((e2 / e1 - 2f64.powf(0.25)).abs() < 1e-14);
        cfg.r = 6;
        assert!(epsilon_r(&cfg, 1.0, &om) < e2);
    }

    #[test]
    fn quartic_action_flow_is_phase_rotation() {
        let ms = ModeSet::new(vec![1], 1).unwrap();
        let chi = HomPoly::from_terms(&ms, 2, [(key(&ms, &[1, 1], &[1, 1]), c(0.5, 0.0))]).unwrap();
        let a = c(0.03, -0.04);
        let opts = MidpointOptions { dt: 0.05, tol: 1e-15, max_iter: 60 };
        let got = generator_flow(&chi, &State(vec![a]), 1.0, &opts).unwrap();
        let want = a * Complex64::from_polar(1.0, -2.0 * a.norm_sqr());
        assert!((got[0] - want).norm() < 1e-10);
        assert!((got[0].norm() - a.norm()).abs() < 1e-15);
    }

    #[test]
    fn krgamma_detects_free_resonance() {
        let ms = ModeSet::window(7);
        let om = FrequencySet::free(&ms).unwrap();
        let rep = check_krgamma(&ms, &om, 1, 3, 1e-9).unwrap();
        assert!(rep
            .offending
            .iter()
            .any(|r| r.k == vec![1, 7] && r.l == vec![5, 5] || r.k == vec![5, 5] && r.l == vec![1, 7]));
    }

    #[test]
    fn krgamma_passes_for_generic_frequencies() {
        let ms = ModeSet::window(2);
        let frac = vec![0.1234, 0.5311, 0.0, 0.3719, 0.7213];
        let int = ms.modes().iter().map(|&k| (k * k) as i64).collect();
        let om = FrequencySet::from_parts(&ms, int, frac).unwrap();
        let rep = check_krgamma(&ms, &om, 1, 3, 1e-6).unwrap();
        assert!(rep.passed(), "{:?}", rep.offending.first());
        assert!(rep.keys_checked > 0);
    }
}
