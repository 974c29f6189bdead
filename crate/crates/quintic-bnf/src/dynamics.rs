//! Time integration of the truncated Hamiltonian and the experiments built on it.

use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::flow::{Field, MidpointOptions};
use crate::nf::{transform_state, z2_frequencies, Direction};
use crate::poly::{build_p6, CompiledPoly, HomPoly, ModeSet, State};
use crate::resonance::gaussian;
use crate::spectral::{bracket, norm_h, FrequencySet, SupNormOptions};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Longest model time used by drift experiments.
pub const MAX_DRIFT_TIME: f64 = 1e5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub dt: f64,
    /// Keep one state every this many steps (the final state is always kept).
    pub sample_every: usize,
    pub tol: f64,
}

impl IntegrateOptions {
    pub fn new(dt: f64) -> Self {
        Self { dt, sample_every: 1, tol: 1e-14 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt = {} must be positive", self.dt)));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidInput("sample_every must be at least 1".into()));
        }
        Ok(())
    }

    fn midpoint(&self) -> MidpointOptions {
        MidpointOptions { dt: self.dt, tol: self.tol, max_iter: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub modes: Vec<i32>,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub norm2: Vec<f64>,
    pub energy: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    /// `max_t | ||u(t)||^2 - ||u(0)||^2 | / ||u(0)||^2`.
    pub fn norm_drift(&self) -> f64 {
        rel_drift(&self.norm2)
    }

    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }

    /// Columns `t, norm2, H, |u_k|^2...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "norm2".into(), "H".into()];
        header.extend(self.modes.iter().map(|k| format!("action_{k}")));
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.times.len() {
            let mut row = vec![self.times[i].to_string(), self.norm2[i].to_string(), self.energy[i].to_string()];
            row.extend(self.actions[i].iter().map(f64::to_string));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::InvalidInput(format!("csv write failed: {e}")))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv write failed: {e}"))
}

fn rel_drift(v: &[f64]) -> f64 {
    let v0 = v[0];
    if v0 == 0.0 {
        return 0.0;
    }
    v.iter().map(|x| (x - v0).abs()).fold(0.0, f64::max) / v0.abs()
}

/// Hamiltonian `Z2 + P` split into the diagonal frequencies and a compiled perturbation.
struct System {
    omega: Vec<f64>,
    z2: CompiledPoly,
    p: Option<CompiledPoly>,
}

impl System {
    fn new(z2: &HomPoly, p: &HomPoly, u0: &State) -> Result<Self> {
        if z2.mode_set() != p.mode_set() {
            return Err(Error::ModeSetMismatch("Z2 and perturbation live on different mode sets".into()));
        }
        if u0.len() != z2.mode_set().len() {
            return Err(Error::ModeSetMismatch("initial state length differs from mode set".into()));
        }
        if !p.is_real() {
            return Err(Error::NonReal);
        }
        let omega = z2_frequencies(z2)?;
        let p = (!p.is_empty()).then(|| CompiledPoly::new(p));
        Ok(Self { omega, z2: CompiledPoly::new(z2), p })
    }

    fn energy(&self, u: &[Complex64]) -> f64 {
        self.z2.eval(u).re + self.p.as_ref().map_or(0.0, |p| p.eval(u).re)
    }

    /// Steps to time `t_final`, calling `visit(step, t, u)` after every step and once at `t = 0`.
    fn run(
        &self,
        u0: &State,
        t_final: f64,
        opts: &IntegrateOptions,
        mut visit: impl FnMut(usize, f64, &[Complex64]) -> Result<()>,
    ) -> Result<()> {
        opts.validate()?;
        if !(t_final >= 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidInput(format!("final time {t_final} must be finite and nonnegative")));
        }
        let field = Field { lin: Some(&self.omega), nl: self.p.as_ref() };
        let steps = (t_final / opts.dt).ceil() as usize;
        let h = if steps == 0 { 0.0 } else { t_final / steps as f64 };
        let mo = opts.midpoint();
        let mut u = u0.0.clone();
        visit(0, 0.0, &u)?;
        for n in 1..=steps {
            u = field.step(&u, h, &mo)?;
            visit(n, n as f64 * h, &u)?;
        }
        Ok(())
    }
}

/// Implicit midpoint integration of `i du/dt = grad (Z2 + P)(u)`.
pub fn integrate(z2: &HomPoly, p: &HomPoly, u0: &State, t_final: f64, opts: &IntegrateOptions) -> Result<Trajectory> {
    let sys = System::new(z2, p, u0)?;
    let steps = (t_final / opts.dt).ceil().max(0.0) as usize;
    let mut tr = Trajectory {
        modes: z2.mode_set().modes().to_vec(),
        times: Vec::new(),
        states: Vec::new(),
        norm2: Vec::new(),
        energy: Vec::new(),
        actions: Vec::new(),
    };
    sys.run(u0, t_final, opts, |n, t, u| {
        if n % opts.sample_every == 0 || n == steps {
            let actions: Vec<f64> = u.iter().map(|z| z.norm_sqr()).collect();
            tr.times.push(t);
            tr.norm2.push(actions.iter().sum());
            tr.energy.push(sys.energy(u));
            tr.actions.push(actions);
            tr.states.push(State(u.to_vec()));
        }
        Ok(())
    })?;
    Ok(tr)
}

/// `max_t ||u(t) - e^{-it L} u0||` where `e^{-it L}` is the linear part of the midpoint rule.
///
/// The free propagator is the Cayley rotation of the same scheme, so the result measures only
/// the nonlinear deviation.
pub fn linear_comparison(omega: &FrequencySet, p: &HomPoly, u0: &State, t_final: f64, opts: &IntegrateOptions) -> Result<f64> {
    let z2 = crate::poly::build_z2(omega);
    let sys = System::new(&z2, p, u0)?;
    let steps = (t_final / opts.dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { t_final / steps as f64 };
    let mut free = u0.0.clone();
    let mut worst: f64 = 0.0;
    sys.run(u0, t_final, opts, |n, _, u| {
        if n > 0 {
            for (z, w) in free.iter_mut().zip(&sys.omega) {
                *z = *z * (1.0 - I * (h * w / 2.0)) * (1.0 / (1.0 + I * (h * w / 2.0)));
            }
        }
        let d: f64 = u.iter().zip(&free).map(|(a, b)| (a - b).norm_sqr()).sum();
        worst = worst.max(d.sqrt());
        Ok(())
    })?;
    Ok(worst)
}

/// Linear convolution `u * u * u * conj-reflect(u) * conj-reflect(u)`: Fourier coefficients of
/// `|u|^4 u` for `u` supported on the symmetric window `ms`, indexed from `-5M`.
pub fn quintic_convolution(u: &State, ms: &ModeSet) -> Result<Vec<Complex64>> {
    if !ms.is_symmetric() {
        return Err(Error::InvalidModeSet("quintic convolution needs a symmetric window".into()));
    }
    if u.len() != ms.len() {
        return Err(Error::ModeSetMismatch("state length differs from mode set".into()));
    }
    let refl: Vec<Complex64> = u.iter().rev().map(|z| z.conj()).collect();
    let mut acc = u.0.clone();
    for f in [&u.0, &u.0, &refl, &refl] {
        acc = convolve(&acc, f);
    }
    Ok(acc)
}

fn convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `g = sigma c6 Pi_M [ |u|^4 u - |Pi_M u|^4 Pi_M u ]` for `u` on the fine window.
pub fn remainder_g(u_fine: &State, fine: &ModeSet, m: u32, sigma: f64, c6: f64) -> Result<State> {
    if !fine.is_symmetric() {
        return Err(Error::InvalidModeSet("fine window must be symmetric".into()));
    }
    let mf = fine.m_param();
    if m >= mf {
        return Err(Error::ModeSetMismatch(format!("coarse window {m} must be smaller than fine window {mf}")));
    }
    let proj = State(
        fine.modes()
            .iter()
            .zip(u_fine.iter())
            .map(|(&k, z)| if k.unsigned_abs() <= m { *z } else { Complex64::new(0.0, 0.0) })
            .collect(),
    );
    let full = quintic_convolution(u_fine, fine)?;
    let low = quintic_convolution(&proj, fine)?;
    let centre = 5 * mf as i64;
    let g = (-(m as i64)..=m as i64)
        .map(|k| {
            let i = (centre + k) as usize;
            (full[i] - low[i]) * (sigma * c6)
        })
        .collect();
    Ok(State(g))
}

/// Strang split-step Fourier solver for `i u_t = -u_xx + sigma c6 |u|^4 u`, projected onto `ms`
/// after every step.
pub fn split_step(u: &State, ms: &ModeSet, sigma: f64, c6: f64, t_final: f64, dt: f64) -> Result<State> {
    if !ms.is_symmetric() {
        return Err(Error::InvalidModeSet("split-step needs a symmetric window".into()));
    }
    if u.len() != ms.len() {
        return Err(Error::ModeSetMismatch("state length differs from mode set".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} must be positive")));
    }
    let m = ms.m_param() as usize;
    let n = (6 * m + 2).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let steps = (t_final.abs() / dt).ceil().max(1.0) as usize;
    let h = t_final / steps as f64;
    let half: Vec<Complex64> = ms.modes().iter().map(|&k| (-I * (k * k) as f64 * (h / 2.0)).exp()).collect();
    let slot = |k: i32| k.rem_euclid(n as i32) as usize;
    let mut c = u.0.clone();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for _ in 0..steps {
        c.iter_mut().zip(&half).for_each(|(z, e)| *z *= e);
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (&k, z) in ms.modes().iter().zip(&c) {
            buf[slot(k)] = *z;
        }
        inv.process(&mut buf);
        for z in buf.iter_mut() {
            *z *= (-I * (sigma * c6 * z.norm_sqr().powi(2) * h)).exp();
        }
        fwd.process(&mut buf);
        for (&k, z) in ms.modes().iter().zip(c.iter_mut()) {
            *z = buf[slot(k)] / n as f64;
        }
        c.iter_mut().zip(&half).for_each(|(z, e)| *z *= e);
    }
    Ok(State(c))
}

/// Least-squares slope of `ln y` against `ln x`; `None` if any value is not positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub m: u32,
    pub fine_m: u32,
    pub g_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderScan {
    pub s: f64,
    pub rows: Vec<RemainderRow>,
    pub slope: Option<f64>,
}

/// Sample with `u_k = (X_k + i Y_k) <k>^{-s-1/2} / sqrt 2`, the same draw for every window.
pub fn sobolev_sample(ms: &ModeSet, s: f64, seed: u64) -> State {
    State(
        ms.modes()
            .iter()
            .map(|&k| {
                let k = k as i64;
                let z = Complex64::new(gaussian(seed, 2 * k), gaussian(seed, 2 * k + 1)) / 2f64.sqrt();
                z * bracket(k as f64).powf(-s - 0.5)
            })
            .collect(),
    )
}

/// RMS of `||g||` over `samples` draws for each `M`, with fine window `fine_factor * M`.
pub fn remainder_scan(s: f64, m_list: &[u32], fine_factor: u32, samples: usize, seed: u64, sigma: f64, c6: f64) -> Result<RemainderScan> {
    if fine_factor < 2 || samples == 0 {
        return Err(Error::InvalidInput("need fine_factor >= 2 and at least one sample".into()));
    }
    let rows = m_list
        .par_iter()
        .map(|&m| {
            let fine = ModeSet::window(fine_factor * m);
            let mut acc = 0.0;
            for j in 0..samples as u64 {
                let u = sobolev_sample(&fine, s, seed.wrapping_add(j));
                acc += remainder_g(&u, &fine, m, sigma, c6)?.norm2();
            }
            Ok(RemainderRow { m, fine_m: fine_factor * m, g_norm: (acc / samples as f64).sqrt() })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.g_norm).collect();
    Ok(RemainderScan { s, slope: loglog_slope(&xs, &ys), rows })
}

/// Seeded Gaussian direction scaled to norm `eps`.
pub fn random_state(n: usize, eps: f64, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = State(
        (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect(),
    );
    let nrm = u.norm();
    u.scaled(eps / nrm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Watched mode.
    pub mode: i32,
    pub eps: Vec<f64>,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    /// Transformed actions are sampled every this many steps.
    pub transform_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub eps: f64,
    pub t_final: f64,
    pub raw_drift: f64,
    pub transformed_drift: Option<f64>,
    /// Raw drift restricted to the times where transformed actions were sampled.
    pub raw_drift_sampled: f64,
    pub norm_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mode: i32,
    pub rows: Vec<DriftRow>,
    pub exponent: Option<f64>,
    pub transformed_exponent: Option<f64>,
}

impl DriftReport {
    /// Every run where transformed actions moved no more than raw actions at the same times.
    pub fn transformed_not_worse(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.transformed_drift.is_none_or(|t| t <= r.raw_drift_sampled))
    }
}

/// Maximal drift of `|u_k|^2` for each `eps` and its log-log exponent.
///
/// The watched mode should pass `check_krgamma` for the generators supplied. Transformed
/// actions use `v = tau(u)`, the forward map of the normal form. With a plan, every `eps`
/// above its `eta_r` is rejected.
pub fn action_drift(
    z2: &HomPoly,
    p: &HomPoly,
    generators: &[HomPoly],
    flow: &MidpointOptions,
    cfg: &DriftConfig,
    plan: Option<&Plan>,
) -> Result<DriftReport> {
    let ms = z2.mode_set();
    let kpos = ms
        .position(cfg.mode)
        .ok_or_else(|| Error::ModeSetMismatch(format!("mode {} not in mode set", cfg.mode)))?;
    if cfg.eps.is_empty() || cfg.eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidInput("eps list must be nonempty and positive".into()));
    }
    if cfg.transform_every == 0 {
        return Err(Error::InvalidInput("transform_every must be at least 1".into()));
    }
    if let Some(plan) = plan {
        match plan.eta_r {
            Some(eta) => {
                if let Some(e) = cfg.eps.iter().find(|e| **e > eta) {
                    return Err(Error::Infeasible(format!("eps = {e} exceeds eta_r = {eta:.3e}")));
                }
            }
            None => return Err(Error::Infeasible("plan has no eta_r".into())),
        }
    }
    let t_final = cfg.t_final.min(MAX_DRIFT_TIME);
    let opts = IntegrateOptions::new(cfg.dt);
    let rows = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let u0 = random_state(ms.len(), eps, cfg.seed);
            let sys = System::new(z2, p, &u0)?;
            let a0 = u0[kpos].norm_sqr();
            let n0 = u0.norm2();
            let v0 = if generators.is_empty() {
                None
            } else {
                Some(transform_state(&u0, generators, Direction::Forward, flow)?[kpos].norm_sqr())
            };
            let (mut raw, mut raw_s, mut tr, mut nd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            sys.run(&u0, t_final, &opts, |n, _, u| {
                let d = (u[kpos].norm_sqr() - a0).abs();
                raw = raw.max(d);
                nd = nd.max((u.iter().map(|z| z.norm_sqr()).sum::<f64>() - n0).abs() / n0);
                if let Some(v0) = v0 {
                    if n % cfg.transform_every == 0 {
                        raw_s = raw_s.max(d);
                        let v = transform_state(&State(u.to_vec()), generators, Direction::Forward, flow)?;
                        tr = tr.max((v[kpos].norm_sqr() - v0).abs());
                    }
                }
                Ok(())
            })?;
            Ok(DriftRow {
                eps,
                t_final,
                raw_drift: raw,
                transformed_drift: v0.map(|_| tr),
                raw_drift_sampled: if v0.is_some() { raw_s } else { raw },
                norm_drift: nd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_drift).collect();
    let trn: Option<Vec<f64>> = rows.iter().map(|r| r.transformed_drift).collect();
    Ok(DriftReport {
        mode: cfg.mode,
        exponent: loglog_slope(&xs, &raw),
        transformed_exponent: trn.and_then(|t| loglog_slope(&xs, &t)),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrichartzRow {
    pub m: u32,
    pub keys: usize,
    pub lower: f64,
    pub upper: f64,
    pub level: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrichartzScan {
    pub sigma: f64,
    pub c6: f64,
    pub rows: Vec<StrichartzRow>,
    /// `log2(S(M_{i+1}) / S(M_i))` from the lower values, for consecutive entries.
    pub exponents: Vec<f64>,
}

impl StrichartzScan {
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].lower >= w[0].lower)
    }
}

/// `S(M) = ||P6||_H` on the window `[-M, M]` with `omega = k^2`, for each `M`.
pub fn strichartz_scan(m_list: &[u32], sigma: f64, c6: f64, opts: &SupNormOptions, budget: &Budget) -> Result<StrichartzScan> {
    if m_list.is_empty() || m_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("window list must be nonempty and increasing".into()));
    }
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let ms = ModeSet::window(m);
        let p = build_p6(&ms, sigma, c6);
        budget.check_keys(p.len(), "strichartz interaction")?;
        let w: Vec<i64> = ms.modes().iter().map(|&k| (k as i64) * (k as i64)).collect();
        let e = norm_h(&p, &w, opts);
        rows.push(StrichartzRow { m, keys: p.len(), lower: e.lower, upper: e.upper, level: e.level });
        budget.check_time("strichartz scan")?;
    }
    let exponents = rows
        .windows(2)
        .map(|w| (w[1].lower / w[0].lower).log2() / (w[1].m as f64 / w[0].m as f64).log2())
        .collect();
    Ok(StrichartzScan { sigma, c6, rows, exponents })
}

/// Inputs of the parameter planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub eps: f64,
    pub nu: f64,
    pub alpha: f64,
    pub s: f64,
    #[serde(default = "one")]
    pub beta_s: f64,
    pub rho: f64,
    pub kappa: f64,
    pub c: f64,
    pub k: i32,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub inputs: PlanInputs,
    pub upsilon: f64,
    pub alpha_nu: f64,
    pub r_star: f64,
    pub r: u32,
    /// `r <= 2 r_star`.
    pub r_in_band: bool,
    pub gamma: f64,
    /// `eps^{-r/12}`.
    pub m: f64,
    pub t_eps: f64,
    /// Model time actually reachable by drift runs.
    pub t_drift: f64,
    /// `None` when `log log M <= 0`.
    pub eta_r: Option<f64>,
    /// Model estimate `eta_r / 2`.
    pub eps_r: Option<f64>,
    pub eps_below_eta: bool,
    pub mode_below_cutoff: bool,
    pub feasible: bool,
    pub notes: Vec<String>,
}

/// `rho (2 <k>)^{-exp(alpha r)}`.
pub fn plan_gamma(rho: f64, alpha: f64, r: usize, k: i32) -> f64 {
    rho * (2.0 * bracket(k as f64)).powf(-(alpha * r as f64).exp())
}

/// Parameter choices for a target `eps`, with feasibility flags.
pub fn plan_parameters(inputs: &PlanInputs) -> Result<Plan> {
    let PlanInputs { eps, nu, alpha, s: _, beta_s, rho, kappa, c, k } = *inputs;
    let bad = |m: String| Err(Error::InvalidInput(m));
    if !(nu > 0.0 && nu <= 2.0) {
        return bad(format!("nu = {nu} must lie in (0, 2]"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return bad(format!("eps = {eps} must lie in (0, 1)"));
    }
    if !(alpha > 0.0) {
        return bad(format!("alpha = {alpha} must be positive"));
    }
    if !(beta_s > 0.0 && rho > 0.0 && kappa > 0.0 && c > 0.0) {
        return bad("need beta_s, rho, kappa and c positive".into());
    }
    let two_k = 2.0 * bracket(k as f64);
    let upsilon = nu / 16.0 * (-3.0 * alpha).exp();
    let alpha_nu = alpha + (16.0 / nu).ln() / 3.0;
    let r_star = ((1.0 / eps).ln() / two_k.ln()).ln() / (2.0 * alpha_nu);
    let r = r_star.max(3.0).ceil() as u32;
    let r_in_band = r as f64 <= 2.0 * r_star;
    let growth = (alpha * r as f64).exp();
    let gamma = plan_gamma(rho, alpha, r as usize, k);
    let t_eps = eps.powf(-(r as f64) / (30.0 * beta_s));
    let m = eps.powf(-(r as f64) / 12.0);
    let mut notes = Vec::new();
    let eta_r = if m.ln().ln() > 0.0 {
        Some(kappa * (-(c / 2.0) * m.ln() / m.ln().ln()).exp() * two_k.powf(-0.5 * growth))
    } else {
        notes.push(format!("M = {m:.3} is too small for the Strichartz factor (log log M <= 0)"));
        None
    };
    let eps_below_eta = eta_r.is_some_and(|e| eps <= e);
    let mode_below_cutoff = two_k < eps.powf(-upsilon);
    if gamma >= 1.0 {
        notes.push(format!("gamma = {gamma:.3e} is not below 1"));
    }
    if !r_in_band {
        notes.push(format!("r = {r} exceeds 2 r_star = {:.3}", 2.0 * r_star));
    }
    if !eps_below_eta {
        notes.push("eps exceeds eta_r".into());
    }
    if !mode_below_cutoff {
        notes.push(format!("2<k> = {two_k:.3} is not below eps^-upsilon = {:.3}", eps.powf(-upsilon)));
    }
    Ok(Plan {
        inputs: inputs.clone(),
        upsilon,
        alpha_nu,
        r_star,
        r,
        r_in_band,
        gamma,
        m,
        t_eps,
        t_drift: t_eps.min(MAX_DRIFT_TIME),
        eta_r,
        eps_r: eta_r.map(|e| e / 2.0),
        eps_below_eta,
        mode_below_cutoff,
        feasible: eps_below_eta && mode_below_cutoff && gamma < 1.0,
        notes,
    })
}

/// Fourier coefficients of `|u|^4 u` on `[-5M, 5M]` via a zero-padded FFT, for cross-checks.
pub fn quintic_convolution_fft(u: &State, ms: &ModeSet) -> Result<Vec<Complex64>> {
    if !ms.is_symmetric() || u.len() != ms.len() {
        return Err(Error::ModeSetMismatch("need a state on a symmetric window".into()));
    }
    let m = ms.m_param() as i32;
    let n = (10 * m as usize + 2).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (&k, z) in ms.modes().iter().zip(u.iter()) {
        buf[k.rem_euclid(n as i32) as usize] = *z;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for z in buf.iter_mut() {
        *z *= z.norm_sqr().powi(2);
    }
    planner.plan_fft_forward(n).process(&mut buf);
    Ok((-5 * m..=5 * m).map(|k| buf[k.rem_euclid(n as i32) as usize] / n as f64).collect())
}

/// Closed-form phase of the one-mode flow: `u(t) = exp(-i (omega + sigma c6 |u|^4) t) u(0)`.
pub fn single_mode_solution(omega: f64, sigma_c6: f64, u0: Complex64, t: f64) -> Complex64 {
    u0 * (-I * (omega + sigma_c6 * u0.norm_sqr().powi(2)) * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::build_z2;

    fn free_system(m: u32) -> (ModeSet, FrequencySet, HomPoly) {
        let ms = ModeSet::window(m);
        let om = FrequencySet::free(&ms).unwrap();
        let z2 = build_z2(&om);
        (ms, om, z2)
    }

    #[test]
    fn linear_flow_rotates_phases() {
        let (ms, om, z2) = free_system(2);
        let u0 = random_state(ms.len(), 0.3, 1);
        let zero = HomPoly::zero(&ms, 3);
        let t = 2.0;
        let dt = 1e-4;
        let tr = integrate(&z2, &zero, &u0, t, &IntegrateOptions { dt, sample_every: 1000, tol: 1e-14 }).unwrap();
        let last = tr.states.last().unwrap();
        for (j, w) in om.omega().iter().enumerate() {
            let exact = u0[j] * (-I * w * t).exp();
            let phase_err = dt * dt * w.powi(3) * t / 12.0 * u0[j].norm() + 1e-13;
            assert!((last[j] - exact).norm() <= 1.5 * phase_err, "mode {j}");
        }
        assert!(tr.norm_drift() < 1e-12);
        assert_eq!(linear_comparison(&om, &zero, &u0, t, &IntegrateOptions::new(1e-2)).unwrap(), 0.0);
    }

    #[test]
    fn single_mode_matches_closed_form() {
        let ms = ModeSet::new(vec![0], 0).unwrap();
        let om = FrequencySet::from_parts(&ms, vec![1], vec![-0.7]).unwrap();
        let z2 = build_z2(&om);
        let p6 = build_p6(&ms, 1.0, 2.0);
        let u0 = State(vec![Complex64::new(0.6, 0.2)]);
        let (t, dt) = (3.0, 1e-4);
        let tr = integrate(&z2, &p6, &u0, t, &IntegrateOptions::new(dt)).unwrap();
        let exact = single_mode_solution(0.3, 2.0, u0[0], t);
        // Phase lag per step: Cayley angle w^3 h^3 / 12 plus the midpoint modulus shrinking
        // by cos(w h / 2), which lowers the nonlinear frequency by c |u|^4 (w h)^2 / 2.
        let nl = 2.0 * u0[0].norm_sqr().powi(2);
        let w = 0.3 + nl;
        let lag = (w.powi(3) / 12.0 + nl * w * w / 2.0) * dt * dt * t;
        let err = (tr.states.last().unwrap()[0] - exact).norm() / u0[0].norm();
        assert!((err / lag - 1.0).abs() < 0.05, "err {err} predicted {lag}");
    }

    #[test]
    fn energy_drift_is_second_order() {
        let (ms, _, z2) = free_system(2);
        let p6 = build_p6(&ms, 1.0, 1.0);
        let u0 = random_state(ms.len(), 0.8, 3);
        let drift = |dt: f64| {
            let tr = integrate(&z2, &p6, &u0, 2.0, &IntegrateOptions::new(dt)).unwrap();
            assert!(tr.norm_drift() < 1e-12);
            let e = &tr.energy;
            (e.last().unwrap() - e[0]).abs().max(tr.energy_drift())
        };
        let ratio = drift(0.02) / drift(0.01);
        assert!((ratio - 4.0).abs() < 0.6, "ratio {ratio}");
    }

    #[test]
    fn gauge_phase_leaves_actions() {
        let (ms, _, z2) = free_system(2);
        let p6 = build_p6(&ms, -1.0, 1.0);
        let u0 = random_state(ms.len(), 0.5, 4);
        let rot = State(u0.iter().map(|z| z * Complex64::from_polar(1.0, 0.9)).collect());
        let opts = IntegrateOptions { dt: 0.01, sample_every: 50, tol: 1e-15 };
        let a = integrate(&z2, &p6, &u0, 2.0, &opts).unwrap();
        let b = integrate(&z2, &p6, &rot, 2.0, &opts).unwrap();
        for (x, y) in a.actions.iter().zip(&b.actions) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_comparison_scales_as_fifth_power() {
        let (ms, om, _) = free_system(2);
        let p6 = build_p6(&ms, 1.0, 1.0);
        let opts = IntegrateOptions::new(0.01);
        let dev = |eps: f64| linear_comparison(&om, &p6, &random_state(ms.len(), eps, 5), 0.5, &opts).unwrap();
        let ratio = dev(0.2) / dev(0.1);
        assert!((ratio / 32.0 - 1.0).abs() < 0.2, "ratio {ratio}");
        assert_eq!(dev_zero_time(&om, &p6, &ms), 0.0);
    }

    fn dev_zero_time(om: &FrequencySet, p6: &HomPoly, ms: &ModeSet) -> f64 {
        linear_comparison(om, p6, &random_state(ms.len(), 0.1, 5), 0.0, &IntegrateOptions::new(0.01)).unwrap()
    }

    #[test]
    fn quintic_convolution_matches_fft_and_gradient() {
        let ms = ModeSet::window(3);
        let u = random_state(ms.len(), 1.0, 6);
        let direct = quintic_convolution(&u, &ms).unwrap();
        let fft = quintic_convolution_fft(&u, &ms).unwrap();
        for (a, b) in direct.iter().zip(&fft) {
            assert!((a - b).norm() < 1e-13);
        }
        let grad = build_p6(&ms, 1.0, 1.0).gradient(&u).unwrap();
        for (j, g) in grad.iter().enumerate() {
            assert!((g - direct[12 + j]).norm() < 1e-13);
        }
    }

    #[test]
    fn remainder_support_cases() {
        let fine = ModeSet::window(10);
        let mut u = State::zeros(fine.len());
        u[fine.position(0).unwrap()] = Complex64::new(0.3, 0.1);
        assert!(remainder_g(&u, &fine, 2, 1.0, 1.0).unwrap().iter().all(|z| z.norm() == 0.0));
        // a single mode m > M produces only the output mode m
        let mut v = State::zeros(fine.len());
        v[fine.position(7).unwrap()] = Complex64::new(0.2, 0.0);
        assert!(remainder_g(&v, &fine, 3, 1.0, 1.0).unwrap().iter().all(|z| z.norm() == 0.0));
        assert!(remainder_g(&v, &fine, 10, 1.0, 1.0).is_err());
    }

    #[test]
    fn split_step_free_and_nonlinear() {
        let (ms, _, z2) = free_system(3);
        let u0 = random_state(ms.len(), 0.3, 7);
        let free = split_step(&u0, &ms, 1.0, 0.0, 1.0, 0.1).unwrap();
        for (j, &k) in ms.modes().iter().enumerate() {
            let exact = u0[j] * (-I * (k * k) as f64).exp();
            assert!((free[j] - exact).norm() < 1e-14);
        }
        let p6 = build_p6(&ms, 1.0, 1.0);
        let t = 0.1;
        let ss = split_step(&u0, &ms, 1.0, 1.0, t, 1e-4).unwrap();
        let mp = integrate(&z2, &p6, &u0, t, &IntegrateOptions { dt: 1e-4, sample_every: 100_000, tol: 1e-15 }).unwrap();
        let diff = ss.sub(mp.states.last().unwrap()).norm();
        assert!(diff < 1e-6 * u0.norm(), "diff {diff}");
    }

    #[test]
    fn plan_formulas() {
        let inputs = PlanInputs { eps: 1e-2, nu: 1.0, alpha: 1.0, s: 1.0, beta_s: 1.0, rho: 0.5, kappa: 1.0, c: 1.0, k: 1 };
        let p = plan_parameters(&inputs).unwrap();
        assert!((p.upsilon - (-3f64).exp() / 16.0).abs() < 1e-15);
        assert!((p.upsilon - 3.112e-3).abs() < 1e-6);
        assert!((p.alpha_nu - 1.0 - 16f64.ln() / 3.0).abs() < 1e-15);
        assert!((p.alpha_nu - 1.9242).abs() < 1e-4);
        assert!(p.r >= 3);
        assert!(p.gamma > 0.0 && p.gamma < 1.0);
        assert!(p.m >= inputs.eps.powf(-p.upsilon));
        assert!(!p.feasible);
        let other = plan_parameters(&PlanInputs { s: 3.0, ..inputs.clone() }).unwrap();
        assert_eq!(other.upsilon, p.upsilon);
        assert!(plan_parameters(&PlanInputs { nu: 2.5, ..inputs.clone() }).is_err());
        assert!(plan_parameters(&PlanInputs { rho: 0.0, ..inputs }).is_err());
    }

    #[test]
    fn free_flow_has_no_action_drift() {
        let (ms, _, z2) = free_system(2);
        let cfg = DriftConfig { mode: 1, eps: vec![0.1, 0.05], t_final: 5.0, dt: 0.01, seed: 9, transform_every: 10 };
        let rep = action_drift(&z2, &HomPoly::zero(&ms, 3), &[], &MidpointOptions::default(), &cfg, None).unwrap();
        // only rounding of the Cayley rotation remains
        assert!(rep.rows.iter().all(|r| r.raw_drift < 1e-13 * r.eps * r.eps));
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let x = [1.0, 2.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 1.5).abs() < 1e-12);
        assert!(loglog_slope(&x, &[1.0, 0.0, 1.0]).is_none());
    }
}
