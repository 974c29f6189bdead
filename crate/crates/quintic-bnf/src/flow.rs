//! Implicit midpoint steps for `i du/dt = L u + grad N(u)` with diagonal real `L`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::CompiledPoly;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Step size and nonlinear-solver controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidpointOptions {
    pub dt: f64,
    /// Relative tolerance on the solver update.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MidpointOptions {
    fn default() -> Self {
        Self { dt: 0.1, tol: 1e-14, max_iter: 50 }
    }
}

/// Vector field `-i (lin * x + grad nl(x))`.
pub(crate) struct Field<'a> {
    pub lin: Option<&'a [f64]>,
    pub nl: Option<&'a CompiledPoly>,
}

impl Field<'_> {
    fn grad_nl(&self, x: &[Complex64], out: &mut [Complex64]) {
        out.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        if let Some(p) = self.nl {
            p.gradient_into(x, out);
        }
    }

    /// One implicit midpoint step of size `h`.
    pub fn step(&self, u: &[Complex64], h: f64, opts: &MidpointOptions) -> Result<Vec<Complex64>> {
        let n = u.len();
        let scale = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let lin = |j: usize| self.lin.map_or(0.0, |l| l[j]);
        // w = D^{-1} [ (1 - i h L / 2) u - i h G((u + w) / 2) ],  D = 1 + i h L / 2
        let rhs0: Vec<Complex64> = (0..n).map(|j| u[j] * (1.0 - I * (h * lin(j) / 2.0))).collect();
        let dinv: Vec<Complex64> = (0..n).map(|j| 1.0 / (1.0 + I * (h * lin(j) / 2.0))).collect();
        let guess: Vec<Complex64> = (0..n).map(|j| rhs0[j] * dinv[j]).collect();
        if self.nl.is_none() {
            return Ok(guess);
        }
        let mut w = guess.clone();
        let mut m = vec![Complex64::new(0.0, 0.0); n];
        let mut g = vec![Complex64::new(0.0, 0.0); n];
        let mut prev_delta = f64::INFINITY;
        let mut delta = f64::INFINITY;
        for it in 0..opts.max_iter {
            for j in 0..n {
                m[j] = (u[j] + w[j]) * 0.5;
            }
            self.grad_nl(&m, &mut g);
            delta = 0.0;
            for j in 0..n {
                let nw = (rhs0[j] - I * h * g[j]) * dinv[j];
                delta += (nw - w[j]).norm_sqr();
                w[j] = nw;
            }
            delta = delta.sqrt();
            if delta <= opts.tol * scale {
                return Ok(w);
            }
            if !delta.is_finite() || (it >= 3 && delta > 0.5 * prev_delta) {
                return self.newton(u, guess, h, opts);
            }
            prev_delta = delta;
        }
        Err(Error::NewtonNonConvergence { iterations: opts.max_iter, residual: delta / scale })
    }

    fn newton(&self, u: &[Complex64], mut w: Vec<Complex64>, h: f64, opts: &MidpointOptions) -> Result<Vec<Complex64>> {
        let n = u.len();
        let nl = self.nl.expect("newton needs a nonlinearity");
        let scale = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let lin = |j: usize| self.lin.map_or(0.0, |l| l[j]);
        let mut m = vec![Complex64::new(0.0, 0.0); n];
        let mut g = vec![Complex64::new(0.0, 0.0); n];
        let mut dir = vec![Complex64::new(0.0, 0.0); n];
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        let mut last = f64::INFINITY;
        for _ in 0..opts.max_iter {
            for j in 0..n {
                m[j] = (u[j] + w[j]) * 0.5;
            }
            self.grad_nl(&m, &mut g);
            // F(w) = D w - (1 - i h L/2) u + i h G(m)
            let f: Vec<Complex64> = (0..n)
                .map(|j| {
                    w[j] * (1.0 + I * (h * lin(j) / 2.0)) - u[j] * (1.0 - I * (h * lin(j) / 2.0)) + I * h * g[j]
                })
                .collect();
            let mut jac = DMatrix::<f64>::zeros(2 * n, 2 * n);
            for c in 0..2 * n {
                dir.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                dir[c / 2] = if c % 2 == 0 { Complex64::new(1.0, 0.0) } else { I };
                col.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                nl.hessian_apply_into(&m, &dir, &mut col);
                for j in 0..n {
                    let v = dir[j] * (1.0 + I * (h * lin(j) / 2.0)) + I * (h / 2.0) * col[j];
                    jac[(2 * j, c)] = v.re;
                    jac[(2 * j + 1, c)] = v.im;
                }
            }
            let rhs = DVector::from_iterator(2 * n, f.iter().flat_map(|z| [-z.re, -z.im]));
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or(Error::NewtonNonConvergence { iterations: 0, residual: f64::NAN })?;
            let mut delta = 0.0;
            for j in 0..n {
                let d = Complex64::new(step[2 * j], step[2 * j + 1]);
                w[j] += d;
                delta += d.norm_sqr();
            }
            last = delta.sqrt();
            if last <= opts.tol * scale {
                return Ok(w);
            }
        }
        Err(Error::NewtonNonConvergence { iterations: opts.max_iter, residual: last / scale })
    }

    /// Advances by time `t` with steps of size at most `opts.dt`.
    pub fn advance(&self, u: &[Complex64], t: f64, opts: &MidpointOptions) -> Result<Vec<Complex64>> {
        if t == 0.0 {
            return Ok(u.to_vec());
        }
        let steps = (t.abs() / opts.dt).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        let mut x = u.to_vec();
        for _ in 0..steps {
            x = self.step(&x, h, opts)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{HomPoly, ModeSet, MonomialKey};

    #[test]
    fn linear_step_is_cayley_rotation() {
        let lin = [2.0, -1.0];
        let f = Field { lin: Some(&lin), nl: None };
        let u = [Complex64::new(1.0, 0.5), Complex64::new(-0.2, 0.3)];
        let h = 0.1;
        let w = f.step(&u, h, &MidpointOptions::default()).unwrap();
        for j in 0..2 {
            let z = (1.0 - I * h * lin[j] / 2.0) / (1.0 + I * h * lin[j] / 2.0);
            assert!((w[j] - u[j] * z).norm() < 1e-15);
        }
    }

    #[test]
    fn newton_handles_stiff_nonlinearity() {
        let ms = ModeSet::new(vec![0], 0).unwrap();
        let key = MonomialKey::from_modes(&ms, &[0, 0], &[0, 0]).unwrap();
        let p = HomPoly::from_terms(&ms, 2, [(key, Complex64::new(0.5, 0.0))]).unwrap();
        let cp = CompiledPoly::new(&p);
        let f = Field { lin: None, nl: Some(&cp) };
        let u = [Complex64::new(1.5, 0.0)];
        let opts = MidpointOptions { dt: 1.0, ..Default::default() };
        let w = f.step(&u, 1.0, &opts).unwrap();
        // the midpoint map is a rotation by the angle 2 atan(|m|^2 h) with |w| = |u|
        assert!((w[0].norm() - 1.5).abs() < 1e-13);
        let m = (u[0] + w[0]) * 0.5;
        let resid = w[0] - u[0] + I * (m * (2.0 * m.norm_sqr()));
        assert!(resid.norm() < 1e-12);
    }
}
