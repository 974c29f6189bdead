//! Multistart projected-gradient ascent on the unit sphere.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::poly::{CompiledPoly, HomPoly, MAX_HALF_DEGREE};

const MAX_BACKTRACK: usize = 40;
const STALL_TOL: f64 = 1e-13;

/// Polynomial with nonnegative real monomial coefficients, evaluated on `u >= 0`.
pub(crate) struct PosPoly {
    d: usize,
    n: usize,
    coeffs: Vec<f64>,
    slots: Vec<u8>,
}

impl PosPoly {
    pub fn from_modulus(p: &HomPoly) -> Self {
        let d = p.degree();
        let mut slots = Vec::with_capacity(d * p.len());
        for t in p.terms() {
            slots.extend_from_slice(t.key.k());
            slots.extend_from_slice(t.key.l());
        }
        Self {
            d,
            n: p.mode_set().len(),
            coeffs: p.terms().iter().map(|t| t.coeff.norm() * t.class_size).collect(),
            slots,
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(self.d)) {
            acc += s.iter().fold(*a, |p, &i| p * u[i as usize]);
        }
        acc
    }

    fn eval_grad(&self, u: &[f64], g: &mut [f64]) -> f64 {
        g.iter_mut().for_each(|x| *x = 0.0);
        let d = self.d;
        let mut pre = [0.0f64; 2 * MAX_HALF_DEGREE + 1];
        let mut acc = 0.0;
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(d)) {
            pre[0] = *a;
            for t in 0..d {
                pre[t + 1] = pre[t] * u[s[t] as usize];
            }
            acc += pre[d];
            let mut suf = 1.0;
            for t in (0..d).rev() {
                g[s[t] as usize] += pre[t] * suf;
                suf *= u[s[t] as usize];
            }
        }
        acc
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn normalize_c(v: &mut [Complex64]) -> bool {
    let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn ascend_pos(p: &PosPoly, mut u: Vec<f64>, steps: usize) -> (f64, Vec<f64>) {
    let n = p.n;
    if !normalize(&mut u) {
        u = vec![1.0 / (n as f64).sqrt(); n];
    }
    let mut g = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut f = p.eval_grad(&u, &mut g);
    let mut eta = 1.0 / (p.d as f64 * f.max(1e-300));
    for _ in 0..steps {
        let radial: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut improved = false;
        for _ in 0..MAX_BACKTRACK {
            for j in 0..n {
                cand[j] = (u[j] + eta * (g[j] - radial * u[j])).max(0.0);
            }
            if normalize(&mut cand) {
                let fc = p.eval(&cand);
                if fc > f {
                    let gain = fc - f;
                    std::mem::swap(&mut u, &mut cand);
                    f = p.eval_grad(&u, &mut g);
                    eta *= 2.0;
                    improved = gain > STALL_TOL * f;
                    break;
                }
            }
            eta *= 0.25;
        }
        if !improved {
            break;
        }
    }
    (f, u)
}

fn eval_abs2(p: &CompiledPoly, u: &[Complex64]) -> f64 {
    p.eval(u).norm_sqr()
}

fn ascend_abs(p: &CompiledPoly, mut u: Vec<Complex64>, steps: usize) -> (f64, Vec<Complex64>) {
    let n = u.len();
    normalize_c(&mut u);
    let d = 2 * p.half_degree();
    let mut du = vec![Complex64::new(0.0, 0.0); n];
    let mut db = vec![Complex64::new(0.0, 0.0); n];
    let mut g = vec![Complex64::new(0.0, 0.0); n];
    let mut cand = vec![Complex64::new(0.0, 0.0); n];
    let grad = |u: &[Complex64], du: &mut [Complex64], db: &mut [Complex64], g: &mut [Complex64]| {
        let v = p.wirtinger(u, du, db);
        for j in 0..u.len() {
            g[j] = (v * du[j].conj() + v.conj() * db[j]) * 2.0;
        }
        v.norm_sqr()
    };
    let mut f = grad(&u, &mut du, &mut db, &mut g);
    let mut eta = 1.0 / (2.0 * d as f64 * f.max(1e-300));
    for _ in 0..steps {
        let radial: f64 = g.iter().zip(&u).map(|(a, b)| (a * b.conj()).re).sum();
        let mut improved = false;
        for _ in 0..MAX_BACKTRACK {
            for j in 0..n {
                cand[j] = u[j] + (g[j] - u[j] * radial) * eta;
            }
            if normalize_c(&mut cand) {
                let fc = eval_abs2(p, &cand);
                if fc > f {
                    let gain = fc - f;
                    std::mem::swap(&mut u, &mut cand);
                    f = grad(&u, &mut du, &mut db, &mut g);
                    eta *= 2.0;
                    improved = gain > STALL_TOL * f;
                    break;
                }
            }
            eta *= 0.25;
        }
        if !improved {
            break;
        }
    }
    (f, u)
}

fn rng_for(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

/// Returns the best value and point over all starts; ties go to the lowest start index.
fn best_of<T: Send>(results: Vec<(f64, T)>) -> (f64, T) {
    let mut best: Option<(f64, T)> = None;
    for (v, x) in results {
        match &best {
            Some((bv, _)) if !(v > *bv) => {}
            _ => best = Some((v, x)),
        }
    }
    best.expect("at least one start")
}

/// Maximizes a nonnegative-coefficient polynomial over the nonnegative part of the unit sphere.
pub(crate) fn maximize_pos(p: &PosPoly, starts: usize, steps: usize, seed: u64, extra: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = p.n;
    if p.len() == 0 {
        let mut u = vec![0.0; n];
        u[0] = 1.0;
        return (0.0, u);
    }
    let starts = starts.max(2);
    let mut inits: Vec<Vec<f64>> = Vec::with_capacity(starts + extra.len());
    inits.push(vec![1.0; n]);
    let best_unit = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            (p.eval(&e), j)
        })
        .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
    let mut e = vec![0.0; n];
    e[best_unit.1] = 1.0;
    inits.push(e);
    for s in 2..starts {
        let mut rng = rng_for(seed, s);
        inits.push((0..n).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect());
    }
    inits.extend(extra.iter().cloned());
    let results: Vec<(f64, Vec<f64>)> = inits.into_par_iter().map(|u0| ascend_pos(p, u0, steps)).collect();
    best_of(results)
}

/// Maximizes `|P(u)|` over the complex unit sphere; returns `(|P|, u)`.
pub(crate) fn maximize_abs(p: &HomPoly, starts: usize, steps: usize, seed: u64) -> (f64, Vec<Complex64>) {
    let n = p.mode_set().len();
    let cp = CompiledPoly::new(p);
    let starts = starts.max(2);
    let mut inits: Vec<Vec<Complex64>> = Vec::with_capacity(starts);
    inits.push(vec![Complex64::new(1.0, 0.0); n]);
    for s in 1..starts {
        let mut rng = rng_for(seed, s);
        inits.push(
            (0..n)
                .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect(),
        );
    }
    let results: Vec<(f64, Vec<Complex64>)> =
        inits.into_par_iter().map(|u0| ascend_abs(&cp, u0, steps)).collect();
    let (v, u) = best_of(results);
    (v.sqrt(), u)
}
