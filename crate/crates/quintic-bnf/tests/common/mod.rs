#![allow(dead_code)]

use std::collections::BTreeMap;

use num_complex::Complex64;
use quintic_bnf::{HomPoly, ModeSet, MonomialKey};
use rand::Rng;

/// Expanded polynomial: exponent vectors `(alpha, beta)` of `u^alpha conj(u)^beta`.
pub type Dense = BTreeMap<(Vec<u32>, Vec<u32>), Complex64>;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn exponents(n: usize, pos: &[u8]) -> Vec<u32> {
    let mut e = vec![0; n];
    for &p in pos {
        e[p as usize] += 1;
    }
    e
}

pub fn to_dense(p: &HomPoly) -> Dense {
    let n = p.mode_set().len();
    let mut d = Dense::new();
    for t in p.terms() {
        *d.entry((exponents(n, t.key.k()), exponents(n, t.key.l()))).or_default() += t.monomial_coeff();
    }
    d
}

fn add_into(d: &mut Dense, key: (Vec<u32>, Vec<u32>), c: Complex64) {
    *d.entry(key).or_default() += c;
}

/// `{P, Q} = 2i sum_j (dP/d conj(u_j) dQ/du_j - dP/du_j dQ/d conj(u_j))`, on expanded monomials.
pub fn dense_bracket(p: &Dense, q: &Dense) -> Dense {
    let mut out = Dense::new();
    for ((pa, pb), cp) in p {
        for ((qa, qb), cq) in q {
            let n = pa.len();
            for j in 0..n {
                // d/d conj(u_j) on P, d/du_j on Q
                if pb[j] > 0 && qa[j] > 0 {
                    let mut a: Vec<u32> = pa.iter().zip(qa).map(|(x, y)| x + y).collect();
                    let mut b: Vec<u32> = pb.iter().zip(qb).map(|(x, y)| x + y).collect();
                    a[j] -= 1;
                    b[j] -= 1;
                    add_into(&mut out, (a, b), 2.0 * I * cp * cq * (pb[j] * qa[j]) as f64);
                }
                if pa[j] > 0 && qb[j] > 0 {
                    let mut a: Vec<u32> = pa.iter().zip(qa).map(|(x, y)| x + y).collect();
                    let mut b: Vec<u32> = pb.iter().zip(qb).map(|(x, y)| x + y).collect();
                    a[j] -= 1;
                    b[j] -= 1;
                    add_into(&mut out, (a, b), -2.0 * I * cp * cq * (pa[j] * qb[j]) as f64);
                }
            }
        }
    }
    out
}

/// Largest coefficient gap, relative to `scale`.
pub fn dense_gap(a: &Dense, b: &Dense, scale: f64) -> f64 {
    let zero = Complex64::new(0.0, 0.0);
    a.keys()
        .chain(b.keys())
        .map(|k| (a.get(k).copied().unwrap_or(zero) - b.get(k).copied().unwrap_or(zero)).norm())
        .fold(0.0, f64::max)
        / scale.max(f64::MIN_POSITIVE)
}

pub fn dense_max(a: &Dense) -> f64 {
    a.values().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn poly_gap(a: &HomPoly, b: &HomPoly) -> f64 {
    let scale = dense_max(&to_dense(a)).max(dense_max(&to_dense(b)));
    dense_gap(&to_dense(a), &to_dense(b), scale)
}

fn random_positions<R: Rng>(rng: &mut R, n: usize, q: usize) -> Vec<u8> {
    (0..q).map(|_| rng.random_range(0..n) as u8).collect()
}

fn random_coeff<R: Rng>(rng: &mut R) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Sparse polynomial with `terms` random keys; `real` adds the conjugate of every term.
pub fn random_poly<R: Rng>(rng: &mut R, ms: &ModeSet, q: usize, terms: usize, real: bool) -> HomPoly {
    let n = ms.len();
    let mut items = Vec::new();
    for _ in 0..terms {
        let key = MonomialKey::new(&random_positions(rng, n, q), &random_positions(rng, n, q)).unwrap();
        let c = random_coeff(rng);
        items.push((key, c));
        if real {
            items.push((key.swapped(), c.conj()));
        }
    }
    HomPoly::from_terms(ms, q, items).unwrap()
}

/// Like `random_poly` but every key conserves momentum, so spectral levels are even.
pub fn random_momentum_poly<R: Rng>(rng: &mut R, ms: &ModeSet, q: usize, terms: usize, real: bool) -> HomPoly {
    let n = ms.len();
    let mut items = Vec::new();
    while items.len() < terms * if real { 2 } else { 1 } {
        let k = random_positions(rng, n, q);
        let l = random_positions(rng, n, q);
        let mom = |s: &[u8]| s.iter().map(|&p| ms.mode(p as usize)).sum::<i32>();
        if mom(&k) != mom(&l) {
            continue;
        }
        let key = MonomialKey::new(&k, &l).unwrap();
        let c = random_coeff(rng);
        items.push((key, c));
        if real {
            items.push((key.swapped(), c.conj()));
        }
    }
    HomPoly::from_terms(ms, q, items).unwrap()
}
