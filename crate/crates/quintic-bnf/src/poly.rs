//! Sparse homogeneous polynomials on `C^modes` that commute with the Euclidean norm.
//!
//! A polynomial of half-degree `q` is stored as one symmetric coefficient per
//! class of ordered index tuples `(k, l)`; the class is represented by the pair of
//! sorted multisets. Evaluation multiplies by the cached class size.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Deref, DerefMut};

use num_complex::Complex64;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::FrequencySet;

/// Largest supported half-degree.
pub const MAX_HALF_DEGREE: usize = 16;
const SLOTS: usize = 2 * MAX_HALF_DEGREE;

const I2: Complex64 = Complex64 { re: 0.0, im: 2.0 };

/// Sorted set of distinct integer modes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSet {
    modes: Vec<i32>,
    m_param: u32,
}

impl ModeSet {
    pub fn new(modes: Vec<i32>, m_param: u32) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidModeSet("empty mode set".into()));
        }
        if !modes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidModeSet("modes must be strictly increasing".into()));
        }
        if modes.len() > 255 {
            return Err(Error::InvalidModeSet(format!("{} modes exceed the limit of 255", modes.len())));
        }
        Ok(Self { modes, m_param })
    }

    /// The symmetric window `-m..=m`.
    pub fn window(m: u32) -> Self {
        let m = m as i32;
        Self { modes: (-m..=m).collect(), m_param: m as u32 }
    }

    /// The Dirichlet window `1..=m`.
    pub fn dirichlet(m: u32) -> Self {
        assert!(m >= 1, "dirichlet window needs m >= 1");
        Self { modes: (1..=m as i32).collect(), m_param: m }
    }

    pub fn modes(&self) -> &[i32] {
        &self.modes
    }

    pub fn m_param(&self) -> u32 {
        self.m_param
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn position(&self, mode: i32) -> Option<usize> {
        self.modes.binary_search(&mode).ok()
    }

    pub fn mode(&self, pos: usize) -> i32 {
        self.modes[pos]
    }

    pub fn is_symmetric(&self) -> bool {
        self.modes.iter().zip(self.modes.iter().rev()).all(|(a, b)| *a == -*b)
    }
}

/// Canonical representative of a class of balanced monomials: two sorted
/// multisets of mode positions of equal size `q`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MonomialKey {
    q: u8,
    slots: [u8; SLOTS],
}

impl MonomialKey {
    /// Builds a key from unsorted position lists.
    pub fn new(k: &[u8], l: &[u8]) -> Result<Self> {
        if k.len() != l.len() || k.is_empty() {
            return Err(Error::InvalidInput(format!(
                "unbalanced key: |k| = {}, |l| = {}",
                k.len(),
                l.len()
            )));
        }
        if k.len() > MAX_HALF_DEGREE {
            return Err(Error::DegreeOverflow(k.len()));
        }
        let q = k.len();
        let mut slots = [0u8; SLOTS];
        slots[..q].copy_from_slice(k);
        slots[q..2 * q].copy_from_slice(l);
        slots[..q].sort_unstable();
        slots[q..2 * q].sort_unstable();
        Ok(Self { q: q as u8, slots })
    }

    /// Builds a key from mode values.
    pub fn from_modes(ms: &ModeSet, k: &[i32], l: &[i32]) -> Result<Self> {
        let pos = |m: &i32| {
            ms.position(*m)
                .map(|p| p as u8)
                .ok_or_else(|| Error::ModeSetMismatch(format!("mode {m} not in mode set")))
        };
        let kp = k.iter().map(pos).collect::<Result<Vec<_>>>()?;
        let lp = l.iter().map(pos).collect::<Result<Vec<_>>>()?;
        Self::new(&kp, &lp)
    }

    #[inline]
    pub(crate) fn from_sorted(k: &[u8], l: &[u8]) -> Self {
        debug_assert!(k.windows(2).all(|w| w[0] <= w[1]));
        debug_assert!(l.windows(2).all(|w| w[0] <= w[1]));
        let q = k.len();
        let mut slots = [0u8; SLOTS];
        slots[..q].copy_from_slice(k);
        slots[q..2 * q].copy_from_slice(l);
        Self { q: q as u8, slots }
    }

    #[inline]
    pub fn half_degree(&self) -> usize {
        self.q as usize
    }

    /// Holomorphic positions.
    #[inline]
    pub fn k(&self) -> &[u8] {
        &self.slots[..self.q as usize]
    }

    /// Antiholomorphic positions.
    #[inline]
    pub fn l(&self) -> &[u8] {
        let q = self.q as usize;
        &self.slots[q..2 * q]
    }

    pub fn k_modes(&self, ms: &ModeSet) -> Vec<i32> {
        self.k().iter().map(|&p| ms.mode(p as usize)).collect()
    }

    pub fn l_modes(&self, ms: &ModeSet) -> Vec<i32> {
        self.l().iter().map(|&p| ms.mode(p as usize)).collect()
    }

    /// The conjugate class `(l, k)`.
    pub fn swapped(&self) -> Self {
        Self::from_sorted(self.l(), self.k())
    }

    pub fn is_diagonal(&self) -> bool {
        self.k() == self.l()
    }

    /// Number of ordered tuples `(k, l)` in this class.
    pub fn class_size(&self) -> f64 {
        multinomial(self.k()) * multinomial(self.l())
    }

    pub fn mult_k(&self, pos: u8) -> usize {
        self.k().iter().filter(|&&p| p == pos).count()
    }

    pub fn mult_l(&self, pos: u8) -> usize {
        self.l().iter().filter(|&&p| p == pos).count()
    }
}

impl fmt::Debug for MonomialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}|{:?}", self.k(), self.l())
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// `q! / prod(mult!)` for a sorted slice.
pub(crate) fn multinomial(sorted: &[u8]) -> f64 {
    let mut denom = 1.0;
    let mut run = 1usize;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
            denom *= run as f64;
        } else {
            run = 1;
        }
    }
    factorial(sorted.len()) / denom
}

/// Calls `f` on every nondecreasing sequence of length `q` over `0..n`, in lexicographic order.
pub(crate) fn for_each_multiset(n: usize, q: usize, mut f: impl FnMut(&[u8])) {
    if n == 0 || q == 0 {
        return;
    }
    let mut cur = vec![0u8; q];
    loop {
        f(&cur);
        let mut i = q;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if (cur[i] as usize) + 1 < n {
                let v = cur[i] + 1;
                for c in &mut cur[i..] {
                    *c = v;
                }
                break;
            }
        }
    }
}

/// Merges two sorted slices into `out`, skipping one occurrence of `skip`.
#[inline]
fn merge_skip(a: &[u8], b: &[u8], skip: u8, out: &mut [u8]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    let mut skipped = false;
    while i < a.len() || j < b.len() {
        let v = if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if !skipped && v == skip {
            skipped = true;
            continue;
        }
        out[n] = v;
        n += 1;
    }
    n
}

/// A complex vector indexed by the positions of a mode set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State(pub Vec<Complex64>);

impl State {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn from_real(v: &[f64]) -> Self {
        Self(v.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm2().sqrt()
    }

    /// Real inner product `Re sum u_k conj(v_k)`.
    pub fn dot_re(&self, other: &State) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a * b.conj()).re).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|z| z * s).collect())
    }

    pub fn axpy(&self, s: Complex64, other: &State) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + s * b).collect())
    }

    pub fn sub(&self, other: &State) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn abs(&self) -> Self {
        Self(self.0.iter().map(|z| Complex64::new(z.norm(), 0.0)).collect())
    }

    pub fn actions(&self) -> Vec<f64> {
        self.0.iter().map(|z| z.norm_sqr()).collect()
    }
}

impl Deref for State {
    type Target = [Complex64];
    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

impl DerefMut for State {
    fn deref_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }
}

/// One stored class: symmetric coefficient and cached class size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub key: MonomialKey,
    pub coeff: Complex64,
    pub class_size: f64,
}

impl Term {
    fn new(key: MonomialKey, coeff: Complex64) -> Self {
        Self { key, coeff, class_size: key.class_size() }
    }

    /// Coefficient of the monomial `u^k conj(u)^l` once the class is summed.
    #[inline]
    pub fn monomial_coeff(&self) -> Complex64 {
        self.coeff * self.class_size
    }
}

/// Homogeneous polynomial of degree `2q` with balanced monomials.
#[derive(Clone, Debug, PartialEq)]
pub struct HomPoly {
    modes: ModeSet,
    q: usize,
    terms: Vec<Term>,
}

impl HomPoly {
    pub fn zero(ms: &ModeSet, q: usize) -> Self {
        Self { modes: ms.clone(), q, terms: Vec::new() }
    }

    /// Collects `(key, symmetric coefficient)` pairs; duplicate keys are summed.
    pub fn from_terms<I>(ms: &ModeSet, q: usize, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (MonomialKey, Complex64)>,
    {
        if q == 0 || q > MAX_HALF_DEGREE {
            return Err(Error::DegreeOverflow(q));
        }
        let n = ms.len();
        let mut map: FxHashMap<MonomialKey, Complex64> = FxHashMap::default();
        for (key, c) in items {
            if key.half_degree() != q {
                return Err(Error::InvalidInput(format!(
                    "key of half-degree {} in a polynomial of half-degree {q}",
                    key.half_degree()
                )));
            }
            if key.k().iter().chain(key.l()).any(|&p| p as usize >= n) {
                return Err(Error::ModeSetMismatch("key position outside mode set".into()));
            }
            *map.entry(key).or_default() += c;
        }
        let mut terms: Vec<Term> = map
            .into_iter()
            .filter(|(_, c)| *c != Complex64::new(0.0, 0.0))
            .map(|(k, c)| Term::new(k, c))
            .collect();
        terms.sort_unstable_by(|a, b| a.key.cmp(&b.key));
        Ok(Self { modes: ms.clone(), q, terms })
    }

    pub(crate) fn from_sorted_terms(ms: &ModeSet, q: usize, terms: Vec<Term>) -> Self {
        debug_assert!(terms.windows(2).all(|w| w[0].key < w[1].key));
        Self { modes: ms.clone(), q, terms }
    }

    pub fn mode_set(&self) -> &ModeSet {
        &self.modes
    }

    pub fn half_degree(&self) -> usize {
        self.q
    }

    pub fn degree(&self) -> usize {
        2 * self.q
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn coeff(&self, key: &MonomialKey) -> Complex64 {
        match self.terms.binary_search_by(|t| t.key.cmp(key)) {
            Ok(i) => self.terms[i].coeff,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().map(|t| t.coeff.norm()).fold(0.0, f64::max)
    }

    /// Sum over ordered tuples of |coefficient|.
    pub fn ell1(&self) -> f64 {
        self.terms.iter().map(|t| t.coeff.norm() * t.class_size).sum()
    }

    /// Reality condition `P_{l,k} = conj(P_{k,l})` up to a relative tolerance.
    pub fn is_real(&self) -> bool {
        let tol = 1e-12 * self.max_abs_coeff();
        self.terms.iter().all(|t| {
            let other = self.coeff(&t.key.swapped());
            (other - t.coeff.conj()).norm() <= tol
        })
    }

    fn check_modes(&self, other: &HomPoly) -> Result<()> {
        if self.modes != other.modes {
            return Err(Error::ModeSetMismatch("polynomials live on different mode sets".into()));
        }
        Ok(())
    }

    fn check_state(&self, u: &State) -> Result<()> {
        if u.len() != self.modes.len() {
            return Err(Error::ModeSetMismatch(format!(
                "state has {} entries, mode set has {}",
                u.len(),
                self.modes.len()
            )));
        }
        Ok(())
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term { coeff: t.coeff * s, ..*t })
            .filter(|t| t.coeff != Complex64::new(0.0, 0.0))
            .collect();
        Self::from_sorted_terms(&self.modes, self.q, terms)
    }

    /// Keeps the terms satisfying `pred`.
    pub fn filter(&self, mut pred: impl FnMut(&Term) -> bool) -> Self {
        let terms = self.terms.iter().filter(|t| pred(t)).copied().collect();
        Self::from_sorted_terms(&self.modes, self.q, terms)
    }

    /// Applies `f` to each coefficient; zero results are pruned.
    pub fn map_coeffs(&self, mut f: impl FnMut(&Term) -> Complex64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term { coeff: f(t), ..*t })
            .filter(|t| t.coeff != Complex64::new(0.0, 0.0))
            .collect();
        Self::from_sorted_terms(&self.modes, self.q, terms)
    }

    pub fn add(&self, other: &HomPoly) -> Result<Self> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &HomPoly) -> Result<Self> {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &HomPoly, sign: f64) -> Result<Self> {
        self.check_modes(other)?;
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.scale(Complex64::new(sign, 0.0)));
        }
        if self.q != other.q {
            return Err(Error::InvalidInput(format!(
                "cannot add half-degrees {} and {}",
                self.q, other.q
            )));
        }
        let (a, b) = (&self.terms, &other.terms);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            if j >= b.len() || (i < a.len() && a[i].key < b[j].key) {
                out.push(a[i]);
                i += 1;
            } else if i >= a.len() || b[j].key < a[i].key {
                out.push(Term { coeff: b[j].coeff * sign, ..b[j] });
                j += 1;
            } else {
                let c = a[i].coeff + b[j].coeff * sign;
                if c != Complex64::new(0.0, 0.0) {
                    out.push(Term { coeff: c, ..a[i] });
                }
                i += 1;
                j += 1;
            }
        }
        Ok(Self::from_sorted_terms(&self.modes, self.q, out))
    }

    /// The modulus polynomial with coefficients `|P_{k,l}|`.
    pub fn modulus(&self) -> Self {
        self.map_coeffs(|t| Complex64::new(t.coeff.norm(), 0.0))
    }

    pub fn eval(&self, u: &State) -> Result<Complex64> {
        self.check_state(u)?;
        Ok(CompiledPoly::new(self).eval(u))
    }

    /// `(2 d/d conj(u_k) P)_k`.
    pub fn gradient(&self, u: &State) -> Result<State> {
        self.check_state(u)?;
        if !self.is_real() {
            return Err(Error::NonReal);
        }
        let mut out = State::zeros(u.len());
        CompiledPoly::new(self).gradient_into(u, &mut out);
        Ok(out)
    }

    /// Derivative of the gradient field at `u` in direction `v`.
    pub fn hessian_apply(&self, u: &State, v: &State) -> Result<State> {
        self.check_state(u)?;
        self.check_state(v)?;
        if !self.is_real() {
            return Err(Error::NonReal);
        }
        let mut out = State::zeros(u.len());
        CompiledPoly::new(self).hessian_apply_into(u, v, &mut out);
        Ok(out)
    }

    /// Poisson bracket `{self, other}`.
    pub fn poisson(&self, other: &HomPoly) -> Result<HomPoly> {
        poisson(self, other)
    }

    pub fn to_json(&self) -> PolyJson {
        PolyJson {
            degree: self.degree(),
            modes: self.modes.modes().to_vec(),
            entries: self
                .terms
                .iter()
                .map(|t| PolyEntry {
                    k: t.key.k_modes(&self.modes),
                    l: t.key.l_modes(&self.modes),
                    re: t.coeff.re,
                    im: t.coeff.im,
                })
                .collect(),
        }
    }

    pub fn from_json(doc: &PolyJson) -> Result<Self> {
        if doc.degree == 0 || doc.degree % 2 != 0 {
            return Err(Error::InvalidInput(format!("degree {} is not a positive even number", doc.degree)));
        }
        let ms = ModeSet::new(doc.modes.clone(), doc.modes.iter().map(|m| m.unsigned_abs()).max().unwrap_or(0))?;
        let q = doc.degree / 2;
        let mut seen = rustc_hash::FxHashSet::default();
        let mut items = Vec::with_capacity(doc.entries.len());
        for e in &doc.entries {
            if e.k.len() != q || e.l.len() != q {
                return Err(Error::InvalidInput("entry half-degree does not match degree".into()));
            }
            let key = MonomialKey::from_modes(&ms, &e.k, &e.l)?;
            if !seen.insert(key) {
                return Err(Error::InvalidInput(format!("duplicate class {:?}|{:?}", e.k, e.l)));
            }
            items.push((key, Complex64::new(e.re, e.im)));
        }
        Self::from_terms(&ms, q, items)
    }
}

/// JSON document for a polynomial: canonical keys in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyJson {
    pub degree: usize,
    pub modes: Vec<i32>,
    pub entries: Vec<PolyEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyEntry {
    pub k: Vec<i32>,
    pub l: Vec<i32>,
    pub re: f64,
    pub im: f64,
}

/// Flat copy of a polynomial for repeated evaluation.
#[derive(Clone, Debug)]
pub struct CompiledPoly {
    q: usize,
    n: usize,
    coeffs: Vec<Complex64>,
    slots: Vec<u8>,
}

impl CompiledPoly {
    pub fn new(p: &HomPoly) -> Self {
        let q = p.q;
        let mut slots = Vec::with_capacity(2 * q * p.len());
        for t in &p.terms {
            slots.extend_from_slice(t.key.k());
            slots.extend_from_slice(t.key.l());
        }
        Self {
            q,
            n: p.modes.len(),
            coeffs: p.terms.iter().map(Term::monomial_coeff).collect(),
            slots,
        }
    }

    pub fn half_degree(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn eval(&self, u: &[Complex64]) -> Complex64 {
        debug_assert_eq!(u.len(), self.n);
        let q = self.q;
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(2 * q)) {
            let mut p = *a;
            for &i in &s[..q] {
                p *= u[i as usize];
            }
            for &i in &s[q..] {
                p *= u[i as usize].conj();
            }
            acc += p;
        }
        acc
    }

    /// Adds `2 d/d conj(u) P` into `out` (valid as a gradient when `P` is real).
    pub fn gradient_into(&self, u: &[Complex64], out: &mut [Complex64]) {
        let q = self.q;
        let mut pre = [Complex64::new(0.0, 0.0); MAX_HALF_DEGREE + 1];
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(2 * q)) {
            let mut pk = *a * 2.0;
            for &i in &s[..q] {
                pk *= u[i as usize];
            }
            let l = &s[q..];
            pre[0] = pk;
            for t in 0..q {
                pre[t + 1] = pre[t] * u[l[t] as usize].conj();
            }
            let mut suf = Complex64::new(1.0, 0.0);
            for t in (0..q).rev() {
                out[l[t] as usize] += pre[t] * suf;
                suf *= u[l[t] as usize].conj();
            }
        }
    }

    /// Adds `d(grad P)(u)[v]` into `out`.
    pub fn hessian_apply_into(&self, u: &[Complex64], v: &[Complex64], out: &mut [Complex64]) {
        let q = self.q;
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(2 * q)) {
            let (k, l) = s.split_at(q);
            let mut p = Complex64::new(1.0, 0.0);
            let mut dp = Complex64::new(0.0, 0.0);
            for &i in k {
                let (f, df) = (u[i as usize], v[i as usize]);
                dp = dp * f + p * df;
                p *= f;
            }
            for sidx in 0..q {
                let (mut pp, mut dd) = (p, dp);
                for (t, &i) in l.iter().enumerate() {
                    if t == sidx {
                        continue;
                    }
                    let (f, df) = (u[i as usize].conj(), v[i as usize].conj());
                    dd = dd * f + pp * df;
                    pp *= f;
                }
                out[l[sidx] as usize] += *a * 2.0 * dd;
            }
        }
    }

    /// Value together with the Wirtinger derivatives `d/du_j P` and `d/d conj(u_j) P`.
    pub fn wirtinger(&self, u: &[Complex64], du: &mut [Complex64], dbar: &mut [Complex64]) -> Complex64 {
        let q = self.q;
        let d = 2 * q;
        du.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        dbar.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        let mut f = [Complex64::new(0.0, 0.0); SLOTS];
        let mut pre = [Complex64::new(0.0, 0.0); SLOTS + 1];
        let mut val = Complex64::new(0.0, 0.0);
        for (a, s) in self.coeffs.iter().zip(self.slots.chunks_exact(d)) {
            for t in 0..d {
                let z = u[s[t] as usize];
                f[t] = if t < q { z } else { z.conj() };
            }
            pre[0] = *a;
            for t in 0..d {
                pre[t + 1] = pre[t] * f[t];
            }
            val += pre[d];
            let mut suf = Complex64::new(1.0, 0.0);
            for t in (0..d).rev() {
                let part = pre[t] * suf;
                if t < q {
                    du[s[t] as usize] += part;
                } else {
                    dbar[s[t] as usize] += part;
                }
                suf *= f[t];
            }
        }
        val
    }
}

/// Poisson bracket `{P, Q} = 2i sum_k (d_{conj u_k} P d_{u_k} Q - d_{u_k} P d_{conj u_k} Q)`.
pub fn poisson(p: &HomPoly, q: &HomPoly) -> Result<HomPoly> {
    bracket_impl(p, q, p.is_real() && q.is_real())
}

fn bracket_impl(p: &HomPoly, q: &HomPoly, real: bool) -> Result<HomPoly> {
    p.check_modes(q)?;
    let qo = p.q + q.q - 1;
    if qo > MAX_HALF_DEGREE {
        return Err(Error::DegreeOverflow(qo));
    }
    if p.is_empty() || q.is_empty() {
        return Ok(HomPoly::zero(&p.modes, qo));
    }
    let n = p.modes.len();
    // Index the right factor by the positions appearing on each side.
    let mut kidx: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n];
    let mut lidx: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n];
    for (b, t) in q.terms.iter().enumerate() {
        for (pos, mult) in runs(t.key.k()) {
            kidx[pos as usize].push((b as u32, mult));
        }
        for (pos, mult) in runs(t.key.l()) {
            lidx[pos as usize].push((b as u32, mult));
        }
    }
    let qa: Vec<Complex64> = q.terms.iter().map(Term::monomial_coeff).collect();

    // Real inputs give a real bracket: only one pair of each conjugate couple is
    // expanded and results are stored under the smaller of K and its swap.
    let side = |k: &[u8], l: &[u8]| k.cmp(l);
    let qside: Vec<Ordering> = q.terms.iter().map(|t| side(t.key.k(), t.key.l())).collect();

    let mut acc: FxHashMap<MonomialKey, (Complex64, f64)> = FxHashMap::default();
    let mut kbuf = [0u8; SLOTS];
    let mut lbuf = [0u8; SLOTS];
    let mut push = |kb: &[u8], lb: &[u8], c: Complex64| {
        let (key, c) = if real && side(kb, lb) == Ordering::Greater {
            (MonomialKey::from_sorted(lb, kb), c.conj())
        } else {
            (MonomialKey::from_sorted(kb, lb), c)
        };
        let e = acc.entry(key).or_insert((Complex64::new(0.0, 0.0), 0.0));
        e.0 += c;
        e.1 += c.norm();
    };
    for ta in &p.terms {
        let a = ta.monomial_coeff();
        let (ka, la) = (ta.key.k(), ta.key.l());
        let sa = side(ka, la);
        if real && sa == Ordering::Greater {
            continue;
        }
        let weight = |b: u32| -> f64 {
            if !real || sa == Ordering::Less {
                return 1.0;
            }
            match qside[b as usize] {
                Ordering::Less => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Greater => 0.0,
            }
        };
        for (j, beta) in runs(la) {
            for &(b, gamma) in &kidx[j as usize] {
                let w = weight(b);
                if w == 0.0 {
                    continue;
                }
                let tb = &q.terms[b as usize];
                let c = I2 * (w * beta as f64 * gamma as f64) * a * qa[b as usize];
                let nk = merge_skip(ka, tb.key.k(), j, &mut kbuf);
                let nl = merge_skip(la, tb.key.l(), j, &mut lbuf);
                debug_assert_eq!(nk, qo);
                debug_assert_eq!(nl, qo);
                push(&kbuf[..nk], &lbuf[..nl], c);
            }
        }
        for (j, alpha) in runs(ka) {
            for &(b, delta) in &lidx[j as usize] {
                let w = weight(b);
                if w == 0.0 {
                    continue;
                }
                let tb = &q.terms[b as usize];
                let c = -I2 * (w * alpha as f64 * delta as f64) * a * qa[b as usize];
                let nk = merge_skip(ka, tb.key.k(), j, &mut kbuf);
                let nl = merge_skip(la, tb.key.l(), j, &mut lbuf);
                push(&kbuf[..nk], &lbuf[..nl], c);
            }
        }
    }
    let term = |key: MonomialKey, c: Complex64| {
        let size = key.class_size();
        Term { key, coeff: c / size, class_size: size }
    };
    let mut terms: Vec<Term> = Vec::with_capacity(if real { 2 * acc.len() } else { acc.len() });
    for (key, (c, mag)) in acc {
        if !real {
            if c.norm() > 1e-14 * mag {
                terms.push(term(key, c));
            }
        } else if key.k() == key.l() {
            let c = Complex64::new(2.0 * c.re, 0.0);
            if c.norm() > 2e-14 * mag {
                terms.push(term(key, c));
            }
        } else if c.norm() > 1e-14 * mag {
            terms.push(term(key, c));
            terms.push(term(key.swapped(), c.conj()));
        }
    }
    terms.sort_unstable_by(|a, b| a.key.cmp(&b.key));
    Ok(HomPoly::from_sorted_terms(&p.modes, qo, terms))
}

/// Distinct values of a sorted slice with their multiplicities.
fn runs(s: &[u8]) -> impl Iterator<Item = (u8, u8)> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= s.len() {
            return None;
        }
        let v = s[i];
        let start = i;
        while i < s.len() && s[i] == v {
            i += 1;
        }
        Some((v, (i - start) as u8))
    })
}

/// Sextic interaction with coefficient `sigma * c6 / 6` on every momentum-conserving tuple.
pub fn build_p6(ms: &ModeSet, sigma: f64, c6: f64) -> HomPoly {
    let n = ms.len();
    let coeff = Complex64::new(sigma * c6 / 6.0, 0.0);
    let mut by_sum: std::collections::BTreeMap<i32, Vec<[u8; 3]>> = Default::default();
    let mut all = Vec::new();
    for_each_multiset(n, 3, |m| {
        let s: i32 = m.iter().map(|&p| ms.mode(p as usize)).sum();
        let arr = [m[0], m[1], m[2]];
        by_sum.entry(s).or_default().push(arr);
        all.push((arr, s));
    });
    let mut terms = Vec::new();
    for (k, s) in &all {
        for l in &by_sum[s] {
            let key = MonomialKey::from_sorted(k, l);
            terms.push(Term::new(key, coeff));
        }
    }
    HomPoly::from_sorted_terms(ms, 3, terms)
}

/// `Z2 = 1/2 sum omega_k |u_k|^2`.
pub fn build_z2(omega: &FrequencySet) -> HomPoly {
    let ms = omega.mode_set();
    let terms = (0..ms.len())
        .filter(|&p| omega.omega()[p] != 0.0)
        .map(|p| {
            let key = MonomialKey::from_sorted(&[p as u8], &[p as u8]);
            Term::new(key, Complex64::new(omega.omega()[p] / 2.0, 0.0))
        })
        .collect();
    HomPoly::from_sorted_terms(ms, 1, terms)
}
