//! Scaled monomial polynomials shared by the geometry and calibration maps.

use serde::{Deserialize, Serialize};

/// Affine feature map `s = (x - offset) * factor`. A zero factor marks a
/// feature that had no spread in the training data and is left out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub offset: f64,
    pub factor: f64,
}

impl FeatureScale {
    pub const IDENTITY: FeatureScale = FeatureScale {
        offset: 0.0,
        factor: 1.0,
    };

    /// Map `[min, max]` onto `[lo, hi]`.
    pub fn from_bounds(min: f64, max: f64, lo: f64, hi: f64) -> Self {
        let span = max - min;
        if !(span > 1e-12 * max.abs().max(min.abs()).max(1.0)) {
            return Self {
                offset: min,
                factor: 0.0,
            };
        }
        let factor = (hi - lo) / span;
        Self {
            offset: min - lo / factor,
            factor,
        }
    }

    pub fn fit(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        Self::from_bounds(min, max, lo, hi)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.offset) * self.factor
    }

    pub fn is_active(&self) -> bool {
        self.factor != 0.0
    }
}

/// Univariate polynomial in a scaled variable, `sum_k c_k s^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial1D {
    pub order: usize,
    pub coeffs: Vec<f64>,
    pub scale: FeatureScale,
}

impl Polynomial1D {
    pub fn zero() -> Self {
        Self {
            order: 0,
            coeffs: vec![0.0],
            scale: FeatureScale::IDENTITY,
        }
    }

    /// `slope * x + intercept` in raw units.
    pub fn affine(slope: f64, intercept: f64) -> Self {
        Self {
            order: 1,
            coeffs: vec![intercept, slope],
            scale: FeatureScale::IDENTITY,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s = self.scale.apply(x);
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }
}

impl Default for Polynomial1D {
    fn default() -> Self {
        Self::zero()
    }
}

/// Exponent vectors for a grouped monomial basis.
///
/// Each group's total degree is capped by its order and the overall degree by
/// the largest order plus one. Without cross terms only monomials touching a
/// single group are kept. Inactive features never appear.
pub fn monomial_basis(groups: &[usize], orders: &[u32], active: &[bool], cross_terms: bool) -> Vec<Vec<u8>> {
    let n = groups.len();
    let max_total = orders.iter().copied().max().unwrap_or(0) + 1;
    let mut out = Vec::new();
    let mut cur = vec![0u8; n];
    let mut group_deg = vec![0u32; orders.len()];
    fn rec(
        i: usize,
        total: u32,
        cur: &mut Vec<u8>,
        group_deg: &mut Vec<u32>,
        ctx: (&[usize], &[u32], &[bool], bool, u32),
        out: &mut Vec<Vec<u8>>,
    ) {
        let (groups, orders, active, cross, max_total) = ctx;
        if i == groups.len() {
            if !cross && group_deg.iter().filter(|&&d| d > 0).count() > 1 {
                return;
            }
            out.push(cur.clone());
            return;
        }
        let g = groups[i];
        let cap = if active[i] {
            (orders[g] - group_deg[g]).min(max_total - total)
        } else {
            0
        };
        for e in 0..=cap {
            cur[i] = e as u8;
            group_deg[g] += e;
            rec(i + 1, total + e, cur, group_deg, ctx, out);
            group_deg[g] -= e;
        }
        cur[i] = 0;
    }
    rec(0, 0, &mut cur, &mut group_deg, (groups, orders, active, cross_terms, max_total), &mut out);
    out.sort_by_key(|e| (e.iter().map(|&d| d as u32).sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

/// Evaluate every monomial of `basis` at already scaled features.
pub fn monomial_row(basis: &[Vec<u8>], scaled: &[f64], max_deg: usize, row: &mut [f64]) {
    let n = scaled.len();
    let mut powers = vec![1.0; n * (max_deg + 1)];
    for (j, &s) in scaled.iter().enumerate() {
        for k in 1..=max_deg {
            powers[j * (max_deg + 1) + k] = powers[j * (max_deg + 1) + k - 1] * s;
        }
    }
    for (slot, e) in row.iter_mut().zip(basis) {
        let mut v = 1.0;
        for (j, &d) in e.iter().enumerate() {
            if d > 0 {
                v *= powers[j * (max_deg + 1) + d as usize];
            }
        }
        *slot = v;
    }
}

/// Multivariate polynomial over grouped, scaled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPolynomial {
    pub orders: Vec<u32>,
    pub groups: Vec<usize>,
    pub cross_terms: bool,
    pub scale: Vec<FeatureScale>,
    pub exponents: Vec<Vec<u8>>,
    pub coeffs: Vec<f64>,
}

impl MultiPolynomial {
    pub fn max_degree(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(0) as usize + 1
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let scaled: Vec<f64> = x.iter().zip(&self.scale).map(|(v, s)| s.apply(*v)).collect();
        let mut row = vec![0.0; self.exponents.len()];
        monomial_row(&self.exponents, &scaled, self.max_degree(), &mut row);
        row.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}
