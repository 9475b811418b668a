//! Natural Helmholtz-Hodge decomposition of a 2D vector field.
//!
//! The divergent and rotational parts come from free-space Green's function
//! potentials of the divergence and curl, so no boundary conditions are
//! imposed. Whatever the two potentials cannot explain ends up in the
//! harmonic remainder `h = f - d - r`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::fields::{curl, divergence, GridSpec, ScalarField, VectorField2};

/// Mean of `ln |r|` over the unit square centered on the origin,
/// `-ln(2)/2 - 3/2 + pi/4`.
pub const SELF_CELL_LOG_MEAN: f64 = -1.061_175_426_882_524_3;

/// Patches with at most this many cells are summed directly; larger ones go
/// through the FFT convolution.
pub const DIRECT_MAX_CELLS: usize = 32 * 32;

pub const MIN_PATCH_SIDE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NhhdError {
    #[error("patch {width}x{height} is smaller than {min}x{min}", min = MIN_PATCH_SIDE)]
    PatchTooSmall { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Auto,
    Direct,
    Fft,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Curl-free part, the gradient of `d_pot`.
    pub d: VectorField2,
    /// Divergence-free part, `(-dR/dy, dR/dx)` of `r_pot`.
    pub r: VectorField2,
    /// Harmonic remainder.
    pub h: VectorField2,
    pub d_pot: ScalarField,
    pub r_pot: ScalarField,
}

/// Free-space Green's function of the 2D Laplacian.
#[inline]
pub fn green(rho: f64) -> f64 {
    rho.ln() / (2.0 * PI)
}

fn self_cell_green(spacing: f64) -> f64 {
    (spacing.ln() + SELF_CELL_LOG_MEAN) / (2.0 * PI)
}

/// `P(p) = sum_q G(|p - q|) s(q) h^2`.
pub fn greens_potential(source: &ScalarField) -> ScalarField {
    greens_potential_with(source, Method::Auto)
}

pub fn greens_potential_with(source: &ScalarField, method: Method) -> ScalarField {
    let spec = source.spec();
    let zeros = vec![0.0; spec.len()];
    let (p, _) = potential_pair(spec, source.values(), &zeros, method);
    ScalarField::from_raw(spec, p)
}

pub fn decompose(f: &VectorField2) -> Result<Decomposition, NhhdError> {
    decompose_with(f, Method::Auto)
}

pub fn decompose_with(f: &VectorField2, method: Method) -> Result<Decomposition, NhhdError> {
    let spec = f.spec();
    if spec.width.min(spec.height) < MIN_PATCH_SIDE {
        return Err(NhhdError::PatchTooSmall {
            width: spec.width,
            height: spec.height,
        });
    }
    let div = divergence(f);
    let rot = curl(f);
    let (mut dp, mut rp) = potential_pair(spec, div.values(), rot.values(), method);
    remove_mean(&mut dp);
    remove_mean(&mut rp);
    let d_pot = ScalarField::from_raw(spec, dp);
    let r_pot = ScalarField::from_raw(spec, rp);

    let d = d_pot.gradient();
    let r = VectorField2::from_raw(
        spec,
        r_pot.dy().into_values().into_iter().map(|v| -v).collect(),
        r_pot.dx().into_values(),
    );
    let mut hu = f.u().to_vec();
    let mut hv = f.v().to_vec();
    for i in 0..spec.len() {
        hu[i] -= d.u()[i] + r.u()[i];
        hv[i] -= d.v()[i] + r.v()[i];
    }
    let h = VectorField2::from_raw(spec, hu, hv);
    Ok(Decomposition { d, r, h, d_pot, r_pot })
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Potentials of two sources sharing a grid; the FFT path carries both in a
/// single complex transform since the kernel is real.
fn potential_pair(spec: GridSpec, a: &[f64], b: &[f64], method: Method) -> (Vec<f64>, Vec<f64>) {
    let direct = match method {
        Method::Auto => spec.len() <= DIRECT_MAX_CELLS,
        Method::Direct => true,
        Method::Fft => false,
    };
    if direct {
        potential_pair_direct(spec, a, b)
    } else {
        potential_pair_fft(spec, a, b)
    }
}

fn potential_pair_direct(spec: GridSpec, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let GridSpec { width: w, height: h, spacing } = spec;
    let area = spacing * spacing;
    let mut table = vec![0.0; w * h];
    for dy in 0..h {
        for dx in 0..w {
            let rho = spacing * ((dx * dx + dy * dy) as f64).sqrt();
            table[dy * w + dx] = area * if dx == 0 && dy == 0 { self_cell_green(spacing) } else { green(rho) };
        }
    }
    let sources: Vec<(usize, usize, f64, f64)> = (0..w * h)
        .filter(|&i| a[i] != 0.0 || b[i] != 0.0)
        .map(|i| (i % w, i / w, a[i], b[i]))
        .collect();
    let mut pa = vec![0.0; w * h];
    let mut pb = vec![0.0; w * h];
    for py in 0..h {
        for px in 0..w {
            let (mut sa, mut sb) = (0.0, 0.0);
            for &(qx, qy, va, vb) in &sources {
                let g = table[py.abs_diff(qy) * w + px.abs_diff(qx)];
                sa += g * va;
                sb += g * vb;
            }
            pa[py * w + px] = sa;
            pb[py * w + px] = sb;
        }
    }
    (pa, pb)
}

struct GreenSpectrum {
    rows: usize,
    cols: usize,
    /// Kernel spectrum in transposed (column-major) layout.
    kernel: Vec<Complex<f64>>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl GreenSpectrum {
    fn build(spec: GridSpec) -> Self {
        let rows = fast_len(2 * spec.height - 1);
        let cols = fast_len(2 * spec.width - 1);
        let (row_fwd, row_inv, col_fwd, col_inv) = {
            let mut planner = planner().lock().unwrap();
            (
                planner.plan_fft_forward(cols),
                planner.plan_fft_inverse(cols),
                planner.plan_fft_forward(rows),
                planner.plan_fft_inverse(rows),
            )
        };
        let mut s = Self {
            rows,
            cols,
            kernel: Vec::new(),
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
        };
        let area = spec.spacing * spec.spacing;
        let mut k = vec![Complex::new(0.0, 0.0); rows * cols];
        let (hw, hh) = (spec.width as isize, spec.height as isize);
        for dy in -(hh - 1)..hh {
            for dx in -(hw - 1)..hw {
                let g = if dx == 0 && dy == 0 {
                    self_cell_green(spec.spacing)
                } else {
                    green(spec.spacing * ((dx * dx + dy * dy) as f64).sqrt())
                };
                let r = dy.rem_euclid(rows as isize) as usize;
                let c = dx.rem_euclid(cols as isize) as usize;
                k[r * cols + c] = Complex::new(area * g, 0.0);
            }
        }
        s.kernel = s.forward(k);
        s
    }

    fn forward(&self, mut data: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.row_fwd.process(&mut data);
        let mut t = transpose(&data, self.rows, self.cols);
        self.col_fwd.process(&mut t);
        t
    }

    fn inverse(&self, mut t: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.col_inv.process(&mut t);
        let mut data = transpose(&t, self.cols, self.rows);
        self.row_inv.process(&mut data);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
        data
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut dst = vec![Complex::new(0.0, 0.0); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

/// Smallest 5-smooth integer >= n.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn spectrum_for(spec: GridSpec) -> Arc<GreenSpectrum> {
    type Key = (usize, usize, u64);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<GreenSpectrum>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (spec.width, spec.height, spec.spacing.to_bits());
    if let Some(s) = cache.lock().unwrap().get(&key) {
        return s.clone();
    }
    let built = Arc::new(GreenSpectrum::build(spec));
    let mut guard = cache.lock().unwrap();
    if guard.len() >= 64 {
        guard.clear();
    }
    guard.entry(key).or_insert(built).clone()
}

fn potential_pair_fft(spec: GridSpec, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gs = spectrum_for(spec);
    let (w, h) = (spec.width, spec.height);
    let mut data = vec![Complex::new(0.0, 0.0); gs.rows * gs.cols];
    for y in 0..h {
        for x in 0..w {
            data[y * gs.cols + x] = Complex::new(a[y * w + x], b[y * w + x]);
        }
    }
    let mut t = gs.forward(data);
    for (z, k) in t.iter_mut().zip(&gs.kernel) {
        *z *= k;
    }
    let out = gs.inverse(t);
    let mut pa = Vec::with_capacity(w * h);
    let mut pb = Vec::with_capacity(w * h);
    for y in 0..h {
        for c in &out[y * gs.cols..y * gs.cols + w] {
            pa.push(c.re);
            pb.push(c.im);
        }
    }
    (pa, pb)
}
