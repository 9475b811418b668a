//! Dense 2D scalar and vector grids with finite-difference calculus.
//!
//! Storage is row-major with the origin at the top-left pixel, x to the right
//! and y downward. Derivatives use central differences in the interior and
//! first-order one-sided differences on the border.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid {width}x{height} with spacing {spacing}")]
    InvalidGrid {
        width: usize,
        height: usize,
        spacing: f64,
    },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(GridSpec, GridSpec),
    #[error("malformed field payload: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default = "unit_spacing")]
    pub spacing: f64,
}

fn unit_spacing() -> f64 {
    1.0
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self, FieldError> {
        Self::with_spacing(width, height, 1.0)
    }

    pub fn with_spacing(width: usize, height: usize, spacing: f64) -> Result<Self, FieldError> {
        if width == 0 || height == 0 || !(spacing > 0.0 && spacing.is_finite()) {
            return Err(FieldError::InvalidGrid {
                width,
                height,
                spacing,
            });
        }
        Ok(Self {
            width,
            height,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Same spacing, different extent.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            spacing: self.spacing,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(spec: &GridSpec) -> Self {
        Self::new(0, 0, spec.width, spec.height)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    /// Grow by `pad` on every side, clamped to `[0, width) x [0, height)`.
    pub fn padded(&self, pad: usize, width: usize, height: usize) -> Rect {
        Rect::new(
            self.x0.saturating_sub(pad),
            self.y0.saturating_sub(pad),
            (self.x1 + pad).min(width),
            (self.y1 + pad).min(height),
        )
    }

    pub fn fits(&self, spec: &GridSpec) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= spec.width && self.y1 <= spec.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self, FieldError> {
        check_len(&spec, values.len())?;
        check_finite(&values)?;
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for y in 0..spec.height {
            for x in 0..spec.width {
                values.push(f(x, y));
            }
        }
        Self { spec, values }
    }

    pub(crate) fn from_raw(spec: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), spec.len());
        Self { spec, values }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[self.spec.index(x, y)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        Self::from_raw(self.spec, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Index of the smallest value; the first one in row-major order on ties.
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = i;
            }
        }
        (best % self.spec.width, best / self.spec.width)
    }

    pub fn crop(&self, r: Rect) -> ScalarField {
        assert!(r.fits(&self.spec), "crop {r:?} outside {:?}", self.spec);
        let spec = self.spec.resized(r.width(), r.height());
        let mut values = Vec::with_capacity(spec.len());
        for y in r.y0..r.y1 {
            let row = y * self.spec.width;
            values.extend_from_slice(&self.values[row + r.x0..row + r.x1]);
        }
        Self::from_raw(spec, values)
    }

    /// Partial derivative along x.
    pub fn dx(&self) -> ScalarField {
        let GridSpec { width, height, .. } = self.spec;
        let mut out = vec![0.0; self.spec.len()];
        for y in 0..height {
            let row = &self.values[y * width..(y + 1) * width];
            diff_line(row, &mut out[y * width..(y + 1) * width], self.spec.spacing);
        }
        Self::from_raw(self.spec, out)
    }

    /// Partial derivative along y.
    pub fn dy(&self) -> ScalarField {
        let GridSpec { width, height, .. } = self.spec;
        let mut out = vec![0.0; self.spec.len()];
        let h = self.spec.spacing;
        if height < 2 {
            return Self::from_raw(self.spec, out);
        }
        for x in 0..width {
            out[x] = (self.values[width + x] - self.values[x]) / h;
            let last = (height - 1) * width + x;
            out[last] = (self.values[last] - self.values[last - width]) / h;
        }
        for y in 1..height - 1 {
            let (up, mid, down) = ((y - 1) * width, y * width, (y + 1) * width);
            for x in 0..width {
                out[mid + x] = (self.values[down + x] - self.values[up + x]) / (2.0 * h);
            }
        }
        Self::from_raw(self.spec, out)
    }

    pub fn gradient(&self) -> VectorField2 {
        VectorField2::from_raw(self.spec, self.dx().values, self.dy().values)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FieldError> {
        write_channels(w, &self.spec, &[&self.values])
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, FieldError> {
        let (spec, mut ch) = read_channels(r, 1)?;
        Ok(Self::from_raw(spec, ch.remove(0)))
    }
}

fn diff_line(src: &[f64], dst: &mut [f64], h: f64) {
    let n = src.len();
    if n < 2 {
        dst.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    dst[0] = (src[1] - src[0]) / h;
    dst[n - 1] = (src[n - 1] - src[n - 2]) / h;
    let inv = 1.0 / (2.0 * h);
    for i in 1..n - 1 {
        dst[i] = (src[i + 1] - src[i - 1]) * inv;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2 {
    spec: GridSpec,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl VectorField2 {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            u: vec![0.0; spec.len()],
            v: vec![0.0; spec.len()],
        }
    }

    pub fn new(spec: GridSpec, u: Vec<f64>, v: Vec<f64>) -> Result<Self, FieldError> {
        check_len(&spec, u.len())?;
        check_len(&spec, v.len())?;
        check_finite(&u)?;
        check_finite(&v)?;
        Ok(Self { spec, u, v })
    }

    pub fn uniform(spec: GridSpec, u: f64, v: f64) -> Self {
        Self {
            spec,
            u: vec![u; spec.len()],
            v: vec![v; spec.len()],
        }
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(spec.len());
        let mut v = Vec::with_capacity(spec.len());
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self { spec, u, v }
    }

    pub(crate) fn from_raw(spec: GridSpec, u: Vec<f64>, v: Vec<f64>) -> Self {
        debug_assert!(u.len() == spec.len() && v.len() == spec.len());
        Self { spec, u, v }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = self.spec.index(x, y);
        (self.u[i], self.v[i])
    }

    pub fn crop(&self, r: Rect) -> VectorField2 {
        assert!(r.fits(&self.spec), "crop {r:?} outside {:?}", self.spec);
        let spec = self.spec.resized(r.width(), r.height());
        let mut u = Vec::with_capacity(spec.len());
        let mut v = Vec::with_capacity(spec.len());
        for y in r.y0..r.y1 {
            let row = y * self.spec.width;
            u.extend_from_slice(&self.u[row + r.x0..row + r.x1]);
            v.extend_from_slice(&self.v[row + r.x0..row + r.x1]);
        }
        Self::from_raw(spec, u, v)
    }

    pub fn scaled(&self, a: f64) -> VectorField2 {
        Self::from_raw(
            self.spec,
            self.u.iter().map(|x| a * x).collect(),
            self.v.iter().map(|x| a * x).collect(),
        )
    }

    /// `self + a * other`.
    pub fn add_scaled(&self, a: f64, other: &VectorField2) -> Result<VectorField2, FieldError> {
        same_grid(&self.spec, &other.spec)?;
        Ok(Self::from_raw(
            self.spec,
            self.u.iter().zip(&other.u).map(|(x, y)| x + a * y).collect(),
            self.v.iter().zip(&other.v).map(|(x, y)| x + a * y).collect(),
        ))
    }

    pub fn u_field(&self) -> ScalarField {
        ScalarField::from_raw(self.spec, self.u.clone())
    }

    pub fn v_field(&self) -> ScalarField {
        ScalarField::from_raw(self.spec, self.v.clone())
    }

    /// Sum of squared vector norms.
    pub fn energy(&self) -> f64 {
        self.u.iter().zip(&self.v).map(|(a, b)| a * a + b * b).sum()
    }

    /// Bilinear sample with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.spec.width;
        let (i, fx, j, fy) = bilinear_cell(x, y, w, self.spec.height);
        let a = j * w + i;
        let b = a + usize::from(i + 1 < w);
        let c = if j + 1 < self.spec.height { a + w } else { a };
        let d = c + (b - a);
        let lerp = |s: &[f64]| {
            (s[a] * (1.0 - fx) + s[b] * fx) * (1.0 - fy) + (s[c] * (1.0 - fx) + s[d] * fx) * fy
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FieldError> {
        write_channels(w, &self.spec, &[&self.u, &self.v])
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, FieldError> {
        let (spec, mut ch) = read_channels(r, 2)?;
        let v = ch.pop().unwrap();
        let u = ch.pop().unwrap();
        Ok(Self::from_raw(spec, u, v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.spec.len());
        self.write_to(&mut out).expect("writing to memory");
        out
    }
}

/// Cell origin and fractional offsets for bilinear lookups, clamped to the grid.
pub(crate) fn bilinear_cell(x: f64, y: f64, w: usize, h: usize) -> (usize, f64, usize, f64) {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let i = (cx.floor() as usize).min(w - 1);
    let j = (cy.floor() as usize).min(h - 1);
    (i, cx - i as f64, j, cy - j as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    spec: GridSpec,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            bits: vec![false; spec.len()],
        }
    }

    pub fn new(spec: GridSpec, bits: Vec<bool>) -> Result<Self, FieldError> {
        check_len(&spec, bits.len())?;
        Ok(Self { spec, bits })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(spec.len());
        for y in 0..spec.height {
            for x in 0..spec.width {
                bits.push(f(x, y));
            }
        }
        Self { spec, bits }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut Vec<bool> {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[self.spec.index(x, y)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_scalar(&self) -> ScalarField {
        ScalarField::from_raw(
            self.spec,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FieldError> {
        self.to_scalar().write_to(w)
    }
}

/// Central-difference divergence `du/dx + dv/dy`.
pub fn divergence(f: &VectorField2) -> ScalarField {
    let du = ScalarField::from_raw(f.spec, f.u.clone()).dx();
    let dv = ScalarField::from_raw(f.spec, f.v.clone()).dy();
    let values = du.values.iter().zip(&dv.values).map(|(a, b)| a + b).collect();
    ScalarField::from_raw(f.spec, values)
}

/// Scalar curl `dv/dx - du/dy`.
pub fn curl(f: &VectorField2) -> ScalarField {
    let dv = ScalarField::from_raw(f.spec, f.v.clone()).dx();
    let du = ScalarField::from_raw(f.spec, f.u.clone()).dy();
    let values = dv.values.iter().zip(&du.values).map(|(a, b)| a - b).collect();
    ScalarField::from_raw(f.spec, values)
}

pub fn magnitude(f: &VectorField2) -> ScalarField {
    let values = f.u.iter().zip(&f.v).map(|(a, b)| a.hypot(*b)).collect();
    ScalarField::from_raw(f.spec, values)
}

pub fn gradient(s: &ScalarField) -> VectorField2 {
    s.gradient()
}

fn check_len(spec: &GridSpec, n: usize) -> Result<(), FieldError> {
    if n != spec.len() {
        return Err(FieldError::LengthMismatch {
            expected: spec.len(),
            actual: n,
        });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<(), FieldError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FieldError::NonFinite(i)),
        None => Ok(()),
    }
}

pub(crate) fn same_grid(a: &GridSpec, b: &GridSpec) -> Result<(), FieldError> {
    if a.width != b.width || a.height != b.height {
        return Err(FieldError::GridMismatch(*a, *b));
    }
    Ok(())
}

pub const FIELD_MAGIC: &[u8; 8] = b"TFLD0001";

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
}

fn write_channels(w: &mut impl Write, spec: &GridSpec, channels: &[&[f64]]) -> Result<(), FieldError> {
    let header = FieldHeader {
        width: spec.width,
        height: spec.height,
        channels: channels.len(),
        dtype: "f32le".into(),
    };
    w.write_all(FIELD_MAGIC)?;
    serde_json::to_writer(&mut *w, &header).map_err(|e| FieldError::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(4 * channels.len() * spec.len());
    for i in 0..spec.len() {
        for ch in channels {
            buf.extend_from_slice(&(ch[i] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_channels(r: &mut impl BufRead, expect: usize) -> Result<(GridSpec, Vec<Vec<f64>>), FieldError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(FieldError::Format("bad magic".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: FieldHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| FieldError::Format(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(FieldError::Format(format!("unsupported dtype {}", header.dtype)));
    }
    if header.channels != expect {
        return Err(FieldError::Format(format!(
            "expected {expect} channels, found {}",
            header.channels
        )));
    }
    let spec = GridSpec::new(header.width, header.height)?;
    let mut raw = vec![0u8; 4 * expect * spec.len()];
    r.read_exact(&mut raw)?;
    let mut out = vec![Vec::with_capacity(spec.len()); expect];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(FieldError::NonFinite(k / expect));
        }
        out[k % expect].push(v);
    }
    Ok((spec, out))
}
