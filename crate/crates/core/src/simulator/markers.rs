//! Marker images for the image-based replay path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fields::{GridSpec, ScalarField, VectorField2};

pub const DEFAULT_DENSITY: f64 = 0.02;
pub const BLOB_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    pub spec: GridSpec,
    /// Rest positions, px.
    pub positions: Vec<(f64, f64)>,
}

impl MarkerSet {
    /// Uniform random scatter with `density` markers per px².
    pub fn scatter(spec: GridSpec, density: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (density * spec.len() as f64).round() as usize;
        let (w, h) = (spec.width as f64, spec.height as f64);
        let positions = (0..n)
            .map(|_| (rng.random_range(-0.5..w - 0.5), rng.random_range(-0.5..h - 0.5)))
            .collect();
        Self { spec, positions }
    }
}

/// Gaussian blobs at the marker positions advected by `deformation`,
/// clipped to `[0, 1]`.
pub fn render_markers(markers: &MarkerSet, deformation: Option<&VectorField2>) -> ScalarField {
    let spec = markers.spec;
    let (w, h) = (spec.width as isize, spec.height as isize);
    let mut img = vec![0.0; spec.len()];
    let reach = (3.0 * BLOB_SIGMA).ceil() as isize;
    let k = -0.5 / (BLOB_SIGMA * BLOB_SIGMA);
    for &(mx, my) in &markers.positions {
        let (du, dv) = deformation.map_or((0.0, 0.0), |d| d.sample(mx, my));
        let (px, py) = (mx + du, my + dv);
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h) {
            let ey = (y as f64 - py).powi(2);
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w) {
                let e = (x as f64 - px).powi(2) + ey;
                img[y as usize * spec.width + x as usize] += (k * e).exp();
            }
        }
    }
    for v in &mut img {
        *v = v.min(1.0);
    }
    ScalarField::new(spec, img).expect("finite image")
}
