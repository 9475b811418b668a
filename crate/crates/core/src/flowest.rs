//! Dense optical flow between marker images: coarse-to-fine Lucas-Kanade
//! with box-window normal equations from integral images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{GridSpec, ScalarField, VectorField2};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("reference is {0}x{1} but current image is {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("{:.0}% of windows lack texture", fraction * 100.0)]
    DegenerateTexture { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_levels: u32,
    /// Side of the square summation window, px.
    pub window: usize,
    pub iterations: u32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            window: 16,
            iterations: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self, spec: &GridSpec) -> Result<(), FlowError> {
        if self.window < 4 {
            return Err(FlowError::InvalidParams(format!("window {} < 4", self.window)));
        }
        if self.pyramid_levels < 1 || self.iterations < 1 {
            return Err(FlowError::InvalidParams("levels and iterations must be >= 1".into()));
        }
        let min_dim = spec.width.min(spec.height);
        if (self.window << self.pyramid_levels) > min_dim {
            return Err(FlowError::InvalidParams(format!(
                "{} levels of window {} do not fit a {min_dim} px side",
                self.pyramid_levels, self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Image {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Image {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - i as f64, y - j as f64);
        let i1 = (i + 1).min(self.w - 1);
        let j1 = (j + 1).min(self.h - 1);
        let p = |a: usize, b: usize| self.px[b * self.w + a];
        (p(i, j) * (1.0 - fx) + p(i1, j) * fx) * (1.0 - fy) + (p(i, j1) * (1.0 - fx) + p(i1, j1) * fx) * fy
    }

    fn half(&self) -> Image {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut px = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let a = 2 * y * self.w + 2 * x;
                px[y * w + x] = 0.25 * (self.px[a] + self.px[a + 1] + self.px[a + self.w] + self.px[a + self.w + 1]);
            }
        }
        Image { w, h, px }
    }
}

fn pyramid(img: &ScalarField, levels: u32) -> Vec<Image> {
    let spec = img.spec();
    let mut out = vec![Image {
        w: spec.width,
        h: spec.height,
        px: img.values().to_vec(),
    }];
    for _ in 1..levels {
        let next = out.last().unwrap().half();
        out.push(next);
    }
    out
}

/// Box sums of side `win` centred on each pixel, clipped at the borders.
fn box_sums(src: &[f64], w: usize, h: usize, win: usize, out: &mut [f64], integral: &mut Vec<f64>) {
    let iw = w + 1;
    integral.clear();
    integral.resize(iw * (h + 1), 0.0);
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += src[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + run;
        }
    }
    let lo = win / 2;
    let hi = win - lo;
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(lo), (y + hi).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(lo), (x + hi).min(w));
            out[y * w + x] = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0] + integral[y0 * iw + x0];
        }
    }
}

fn central_diff(img: &[f64], w: usize, h: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (img[y * w + xr] - img[y * w + xl]) / (xr - xl).max(1) as f64;
            gy[y * w + x] = (img[yd * w + x] - img[yu * w + x]) / (yd - yu).max(1) as f64;
        }
    }
}

/// One Gauss-Newton update of `(u, v)` on a pyramid level. Returns the
/// fraction of windows whose structure tensor is singular.
fn refine(r: &Image, c: &Image, win: usize, u: &mut [f64], v: &mut [f64]) -> f64 {
    let (w, h) = (r.w, r.h);
    let n = w * h;
    let mut avg = vec![0.0; n];
    let mut it = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let warped = c.sample(x as f64 + u[k], y as f64 + v[k]);
            avg[k] = 0.5 * (r.px[k] + warped);
            it[k] = warped - r.px[k];
        }
    }
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    central_diff(&avg, w, h, &mut gx, &mut gy);

    let mut integral = Vec::new();
    let mut sums: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut prod = vec![0.0; n];
    let terms: [fn(f64, f64, f64) -> f64; 5] = [
        |a, _, _| a * a,
        |a, b, _| a * b,
        |_, b, _| b * b,
        |a, _, t| a * t,
        |_, b, t| b * t,
    ];
    for (s, f) in sums.iter_mut().zip(terms) {
        for k in 0..n {
            prod[k] = f(gx[k], gy[k], it[k]);
        }
        box_sums(&prod, w, h, win, s, &mut integral);
    }

    // windows with less gradient energy than a faint blob edge are left alone
    let floor = 1e-4 * (win * win) as f64;
    let mut singular = 0usize;
    for k in 0..n {
        let (a, b, d) = (sums[0][k], sums[1][k], sums[2][k]);
        let tr = a + d;
        let det = a * d - b * b;
        let lmin = 0.5 * (tr - ((a - d).powi(2) + 4.0 * b * b).sqrt());
        if lmin <= floor || det <= 0.0 {
            singular += 1;
            continue;
        }
        let (ex, ey) = (sums[3][k], sums[4][k]);
        u[k] -= (d * ex - b * ey) / det;
        v[k] -= (a * ey - b * ex) / det;
    }
    singular as f64 / n as f64
}

/// Flow that maps `reference` onto `current`: `current(p + f(p)) ≈ reference(p)`.
pub fn estimate_flow(reference: &ScalarField, current: &ScalarField, p: &FlowParams) -> Result<VectorField2, FlowError> {
    let (rs, cs) = (reference.spec(), current.spec());
    if (rs.width, rs.height) != (cs.width, cs.height) {
        return Err(FlowError::ShapeMismatch(rs.width, rs.height, cs.width, cs.height));
    }
    p.validate(&rs)?;
    let rp = pyramid(reference, p.pyramid_levels);
    let cp = pyramid(current, p.pyramid_levels);

    let top = rp.last().unwrap();
    let (mut u, mut v) = (vec![0.0; top.w * top.h], vec![0.0; top.w * top.h]);
    let (mut pw, mut ph) = (top.w, top.h);
    for lvl in (0..rp.len()).rev() {
        let (r, c) = (&rp[lvl], &cp[lvl]);
        if (r.w, r.h) != (pw, ph) {
            let coarse_u = Image { w: pw, h: ph, px: u };
            let coarse_v = Image { w: pw, h: ph, px: v };
            let (sx, sy) = (pw as f64 / r.w as f64, ph as f64 / r.h as f64);
            let up = |img: &Image, x: usize, y: usize, s: f64| {
                img.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5) / s
            };
            u = (0..r.w * r.h).map(|k| up(&coarse_u, k % r.w, k / r.w, sx)).collect();
            v = (0..r.w * r.h).map(|k| up(&coarse_v, k % r.w, k / r.w, sy)).collect();
            (pw, ph) = (r.w, r.h);
        }
        for i in 0..p.iterations {
            let singular = refine(r, c, p.window, &mut u, &mut v);
            if lvl == 0 && i == 0 && singular > 0.5 {
                return Err(FlowError::DegenerateTexture { fraction: singular });
            }
        }
    }
    Ok(VectorField2::from_raw(rs, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{render_markers, MarkerSet, DEFAULT_DENSITY};

    fn spec() -> GridSpec {
        GridSpec::new(256, 192).unwrap()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    fn interior(f: &VectorField2, margin: usize) -> (Vec<f64>, Vec<f64>) {
        let s = f.spec();
        let (mut us, mut vs) = (vec![], vec![]);
        for y in margin..s.height - margin {
            for x in margin..s.width - margin {
                let (a, b) = f.get(x, y);
                us.push(a);
                vs.push(b);
            }
        }
        (us, vs)
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let m = MarkerSet::scatter(spec(), DEFAULT_DENSITY, 1);
        let img = render_markers(&m, None);
        let f = estimate_flow(&img, &img, &FlowParams::default()).unwrap();
        let max = f.u().iter().chain(f.v()).fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max <= 0.05, "{max}");
    }

    #[test]
    fn uniform_shift_is_recovered() {
        let m = MarkerSet::scatter(spec(), DEFAULT_DENSITY, 2);
        let a = render_markers(&m, None);
        let b = render_markers(&m, Some(&VectorField2::uniform(spec(), 3.0, 0.0)));
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let (us, vs) = interior(&f, 24);
        assert!((median(us) - 3.0).abs() < 0.3);
        assert!(median(vs).abs() < 0.3);
    }

    #[test]
    fn reversed_pair_flips_the_sign() {
        let m = MarkerSet::scatter(spec(), DEFAULT_DENSITY, 3);
        let def = VectorField2::from_fn(spec(), |x, y| {
            let (dx, dy) = (x as f64 - 128.0, y as f64 - 96.0);
            let g = (-(dx * dx + dy * dy) / 2000.0).exp();
            (2.5 * g, -1.5 * g)
        });
        let a = render_markers(&m, None);
        let b = render_markers(&m, Some(&def));
        let fwd = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let bwd = estimate_flow(&b, &a, &FlowParams::default()).unwrap();
        let sum = fwd.add_scaled(1.0, &bwd).unwrap();
        let (us, vs) = interior(&sum, 24);
        let err: Vec<f64> = us.iter().zip(&vs).map(|(a, b)| a.hypot(*b)).collect();
        let m = median(err);
        assert!(m <= 0.3, "{m}");
    }

    #[test]
    fn blank_images_are_degenerate() {
        let img = ScalarField::zeros(spec());
        assert!(matches!(
            estimate_flow(&img, &img, &FlowParams::default()),
            Err(FlowError::DegenerateTexture { .. })
        ));
    }

    #[test]
    fn parameters_are_checked() {
        let img = ScalarField::zeros(spec());
        let other = ScalarField::zeros(GridSpec::new(128, 192).unwrap());
        assert!(matches!(estimate_flow(&img, &other, &FlowParams::default()), Err(FlowError::ShapeMismatch(..))));
        let p = FlowParams { window: 3, ..Default::default() };
        assert!(matches!(p.validate(&spec()), Err(FlowError::InvalidParams(_))));
        let p = FlowParams { pyramid_levels: 4, ..Default::default() };
        assert!(p.validate(&spec()).is_err());
        assert!(FlowParams::default().validate(&spec()).is_ok());
    }
}
