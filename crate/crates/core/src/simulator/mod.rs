//! Synthetic curved skin.
//!
//! A contact pressing with force `F` at arc position `s` produces two
//! superposed displacement fields around its pixel `c`:
//!
//! * normal: a hard-edged disk of radius `Rn` with outward flow
//!   `A (p - c) / Rn`, so the divergent potential is a paraboloid with its
//!   minimum at `c`;
//! * shear: a translation `t` that is flat over the whole contact patch and
//!   fades out beyond it, so it adds nothing to the divergence inside the
//!   patch.
//!
//! `A` and `t` are normalized per indenter such that the patch sums come out
//! as `Dn = kn * F_press` and `(Ds1, Ds2) = ks * F_tangential`. The
//! normalizers are measured by running the segmentation and decomposition on
//! a noise-free unit field, so the relation is exact at zero noise. The
//! model is synthetic and carries no claim about real silicone.

mod characterization;
mod markers;
mod scenario;

pub use characterization::{inclined_force, synth_characterization, CharacterizationProtocol, FORCE_LEVELS, POSES};
pub use markers::{render_markers, MarkerSet, BLOB_SIGMA, DEFAULT_DENSITY};
pub use scenario::{synth_scenario, FrameTruth, Phase, Scenario, ScenarioKind, ScenarioParams};

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{analyze_patch, DnMode};
use crate::fields::{GridSpec, VectorField2};
use crate::geometry::SensorGeometry;
use crate::segmentation::{segment, Preset, SegmentationThresholds};

/// Skin length imaged across the frame width, mm.
pub const SENSING_LENGTH_MM: f64 = 320.0;
/// Arc spacing between measuring rows, mm; row 8 is the centre.
pub const ROW_SPACING_MM: f64 = 20.0;
pub const CENTER_ROW: u32 = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("contacts {0} and {1} overlap by more than half of the smaller support")]
    Overlap(usize, usize),
    #[error("contact at arc position {0} mm lies outside the imaged skin")]
    OffSkin(f64),
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndenterSpec {
    pub diameter_mm: f64,
}

impl IndenterSpec {
    pub const fn new(diameter_mm: f64) -> Self {
        Self { diameter_mm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactSpec {
    /// Position along the arc from the apex, mm.
    pub arc_mm: f64,
    /// Force applied to the skin, N, sensor frame.
    pub force: [f64; 3],
    pub indenter: IndenterSpec,
}

impl ContactSpec {
    /// Chord position of the contact, mm.
    pub fn x3d_mm(&self, geo: &SensorGeometry) -> f64 {
        let r = geo.radius_mm();
        r * (self.arc_mm / r).sin()
    }

    pub fn force_norm(&self) -> f64 {
        Vector3::from(self.force).norm()
    }

    /// `(F_t1, F_t2, F_press)` in the local contact frame; `F_press` is the
    /// force pushing into the skin along the inward normal.
    pub fn local_force(&self, geo: &SensorGeometry) -> [f64; 3] {
        let theta = self.arc_mm / geo.radius_mm();
        let (s, c) = theta.sin_cos();
        let [fx, fy, fz] = self.force;
        [c * fx - s * fz, fy, -(s * fx + c * fz)]
    }
}

/// Position of a measuring row along the arc, mm.
pub fn row_arc_mm(row: u32) -> f64 {
    (row as f64 - CENTER_ROW as f64) * ROW_SPACING_MM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkinParams {
    /// Peak normal displacement of the 5 mm indenter under 3 N, px at 3 px/mm.
    pub peak_normal_px: f64,
    /// Shear gain relative to the normal gain.
    pub shear_ratio: f64,
    /// Normal support radius `base + per_diameter * d`, mm.
    pub support_base_mm: f64,
    pub support_per_diameter: f64,
    pub shear_fade_mm: f64,
    /// Per-pixel Gaussian flow noise, px.
    pub noise_sigma: f64,
    /// Thresholds whose patches define the per-indenter normalization.
    pub reference_preset: Preset,
}

impl Default for SkinParams {
    fn default() -> Self {
        Self {
            peak_normal_px: 8.0,
            shear_ratio: 1.0 / 18.0,
            support_base_mm: 6.0,
            support_per_diameter: 1.2,
            shear_fade_mm: 3.0,
            noise_sigma: 0.05,
            reference_preset: Preset::Low,
        }
    }
}

/// Patch statistics of an indenter's unit-amplitude normal field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndenterResponse {
    pub radius_px: f64,
    /// Summed divergent magnitude over the patch per px of amplitude.
    pub q: f64,
    /// Patch area, px.
    pub n_box: f64,
    /// Half-diagonal of the patch, px.
    pub half_diag: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub flow: VectorField2,
    pub truth: Vec<ContactSpec>,
    pub noise_sigma: f64,
}

pub struct Skin {
    pub params: SkinParams,
    pub grid: GridSpec,
    pub geometry: SensorGeometry,
    px_per_mm: f64,
    kn: f64,
    responses: Mutex<HashMap<u64, IndenterResponse>>,
}

impl std::fmt::Debug for Skin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Skin")
            .field("params", &self.params)
            .field("grid", &self.grid)
            .field("kn", &self.kn)
            .finish()
    }
}

impl Skin {
    pub fn new(grid: GridSpec, params: SkinParams) -> Result<Self, SimError> {
        if !(params.peak_normal_px > 0.0 && params.shear_ratio >= 0.0 && params.noise_sigma >= 0.0) {
            return Err(SimError::Invalid("skin gains must be positive".into()));
        }
        if grid.width < 64 || grid.height < 64 {
            return Err(SimError::Invalid("grid must be at least 64x64".into()));
        }
        let mut skin = Self {
            params,
            grid,
            geometry: SensorGeometry::default(),
            px_per_mm: grid.width as f64 / SENSING_LENGTH_MM,
            kn: 0.0,
            responses: Mutex::new(HashMap::new()),
        };
        // displacements scale with resolution, sums with its square
        let scale = skin.px_per_mm / 3.0;
        let q5 = skin.response(5.0).q;
        skin.kn = params.peak_normal_px * scale * q5 / 3.0;
        Ok(skin)
    }

    /// 960x540 grid with default parameters.
    pub fn standard() -> Self {
        Self::new(GridSpec::new(960, 540).unwrap(), SkinParams::default()).expect("defaults are valid")
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.params.noise_sigma = sigma;
        self
    }

    pub fn px_per_mm(&self) -> f64 {
        self.px_per_mm
    }

    /// Normal gain `kn`: `Dn` per N of pressing force.
    pub fn normal_gain(&self) -> f64 {
        self.kn
    }

    pub fn shear_gain(&self) -> f64 {
        self.kn * self.params.shear_ratio
    }

    /// Image column of an arc position; the pixel map is affine in arc length.
    pub fn arc_to_px(&self, arc_mm: f64) -> f64 {
        self.centre().0 + self.px_per_mm * arc_mm
    }

    pub fn px_to_arc(&self, x2d: f64) -> f64 {
        (x2d - self.centre().0) / self.px_per_mm
    }

    pub fn centre(&self) -> (f64, f64) {
        ((self.grid.width / 2) as f64, (self.grid.height / 2) as f64)
    }

    pub fn support_radius_px(&self, ind: IndenterSpec) -> f64 {
        (self.params.support_base_mm + self.params.support_per_diameter * ind.diameter_mm) * self.px_per_mm
    }

    pub fn reference_thresholds(&self) -> SegmentationThresholds {
        SegmentationThresholds {
            box_sum_min: 0.0,
            ..SegmentationThresholds::preset(self.params.reference_preset)
        }
    }

    pub fn response(&self, diameter_mm: f64) -> IndenterResponse {
        let key = diameter_mm.to_bits();
        if let Some(r) = self.responses.lock().unwrap().get(&key) {
            return *r;
        }
        let r = self.measure(IndenterSpec::new(diameter_mm));
        self.responses.lock().unwrap().insert(key, r);
        r
    }

    /// Segment and decompose the noise-free disk on its own grid.
    fn measure(&self, ind: IndenterSpec) -> IndenterResponse {
        let rn = self.support_radius_px(ind);
        let half = rn.ceil() as usize + 24;
        let spec = GridSpec::new(2 * half + 1, 2 * half + 1).unwrap();
        let c = half as f64;
        // large enough that the inner hole of the mask stays far from the rim
        let amp = 16.0 * self.params.peak_normal_px;
        let flow = VectorField2::from_fn(spec, |x, y| disk(x as f64 - c, y as f64 - c, rn, amp));
        let (_, patches) = segment(&flow, &self.reference_thresholds());
        let patch = patches
            .iter()
            .find(|p| p.bbox.contains(half, half))
            .expect("unit disk yields a patch");
        let (raw, _) = analyze_patch(patch, DnMode::VectorNorm).expect("patch is large enough");
        let (w, h) = (patch.bbox.width() as f64, patch.bbox.height() as f64);
        IndenterResponse {
            radius_px: rn,
            q: raw.dn / amp,
            n_box: w * h,
            half_diag: 0.5 * w.hypot(h),
        }
    }

    /// Amplitudes `(A, t1, t2)` in px for one contact.
    pub fn amplitudes(&self, c: &ContactSpec) -> (f64, f64, f64) {
        let r = self.response(c.indenter.diameter_mm);
        let [t1, t2, press] = c.local_force(&self.geometry);
        let a = self.kn * press.max(0.0) / r.q;
        let ks = self.shear_gain();
        (a, ks * t1 / r.n_box, ks * t2 / r.n_box)
    }

    /// Noise-free flow of a set of contacts.
    pub fn clean_flow(&self, contacts: &[ContactSpec]) -> Result<VectorField2, SimError> {
        let (cy, spec) = (self.centre().1, self.grid);
        let centres: Vec<f64> = contacts.iter().map(|c| self.arc_to_px(c.arc_mm)).collect();
        for (c, &x) in contacts.iter().zip(&centres) {
            let rn = self.support_radius_px(c.indenter);
            if x - rn < 0.0 || x + rn > (spec.width - 1) as f64 {
                return Err(SimError::OffSkin(c.arc_mm));
            }
        }
        for i in 0..contacts.len() {
            for j in i + 1..contacts.len() {
                let (ri, rj) = (
                    self.support_radius_px(contacts[i].indenter),
                    self.support_radius_px(contacts[j].indenter),
                );
                let inter = circle_intersection(ri, rj, (centres[i] - centres[j]).abs());
                if inter > 0.5 * PI * ri.min(rj).powi(2) {
                    return Err(SimError::Overlap(i, j));
                }
            }
        }
        let (mut u, mut v) = (vec![0.0; spec.len()], vec![0.0; spec.len()]);
        let fade = self.params.shear_fade_mm * self.px_per_mm;
        for (c, &cx) in contacts.iter().zip(&centres) {
            let resp = self.response(c.indenter.diameter_mm);
            let (a, t1, t2) = self.amplitudes(c);
            let plateau = resp.half_diag + 2.0;
            let reach = if t1 != 0.0 || t2 != 0.0 { plateau + fade } else { resp.radius_px };
            let (x0, x1) = clamp_span(cx - reach, cx + reach, spec.width);
            let (y0, y1) = clamp_span(cy - reach, cy + reach, spec.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let (mut fu, mut fv) = disk(dx, dy, resp.radius_px, a);
                    let w = shear_window(dx.hypot(dy), plateau, fade);
                    fu += t1 * w;
                    fv += t2 * w;
                    let i = y * spec.width + x;
                    u[i] += fu;
                    v[i] += fv;
                }
            }
        }
        Ok(VectorField2::from_raw(spec, u, v))
    }

    /// Contacts plus i.i.d. Gaussian flow noise.
    pub fn synth_frame(&self, contacts: &[ContactSpec], seed: u64) -> Result<SyntheticFrame, SimError> {
        let mut flow = self.clean_flow(contacts)?;
        let sigma = self.params.noise_sigma;
        if sigma > 0.0 {
            flow = add_noise(flow, sigma, seed);
        }
        Ok(SyntheticFrame {
            flow,
            truth: contacts.to_vec(),
            noise_sigma: sigma,
        })
    }
}

fn add_noise(flow: VectorField2, sigma: f64, seed: u64) -> VectorField2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = flow.spec();
    let (mut u, mut v) = (flow.u().to_vec(), flow.v().to_vec());
    for (a, b) in u.iter_mut().zip(v.iter_mut()) {
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        *a += sigma * n1;
        *b += sigma * n2;
    }
    VectorField2::from_raw(spec, u, v)
}

fn disk(dx: f64, dy: f64, rn: f64, amp: f64) -> (f64, f64) {
    if dx * dx + dy * dy <= rn * rn {
        (amp * dx / rn, amp * dy / rn)
    } else {
        (0.0, 0.0)
    }
}

/// 1 up to `plateau`, then a cosine-squared fade of width `fade`.
fn shear_window(rho: f64, plateau: f64, fade: f64) -> f64 {
    if rho <= plateau {
        1.0
    } else if rho >= plateau + fade {
        0.0
    } else {
        (0.5 * PI * (rho - plateau) / fade).cos().powi(2)
    }
}

fn clamp_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil() as usize + 1).min(n);
    (a.min(n), b)
}

/// Area shared by two disks of radii `r1`, `r2` at distance `d`.
fn circle_intersection(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        return PI * r1.min(r2).powi(2);
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
    let k = ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).max(0.0).sqrt();
    r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k
}
