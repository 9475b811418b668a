//! Frame-to-contacts processing plus the pieces around it: temporal
//! smoothing, the perching demos and replay of recorded sequences.

mod demo;
mod replay;
mod smooth;

pub use demo::{build_map, compliance_select, ComplianceDecision, DemoError, PoseSample, RodEstimate, Side, MAP_CLUSTER_M};
pub use replay::{
    bench, read_events, run_replay, write_dataset, write_events, BenchReport, Manifest, ReplayError, ReplayMetrics,
    EVENTS_HEADER, TARGET_FPS,
};
pub use smooth::{Smoother, TRACK_GATE_MM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationModel;
use crate::contact::{analyze_patch, DnMode, RawContact};
use crate::fields::{GridSpec, Mask, Rect, ScalarField, VectorField2};
use crate::geometry::{contact_rotation, pixel_to_sensor_with, rotate_raw, GeometryError, SensorGeometry};
use crate::nhhd::Decomposition;
use crate::segmentation::{segment, ContactPatch, SegmentationThresholds, ThresholdError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Thresholds(#[from] ThresholdError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("filter_alpha must be in (0, 1], got {0}")]
    Alpha(f64),
    #[error("crop {0:?} does not fit the {1}x{2} frame")]
    Crop(Rect, usize, usize),
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub thresholds: SegmentationThresholds,
    pub geometry: SensorGeometry,
    /// Exponential smoothing of tracked contacts during replay.
    pub filter: bool,
    pub filter_alpha: f64,
    pub dn_mode: DnMode,
    /// Region of the frame to analyze; the whole frame when absent.
    pub crop: Option<Rect>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: SegmentationThresholds::default(),
            geometry: SensorGeometry::default(),
            filter: false,
            filter_alpha: 0.3,
            dn_mode: DnMode::default(),
            crop: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.thresholds.validate()?;
        self.geometry.validate()?;
        if !(self.filter_alpha > 0.0 && self.filter_alpha <= 1.0) {
            return Err(ConfigError::Alpha(self.filter_alpha));
        }
        if let Some(c) = self.crop {
            if c.width() == 0 || c.height() == 0 {
                return Err(ConfigError::Crop(c, 0, 0));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a partial JSON object on top of this config. Unknown keys and
    /// invalid results are rejected and leave `self` untouched.
    pub fn merged(&self, delta: &serde_json::Value) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, delta);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_json(base: &mut serde_json::Value, delta: &serde_json::Value) {
    match (base, delta) {
        (serde_json::Value::Object(b), serde_json::Value::Object(d)) => {
            for (k, v) in d {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, d) => *b = d.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub frame: usize,
    pub ts_s: f64,
    /// Sensor frame, mm.
    pub location: [f64; 3],
    /// Sensor frame, N; absent without a calibration model.
    pub force: Option<[f64; 3]>,
    pub raw: RawContact,
    pub bbox: Rect,
}

impl ContactEvent {
    pub fn force_norm(&self) -> Option<f64> {
        self.force.map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct PatchResult {
    pub patch: ContactPatch,
    pub decomposition: Decomposition,
}

/// Everything computed for one frame; `process_frame` keeps only the events.
#[derive(Debug, Clone)]
pub struct FrameAnalysis {
    pub spec: GridSpec,
    pub mask: Mask,
    pub patches: Vec<PatchResult>,
    pub events: Vec<ContactEvent>,
    /// Patches dropped because they could not be analyzed.
    pub warnings: usize,
}

impl FrameAnalysis {
    pub fn boxes(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.patch.bbox).collect()
    }

    /// Divergent flow of every patch pasted into a frame-sized field.
    pub fn divergent_field(&self) -> VectorField2 {
        let (mut u, mut v) = (vec![0.0; self.spec.len()], vec![0.0; self.spec.len()]);
        for p in &self.patches {
            paste(&mut u, self.spec, p.patch.bbox, p.decomposition.d.u());
            paste(&mut v, self.spec, p.patch.bbox, p.decomposition.d.v());
        }
        VectorField2::from_raw(self.spec, u, v)
    }

    /// Divergent potential of every patch pasted into a frame-sized field.
    pub fn potential_field(&self) -> ScalarField {
        let mut out = vec![0.0; self.spec.len()];
        for p in &self.patches {
            paste(&mut out, self.spec, p.patch.bbox, p.decomposition.d_pot.values());
        }
        ScalarField::from_raw(self.spec, out)
    }
}

fn paste(dst: &mut [f64], spec: GridSpec, r: Rect, src: &[f64]) {
    let w = r.width();
    for (j, row) in src.chunks(w).enumerate() {
        let start = (r.y0 + j) * spec.width + r.x0;
        dst[start..start + w].copy_from_slice(row);
    }
}

fn shift_rect(r: Rect, dx: usize, dy: usize) -> Rect {
    Rect::new(r.x0 + dx, r.y0 + dy, r.x1 + dx, r.y1 + dy)
}

/// Segment, decompose, locate and (with a model) estimate forces.
pub fn analyze_frame(
    flow: &VectorField2,
    cfg: &PipelineConfig,
    model: Option<&CalibrationModel>,
    frame: usize,
    ts_s: f64,
) -> Result<FrameAnalysis, ConfigError> {
    let spec = flow.spec();
    let crop = cfg.crop.unwrap_or_else(|| Rect::full(&spec));
    if !crop.fits(&spec) || crop.width() == 0 || crop.height() == 0 {
        return Err(ConfigError::Crop(crop, spec.width, spec.height));
    }
    let cropped;
    let view = if crop == Rect::full(&spec) {
        flow
    } else {
        cropped = flow.crop(crop);
        &cropped
    };
    let (local_mask, patches) = segment(view, &cfg.thresholds);
    let mask = if crop == Rect::full(&spec) {
        local_mask
    } else {
        Mask::from_fn(spec, |x, y| crop.contains(x, y) && local_mask.get(x - crop.x0, y - crop.y0))
    };

    let g1 = model.map_or(&cfg.geometry.g1, |m| &m.g1);
    let mut out = FrameAnalysis {
        spec,
        mask,
        patches: Vec::with_capacity(patches.len()),
        events: Vec::new(),
        warnings: 0,
    };
    for mut patch in patches {
        let Ok((mut raw, decomposition)) = analyze_patch(&patch, cfg.dn_mode) else {
            out.warnings += 1;
            continue;
        };
        raw.x2d += crop.x0 as f64;
        raw.y2d += crop.y0 as f64;
        patch.bbox = shift_rect(patch.bbox, crop.x0, crop.y0);
        patch.core = shift_rect(patch.core, crop.x0, crop.y0);
        let located = pixel_to_sensor_with(g1, raw.x2d, raw.y2d, &cfg.geometry)
            .and_then(|loc| contact_rotation(loc[0], &cfg.geometry).map(|rot| (loc, rot)));
        let Ok((location, rot)) = located else {
            out.warnings += 1;
            continue;
        };
        let force = model.map(|m| m.forces(rotate_raw([raw.ds1, raw.ds2, raw.dn], &rot), raw.x2d, raw.y2d, raw.dpf));
        out.events.push(ContactEvent {
            frame,
            ts_s,
            location,
            force,
            raw,
            bbox: patch.bbox,
        });
        out.patches.push(PatchResult { patch, decomposition });
    }
    out.events.sort_by(|a, b| a.location[0].total_cmp(&b.location[0]));
    Ok(out)
}

pub fn process_frame(
    flow: &VectorField2,
    cfg: &PipelineConfig,
    model: Option<&CalibrationModel>,
    frame: usize,
    ts_s: f64,
) -> Result<Vec<ContactEvent>, ConfigError> {
    Ok(analyze_frame(flow, cfg, model, frame, ts_s)?.events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Preset;
    use crate::simulator::{row_arc_mm, ContactSpec, IndenterSpec, Skin};

    fn press(arc: f64, f: f64) -> ContactSpec {
        ContactSpec {
            arc_mm: arc,
            force: [0.0, 0.0, -f],
            indenter: IndenterSpec::new(5.0),
        }
    }

    #[test]
    fn zero_flow_has_no_events() {
        let f = VectorField2::zeros(GridSpec::new(960, 540).unwrap());
        let a = analyze_frame(&f, &PipelineConfig::default(), None, 0, 0.0).unwrap();
        assert!(a.events.is_empty() && a.patches.is_empty() && a.warnings == 0);
    }

    #[test]
    fn events_are_ordered_and_located_without_a_model() {
        let skin = Skin::standard();
        let fr = skin.synth_frame(&[press(60.0, 2.0), press(-60.0, 2.0)], 1).unwrap();
        let ev = process_frame(&fr.flow, &PipelineConfig::default(), None, 4, 0.1).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev[0].location[0] < ev[1].location[0]);
        // the placeholder column map is the simulator's arc map, read as a chord
        assert!((ev[1].location[0] - 60.0).abs() < 1.0, "{:?}", ev[1].location);
        assert!(ev.iter().all(|e| e.force.is_none() && e.frame == 4));
        let geo = SensorGeometry::default();
        for e in &ev {
            assert!((e.location[2] - geo.surface_z(e.location[0]).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn weak_press_is_gated_at_high() {
        let skin = Skin::standard();
        let fr = skin.synth_frame(&[press(row_arc_mm(8), 0.7)], 2).unwrap();
        assert!(process_frame(&fr.flow, &PipelineConfig::default(), None, 0, 0.0).unwrap().is_empty());
    }

    #[test]
    fn crop_keeps_frame_coordinates() {
        let skin = Skin::standard();
        let fr = skin.synth_frame(&[press(60.0, 2.0), press(-60.0, 2.0)], 3).unwrap();
        let full = process_frame(&fr.flow, &PipelineConfig::default(), None, 0, 0.0).unwrap();
        let cfg = PipelineConfig {
            crop: Some(Rect::new(480, 100, 960, 440)),
            ..Default::default()
        };
        let a = analyze_frame(&fr.flow, &cfg, None, 0, 0.0).unwrap();
        assert_eq!(a.events.len(), 1);
        assert_eq!(a.events[0].bbox, full[1].bbox);
        assert_eq!((a.events[0].raw.x2d, a.events[0].raw.y2d), (full[1].raw.x2d, full[1].raw.y2d));
        assert!(a.mask.count() > 0 && !a.mask.get(100, 270));
        let bad = PipelineConfig {
            crop: Some(Rect::new(900, 0, 1000, 10)),
            ..Default::default()
        };
        assert!(matches!(analyze_frame(&fr.flow, &bad, None, 0, 0.0), Err(ConfigError::Crop(..))));
    }

    #[test]
    fn pasted_intermediates_cover_the_boxes() {
        let skin = Skin::standard();
        let fr = skin.synth_frame(&[press(0.0, 2.5)], 4).unwrap();
        let a = analyze_frame(&fr.flow, &PipelineConfig::default(), None, 0, 0.0).unwrap();
        let b = a.boxes()[0];
        let pot = a.potential_field();
        let (x, y) = pot.argmin();
        assert!(b.contains(x, y));
        assert_eq!((x as f64, y as f64), (a.events[0].raw.x2d, a.events[0].raw.y2d));
        let d = a.divergent_field();
        assert_eq!(d.get(0, 0), (0.0, 0.0));
        assert!(d.energy() > 0.0);
    }

    #[test]
    fn config_json_roundtrip_and_delta() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert!(PipelineConfig::from_json(r#"{"mask":1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"filter_alpha":0}"#).is_err());
        let up = cfg
            .merged(&serde_json::json!({"thresholds": {"mask_mag": 1.4, "preset": "custom"}}))
            .unwrap();
        assert_eq!(up.thresholds.mask_mag, 1.4);
        assert_eq!(up.thresholds.preset, Preset::Custom);
        assert_eq!(up.thresholds.box_sum_min, cfg.thresholds.box_sum_min);
        assert!(cfg.merged(&serde_json::json!({"thresholds": {"mask_mag": -1.0}})).is_err());
        assert!(cfg.merged(&serde_json::json!({"thresholds": {"bogus": 1}})).is_err());
    }
}
