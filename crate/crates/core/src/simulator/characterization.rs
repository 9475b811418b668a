//! Synthetic characterization runs: indenters pressed on the measuring rows
//! at several sensor inclinations and force levels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{row_arc_mm, ContactSpec, IndenterSpec, Skin};
use crate::calibration::{CalibrationRecord, SplitDataset, VAL_ROWS};
use crate::contact::{analyze_patch, DnMode};
use crate::geometry::{contact_rotation, rotate_raw};
use crate::segmentation::{segment, SegmentationThresholds};

pub const FORCE_LEVELS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
/// `(yaw, pitch)` inclinations of the sensor base, degrees.
pub const POSES: [(f64, f64); 5] = [(0.0, 0.0), (0.0, 15.0), (0.0, -15.0), (15.0, 0.0), (-15.0, 0.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizationProtocol {
    pub rows: Vec<u32>,
    pub indenters_mm: Vec<f64>,
    pub poses: Vec<(f64, f64)>,
    pub forces_n: Vec<f64>,
    pub train_val_records: usize,
    pub test_records: usize,
}

impl Default for CharacterizationProtocol {
    fn default() -> Self {
        Self {
            rows: (2..=14).collect(),
            indenters_mm: vec![2.0, 5.0, 10.0],
            poses: POSES.to_vec(),
            forces_n: FORCE_LEVELS.to_vec(),
            train_val_records: 855,
            test_records: 210,
        }
    }
}

/// Force of a vertical press on a base tilted by `pitch` about the sensor y
/// axis and `yaw` about the sensor x axis, sensor frame.
pub fn inclined_force(magnitude: f64, yaw_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let (sq, cq) = yaw_deg.to_radians().sin_cos();
    [-magnitude * sp, magnitude * cp * sq, -magnitude * cp * cq]
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    row: u32,
    indenter_mm: f64,
    pose: (f64, f64),
    force_n: f64,
}

/// One pressed frame through segmentation and patch analysis. `None` when
/// nothing is detected.
fn measure(skin: &Skin, t: &Trial, thresholds: &SegmentationThresholds, seed: u64) -> Option<CalibrationRecord> {
    let contact = ContactSpec {
        arc_mm: row_arc_mm(t.row),
        force: inclined_force(t.force_n, t.pose.0, t.pose.1),
        indenter: IndenterSpec::new(t.indenter_mm),
    };
    let frame = skin.synth_frame(&[contact], seed).ok()?;
    let (_, patches) = segment(&frame.flow, thresholds);
    let (px, py) = (skin.arc_to_px(contact.arc_mm), skin.centre().1);
    let patch = patches
        .iter()
        .find(|p| p.bbox.contains(px.round() as usize, py as usize))?;
    let (raw, _) = analyze_patch(patch, DnMode::VectorNorm).ok()?;
    // the row is known during characterization, so its true position sets the rotation
    let x3d = contact.x3d_mm(&skin.geometry);
    let rot = contact_rotation(x3d, &skin.geometry).ok()?;
    let [dx, dy, dz] = rotate_raw([raw.ds1, raw.ds2, raw.dn], &rot);
    let [fx, fy, fz] = contact.force;
    Some(CalibrationRecord {
        row_id: t.row,
        indenter_d_mm: t.indenter_mm,
        yaw_deg: t.pose.0,
        pitch_deg: t.pose.1,
        fx,
        fy,
        fz,
        dx,
        dy,
        dz,
        x2d: raw.x2d,
        y2d: raw.y2d,
        dpf: raw.dpf,
        x3d_mm: x3d,
    })
}

fn trials(p: &CharacterizationProtocol, rows: &[u32]) -> Vec<Trial> {
    let mut out = Vec::new();
    for &row in rows {
        for &indenter_mm in &p.indenters_mm {
            for &pose in &p.poses {
                for &force_n in &p.forces_n {
                    out.push(Trial {
                        row,
                        indenter_mm,
                        pose,
                        force_n,
                    });
                }
            }
        }
    }
    out
}

/// SplitMix64 step, used to derive independent per-frame seeds.
pub(crate) fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw trials in a seeded order and keep the first `n` that are detected.
fn collect(skin: &Skin, mut pool: Vec<Trial>, n: usize, seed: u64, salt: u64) -> Vec<CalibrationRecord> {
    let thresholds = SegmentationThresholds::preset(skin.params.reference_preset);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, salt)));
    let mut out = Vec::with_capacity(n);
    for (k, t) in pool.iter().enumerate() {
        if out.len() == n {
            break;
        }
        if let Some(r) = measure(skin, t, &thresholds, mix(seed, salt ^ (k as u64) << 8)) {
            out.push(r);
        }
    }
    // keep the file order stable and readable
    out.sort_by(|a, b| {
        (a.row_id, a.indenter_d_mm.to_bits(), a.yaw_deg.to_bits(), a.pitch_deg.to_bits(), a.fz.to_bits())
            .cmp(&(b.row_id, b.indenter_d_mm.to_bits(), b.yaw_deg.to_bits(), b.pitch_deg.to_bits(), b.fz.to_bits()))
    });
    out
}

/// Training/validation records from every row plus separate test
/// acquisitions on the validation rows.
pub fn synth_characterization(skin: &Skin, protocol: &CharacterizationProtocol, seed: u64) -> SplitDataset {
    let train_val = collect(skin, trials(protocol, &protocol.rows), protocol.train_val_records, seed, 1);
    let test_rows: Vec<u32> = protocol.rows.iter().copied().filter(|r| VAL_ROWS.contains(r)).collect();
    let test = collect(skin, trials(protocol, &test_rows), protocol.test_records, seed, 2);
    SplitDataset::from_rows(train_val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inclined_forces() {
        assert_eq!(inclined_force(2.0, 0.0, 0.0), [-0.0, 0.0, -2.0]);
        let f = inclined_force(3.0, 15.0, 0.0);
        assert!((f[1] - 3.0 * 15f64.to_radians().sin()).abs() < 1e-12 && f[0] == 0.0);
        let f = inclined_force(3.0, 0.0, -15.0);
        assert!((f[0] - 3.0 * 15f64.to_radians().sin()).abs() < 1e-12);
        for (y, p) in POSES {
            let f = inclined_force(1.7, y, p);
            assert!((f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn small_protocol_is_deterministic_and_sized() {
        let skin = Skin::standard();
        let p = CharacterizationProtocol {
            rows: vec![5, 7, 8],
            indenters_mm: vec![5.0],
            poses: vec![(0.0, 0.0), (15.0, 0.0)],
            forces_n: vec![0.5, 2.0],
            train_val_records: 10,
            test_records: 3,
        };
        let a = synth_characterization(&skin, &p, 3);
        let b = synth_characterization(&skin, &p, 3);
        assert_eq!(a.train.len() + a.val.len(), 10);
        assert_eq!(a.test.len(), 3);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert!(a.val.iter().chain(&a.test).all(|r| r.row_id == 5 || r.row_id == 8));
        assert!(a.train.iter().all(|r| r.row_id == 7));
        let c = synth_characterization(&skin, &p, 4);
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn noise_free_record_matches_gains() {
        let skin = Skin::standard().with_noise(0.0);
        let t = Trial {
            row: 8,
            indenter_mm: 10.0,
            pose: (0.0, 0.0),
            force_n: 0.5,
        };
        let r = measure(&skin, &t, &SegmentationThresholds::low(), 0).expect("0.5 N is detected at the low preset");
        assert!((r.dz - 0.5 * skin.normal_gain()).abs() < 1e-6 * skin.normal_gain());
        assert!(r.dx.abs() < 1e-6 && r.dy.abs() < 1e-6);
        assert_eq!((r.x2d, r.y2d, r.x3d_mm), (480.0, 270.0, 0.0));
    }
}
