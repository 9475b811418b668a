//! Timed demo sequences: perching on two rods, comparing rod stiffness, and
//! mapping a row of rods while the drone moves along them.
//!
//! Truth, phases and poses are built up front; the flow of a frame is
//! rendered on request from the scenario seed and the frame index.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::characterization::mix;
use super::{ContactSpec, IndenterSpec, SimError, Skin, SyntheticFrame};
use crate::geometry::{Pose, SensorGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    TwoPerch,
    Compliance,
    Mapping,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::TwoPerch, Self::Compliance, Self::Mapping];

    pub fn name(self) -> &'static str {
        match self {
            Self::TwoPerch => "two_perch",
            Self::Compliance => "compliance",
            Self::Mapping => "mapping",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Descending onto the rods while the load builds up.
    Approach,
    Hold,
    /// Lifted off and moving to the next station.
    Advance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub fps: f64,
    pub indenter_mm: f64,
    /// Hold force per contact; the rear rod's in the compliance run, N.
    pub force_n: f64,
    pub ramp_frames: usize,
    pub hold_frames: usize,
    pub advance_frames: usize,
    /// Arc distance between the two contacts, mm.
    pub spacing_mm: f64,
    /// Front over rear rod stiffness.
    pub stiffness_ratio: f64,
    pub rods: usize,
    pub rod_spacing_m: f64,
    /// Standard deviation of the reported position, per axis, m.
    pub pose_noise_m: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            fps: 30.0,
            indenter_mm: 5.0,
            force_n: 2.0,
            ramp_frames: 10,
            hold_frames: 30,
            advance_frames: 8,
            spacing_mm: 120.0,
            stiffness_ratio: 1.7,
            rods: 4,
            rod_spacing_m: 0.1,
            pose_noise_m: 0.01,
        }
    }
}

impl ScenarioParams {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        let base = Self::default();
        match kind {
            ScenarioKind::TwoPerch => base,
            ScenarioKind::Compliance => Self { force_n: 1.5, ..base },
            ScenarioKind::Mapping => Self {
                hold_frames: 20,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub index: usize,
    pub ts_s: f64,
    pub phase: Phase,
    pub contacts: Vec<ContactSpec>,
    pub true_pose: Pose,
    /// Pose as reported by the drone's state estimate.
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub params: ScenarioParams,
    pub frames: Vec<FrameTruth>,
    /// Global contact points on the rods, m.
    pub rods: Vec<[f64; 3]>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, skin: &Skin, k: usize) -> Result<SyntheticFrame, SimError> {
        skin.synth_frame(&self.frames[k].contacts, mix(self.seed, 1_000_003 + k as u64))
    }

    pub fn hold_frames(&self) -> impl Iterator<Item = &FrameTruth> {
        self.frames.iter().filter(|f| f.phase == Phase::Hold)
    }
}

fn press(arc_mm: f64, force: f64, d: f64) -> ContactSpec {
    ContactSpec {
        arc_mm,
        force: [0.0, 0.0, -force],
        indenter: IndenterSpec::new(d),
    }
}

/// Load factor and phase of step `i` in an approach/hold cycle.
fn cycle(p: &ScenarioParams, i: usize) -> (f64, Phase) {
    if i < p.ramp_frames {
        ((i + 1) as f64 / p.ramp_frames as f64, Phase::Approach)
    } else {
        (1.0, Phase::Hold)
    }
}

fn validate(p: &ScenarioParams) -> Result<(), SimError> {
    let ok = p.fps > 0.0
        && p.indenter_mm > 0.0
        && p.force_n > 0.0
        && p.stiffness_ratio > 0.0
        && p.spacing_mm > 0.0
        && p.rod_spacing_m > 0.0
        && p.pose_noise_m >= 0.0
        && p.hold_frames > 0;
    if ok {
        Ok(())
    } else {
        Err(SimError::Invalid("scenario parameters must be positive".into()))
    }
}

pub fn synth_scenario(kind: ScenarioKind, params: ScenarioParams, seed: u64) -> Result<Scenario, SimError> {
    validate(&params)?;
    let p = &params;
    let mut frames = Vec::new();
    let mut rods = Vec::new();
    let dt = 1.0 / p.fps;
    match kind {
        ScenarioKind::TwoPerch | ScenarioKind::Compliance => {
            let (rear, front) = match kind {
                ScenarioKind::Compliance => (p.force_n, p.force_n * p.stiffness_ratio),
                _ => (p.force_n, p.force_n),
            };
            for i in 0..p.ramp_frames + p.hold_frames {
                let (load, phase) = cycle(p, i);
                frames.push(FrameTruth {
                    index: i,
                    ts_s: i as f64 * dt,
                    phase,
                    contacts: vec![
                        press(-0.5 * p.spacing_mm, load * rear, p.indenter_mm),
                        press(0.5 * p.spacing_mm, load * front, p.indenter_mm),
                    ],
                    true_pose: Pose::identity(),
                    pose: Pose::identity(),
                });
            }
        }
        ScenarioKind::Mapping => {
            if p.rods < 2 {
                return Err(SimError::Invalid("mapping needs at least two rods".into()));
            }
            let geo = SensorGeometry::default();
            let r = geo.radius_mm();
            let half = 500.0 * p.rod_spacing_m;
            // the drone stops midway between neighbours; both rods sit under the skin
            let z_contact = geo.surface_z(half)? / 1000.0;
            let arc = r * (half / r).asin();
            rods = (0..p.rods)
                .map(|i| [i as f64 * p.rod_spacing_m, 0.0, z_contact])
                .collect();
            let lift = 0.05;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 7));
            let noise = Normal::new(0.0, p.pose_noise_m.max(1e-300)).unwrap();
            let mut t = 0usize;
            for station in 0..p.rods - 1 {
                let xd = (station as f64 + 0.5) * p.rod_spacing_m;
                let steps = p.ramp_frames + p.hold_frames + p.advance_frames;
                for i in 0..steps {
                    let (pos, phase, contacts) = if i < p.ramp_frames + p.hold_frames {
                        // settling onto the rods: the load builds while the body stays put
                        let (load, phase) = cycle(p, i);
                        let c = vec![
                            press(-arc, load * p.force_n, p.indenter_mm),
                            press(arc, load * p.force_n, p.indenter_mm),
                        ];
                        ([xd, 0.0, 0.0], phase, c)
                    } else {
                        let s = (i - p.ramp_frames - p.hold_frames + 1) as f64 / p.advance_frames as f64;
                        let z = -lift * (std::f64::consts::PI * s).sin();
                        ([xd + s * p.rod_spacing_m, 0.0, z], Phase::Advance, vec![])
                    };
                    let true_pose = Pose {
                        position: Vector3::from(pos),
                        ..Pose::identity()
                    };
                    let jitter = if p.pose_noise_m > 0.0 {
                        Vector3::from_fn(|_, _| noise.sample(&mut rng))
                    } else {
                        Vector3::zeros()
                    };
                    frames.push(FrameTruth {
                        index: t,
                        ts_s: t as f64 * dt,
                        phase,
                        contacts,
                        true_pose,
                        pose: Pose {
                            position: true_pose.position + jitter,
                            ..true_pose
                        },
                    });
                    t += 1;
                }
            }
        }
    }
    Ok(Scenario {
        kind,
        seed,
        params,
        frames,
        rods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sensor_to_global, RigidTransform};

    #[test]
    fn names_roundtrip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!(matches!("hover".parse::<ScenarioKind>(), Err(SimError::UnknownScenario(_))));
    }

    #[test]
    fn compliance_loads_follow_the_ratio() {
        let s = synth_scenario(ScenarioKind::Compliance, ScenarioParams::for_kind(ScenarioKind::Compliance), 1).unwrap();
        assert_eq!(s.hold_frames().count(), 30);
        for f in s.hold_frames() {
            let (rear, front) = (f.contacts[0].force_norm(), f.contacts[1].force_norm());
            assert!((front / rear - 1.7).abs() < 1e-12);
            assert!(f.contacts[1].arc_mm > f.contacts[0].arc_mm);
        }
    }

    #[test]
    fn mapping_contacts_land_on_the_rods() {
        let params = ScenarioParams {
            pose_noise_m: 0.0,
            ..ScenarioParams::for_kind(ScenarioKind::Mapping)
        };
        let s = synth_scenario(ScenarioKind::Mapping, params, 2).unwrap();
        let geo = SensorGeometry::default();
        assert_eq!(s.rods.len(), 4);
        for f in s.frames.iter().filter(|f| f.phase == Phase::Hold) {
            for c in &f.contacts {
                let x = c.x3d_mm(&geo);
                let p = [x, 0.0, geo.surface_z(x).unwrap()];
                let g = sensor_to_global(p, &f.true_pose, &RigidTransform::identity());
                let nearest = s
                    .rods
                    .iter()
                    .map(|r| ((r[0] - g[0]).powi(2) + (r[2] - g[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest < 1e-9, "{nearest}");
            }
        }
        assert!(s.frames.iter().any(|f| f.phase == Phase::Advance && f.contacts.is_empty()));
    }

    #[test]
    fn pose_noise_is_seeded() {
        let p = ScenarioParams::for_kind(ScenarioKind::Mapping);
        let a = synth_scenario(ScenarioKind::Mapping, p.clone(), 5).unwrap();
        let b = synth_scenario(ScenarioKind::Mapping, p.clone(), 5).unwrap();
        let c = synth_scenario(ScenarioKind::Mapping, p, 6).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames[0].pose, c.frames[0].pose);
        let errs: Vec<f64> = a.frames.iter().map(|f| f.pose.position.x - f.true_pose.position.x).collect();
        let sd = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((0.006..0.014).contains(&sd), "{sd}");
    }

    #[test]
    fn frames_render_deterministically() {
        let skin = Skin::standard();
        let s = synth_scenario(ScenarioKind::TwoPerch, ScenarioParams::default(), 3).unwrap();
        assert_eq!(s.frame(&skin, 12).unwrap().flow, s.frame(&skin, 12).unwrap().flow);
        assert_eq!(s.frame(&skin, 12).unwrap().truth.len(), 2);
    }
}
