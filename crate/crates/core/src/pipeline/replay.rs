//! Recorded sequences on disk, offline replay and the throughput bench.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::demo::PoseSample;
use super::{analyze_frame, ConfigError, ContactEvent, PipelineConfig, Smoother};
use crate::calibration::CalibrationModel;
use crate::contact::RawContact;
use crate::fields::{FieldError, GridSpec, Rect, VectorField2};
use crate::geometry::Pose;
use crate::poly::Polynomial1D;
use crate::simulator::{ContactSpec, IndenterSpec, Scenario, SimError, Skin, SkinParams};

pub const EVENTS_HEADER: &str = "frame,ts_s,x3D_mm,y3D_mm,z3D_mm,Fx_N,Fy_N,Fz_N,x2D_px,y2D_px,Ds1,Ds2,Dn,dPF,bbox_x0,bbox_y0,bbox_x1,bbox_y1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Field { path: String, source: FieldError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("frame {0} is out of range")]
    NoFrame(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReplayError + '_ {
    move |source| ReplayError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Value,
    /// Frame files relative to the manifest.
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<String>,
    /// Ground-truth rod contact points in the world frame, m.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rods: Vec<[f64; 3]>,
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|source| ReplayError::Json {
            path: path.display().to_string(),
            source,
        })?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.params.get("fps").and_then(|v| v.as_f64()).filter(|f| *f > 0.0).unwrap_or(30.0)
    }

    pub fn frame_path(&self, k: usize) -> Result<PathBuf, ReplayError> {
        self.frames.get(k).map(|f| self.base.join(f)).ok_or(ReplayError::NoFrame(k))
    }

    pub fn frame_bytes(&self, k: usize) -> Result<Vec<u8>, ReplayError> {
        let p = self.frame_path(k)?;
        fs::read(&p).map_err(io_err(&p))
    }

    pub fn load_frame(&self, k: usize) -> Result<VectorField2, ReplayError> {
        let p = self.frame_path(k)?;
        let mut r = BufReader::new(File::open(&p).map_err(io_err(&p))?);
        VectorField2::read_from(&mut r).map_err(|source| ReplayError::Field {
            path: p.display().to_string(),
            source,
        })
    }

    /// Reported drone poses, when the sequence has them.
    pub fn load_poses(&self) -> Result<Vec<PoseSample>, ReplayError> {
        let Some(rel) = &self.poses else { return Ok(Vec::new()) };
        let p = self.base.join(rel);
        let csv_err = |source| ReplayError::Csv {
            path: p.display().to_string(),
            source,
        };
        let mut rd = csv::Reader::from_path(&p).map_err(csv_err)?;
        let mut out = Vec::new();
        for row in rd.deserialize::<PoseRow>() {
            let r = row.map_err(csv_err)?;
            out.push(PoseSample {
                ts_s: r.ts_s,
                pose: Pose {
                    position: Vector3::new(r.x_m, r.y_m, r.z_m),
                    orientation: UnitQuaternion::from_quaternion(Quaternion::new(r.qw, r.qx, r.qy, r.qz)),
                },
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| ReplayError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    frame: usize,
    ts_s: f64,
    x_m: f64,
    y_m: f64,
    z_m: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    true_x_m: f64,
    true_y_m: f64,
    true_z_m: f64,
}

#[derive(Debug, Serialize)]
struct TruthRow {
    frame: usize,
    ts_s: f64,
    phase: crate::simulator::Phase,
    contact: usize,
    arc_mm: f64,
    #[serde(rename = "x3D_mm")]
    x3d_mm: f64,
    #[serde(rename = "Fx_N")]
    fx: f64,
    #[serde(rename = "Fy_N")]
    fy: f64,
    #[serde(rename = "Fz_N")]
    fz: f64,
    indenter_d_mm: f64,
}

/// Render a scenario to `dir`: one binary field per frame, truth and pose
/// tables, and `manifest.json`. Returns the manifest path.
pub fn write_dataset(scenario: &Scenario, skin: &Skin, dir: &Path) -> Result<PathBuf, ReplayError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let mut frames = Vec::with_capacity(scenario.len());
    for k in 0..scenario.len() {
        let rel = format!("frames/{k:06}.tfld");
        let p = dir.join(&rel);
        let frame = scenario.frame(skin, k)?;
        let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        frame.flow.write_to(&mut w).map_err(|source| ReplayError::Field {
            path: p.display().to_string(),
            source,
        })?;
        w.flush().map_err(io_err(&p))?;
        frames.push(rel);
    }

    let csv_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| ReplayError::Csv { path, source }
    };
    let truth_path = dir.join("truth.csv");
    let mut tw = csv::Writer::from_path(&truth_path).map_err(csv_err(&truth_path))?;
    let pose_path = dir.join("poses.csv");
    let mut pw = csv::Writer::from_path(&pose_path).map_err(csv_err(&pose_path))?;
    for f in &scenario.frames {
        for (i, c) in f.contacts.iter().enumerate() {
            tw.serialize(TruthRow {
                frame: f.index,
                ts_s: f.ts_s,
                phase: f.phase,
                contact: i,
                arc_mm: c.arc_mm,
                x3d_mm: c.x3d_mm(&skin.geometry),
                fx: c.force[0],
                fy: c.force[1],
                fz: c.force[2],
                indenter_d_mm: c.indenter.diameter_mm,
            })
            .map_err(csv_err(&truth_path))?;
        }
        let q = f.pose.orientation;
        pw.serialize(PoseRow {
            frame: f.index,
            ts_s: f.ts_s,
            x_m: f.pose.position.x,
            y_m: f.pose.position.y,
            z_m: f.pose.position.z,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            true_x_m: f.true_pose.position.x,
            true_y_m: f.true_pose.position.y,
            true_z_m: f.true_pose.position.z,
        })
        .map_err(csv_err(&pose_path))?;
    }
    tw.flush().map_err(io_err(&truth_path))?;
    pw.flush().map_err(io_err(&pose_path))?;

    let manifest = Manifest {
        name: scenario.kind.name().to_string(),
        seed: scenario.seed,
        params: serde_json::to_value(&scenario.params).expect("params serialize"),
        frames,
        truth: Some("truth.csv".into()),
        poses: Some("poses.csv".into()),
        rods: scenario.rods.clone(),
        base: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

fn push_f(line: &mut String, v: f64) {
    let _ = write!(line, ",{v:.6}");
}

pub fn write_events<W: Write>(mut w: W, events: &[ContactEvent]) -> std::io::Result<()> {
    for e in events {
        let mut line = format!("{},{:.6}", e.frame, e.ts_s);
        for v in e.location {
            push_f(&mut line, v);
        }
        match e.force {
            Some(f) => f.iter().for_each(|v| push_f(&mut line, *v)),
            None => line.push_str(",,,"),
        }
        let r = &e.raw;
        for v in [r.x2d, r.y2d, r.ds1, r.ds2, r.dn, r.dpf] {
            push_f(&mut line, v);
        }
        let b = e.bbox;
        let _ = writeln!(line, ",{},{},{},{}", b.x0, b.y0, b.x1, b.y1);
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_events<R: Read>(r: R) -> Result<Vec<ContactEvent>, csv::Error> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let u = |i: usize| rec.get(i).and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
        let force = [f(5), f(6), f(7)];
        out.push(ContactEvent {
            frame: u(0),
            ts_s: f(1),
            location: [f(2), f(3), f(4)],
            force: force.iter().all(|v| v.is_finite()).then_some(force),
            raw: RawContact {
                x2d: f(8),
                y2d: f(9),
                ds1: f(10),
                ds2: f(11),
                dn: f(12),
                dpf: f(13),
            },
            bbox: Rect::new(u(14), u(15), u(16), u(17)),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMetrics {
    pub frames: usize,
    pub events: usize,
    pub patches: usize,
    pub warnings: usize,
    pub elapsed_s: f64,
    pub fps: f64,
}

/// Replay a recorded sequence, writing the event log to `out` and the
/// metrics next to it as `<out stem>.metrics.json`.
pub fn run_replay(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    model: Option<&CalibrationModel>,
    out: &Path,
) -> Result<(Vec<ContactEvent>, ReplayMetrics), ReplayError> {
    cfg.validate()?;
    let mut w = BufWriter::new(File::create(out).map_err(io_err(out))?);
    writeln!(w, "{EVENTS_HEADER}").map_err(io_err(out))?;
    let mut smoother = cfg.filter.then(|| Smoother::new(cfg.filter_alpha));
    let dt = 1.0 / manifest.fps();
    let mut all = Vec::new();
    let (mut patches, mut warnings) = (0, 0);
    let mut busy = 0.0;
    for k in 0..manifest.len() {
        let flow = manifest.load_frame(k)?;
        let t0 = Instant::now();
        let a = analyze_frame(&flow, cfg, model, k, k as f64 * dt)?;
        let events = match smoother.as_mut() {
            Some(s) => s.update(&a.events),
            None => a.events,
        };
        busy += t0.elapsed().as_secs_f64();
        patches += a.patches.len();
        warnings += a.warnings;
        write_events(&mut w, &events).map_err(io_err(out))?;
        all.extend(events);
    }
    w.flush().map_err(io_err(out))?;
    let metrics = ReplayMetrics {
        frames: manifest.len(),
        events: all.len(),
        patches,
        warnings,
        elapsed_s: busy,
        fps: if busy > 0.0 { manifest.len() as f64 / busy } else { 0.0 },
    };
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mpath = out.with_file_name(format!("{stem}.metrics.json"));
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok((all, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub elapsed_s: f64,
    pub fps: f64,
    pub target_fps: f64,
    pub events_per_frame: f64,
    pub pass: bool,
}

pub const TARGET_FPS: f64 = 48.0;

/// Time `process_frame` on a single 2 N press rendered at the given size.
pub fn bench(width: usize, height: usize, frames: usize, seed: u64) -> Result<BenchReport, ReplayError> {
    let grid = GridSpec::new(width, height).map_err(|e| ReplayError::Format {
        path: "bench".into(),
        msg: e.to_string(),
    })?;
    let skin = Skin::new(grid, SkinParams::default())?;
    let contact = ContactSpec {
        arc_mm: 0.0,
        force: [0.0, 0.0, -2.0],
        indenter: IndenterSpec::new(5.0),
    };
    let pool: Vec<VectorField2> = (0..4)
        .map(|i| skin.synth_frame(&[contact], seed.wrapping_add(i)).map(|f| f.flow))
        .collect::<Result<_, _>>()?;
    let mut cfg = PipelineConfig::default();
    cfg.geometry.g1 = Polynomial1D::affine(1.0 / skin.px_per_mm(), -0.5 * width as f64 / skin.px_per_mm());
    let mut events = 0usize;
    let t0 = Instant::now();
    for k in 0..frames {
        events += analyze_frame(&pool[k % pool.len()], &cfg, None, k, 0.0)?.events.len();
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let fps = if elapsed > 0.0 { frames as f64 / elapsed } else { f64::INFINITY };
    Ok(BenchReport {
        width,
        height,
        frames,
        elapsed_s: elapsed,
        fps,
        target_fps: TARGET_FPS,
        events_per_frame: events as f64 / frames.max(1) as f64,
        pass: fps >= TARGET_FPS,
    })
}
