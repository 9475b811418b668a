use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tactile_core::calibration::{evaluate, fit_model, load_records, write_records, CalibrationModel, FitOptions, SplitDataset};
use tactile_core::pipeline::{bench, run_replay, write_dataset, Manifest, PipelineConfig};
use tactile_core::simulator::{synth_characterization, synth_scenario, CharacterizationProtocol, ScenarioKind, ScenarioParams, Skin};

#[derive(Parser)]
#[command(name = "tactile", version, about = "Multi-contact optical tactile sensing pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic sequence, or the characterization dataset.
    Simulate {
        /// two_perch, compliance, mapping or characterization
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with scenario parameter overrides
        #[arg(long)]
        params: Option<PathBuf>,
        /// Pixel noise standard deviation, px
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Fit the location and force maps from characterization records.
    Calibrate {
        /// Training and validation records
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out records to report test errors on
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_order: u32,
        #[arg(long)]
        no_cross_terms: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a recorded sequence and write the contact log.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time frame processing on a single synthetic press.
    Bench {
        #[arg(long, default_value = "1920x1080")]
        resolution: String,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve a recorded sequence to the tuning UI.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn load_model(path: Option<&Path>) -> Result<Option<CalibrationModel>> {
    path.map(|p| CalibrationModel::load(p).with_context(|| format!("model {}", p.display())))
        .transpose()
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let Some((w, h)) = s.split_once(['x', 'X']) else {
        bail!("resolution must look like 1920x1080, got '{s}'");
    };
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn simulate(scenario: &str, seed: u64, out: &Path, params: Option<&Path>, noise: Option<f64>) -> Result<()> {
    let mut skin = Skin::standard();
    if let Some(s) = noise {
        skin = skin.with_noise(s);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if scenario == "characterization" {
        let protocol: CharacterizationProtocol = match params {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => CharacterizationProtocol::default(),
        };
        let ds = synth_characterization(&skin, &protocol, seed);
        let train_val: Vec<_> = ds.train.iter().chain(&ds.val).cloned().collect();
        let tv = out.join("characterization.csv");
        write_records(BufWriter::new(File::create(&tv)?), &train_val)?;
        let te = out.join("characterization_test.csv");
        write_records(BufWriter::new(File::create(&te)?), &ds.test)?;
        eprintln!("wrote {} train/val and {} test records to {}", train_val.len(), ds.test.len(), out.display());
        return Ok(());
    }
    let kind: ScenarioKind = scenario.parse()?;
    let mut p = serde_json::to_value(ScenarioParams::for_kind(kind))?;
    if let Some(path) = params {
        let delta: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let (Some(base), Some(d)) = (p.as_object_mut(), delta.as_object()) {
            base.extend(d.clone());
        }
    }
    let params: ScenarioParams = serde_json::from_value(p).context("scenario parameters")?;
    let s = synth_scenario(kind, params, seed)?;
    let manifest = write_dataset(&s, &skin, out)?;
    eprintln!("wrote {} frames, manifest {}", s.len(), manifest.display());
    Ok(())
}

fn calibrate(dataset: &Path, test: Option<&Path>, max_order: u32, cross: bool, out: &Path) -> Result<()> {
    let records = load_records(dataset)?;
    let test_records = test.map(load_records).transpose()?.unwrap_or_default();
    let ds = SplitDataset::from_rows(records, test_records);
    let opts = FitOptions {
        max_order,
        cross_terms: cross,
        ..FitOptions::default()
    };
    let model = fit_model(&ds, &opts)?;
    model.save(out)?;
    let mut summary = serde_json::json!({
        "orders": {
            "g1": model.g1.order,
            "gx": model.gx.orders,
            "gy": model.gy.orders,
            "gz": model.gz.orders,
        },
        "val_mae": model.meta.val_mae,
    });
    if !ds.test.is_empty() {
        summary["test"] = serde_json::to_value(evaluate(&model, &Default::default(), &ds.test)?)?;
    }
    print_json(&summary)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Simulate {
            scenario,
            seed,
            out,
            params,
            noise,
        } => simulate(&scenario, seed, &out, params.as_deref(), noise),
        Cmd::Calibrate {
            dataset,
            test,
            max_order,
            no_cross_terms,
            out,
        } => calibrate(&dataset, test.as_deref(), max_order, !no_cross_terms, &out),
        Cmd::Run {
            manifest,
            config,
            model,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(model.as_deref())?;
            let m = Manifest::load(&manifest)?;
            let (_, metrics) = run_replay(&m, &cfg, model.as_ref(), &out)?;
            print_json(&metrics)
        }
        Cmd::Bench {
            resolution,
            frames,
            seed,
            json,
        } => {
            let (w, h) = parse_resolution(&resolution)?;
            let report = bench(w, h, frames, seed)?;
            if let Some(p) = json {
                fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            if !report.pass {
                eprintln!("warning: {:.1} fps is below the {:.0} fps target", report.fps, report.target_fps);
            }
            print_json(&report)
        }
        Cmd::Serve {
            port,
            manifest,
            config,
            model,
            host,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(model.as_deref())?;
            let m = Manifest::load(&manifest)?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let state = tactile_service::AppState::new(m, cfg, model);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving on http://{addr}");
            rt.block_on(tactile_service::serve(state, addr))
                .with_context(|| format!("serving on {addr}"))
        }
    }
}
