use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ecc_cli::config::RunConfig;
use ecc_cli::frames::{eye_patch, read_landmarks, side_by_side, FrameLandmarks, SequenceCorrector, Side};
use ecc_cli::selfcheck::{registry, run_checks};
use ecc_core::control::{strength, FaceSignals};
use ecc_core::eccnet::{load_weights, predict_gaze, save_weights, EccNet, EyePatch, GazeCalibration, GazeVector, Mode};
use ecc_core::eccnet::{PATCH_HEIGHT, PATCH_WIDTH};
use ecc_core::metrics::{evaluate, EvalOptions};
use ecc_core::synthdata::{eye_open_ratio, generate_dataset, read_dataset, read_ppm, write_dataset, write_ppm};
use ecc_core::training::{train_from, TrainOutputs};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ecc", version, about = "Eye contact correction by flow-field warping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref())?.with_seed(self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render labeled sample sets to a dataset directory
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output weights (ECCW); the log goes next to it as .jsonl
        #[arg(long)]
        out: PathBuf,
        /// Start from these weights instead of a fresh initialization
        #[arg(long)]
        init: Option<PathBuf>,
        /// Directory for per-cycle checkpoints
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Relative error of a model on a dataset directory
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        with_control: bool,
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct a frame or a directory of frames
    Correct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        /// A PPM frame, or a directory of frame_NNNNN.ppm files
        #[arg(long)]
        input: PathBuf,
        /// Defaults to landmarks.json inside the input directory
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fixed correction strength in [0, 1] instead of the control gates
        #[arg(long)]
        strength_override: Option<f32>,
        /// Also write input and output side by side
        #[arg(long)]
        side_by_side: bool,
    },
    /// Coarse gaze of an eye patch or of both eyes in a frame
    PredictGaze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Landmarks for a full frame; without them the input must be a patch
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// The patch shows a left eye
        #[arg(long)]
        left: bool,
        /// Per-axis scale from mean flow to gaze, "h,v"
        #[arg(long, value_parser = parse_calibration, allow_hyphen_values = true)]
        calibration: Option<GazeCalibration>,
    },
    /// Run the internal consistency checks
    Selfcheck,
}

fn parse_calibration(s: &str) -> std::result::Result<GazeCalibration, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [h, v] = parts[..] else {
        return Err("expected two comma-separated numbers".into());
    };
    let num = |x: &str| x.trim().parse::<f32>().map_err(|e| e.to_string());
    Ok(GazeCalibration {
        horizontal: num(h)?,
        vertical: num(v)?,
    })
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<(EccNet, ecc_core::eccnet::ModelWeights)> {
    let w = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    let net = EccNet::from_weights(&w)?;
    Ok((net, w))
}

fn datagen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let sets = generate_dataset(d.seed, d.n_sets, d.gazes_per_set)?;
    write_dataset(&sets, out)?;
    eprintln!("wrote {} sets of {} gazes to {}", sets.len(), d.gazes_per_set, out.display());
    print_json(&json!({"sets": sets.len(), "images": sets.len() * d.gazes_per_set, "out": out}))
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, init: Option<&Path>, checkpoints: Option<PathBuf>) -> Result<()> {
    let sets = read_dataset(data)?;
    let (net, weights) = match init {
        Some(p) => load_model(p)?,
        None => {
            let net = EccNet::new(cfg.model.clone())?;
            let w = net.init_weights(cfg.train.rng_seed);
            (net, w)
        }
    };
    let log = out.with_extension("jsonl");
    let outputs = TrainOutputs {
        log: Some(log.clone()),
        checkpoint_dir: checkpoints,
    };
    eprintln!("training {} iterations on {} sets", cfg.train.total_iters, sets.len());
    let (w, history) = train_from(&net, weights, &sets, &cfg.train, &outputs)?;
    save_weights(&w, out)?;
    let last = history.windows.last().or(history.steps.last());
    print_json(&json!({"weights": out, "log": log, "iterations": history.steps.len(), "last": last}))
}

fn eval_cmd(cfg: &RunConfig, weights: &Path, data: &Path, with_control: bool, out: Option<&Path>) -> Result<()> {
    let (net, w) = load_model(weights)?;
    let sets = read_dataset(data)?;
    let opts = EvalOptions {
        with_control,
        gates: cfg.control.gates.clone(),
        slack_window: cfg.eval.slack_window,
        ..EvalOptions::default()
    };
    let report = evaluate(&net, &w, &sets, &opts)?;
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("relative error {:.4} over {} pairs", report.relative_error, report.n_pairs);
    print_json(&report)
}

struct CorrectArgs<'a> {
    weights: &'a Path,
    input: &'a Path,
    landmarks: Option<&'a Path>,
    out: &'a Path,
    strength_override: Option<f32>,
    side_by_side: bool,
}

fn frame_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut frames = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(idx) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".ppm")) {
            if let Ok(i) = idx.parse() {
                frames.push((i, p.clone()));
            }
        }
    }
    frames.sort();
    Ok(frames)
}

fn correct_cmd(cfg: &RunConfig, a: CorrectArgs) -> Result<()> {
    if let Some(s) = a.strength_override {
        if !(0.0..=1.0).contains(&s) {
            bail!("--strength-override must lie in [0, 1], got {s}");
        }
    }
    let (net, w) = load_model(a.weights)?;
    let single = a.input.is_file();
    let lm_path = match a.landmarks {
        Some(p) => p.to_path_buf(),
        None if single => bail!("--landmarks is required for a single frame"),
        None => a.input.join("landmarks.json"),
    };
    let landmarks = read_landmarks(&lm_path)?;
    let frames: Vec<(usize, PathBuf)> = if single {
        vec![(landmarks.first().map_or(0, |l| l.index), a.input.to_path_buf())]
    } else {
        frame_files(a.input)?
    };
    for l in &landmarks {
        if !single && !frames.iter().any(|(i, _)| *i == l.index) {
            bail!("frame {}: listed in {} but frame_{:05}.ppm is missing", l.index, lm_path.display(), l.index);
        }
    }
    std::fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut corrector = SequenceCorrector::new(&net, &w, cfg.control.clone());
    corrector.strength_override = a.strength_override;
    let mut reports = Vec::new();
    for (index, path) in &frames {
        let frame = read_ppm(path).with_context(|| format!("frame {index}"))?;
        let lm: Option<&FrameLandmarks> = landmarks.iter().find(|l| l.index == *index);
        let (out, report) = corrector.process(&frame, lm).with_context(|| format!("frame {index}"))?;
        let name = if single {
            path.file_name().map(PathBuf::from).unwrap_or_else(|| "frame.ppm".into())
        } else {
            PathBuf::from(format!("frame_{index:05}.ppm"))
        };
        write_ppm(a.out.join(&name), &out)?;
        if a.side_by_side {
            let stem = name.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            write_ppm(a.out.join(format!("{stem}_sbs.ppm")), &side_by_side(&frame, &out))?;
        }
        reports.push(report);
    }
    eprintln!("corrected {} frames into {}", frames.len(), a.out.display());
    print_json(&json!({"frames": reports}))
}

fn predict_cmd(weights: &Path, input: &Path, landmarks: Option<&Path>, left: bool, cal: GazeCalibration, cfg: &RunConfig) -> Result<()> {
    let (net, w) = load_model(weights)?;
    let image = read_ppm(input)?;
    let one = |patch: &EyePatch, open: f32, face: FaceSignals| -> Result<serde_json::Value> {
        let out = net.forward(&w, patch, GazeVector::CENTER, Mode::Infer)?;
        let mut g = predict_gaze(&out, cal);
        if patch.is_flipped {
            g = g.mirrored();
        }
        let s = strength(&face.with_output(open, &out), &cfg.control.gates);
        Ok(json!({"gaze": [g.horizontal, g.vertical], "strength": s}))
    };
    match landmarks {
        None => {
            if image.shape() != [3, PATCH_HEIGHT, PATCH_WIDTH] {
                bail!("without --landmarks the input must be a {PATCH_WIDTH}x{PATCH_HEIGHT} eye patch");
            }
            let mut patch = EyePatch::new(image)?;
            if left {
                patch = patch.flipped();
            }
            // no landmarks: the eye is taken as open and the face as nominal
            print_json(&one(&patch, 1.0, FaceSignals::NOMINAL)?)
        }
        Some(p) => {
            let lms = read_landmarks(p)?;
            let lm = lms.first().context("landmarks file lists no frames")?;
            let eyes = lm.eyes.as_ref().with_context(|| format!("frame {}: no eye landmarks", lm.index))?;
            let face = lm.face_signals(image.shape()[2], image.shape()[1]);
            let mut res = serde_json::Map::new();
            for (side, pts) in [(Side::Left, &eyes.left), (Side::Right, &eyes.right)] {
                let pts: [[f32; 2]; 6] = pts.as_slice().try_into()?;
                let (_, patch) = eye_patch(&image, &pts, side)?;
                let key = if side == Side::Left { "left" } else { "right" };
                res.insert(key.into(), one(&patch, eye_open_ratio(&pts), face)?);
            }
            print_json(&res)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Datagen { common, out } => datagen(&common.load()?, &out)?,
        Command::Train {
            common,
            data,
            out,
            init,
            checkpoints,
        } => train_cmd(&common.load()?, &data, &out, init.as_deref(), checkpoints)?,
        Command::Eval {
            common,
            weights,
            data,
            with_control,
            out,
        } => eval_cmd(&common.load()?, &weights, &data, with_control, out.as_deref())?,
        Command::Correct {
            common,
            weights,
            input,
            landmarks,
            out,
            strength_override,
            side_by_side,
        } => correct_cmd(
            &common.load()?,
            CorrectArgs {
                weights: &weights,
                input: &input,
                landmarks: landmarks.as_deref(),
                out: &out,
                strength_override,
                side_by_side,
            },
        )?,
        Command::PredictGaze {
            common,
            weights,
            input,
            landmarks,
            left,
            calibration,
        } => predict_cmd(
            &weights,
            &input,
            landmarks.as_deref(),
            left,
            calibration.unwrap_or_default(),
            &common.load()?,
        )?,
        Command::Selfcheck => {
            let report = run_checks(&registry());
            for c in &report.checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                eprintln!("{mark} {:<32} {:>9.1} ms  {}", c.name, c.millis, c.detail);
            }
            print_json(&report)?;
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    ecc_cli::tune_allocator();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
