//! `i2p`: synthetic scenes, registration, evaluation and ablation sweeps.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 registration
//! failure (no pose could be estimated).

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use i2p_core::features::{Carrier, FeatureField};
use i2p_core::geometry::{NormalField, Vec3};
use i2p_core::io::{
    decode_depth, encode_normals, load_scene, parse_correspondences_csv, read_cloud, save_scene, to_json_pretty,
    write_correspondences_csv, from_json, PoseJson,
};
use i2p_core::losses::{circle_loss, gdc_loss, gdc_loss_raw, normal_consistency_loss, normal_consistency_raw, CircleLossConfig, WarmupSchedule};
use i2p_core::normals::{adaptive_neighborhood_sizes, depth_to_normals, estimate_point_normals_varying};
use i2p_core::pipeline::{aggregate, evaluate_scene, run_and_evaluate, run_registration, PatchMatch, PipelineConfig};
use i2p_core::synth::generate_scene;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const POSE_FILE: &str = "pose.json";
const CORRS_FILE: &str = "corrs.csv";
const PATCHES_FILE: &str = "patches.json";
const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Parser)]
#[command(name = "i2p", version, about = "Image-to-point-cloud registration on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set corruption.mask_ratio=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene bundles.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; with `--count > 1` one `scene_NNN` subdirectory per scene.
        #[arg(long)]
        out: PathBuf,
        /// Scene seed; defaults to `scene_seed` from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Register one scene bundle.
    Register {
        #[command(flatten)]
        cfg: ConfigArgs,
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate registration results against their scenes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene bundle directories.
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        /// Result directories written by `register`, aligned with `--scene`.
        #[arg(long = "result", required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one setting over the seeded scene batch and write `setting,ir,fmr,rr`.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated settings; warm-up settings are `start:end`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Estimate normals of a cloud or a depth map and write a normal blob.
    Normals {
        #[arg(long, conflicts_with = "depth", required_unless_present = "depth")]
        cloud: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        adaptive: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a loss from a JSON input, optionally checking its gradient.
    Losses {
        #[arg(value_enum)]
        kind: LossKind,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Compare analytic gradients with central differences (step 1e-5).
        #[arg(long)]
        grad_check: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Sigma,
    Mask,
    K,
    Warmup,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Normal,
    Gdc,
    Circle,
}

enum Failure {
    Input(anyhow::Error),
    Registration(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cfg: &PipelineConfig, out: &Path, seed: Option<u64>, count: usize) -> Outcome {
    if count == 0 {
        return Err(anyhow!("--count must be positive").into());
    }
    let base = seed.unwrap_or(cfg.scene_seed);
    for i in 0..count {
        let s = base + i as u64;
        let scene = generate_scene(&cfg.scene, s).with_context(|| format!("generating scene {s}"))?;
        let dir = if count == 1 { out.to_path_buf() } else { out.join(format!("scene_{i:03}")) };
        save_scene(&scene, &dir).with_context(|| format!("saving {}", dir.display()))?;
        println!("{}: {} points, {} pairs", dir.display(), scene.cloud.len(), scene.gt_correspondences.len());
    }
    Ok(())
}

fn cmd_register(cfg: &PipelineConfig, scene_dir: &Path, out: &Path) -> Outcome {
    let scene = load_scene(scene_dir).with_context(|| format!("loading {}", scene_dir.display()))?;
    let reg = run_registration(&scene, cfg).context("registration")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(CORRS_FILE), write_correspondences_csv(&reg.correspondences))?;
    write(&out.join(PATCHES_FILE), to_json_pretty(&reg.patches)?)?;
    write(&out.join(DIAGNOSTICS_FILE), to_json_pretty(&reg.diagnostics)?)?;
    let pose_path = out.join(POSE_FILE);
    match reg.pose {
        Ok(est) => {
            let pose = PoseJson::from_estimate(&est);
            write(&pose_path, to_json_pretty(&pose)?)?;
            println!(
                "{} correspondences, {} inliers, mean reprojection {:.4} px",
                reg.correspondences.len(),
                pose.inliers,
                pose.mean_reproj_px
            );
            Ok(())
        }
        Err(e) => {
            // a stale pose from an earlier run must not be picked up by eval
            if pose_path.exists() {
                fs::remove_file(&pose_path).with_context(|| format!("removing {}", pose_path.display()))?;
            }
            Err(Failure::Registration(format!(
                "{} correspondences, no pose: {e}",
                reg.correspondences.len()
            )))
        }
    }
}

fn cmd_eval(cfg: &PipelineConfig, scenes: &[PathBuf], results: &[PathBuf], out: &Path) -> Outcome {
    if scenes.len() != results.len() {
        return Err(anyhow!(i2p_core::Error::LengthMismatch(scenes.len(), results.len())).into());
    }
    let mut evals = Vec::with_capacity(scenes.len());
    for (scene_dir, result_dir) in scenes.iter().zip(results) {
        let scene = load_scene(scene_dir).with_context(|| format!("loading {}", scene_dir.display()))?;
        let corrs_path = result_dir.join(CORRS_FILE);
        let text = fs::read_to_string(&corrs_path).with_context(|| format!("reading {}", corrs_path.display()))?;
        let corrs = parse_correspondences_csv(&text)?;
        if let Some(bad) = corrs.iter().find(|c| c.point_index >= scene.cloud.len()) {
            return Err(anyhow!("{}: point index {} out of range", corrs_path.display(), bad.point_index).into());
        }
        let pose_path = result_dir.join(POSE_FILE);
        let pose = if pose_path.exists() {
            let p: PoseJson = from_json(&fs::read_to_string(&pose_path)?)?;
            Some(p.transform()?)
        } else {
            None
        };
        let patches_path = result_dir.join(PATCHES_FILE);
        let patches: Vec<PatchMatch> = if patches_path.exists() {
            from_json(&fs::read_to_string(&patches_path)?)?
        } else {
            Vec::new()
        };
        let name = scene_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| scene_dir.display().to_string());
        evals.push(evaluate_scene(&name, &scene, &corrs, pose.as_ref(), &patches, cfg)?);
    }
    let report = aggregate(evals, &cfg.thresholds)?;
    write(out, to_json_pretty(&report)?)?;
    println!("{:<16} {:>8} {:>6} {:>6}", "scene", "IR", "FMR", "RR");
    for s in &report.scenes {
        println!("{:<16} {:>8.4} {:>6} {:>6}", s.scene, s.inlier_ratio, s.fmr_flag as u8, s.rr_flag as u8);
    }
    let m = &report.mean;
    println!("{:<16} {:>8.4} {:>6.3} {:>6.3}", "mean", m.inlier_ratio, m.fmr, m.rr);
    Ok(())
}

fn apply_setting(base: &PipelineConfig, sweep: Sweep, value: &str) -> anyhow::Result<PipelineConfig> {
    let mut cfg = base.clone();
    let number = || value.parse::<f64>().with_context(|| format!("setting {value:?} is not a number"));
    match sweep {
        Sweep::Sigma => cfg.corruption.gaussian_sigma_m = number()?,
        Sweep::Mask => cfg.corruption.mask_ratio = number()?,
        Sweep::K => cfg.k_neighbors = value.parse().with_context(|| format!("setting {value:?} is not a count"))?,
        Sweep::Warmup => {
            let (a, b) = value
                .split_once(':')
                .ok_or_else(|| anyhow!("warm-up setting {value:?} is not start:end"))?;
            cfg.warmup = WarmupSchedule::new(a.trim().parse()?, b.trim().parse()?)?;
        }
    }
    cfg.validate().with_context(|| format!("setting {value:?}"))?;
    Ok(cfg)
}

fn cmd_ablate(base: &PipelineConfig, sweep: Sweep, values: &[String], out: &Path, jobs: usize) -> Outcome {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(anyhow!("empty sweep: pass --values").into());
    }
    if jobs == 0 {
        return Err(anyhow!("--jobs must be positive").into());
    }
    let configs = values
        .iter()
        .map(|v| apply_setting(base, sweep, v))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|s| (0..base.batch_size).map(move |i| (s, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building thread pool")?;
    let evals = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, i)| run_and_evaluate(&configs[s], i))
            .collect::<i2p_core::Result<Vec<_>>>()
    })?;
    let mut csv = String::from("setting,ir,fmr,rr\n");
    for (s, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        let batch = evals[s * base.batch_size..(s + 1) * base.batch_size].to_vec();
        let m = aggregate(batch, &cfg.thresholds)?.mean;
        writeln!(csv, "{value},{},{},{}", m.inlier_ratio, m.fmr, m.rr).expect("writing to a string");
    }
    write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_normals(cloud: Option<&Path>, depth: Option<&Path>, k: usize, adaptive: bool, out: &Path) -> Outcome {
    let field = match (cloud, depth) {
        (Some(path), _) => {
            let cloud = read_cloud(path).with_context(|| format!("reading {}", path.display()))?;
            let ks = if adaptive {
                adaptive_neighborhood_sizes(&cloud, k)?
            } else {
                vec![k; cloud.len()]
            };
            estimate_point_normals_varying(&cloud, &ks)?
        }
        (None, Some(path)) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            depth_to_normals(&decode_depth(&bytes)?)
        }
        (None, None) => return Err(anyhow!("pass --cloud or --depth").into()),
    };
    write(out, encode_normals(&field))?;
    println!("{} of {} normals valid", field.valid_count(), field.len());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalInput {
    predicted: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GdcInput {
    f_img: Vec<Vec<f64>>,
    f_cloud: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CircleInput {
    positive: Vec<f64>,
    negative: Vec<f64>,
    #[serde(default)]
    config: Option<CircleLossConfig>,
}

#[derive(Serialize)]
struct GradCheck {
    step: f64,
    relative_error: f64,
    passed: bool,
}

#[derive(Serialize)]
struct LossReport {
    kind: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_check: Option<GradCheck>,
}

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between the analytic
/// and central-difference gradients.
fn grad_check(params: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> GradCheck {
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(&numeric));
    let err = if scale == 0.0 { norm(&diff) } else { norm(&diff) / scale };
    GradCheck {
        step: FD_STEP,
        relative_error: err,
        passed: err < FD_TOLERANCE,
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> anyhow::Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        bail!("{name}: rows have different lengths");
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

fn cmd_losses(kind: LossKind, input: &Path, out: &Path, check: bool) -> Outcome {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report = match kind {
        LossKind::Normal => {
            let inp: NormalInput = from_json(&text)?;
            let to_vec = |v: &[[f64; 3]]| v.iter().map(|n| Vec3::new(n[0], n[1], n[2])).collect::<Vec<_>>();
            let (pred, target) = (to_vec(&inp.predicted), to_vec(&inp.target));
            let field = |v: Vec<Vec3>| NormalField::from_points(v);
            let (value, grad) = normal_consistency_loss(&field(pred.clone())?, &field(target.clone())?)?;
            let grad_check = check.then(|| {
                let flat: Vec<f64> = pred.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                let analytic: Vec<f64> = grad.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
                grad_check(&flat, &analytic, |x| {
                    let p: Vec<Vec3> = x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
                    normal_consistency_raw(&p, &target).expect("lengths checked above")
                })
            });
            LossReport {
                kind: "normal",
                value,
                grad_check,
            }
        }
        LossKind::Gdc => {
            let inp: GdcInput = from_json(&text)?;
            let a = matrix(&inp.f_img, "f_img")?;
            let b = matrix(&inp.f_cloud, "f_cloud")?;
            let loss = gdc_loss(
                &FeatureField::new(a.clone(), Carrier::Image)?,
                &FeatureField::new(b.clone(), Carrier::Cloud)?,
            )?;
            let grad_check = check.then(|| {
                let n_a = a.len();
                let mut params: Vec<f64> = a.iter().copied().collect();
                params.extend(b.iter());
                let mut analytic: Vec<f64> = loss.grad_image.iter().copied().collect();
                analytic.extend(loss.grad_cloud.iter());
                let (r, c) = a.shape();
                grad_check(&params, &analytic, |x| {
                    let fa = DMatrix::from_column_slice(r, c, &x[..n_a]);
                    let fb = DMatrix::from_column_slice(r, c, &x[n_a..]);
                    gdc_loss_raw(&fa, &fb).value
                })
            });
            LossReport {
                kind: "gdc",
                value: loss.value,
                grad_check,
            }
        }
        LossKind::Circle => {
            if check {
                return Err(anyhow!("circle loss has no analytic gradient to check").into());
            }
            let inp: CircleInput = from_json(&text)?;
            let cfg = inp.config.unwrap_or_default();
            LossReport {
                kind: "circle",
                value: circle_loss(&inp.positive, &inp.negative, &cfg)?,
                grad_check: None,
            }
        }
    };
    let json = serde_json::to_string_pretty(&report).context("serialising report")? + "\n";
    write(out, &json)?;
    print!("{json}");
    match report.grad_check {
        Some(g) if !g.passed => Err(anyhow!("gradient check failed: relative error {}", g.relative_error).into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { cfg, out, seed, count } => cmd_synth(&cfg.load()?, &out, seed, count),
        Command::Register { cfg, scene, out } => cmd_register(&cfg.load()?, &scene, &out),
        Command::Eval {
            cfg,
            scenes,
            results,
            out,
        } => cmd_eval(&cfg.load()?, &scenes, &results, &out),
        Command::Ablate {
            cfg,
            sweep,
            values,
            out,
            jobs,
        } => cmd_ablate(&cfg.load()?, sweep, &values, &out, jobs),
        Command::Normals {
            cloud,
            depth,
            k,
            adaptive,
            out,
        } => cmd_normals(cloud.as_deref(), depth.as_deref(), k, adaptive, &out),
        Command::Losses {
            kind,
            input,
            out,
            grad_check,
        } => cmd_losses(kind, &input, &out, grad_check),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Registration(msg)) => {
            eprintln!("registration failed: {msg}");
            ExitCode::from(2)
        }
    }
}

