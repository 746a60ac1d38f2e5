//! `dsplat`: synthesize datasets, train, render, and evaluate deformable
//! Gaussian-splat reconstructions from one binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dsplat_core::camera::Camera;
use dsplat_core::dataset::{
    generate_synthetic, heightfield_cloud, load_dataset, Dataset, DeformProgram, OccluderSpec,
    SyntheticSpec,
};
use dsplat_core::deform::deform_cloud;
use dsplat_core::img::{save_png16, save_png8};
use dsplat_core::metrics::{eval_frame, measure_fps, EvalReport};
use dsplat_core::render::{render, RenderSettings};
use dsplat_core::train::{
    load_checkpoint, save_checkpoint, train, train_from, StepRecord, TrainConfig,
};

/// Full-scale schedule bundled into the binary; used when `--config` is
/// omitted.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");
/// Bundled desk-scale schedule for small synthetic sequences.
pub const DESK_CONFIG: &str = include_str!("../configs/desk.toml");

#[derive(Parser)]
#[command(
    name = "dsplat",
    version,
    about = "Deformable Gaussian-splat reconstruction from masked RGB-D sequences"
)]
struct Cli {
    /// Worker threads for the data-parallel core (0 = one per CPU).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the seed from the config or scene spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth sidecars.
    Synth {
        /// Scene description TOML.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a model on a dataset and write a checkpoint.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Training configuration TOML; bundled defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Final checkpoint path. The training log and any periodic
        /// checkpoints go into the same directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set loss.lambda_surface=0`.
        /// Repeatable; values use TOML syntax.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render color/depth/alpha images from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated times in [0,1], or `all` for every dataset frame.
        #[arg(long, default_value = "0")]
        t: String,
        /// Frame index into the dataset, or a JSON file holding a camera.
        #[arg(long)]
        camera: Option<String>,
        /// Dataset directory; required for `--t all` or an index camera.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output image directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a dataset and write a metrics report.
    Eval {
        #[arg(long, required_unless_present = "self_check")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Score the dataset's images against themselves instead of a
        /// checkpoint (metric sanity check).
        #[arg(long, default_value_t = false)]
        self_check: bool,
        /// Timed frames for the throughput measurement (min 10); 0 skips it.
        #[arg(long, default_value_t = 30)]
        fps_frames: usize,
    },
}

/// Scene description for `synth`: a bumpy sheet of Gaussians, a scripted
/// deformation, and an optional moving occluder burned into the images.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SceneSpec {
    points: usize,
    cloud_seed: u64,
    frames: usize,
    seed: u64,
    depth_scale: f64,
    /// Write depth as float PFM instead of quantized 16-bit PNG.
    lossless_depth: bool,
    camera: Camera,
    program: DeformProgram,
    occluder: Option<OccluderSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            points: 400,
            cloud_seed: 5,
            frames: 8,
            seed: 11,
            depth_scale: 5e-4,
            lossless_depth: false,
            camera: Camera::identity_pose(50.0, 50.0, 32.0, 32.0, 64, 64),
            program: DeformProgram::none(),
            occluder: None,
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    dsplat_core::set_threads(cli.threads);
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out, cli.seed),
        Command::Train { data, config, out, resume, set } => {
            cmd_train(&data, config.as_deref(), &out, resume.as_deref(), &set, cli.seed)
        }
        Command::Render { ckpt, t, camera, data, out } => {
            cmd_render(&ckpt, &t, camera.as_deref(), data.as_deref(), &out)
        }
        Command::Eval { ckpt, data, out, self_check, fps_frames } => {
            cmd_eval(ckpt.as_deref(), &data, &out, self_check, fps_frames)
        }
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading scene spec {}", spec_path.display()))?;
    let mut scene: SceneSpec = toml::from_str(&text)
        .with_context(|| format!("parsing scene spec {}", spec_path.display()))?;
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.camera.validate()?;
    if scene.frames == 0 || scene.points == 0 {
        bail!("scene spec needs at least one frame and one point");
    }
    let spec = SyntheticSpec {
        cloud: heightfield_cloud(scene.points, scene.cloud_seed),
        program: scene.program,
        occluder: scene.occluder,
        frames: scene.frames,
        camera: scene.camera,
        depth_scale: scene.depth_scale,
        lossless_depth: scene.lossless_depth,
        seed: scene.seed,
    };
    generate_synthetic(&spec, out)?;
    println!("wrote {} frames to {}", spec.frames, out.display());
    Ok(())
}

fn print_breakdown(r: &StepRecord) {
    println!(
        "final step {} (stage {}): loss {:.6} = l1 {:.6} + depth {:.6} + tv_s {:.6} \
         + tv_t {:.6} + sdf {:.6} + normal {:.6} + opacity {:.6} ({} gaussians)",
        r.step, r.stage, r.loss, r.l1, r.depth, r.tv_spatial, r.tv_temporal, r.sdf, r.normal,
        r.opacity, r.gaussians
    );
}

/// Parses the config after applying dotted-path `--set` overrides onto the
/// TOML table, so any key reachable in the file is reachable from the CLI.
fn config_with_overrides(text: &str, sets: &[String]) -> Result<TrainConfig> {
    let mut table: toml::Table = toml::from_str(text).context("parsing config")?;
    for s in sets {
        let (path, value) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        let leaf: toml::Table = toml::from_str(&format!("v = {value}"))
            .map_err(|e| anyhow!("bad value `{value}` for `{path}`: {e}"))?;
        let leaf = leaf["v"].clone();
        let parts: Vec<&str> = path.split('.').collect();
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert(toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("`{p}` is not a table"))?;
        }
        cur.insert(parts.last().unwrap().to_string(), leaf);
    }
    let config: TrainConfig = table.try_into().context("applying config")?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let config_text = match config_path {
        Some(p) => {
            fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut config = config_with_overrides(&config_text, sets)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let dataset = load_dataset(data)?;
    let run_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let state = match resume {
        Some(ckpt) => {
            let st = load_checkpoint(ckpt, Some(&config))?;
            println!("resuming from step {} ({} gaussians)", st.step, st.cloud.len());
            train_from(&dataset, &config, st, Some(&run_dir))?
        }
        None => train(&dataset, &config, Some(&run_dir))?,
    };
    if let Some(r) = state.records.last() {
        print_breakdown(r);
    }
    save_checkpoint(&state, &config, out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn parse_times(t: &str, dataset: Option<&Dataset>) -> Result<Vec<f64>> {
    let times: Vec<f64> = if t == "all" {
        let ds = dataset.ok_or_else(|| anyhow!("`--t all` requires --data"))?;
        ds.frames.iter().map(|f| f.t).collect()
    } else {
        t.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("bad time value `{}`", s.trim()))
            })
            .collect::<Result<_>>()?
    };
    for &v in &times {
        if !(0.0..=1.0).contains(&v) {
            bail!("time {v} outside [0, 1]");
        }
    }
    Ok(times)
}

fn cmd_render(
    ckpt: &Path,
    t: &str,
    camera_arg: Option<&str>,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let state = load_checkpoint(ckpt, None)?;
    let dataset = data.map(load_dataset).transpose()?;
    let times = parse_times(t, dataset.as_ref())?;
    let camera: Camera = match camera_arg {
        None => {
            let ds = dataset
                .as_ref()
                .ok_or_else(|| anyhow!("either --camera or --data must be given"))?;
            ds.frames.first().ok_or_else(|| anyhow!("dataset has no frames"))?.camera.clone()
        }
        Some(arg) => match arg.parse::<usize>() {
            Ok(i) => {
                let ds = dataset
                    .as_ref()
                    .ok_or_else(|| anyhow!("--camera by index requires --data"))?;
                ds.frames
                    .get(i)
                    .ok_or_else(|| {
                        anyhow!("camera index {i} out of range ({} frames)", ds.frames.len())
                    })?
                    .camera
                    .clone()
            }
            Err(_) => {
                let text = fs::read_to_string(arg)
                    .with_context(|| format!("reading camera file {arg}"))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing camera file {arg}"))?
            }
        },
    };
    camera.validate()?;
    fs::create_dir_all(out)?;
    let settings = RenderSettings::default();
    // Depth PNGs span the camera frustum over the full 16-bit range.
    let depth_scale = camera.far / 65535.0;
    for (i, &tv) in times.iter().enumerate() {
        let cloud = deform_cloud(&state.cloud, &state.planes, &state.mlp, tv)?;
        let r = render(&cloud, &camera, &settings)?;
        save_png8(&r.color, &out.join(format!("color_{i:05}.png")))?;
        save_png16(&r.depth, depth_scale, &out.join(format!("depth_{i:05}.png")))?;
        save_png8(&r.alpha, &out.join(format!("alpha_{i:05}.png")))?;
    }
    println!(
        "wrote {} frame triplets to {} (depth scale {depth_scale:e})",
        times.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    self_check: bool,
    fps_frames: usize,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let settings = RenderSettings::default();
    let report = if self_check {
        let frames = dataset
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| eval_frame(i, &f.color, &f.color, &f.tool_mask))
            .collect::<dsplat_core::Result<Vec<_>>>()?;
        EvalReport::from_frames(frames, None)?
    } else {
        let state = load_checkpoint(ckpt.expect("clap enforces ckpt"), None)?;
        let mut frames = Vec::with_capacity(dataset.len());
        for (i, f) in dataset.frames.iter().enumerate() {
            let cloud = deform_cloud(&state.cloud, &state.planes, &state.mlp, f.t)?;
            let r = render(&cloud, &f.camera, &settings)?;
            frames.push(eval_frame(i, &f.color, &r.color, &f.tool_mask)?);
        }
        let fps = if fps_frames > 0 {
            let views: Vec<(Camera, f64)> =
                dataset.frames.iter().map(|f| (f.camera.clone(), f.t)).collect();
            Some(measure_fps(
                &state.cloud,
                Some((&state.planes, &state.mlp)),
                &views,
                &settings,
                2,
                fps_frames,
            )?)
        } else {
            None
        };
        EvalReport::from_frames(frames, fps)?
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out, &json).with_context(|| format!("writing report {}", out.display()))?;
    match &report.fps {
        Some(f) => println!(
            "mean PSNR {:.2} dB, mean SSIM {:.4}, {:.1} fps at {}x{}",
            report.mean_psnr, report.mean_ssim, f.fps, f.width, f.height
        ),
        None => println!("mean PSNR {:.2} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim),
    }
    println!("report written to {}", out.display());
    Ok(())
}
