use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sparsedet::harness::bench::{alpha_strategies, bench_flops, diffusion_strategies, MaskChoice};
use sparsedet::harness::checkpoint::{Checkpoint, TensorData, MAGIC};
use sparsedet::harness::config::Config;
use sparsedet::harness::eval::{detections_to_tsv, evaluate};
use sparsedet::harness::scene::{foreground_fraction, generate_scenes, load_scene, load_scenes, save_scenes, Scene};
use sparsedet::harness::train::{load_model, prepare_scenes, LossRecord, Trainer};
use sparsedet::model::Detector;
use sparsedet::sparse::Mode;
use sparsedet::voxel::{load_point_cloud, PointFormat};
use sparsedet::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsedet", version, about = "Sparse LiDAR 3D detection with adaptive feature diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI configuration; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command (scene seed for gen-data, training
    /// seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval scene directories.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of `scene_*` training scenes.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-iteration loss log (TSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect boxes in a point cloud or scene directory.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare FLOPs of the diffusion strategies.
    BenchFlops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained weights; a seeded initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated alpha values for the AFD range sweep.
        #[arg(long, default_value = "0,0.5,1,2", value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Masks::Oracle)]
        masks: Masks,
        /// Optional SVG bar chart.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Print statistics of a checkpoint, scene directory or point cloud.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Masks {
    Oracle,
    Predicted,
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Config::load(p),
        None => Ok(Config::desk_default()),
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    let out = require_out(common)?;
    let sc = &cfg.scene;
    let train = generate_scenes(&sc.spec, sc.train_scenes, sc.seed)?;
    let eval = generate_scenes(&sc.spec, sc.eval_scenes, sc.seed.wrapping_add(1))?;
    save_scenes(&out.join("train"), &train)?;
    save_scenes(&out.join("eval"), &eval)?;
    println!("wrote {} train and {} eval scenes to {}", train.len(), eval.len(), out.display());
    Ok(())
}

fn train(common: &Common, data: &Path, resume: Option<&Path>, log: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let out = require_out(common)?;
    let scenes = load_scenes(data)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let prepared = prepare_scenes(&trainer.model, &scenes)?;
    info!("training on {} scenes from iteration {}", prepared.len(), trainer.iteration);
    let records = trainer.run(&prepared, cfg.train.iterations)?;
    if let Some(p) = log {
        let mut text = String::from(LossRecord::TSV_HEADER);
        text.push('\n');
        for r in &records {
            text.push_str(&r.to_tsv());
            text.push('\n');
        }
        write(p, &text)?;
    }
    trainer.checkpoint().save(out)?;
    if let Some(last) = records.last() {
        println!("iteration {} loss {:.6}", trainer.iteration, last.loss.total);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(&cfg, &Checkpoint::load(checkpoint)?)?;
    let prepared = prepare_scenes(&model, &load_scenes(data)?)?;
    let metrics = evaluate(&model, &prepared, &cfg.class_names)?;
    emit(common, &metrics.to_text())
}

fn infer(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut model = load_model(&cfg, &Checkpoint::load(checkpoint)?)?;
    let points = if input.is_dir() {
        load_scene(input)?.points
    } else {
        load_point_cloud(input, PointFormat::Binary)?
    };
    let boxes = model.detect(&points)?;
    emit(common, &detections_to_tsv(&boxes, &cfg.class_names))
}

fn bench(common: &Common, data: &Path, checkpoint: Option<&Path>, alphas: &[f64], masks: Masks, plot: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let model = match checkpoint {
        Some(p) => load_model(&cfg, &Checkpoint::load(p)?)?,
        None => Detector::new(cfg.model.clone(), seed)?,
    };
    let prepared = prepare_scenes(&model, &load_scenes(data)?)?;
    let k = cfg.model.afd.ufd_kernel;
    let mut strategies = diffusion_strategies(k);
    strategies.extend(alpha_strategies(alphas, k));
    let masks = match masks {
        Masks::Oracle => MaskChoice::Oracle,
        Masks::Predicted => MaskChoice::Predicted,
    };
    let report = bench_flops(&model, &prepared, &strategies, masks, seed)?;
    if let Some(p) = plot {
        write(p, &report.to_svg())?;
    }
    emit(common, &report.to_tsv())
}

fn describe_checkpoint(ck: &Checkpoint) -> String {
    let mut o = String::new();
    if let Ok(it) = ck.iteration() {
        o.push_str(&format!("iteration\t{it}\n"));
    }
    o.push_str("tensor\tdtype\tshape\tnumel\n");
    for t in &ck.tensors {
        let (dtype, n) = match &t.data {
            TensorData::F32(v) => ("f32", v.len()),
            TensorData::F64(v) => ("f64", v.len()),
            TensorData::U64(v) => ("u64", v.len()),
            TensorData::U8(v) => ("u8", v.len()),
        };
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        o.push_str(&format!("{}\t{dtype}\t{}\t{n}\n", t.name, shape.join("x")));
    }
    o
}

fn describe_scene(cfg: &Config, scene: &Scene) -> Result<String> {
    let mut model = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    let input = model.voxelize(&scene.points)?;
    let bev = model.forward_bev(&input, Mode::Eval)?.bev;
    let bev_spec = cfg.model.bev_spec();
    let grid = cfg.model.grid;
    let mut o = String::new();
    o.push_str(&format!("points\t{}\n", scene.points.count()));
    o.push_str(&format!("voxels\t{}\n", input.len()));
    o.push_str(&format!("voxel_occupancy\t{:.6}\n", input.len() as f64 / grid.dims.iter().product::<usize>() as f64));
    o.push_str(&format!("bev_sites\t{}\n", bev.len()));
    o.push_str(&format!("bev_occupancy\t{:.6}\n", bev.len() as f64 / bev.grid().volume() as f64));
    o.push_str(&format!("bev_foreground_fraction\t{:.6}\n", foreground_fraction(bev.coords(), &scene.boxes, &bev_spec)));
    for (c, name) in cfg.class_names.iter().enumerate() {
        let n = scene.boxes.iter().filter(|b| b.class_id == c).count();
        o.push_str(&format!("boxes.{name}\t{n}\n"));
    }
    Ok(o)
}

fn inspect(common: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let text = if input.is_dir() {
        describe_scene(&cfg, &load_scene(input)?)?
    } else {
        let bytes = fs::read(input).map_err(|e| Error::io(input, e))?;
        if bytes.starts_with(&MAGIC) {
            describe_checkpoint(&Checkpoint::from_bytes(&bytes)?)
        } else {
            let scene = Scene {
                points: load_point_cloud(input, PointFormat::Binary)?,
                boxes: Vec::new(),
            };
            describe_scene(&cfg, &scene)?
        }
    };
    emit(common, &text)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train {
            common,
            data,
            resume,
            log,
        } => train(common, data, resume.as_deref(), log.as_deref()),
        Command::Eval { common, checkpoint, data } => eval(common, checkpoint, data),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => infer(common, checkpoint, input),
        Command::BenchFlops {
            common,
            data,
            checkpoint,
            alphas,
            masks,
            plot,
        } => bench(common, data, checkpoint.as_deref(), alphas, *masks, plot.as_deref()),
        Command::Inspect { common, input } => inspect(common, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
