use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rcn::checkpoint;
use rcn::config::RunConfig;
use rcn::data::{read_split, read_split_gt, write_sequence};
use rcn::eval::{success_auc, success_thresholds, write_curve};
use rcn::experiment::{
    detect_split, evaluate_detections, evaluate_tracks, read_detections, read_tracks, run_ablation, track_split,
    write_ablation, write_detections, write_tracks,
};
use rcn::model::{snippet_grad_check, ModelConfig, RcnModel};
use rcn::synth::{derive_seed, generate_sequence};
use rcn::trainer::{format_log, train_stage1, train_stage2, TrainConfig};
use rcn::{Error, Result};

#[derive(Parser)]
#[command(name = "rcn", version, about = "Joint detection and tracking of small flying objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/ and test/ splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene override such as `noise_sigma=2` (repeatable).
        #[arg(long = "scene", value_name = "KEY=VALUE")]
        scene: Vec<String>,
    },
    /// Run one training stage on DIR/train.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score the proposals of every test sequence.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// One-pass tracking from the first ground-truth box of every target.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// FPPI / miss-rate curve and log-average miss rate.
    EvalDet {
        #[arg(long)]
        detections: PathBuf,
        /// Directory of sequences holding gt.txt files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        t0: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Success-rate curve and its area.
    EvalTrack {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant on every seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on the micro model.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_data(out: &Path, cfg: &RunConfig, train: usize, test: usize) -> Result<()> {
    for (split_id, split, n) in [(0, "train", train), (1, "test", test)] {
        for i in 0..n {
            let mut seq = generate_sequence(&cfg.scene, derive_seed(cfg.seed, split_id, i as u64))?;
            seq.id = format!("{split}_{i:05}");
            write_sequence(&out.join(split).join(&seq.id), &seq)?;
        }
    }
    println!("wrote {train} train and {test} test sequences to {}", out.display());
    Ok(())
}

fn train(data: &Path, stage: u8, config: Option<&Path>, out: &Path, init: Option<&Path>) -> Result<()> {
    let seqs = read_split(&data.join("train"))?;
    let (cfg, outcome) = if stage == 1 {
        let cfg = load_config(config)?;
        let tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
        let outcome = train_stage1(&RcnModel::new(cfg.model.clone())?, &seqs, &tc)?;
        (cfg, outcome)
    } else {
        let init = init.ok_or_else(|| Error::Config("--init: stage 2 needs a stage-1 checkpoint".into()))?;
        let (stage1, init_cfg) = checkpoint::load(init)?;
        let cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => init_cfg,
        };
        let tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
        let outcome = train_stage2(&RcnModel::new(cfg.model.clone())?, &stage1, &seqs, &tc, &cfg.proposals)?;
        (cfg, outcome)
    };
    checkpoint::save(out, &outcome.params, &cfg)?;
    let log = PathBuf::from(format!("{}.log", out.display()));
    std::fs::write(&log, format_log(&outcome.log))?;
    if let Some(last) = outcome.log.last() {
        println!("stage {stage}: {} iterations, final loss {}", outcome.log.len(), last.loss);
    }
    Ok(())
}

fn model_from(ckpt: &Path) -> Result<(RcnModel, rcn::autodiff::ParamSet, RunConfig)> {
    let (params, cfg) = checkpoint::load(ckpt)?;
    Ok((RcnModel::new(cfg.model.clone())?, params, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, train, test, config, scene } => {
            let mut cfg = load_config(config.as_deref())?;
            for kv in &scene {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--scene: expected KEY=VALUE, got {kv:?}")))?;
                cfg.set(&format!("scene.{}", k.trim()), v.trim())?;
            }
            cfg.scene.validate()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            gen_data(&out, &cfg, train.unwrap_or(cfg.data_train), test.unwrap_or(cfg.data_test))
        }
        Command::Train { data, stage, config, out, init } => train(&data, stage, config.as_deref(), &out, init.as_deref()),
        Command::Detect { data, ckpt, out, split } => {
            let (model, params, cfg) = model_from(&ckpt)?;
            let seqs = read_split(&data.join(split))?;
            let rows = detect_split(&model, &params, &seqs, cfg.eval.t0, &cfg.proposals)?;
            write_detections(create(&out)?, &rows)?;
            println!("{} detections", rows.len());
            Ok(())
        }
        Command::Track { data, ckpt, out, split } => {
            let (model, params, cfg) = model_from(&ckpt)?;
            let seqs = read_split(&data.join(split))?;
            let rows = track_split(&model, &params, &seqs, cfg.eval.min_track_len)?;
            write_tracks(create(&out)?, &rows)?;
            println!("{} tracked boxes", rows.len());
            Ok(())
        }
        Command::EvalDet { detections, gt, out, t0, config } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = t0 {
                cfg.eval.t0 = t;
            }
            let rows = read_detections(File::open(&detections)?)?;
            let (curve, mr) = evaluate_detections(&rows, &read_split_gt(&gt)?, &cfg.eval);
            write_curve(create(&out)?, ("fppi", "miss_rate"), curve.iter().map(|p| (p.fppi, p.miss_rate)))?;
            println!("log_avg_mr={mr}");
            Ok(())
        }
        Command::EvalTrack { tracks, gt, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let rows = read_tracks(File::open(&tracks)?)?;
            let curve = evaluate_tracks(&rows, &read_split_gt(&gt)?, cfg.eval.min_track_len)?;
            write_curve(create(&out)?, ("threshold", "success_rate"), success_thresholds().into_iter().zip(curve.iter().copied()))?;
            println!("auc={}", success_auc(&curve));
            Ok(())
        }
        Command::Ablate { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let train = read_split(&data.join("train"))?;
            let test = read_split(&data.join("test"))?;
            let rows = run_ablation(&cfg.model, &cfg.ablation(), &train, &test, |m| eprintln!("{m}"))?;
            write_ablation(create(&out)?, &rows)?;
            for tag in &cfg.ablate.variants {
                let mrs: Vec<f64> = rows.iter().filter(|r| &r.variant == tag).map(|r| r.log_avg_mr).collect();
                println!("{tag}: mean log_avg_mr={}", mrs.iter().sum::<f64>() / mrs.len() as f64);
            }
            Ok(())
        }
        Command::GradCheck { config } => {
            let model = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => ModelConfig::micro(),
            };
            let report = snippet_grad_check(&model, 9, usize::MAX)?;
            println!("max_rel_error={} entries={}", report.max_rel_error, report.entries_checked);
            if report.max_rel_error < 1e-4 {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed at {:?}", report.worst)))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
