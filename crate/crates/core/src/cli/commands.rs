//! The `mailpp` command-line interface.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use super::checkpoint::{read_meta, Checkpoint, CheckpointKind, CheckpointMeta, Container};
use super::config::{parse_config, RunConfig};
use super::dataset::{dataset_to_container, load_dataset, DATASET_FILE};
use crate::coupling::{fuse_model, AgentSites};
use crate::model::{DualEncoder, Modality};
use crate::rng::{stream, Stream};
use crate::tensor::{DType, Scalar};
use crate::training::{evaluate, gen_synthetic, log_csv, sample_few_shot, train, Split, TrainedState};
use crate::verify::{
    check_identity_at_init, compare_fused, count_trainable_params, enumerate_trainable_params, fusion_sweep,
    gradcheck_random, reports_csv, CheckReport, GradcheckOptions, SWEEP_AGENT_STD,
};

#[derive(Debug, Parser)]
#[command(name = "mailpp", version, about = "Agent-layer fine-tuning on a toy dual encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides MAIL_SEED and the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train agents on a few-shot episode and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metric log path (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fold the agents of a checkpoint into its weights.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on the base or novel evaluation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
    },
    /// Backward gradients against finite differences (f64).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Check at most this many random entries per tensor.
        #[arg(long)]
        max_entries: Option<usize>,
        /// Also write the reports as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every oracle check.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Randomized settings per fusion sweep.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trainable parameter count; the first output line is the bare total.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scaled bridge-output norms per site and side, as CSV.
    ReportNorms {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

/// Whether every check a command ran passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn load_container(path: &Path) -> anyhow::Result<(Container, CheckpointMeta)> {
    let c = Container::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let meta = read_meta(&c).with_context(|| format!("checkpoint {} has no valid document", path.display()))?;
    Ok((c, meta))
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn fusion_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

fn report_all(out: &mut dyn Write, reports: &[CheckReport], csv: Option<&Path>) -> anyhow::Result<Outcome> {
    for r in reports {
        writeln!(out, "{r}")?;
    }
    if let Some(path) = csv {
        write_file(path, reports_csv(reports).as_bytes())?;
    }
    Ok(if reports.iter().all(|r| r.pass) {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::GenData { config, out: dir, seed } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(seed)?;
            match cfg.precision {
                DType::F32 => gen_data::<f32>(&cfg, &dir, seed, out),
                DType::F64 => gen_data::<f64>(&cfg, &dir, seed, out),
            }
        }
        Command::Train {
            config,
            data,
            out: ckpt,
            seed,
            log,
        } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(seed)?;
            let log = log.unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", ckpt.display())));
            match cfg.precision {
                DType::F32 => train_cmd::<f32>(&cfg, &data, &ckpt, &log, seed, out),
                DType::F64 => train_cmd::<f64>(&cfg, &data, &ckpt, &log, seed, out),
            }
        }
        Command::Fuse { ckpt, out: dest } => {
            let (c, meta) = load_container(&ckpt)?;
            match meta.config.precision {
                DType::F32 => fuse_cmd::<f32>(&c, &dest, out),
                DType::F64 => fuse_cmd::<f64>(&c, &dest, out),
            }
        }
        Command::Eval { ckpt, data, split } => {
            let (c, meta) = load_container(&ckpt)?;
            match meta.config.precision {
                DType::F32 => eval_cmd::<f32>(&c, &data, split, out),
                DType::F64 => eval_cmd::<f64>(&c, &data, split, out),
            }
        }
        Command::Gradcheck {
            config,
            seed,
            max_entries,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let opts = GradcheckOptions {
                lambda: cfg.training.lambda,
                temperature: cfg.training.temperature,
                max_entries_per_tensor: max_entries,
                seed: cfg.resolve_seed(seed)?,
                ..Default::default()
            };
            let reports = gradcheck_random(&cfg.encoder, &cfg.coupling, &opts)?;
            report_all(out, &reports, csv.as_deref())
        }
        Command::Check {
            config,
            seed,
            trials,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(seed)?;
            let reports = check_cmd(&cfg, seed, trials)?;
            report_all(out, &reports, csv.as_deref())
        }
        Command::CountParams { config } => {
            let cfg = load_config(&config)?;
            let count = count_trainable_params(&cfg.encoder, &cfg.coupling)?;
            writeln!(out, "{}", count.total)?;
            for (key, n) in &count.sites {
                writeln!(out, "{key} {n}")?;
            }
            Ok(Outcome::Success)
        }
        Command::ReportNorms { ckpt, out: dest } => {
            let (c, meta) = load_container(&ckpt)?;
            let csv = match meta.config.precision {
                DType::F32 => norms_csv::<f32>(&c)?,
                DType::F64 => norms_csv::<f64>(&c)?,
            };
            write_file(&dest, csv.as_bytes())?;
            writeln!(out, "wrote {} rows to {}", csv.lines().count() - 1, dest.display())?;
            Ok(Outcome::Success)
        }
    }
}

fn gen_data<T: Scalar>(cfg: &RunConfig, dir: &Path, seed: u64, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let ds = gen_synthetic::<T>(&cfg.data, &cfg.encoder, seed)?;
    let bytes = dataset_to_container(&ds)?.to_bytes()?;
    let path = dir.join(DATASET_FILE);
    write_file(&path, &bytes)?;
    writeln!(
        out,
        "wrote {}: {} classes x {} images, seed {seed}",
        path.display(),
        cfg.data.classes,
        cfg.data.pool_per_class
    )?;
    Ok(Outcome::Success)
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn train_cmd<T: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    log_path: &Path,
    seed: u64,
    out: &mut dyn Write,
) -> anyhow::Result<Outcome> {
    let ds =
        load_dataset::<T>(data, &cfg.encoder).with_context(|| format!("loading dataset from {}", data.display()))?;
    let model = DualEncoder::<T>::random(cfg.encoder.clone(), &mut stream(seed, Stream::FrozenWeights))?;
    let sites = AgentSites::init(&cfg.encoder, &cfg.coupling, seed)?;
    let episode = sample_few_shot(&ds, cfg.training.shots, seed)?;
    let (state, log) = train(&model, TrainedState::new(sites), &cfg.training, &ds, &episode, seed)?;
    write_file(log_path, log_csv(&log).as_bytes())?;
    let base = evaluate(&model, Some(&state.sites), &ds, &episode, Split::Base)?;
    let novel = evaluate(&model, Some(&state.sites), &ds, &episode, Split::Novel)?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Trained,
            seed,
            step: state.step,
            config: cfg.clone(),
        },
        model,
        state: Some(state),
    };
    let bytes = checkpoint.to_container()?.to_bytes()?;
    write_file(ckpt, &bytes)?;
    if let Some(last) = log.last() {
        writeln!(
            out,
            "step {}: L_ce {:.4} L_reg_v {:.4} L_reg_t {:.4} L {:.4} acc {:.4}",
            last.step, last.ce, last.reg_v, last.reg_t, last.total, last.acc
        )?;
    }
    writeln!(
        out,
        "base {:.4} novel {:.4} HM {:.4}",
        base,
        novel,
        harmonic_mean(base, novel)
    )?;
    writeln!(out, "wrote {} and {}", ckpt.display(), log_path.display())?;
    Ok(Outcome::Success)
}

fn fuse_cmd<T: Scalar>(c: &Container, dest: &Path, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let ck = Checkpoint::<T>::from_container(c)?;
    let Some(state) = &ck.state else {
        bail!("checkpoint is already fused");
    };
    let fused = fuse_model(&ck.model, &state.sites)?;
    let report = compare_fused(
        &ck.model,
        &state.sites,
        &fused,
        16,
        fusion_tolerance(T::DTYPE),
        ck.meta.seed,
    );
    writeln!(out, "{report}")?;
    if !report.pass {
        return Ok(Outcome::ChecksFailed);
    }
    let fused = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Fused,
            step: state.step,
            ..ck.meta.clone()
        },
        model: fused,
        state: None,
    };
    write_file(dest, &fused.to_container()?.to_bytes()?)?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(Outcome::Success)
}

fn eval_cmd<T: Scalar>(c: &Container, data: &Path, split: Split, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let ck = Checkpoint::<T>::from_container(c)?;
    let cfg = &ck.meta.config;
    let ds =
        load_dataset::<T>(data, &cfg.encoder).with_context(|| format!("loading dataset from {}", data.display()))?;
    let episode = sample_few_shot(&ds, cfg.training.shots, ck.meta.seed)?;
    let sites = ck.state.as_ref().map(|s| &s.sites);
    let acc = evaluate(&ck.model, sites, &ds, &episode, split)?;
    let n = episode.eval_items(split).len();
    let name = match split {
        Split::Base => "base",
        Split::Novel => "novel",
    };
    writeln!(out, "{name} accuracy {acc:.4} on {n} images")?;
    Ok(Outcome::Success)
}

fn check_cmd(cfg: &RunConfig, seed: u64, trials: usize) -> anyhow::Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    let closed = count_trainable_params(&cfg.encoder, &cfg.coupling)?.total;
    let enumerated = enumerate_trainable_params(&cfg.encoder, &cfg.coupling, seed)?;
    reports.push(CheckReport::new(
        "param_count",
        (closed as f64 - enumerated as f64).abs(),
        0.0,
        1,
        seed,
        format!("closed form {closed}, registered leaves {enumerated}"),
    ));

    let model64 = DualEncoder::<f64>::random(cfg.encoder.clone(), &mut stream(seed, Stream::FrozenWeights))?;
    let mut r = check_identity_at_init(&model64, &cfg.coupling, &crate::coupling::CouplingMode::ALL, 8, seed);
    r.name.push_str(".f64");
    reports.push(r);
    let model32 = DualEncoder::<f32>::random(cfg.encoder.clone(), &mut stream(seed, Stream::FrozenWeights))?;
    let mut r = check_identity_at_init(&model32, &cfg.coupling, &crate::coupling::CouplingMode::ALL, 8, seed);
    r.name.push_str(".f32");
    reports.push(r);

    reports.push(fusion_sweep::<f64>(
        &cfg.encoder,
        &cfg.coupling,
        trials,
        SWEEP_AGENT_STD,
        fusion_tolerance(DType::F64),
        seed,
    ));
    reports.push(fusion_sweep::<f32>(
        &cfg.encoder,
        &cfg.coupling,
        trials,
        SWEEP_AGENT_STD,
        fusion_tolerance(DType::F32),
        seed,
    ));

    let opts = GradcheckOptions {
        lambda: cfg.training.lambda,
        temperature: cfg.training.temperature,
        max_entries_per_tensor: Some(3),
        seed,
        ..Default::default()
    };
    reports.extend(gradcheck_random(&cfg.encoder, &cfg.coupling, &opts)?);
    Ok(reports)
}

fn norms_csv<T: Scalar>(c: &Container) -> anyhow::Result<String> {
    let ck = Checkpoint::<T>::from_container(c)?;
    let Some(state) = &ck.state else {
        bail!("fused checkpoints carry no bridges");
    };
    let mut csv = String::from("block,position,side,norm\n");
    for (key, site) in state.sites.iter() {
        let block = key.block.map_or_else(|| "head".to_string(), |b| b.to_string());
        for side in [Modality::Image, Modality::Text] {
            let norm = site
                .bridge_norm(side)
                .with_context(|| format!("site {key}: bridge norms need bidirectional coupling"))?;
            let _ = writeln!(csv, "{block},{},{side},{norm}", key.position.id());
        }
    }
    Ok(csv)
}
