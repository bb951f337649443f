//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime.
//!
//! Run with `cargo test -p mailpp --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mailpp::cli::{Checkpoint, CheckpointKind, CheckpointMeta, Container, RunConfig};
use mailpp::coupling::{AgentSites, CouplingConfig, CouplingMode};
use mailpp::model::{DualEncoder, EncoderConfig, Modality};
use mailpp::rng::{stream, Stream};
use mailpp::tensor::{DType, Scalar};
use mailpp::training::{
    accuracy, feature_drift, gen_synthetic, sample_few_shot, train, DataConfig, Episode, StepLog, SyntheticDataset,
    TrainedState, TrainingConfig,
};
use mailpp::verify::{
    check_identity_at_init, compare_fused, count_trainable_params, fusion_sweep, gradcheck_random, gradient_sources,
    random_inputs, GradcheckOptions, SWEEP_AGENT_STD,
};

const SEED: u64 = 2024;

type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Verdict + 'a>);

/// Outcome of one criterion: pass flag and a one-line summary.
struct Verdict {
    pass: bool,
    summary: String,
}

fn verdict(pass: bool, summary: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        summary: summary.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mailpp"))
}

/// The synthetic separable task: 16 classes split 8 base / 8 novel, 4 shots.
struct Task {
    model: DualEncoder<f32>,
    dataset: SyntheticDataset<f32>,
    episode: Episode,
    encoder: EncoderConfig,
}

fn task() -> Task {
    let encoder = EncoderConfig::toy();
    let model = DualEncoder::random(encoder.clone(), &mut stream(SEED, Stream::FrozenWeights)).unwrap();
    let data = DataConfig {
        classes: 16,
        pool_per_class: 12,
        noise: 0.1,
        latent_dim: 16,
        name_len: 2,
    };
    let dataset = gen_synthetic(&data, &encoder, SEED).unwrap();
    let episode = sample_few_shot(&dataset, 4, SEED).unwrap();
    Task {
        model,
        dataset,
        episode,
        encoder,
    }
}

fn coupling(mode: CouplingMode) -> CouplingConfig {
    CouplingConfig::new(mode, 4, 16)
}

fn run_training(t: &Task, mode: CouplingMode, config: &TrainingConfig) -> (TrainedState<f32>, Vec<StepLog>) {
    let sites = AgentSites::init(&t.encoder, &coupling(mode), SEED).unwrap();
    train(&t.model, TrainedState::new(sites), config, &t.dataset, &t.episode, SEED).unwrap()
}

fn param_count() -> Verdict {
    let encoder = EncoderConfig::clip_b16();
    let c = CouplingConfig::new(CouplingMode::Bidirectional, 32, 512);
    let total = count_trainable_params(&encoder, &c).unwrap().total;
    let rounded = format!("{:.2}", total as f64 / 1e6);
    let out = bin()
        .args(["count-params", "--config"])
        .arg(workspace_root().join("configs/clip_b16.json"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let first = stdout.lines().next().unwrap_or("");
    verdict(
        total == 3_831_296 && rounded == "3.83" && out.status.success() && first == "3831296",
        format!(
            "library {total} ({rounded}M), CLI first line {first:?}{}",
            String::from_utf8_lossy(&out.stderr).trim()
        ),
    )
}

fn identity_at_init() -> Verdict {
    let mut worst = 0.0f64;
    let mut trials = 0;
    let mut failures = Vec::new();
    for i in 0..100u64 {
        let encoder = EncoderConfig {
            layers: 1 + (i as usize % 4),
            ..EncoderConfig::toy()
        };
        let model =
            DualEncoder::<f64>::random(encoder, &mut mailpp::rng::substream(SEED, Stream::FrozenWeights, i)).unwrap();
        let r = check_identity_at_init(&model, &coupling(CouplingMode::Ivlu), &CouplingMode::ALL, 2, SEED + i);
        worst = worst.max(r.worst_error);
        trials += r.trials;
        if !r.pass {
            failures.push(format!("model {i}: {}", r.detail));
        }
    }
    verdict(
        failures.is_empty() && worst == 0.0 && trials == 800,
        format!(
            "100 models (L = 1..4) x 4 modes x 2 inputs, max error {worst:e}{}",
            failures.iter().map(|f| format!("; {f}")).collect::<String>()
        ),
    )
}

fn fusion() -> Verdict {
    let encoder = EncoderConfig::toy();
    let c = coupling(CouplingMode::Bidirectional);
    let f64_report = fusion_sweep::<f64>(&encoder, &c, 1000, SWEEP_AGENT_STD, 1e-10, SEED);
    let f32_report = fusion_sweep::<f32>(&encoder, &c, 1000, SWEEP_AGENT_STD, 1e-5, SEED);
    verdict(
        f64_report.pass && f32_report.pass && f64_report.trials == 1000 && f32_report.trials == 1000,
        format!(
            "f64 worst {:.2e} (tol 1e-10), f32 worst {:.2e} (tol 1e-5), 1000 settings each",
            f64_report.worst_error, f32_report.worst_error
        ),
    )
}

fn gradients() -> Verdict {
    let encoder = EncoderConfig::toy();
    assert_eq!(encoder.layers, 2);
    let opts = GradcheckOptions {
        h: 1e-5,
        tolerance: 1e-4,
        seed: SEED,
        ..Default::default()
    };
    let reports = gradcheck_random(&encoder, &coupling(CouplingMode::Bidirectional), &opts).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let expected = [
        "gradcheck.a",
        "gradcheck.b",
        "gradcheck.W_up",
        "gradcheck.W_down",
        "gradcheck.a_m",
    ];
    let all_classes = expected.iter().all(|n| names.contains(n));
    let summary = reports
        .iter()
        .map(|r| format!("{} {:.1e}/{}", &r.name["gradcheck.".len()..], r.worst_error, r.trials))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        all_classes && reports.iter().all(|r| r.pass),
        format!("worst rel. error/entries: {summary} (tol 1e-4, h=1e-5, f64)"),
    )
}

fn learning(t: &Task) -> Verdict {
    let config = TrainingConfig::default();
    assert!(config.steps <= 300);
    let c = t.episode.base_classes.len();
    let frozen = accuracy(
        &t.model,
        None,
        &t.dataset,
        &t.episode,
        mailpp::training::Split::Base,
        &t.episode.train,
    )
    .unwrap();
    let (state, log) = run_training(t, CouplingMode::Bidirectional, &config);
    let trained = accuracy(
        &t.model,
        Some(&state.sites),
        &t.dataset,
        &t.episode,
        mailpp::training::Split::Base,
        &t.episode.train,
    )
    .unwrap();
    let chance_bound = 2.0 / c as f64 + 0.10;
    let (first, last) = (log[0].ce, log.last().unwrap().ce);
    verdict(
        c == 8 && trained >= 0.95 && frozen <= chance_bound && last < first,
        format!(
            "C={c}, k=4, {} steps: train acc {trained:.3} (>= 0.95), frozen {frozen:.3} (<= {chance_bound:.3}), L_ce {first:.3} -> {last:.3}",
            log.len()
        ),
    )
}

fn ablation(t: &Task) -> Verdict {
    let config = TrainingConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in CouplingMode::ALL {
        let (state, log) = run_training(t, mode, &config);
        let acc = accuracy(
            &t.model,
            Some(&state.sites),
            &t.dataset,
            &t.episode,
            mailpp::training::Split::Base,
            &t.episode.train,
        )
        .unwrap();
        ok &= log.len() == config.steps;
        notes.push(format!("{mode} acc {acc:.2}"));
        match mode {
            CouplingMode::Ivlu => {
                let (tokens, patches) = random_inputs::<f32>(&t.encoder, 1, SEED).remove(0);
                let sources = gradient_sources(&t.model, &state.sites, &tokens, &patches, SEED).unwrap();
                let shared = sources.iter().filter(|s| s.from_image && s.from_text).count();
                ok &= shared == 0 && !sources.is_empty();
                notes.push(format!(
                    "IVLU tensors with gradient from both sides: {shared}/{}",
                    sources.len()
                ));
            }
            CouplingMode::Bidirectional => {
                let mut min_norm = f64::INFINITY;
                let mut departed = true;
                for (_, site) in state.sites.iter() {
                    for side in Modality::BOTH {
                        min_norm = min_norm.min(site.bridge_norm(side).unwrap().as_f64());
                    }
                    let (a_v, a_t) = site.effective_scalings().unwrap();
                    departed &= !a_v.bitwise_eq(&site.image.scale) && !a_t.bitwise_eq(&site.text.scale);
                }
                ok &= min_norm > 0.0 && departed;
                notes.push(format!(
                    "bidirectional min bridge_norm {min_norm:.3}, effective scales departed: {departed}"
                ));
            }
            _ => {}
        }
    }
    verdict(ok, notes.join("; "))
}

fn regularizer(t: &Task) -> Verdict {
    let mut drifts = Vec::new();
    for lambda in [0.0, 1.0, 10.0] {
        let config = TrainingConfig {
            lambda,
            ..Default::default()
        };
        let (state, _) = run_training(t, CouplingMode::Bidirectional, &config);
        drifts.push((
            lambda,
            feature_drift(&t.model, &state.sites, &t.dataset, &t.episode).unwrap(),
        ));
    }
    let monotone = drifts
        .windows(2)
        .all(|w| w[1].1 .0 <= w[0].1 .0 && w[1].1 .1 <= w[0].1 .1);
    let text = drifts
        .iter()
        .map(|(l, (v, t))| format!("lambda {l}: image {v:.4} text {t:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(monotone, format!("drift {text}"))
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // Library round trip of a trained f64 checkpoint.
    let config = RunConfig {
        precision: DType::F64,
        training: TrainingConfig {
            steps: 5,
            lr: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = gen_synthetic::<f64>(&config.data, &config.encoder, SEED).unwrap();
    let ep = sample_few_shot(&ds, config.training.shots, SEED).unwrap();
    let model = DualEncoder::<f64>::random(config.encoder.clone(), &mut stream(SEED, Stream::FrozenWeights)).unwrap();
    let sites = AgentSites::init(&config.encoder, &config.coupling, SEED).unwrap();
    let (state, _) = train(&model, TrainedState::new(sites), &config.training, &ds, &ep, SEED).unwrap();
    let ck = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Trained,
            seed: SEED,
            step: state.step,
            config,
        },
        model,
        state: Some(state),
    };
    let path = dir.path().join("f64.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    let resaved = loaded.to_container().unwrap().to_bytes().unwrap();
    let bitwise = ck
        .to_container()
        .unwrap()
        .bitwise_eq(&Container::from_bytes(&bytes).unwrap());
    ok &= bitwise && resaved == bytes && loaded == ck;
    notes.push(format!("f64 save/load bitwise: {}", bitwise && resaved == bytes));

    // Command-line pipeline in f32: gen-data, train, fuse, then the fusion
    // check of the fused file against its source.
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, r#"{"training": {"steps": 40, "lr": 0.01}, "seed": 5}"#).unwrap();
    let data = dir.path().join("data");
    let trained = dir.path().join("run.ckpt");
    let fused = dir.path().join("fused.ckpt");
    let steps: [Vec<std::ffi::OsString>; 3] = [
        vec![
            "gen-data".into(),
            "--config".into(),
            cfg_path.clone().into(),
            "--out".into(),
            data.clone().into(),
        ],
        vec![
            "train".into(),
            "--config".into(),
            cfg_path.clone().into(),
            "--data".into(),
            data.clone().into(),
            "--out".into(),
            trained.clone().into(),
        ],
        vec![
            "fuse".into(),
            "--ckpt".into(),
            trained.clone().into(),
            "--out".into(),
            fused.clone().into(),
        ],
    ];
    for args in steps {
        let out = bin().args(&args).output().unwrap();
        if !out.status.success() {
            return verdict(
                false,
                format!("{:?} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)),
            );
        }
    }
    let source = Checkpoint::<f32>::load(&trained).unwrap();
    let target = Checkpoint::<f32>::load(&fused).unwrap();
    let source_state = source.state.as_ref().unwrap();
    let report = compare_fused(&source.model, &source_state.sites, &target.model, 200, 1e-5, SEED);
    let reloaded = Container::load(&trained).unwrap().to_bytes().unwrap() == std::fs::read(&trained).unwrap();
    let no_trainables = target.state.is_none() && target.meta.kind == CheckpointKind::Fused;
    ok &= report.pass && reloaded && no_trainables;
    notes.push(format!(
        "CLI fused vs source: worst {:.2e} (tol 1e-5, {} inputs), fused has no trainable tensors: {no_trainables}",
        report.worst_error, report.trials
    ));
    verdict(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let task = task();
    let criteria: Vec<Criterion> = vec![
        ("1 parameter count", Duration::from_secs(1), Box::new(param_count)),
        (
            "2 identity at init",
            Duration::from_secs(30),
            Box::new(identity_at_init),
        ),
        ("3 fusion equivalence", Duration::from_secs(120), Box::new(fusion)),
        ("4 gradient fidelity", Duration::from_secs(120), Box::new(gradients)),
        (
            "5 learning sanity",
            Duration::from_secs(180),
            Box::new(|| learning(&task)),
        ),
        (
            "6 ablation structure",
            Duration::from_secs(600),
            Box::new(|| ablation(&task)),
        ),
        (
            "7 regularizer behavior",
            Duration::from_secs(600),
            Box::new(|| regularizer(&task)),
        ),
        ("8 persistence", Duration::from_secs(600), Box::new(persistence)),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(&check));
        let elapsed = start.elapsed();
        let (pass, summary) = match result {
            Ok(v) => (v.pass && elapsed < limit, v.summary),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} [{:.2}s, limit {}s] {summary}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
