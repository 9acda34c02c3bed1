//! Experiment CLI: corpus generation, training, evaluation, the ablation
//! table, the lambda sweep, and the gradient check, all driven by one
//! TOML config whose resolved form is snapshotted next to every output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlsan::config::RunConfig;
use mlsan::data::{bayes_oracle, generate_corpus, read_corpus, split_corpus, write_corpus,
                  DialogueCorpus};
use mlsan::error::{Error, Result};
use mlsan::experiment::{
    dump_embeddings, effective_ablation, evaluate, lambda_sweep, render_ablation_report,
    render_run_metrics, render_sweep_report, run_ablation,
};
use mlsan::model::Ablation;
use mlsan::tensor::finite_difference_check;
use mlsan::train::{dialogue_features, train, Checkpoint};
use mlsan::model::{forward_dialogue, total_loss, ModelConfig, ModelParameters};
use mlsan::Tensor;

#[derive(Parser)]
#[command(name = "mlsan", about = "Speaker-adaptive ERC experiment kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Concurrent training runs for ablate/sweep.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the ablation (full, no_film, no_gate, no_aux).
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Overrides the aux-loss trade-off weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic corpus, its profile manifest, and the
    /// Bayes-oracle accuracy record.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Trains one model and writes checkpoint, curve, and test report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus directory produced by `generate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Resume from this checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on a corpus split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also dump fused features with labels to this CSV path.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
    /// Runs the four-configuration ablation over the seed list.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Runs the lambda sensitivity sweep over the grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Verifies every model gradient against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Relative tolerance for the worst parameter.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.generator.seed = seed;
    }
    if let Some(ablation) = common.ablation {
        cfg.train.ablation = ablation;
    }
    if let Some(lambda) = common.lambda {
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        cfg.train.lambda = lambda;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_splits(
    cfg: &RunConfig,
    corpus_dir: &Path,
) -> Result<(DialogueCorpus, DialogueCorpus, DialogueCorpus, ModelConfig)> {
    let corpus = read_corpus(corpus_dir)?;
    let model_cfg = cfg.model_config(&corpus);
    let (tr, va, te) = split_corpus(&corpus, cfg.split.fractions, cfg.split.seed)?;
    Ok((tr, va, te, model_cfg))
}

fn cmd_generate(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (corpus, artifacts) = generate_corpus(&cfg.generator)?;
    write_corpus(&corpus, &common.out)?;
    let path = common.out.join("generator.json");
    write_text(&path, &serde_json::to_string_pretty(&artifacts).expect("serializable"))?;
    let oracle = bayes_oracle(&corpus, &artifacts)?;
    let record = serde_json::json!({
        "oracle_accuracy": oracle,
        "utterances": corpus.utterance_count(),
        "majority_class_fraction": corpus.majority_class_fraction(),
    });
    write_text(&common.out.join("oracle.json"), &serde_json::to_string_pretty(&record).unwrap())?;
    cfg.write_snapshot(&common.out.join("effective-config.toml"))?;
    println!(
        "generated {} dialogues / {} utterances; bayes oracle accuracy {:.4}",
        corpus.dialogues.len(),
        corpus.utterance_count(),
        oracle
    );
    Ok(())
}

fn cmd_train(common: &CommonArgs, corpus_dir: &Path, resume_from: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (tr, va, te, model_cfg) = load_splits(&cfg, corpus_dir)?;
    let outcome = match resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            mlsan::train::resume(ckpt, &tr, &va)?
        }
        None => train(&tr, &va, &model_cfg, &cfg.train)?,
    };
    outcome.checkpoint.save(&common.out.join("checkpoint.json"))?;

    let mut curve = String::from("epoch,train_loss,l_erc,l_spk,val_weighted_f1\n");
    for r in &outcome.curve {
        let val = r.val_weighted_f1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(curve, "{},{},{},{},{val}", r.epoch, r.train_loss, r.l_erc, r.l_spk);
    }
    write_text(&common.out.join("curve.csv"), &curve)?;

    let best = outcome.checkpoint.best_model()?;
    let metrics = evaluate(&best, &te, effective_ablation(&cfg.train))?;
    write_text(&common.out.join("report.txt"), &render_run_metrics(&metrics, "test"))?;
    write_text(
        &common.out.join("report.json"),
        &serde_json::to_string_pretty(&metrics).expect("serializable"),
    )?;
    cfg.write_snapshot(&common.out.join("effective-config.toml"))?;
    println!(
        "trained {} epochs ({}); test weighted F1 {:.4}",
        outcome.checkpoint.epoch,
        cfg.train.ablation.name(),
        metrics.weighted_f1
    );
    Ok(())
}

fn cmd_evaluate(
    common: &CommonArgs,
    corpus_dir: &Path,
    checkpoint: &Path,
    split: &str,
    dump: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (tr, va, te, _) = load_splits(&cfg, corpus_dir)?;
    let corpus = match split {
        "train" => &tr,
        "val" => &va,
        "test" => &te,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let best = ckpt.best_model()?;
    if best.config.modality_dims != corpus.modality_dims
        || best.config.num_emotions != corpus.num_emotions
    {
        return Err(Error::Config(format!(
            "checkpoint dims (modalities {:?}, emotions {}) incompatible with corpus ({:?}, {})",
            best.config.modality_dims,
            best.config.num_emotions,
            corpus.modality_dims,
            corpus.num_emotions
        )));
    }
    let metrics = evaluate(&best, corpus, effective_ablation(&ckpt.train_config))?;
    let text = render_run_metrics(&metrics, split);
    print!("{text}");
    write_text(&common.out.join(format!("report-{split}.txt")), &text)?;
    write_text(
        &common.out.join(format!("report-{split}.json")),
        &serde_json::to_string_pretty(&metrics).expect("serializable"),
    )?;
    if let Some(dump_path) = dump {
        dump_embeddings(&ckpt, corpus, dump_path)?;
    }
    cfg.write_snapshot(&common.out.join("effective-config.toml"))?;
    Ok(())
}

fn cmd_ablate(common: &CommonArgs, corpus_dir: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (tr, va, te, model_cfg) = load_splits(&cfg, corpus_dir)?;
    let report = run_ablation(&tr, &va, &te, &model_cfg, &cfg.train, &cfg.experiment.seeds)?;
    let text = render_ablation_report(&report);
    print!("{text}");
    write_text(&common.out.join("ablation.txt"), &text)?;
    write_text(
        &common.out.join("ablation.json"),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    let mut csv = String::from("ablation,seed,weighted_f1\n");
    for row in &report.rows {
        for (seed, wf1) in report.seeds.iter().zip(&row.per_seed_wf1) {
            let _ = writeln!(csv, "{},{seed},{wf1}", row.ablation.name());
        }
    }
    write_text(&common.out.join("ablation.csv"), &csv)?;
    cfg.write_snapshot(&common.out.join("effective-config.toml"))?;
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, corpus_dir: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (tr, va, te, model_cfg) = load_splits(&cfg, corpus_dir)?;
    let report = lambda_sweep(
        &tr,
        &va,
        &te,
        &model_cfg,
        &cfg.train,
        &cfg.experiment.lambda_grid,
        &cfg.experiment.seeds,
    )?;
    let text = render_sweep_report(&report);
    print!("{text}");
    write_text(&common.out.join("sweep.txt"), &text)?;
    write_text(
        &common.out.join("sweep.json"),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    let mut csv = String::from("lambda,seed,weighted_f1\n");
    for p in &report.points {
        for (seed, wf1) in report.seeds.iter().zip(&p.per_seed_wf1) {
            let _ = writeln!(csv, "{},{seed},{wf1}", p.lambda);
        }
    }
    write_text(&common.out.join("sweep.csv"), &csv)?;
    cfg.write_snapshot(&common.out.join("effective-config.toml"))?;
    Ok(())
}

/// Builds a small synthetic batch, then checks every parameter scalar
/// of the full model against central differences.
fn cmd_gradcheck(common: &CommonArgs, tolerance: f64) -> Result<()> {
    let cfg = load_config(common)?;
    let gen_cfg = mlsan::data::GeneratorConfig {
        dialogues: 2,
        utterances_per_dialogue: 6,
        seed: cfg.generator.seed,
        ..cfg.generator.clone()
    };
    let (corpus, _) = generate_corpus(&gen_cfg)?;
    // Small widths keep the sweep under the runtime budget.
    let model_cfg = ModelConfig {
        num_speakers: gen_cfg.num_speakers,
        num_emotions: gen_cfg.num_emotions,
        modality_dims: corpus.modality_dims.clone(),
        d_spk: cfg.model.d_spk.min(8),
        d_h: cfg.model.d_h.min(12),
        context_window: cfg.model.context_window,
    };
    let params = ModelParameters::init(&model_cfg, cfg.train.seed)?;
    // Perturb FiLM off identity so its gradients are generic.
    for mp in &params.modalities {
        let w: Vec<f64> = (0..mp.w_gamma.len())
            .map(|i| ((i % 7) as f64 - 3.0) * 0.05)
            .collect();
        mp.w_gamma.set_data(&w);
        mp.w_beta.set_data(&w);
    }
    let lambda = cfg.train.lambda.max(0.5);
    let dialogues: Vec<_> = corpus.dialogues.clone();
    let model_dims = model_cfg.modality_dims.clone();
    let loss_fn = || -> Result<Tensor> {
        let mut emo_logits = Vec::new();
        let mut spk_logits = Vec::new();
        let mut emo_targets = Vec::new();
        let mut spk_targets = Vec::new();
        for dialogue in &dialogues {
            let feats = dialogue_features(dialogue, &model_dims);
            let rows: Vec<usize> = dialogue
                .utterances
                .iter()
                .map(|u| params.embedding_row(u.speaker_id))
                .collect();
            let fwd = forward_dialogue(&params, &feats, &rows, Ablation::Full)?;
            emo_logits.push(fwd.emotion_logits);
            spk_logits.push(fwd.speaker_logits.expect("full model"));
            for u in &dialogue.utterances {
                emo_targets.push(u.emotion);
                spk_targets.push(u.speaker_id);
            }
        }
        let emo = Tensor::concat_rows(&emo_logits)?;
        let spk = Tensor::concat_rows(&spk_logits)?;
        let lb = total_loss(&emo, &emo_targets, Some(&spk), &spk_targets, lambda, None)?;
        Ok(lb.total)
    };
    let tensors = params.tensors();
    let start = std::time::Instant::now();
    let worst = finite_difference_check(loss_fn, &tensors, 1e-5)?;
    let elapsed = start.elapsed();
    println!(
        "gradcheck: {} parameter scalars, worst relative error {worst:.3e}, tolerance {tolerance:.1e}, {:.1}s",
        params.scalar_count(),
        elapsed.as_secs_f64()
    );
    if worst > tolerance {
        return Err(Error::Numeric(format!(
            "gradient check failed: worst error {worst:.3e} exceeds {tolerance:.1e}"
        )));
    }
    println!("gradcheck: PASS");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate { common }
        | Command::Train { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Ablate { common, .. }
        | Command::Sweep { common, .. }
        | Command::Gradcheck { common, .. } => common.clone(),
    };
    if common.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate { common } => cmd_generate(&common),
        Command::Train {
            common,
            corpus,
            resume,
        } => cmd_train(&common, &corpus, resume.as_deref()),
        Command::Evaluate {
            common,
            corpus,
            checkpoint,
            split,
            dump_embeddings,
        } => cmd_evaluate(&common, &corpus, &checkpoint, &split, dump_embeddings.as_deref()),
        Command::Ablate { common, corpus } => cmd_ablate(&common, &corpus),
        Command::Sweep { common, corpus } => cmd_sweep(&common, &corpus),
        Command::Gradcheck { common, tolerance } => cmd_gradcheck(&common, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
