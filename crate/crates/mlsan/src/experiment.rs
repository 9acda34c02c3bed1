//! Measurement protocol: per-run evaluation, the four-way ablation table
//! with paired seeds, the lambda sensitivity sweep, and embedding dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DialogueCorpus;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_seeds, macro_f1, paired_deltas, weighted_f1, Aggregate, ConfusionMatrix};
use crate::model::{forward_dialogue, Ablation, ModelConfig, ModelParameters};
use crate::train::{dialogue_features, train, Checkpoint, TrainConfig, TrainOutcome};

pub const REPORT_VERSION: &str = "mlsan-report-v1";

/// The ablation actually applied at forward time: lambda = 0 detaches
/// the aux branch, which is exactly the no_aux configuration.
pub fn effective_ablation(cfg: &TrainConfig) -> Ablation {
    if cfg.lambda == 0.0 && cfg.ablation == Ablation::Full {
        Ablation::NoAux
    } else {
        cfg.ablation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub modality: String,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
}

/// Metrics for one trained model on one corpus split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// mean_gate[speaker][modality]: mean gate activation across that
    /// speaker's utterances (1.0 under no_gate).
    pub mean_gate: Vec<Vec<f64>>,
    pub modality_stats: Vec<ModalityStats>,
    pub utterances: usize,
}

/// Evaluates a model over a corpus, collecting predictions and the gate
/// and FiLM diagnostics.
pub fn evaluate(
    params: &ModelParameters,
    corpus: &DialogueCorpus,
    ablation: Ablation,
) -> Result<RunMetrics> {
    let cfg = &params.config;
    let e = cfg.num_emotions;
    let n_modalities = cfg.modality_dims.len();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut gate_sum = vec![vec![0.0; n_modalities]; cfg.num_speakers + 1];
    let mut gate_count = vec![0usize; cfg.num_speakers + 1];
    let mut gamma_acc: Vec<Vec<f64>> = vec![Vec::new(); n_modalities];
    let mut beta_acc: Vec<Vec<f64>> = vec![Vec::new(); n_modalities];

    for dialogue in &corpus.dialogues {
        let feats = dialogue_features(dialogue, &cfg.modality_dims);
        let rows: Vec<usize> = dialogue
            .utterances
            .iter()
            .map(|u| params.embedding_row(u.speaker_id))
            .collect();
        let fwd = forward_dialogue(params, &feats, &rows, ablation)?;
        let logits = fwd.emotion_logits.data();
        for (i, u) in dialogue.utterances.iter().enumerate() {
            let row = &logits[i * e..(i + 1) * e];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            preds.push(argmax);
            labels.push(u.emotion);
            let srow = rows[i];
            gate_count[srow] += 1;
            for (m, gate) in fwd.gates.iter().enumerate() {
                let g = gate.data();
                let d_h = cfg.d_h;
                let mean: f64 = g[i * d_h..(i + 1) * d_h].iter().sum::<f64>() / d_h as f64;
                gate_sum[srow][m] += mean;
            }
        }
        for m in 0..n_modalities {
            gamma_acc[m].extend_from_slice(&fwd.gammas[m].data());
            beta_acc[m].extend_from_slice(&fwd.betas[m].data());
        }
    }

    let confusion = ConfusionMatrix::from_predictions(&preds, &labels, e)?;
    let mean_gate = gate_sum
        .iter()
        .zip(&gate_count)
        .map(|(sums, &cnt)| {
            sums.iter()
                .map(|&s| if cnt > 0 { s / cnt as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let stats = |acc: &[f64]| {
        let n = acc.len().max(1) as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let modality_stats = (0..n_modalities)
        .map(|m| {
            let (gm, gs) = stats(&gamma_acc[m]);
            let (bm, bs) = stats(&beta_acc[m]);
            ModalityStats {
                modality: corpus
                    .modality_names
                    .get(m)
                    .cloned()
                    .unwrap_or_else(|| format!("m{m}")),
                gamma_mean: gm,
                gamma_std: gs,
                beta_mean: bm,
                beta_std: bs,
            }
        })
        .collect();

    Ok(RunMetrics {
        weighted_f1: weighted_f1(&confusion)?,
        macro_f1: macro_f1(&confusion)?,
        accuracy: confusion.accuracy(),
        per_class_f1: confusion.per_class_f1(),
        confusion,
        mean_gate,
        modality_stats,
        utterances: preds.len(),
    })
}

/// One full training followed by evaluation of the best checkpoint on
/// the test split.
pub fn run_single(
    train_corpus: &DialogueCorpus,
    val_corpus: &DialogueCorpus,
    test_corpus: &DialogueCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, RunMetrics)> {
    let outcome = train(train_corpus, val_corpus, model_cfg, cfg)?;
    let best = outcome.checkpoint.best_model()?;
    let metrics = evaluate(&best, test_corpus, effective_ablation(cfg))?;
    Ok((outcome, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Test weighted F1 per seed, in percent. NaN-free: failed runs are
    /// dropped and recorded under `failures`.
    pub per_seed_wf1: Vec<f64>,
    pub aggregate: Aggregate,
    /// full - this configuration, mean over paired seeds.
    pub delta_vs_full: Option<f64>,
    pub per_seed_deltas: Option<Vec<f64>>,
    /// Seeds on which full beat this configuration.
    pub positive_deltas: Option<usize>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Trains {full, no_film, no_gate, no_aux} on identical splits with
/// identical per-seed init seeds (paired design) and tabulates mean,
/// sample std, and per-seed deltas against the full model.
pub fn run_ablation(
    train_corpus: &DialogueCorpus,
    val_corpus: &DialogueCorpus,
    test_corpus: &DialogueCorpus,
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    // Runs are independent; grid points execute in parallel, results are
    // collected in deterministic (ablation, seed) order.
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .iter()
        .flat_map(|&ab| seeds.iter().map(move |&s| (ab, s)))
        .collect();
    let results: Vec<(Ablation, u64, Result<f64>)> = jobs
        .par_iter()
        .map(|&(ablation, seed)| {
            let cfg = TrainConfig {
                seed,
                ablation,
                ..base_cfg.clone()
            };
            let res = run_single(train_corpus, val_corpus, test_corpus, model_cfg, &cfg)
                .map(|(_, metrics)| 100.0 * metrics.weighted_f1);
            (ablation, seed, res)
        })
        .collect();
    let mut per_config: Vec<(Ablation, Vec<f64>, Vec<String>)> = Ablation::ALL
        .iter()
        .map(|&ab| (ab, Vec::new(), Vec::new()))
        .collect();
    for (ablation, seed, res) in results {
        let entry = per_config
            .iter_mut()
            .find(|(ab, _, _)| *ab == ablation)
            .expect("known ablation");
        match res {
            Ok(wf1) => entry.1.push(wf1),
            Err(e) => entry.2.push(format!("seed {seed}: {e}")),
        }
    }
    let full_wf1 = per_config[0].1.clone();
    let rows = per_config
        .into_iter()
        .map(|(ablation, wf1, failures)| {
            let aggregate = aggregate_seeds(&wf1).unwrap_or(Aggregate {
                n: 0,
                mean: f64::NAN,
                std: None,
            });
            let (delta, per_seed, positives) = if ablation == Ablation::Full
                || wf1.len() != full_wf1.len()
            {
                (None, None, None)
            } else {
                let (deltas, pos) = paired_deltas(&full_wf1, &wf1).expect("equal lengths");
                let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
                (Some(mean_delta), Some(deltas), Some(pos))
            };
            AblationRow {
                ablation,
                per_seed_wf1: wf1,
                aggregate,
                delta_vs_full: delta,
                per_seed_deltas: per_seed,
                positive_deltas: positives,
                failures,
            }
        })
        .collect();
    Ok(AblationReport {
        version: REPORT_VERSION.to_string(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub per_seed_wf1: Vec<f64>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0];

/// One full training per (lambda, seed) on identical splits.
pub fn lambda_sweep(
    train_corpus: &DialogueCorpus,
    val_corpus: &DialogueCorpus,
    test_corpus: &DialogueCorpus,
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid must be nonempty".into()));
    }
    if grid.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("lambda values must be >= 0".into()));
    }
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(lambda, seed)| {
            let cfg = TrainConfig {
                seed,
                lambda,
                ablation: Ablation::Full,
                ..base_cfg.clone()
            };
            run_single(train_corpus, val_corpus, test_corpus, model_cfg, &cfg)
                .map(|(_, metrics)| 100.0 * metrics.weighted_f1)
        })
        .collect();
    let mut results = results.into_iter();
    let mut points = Vec::new();
    for &lambda in grid {
        let mut wf1 = Vec::new();
        for _ in seeds {
            wf1.push(results.next().expect("one result per job")?);
        }
        let aggregate = aggregate_seeds(&wf1)?;
        points.push(SweepPoint {
            lambda,
            per_seed_wf1: wf1,
            aggregate,
        });
    }
    Ok(SweepReport {
        version: REPORT_VERSION.to_string(),
        seeds: seeds.to_vec(),
        points,
    })
}

/// Dumps fused features with emotion and speaker labels as CSV, for
/// external projection tools.
pub fn dump_embeddings(
    checkpoint: &Checkpoint,
    corpus: &DialogueCorpus,
    path: &Path,
) -> Result<()> {
    let params = checkpoint.best_model()?;
    let cfg = &params.config;
    let ablation = effective_ablation(&checkpoint.train_config);
    let mut out = String::new();
    for j in 0..cfg.fused_dim() {
        let _ = write!(out, "z{j},");
    }
    out.push_str("emotion,speaker\n");
    for dialogue in &corpus.dialogues {
        let feats = dialogue_features(dialogue, &cfg.modality_dims);
        let rows: Vec<usize> = dialogue
            .utterances
            .iter()
            .map(|u| params.embedding_row(u.speaker_id))
            .collect();
        let fwd = forward_dialogue(&params, &feats, &rows, ablation)?;
        let fused = fwd.fused.data();
        let f = cfg.fused_dim();
        for (i, u) in dialogue.utterances.iter().enumerate() {
            for v in &fused[i * f..(i + 1) * f] {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{},{}", u.emotion, u.speaker_id);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- report rendering ----

fn fmt_aggregate(a: &Aggregate) -> String {
    match a.std {
        Some(s) => format!("{:.2} ± {:.2}", a.mean, s),
        None => format!("{:.2} (std absent, single seed)", a.mean),
    }
}

/// Table-2-shaped text rendering of the ablation report.
pub fn render_ablation_report(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version: {}", report.version);
    let _ = writeln!(out, "seeds: {:?}", report.seeds);
    let _ = writeln!(out, "{:<10} {:>22} {:>8} {:>12}", "model", "test W-F1 (%)", "Δ", "sign(+/n)");
    for row in &report.rows {
        let delta = row
            .delta_vs_full
            .map(|d| format!("{d:+.2}"))
            .unwrap_or_else(|| "-".to_string());
        let sign = row
            .positive_deltas
            .map(|p| format!("{p}/{}", report.seeds.len()))
            .unwrap_or_else(|| "-".to_string());
        let _ = writeln!(
            out,
            "{:<10} {:>22} {:>8} {:>12}",
            row.ablation.name(),
            fmt_aggregate(&row.aggregate),
            delta,
            sign
        );
        for f in &row.failures {
            let _ = writeln!(out, "  FAILED {f}");
        }
    }
    out
}

pub fn render_sweep_report(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version: {}", report.version);
    let _ = writeln!(out, "seeds: {:?}", report.seeds);
    let _ = writeln!(out, "{:>8} {:>22}", "lambda", "test W-F1 (%)");
    for p in &report.points {
        let _ = writeln!(out, "{:>8} {:>22}", p.lambda, fmt_aggregate(&p.aggregate));
    }
    out
}

/// Key-value report with nested tables for a single evaluation.
pub fn render_run_metrics(metrics: &RunMetrics, split: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version: {REPORT_VERSION}");
    let _ = writeln!(out, "split: {split}");
    let _ = writeln!(out, "utterances: {}", metrics.utterances);
    let _ = writeln!(out, "weighted_f1: {:.6}", metrics.weighted_f1);
    let _ = writeln!(out, "macro_f1: {:.6}", metrics.macro_f1);
    let _ = writeln!(out, "accuracy: {:.6}", metrics.accuracy);
    let _ = writeln!(out, "per_class_f1:");
    for (c, f) in metrics.per_class_f1.iter().enumerate() {
        let _ = writeln!(out, "  class_{c}: {f:.6}");
    }
    let _ = writeln!(out, "confusion_matrix: # rows = true, cols = predicted");
    for t in 0..metrics.confusion.classes {
        let row: Vec<String> = (0..metrics.confusion.classes)
            .map(|p| metrics.confusion.get(t, p).to_string())
            .collect();
        let _ = writeln!(out, "  {}", row.join(" "));
    }
    let _ = writeln!(out, "mean_gate: # per speaker (last row = OOV), per modality");
    for (s, gates) in metrics.mean_gate.iter().enumerate() {
        let cells: Vec<String> = gates.iter().map(|g| format!("{g:.4}")).collect();
        let _ = writeln!(out, "  speaker_{s}: {}", cells.join(" "));
    }
    let _ = writeln!(out, "film_stats:");
    for s in &metrics.modality_stats {
        let _ = writeln!(
            out,
            "  {}: gamma {:.4} ± {:.4}, beta {:.4} ± {:.4}",
            s.modality, s.gamma_mean, s.gamma_std, s.beta_mean, s.beta_std
        );
    }
    out
}
