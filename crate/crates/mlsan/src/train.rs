//! Deterministic mini-batch training with Adam, early stopping on
//! validation weighted F1, and lossless checkpointing.
//!
//! All randomness is drawn from streams derived from (seed, epoch, tag),
//! so a run resumed from a checkpoint continues bit-identically.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, DialogueCorpus};
use crate::error::{Error, Result};
use crate::metrics::{weighted_f1, ConfusionMatrix};
use crate::model::{forward_dialogue, total_loss, Ablation, ModelConfig, ModelParameters};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "mlsan-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minimum utterances per batch; batches are whole dialogues.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Trade-off weight on the auxiliary speaker loss.
    pub lambda: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Early-stop patience on validation weighted F1, in epochs.
    pub patience: usize,
    /// Inverse-frequency emotion class weights.
    pub class_weights: bool,
    /// Fraction of training lookups rerouted to the reserved OOV row.
    pub oov_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 0.5,
            seed: 0,
            ablation: Ablation::Full,
            patience: 10,
            class_weights: false,
            oov_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            // Degenerate runs are allowed; nothing else to check then.
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.oov_rate) {
            return Err(Error::Config("oov_rate must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Independent deterministic stream for one (seed, epoch, purpose).
fn stream_rng(seed: u64, epoch: u64, tag: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ tag.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

// ---- Adam ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(tensors: &[Tensor]) -> AdamState {
        AdamState {
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction over every unfrozen tensor.
/// Tensors with no gradient are treated as zero-gradient (moments decay).
pub fn adam_step(
    tensors: &[(String, Tensor)],
    frozen: &[String],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (k, (name, tensor)) in tensors.iter().enumerate() {
        if frozen.iter().any(|f| f == name) {
            continue;
        }
        let grad = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.len()]);
        if grad.iter().any(|g| g.is_nan()) {
            return Err(Error::Numeric(format!("NaN gradient in parameter '{name}'")));
        }
        let mut data = tensor.data();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        tensor.set_data(&data);
    }
    Ok(())
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-contained training state: config, parameters, optimizer moments,
/// derived-RNG bookkeeping, and the best-so-far parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<NamedArray>,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Epochs since the last validation improvement.
    pub stale_epochs: usize,
    pub best_val_wf1: Option<f64>,
    pub best_params: Option<Vec<NamedArray>>,
    pub frozen: Vec<String>,
    /// All training randomness derives from (train_config.seed, epoch);
    /// restoring epoch restores the stream positions exactly.
    pub rng_scheme: String,
}

fn snapshot(params: &ModelParameters) -> Vec<NamedArray> {
    params
        .named_tensors()
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data(),
        })
        .collect()
}

fn restore_into(params: &ModelParameters, arrays: &[NamedArray]) -> Result<()> {
    let named = params.named_tensors();
    if named.len() != arrays.len() {
        return Err(Error::Checkpoint(format!(
            "parameter census mismatch: {} tensors in config, {} in file",
            named.len(),
            arrays.len()
        )));
    }
    for ((name, tensor), arr) in named.iter().zip(arrays) {
        if name != &arr.name || tensor.shape() != arr.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' shape {:?} does not match expected '{}' {:?}",
                arr.name,
                arr.shape,
                name,
                tensor.shape()
            )));
        }
        tensor.set_data(&arr.data);
    }
    Ok(())
}

impl Checkpoint {
    /// Materializes the final (latest) parameters.
    pub fn to_model(&self) -> Result<ModelParameters> {
        let params = ModelParameters::init(&self.model_config, self.train_config.seed)?;
        restore_into(&params, &self.params)?;
        Ok(params)
    }

    /// Materializes the best-validation snapshot, falling back to final.
    pub fn best_model(&self) -> Result<ModelParameters> {
        let params = ModelParameters::init(&self.model_config, self.train_config.seed)?;
        match &self.best_params {
            Some(arrays) => restore_into(&params, arrays)?,
            None => restore_into(&params, &self.params)?,
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version '{}' does not match '{CHECKPOINT_VERSION}'",
                ckpt.version
            )));
        }
        let expected: usize = ckpt.model_config.param_census();
        let actual: usize = ckpt.params.iter().map(|a| a.data.len()).sum();
        if expected != actual {
            return Err(Error::Checkpoint(format!(
                "parameter census mismatch: config expects {expected} scalars, file has {actual}"
            )));
        }
        Ok(ckpt)
    }
}

// ---- training ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_erc: f64,
    pub l_spk: f64,
    pub val_weighted_f1: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

pub fn dialogue_features(dialogue: &Dialogue, dims: &[usize]) -> Vec<Tensor> {
    let n = dialogue.utterances.len();
    dims.iter()
        .enumerate()
        .map(|(m, &d)| {
            let mut data = Vec::with_capacity(n * d);
            for u in &dialogue.utterances {
                data.extend_from_slice(&u.features[m]);
            }
            Tensor::from_vec(vec![n, d], data).expect("uniform widths")
        })
        .collect()
}

/// Inverse-frequency emotion weights from the training histogram,
/// normalized to mean 1.
pub fn inverse_frequency_weights(corpus: &DialogueCorpus) -> Vec<f64> {
    let hist = corpus.label_histogram();
    let total: usize = hist.iter().sum();
    let e = hist.len();
    let raw: Vec<f64> = hist
        .iter()
        .map(|&c| total as f64 / (e as f64 * c.max(1) as f64))
        .collect();
    let mean = raw.iter().sum::<f64>() / e as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Greedy argmax predictions over a corpus, no OOV rerouting.
pub fn predict_corpus(
    params: &ModelParameters,
    corpus: &DialogueCorpus,
    ablation: Ablation,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for dialogue in &corpus.dialogues {
        let feats = dialogue_features(dialogue, &params.config.modality_dims);
        let rows: Vec<usize> = dialogue
            .utterances
            .iter()
            .map(|u| params.embedding_row(u.speaker_id))
            .collect();
        let fwd = forward_dialogue(params, &feats, &rows, ablation)?;
        let logits = fwd.emotion_logits.data();
        let e = params.config.num_emotions;
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
        }
    }
    Ok((preds, labels))
}

pub fn validation_weighted_f1(
    params: &ModelParameters,
    corpus: &DialogueCorpus,
    ablation: Ablation,
) -> Result<f64> {
    let (preds, labels) = predict_corpus(params, corpus, ablation)?;
    let cm = ConfusionMatrix::from_predictions(&preds, &labels, params.config.num_emotions)?;
    weighted_f1(&cm)
}

/// Initializes a model with ablation surgery applied, returning the
/// parameters and the frozen-tensor names.
pub fn init_model(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, Vec<String>)> {
    let mut params = ModelParameters::init(model_cfg, cfg.seed)?;
    let frozen = params.apply_ablation(cfg.ablation);
    Ok((params, frozen))
}

pub fn train(
    train_corpus: &DialogueCorpus,
    val_corpus: &DialogueCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_corpus.dialogues.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (params, frozen) = init_model(model_cfg, cfg)?;
    let adam = AdamState::new(&params.tensors());
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        params: snapshot(&params),
        adam,
        epoch: 0,
        stale_epochs: 0,
        best_val_wf1: None,
        best_params: None,
        frozen,
        rng_scheme: "chacha8(seed,epoch,tag)".to_string(),
    };
    resume(ckpt, train_corpus, val_corpus)
}

/// Continues training from a checkpoint until the epoch budget or early
/// stop. Identical to an uninterrupted run with the same config.
pub fn resume(
    ckpt: Checkpoint,
    train_corpus: &DialogueCorpus,
    val_corpus: &DialogueCorpus,
) -> Result<TrainOutcome> {
    let cfg = ckpt.train_config.clone();
    let model_cfg = ckpt.model_config.clone();
    let mut params = ModelParameters::init(&model_cfg, cfg.seed)?;
    restore_into(&params, &ckpt.params)?;
    let frozen = params.apply_ablation(cfg.ablation);
    let mut adam = ckpt.adam.clone();
    let mut best_val = ckpt.best_val_wf1;
    let mut best_params = ckpt.best_params.clone();
    let mut stale = ckpt.stale_epochs;
    let mut curve = Vec::new();

    let named = params.named_tensors();
    let class_weights = if cfg.class_weights {
        Some(inverse_frequency_weights(train_corpus))
    } else {
        None
    };
    // lambda == 0 makes the aux branch a zero-gradient no-op, so it is
    // skipped outright; trajectories match the detached model bit for bit.
    let effective_ablation = if cfg.lambda == 0.0 && cfg.ablation == Ablation::Full {
        Ablation::NoAux
    } else {
        cfg.ablation
    };

    let n_dialogues = train_corpus.dialogues.len();
    let mut final_epoch = ckpt.epoch;
    for epoch in ckpt.epoch..cfg.epochs {
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
        final_epoch = epoch + 1;
        let mut order: Vec<usize> = (0..n_dialogues).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, 0));
        let mut oov_rng = stream_rng(cfg.seed, epoch as u64, 1);

        let mut epoch_loss = 0.0;
        let mut epoch_erc = 0.0;
        let mut epoch_spk = 0.0;
        let mut batches = 0usize;
        let mut cursor = 0usize;
        while cursor < order.len() {
            // Whole dialogues until the utterance budget is met.
            let mut batch = Vec::new();
            let mut utt = 0usize;
            while cursor < order.len() && utt < cfg.batch_size {
                let d = &train_corpus.dialogues[order[cursor]];
                utt += d.utterances.len();
                batch.push(d);
                cursor += 1;
            }
            let mut emo_logits = Vec::new();
            let mut spk_logits = Vec::new();
            let mut emo_targets = Vec::new();
            let mut spk_targets = Vec::new();
            for dialogue in &batch {
                let feats = dialogue_features(dialogue, &model_cfg.modality_dims);
                let rows: Vec<usize> = dialogue
                    .utterances
                    .iter()
                    .map(|u| {
                        if cfg.oov_rate > 0.0 && oov_rng.gen::<f64>() < cfg.oov_rate {
                            model_cfg.num_speakers
                        } else {
                            params.embedding_row(u.speaker_id)
                        }
                    })
                    .collect();
                let fwd = forward_dialogue(&params, &feats, &rows, effective_ablation)?;
                emo_logits.push(fwd.emotion_logits);
                if let Some(sl) = fwd.speaker_logits {
                    spk_logits.push(sl);
                }
                for u in &dialogue.utterances {
                    emo_targets.push(u.emotion);
                    spk_targets.push(u.speaker_id.min(model_cfg.num_speakers - 1));
                }
            }
            let emo = Tensor::concat_rows(&emo_logits)?;
            let spk = if spk_logits.is_empty() {
                None
            } else {
                Some(Tensor::concat_rows(&spk_logits)?)
            };
            let lb = total_loss(
                &emo,
                &emo_targets,
                spk.as_ref(),
                &spk_targets,
                cfg.lambda,
                class_weights.as_deref(),
            )?;
            let loss_val = lb.total.value();
            if loss_val.is_nan() {
                return Err(Error::Numeric(format!(
                    "NaN loss at epoch {epoch}, batch {batches}"
                )));
            }
            epoch_loss += loss_val;
            epoch_erc += lb.l_erc.value();
            epoch_spk += lb.l_spk.value();
            batches += 1;
            lb.total.backward()?;
            adam_step(&named, &frozen, &mut adam, &cfg)?;
            params.zero_grad();
        }
        let val_wf1 = if val_corpus.dialogues.is_empty() {
            None
        } else {
            Some(validation_weighted_f1(&params, val_corpus, effective_ablation)?)
        };
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / batches.max(1) as f64,
            l_erc: epoch_erc / batches.max(1) as f64,
            l_spk: epoch_spk / batches.max(1) as f64,
            val_weighted_f1: val_wf1,
        });
        let improved = match (val_wf1, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            // No validation split: keep the newest snapshot.
            (None, _) => true,
        };
        if improved {
            best_val = val_wf1;
            best_params = Some(snapshot(&params));
            stale = 0;
        } else {
            stale += 1;
        }
    }

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        model_config: model_cfg,
        train_config: cfg,
        params: snapshot(&params),
        adam,
        epoch: final_epoch,
        stale_epochs: stale,
        best_val_wf1: best_val,
        best_params,
        frozen: frozen.clone(),
        rng_scheme: "chacha8(seed,epoch,tag)".to_string(),
    };
    Ok(TrainOutcome { checkpoint, curve })
}

#[cfg(test)]
mod tests {
    use super::train as train_fn;
    use super::*;
    use crate::data::{generate_corpus, split_corpus, GeneratorConfig};

    fn tiny_setup() -> (DialogueCorpus, DialogueCorpus, ModelConfig) {
        let gcfg = GeneratorConfig {
            num_speakers: 4,
            num_emotions: 3,
            d_audio: 6,
            d_visual: 6,
            dialogues: 40,
            utterances_per_dialogue: 6,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let (corpus, _) = generate_corpus(&gcfg).unwrap();
        let (train, val, _) = split_corpus(&corpus, (0.7, 0.15, 0.15), 1).unwrap();
        let mcfg = ModelConfig {
            num_speakers: 4,
            num_emotions: 3,
            modality_dims: vec![6, 6],
            d_spk: 6,
            d_h: 10,
            context_window: 3,
        };
        (train, val, mcfg)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            patience: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let t = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        let named = vec![("t".to_string(), t.clone())];
        let mut state = AdamState::new(&[t.clone()]);
        adam_step(&named, &[], &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(t.data(), vec![1.0, -1.0]);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let t = Tensor::param(vec![1], vec![1.0]).unwrap();
        let named = vec![("t".to_string(), t.clone())];
        let mut state = AdamState::new(&[t.clone()]);
        let loss = t.mul(&t).unwrap().sum();
        loss.backward().unwrap();
        adam_step(&named, &[], &mut state, &TrainConfig::default()).unwrap();
        let v = t.get(0);
        assert!(v < 1.0 && v * v < 1.0);
    }

    #[test]
    fn adam_constant_gradient_limit() {
        let cfg = TrainConfig::default();
        let t = Tensor::param(vec![1], vec![0.0]).unwrap();
        let named = vec![("t".to_string(), t.clone())];
        let mut state = AdamState::new(&[t.clone()]);
        let mut prev = 0.0;
        let mut step_size = 0.0;
        for _ in 0..500 {
            t.zero_grad();
            // d/dt of 3t is the constant 3.
            t.scale(3.0).sum().backward().unwrap();
            adam_step(&named, &[], &mut state, &cfg).unwrap();
            let v = t.get(0);
            step_size = (v - prev).abs();
            prev = v;
        }
        // Constant gradient drives the update magnitude to ~learning_rate.
        assert!((step_size - cfg.learning_rate).abs() < 0.05 * cfg.learning_rate);
    }

    #[test]
    fn adam_nan_gradient_names_parameter() {
        let t = Tensor::param(vec![1], vec![1.0]).unwrap();
        let named = vec![("w_broken".to_string(), t.clone())];
        let mut state = AdamState::new(&[t.clone()]);
        let loss = t.scale(f64::NAN).sum();
        loss.backward().unwrap();
        let err = adam_step(&named, &[], &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w_broken"));
    }

    #[test]
    fn init_model_deterministic_and_film_identity() {
        let (_, _, mcfg) = tiny_setup();
        let cfg = quick_cfg();
        let (a, _) = init_model(&mcfg, &cfg).unwrap();
        let (b, _) = init_model(&mcfg, &cfg).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.scalar_count(), mcfg.param_census());
        for mp in &a.modalities {
            assert!(mp.w_gamma.data().iter().all(|&v| v == 0.0));
            assert!(mp.b_gamma.data().iter().all(|&v| v == 1.0));
            assert!(mp.b_beta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_checkpoint() {
        let (train, val, mcfg) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let out = train_fn(&train, &val, &mcfg, &cfg);
        let out = out.unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.checkpoint.epoch, 0);
        let (init, _) = init_model(&mcfg, &cfg).unwrap();
        for (arr, (_, t)) in out.checkpoint.params.iter().zip(init.named_tensors()) {
            assert_eq!(arr.data, t.data());
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (train, val, mcfg) = tiny_setup();
        let cfg = quick_cfg();
        let a = train_fn(&train, &val, &mcfg, &cfg).unwrap();
        let b = train_fn(&train, &val, &mcfg, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.adam, b.checkpoint.adam);
    }

    #[test]
    fn resumption_equals_unsplit_run() {
        let (train, val, mcfg) = tiny_setup();
        let full_cfg = TrainConfig {
            epochs: 5,
            patience: 0,
            ..quick_cfg()
        };
        let full = train_fn(&train, &val, &mcfg, &full_cfg).unwrap();

        let part_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let part = train_fn(&train, &val, &mcfg, &part_cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        part.checkpoint.save(&path).unwrap();
        let mut loaded = Checkpoint::load(&path).unwrap();
        loaded.train_config.epochs = 5;
        let rest = resume(loaded, &train, &val).unwrap();
        assert_eq!(full.checkpoint.params, rest.checkpoint.params);
        assert_eq!(full.checkpoint.adam, rest.checkpoint.adam);
        assert_eq!(full.checkpoint.best_val_wf1, rest.checkpoint.best_val_wf1);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let (train, val, mcfg) = tiny_setup();
        let out = train_fn(&train, &val, &mcfg, &quick_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(out.checkpoint, loaded);
        // Truncate 10 bytes: clean load error.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
        // Version mismatch.
        let mut bad = out.checkpoint.clone();
        bad.version = "mlsan-ckpt-v0".into();
        bad.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn lambda_zero_matches_no_aux_exactly() {
        let (train, val, mcfg) = tiny_setup();
        let zero = TrainConfig {
            lambda: 0.0,
            ..quick_cfg()
        };
        let no_aux = TrainConfig {
            ablation: Ablation::NoAux,
            lambda: 0.5,
            ..quick_cfg()
        };
        let a = train_fn(&train, &val, &mcfg, &zero).unwrap();
        let b = train_fn(&train, &val, &mcfg, &no_aux).unwrap();
        for (x, y) in a.checkpoint.params.iter().zip(&b.checkpoint.params) {
            assert_eq!(x.data, y.data, "{}", x.name);
        }
        let av: Vec<_> = a.curve.iter().map(|r| r.val_weighted_f1).collect();
        let bv: Vec<_> = b.curve.iter().map(|r| r.val_weighted_f1).collect();
        assert_eq!(av, bv);
    }

    #[test]
    fn gradient_flow_sanity_at_step_one() {
        let (train, _, mcfg) = tiny_setup();
        let cfg = quick_cfg();
        let (params, _) = init_model(&mcfg, &cfg).unwrap();
        let dialogue = &train.dialogues[0];
        let feats = dialogue_features(dialogue, &mcfg.modality_dims);
        let rows: Vec<usize> = dialogue
            .utterances
            .iter()
            .map(|u| params.embedding_row(u.speaker_id))
            .collect();
        let emotions: Vec<usize> = dialogue.utterances.iter().map(|u| u.emotion).collect();
        let speakers: Vec<usize> = dialogue.utterances.iter().map(|u| u.speaker_id).collect();

        let fwd = forward_dialogue(&params, &feats, &rows, Ablation::Full).unwrap();
        let lb = total_loss(
            &fwd.emotion_logits,
            &emotions,
            fwd.speaker_logits.as_ref(),
            &speakers,
            0.5,
            None,
        )
        .unwrap();
        lb.total.backward().unwrap();
        let spk_grad = params.w_speaker.grad().unwrap();
        assert!(spk_grad.iter().any(|&g| g != 0.0));
        let film_grad = params.modalities[0].w_gamma.grad().unwrap();
        assert!(film_grad.iter().any(|&g| g != 0.0));

        // lambda = 0 with the head attached: FiLM grads bit-equal the
        // detached model's, speaker-head grads exactly zero.
        params.zero_grad();
        let fwd0 = forward_dialogue(&params, &feats, &rows, Ablation::Full).unwrap();
        let lb0 = total_loss(
            &fwd0.emotion_logits,
            &emotions,
            fwd0.speaker_logits.as_ref(),
            &speakers,
            0.0,
            None,
        )
        .unwrap();
        lb0.total.backward().unwrap();
        let film_attached = params.modalities[0].w_gamma.grad().unwrap();
        let spk0 = params.w_speaker.grad().unwrap();
        assert!(spk0.iter().all(|&g| g == 0.0));

        params.zero_grad();
        let fwd_det = forward_dialogue(&params, &feats, &rows, Ablation::NoAux).unwrap();
        let lb_det = total_loss(&fwd_det.emotion_logits, &emotions, None, &[], 0.0, None).unwrap();
        lb_det.total.backward().unwrap();
        let film_detached = params.modalities[0].w_gamma.grad().unwrap();
        assert_eq!(film_attached, film_detached);
    }

    #[test]
    fn ablation_effective_parameter_census() {
        let (_, _, mcfg) = tiny_setup();
        let total = mcfg.param_census();
        let counts: Vec<(Ablation, usize)> = Ablation::ALL
            .iter()
            .map(|&ab| {
                let cfg = TrainConfig {
                    ablation: ab,
                    ..quick_cfg()
                };
                let (params, frozen) = init_model(&mcfg, &cfg).unwrap();
                let frozen_count: usize = params
                    .named_tensors()
                    .iter()
                    .filter(|(n, _)| frozen.contains(n))
                    .map(|(_, t)| t.len())
                    .sum();
                (ab, total - frozen_count)
            })
            .collect();
        let full = counts[0].1;
        assert_eq!(counts[0].0, Ablation::Full);
        assert!(counts[1].1 < full && counts[2].1 < full);
        assert_eq!(counts[1].1, full - mcfg.film_census());
        assert_eq!(counts[2].1, full - mcfg.gate_census());
        assert_eq!(counts[3].1, full - mcfg.speaker_head_census());
    }
}
