//! Synthetic speaker-heterogeneous dialogue corpora with a known Bayes
//! oracle, plus CSV ingestion for externally extracted features.
//!
//! Each speaker carries a per-modality affine distortion (scale, shift)
//! and a reliability knob: with probability 1 - r the modality emits pure
//! noise instead of signal. The distortion is affine so FiLM calibration
//! can provably invert it, and the reliability knob gives the speaker
//! gate a ground truth to recover.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    /// Per-modality multiplicative distortion, strictly positive.
    pub scale: Vec<Vec<f64>>,
    /// Per-modality additive distortion.
    pub shift: Vec<Vec<f64>>,
    /// Per-modality probability the emitted feature carries signal.
    pub reliability: Vec<f64>,
    pub style: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker_id: usize,
    pub emotion: usize,
    /// One feature vector per modality.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: usize,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueCorpus {
    pub dialogues: Vec<Dialogue>,
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub modality_names: Vec<String>,
    pub modality_dims: Vec<usize>,
    /// True only for corpora produced by `generate_corpus`; the Bayes
    /// oracle refuses anything else.
    pub synthetic: bool,
}

impl DialogueCorpus {
    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.utterances.len()).sum()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_emotions];
        for d in &self.dialogues {
            for u in &d.utterances {
                h[u.emotion] += 1;
            }
        }
        h
    }

    pub fn majority_class_fraction(&self) -> f64 {
        let h = self.label_histogram();
        let total: usize = h.iter().sum();
        if total == 0 {
            return 0.0;
        }
        *h.iter().max().unwrap() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub dialogues: usize,
    pub utterances_per_dialogue: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Geometric-decay class prior (ratio 0.6) instead of uniform.
    pub long_tail: bool,
    /// Probability that an utterance repeats the previous utterance's
    /// emotion; otherwise the label is drawn from the class prior. Makes
    /// dialogue context informative.
    pub emotion_stickiness: f64,
    /// Explicit class prior; overrides `long_tail` when set.
    pub class_prior: Option<Vec<f64>>,
    /// Disables all speaker distortions (scale 1, shift 0, reliability 1).
    pub homogeneous: bool,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
    pub reliability_range: (f64, f64),
    /// Standard deviation of the noise that replaces an unreliable
    /// modality.
    pub corruption_sigma: f64,
    /// Standard deviation of per-speaker, per-emotion prototype offsets:
    /// each speaker expresses each emotion slightly differently, in a way
    /// no per-speaker affine correction alone can undo.
    pub prototype_jitter: f64,
    /// Force every speaker's audio reliability to this value.
    pub audio_reliability: Option<f64>,
    /// Force every speaker's visual reliability to this value.
    pub visual_reliability: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_speakers: 6,
            num_emotions: 4,
            d_audio: 12,
            d_visual: 12,
            dialogues: 300,
            utterances_per_dialogue: 10,
            noise_sigma: 1.5,
            seed: 42,
            long_tail: false,
            emotion_stickiness: 0.6,
            class_prior: None,
            homogeneous: false,
            scale_range: (0.4, 1.6),
            shift_range: (-1.5, 1.5),
            reliability_range: (0.3, 1.0),
            corruption_sigma: 1.0,
            prototype_jitter: 0.0,
            audio_reliability: None,
            visual_reliability: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0
            || self.num_emotions == 0
            || self.d_audio == 0
            || self.d_visual == 0
            || self.dialogues == 0
            || self.utterances_per_dialogue == 0
        {
            return Err(Error::Config("all generator counts must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Config("scale_range must be positive and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.emotion_stickiness) {
            return Err(Error::Config("emotion_stickiness must be in [0,1)".into()));
        }
        if self.corruption_sigma <= 0.0 {
            return Err(Error::Config("corruption_sigma must be positive".into()));
        }
        if self.prototype_jitter < 0.0 {
            return Err(Error::Config("prototype_jitter must be >= 0".into()));
        }
        for r in [
            self.reliability_range.0,
            self.reliability_range.1,
            self.audio_reliability.unwrap_or(1.0),
            self.visual_reliability.unwrap_or(1.0),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("reliability {r} outside [0,1]")));
            }
        }
        if let Some(p) = &self.class_prior {
            if p.len() != self.num_emotions
                || p.iter().any(|&x| x < 0.0)
                || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(
                    "class_prior must have one nonnegative entry per emotion and sum to 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        vec![self.d_audio, self.d_visual]
    }

    pub fn class_prior_vec(&self) -> Vec<f64> {
        if let Some(p) = &self.class_prior {
            return p.clone();
        }
        if self.long_tail {
            let raw: Vec<f64> = (0..self.num_emotions).map(|k| 0.6f64.powi(k as i32)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| x / z).collect()
        } else {
            vec![1.0 / self.num_emotions as f64; self.num_emotions]
        }
    }
}

/// Generator internals needed by the Bayes oracle: the true emotion
/// prototypes and the speaker profiles, alongside the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArtifacts {
    pub config: GeneratorConfig,
    pub profiles: Vec<SpeakerProfile>,
    /// prototypes[emotion][modality] is a d_m-vector.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// speaker_offsets[speaker][emotion][modality] is a d_m-vector added
    /// to the prototype for that speaker (all zero when homogeneous).
    pub speaker_offsets: Vec<Vec<Vec<Vec<f64>>>>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.len() - 1
}

/// Deterministically generates a speaker-heterogeneous corpus. Each
/// utterance's clean feature is its emotion prototype plus Gaussian
/// noise, then distorted by the speaker's affine bias; with probability
/// 1 - r_m the whole modality is replaced by standard-normal noise.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<(DialogueCorpus, GeneratorArtifacts)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = config.modality_dims();
    let prior = config.class_prior_vec();

    let prototypes: Vec<Vec<Vec<f64>>> = (0..config.num_emotions)
        .map(|_| {
            dims.iter()
                .map(|&d| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        })
        .collect();

    let mut profiles = Vec::new();
    for id in 0..config.num_speakers {
        let (scale, shift, reliability) = if config.homogeneous {
            (
                dims.iter().map(|&d| vec![1.0; d]).collect::<Vec<_>>(),
                dims.iter().map(|&d| vec![0.0; d]).collect::<Vec<_>>(),
                vec![1.0; dims.len()],
            )
        } else {
            let scale: Vec<Vec<f64>> = dims
                .iter()
                .map(|&d| {
                    (0..d)
                        .map(|_| rng.gen_range(config.scale_range.0..=config.scale_range.1))
                        .collect()
                })
                .collect();
            let shift: Vec<Vec<f64>> = dims
                .iter()
                .map(|&d| {
                    (0..d)
                        .map(|_| rng.gen_range(config.shift_range.0..=config.shift_range.1))
                        .collect()
                })
                .collect();
            let mut reliability: Vec<f64> = (0..dims.len())
                .map(|_| {
                    rng.gen_range(config.reliability_range.0..=config.reliability_range.1)
                })
                .collect();
            if let Some(r) = config.audio_reliability {
                reliability[0] = r;
            }
            if let Some(r) = config.visual_reliability {
                reliability[1] = r;
            }
            (scale, shift, reliability)
        };
        let style = if reliability[0] > reliability[1] + 0.1 {
            "audio-expressive"
        } else if reliability[1] > reliability[0] + 0.1 {
            "visual-expressive"
        } else {
            "balanced"
        };
        profiles.push(SpeakerProfile {
            id,
            scale,
            shift,
            reliability,
            style: style.to_string(),
        });
    }

    let jitter = if config.homogeneous { 0.0 } else { config.prototype_jitter };
    let speaker_offsets: Vec<Vec<Vec<Vec<f64>>>> = (0..config.num_speakers)
        .map(|_| {
            (0..config.num_emotions)
                .map(|_| {
                    dims.iter()
                        .map(|&d| {
                            (0..d)
                                .map(|_| {
                                    if jitter == 0.0 {
                                        0.0
                                    } else {
                                        jitter * rng.sample::<f64, _>(StandardNormal)
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut dialogues = Vec::new();
    for did in 0..config.dialogues {
        // Two-party dialogues: sample a speaker pair per dialogue.
        let mut pool: Vec<usize> = (0..config.num_speakers).collect();
        pool.shuffle(&mut rng);
        let pool = &pool[..2.min(config.num_speakers)];
        let mut utterances = Vec::new();
        let mut prev_emotion: Option<usize> = None;
        for _ in 0..config.utterances_per_dialogue {
            let speaker_id = pool[rng.gen_range(0..pool.len())];
            let emotion = match prev_emotion {
                Some(p) if rng.gen::<f64>() < config.emotion_stickiness => p,
                _ => sample_categorical(&mut rng, &prior),
            };
            prev_emotion = Some(emotion);
            let profile = &profiles[speaker_id];
            let mut features = Vec::new();
            for (m, &d) in dims.iter().enumerate() {
                let carries_signal = rng.gen::<f64>() < profile.reliability[m];
                let feat: Vec<f64> = if carries_signal {
                    (0..d)
                        .map(|j| {
                            let clean = prototypes[emotion][m][j]
                                + speaker_offsets[speaker_id][emotion][m][j]
                                + config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                            profile.scale[m][j] * clean + profile.shift[m][j]
                        })
                        .collect()
                } else {
                    (0..d)
                        .map(|_| config.corruption_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                features.push(feat);
            }
            utterances.push(Utterance {
                speaker_id,
                emotion,
                features,
            });
        }
        dialogues.push(Dialogue {
            id: did,
            utterances,
        });
    }

    let corpus = DialogueCorpus {
        dialogues,
        num_speakers: config.num_speakers,
        num_emotions: config.num_emotions,
        modality_names: vec!["audio".to_string(), "visual".to_string()],
        modality_dims: dims,
        synthetic: true,
    };
    let artifacts = GeneratorArtifacts {
        config: config.clone(),
        profiles,
        prototypes,
        speaker_offsets,
    };
    Ok((corpus, artifacts))
}

fn log_normal_diag(x: &[f64], mean: impl Fn(usize) -> f64, sd: impl Fn(usize) -> f64) -> f64 {
    let mut lp = 0.0;
    for (j, &v) in x.iter().enumerate() {
        let s = sd(j);
        let z = (v - mean(j)) / s;
        lp += -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-likelihood of one utterance's features given an emotion, under
/// the reliability mixture of the generative model.
fn emission_log_likelihood(
    u: &Utterance,
    emotion: usize,
    artifacts: &GeneratorArtifacts,
    sigma: f64,
) -> f64 {
    let profile = &artifacts.profiles[u.speaker_id];
    let mut lp = 0.0;
    for (m, feat) in u.features.iter().enumerate() {
        let r = profile.reliability[m];
        let proto = &artifacts.prototypes[emotion][m];
        let offset = &artifacts.speaker_offsets[u.speaker_id][emotion][m];
        let signal = if r > 0.0 {
            r.ln()
                + log_normal_diag(
                    feat,
                    |j| profile.scale[m][j] * (proto[j] + offset[j]) + profile.shift[m][j],
                    |j| (profile.scale[m][j] * sigma).abs().max(1e-12),
                )
        } else {
            f64::NEG_INFINITY
        };
        let noise = if r < 1.0 {
            (1.0 - r).ln() + log_normal_diag(feat, |_| 0.0, |_| artifacts.config.corruption_sigma)
        } else {
            f64::NEG_INFINITY
        };
        lp += log_add_exp(signal, noise);
    }
    lp
}

/// Exact posterior classification under the true generative model,
/// including the emotion Markov chain (forward-backward smoothing per
/// dialogue). Returns accuracy: the ceiling no trained model may exceed
/// beyond noise.
pub fn bayes_oracle(corpus: &DialogueCorpus, artifacts: &GeneratorArtifacts) -> Result<f64> {
    if !corpus.synthetic {
        return Err(Error::Contract(
            "bayes_oracle is only valid for synthetic corpora".into(),
        ));
    }
    let prior = artifacts.config.class_prior_vec();
    let sigma = artifacts.config.noise_sigma.max(1e-12);
    let stick = artifacts.config.emotion_stickiness;
    let ne = prior.len();
    let log_trans: Vec<Vec<f64>> = (0..ne)
        .map(|e| {
            (0..ne)
                .map(|e2| {
                    let stay = if e == e2 { stick } else { 0.0 };
                    (stay + (1.0 - stick) * prior[e2]).max(1e-300).ln()
                })
                .collect()
        })
        .collect();

    let mut correct = 0usize;
    let mut total = 0usize;
    for d in &corpus.dialogues {
        let n = d.utterances.len();
        if n == 0 {
            continue;
        }
        let emis: Vec<Vec<f64>> = d
            .utterances
            .iter()
            .map(|u| {
                (0..ne)
                    .map(|e| emission_log_likelihood(u, e, artifacts, sigma))
                    .collect()
            })
            .collect();
        let mut alpha = vec![vec![f64::NEG_INFINITY; ne]; n];
        for e in 0..ne {
            alpha[0][e] = prior[e].max(1e-300).ln() + emis[0][e];
        }
        for t in 1..n {
            for e2 in 0..ne {
                let mut acc = f64::NEG_INFINITY;
                for e in 0..ne {
                    acc = log_add_exp(acc, alpha[t - 1][e] + log_trans[e][e2]);
                }
                alpha[t][e2] = acc + emis[t][e2];
            }
        }
        let mut beta = vec![vec![0.0; ne]; n];
        for t in (0..n - 1).rev() {
            for e in 0..ne {
                let mut acc = f64::NEG_INFINITY;
                for e2 in 0..ne {
                    acc = log_add_exp(acc, log_trans[e][e2] + emis[t + 1][e2] + beta[t + 1][e2]);
                }
                beta[t][e] = acc;
            }
        }
        for (t, u) in d.utterances.iter().enumerate() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for e in 0..ne {
                let lp = alpha[t][e] + beta[t][e];
                if lp > best.1 {
                    best = (e, lp);
                }
            }
            if best.0 == u.emotion {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Splits at dialogue granularity. Retries the shuffle until every
/// speaker appears in train (at most 100 reseeds).
pub fn split_corpus(
    corpus: &DialogueCorpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DialogueCorpus, DialogueCorpus, DialogueCorpus)> {
    let (f0, f1, f2) = fractions;
    if f0 <= 0.0 || f1 < 0.0 || f2 < 0.0 || (f0 + f1 + f2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be nonnegative with positive train share and sum to 1, got {fractions:?}"
        )));
    }
    let n = corpus.dialogues.len();
    let n_train = (f0 * n as f64).round() as usize;
    let n_val = (f1 * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let speakers_in = |dialogues: &[&Dialogue]| -> BTreeSet<usize> {
        dialogues
            .iter()
            .flat_map(|d| d.utterances.iter().map(|u| u.speaker_id))
            .collect()
    };
    let all_speakers: BTreeSet<usize> = corpus
        .dialogues
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| u.speaker_id))
        .collect();

    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let train_refs: Vec<&Dialogue> = idx[..n_train].iter().map(|&i| &corpus.dialogues[i]).collect();
        if speakers_in(&train_refs) != all_speakers {
            continue;
        }
        let take = |range: &[usize]| DialogueCorpus {
            dialogues: range.iter().map(|&i| corpus.dialogues[i].clone()).collect(),
            num_speakers: corpus.num_speakers,
            num_emotions: corpus.num_emotions,
            modality_names: corpus.modality_names.clone(),
            modality_dims: corpus.modality_dims.clone(),
            synthetic: corpus.synthetic,
        };
        return Ok((
            take(&idx[..n_train]),
            take(&idx[n_train..n_train + n_val]),
            take(&idx[n_train + n_val..]),
        ));
    }
    Err(Error::Config(
        "could not produce a split with every speaker in train after 100 attempts".into(),
    ))
}

// ---- CSV serialization ----

fn feature_file_name(modality: &str) -> String {
    format!("{modality}.csv")
}

/// Writes one feature CSV per modality plus a labels CSV, with
/// full-precision decimal floats (shortest round-trip form).
pub fn write_corpus(corpus: &DialogueCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, name) in corpus.modality_names.iter().enumerate() {
        let d = corpus.modality_dims[m];
        let mut out = String::from("dialogue_id,utterance_idx,speaker_id");
        for j in 0..d {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for dia in &corpus.dialogues {
            for (ui, u) in dia.utterances.iter().enumerate() {
                let _ = write!(out, "{},{},{}", dia.id, ui, u.speaker_id);
                for v in &u.features[m] {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        let path = dir.join(feature_file_name(name));
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    let mut out = String::from("dialogue_id,utterance_idx,speaker_id,emotion\n");
    for dia in &corpus.dialogues {
        for (ui, u) in dia.utterances.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", dia.id, ui, u.speaker_id, u.emotion);
        }
    }
    let path = dir.join("labels.csv");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let manifest = CorpusManifest {
        num_speakers: corpus.num_speakers,
        num_emotions: corpus.num_emotions,
        modality_names: corpus.modality_names.clone(),
        modality_dims: corpus.modality_dims.clone(),
        synthetic: corpus.synthetic,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusManifest {
    num_speakers: usize,
    num_emotions: usize,
    modality_names: Vec<String>,
    modality_dims: Vec<usize>,
    synthetic: bool,
}

struct ParsedRow {
    dialogue_id: usize,
    utterance_idx: usize,
    speaker_id: usize,
    values: Vec<f64>,
}

fn parse_csv(path: &Path, value_cols: usize) -> Result<Vec<ParsedRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let expected_cols = 3 + value_cols;
    let header_cols = header.split(',').count();
    if header_cols != expected_cols {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected {expected_cols} header columns, found {header_cols}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected_cols {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("ragged row: {} columns, expected {expected_cols}", cells.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("non-numeric {what} '{s}'"),
            })
        };
        let dialogue_id = parse_usize(cells[0], "dialogue_id")?;
        let utterance_idx = parse_usize(cells[1], "utterance_idx")?;
        let speaker_id = parse_usize(cells[2], "speaker_id")?;
        let mut values = Vec::with_capacity(value_cols);
        for c in &cells[3..] {
            values.push(c.parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("non-numeric cell '{c}'"),
            })?);
        }
        rows.push(ParsedRow {
            dialogue_id,
            utterance_idx,
            speaker_id,
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "no utterance rows (empty corpus)".into(),
        });
    }
    Ok(rows)
}

/// Parses per-modality feature CSVs plus a labels CSV into a corpus.
/// When `num_speakers`/`num_emotions` registries are given, out-of-range
/// IDs and labels are parse errors naming the offending line.
pub fn read_feature_csv(
    feature_paths: &[(String, PathBuf, usize)],
    labels_path: &Path,
    num_speakers: Option<usize>,
    num_emotions: Option<usize>,
) -> Result<DialogueCorpus> {
    let labels = parse_csv(labels_path, 1)?;
    let mut features = Vec::new();
    for (_, path, dim) in feature_paths {
        let rows = parse_csv(path, *dim)?;
        if rows.len() != labels.len() {
            return Err(Error::Parse {
                path: path.clone(),
                line: rows.len() + 1,
                msg: format!("{} feature rows but {} label rows", rows.len(), labels.len()),
            });
        }
        features.push(rows);
    }
    // Validate label range and key alignment, then assemble dialogues.
    let e_max = num_emotions.unwrap_or_else(|| {
        labels.iter().map(|r| r.values[0] as usize).max().unwrap_or(0) + 1
    });
    let s_max =
        num_speakers.unwrap_or_else(|| labels.iter().map(|r| r.speaker_id).max().unwrap_or(0) + 1);

    let mut dialogues: Vec<Dialogue> = Vec::new();
    for (i, lab) in labels.iter().enumerate() {
        let emotion = lab.values[0];
        if emotion.fract() != 0.0 || emotion < 0.0 || (emotion as usize) >= e_max {
            return Err(Error::Parse {
                path: labels_path.into(),
                line: i + 2,
                msg: format!("emotion label {emotion} outside 0..{e_max}"),
            });
        }
        if lab.speaker_id >= s_max {
            return Err(Error::Parse {
                path: labels_path.into(),
                line: i + 2,
                msg: format!(
                    "unknown speaker id {} without registry entry (num_speakers {s_max})",
                    lab.speaker_id
                ),
            });
        }
        let mut feats = Vec::new();
        for (m, rows) in features.iter().enumerate() {
            let row = &rows[i];
            if (row.dialogue_id, row.utterance_idx, row.speaker_id)
                != (lab.dialogue_id, lab.utterance_idx, lab.speaker_id)
            {
                return Err(Error::Parse {
                    path: feature_paths[m].1.clone(),
                    line: i + 2,
                    msg: "feature row keys do not match labels row".into(),
                });
            }
            feats.push(row.values.clone());
        }
        let utterance = Utterance {
            speaker_id: lab.speaker_id,
            emotion: emotion as usize,
            features: feats,
        };
        match dialogues.last_mut() {
            Some(d) if d.id == lab.dialogue_id => {
                if lab.utterance_idx != d.utterances.len() {
                    return Err(Error::Parse {
                        path: labels_path.into(),
                        line: i + 2,
                        msg: format!(
                            "utterance_idx {} out of order (expected {})",
                            lab.utterance_idx,
                            d.utterances.len()
                        ),
                    });
                }
                d.utterances.push(utterance);
            }
            _ => {
                if lab.utterance_idx != 0 {
                    return Err(Error::Parse {
                        path: labels_path.into(),
                        line: i + 2,
                        msg: "dialogue must start at utterance_idx 0".into(),
                    });
                }
                dialogues.push(Dialogue {
                    id: lab.dialogue_id,
                    utterances: vec![utterance],
                });
            }
        }
    }
    Ok(DialogueCorpus {
        dialogues,
        num_speakers: s_max,
        num_emotions: e_max,
        modality_names: feature_paths.iter().map(|(n, _, _)| n.clone()).collect(),
        modality_dims: feature_paths.iter().map(|(_, _, d)| *d).collect(),
        synthetic: false,
    })
}

/// Reads a corpus directory written by `write_corpus` (manifest + CSVs).
pub fn read_corpus(dir: &Path) -> Result<DialogueCorpus> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let feature_paths: Vec<(String, PathBuf, usize)> = manifest
        .modality_names
        .iter()
        .zip(&manifest.modality_dims)
        .map(|(n, &d)| (n.clone(), dir.join(feature_file_name(n)), d))
        .collect();
    let mut corpus = read_feature_csv(
        &feature_paths,
        &dir.join("labels.csv"),
        Some(manifest.num_speakers),
        Some(manifest.num_emotions),
    )?;
    corpus.synthetic = manifest.synthetic;
    Ok(corpus)
}
