//! The speaker-adaptive layer stack: speaker embeddings, FiLM input
//! calibration, causal context encoding, identity-gated fusion,
//! classification heads, and the joint emotion/speaker objective.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which mechanism, if any, is surgically removed before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoFilm,
    NoGate,
    NoAux,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoFilm,
        Ablation::NoGate,
        Ablation::NoAux,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFilm => "no_film",
            Ablation::NoGate => "no_gate",
            Ablation::NoAux => "no_aux",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_film" => Ok(Ablation::NoFilm),
            "no_gate" => Ok(Ablation::NoGate),
            "no_aux" => Ok(Ablation::NoAux),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected full, no_film, no_gate, no_aux)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_speakers: usize,
    pub num_emotions: usize,
    /// Feature width per calibrated modality (audio, visual by default).
    pub modality_dims: Vec<usize>,
    pub d_spk: usize,
    pub d_h: usize,
    pub context_window: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0
            || self.num_emotions == 0
            || self.modality_dims.is_empty()
            || self.modality_dims.iter().any(|&d| d == 0)
            || self.d_spk == 0
            || self.d_h == 0
        {
            return Err(Error::Config(format!("degenerate model config: {self:?}")));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.modality_dims.len() * self.d_h
    }

    /// Total scalar parameter count; a pure function of the configuration.
    pub fn param_census(&self) -> usize {
        let mut n = (self.num_speakers + 1) * self.d_spk;
        for &d in &self.modality_dims {
            n += 2 * (self.d_spk * d + d); // FiLM gamma + beta
            n += 2 * d * self.d_h + self.d_h; // context encoder
            n += self.d_spk * self.d_h + self.d_h; // gate
        }
        n += self.fused_dim() * self.num_emotions + self.num_emotions;
        n += self.fused_dim() * self.num_speakers + self.num_speakers;
        n
    }

    /// Scalar count of the FiLM blocks alone.
    pub fn film_census(&self) -> usize {
        self.modality_dims
            .iter()
            .map(|&d| 2 * (self.d_spk * d + d))
            .sum()
    }

    /// Scalar count of the gate blocks alone.
    pub fn gate_census(&self) -> usize {
        self.modality_dims.len() * (self.d_spk * self.d_h + self.d_h)
    }

    /// Scalar count of the auxiliary speaker head.
    pub fn speaker_head_census(&self) -> usize {
        self.fused_dim() * self.num_speakers + self.num_speakers
    }
}

/// Per-modality learned arrays: FiLM projections, context encoder, gate.
pub struct ModalityParams {
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
}

/// Every learned array in the model. The last embedding row is reserved
/// for out-of-vocabulary speakers.
pub struct ModelParameters {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub modalities: Vec<ModalityParams>,
    pub w_emotion: Tensor,
    pub b_emotion: Tensor,
    pub w_speaker: Tensor,
    pub b_speaker: Tensor,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(vec![rows, cols], data).expect("shape/data agree")
}

impl ModelParameters {
    /// Deterministic initialization: FiLM starts as the exact identity,
    /// gate bias at +2.0 (near pass-through), other weights uniform in
    /// +/- 1/sqrt(fan_in), biases zero. The OOV embedding row is set to
    /// the mean of the real rows.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.num_speakers;
        let d_spk = config.d_spk;
        let mut emb = uniform_fan_in(&mut rng, s + 1, d_spk, d_spk).data();
        for j in 0..d_spk {
            let mean: f64 = (0..s).map(|i| emb[i * d_spk + j]).sum::<f64>() / s as f64;
            emb[s * d_spk + j] = mean;
        }
        let embedding = Tensor::param(vec![s + 1, d_spk], emb)?;

        let mut modalities = Vec::new();
        for &d in &config.modality_dims {
            modalities.push(ModalityParams {
                w_gamma: Tensor::param(vec![d_spk, d], vec![0.0; d_spk * d])?,
                b_gamma: Tensor::param(vec![1, d], vec![1.0; d])?,
                w_beta: Tensor::param(vec![d_spk, d], vec![0.0; d_spk * d])?,
                b_beta: Tensor::param(vec![1, d], vec![0.0; d])?,
                w_enc: uniform_fan_in(&mut rng, 2 * d, config.d_h, 2 * d),
                b_enc: Tensor::param(vec![1, config.d_h], vec![0.0; config.d_h])?,
                w_gate: uniform_fan_in(&mut rng, d_spk, config.d_h, d_spk),
                b_gate: Tensor::param(vec![1, config.d_h], vec![2.0; config.d_h])?,
            });
        }
        let fused = config.fused_dim();
        let w_emotion = uniform_fan_in(&mut rng, fused, config.num_emotions, fused);
        let b_emotion = Tensor::param(vec![1, config.num_emotions], vec![0.0; config.num_emotions])?;
        let w_speaker = uniform_fan_in(&mut rng, fused, s, fused);
        let b_speaker = Tensor::param(vec![1, s], vec![0.0; s])?;
        Ok(ModelParameters {
            config: config.clone(),
            embedding,
            modalities,
            w_emotion,
            b_emotion,
            w_speaker,
            b_speaker,
        })
    }

    /// Stable (name, tensor) listing; defines checkpoint and optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embedding".to_string(), self.embedding.clone())];
        for (m, mp) in self.modalities.iter().enumerate() {
            out.push((format!("m{m}.w_gamma"), mp.w_gamma.clone()));
            out.push((format!("m{m}.b_gamma"), mp.b_gamma.clone()));
            out.push((format!("m{m}.w_beta"), mp.w_beta.clone()));
            out.push((format!("m{m}.b_beta"), mp.b_beta.clone()));
            out.push((format!("m{m}.w_enc"), mp.w_enc.clone()));
            out.push((format!("m{m}.b_enc"), mp.b_enc.clone()));
            out.push((format!("m{m}.w_gate"), mp.w_gate.clone()));
            out.push((format!("m{m}.b_gate"), mp.b_gate.clone()));
        }
        out.push(("w_emotion".to_string(), self.w_emotion.clone()));
        out.push(("b_emotion".to_string(), self.b_emotion.clone()));
        out.push(("w_speaker".to_string(), self.w_speaker.clone()));
        out.push(("b_speaker".to_string(), self.b_speaker.clone()));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        for t in self.tensors() {
            t.zero_grad();
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Applies ablation surgery in place and returns the names of the
    /// frozen tensors. `no_film` pins FiLM to the identity, `no_gate` and
    /// `no_aux` freeze their blocks (the forward pass bypasses them).
    pub fn apply_ablation(&mut self, ablation: Ablation) -> Vec<String> {
        let mut frozen = Vec::new();
        match ablation {
            Ablation::Full => {}
            Ablation::NoFilm => {
                for (m, mp) in self.modalities.iter().enumerate() {
                    mp.w_gamma.set_data(&vec![0.0; mp.w_gamma.len()]);
                    mp.b_gamma.set_data(&vec![1.0; mp.b_gamma.len()]);
                    mp.w_beta.set_data(&vec![0.0; mp.w_beta.len()]);
                    mp.b_beta.set_data(&vec![0.0; mp.b_beta.len()]);
                    for n in ["w_gamma", "b_gamma", "w_beta", "b_beta"] {
                        frozen.push(format!("m{m}.{n}"));
                    }
                }
            }
            Ablation::NoGate => {
                for m in 0..self.modalities.len() {
                    frozen.push(format!("m{m}.w_gate"));
                    frozen.push(format!("m{m}.b_gate"));
                }
            }
            Ablation::NoAux => {
                frozen.push("w_speaker".to_string());
                frozen.push("b_speaker".to_string());
            }
        }
        frozen
    }

    /// Embedding row index for a speaker: its own row when in vocabulary,
    /// the reserved last row otherwise.
    pub fn embedding_row(&self, speaker_id: usize) -> usize {
        if speaker_id < self.config.num_speakers {
            speaker_id
        } else {
            self.config.num_speakers
        }
    }
}

// ---- single-utterance layer operations ----

/// Looks up a speaker embedding as a 1 x d_spk tensor in the grad graph.
pub fn embed_speaker(params: &ModelParameters, speaker_id: usize) -> Result<Tensor> {
    Tensor::embed_rows(&params.embedding, &[params.embedding_row(speaker_id)])
}

/// FiLM calibration (gamma = W_g e + b_g, beta = W_b e + b_b, out =
/// gamma (.) x + beta). Returns (calibrated, gamma, beta).
pub fn film_modulate(
    x: &Tensor,
    e: &Tensor,
    mp: &ModalityParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let gamma = e.matmul(&mp.w_gamma)?.add(&mp.b_gamma)?;
    let beta = e.matmul(&mp.w_beta)?.add(&mp.b_beta)?;
    let out = gamma.mul(x)?.add(&beta)?;
    Ok((out, gamma, beta))
}

/// Causal context encoding for one position: concatenates the calibrated
/// feature at `position` with the mean of the preceding `window`
/// calibrated features (zero vector when there are none), then applies
/// one affine map and ReLU.
pub fn context_encode(
    calibrated: &[Tensor],
    position: usize,
    window: usize,
    mp: &ModalityParams,
) -> Result<Tensor> {
    if position >= calibrated.len() {
        return Err(Error::Index(format!(
            "position {position} out of range for dialogue of length {}",
            calibrated.len()
        )));
    }
    let d = calibrated[position].shape()[1];
    let start = position.saturating_sub(window);
    let ctx = if window == 0 || position == 0 {
        Tensor::zeros(vec![1, d])
    } else {
        let prev = &calibrated[start..position];
        let mut acc = prev[0].clone();
        for p in &prev[1..] {
            acc = acc.add(p)?;
        }
        acc.scale(1.0 / prev.len() as f64)
    };
    let z = Tensor::concat_cols(&[calibrated[position].clone(), ctx])?;
    Ok(z.matmul(&mp.w_enc)?.add(&mp.b_enc)?.relu())
}

/// Identity gate (Eq-style sigmoid mask over the context feature).
/// Returns (gated, gate); every gate entry is strictly inside (0,1).
pub fn speaker_gate_modulate(
    h: &Tensor,
    e: &Tensor,
    mp: &ModalityParams,
) -> Result<(Tensor, Tensor)> {
    let gate = e.matmul(&mp.w_gate)?.add(&mp.b_gate)?.sigmoid();
    Ok((gate.mul(h)?, gate))
}

/// Concatenation fusion followed by the affine emotion head.
pub fn fuse_and_classify(gated: &[Tensor], params: &ModelParameters) -> Result<Tensor> {
    if gated.len() != params.config.modality_dims.len() {
        return Err(Error::Contract(format!(
            "expected {} gated modalities, got {}",
            params.config.modality_dims.len(),
            gated.len()
        )));
    }
    let fused = Tensor::concat_cols(gated)?;
    fused.matmul(&params.w_emotion)?.add(&params.b_emotion)
}

/// Auxiliary speaker classifier over the fused feature.
pub fn speaker_head(fused: &Tensor, params: &ModelParameters) -> Result<Tensor> {
    fused.matmul(&params.w_speaker)?.add(&params.b_speaker)
}

/// The total objective: l_erc + lambda * l_spk, composed in the graph.
pub struct LossBreakdown {
    pub l_erc: Tensor,
    pub l_spk: Tensor,
    pub lambda: f64,
    pub total: Tensor,
}

/// Builds the joint loss. When `speaker_logits` is None (aux branch
/// detached), l_spk is a constant zero and total aliases l_erc.
pub fn total_loss(
    emotion_logits: &Tensor,
    emotion_targets: &[usize],
    speaker_logits: Option<&Tensor>,
    speaker_targets: &[usize],
    lambda: f64,
    class_weights: Option<&[f64]>,
) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let l_erc = emotion_logits.softmax_cross_entropy(emotion_targets, class_weights)?;
    match speaker_logits {
        Some(sl) => {
            let l_spk = sl.softmax_cross_entropy(speaker_targets, None)?;
            let total = l_erc.add(&l_spk.scale(lambda))?;
            Ok(LossBreakdown {
                l_erc,
                l_spk,
                lambda,
                total,
            })
        }
        None => Ok(LossBreakdown {
            l_erc: l_erc.clone(),
            l_spk: Tensor::scalar(0.0),
            lambda,
            total: l_erc,
        })
    }
}

// ---- batched dialogue forward ----

/// Forward outputs for one dialogue of n utterances.
pub struct DialogueForward {
    pub emotion_logits: Tensor,
    pub speaker_logits: Option<Tensor>,
    pub fused: Tensor,
    /// Per-modality n x d_h gate activations (all-ones under no_gate).
    pub gates: Vec<Tensor>,
    pub gammas: Vec<Tensor>,
    pub betas: Vec<Tensor>,
}

/// Lower-triangular causal averaging operator: row i averages rows
/// max(0, i-window)..i-1, row 0 is all zero.
fn context_operator(n: usize, window: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    if window > 0 {
        for i in 1..n {
            let start = i.saturating_sub(window);
            let w = 1.0 / (i - start) as f64;
            for j in start..i {
                data[i * n + j] = w;
            }
        }
    }
    Tensor::from_vec(vec![n, n], data).expect("square operator")
}

/// Runs the full stack over one dialogue. `features[m]` is the n x d_m
/// matrix for modality m; `embedding_rows` are pre-resolved table rows
/// (OOV replacement applied by the caller).
pub fn forward_dialogue(
    params: &ModelParameters,
    features: &[Tensor],
    embedding_rows: &[usize],
    ablation: Ablation,
) -> Result<DialogueForward> {
    let cfg = &params.config;
    if features.len() != cfg.modality_dims.len() {
        return Err(Error::Contract(format!(
            "expected {} modalities, got {}",
            cfg.modality_dims.len(),
            features.len()
        )));
    }
    let n = embedding_rows.len();
    for (m, f) in features.iter().enumerate() {
        if f.shape() != [n, cfg.modality_dims[m]] {
            return Err(Error::Dimension {
                op: "forward_dialogue",
                lhs: f.shape().to_vec(),
                rhs: vec![n, cfg.modality_dims[m]],
            });
        }
    }
    let e = Tensor::embed_rows(&params.embedding, embedding_rows)?;
    let ctx_op = context_operator(n, cfg.context_window);

    let mut gated_all = Vec::new();
    let mut gates = Vec::new();
    let mut gammas = Vec::new();
    let mut betas = Vec::new();
    for (m, mp) in params.modalities.iter().enumerate() {
        let x = &features[m];
        let d = cfg.modality_dims[m];
        let (xhat, gamma, beta) = if ablation == Ablation::NoFilm {
            let ones = Tensor::from_vec(vec![n, d], vec![1.0; n * d])?;
            (x.clone(), ones, Tensor::zeros(vec![n, d]))
        } else {
            let gamma = e.matmul(&mp.w_gamma)?.add(&mp.b_gamma)?;
            let beta = e.matmul(&mp.w_beta)?.add(&mp.b_beta)?;
            (gamma.mul(x)?.add(&beta)?, gamma, beta)
        };
        let ctx = ctx_op.matmul(&xhat)?;
        let z = Tensor::concat_cols(&[xhat, ctx])?;
        let h = z.matmul(&mp.w_enc)?.add(&mp.b_enc)?.relu();
        let (gated, gate) = if ablation == Ablation::NoGate {
            let ones = Tensor::from_vec(vec![n, cfg.d_h], vec![1.0; n * cfg.d_h])?;
            (h, ones)
        } else {
            let gate = e.matmul(&mp.w_gate)?.add(&mp.b_gate)?.sigmoid();
            (gate.mul(&h)?, gate)
        };
        gated_all.push(gated);
        gates.push(gate);
        gammas.push(gamma);
        betas.push(beta);
    }
    let fused = Tensor::concat_cols(&gated_all)?;
    let emotion_logits = fused.matmul(&params.w_emotion)?.add(&params.b_emotion)?;
    let speaker_logits = if ablation == Ablation::NoAux {
        None
    } else {
        Some(fused.matmul(&params.w_speaker)?.add(&params.b_speaker)?)
    };
    Ok(DialogueForward {
        emotion_logits,
        speaker_logits,
        fused,
        gates,
        gammas,
        betas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_speakers: 3,
            num_emotions: 4,
            modality_dims: vec![5, 6],
            d_spk: 4,
            d_h: 8,
            context_window: 2,
        }
    }

    #[test]
    fn init_deterministic() {
        let cfg = small_config();
        let a = ModelParameters::init(&cfg, 7).unwrap();
        let b = ModelParameters::init(&cfg, 7).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn census_matches_instantiation() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 0).unwrap();
        assert_eq!(p.scalar_count(), cfg.param_census());
    }

    #[test]
    fn film_init_is_identity() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 3).unwrap();
        let e = embed_speaker(&p, 1).unwrap();
        let x = Tensor::from_vec(vec![1, 5], vec![0.3, -1.7, 2.0, 0.0, 9.5]).unwrap();
        let (out, gamma, beta) = film_modulate(&x, &e, &p.modalities[0]).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(gamma.data(), vec![1.0; 5]);
        assert_eq!(beta.data(), vec![0.0; 5]);
    }

    #[test]
    fn film_forced_values() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 0).unwrap();
        let mp = &p.modalities[0];
        // Force gamma=[2,0.5,...], beta=[1,-1,...] via the biases.
        mp.b_gamma.set_data(&[2.0, 0.5, 1.0, 1.0, 1.0]);
        mp.b_beta.set_data(&[1.0, -1.0, 0.0, 0.0, 0.0]);
        let e = embed_speaker(&p, 0).unwrap();
        let x = Tensor::from_vec(vec![1, 5], vec![3.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        let (out, _, _) = film_modulate(&x, &e, mp).unwrap();
        assert_eq!(out.data()[0], 7.0);
        assert_eq!(out.data()[1], 1.0);
    }

    #[test]
    fn film_distinct_speakers_distinct_gamma() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 11).unwrap();
        let mp = &p.modalities[0];
        let mut w = vec![0.0; mp.w_gamma.len()];
        w[0] = 1.0;
        mp.w_gamma.set_data(&w);
        let e0 = embed_speaker(&p, 0).unwrap();
        let e1 = embed_speaker(&p, 1).unwrap();
        let x = Tensor::from_vec(vec![1, 5], vec![1.0; 5]).unwrap();
        let (_, g0, _) = film_modulate(&x, &e0, mp).unwrap();
        let (_, g1, _) = film_modulate(&x, &e1, mp).unwrap();
        assert_ne!(g0.data(), g1.data());
    }

    #[test]
    fn oov_speaker_maps_to_reserved_row() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 5).unwrap();
        let oov = embed_speaker(&p, cfg.num_speakers + 7).unwrap();
        let reserved = Tensor::embed_rows(&p.embedding, &[cfg.num_speakers]).unwrap();
        assert_eq!(oov.data(), reserved.data());
    }

    #[test]
    fn embedding_gradient_localized_to_row() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 5).unwrap();
        let e = embed_speaker(&p, 2).unwrap();
        e.mul(&e).unwrap().sum().backward().unwrap();
        let g = p.embedding.grad().unwrap();
        let d = cfg.d_spk;
        for row in 0..cfg.num_speakers + 1 {
            let nz = g[row * d..(row + 1) * d].iter().any(|&v| v != 0.0);
            assert_eq!(nz, row == 2, "row {row}");
        }
    }

    #[test]
    fn context_encode_empty_history_and_zero_window() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 1).unwrap();
        let mp = &p.modalities[0];
        let feats: Vec<Tensor> = (0..3)
            .map(|i| Tensor::from_vec(vec![1, 5], vec![i as f64 + 1.0; 5]).unwrap())
            .collect();
        // i=0: context half is zero, so result only depends on x_0.
        let h0 = context_encode(&feats, 0, 3, mp).unwrap();
        let h0_again = context_encode(&feats, 0, 0, mp).unwrap();
        assert_eq!(h0.data(), h0_again.data());
        // window 0 at any position: same as no history.
        let solo = vec![feats[2].clone()];
        let h2_k0 = context_encode(&feats, 2, 0, mp).unwrap();
        let h2_solo = context_encode(&solo, 0, 0, mp).unwrap();
        assert_eq!(h2_k0.data(), h2_solo.data());
        assert!(context_encode(&feats, 9, 2, mp).is_err());
    }

    #[test]
    fn gate_zero_params_is_half() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 1).unwrap();
        let mp = &p.modalities[0];
        mp.w_gate.set_data(&vec![0.0; mp.w_gate.len()]);
        mp.b_gate.set_data(&vec![0.0; mp.b_gate.len()]);
        let e = embed_speaker(&p, 0).unwrap();
        let h = Tensor::from_vec(vec![1, 8], vec![2.0; 8]).unwrap();
        let (gated, gate) = speaker_gate_modulate(&h, &e, mp).unwrap();
        assert_eq!(gate.data(), vec![0.5; 8]);
        assert_eq!(gated.data(), vec![1.0; 8]);
    }

    #[test]
    fn gate_saturation_stays_open_interval() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 1).unwrap();
        let mp = &p.modalities[0];
        mp.w_gate.set_data(&vec![0.0; mp.w_gate.len()]);
        mp.b_gate.set_data(&vec![50.0; mp.b_gate.len()]);
        let e = embed_speaker(&p, 0).unwrap();
        let h = Tensor::from_vec(vec![1, 8], vec![3.0; 8]).unwrap();
        let (gated, gate) = speaker_gate_modulate(&h, &e, mp).unwrap();
        for (&g, &hg) in gate.data().iter().zip(gated.data().iter()) {
            assert!(g > 1.0 - 1e-15 && g < 1.0);
            assert!(hg < 3.0 && hg > 2.999);
        }
    }

    #[test]
    fn zero_heads_zero_logits() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 1).unwrap();
        p.w_emotion.set_data(&vec![0.0; p.w_emotion.len()]);
        p.w_speaker.set_data(&vec![0.0; p.w_speaker.len()]);
        let gated: Vec<Tensor> = vec![
            Tensor::zeros(vec![1, cfg.d_h]),
            Tensor::zeros(vec![1, cfg.d_h]),
        ];
        let logits = fuse_and_classify(&gated, &p).unwrap();
        assert_eq!(logits.data(), vec![0.0; cfg.num_emotions]);
        let fused = Tensor::concat_cols(&gated).unwrap();
        assert_eq!(speaker_head(&fused, &p).unwrap().data(), vec![0.0; 3]);
        assert!(fuse_and_classify(&gated[..1], &p).is_err());
    }

    #[test]
    fn loss_breakdown_lambda_zero_and_composition() {
        let el = Tensor::from_vec(vec![2, 4], vec![0.5; 8]).unwrap();
        let sl = Tensor::from_vec(vec![2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let lb = total_loss(&el, &[0, 1], Some(&sl), &[2, 0], 0.0, None).unwrap();
        assert_eq!(lb.total.value(), lb.l_erc.value());
        let lb1 = total_loss(&el, &[0, 1], Some(&sl), &[2, 0], 1.0, None).unwrap();
        assert_eq!(lb1.total.value(), lb1.l_erc.value() + lb1.l_spk.value());
        assert!(total_loss(&el, &[0, 1], Some(&sl), &[2, 0], -0.5, None).is_err());
        // Equal branch losses under lambda=1 double the total.
        let lb2 = total_loss(&el, &[0, 1], Some(&el), &[0, 1], 1.0, None).unwrap();
        assert_eq!(lb2.total.value(), 2.0 * lb2.l_erc.value());
    }

    #[test]
    fn forward_dialogue_matches_single_utterance_path() {
        let cfg = small_config();
        let p = ModelParameters::init(&cfg, 21).unwrap();
        // Give FiLM and gate nontrivial weights so the comparison is real.
        let mut rng_vals = vec![0.0; p.modalities[0].w_gamma.len()];
        for (i, v) in rng_vals.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
        }
        p.modalities[0].w_gamma.set_data(&rng_vals);
        let n = 4;
        let speakers = [0usize, 1, 0, 2];
        let feats: Vec<Tensor> = cfg
            .modality_dims
            .iter()
            .map(|&d| {
                let data: Vec<f64> = (0..n * d).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.3).collect();
                Tensor::from_vec(vec![n, d], data).unwrap()
            })
            .collect();
        let rows: Vec<usize> = speakers.iter().map(|&s| p.embedding_row(s)).collect();
        let fwd = forward_dialogue(&p, &feats, &rows, Ablation::Full).unwrap();

        // Recompute position 3 through the single-utterance operations.
        let pos = 3;
        let mut gated_parts = Vec::new();
        for (m, mp) in p.modalities.iter().enumerate() {
            let d = cfg.modality_dims[m];
            let mut calibrated = Vec::new();
            for (i, &s) in speakers.iter().enumerate() {
                let e = embed_speaker(&p, s).unwrap();
                let x = Tensor::from_vec(
                    vec![1, d],
                    feats[m].data()[i * d..(i + 1) * d].to_vec(),
                )
                .unwrap();
                let (xh, _, _) = film_modulate(&x, &e, mp).unwrap();
                calibrated.push(xh);
            }
            let h = context_encode(&calibrated, pos, cfg.context_window, mp).unwrap();
            let e = embed_speaker(&p, speakers[pos]).unwrap();
            let (gated, _) = speaker_gate_modulate(&h, &e, mp).unwrap();
            gated_parts.push(gated);
        }
        let logits = fuse_and_classify(&gated_parts, &p).unwrap();
        let batch_row =
            &fwd.emotion_logits.data()[pos * cfg.num_emotions..(pos + 1) * cfg.num_emotions];
        for (a, b) in logits.data().iter().zip(batch_row) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ablation_surgery_matches_reduced_forward() {
        let cfg = small_config();
        let n = 3;
        let rows = [0usize, 1, 2];
        let feats: Vec<Tensor> = cfg
            .modality_dims
            .iter()
            .map(|&d| {
                let data: Vec<f64> = (0..n * d).map(|i| (i as f64) * 0.1 - 0.7).collect();
                Tensor::from_vec(vec![n, d], data).unwrap()
            })
            .collect();
        // no_film surgery on pinned params equals the skip-FiLM forward.
        let mut p = ModelParameters::init(&cfg, 9).unwrap();
        p.modalities[0].w_gamma.set_data(&vec![0.25; p.modalities[0].w_gamma.len()]);
        p.apply_ablation(Ablation::NoFilm);
        let skip = forward_dialogue(&p, &feats, &rows, Ablation::NoFilm).unwrap();
        // Hand-built reduced model: FiLM literally absent.
        let manual = {
            let mp = &p.modalities[0];
            let e = Tensor::embed_rows(&p.embedding, &rows).unwrap();
            let ctx = super::context_operator(n, cfg.context_window)
                .matmul(&feats[0])
                .unwrap();
            let z = Tensor::concat_cols(&[feats[0].clone(), ctx]).unwrap();
            let h = z.matmul(&mp.w_enc).unwrap().add(&mp.b_enc).unwrap().relu();
            let gate = e.matmul(&mp.w_gate).unwrap().add(&mp.b_gate).unwrap().sigmoid();
            gate.mul(&h).unwrap()
        };
        // Compare the first modality's gated block inside fused output.
        let fused = skip.fused.data();
        let manual_d = manual.data();
        for i in 0..n {
            for j in 0..cfg.d_h {
                assert_eq!(fused[i * cfg.fused_dim() + j], manual_d[i * cfg.d_h + j]);
            }
        }
        // no_gate bypasses sigmoid entirely (gate exactly 1).
        let p2 = ModelParameters::init(&cfg, 9).unwrap();
        let fwd2 = forward_dialogue(&p2, &feats, &rows, Ablation::NoGate).unwrap();
        assert!(fwd2.gates[0].data().iter().all(|&g| g == 1.0));
        // no_aux removes the speaker branch.
        let fwd3 = forward_dialogue(&p2, &feats, &rows, Ablation::NoAux).unwrap();
        assert!(fwd3.speaker_logits.is_none());
    }

    #[test]
    fn speaker_relabeling_equivariance() {
        let cfg = small_config();
        let perm = [2usize, 0, 1]; // pi(id) = perm[id]
        let p = ModelParameters::init(&cfg, 33).unwrap();
        // Give FiLM real weights so embeddings matter.
        for mp in &p.modalities {
            let w: Vec<f64> = (0..mp.w_gamma.len()).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect();
            mp.w_gamma.set_data(&w);
            mp.w_beta.set_data(&w);
        }
        let q = ModelParameters::init(&cfg, 33).unwrap();
        for (mp_p, mp_q) in p.modalities.iter().zip(&q.modalities) {
            mp_q.w_gamma.set_data(&mp_p.w_gamma.data());
            mp_q.w_beta.set_data(&mp_p.w_beta.data());
        }
        // Permute embedding rows (OOV row stays) and speaker-head columns.
        let d = cfg.d_spk;
        let emb = p.embedding.data();
        let mut emb_q = emb.clone();
        for (id, &pid) in perm.iter().enumerate() {
            emb_q[pid * d..(pid + 1) * d].copy_from_slice(&emb[id * d..(id + 1) * d]);
        }
        q.embedding.set_data(&emb_q);
        let f = cfg.fused_dim();
        let ws = p.w_speaker.data();
        let mut ws_q = ws.clone();
        let bs = p.b_speaker.data();
        let mut bs_q = bs.clone();
        for (id, &pid) in perm.iter().enumerate() {
            for r in 0..f {
                ws_q[r * 3 + pid] = ws[r * 3 + id];
            }
            bs_q[pid] = bs[id];
        }
        q.w_speaker.set_data(&ws_q);
        q.b_speaker.set_data(&bs_q);

        let n = 5;
        let speakers = [0usize, 1, 2, 1, 0];
        let feats: Vec<Tensor> = cfg
            .modality_dims
            .iter()
            .map(|&dm| {
                let data: Vec<f64> = (0..n * dm).map(|i| ((i * 7 % 13) as f64) * 0.2 - 1.0).collect();
                Tensor::from_vec(vec![n, dm], data).unwrap()
            })
            .collect();
        let emotions = [0usize, 1, 2, 3, 0];

        let rows_p: Vec<usize> = speakers.iter().map(|&s| p.embedding_row(s)).collect();
        let rows_q: Vec<usize> = speakers.iter().map(|&s| q.embedding_row(perm[s])).collect();
        let spk_p: Vec<usize> = speakers.to_vec();
        let spk_q: Vec<usize> = speakers.iter().map(|&s| perm[s]).collect();

        let fp = forward_dialogue(&p, &feats, &rows_p, Ablation::Full).unwrap();
        let fq = forward_dialogue(&q, &feats, &rows_q, Ablation::Full).unwrap();
        let lp = total_loss(
            &fp.emotion_logits,
            &emotions,
            fp.speaker_logits.as_ref(),
            &spk_p,
            0.5,
            None,
        )
        .unwrap();
        let lq = total_loss(
            &fq.emotion_logits,
            &emotions,
            fq.speaker_logits.as_ref(),
            &spk_q,
            0.5,
            None,
        )
        .unwrap();
        assert!(
            (lp.total.value() - lq.total.value()).abs() < 1e-12,
            "{} vs {}",
            lp.total.value(),
            lq.total.value()
        );
    }
}
