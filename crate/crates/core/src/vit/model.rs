//! Pre-norm encoder stack with per-encoder attention skipping, plus seeded
//! synthetic weights and inputs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::capture::{ActivationCapture, EncoderCapture, LogitBatch};
use super::config::{EffortConfig, ViTConfig};
use super::numeric::{affine, attention_head, gelu, layer_norm, softmax};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    /// Fused `d x 3d` projection producing Q, K and V side by side.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w_mlp1: Array2<f64>,
    pub b_mlp1: Array1<f64>,
    pub w_mlp2: Array2<f64>,
    pub b_mlp2: Array1<f64>,
}

impl EncoderWeights {
    fn check(&self, vit: &ViTConfig) -> Result<()> {
        let d = vit.embed_dim;
        let h = vit.mlp_hidden();
        let shapes = [
            ("w_qkv", self.w_qkv.dim(), (d, 3 * d)),
            ("w_proj", self.w_proj.dim(), (d, d)),
            ("w_mlp1", self.w_mlp1.dim(), (d, h)),
            ("w_mlp2", self.w_mlp2.dim(), (h, d)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::domain(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        let lens = [
            ("ln1_gamma", self.ln1_gamma.len(), d),
            ("ln1_beta", self.ln1_beta.len(), d),
            ("b_qkv", self.b_qkv.len(), 3 * d),
            ("b_proj", self.b_proj.len(), d),
            ("ln2_gamma", self.ln2_gamma.len(), d),
            ("ln2_beta", self.ln2_beta.len(), d),
            ("b_mlp1", self.b_mlp1.len(), h),
            ("b_mlp2", self.b_mlp2.len(), d),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::domain(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub vit: ViTConfig,
    pub encoders: Vec<EncoderWeights>,
    pub head: HeadWeights,
}

/// Distribution of the synthetic weights: `N(0, gain^2 / fan_in)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticInit {
    pub weight_gain: f64,
    /// Gain of the classifier; larger values give sharper (lower-entropy) predictions.
    pub head_gain: f64,
}

impl Default for SyntheticInit {
    fn default() -> Self {
        SyntheticInit {
            weight_gain: 1.0,
            head_gain: 4.0,
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let std = gain / (rows as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl ModelWeights {
    pub fn synthetic(vit: &ViTConfig, init: SyntheticInit, seed: u64) -> Result<Self> {
        vit.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = vit.embed_dim;
        let h = vit.mlp_hidden();
        let g = init.weight_gain;
        let encoders = (0..vit.num_encoders)
            .map(|_| EncoderWeights {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                w_qkv: gaussian_matrix(&mut rng, d, 3 * d, g),
                b_qkv: Array1::zeros(3 * d),
                w_proj: gaussian_matrix(&mut rng, d, d, g),
                b_proj: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w_mlp1: gaussian_matrix(&mut rng, d, h, g),
                b_mlp1: Array1::zeros(h),
                w_mlp2: gaussian_matrix(&mut rng, h, d, g),
                b_mlp2: Array1::zeros(d),
            })
            .collect();
        let head = HeadWeights {
            ln_gamma: Array1::ones(d),
            ln_beta: Array1::zeros(d),
            w: gaussian_matrix(&mut rng, d, vit.num_classes, init.head_gain),
            b: Array1::zeros(vit.num_classes),
        };
        Ok(ModelWeights {
            vit: vit.clone(),
            encoders,
            head,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.vit.validate()?;
        if self.encoders.len() != self.vit.num_encoders {
            return Err(Error::domain(format!(
                "{} encoder weight sets for {} encoders",
                self.encoders.len(),
                self.vit.num_encoders
            )));
        }
        for enc in &self.encoders {
            enc.check(&self.vit)?;
        }
        let d = self.vit.embed_dim;
        if self.head.w.dim() != (d, self.vit.num_classes)
            || self.head.b.len() != self.vit.num_classes
            || self.head.ln_gamma.len() != d
            || self.head.ln_beta.len() != d
        {
            return Err(Error::domain("classifier weights do not match the ViT"));
        }
        Ok(())
    }
}

/// Result of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Encoder output after the MLP residual; this is also the `MLP_i` tap.
    pub output: Array2<f64>,
    /// Attention branch output (after projection, before the residual add).
    /// `None` when the attention was skipped.
    pub attn_out: Option<Array2<f64>>,
}

/// Multi-head attention branch: LN1, fused QKV, per-head attention, projection.
pub fn attention_block(
    x: ArrayView2<'_, f64>,
    w: &EncoderWeights,
    vit: &ViTConfig,
) -> Result<Array2<f64>> {
    let d = vit.embed_dim;
    let dh = vit.head_dim();
    let scale_dim = match vit.attention_scale {
        super::config::AttentionScale::FullDim => d,
        super::config::AttentionScale::HeadDim => dh,
    };
    let normed = layer_norm(x, w.ln1_gamma.view(), w.ln1_beta.view());
    let qkv = affine(normed.view(), &w.w_qkv, &w.b_qkv);
    let mut concat = Array2::<f64>::zeros((x.nrows(), d));
    for head in 0..vit.num_heads {
        let lo = head * dh;
        let q = qkv.slice(s![.., lo..lo + dh]);
        let k = qkv.slice(s![.., d + lo..d + lo + dh]);
        let v = qkv.slice(s![.., 2 * d + lo..2 * d + lo + dh]);
        let out = attention_head(q, k, v, scale_dim)?;
        concat.slice_mut(s![.., lo..lo + dh]).assign(&out);
    }
    Ok(affine(concat.view(), &w.w_proj, &w.b_proj))
}

/// MLP sub-block including its pre-norm and residual: `x + MLP(LN2(x))`.
pub fn mlp_block(x: ArrayView2<'_, f64>, w: &EncoderWeights) -> Array2<f64> {
    let normed = layer_norm(x, w.ln2_gamma.view(), w.ln2_beta.view());
    let hidden = affine(normed.view(), &w.w_mlp1, &w.b_mlp1).mapv(gelu);
    let out = affine(hidden.view(), &w.w_mlp2, &w.b_mlp2);
    &x + &out
}

/// Runs one encoder. With `skip_attention` the whole attention sub-block
/// (including its layer norm) is bypassed and the input feeds the MLP block.
pub fn encoder_forward(
    x: ArrayView2<'_, f64>,
    weights: &EncoderWeights,
    vit: &ViTConfig,
    skip_attention: bool,
) -> Result<EncoderOutput> {
    if x.dim() != (vit.tokens, vit.embed_dim) {
        return Err(Error::domain(format!(
            "encoder input has shape {:?}, expected ({}, {})",
            x.dim(),
            vit.tokens,
            vit.embed_dim
        )));
    }
    weights.check(vit)?;
    if skip_attention {
        return Ok(EncoderOutput {
            output: mlp_block(x, weights),
            attn_out: None,
        });
    }
    let attn = attention_block(x, weights, vit)?;
    let mid = &x + &attn;
    Ok(EncoderOutput {
        output: mlp_block(mid.view(), weights),
        attn_out: Some(attn),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Class probabilities (post-softmax).
    pub probs: Array1<f64>,
    pub taps: Vec<EncoderOutput>,
}

/// Full forward pass honouring the skip pattern of `effort`. The classifier
/// mean-pools the tokens of the last encoder, applies a final layer norm,
/// a linear layer and a softmax.
pub fn model_forward(
    x: ArrayView2<'_, f64>,
    weights: &ModelWeights,
    effort: &EffortConfig,
) -> Result<ModelOutput> {
    weights.check()?;
    effort.check_matches(&weights.vit)?;
    let vit = &weights.vit;
    let mut taps = Vec::with_capacity(vit.num_encoders);
    let mut h = x.to_owned();
    for (idx, enc) in weights.encoders.iter().enumerate() {
        let out = encoder_forward(h.view(), enc, vit, !effort.is_active(idx + 1))?;
        h = out.output.clone();
        taps.push(out);
    }
    let pooled = h
        .mean_axis(Axis(0))
        .expect("tokens >= 1")
        .insert_axis(Axis(0));
    let normed = layer_norm(
        pooled.view(),
        weights.head.ln_gamma.view(),
        weights.head.ln_beta.view(),
    );
    let logits = affine(normed.view(), &weights.head.w, &weights.head.b);
    let probs = softmax(logits.row(0))?;
    Ok(ModelOutput { probs, taps })
}

/// Seeded batch of `n` synthetic `t x d` inputs drawn from `N(0, 1)`.
pub fn synthetic_inputs(vit: &ViTConfig, n: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Array2::from_shape_simple_fn((vit.tokens, vit.embed_dim), || {
                StandardNormal.sample(&mut rng)
            })
        })
        .collect()
}

/// Probabilities for every input under one effort, as an `n x K` matrix.
pub fn batch_probs(
    weights: &ModelWeights,
    inputs: &[Array2<f64>],
    effort: &EffortConfig,
) -> Result<Array2<f64>> {
    let k = weights.vit.num_classes;
    let mut probs = Array2::zeros((inputs.len(), k));
    for (i, x) in inputs.iter().enumerate() {
        let out = model_forward(x.view(), weights, effort)?;
        probs.row_mut(i).assign(&out.probs);
    }
    Ok(probs)
}

/// Runs the all-active model over the batch and records both taps of every
/// encoder, token-flattened (each token of each sample is a row).
pub fn capture_batch(
    weights: &ModelWeights,
    inputs: &[Array2<f64>],
) -> Result<(ActivationCapture, Array2<f64>)> {
    let vit = &weights.vit;
    let (t, d) = (vit.tokens, vit.embed_dim);
    let rows = inputs.len() * t;
    let mut mlp: Vec<Array2<f64>> = vec![Array2::zeros((rows, d)); vit.num_encoders];
    let mut attn: Vec<Array2<f64>> = vec![Array2::zeros((rows, d)); vit.num_encoders];
    let mut probs = Array2::zeros((inputs.len(), vit.num_classes));
    let effort = EffortConfig::all_active(vit.num_encoders);
    for (i, x) in inputs.iter().enumerate() {
        let out = model_forward(x.view(), weights, &effort)?;
        probs.row_mut(i).assign(&out.probs);
        for (e, tap) in out.taps.iter().enumerate() {
            mlp[e]
                .slice_mut(s![i * t..(i + 1) * t, ..])
                .assign(&tap.output);
            let a = tap.attn_out.as_ref().expect("all attentions active");
            attn[e].slice_mut(s![i * t..(i + 1) * t, ..]).assign(a);
        }
    }
    let encoders = mlp
        .into_iter()
        .zip(attn)
        .map(|(mlp_out, attn_out)| EncoderCapture {
            mlp_out: Some(mlp_out),
            attn_out: Some(attn_out),
        })
        .collect();
    Ok((ActivationCapture::new(encoders)?, probs))
}

/// Labels for a synthetic batch: the reference model's argmax, replaced by a
/// uniformly random class with probability `noise`.
pub fn synthetic_labels(reference_probs: &Array2<f64>, noise: f64, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = reference_probs.ncols();
    reference_probs
        .rows()
        .into_iter()
        .map(|row| {
            if rng.gen::<f64>() < noise {
                rng.gen_range(0..k) as u32
            } else {
                super::capture::argmax(row) as u32
            }
        })
        .collect()
}

/// Everything the routing and search stages need from one synthetic run.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub weights: ModelWeights,
    pub inputs: Vec<Array2<f64>>,
    pub labels: Vec<u32>,
}

/// Default fraction of labels that disagree with the all-active model.
pub const DEFAULT_LABEL_NOISE: f64 = 0.1;

impl SyntheticRun {
    pub fn new(vit: &ViTConfig, samples: usize, seed: u64) -> Result<Self> {
        let weights = ModelWeights::synthetic(vit, SyntheticInit::default(), seed)?;
        let inputs = synthetic_inputs(vit, samples, seed.wrapping_add(1));
        let reference = batch_probs(
            &weights,
            &inputs,
            &EffortConfig::all_active(vit.num_encoders),
        )?;
        let labels = synthetic_labels(&reference, DEFAULT_LABEL_NOISE, seed.wrapping_add(2));
        Ok(SyntheticRun {
            weights,
            inputs,
            labels,
        })
    }

    pub fn logits(&self, effort: &EffortConfig) -> Result<LogitBatch> {
        LogitBatch::new(
            batch_probs(&self.weights, &self.inputs, effort)?,
            self.labels.clone(),
        )
    }

    pub fn capture(&self) -> Result<(ActivationCapture, LogitBatch)> {
        let (capture, probs) = capture_batch(&self.weights, &self.inputs)?;
        Ok((capture, LogitBatch::new(probs, self.labels.clone())?))
    }
}
