//! Pre-normalization decoder-only transformer with every stability
//! intervention as a configuration switch: qk-layernorm (per-head or
//! model-dim), attention scale, pointwise attention, query/key rms
//! transplant, and the muP parameterization variants.

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Std of a standard normal truncated to [-2, 2]; draws are divided by this
/// so the realized std matches the requested one.
const TRUNC_STD: f64 = 0.8796256610342398;

pub const ROTARY_BASE: f64 = 10000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QkLayerNorm {
    Off,
    #[default]
    PerHead,
    ModelDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    #[default]
    InvSqrtDh,
    InvDh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Softmax,
    PointwiseSquaredRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MupMode {
    #[default]
    Off,
    Simple,
    Intermediate,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    /// 0 layers is the bigram baseline: embedding, final norm, head.
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub qk_layernorm: QkLayerNorm,
    pub attention_scale: AttentionScale,
    pub attention_kind: AttentionKind,
    /// Forces query/key rows to rms sqrt(kappa) right before the logits.
    pub transplant_kappa: Option<f64>,
    pub mup_mode: MupMode,
    /// Width of the reference model whose fan-ins anchor muP scaling.
    pub base_fan_in: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            num_layers: 6,
            num_heads: 4,
            head_dim: 64,
            vocab_size: 256,
            context_length: 128,
            qk_layernorm: QkLayerNorm::PerHead,
            attention_scale: AttentionScale::InvSqrtDh,
            attention_kind: AttentionKind::Softmax,
            transplant_kappa: None,
            mup_mode: MupMode::Off,
            base_fan_in: 256,
            layernorm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.vocab_size == 0 || self.context_length == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if self.num_layers > 0 {
            if self.num_heads == 0 || self.num_heads * self.head_dim != self.model_dim {
                return Err(ModelError::InvalidConfig(format!(
                    "model_dim {} must equal num_heads {} * head_dim {}",
                    self.model_dim, self.num_heads, self.head_dim
                )));
            }
            if self.head_dim % 2 != 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "head_dim {} must be even for rotary embedding",
                    self.head_dim
                )));
            }
        }
        if let Some(kappa) = self.transplant_kappa {
            if !(kappa > 0.0) {
                return Err(ModelError::InvalidConfig(format!("transplant kappa {kappa} must be positive")));
            }
        }
        if self.base_fan_in == 0 {
            return Err(ModelError::InvalidConfig("base_fan_in must be positive".into()));
        }
        if self.layernorm_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// muP (full) forces 1/d_h attention scaling.
    pub fn effective_attention_scale(&self) -> f64 {
        match (self.mup_mode, self.attention_scale) {
            (MupMode::Full, _) | (_, AttentionScale::InvDh) => 1.0 / self.head_dim as f64,
            (_, AttentionScale::InvSqrtDh) => 1.0 / (self.head_dim as f64).sqrt(),
        }
    }

    /// Learnable scale entries per qk-layernorm projection.
    pub fn qk_norm_width(&self) -> Option<usize> {
        match self.qk_layernorm {
            QkLayerNorm::Off => None,
            QkLayerNorm::PerHead => Some(self.head_dim),
            QkLayerNorm::ModelDim => Some(self.model_dim),
        }
    }
}

/// Non-embedding parameter count: per layer 12·d² weights plus two layernorm
/// scales plus the qk-layernorm scales, and the final layernorm; embedding
/// and head are excluded by convention.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let d = cfg.model_dim;
    let qkln = cfg.qk_norm_width().map_or(0, |w| 2 * w);
    cfg.num_layers * (12 * d * d + 2 * d + qkln) + d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Linear,
    Head,
    Norm,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub fan_in: usize,
    pub tensor: Tensor<T>,
}

/// Named parameter collection in a fixed construction order.
#[derive(Debug, Clone)]
pub struct Parameters<T: Scalar> {
    params: Vec<Param<T>>,
    layout: Layout,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub embedding: usize,
    pub layers: Vec<LayerLayout>,
    pub final_norm: usize,
    pub head: usize,
}

#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub ln_attn: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub q_norm: Option<usize>,
    pub k_norm: Option<usize>,
    pub ln_mlp: usize,
    pub w_in: usize,
    pub w_out: usize,
}

impl<T: Scalar> Parameters<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Total elements excluding the embedding and head.
    pub fn count_non_embedding(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !matches!(p.kind, ParamKind::Embedding | ParamKind::Head))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Pushes every parameter onto a tape as a grad-requiring leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.requires_grad = true;
                tape.leaf(&t)
            })
            .collect();
        BoundParams { ids }
    }

    /// Binds without gradient tracking, for evaluation passes.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|p| tape.constant(p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
            .collect();
        BoundParams { ids }
    }
}

/// Tape handles for one bound parameter set, ordered like `Parameters`.
pub struct BoundParams {
    pub ids: Vec<TensorId>,
}

/// Per-layer attention observations taken during a forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub layer: usize,
    /// Max post-scale logit over batch, heads, and unmasked (i, j).
    pub max_logit: f64,
    pub q_rms: f64,
    pub k_rms: f64,
    /// Cosine similarity of the query/key pair attaining the max logit.
    pub cos_sim_at_max: f64,
    /// Mean cosine over all unmasked pairs (recorded alongside, not instead).
    pub cos_sim_mean: f64,
}

pub struct ForwardOutput {
    /// [batch * context, vocab]
    pub logits: TensorId,
    pub probes: Vec<AttentionProbe>,
    pub block_output_rms: Vec<f64>,
}

fn rms_of<T: Scalar>(xs: &[T]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &v in xs {
        let f = v.to_f64();
        acc += f * f;
    }
    (acc / xs.len() as f64).sqrt()
}

/// Draws standard normal samples rejected outside [-2, 2], rescaled so the
/// realized standard deviation equals `std`.
fn truncated_normal<T: Scalar>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let scale = std / TRUNC_STD;
    (0..n)
        .map(|_| {
            let mut z = unit.sample(rng);
            while z.abs() > 2.0 {
                z = unit.sample(rng);
            }
            T::from_f64(z * scale)
        })
        .collect()
}

fn plain_normal<T: Scalar>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0f64, std).expect("normal");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// Initializes the parameter collection:
/// embedding ~ N(0, 1/sqrt(d)); linear weights ~ truncated normal with std
/// 1/sqrt(fan_in); norm scales start at one. muP (intermediate/full) re-stds
/// the head to sqrt(base_fan_in)/fan_in, and muP (full) zeroes the query
/// projections (drawing and discarding, so the rng stream stays aligned with
/// the baseline).
pub fn init_parameters<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim;
    let v = cfg.vocab_size;
    let mut params: Vec<Param<T>> = Vec::new();

    let push = |params: &mut Vec<Param<T>>, name: String, kind: ParamKind, fan_in: usize, shape: Vec<usize>, data: Vec<T>| -> usize {
        params.push(Param {
            name,
            kind,
            fan_in,
            tensor: Tensor::new(shape, data).expect("init shape"),
        });
        params.len() - 1
    };

    let emb_data = plain_normal(&mut rng, 1.0 / (d as f64).sqrt(), v * d);
    let embedding = push(&mut params, "embedding".into(), ParamKind::Embedding, d, vec![v, d], emb_data);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let ln_attn = push(
            &mut params,
            format!("layer{l}.ln_attn.scale"),
            ParamKind::Norm,
            d,
            vec![d],
            vec![T::ONE; d],
        );
        let std = 1.0 / (d as f64).sqrt();
        let mut wq_data = truncated_normal::<T>(&mut rng, std, d * d);
        if cfg.mup_mode == MupMode::Full {
            wq_data.iter_mut().for_each(|x| *x = T::ZERO);
        }
        let wq = push(&mut params, format!("layer{l}.attn.wq"), ParamKind::Linear, d, vec![d, d], wq_data);
        let wk_data = truncated_normal(&mut rng, std, d * d);
        let wk = push(&mut params, format!("layer{l}.attn.wk"), ParamKind::Linear, d, vec![d, d], wk_data);
        let wv_data = truncated_normal(&mut rng, std, d * d);
        let wv = push(&mut params, format!("layer{l}.attn.wv"), ParamKind::Linear, d, vec![d, d], wv_data);
        let wo_data = truncated_normal(&mut rng, std, d * d);
        let wo = push(&mut params, format!("layer{l}.attn.wo"), ParamKind::Linear, d, vec![d, d], wo_data);
        let (q_norm, k_norm) = match cfg.qk_norm_width() {
            None => (None, None),
            Some(w) => {
                let q = push(
                    &mut params,
                    format!("layer{l}.attn.q_norm.scale"),
                    ParamKind::Norm,
                    w,
                    vec![w],
                    vec![T::ONE; w],
                );
                let k = push(
                    &mut params,
                    format!("layer{l}.attn.k_norm.scale"),
                    ParamKind::Norm,
                    w,
                    vec![w],
                    vec![T::ONE; w],
                );
                (Some(q), Some(k))
            }
        };
        let ln_mlp = push(
            &mut params,
            format!("layer{l}.ln_mlp.scale"),
            ParamKind::Norm,
            d,
            vec![d],
            vec![T::ONE; d],
        );
        let w_in_data = truncated_normal(&mut rng, std, d * 4 * d);
        let w_in = push(&mut params, format!("layer{l}.mlp.w_in"), ParamKind::Linear, d, vec![d, 4 * d], w_in_data);
        let w_out_std = 1.0 / (4.0 * d as f64).sqrt();
        let w_out_data = truncated_normal(&mut rng, w_out_std, 4 * d * d);
        let w_out = push(&mut params, format!("layer{l}.mlp.w_out"), ParamKind::Linear, 4 * d, vec![4 * d, d], w_out_data);
        layers.push(LayerLayout { ln_attn, wq, wk, wv, wo, q_norm, k_norm, ln_mlp, w_in, w_out });
    }

    let final_norm = push(
        &mut params,
        "final_norm.scale".into(),
        ParamKind::Norm,
        d,
        vec![d],
        vec![T::ONE; d],
    );
    let head_std = match cfg.mup_mode {
        MupMode::Intermediate | MupMode::Full => (cfg.base_fan_in as f64).sqrt() / d as f64,
        _ => 1.0 / (d as f64).sqrt(),
    };
    let head_data = truncated_normal(&mut rng, head_std, d * v);
    let head = push(&mut params, "head".into(), ParamKind::Head, d, vec![d, v], head_data);

    Ok(Parameters { params, layout: Layout { embedding, layers, final_norm, head } })
}

/// Forward pass over a packed token block.
///
/// `tokens` holds `b * t` ids. Blocks are pre-norm residual
/// (`x += attn(ln(x)); x += mlp(ln(x))`), queries and keys go through
/// qk-layernorm, then rotary, then the optional rms transplant, and probes
/// capture the attention statistics of every layer.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bound: &BoundParams,
    layout: &Layout,
    tokens: &[usize],
    b: usize,
    t: usize,
) -> Result<ForwardOutput, ModelError> {
    forward_probed(tape, cfg, bound, layout, tokens, b, t, true)
}

/// `forward` with control over the expensive probe statistic: the all-pairs
/// cosine mean costs as much as the attention matmul, so steps that are not
/// being recorded skip it (the field is NaN there).
#[allow(clippy::too_many_arguments)]
pub fn forward_probed<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bound: &BoundParams,
    layout: &Layout,
    tokens: &[usize],
    b: usize,
    t: usize,
    cos_mean: bool,
) -> Result<ForwardOutput, ModelError> {
    if tokens.len() != b * t {
        return Err(ModelError::InvalidConfig(format!(
            "token block of {} ids does not match batch {b} x context {t}",
            tokens.len()
        )));
    }
    let (h, dh) = (cfg.num_heads, cfg.head_dim);
    let eps = T::from_f64(cfg.layernorm_eps);
    let id = |i: usize| bound.ids[i];

    let mut x = tape.embed(id(layout.embedding), tokens)?;
    let mut probes = Vec::with_capacity(layout.layers.len());
    let mut block_output_rms = Vec::with_capacity(layout.layers.len());

    for (l, lay) in layout.layers.iter().enumerate() {
        // attention half-block
        let normed = tape.layernorm(x, id(lay.ln_attn), eps, true)?;
        let mut q = tape.matmul(normed, id(lay.wq))?;
        let mut k = tape.matmul(normed, id(lay.wk))?;
        let v = tape.matmul(normed, id(lay.wv))?;
        match cfg.qk_layernorm {
            QkLayerNorm::Off => {}
            QkLayerNorm::PerHead => {
                q = tape.layernorm_grouped(q, id(lay.q_norm.expect("q_norm")), dh, eps, true)?;
                k = tape.layernorm_grouped(k, id(lay.k_norm.expect("k_norm")), dh, eps, true)?;
            }
            QkLayerNorm::ModelDim => {
                q = tape.layernorm(q, id(lay.q_norm.expect("q_norm")), eps, true)?;
                k = tape.layernorm(k, id(lay.k_norm.expect("k_norm")), eps, true)?;
            }
        }
        let mut qh = tape.split_heads(q, b, t, h, dh)?;
        let mut kh = tape.split_heads(k, b, t, h, dh)?;
        let vh = tape.split_heads(v, b, t, h, dh)?;
        qh = tape.rotary(qh, ROTARY_BASE)?;
        kh = tape.rotary(kh, ROTARY_BASE)?;
        if let Some(kappa) = cfg.transplant_kappa {
            let target = T::from_f64(kappa.sqrt());
            qh = tape.rms_rescale(qh, dh, target)?;
            kh = tape.rms_rescale(kh, dh, target)?;
        }
        let raw = tape.batched_matmul(qh, kh, true)?;
        let logits = tape.scale(raw, T::from_f64(cfg.effective_attention_scale()));
        probes.push(probe_attention_values(
            l,
            tape.value(logits),
            tape.value(qh),
            tape.value(kh),
            b * h,
            t,
            dh,
            cos_mean,
        ));
        let weights = match cfg.attention_kind {
            AttentionKind::Softmax => tape.causal_softmax(logits)?,
            AttentionKind::PointwiseSquaredRelu => {
                let scale = T::from_f64(1.0 / (t as f64).sqrt());
                tape.causal_squared_relu(logits, scale)?
            }
        };
        let ctx = tape.batched_matmul(weights, vh, false)?;
        let merged = tape.merge_heads(ctx, b, t, h, dh)?;
        let attn_out = tape.matmul(merged, id(lay.wo))?;
        x = tape.add(x, attn_out)?;

        // mlp half-block
        let normed = tape.layernorm(x, id(lay.ln_mlp), eps, true)?;
        let hidden = tape.matmul(normed, id(lay.w_in))?;
        let act = tape.gelu(hidden);
        let mlp_out = tape.matmul(act, id(lay.w_out))?;
        x = tape.add(x, mlp_out)?;

        block_output_rms.push(rms_of(tape.value(x)));
    }

    let final_normed = tape.layernorm(x, id(layout.final_norm), eps, true)?;
    let logits = tape.matmul(final_normed, id(layout.head))?;
    Ok(ForwardOutput { logits, probes, block_output_rms })
}

/// Scans scaled attention logits for the causal max, the rms of the queries
/// and keys feeding them, and cosine similarity statistics.
#[allow(clippy::too_many_arguments)]
fn probe_attention_values<T: Scalar>(
    layer: usize,
    logits: &[T],
    q: &[T],
    k: &[T],
    batch_heads: usize,
    t: usize,
    dh: usize,
    with_cos_mean: bool,
) -> AttentionProbe {
    let mut max_logit = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize, 0usize);
    for bh in 0..batch_heads {
        for i in 0..t {
            let row = &logits[(bh * t + i) * t..(bh * t + i) * t + i + 1];
            for (j, &z) in row.iter().enumerate() {
                let z = z.to_f64();
                if z > max_logit {
                    max_logit = z;
                    arg = (bh, i, j);
                }
            }
        }
    }
    let norm_of = |x: &[T], bh: usize, i: usize| -> f64 {
        let row = &x[(bh * t + i) * dh..(bh * t + i + 1) * dh];
        row.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
    };
    let cos_of = |bh: usize, i: usize, j: usize, nq: f64, nk: f64| -> f64 {
        let qrow = &q[(bh * t + i) * dh..(bh * t + i + 1) * dh];
        let krow = &k[(bh * t + j) * dh..(bh * t + j + 1) * dh];
        let mut dot = 0.0;
        for e in 0..dh {
            dot += qrow[e].to_f64() * krow[e].to_f64();
        }
        let denom = nq * nk;
        if denom > 0.0 {
            dot / denom
        } else {
            0.0
        }
    };
    let cos_sim_at_max = cos_of(
        arg.0,
        arg.1,
        arg.2,
        norm_of(q, arg.0, arg.1),
        norm_of(k, arg.0, arg.2),
    );
    let cos_sim_mean = if with_cos_mean {
        let mut qn = vec![0.0f64; batch_heads * t];
        let mut kn = vec![0.0f64; batch_heads * t];
        for bh in 0..batch_heads {
            for i in 0..t {
                qn[bh * t + i] = norm_of(q, bh, i);
                kn[bh * t + i] = norm_of(k, bh, i);
            }
        }
        let mut cos_sum = 0.0;
        let mut pairs = 0usize;
        for bh in 0..batch_heads {
            for i in 0..t {
                for j in 0..=i {
                    cos_sum += cos_of(bh, i, j, qn[bh * t + i], kn[bh * t + j]);
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            cos_sum / pairs as f64
        } else {
            0.0
        }
    } else {
        f64::NAN
    };
    AttentionProbe {
        layer,
        max_logit,
        q_rms: rms_of(q),
        k_rms: rms_of(k),
        cos_sim_at_max,
        cos_sim_mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            model_dim: 16,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 11,
            context_length: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validate_rejects_mismatched_heads() {
        let cfg = ModelConfig { num_heads: 3, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validate_rejects_odd_head_dim() {
        let cfg = ModelConfig { model_dim: 6, num_heads: 2, head_dim: 3, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn count_formula_examples() {
        // 0 layers leaves only the final layernorm scale.
        let cfg = ModelConfig { num_layers: 0, model_dim: 64, ..tiny_cfg() };
        assert_eq!(count_parameters(&cfg), 64);

        // Doubling depth doubles everything but the constant d.
        let base = tiny_cfg();
        let doubled = ModelConfig { num_layers: 4, ..tiny_cfg() };
        let d = base.model_dim;
        assert_eq!(count_parameters(&doubled) - d, 2 * (count_parameters(&base) - d));
    }

    #[test]
    fn count_matches_enumeration_for_qkln_variants() {
        for qk in [QkLayerNorm::Off, QkLayerNorm::PerHead, QkLayerNorm::ModelDim] {
            let cfg = ModelConfig { qk_layernorm: qk, ..tiny_cfg() };
            let params = init_parameters::<f64>(&cfg, 7).unwrap();
            assert_eq!(count_parameters(&cfg), params.count_non_embedding(), "{qk:?}");
        }
    }

    #[test]
    fn mup_full_zeroes_queries_and_keeps_stream_alignment() {
        let cfg = ModelConfig { mup_mode: MupMode::Full, attention_scale: AttentionScale::InvSqrtDh, ..tiny_cfg() };
        let full = init_parameters::<f64>(&cfg, 3).unwrap();
        let wq = full.get(full.index_of("layer0.attn.wq").unwrap());
        assert!(wq.tensor.data().iter().all(|&v| v == 0.0));

        // Everything except wq and the head matches the baseline draw.
        let base = init_parameters::<f64>(&ModelConfig { mup_mode: MupMode::Off, ..tiny_cfg() }, 3).unwrap();
        let idx = full.index_of("layer1.mlp.w_in").unwrap();
        assert_eq!(full.get(idx).tensor.data(), base.get(idx).tensor.data());
        assert!((cfg.effective_attention_scale() - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn forward_shapes_and_bigram_path() {
        let cfg = ModelConfig { num_layers: 0, ..tiny_cfg() };
        let params = init_parameters::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, &cfg, &bound, params.layout(), &[1, 2, 3, 4, 5, 6], 1, 6).unwrap();
        assert_eq!(tape.shape(out.logits), &[6, 11]);
        assert!(out.probes.is_empty());
        assert!(out.block_output_rms.is_empty());
    }

    #[test]
    fn forward_emits_probes_per_layer() {
        let cfg = tiny_cfg();
        let params = init_parameters::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, &cfg, &bound, params.layout(), &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0], 2, 6).unwrap();
        assert_eq!(out.probes.len(), 2);
        assert_eq!(out.block_output_rms.len(), 2);
        for p in &out.probes {
            assert!(p.max_logit.is_finite());
            assert!(p.cos_sim_at_max.abs() <= 1.0 + 1e-9);
            assert!(p.q_rms > 0.0);
        }
    }

    #[test]
    fn qk_layernorm_bounds_max_logit() {
        // With unit scales the per-head rms is at most 1, so the scaled logit
        // cannot exceed sqrt(dh) (Cauchy-Schwarz).
        let cfg = ModelConfig { qk_layernorm: QkLayerNorm::PerHead, ..tiny_cfg() };
        let params = init_parameters::<f64>(&cfg, 11).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, &cfg, &bound, params.layout(), &[3; 12], 2, 6).unwrap();
        let bound_val = (cfg.head_dim as f64).sqrt();
        for p in &out.probes {
            assert!(p.max_logit <= bound_val + 1e-9, "{} > {}", p.max_logit, bound_val);
        }
    }
}
