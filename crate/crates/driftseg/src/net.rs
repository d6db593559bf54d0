//! The segmentation network: a small hierarchical self-attention encoder,
//! an FPN decoder with a segmentation head, and the two contrastive
//! projection heads.
//!
//! Each encoder stage embeds its input with an overlapping strided
//! convolution and runs pre-norm attention blocks over the token grid. The
//! decoder laterally projects every stage to a common width, merges
//! top-down, and reads out per-pixel class logits. Raw attention matrices
//! from the final two blocks of the last stage can be captured for
//! saliency-guided patch selection.
//!
//! All forward passes run on an [`Tape`]; evaluation binds the parameters as
//! constants so no backward graph is retained.

use crate::autodiff::{Tape, Var};
use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One encoder stage: overlapping patch embedding plus attention blocks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct StageConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub fpn_channels: usize,
    /// Projection dimension K of the local contrastive head.
    pub local_proj_dim: usize,
    /// Spatial grid S of the local contrastive head.
    pub local_proj_grid: usize,
    pub global_proj_dim: usize,
    /// Hidden expansion of the per-block MLP.
    pub mlp_ratio: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stages: vec![
                StageConfig { patch_size: 7, stride: 4, embed_dim: 32, num_heads: 1, num_blocks: 2 },
                StageConfig { patch_size: 3, stride: 2, embed_dim: 64, num_heads: 2, num_blocks: 2 },
                StageConfig { patch_size: 3, stride: 2, embed_dim: 128, num_heads: 4, num_blocks: 2 },
            ],
            num_classes: 2,
            fpn_channels: 32,
            local_proj_dim: 16,
            local_proj_grid: 4,
            global_proj_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.stages.is_empty() {
            return Err(NetError::Config("at least one stage required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.embed_dim == 0 || s.num_heads == 0 || s.num_blocks == 0 || s.stride == 0 {
                return Err(NetError::Config(format!("stage {i}: zero-sized field")));
            }
            if s.embed_dim % s.num_heads != 0 {
                return Err(NetError::Config(format!(
                    "stage {i}: embed_dim {} not divisible by num_heads {}",
                    s.embed_dim, s.num_heads
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(NetError::Config("need at least 2 classes".into()));
        }
        if self.fpn_channels == 0
            || self.local_proj_dim == 0
            || self.local_proj_grid == 0
            || self.global_proj_dim == 0
            || self.mlp_ratio == 0
        {
            return Err(NetError::Config("zero-sized head dimension".into()));
        }
        Ok(())
    }

    /// Spatial resolution of each stage for a given input size.
    pub fn stage_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for s in &self.stages {
            let pad = s.patch_size / 2;
            ch = (ch + 2 * pad - s.patch_size) / s.stride + 1;
            cw = (cw + 2 * pad - s.patch_size) / s.stride + 1;
            out.push((ch, cw));
        }
        out
    }

    /// Hex digest identifying this configuration.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Named parameter arrays plus the training step counter.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: IndexMap<String, ArrayD<f64>>,
    pub step_count: u64,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-a..a))
}

impl ModelState {
    /// Fresh deterministic initialization for `config`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<ModelState, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: IndexMap<String, ArrayD<f64>> = IndexMap::new();

        let mut cin = 1usize;
        for (i, s) in config.stages.iter().enumerate() {
            let d = s.embed_dim;
            let k = s.patch_size;
            params.insert(
                format!("enc.s{i}.embed.w"),
                xavier(&mut rng, &[d, cin, k, k], cin * k * k, d),
            );
            params.insert(format!("enc.s{i}.embed.b"), ArrayD::zeros(IxDyn(&[d])));
            params.insert(format!("enc.s{i}.embed_ln.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
            params.insert(format!("enc.s{i}.embed_ln.b"), ArrayD::zeros(IxDyn(&[d])));
            for b in 0..s.num_blocks {
                let p = format!("enc.s{i}.b{b}");
                params.insert(format!("{p}.ln1.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
                params.insert(format!("{p}.ln1.b"), ArrayD::zeros(IxDyn(&[d])));
                for name in ["wq", "wk", "wv", "wo"] {
                    params.insert(format!("{p}.attn.{name}"), xavier(&mut rng, &[d, d], d, d));
                }
                for name in ["bq", "bk", "bv", "bo"] {
                    params.insert(format!("{p}.attn.{name}"), ArrayD::zeros(IxDyn(&[d])));
                }
                params.insert(format!("{p}.ln2.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
                params.insert(format!("{p}.ln2.b"), ArrayD::zeros(IxDyn(&[d])));
                let hidden = d * config.mlp_ratio;
                params.insert(format!("{p}.mlp.w1"), xavier(&mut rng, &[d, hidden], d, hidden));
                params.insert(format!("{p}.mlp.b1"), ArrayD::zeros(IxDyn(&[hidden])));
                params.insert(format!("{p}.mlp.w2"), xavier(&mut rng, &[hidden, d], hidden, d));
                params.insert(format!("{p}.mlp.b2"), ArrayD::zeros(IxDyn(&[d])));
            }
            cin = d;
        }

        let f = config.fpn_channels;
        for (i, s) in config.stages.iter().enumerate() {
            let d = s.embed_dim;
            params.insert(format!("dec.lat{i}.w"), xavier(&mut rng, &[f, d, 1, 1], d, f));
            params.insert(format!("dec.lat{i}.b"), ArrayD::zeros(IxDyn(&[f])));
        }
        params.insert("dec.smooth.w".into(), xavier(&mut rng, &[f, f, 3, 3], f * 9, f));
        params.insert("dec.smooth.b".into(), ArrayD::zeros(IxDyn(&[f])));
        params.insert("dec.head1.w".into(), xavier(&mut rng, &[f, f, 3, 3], f * 9, f));
        params.insert("dec.head1.b".into(), ArrayD::zeros(IxDyn(&[f])));
        let c = config.num_classes;
        // Zero-initialized prediction convs: training starts from uniform
        // class probabilities instead of a saturated softmax.
        params.insert("dec.head2.w".into(), ArrayD::zeros(IxDyn(&[c, f, 1, 1])));
        params.insert("dec.head2.b".into(), ArrayD::zeros(IxDyn(&[c])));

        let k = config.local_proj_dim;
        params.insert("proj.local1.w".into(), xavier(&mut rng, &[f, f, 3, 3], f * 9, f));
        params.insert("proj.local1.b".into(), ArrayD::zeros(IxDyn(&[f])));
        params.insert("proj.local2.w".into(), xavier(&mut rng, &[k, f, 1, 1], f, k));
        params.insert("proj.local2.b".into(), ArrayD::zeros(IxDyn(&[k])));
        let g = config.global_proj_dim;
        params.insert("proj.global.w".into(), xavier(&mut rng, &[g, f, 1, 1], f, g));
        params.insert("proj.global.b".into(), ArrayD::zeros(IxDyn(&[g])));

        params.insert("aux.w1".into(), xavier(&mut rng, &[f, 2 * f, 3, 3], 2 * f * 9, f));
        params.insert("aux.b1".into(), ArrayD::zeros(IxDyn(&[f])));
        params.insert("aux.w2".into(), ArrayD::zeros(IxDyn(&[c, f, 1, 1])));
        params.insert("aux.b2".into(), ArrayD::zeros(IxDyn(&[c])));

        Ok(ModelState { params, step_count: 0 })
    }

    /// Adopts externally provided arrays by parameter name; unknown names are
    /// ignored, shape clashes are errors.
    pub fn adopt_parameters(
        &mut self,
        source: &IndexMap<String, ArrayD<f64>>,
    ) -> Result<usize, NetError> {
        let mut adopted = 0;
        for (name, value) in source {
            if let Some(slot) = self.params.get_mut(name) {
                if slot.shape() != value.shape() {
                    return Err(NetError::Shape(format!(
                        "parameter {name}: expected {:?}, got {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value.clone();
                adopted += 1;
            }
        }
        Ok(adopted)
    }
}

/// Parameters bound onto a tape, either as leaves (training) or constants
/// (evaluation / teacher).
pub struct BoundParams {
    pub vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn leaves(tape: &Tape, state: &ModelState) -> BoundParams {
        BoundParams {
            vars: state
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn constants(tape: &Tape, state: &ModelState) -> BoundParams {
        BoundParams {
            vars: state
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Tape-level forward products consumed by the trainer.
pub struct ForwardVars {
    /// `[C, H, W]` class logits at input resolution.
    pub logits: Var,
    /// `[F, h0, w0]` fused decoder features (the penultimate representation).
    pub fused: Var,
    /// Per-stage `[D_i, h_i, w_i]` encoder outputs.
    pub stage_features: Vec<Var>,
    /// Captured attention: per block (the final two of the last stage), per
    /// head, an `[N, N]` row-stochastic matrix.
    pub attention: Vec<Vec<Var>>,
}

/// Plain-array forward products.
pub struct ForwardOutput {
    pub logits: Array3<f64>,
    pub fused: Array3<f64>,
    pub stage_features: Vec<Array3<f64>>,
    pub attention: Option<Vec<Vec<Array2<f64>>>>,
}

/// Row-stochastic attention matrices for pre-projected queries and keys,
/// one `[N, N]` matrix per head, scaled by `1 / sqrt(D / H)`.
pub fn attention_heads(q: &Var, k: &Var, heads: usize) -> Result<Vec<Var>, NetError> {
    let d_model = q.shape()[1];
    if d_model % heads != 0 {
        return Err(NetError::Config(format!(
            "model dim {d_model} not divisible by {heads} heads"
        )));
    }
    let d = d_model / heads;
    let scale = 1.0 / (d as f64).sqrt();
    Ok((0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * d, d);
            let kh = k.slice_cols(h * d, d);
            qh.matmul(&kh.transpose2()).mul_scalar(scale).softmax_rows()
        })
        .collect())
}

/// Plain-array variant of [`attention_heads`].
pub fn attention_matrix(
    q: &Array2<f64>,
    k: &Array2<f64>,
    heads: usize,
) -> Result<Vec<Array2<f64>>, NetError> {
    if q.dim() != k.dim() {
        return Err(NetError::Shape(format!("{:?} vs {:?}", q.dim(), k.dim())));
    }
    let tape = Tape::new();
    let qv = tape.constant(q.clone().into_dyn());
    let kv = tape.constant(k.clone().into_dyn());
    Ok(attention_heads(&qv, &kv, heads)?
        .into_iter()
        .map(|v| {
            v.value()
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        })
        .collect())
}

fn attention_block(
    params: &BoundParams,
    prefix: &str,
    x: &Var,
    heads: usize,
    capture: &mut Option<&mut Vec<Vec<Var>>>,
) -> Var {
    let normed = x.layer_norm(
        params.get(&format!("{prefix}.ln1.g")),
        params.get(&format!("{prefix}.ln1.b")),
        1e-5,
    );
    let q = normed.linear(
        params.get(&format!("{prefix}.attn.wq")),
        params.get(&format!("{prefix}.attn.bq")),
    );
    let k = normed.linear(
        params.get(&format!("{prefix}.attn.wk")),
        params.get(&format!("{prefix}.attn.bk")),
    );
    let v = normed.linear(
        params.get(&format!("{prefix}.attn.wv")),
        params.get(&format!("{prefix}.attn.bv")),
    );
    let att = attention_heads(&q, &k, heads).expect("validated config");
    if let Some(sink) = capture {
        sink.push(att.clone());
    }
    let d = q.shape()[1] / heads;
    let per_head: Vec<Var> = att
        .iter()
        .enumerate()
        .map(|(h, a)| a.matmul(&v.slice_cols(h * d, d)))
        .collect();
    let merged = Var::concat_cols(&per_head).linear(
        params.get(&format!("{prefix}.attn.wo")),
        params.get(&format!("{prefix}.attn.bo")),
    );
    let x = x.add(&merged);

    let normed = x.layer_norm(
        params.get(&format!("{prefix}.ln2.g")),
        params.get(&format!("{prefix}.ln2.b")),
        1e-5,
    );
    let hidden = normed
        .linear(
            params.get(&format!("{prefix}.mlp.w1")),
            params.get(&format!("{prefix}.mlp.b1")),
        )
        .gelu()
        .linear(
            params.get(&format!("{prefix}.mlp.w2")),
            params.get(&format!("{prefix}.mlp.b2")),
        );
    x.add(&hidden)
}

/// Full forward pass on an existing tape.
pub fn forward_vars(
    tape: &Tape,
    params: &BoundParams,
    config: &NetworkConfig,
    image: &Array2<f64>,
    capture_attention: bool,
) -> ForwardVars {
    let (h, w) = image.dim();
    let chw = image
        .clone()
        .into_shape_with_order((1, h, w))
        .unwrap()
        .into_dyn();
    let mut x = tape.constant(chw);
    let mut stage_features = Vec::new();
    let mut attention: Vec<Vec<Var>> = Vec::new();
    let last_stage = config.stages.len() - 1;

    for (i, s) in config.stages.iter().enumerate() {
        let pad = s.patch_size / 2;
        let embedded = x.conv2d(
            params.get(&format!("enc.s{i}.embed.w")),
            params.get(&format!("enc.s{i}.embed.b")),
            s.stride,
            pad,
        );
        let shape = embedded.shape();
        let (sh, sw) = (shape[1], shape[2]);
        let mut tokens = embedded.tokens_from_chw().layer_norm(
            params.get(&format!("enc.s{i}.embed_ln.g")),
            params.get(&format!("enc.s{i}.embed_ln.b")),
            1e-5,
        );
        for b in 0..s.num_blocks {
            // Keep the attention maps of the final two blocks of the last stage.
            let keep = capture_attention && i == last_stage && b + 2 >= s.num_blocks;
            let mut sink = if keep { Some(&mut attention) } else { None };
            tokens = attention_block(
                params,
                &format!("enc.s{i}.b{b}"),
                &tokens,
                s.num_heads,
                &mut sink,
            );
        }
        x = tokens.tokens_to_chw(sh, sw);
        stage_features.push(x.clone());
    }

    // FPN: lateral 1x1 projections merged top-down at the finest resolution.
    let laterals: Vec<Var> = stage_features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.conv2d(
                params.get(&format!("dec.lat{i}.w")),
                params.get(&format!("dec.lat{i}.b")),
                1,
                0,
            )
        })
        .collect();
    let mut top = laterals[last_stage].clone();
    for i in (0..last_stage).rev() {
        let shape = laterals[i].shape();
        top = laterals[i].add(&top.upsample_bilinear(shape[1], shape[2]));
    }
    let fused = top
        .conv2d(params.get("dec.smooth.w"), params.get("dec.smooth.b"), 1, 1)
        .gelu();
    let logits = fused
        .conv2d(params.get("dec.head1.w"), params.get("dec.head1.b"), 1, 1)
        .gelu()
        .conv2d(params.get("dec.head2.w"), params.get("dec.head2.b"), 1, 0)
        .upsample_bilinear(h, w);

    ForwardVars {
        logits,
        fused,
        stage_features,
        attention,
    }
}

/// L2-normalized local projection grid `[K, S, S]` from fused features.
pub fn project_local(params: &BoundParams, config: &NetworkConfig, fused: &Var) -> Var {
    let s = config.local_proj_grid;
    let k = config.local_proj_dim;
    fused
        .conv2d(params.get("proj.local1.w"), params.get("proj.local1.b"), 1, 1)
        .gelu()
        .conv2d(params.get("proj.local2.w"), params.get("proj.local2.b"), 1, 0)
        .adaptive_avg_pool(s, s)
        .reshape(&[k, s * s])
        .l2_normalize_cols()
        .reshape(&[k, s, s])
}

/// L2-normalized global projection vector from fused features.
pub fn project_global(params: &BoundParams, fused: &Var) -> Var {
    fused
        .conv2d(params.get("proj.global.w"), params.get("proj.global.b"), 1, 0)
        .global_max_pool()
        .l2_normalize_vec()
}

/// Auxiliary decoder for patch prediction: concatenated `[2F, h, w]` features
/// to `[C, h, w]` logits.
pub fn aux_decode(params: &BoundParams, features: &Var) -> Var {
    features
        .conv2d(params.get("aux.w1"), params.get("aux.b1"), 1, 1)
        .gelu()
        .conv2d(params.get("aux.w2"), params.get("aux.b2"), 1, 0)
}

/// Evaluation-mode forward pass returning plain arrays.
pub fn forward(
    state: &ModelState,
    config: &NetworkConfig,
    image: &Array2<f64>,
    capture_attention: bool,
) -> ForwardOutput {
    let tape = Tape::new();
    let params = BoundParams::constants(&tape, state);
    let out = forward_vars(&tape, &params, config, image, capture_attention);
    let to3 = |v: &Var| {
        v.value()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned()
    };
    ForwardOutput {
        logits: to3(&out.logits),
        fused: to3(&out.fused),
        stage_features: out.stage_features.iter().map(&to3).collect(),
        attention: if capture_attention {
            Some(
                out.attention
                    .iter()
                    .map(|block| {
                        block
                            .iter()
                            .map(|h| {
                                h.value()
                                    .view()
                                    .into_dimensionality::<ndarray::Ix2>()
                                    .unwrap()
                                    .to_owned()
                            })
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        },
    }
}

/// Per-pixel class probabilities from `[C, H, W]` logits.
pub fn class_probs(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let max = (0..c)
                .map(|k| logits[[k, i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits[[k, i, j]] - max).exp();
                out[[k, i, j]] = e;
                z += e;
            }
            for k in 0..c {
                out[[k, i, j]] /= z;
            }
        }
    }
    out
}

/// Per-pixel argmax class map from `[C, H, W]` logits or probabilities.
pub fn argmax_classes(scores: &Array3<f64>) -> Array2<u8> {
    let (c, h, w) = scores.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        for k in 1..c {
            if scores[[k, i, j]] > scores[[best, i, j]] {
                best = k;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{max_relative_error, numeric_gradient};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            stages: vec![
                StageConfig { patch_size: 3, stride: 2, embed_dim: 8, num_heads: 2, num_blocks: 1 },
                StageConfig { patch_size: 3, stride: 2, embed_dim: 12, num_heads: 2, num_blocks: 2 },
            ],
            num_classes: 2,
            fpn_channels: 8,
            local_proj_dim: 6,
            local_proj_grid: 2,
            global_proj_dim: 6,
            mlp_ratio: 2,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn config_validation_catches_bad_head_split() {
        let mut cfg = tiny_config();
        cfg.stages[0].num_heads = 3;
        assert!(matches!(cfg.validate(), Err(NetError::Config(_))));
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg, 0).unwrap();
        let img = random_image(16, 16, 1);
        let a = forward(&state, &cfg, &img, true);
        let b = forward(&state, &cfg, &img, true);
        assert_eq!(a.logits.dim(), (2, 16, 16));
        assert_eq!(a.fused.dim().0, cfg.fpn_channels);
        assert_eq!(a.stage_features.len(), 2);
        assert!(a
            .logits
            .iter()
            .zip(b.logits.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        // Final two blocks of the last stage are captured.
        let att = a.attention.unwrap();
        assert_eq!(att.len(), 2);
        assert_eq!(att[0].len(), 2);
    }

    #[test]
    fn per_pixel_softmax_is_normalized() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg, 2).unwrap();
        let img = random_image(16, 16, 3);
        let probs = class_probs(&forward(&state, &cfg, &img, false).logits);
        let (c, h, w) = probs.dim();
        for i in 0..h {
            for j in 0..w {
                let s: f64 = (0..c).map(|k| probs[[k, i, j]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg, 4).unwrap();
        let img = random_image(16, 16, 5);
        let att = forward(&state, &cfg, &img, true).attention.unwrap();
        for block in &att {
            for head in block {
                for row in head.rows() {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn attention_matrix_uniform_logits() {
        // Q K^T = 0 so every row is uniform.
        let q = Array2::zeros((2, 4));
        let k = Array2::zeros((2, 4));
        let att = attention_matrix(&q, &k, 1).unwrap();
        assert!(att[0].iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn attention_matrix_self_similarity_dominates() {
        // Orthogonal one-hot rows: each token attends most to itself.
        let mut q = Array2::zeros((4, 4));
        for i in 0..4 {
            q[[i, i]] = 4.0;
        }
        let att = attention_matrix(&q, &q, 1).unwrap();
        for i in 0..4 {
            let row = att[0].row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(att[0][[i, i]], max);
        }
    }

    #[test]
    fn attention_matrix_rejects_bad_heads() {
        let q = Array2::zeros((2, 4));
        assert!(attention_matrix(&q, &q, 3).is_err());
    }

    #[test]
    fn projection_heads_are_unit_norm() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg, 6).unwrap();
        let img = random_image(16, 16, 7);
        let tape = Tape::new();
        let params = BoundParams::constants(&tape, &state);
        let out = forward_vars(&tape, &params, &cfg, &img, false);
        let local = project_local(&params, &cfg, &out.fused);
        assert_eq!(local.shape(), vec![6, 2, 2]);
        let lv = local.value();
        for si in 0..2 {
            for sj in 0..2 {
                let n: f64 = (0..6).map(|k| lv[[k, si, sj]].powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let global = project_global(&params, &out.fused);
        let gn: f64 = global.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((gn - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fpn_consumes_every_stage() {
        let cfg = tiny_config();
        let mut base = ModelState::init(&cfg, 8).unwrap();
        // The prediction conv starts at zero; give it weight so stage
        // contributions reach the logits.
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        base.params["dec.head2.w"].mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let img = random_image(16, 16, 9);
        let reference = forward(&base, &cfg, &img, false).logits;
        for i in 0..cfg.stages.len() {
            let mut ablated = base.clone();
            ablated.params[&format!("dec.lat{i}.w")].fill(0.0);
            ablated.params[&format!("dec.lat{i}.b")].fill(0.0);
            let out = forward(&ablated, &cfg, &img, false).logits;
            let diff: f64 = reference
                .iter()
                .zip(out.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-6, "stage {i} contributes nothing");
        }
    }

    #[test]
    fn projection_head_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fused_arr = ArrayD::from_shape_fn(IxDyn(&[8, 4, 4]), |_| rng.random_range(-1.0..1.0));

        for pname in ["proj.local2.w", "proj.global.w", "proj.local1.b"] {
            let build = |p: &ArrayD<f64>| -> f64 {
                let tape = Tape::new();
                let mut st = state.clone();
                st.params[pname] = p.clone();
                let params = BoundParams::leaves(&tape, &st);
                let fused = tape.constant(fused_arr.clone());
                let local = project_local(&params, &cfg, &fused);
                let global = project_global(&params, &fused);
                local.sum().add(&global.mul(&global).sum()).scalar_value()
            };
            let tape = Tape::new();
            let params = BoundParams::leaves(&tape, &state);
            let fused = tape.constant(fused_arr.clone());
            let local = project_local(&params, &cfg, &fused);
            let global = project_global(&params, &fused);
            let loss = local.sum().add(&global.mul(&global).sum());
            let grads = loss.backward();
            let analytic = vec![grads.get(params.get(pname))];
            let numeric = numeric_gradient(
                &|xs: &[ArrayD<f64>]| build(&xs[0]),
                &[state.params[pname].clone()],
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{pname}: relative error {err}");
        }
    }

    #[test]
    fn adopt_parameters_by_name() {
        let cfg = tiny_config();
        let mut state = ModelState::init(&cfg, 12).unwrap();
        let mut donor = IndexMap::new();
        donor.insert(
            "dec.head2.b".to_string(),
            ArrayD::from_elem(IxDyn(&[2]), 0.5),
        );
        donor.insert("unknown.param".to_string(), ArrayD::zeros(IxDyn(&[3])));
        let adopted = state.adopt_parameters(&donor).unwrap();
        assert_eq!(adopted, 1);
        assert_eq!(state.params["dec.head2.b"][[0]], 0.5);

        donor.insert("dec.head2.b".to_string(), ArrayD::zeros(IxDyn(&[5])));
        assert!(state.adopt_parameters(&donor).is_err());
    }
}
