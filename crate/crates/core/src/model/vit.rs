//! The pre-norm vision-transformer encoder, its parameter set, and the
//! masked-token and classification objectives.

use rand_distr::{Distribution, Normal};

use super::linalg::Tensor;
use super::tape::{Tape, VarId};
use super::{ModelConfig, ModelError};
use crate::tokenizer::TokenGrid;
use crate::util::{mix_seed, rng_from};

const LN_EPS: f64 = 1e-5;

/// Builds the model-input patch matrix (n_patches x patch_dim) from an
/// image, replicating the single channel when the config asks for more.
pub fn patch_matrix(
    img: &crate::raster::RasterImage,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let grid = crate::raster::to_patches(img, config.patch_size)
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    if grid.n_patches() != config.n_patches() {
        return Err(ModelError::Shape(format!(
            "image yields {} patches, config expects {}",
            grid.n_patches(),
            config.n_patches()
        )));
    }
    let mut data = Vec::with_capacity(config.n_patches() * config.patch_dim());
    for patch in &grid.patches {
        for _ in 0..config.channels {
            data.extend(patch.iter().map(|&p| p as f64));
        }
    }
    Ok(Tensor::from_vec(
        config.n_patches(),
        config.patch_dim(),
        data,
    ))
}

/// Ordered (name, rows, cols) for every learnable array of a configuration.
pub fn named_param_shapes(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let h = config.hidden;
    let mut shapes = vec![
        ("patch_embed.weight".to_string(), config.patch_dim(), h),
        ("patch_embed.bias".to_string(), 1, h),
        ("class_token".to_string(), 1, h),
        ("pos_embed".to_string(), config.seq_len(), h),
        ("mask_embed".to_string(), 1, h),
    ];
    for i in 0..config.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        shapes.push((p("norm1.gain"), 1, h));
        shapes.push((p("norm1.bias"), 1, h));
        for proj in ["q", "k", "v", "out"] {
            shapes.push((p(&format!("attn.{proj}.weight")), h, h));
            shapes.push((p(&format!("attn.{proj}.bias")), 1, h));
        }
        shapes.push((p("norm2.gain"), 1, h));
        shapes.push((p("norm2.bias"), 1, h));
        shapes.push((p("mlp.fc1.weight"), h, config.mlp_dim()));
        shapes.push((p("mlp.fc1.bias"), 1, config.mlp_dim()));
        shapes.push((p("mlp.fc2.weight"), config.mlp_dim(), h));
        shapes.push((p("mlp.fc2.bias"), 1, h));
    }
    shapes.push(("norm.gain".to_string(), 1, h));
    shapes.push(("norm.bias".to_string(), 1, h));
    shapes.push(("mim_head.weight".to_string(), h, config.vocab_size));
    shapes.push(("cls_head.weight".to_string(), h, config.n_classes));
    shapes
}

/// Exact learnable-scalar count for a configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    named_param_shapes(config).iter().map(|(_, r, c)| r * c).sum()
}

/// All learnable arrays, keyed by name in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Seeded initialization. Every tensor draws from its own stream keyed by
    /// (seed, name), so any subset (e.g. a freshly attached head) is
    /// reproducible independently of the rest.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid deviation");
        let entries = named_param_shapes(config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let tensor = if name.ends_with(".gain") {
                    Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
                } else if name.ends_with(".bias") {
                    Tensor::zeros(rows, cols)
                } else {
                    let mut rng = rng_from(mix_seed(seed, &name));
                    Tensor::from_vec(
                        rows,
                        cols,
                        (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
                    )
                };
                (name, tensor)
            })
            .collect();
        ModelParams { entries }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|(_, t)| (t.rows, t.cols)).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn validate_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = named_param_shapes(config);
        if expected.len() != self.entries.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, rows, cols), (got_name, t)) in expected.iter().zip(&self.entries) {
            if name != got_name || t.rows != *rows || t.cols != *cols {
                return Err(ModelError::Shape(format!(
                    "parameter {got_name} has shape {}x{}, expected {name} {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
        }
        Ok(())
    }
}

/// Parameter leaves bound onto a tape for one forward/backward pass.
pub struct BoundParams {
    ids: Vec<VarId>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut ids = Vec::with_capacity(params.entries.len());
        let mut names = Vec::with_capacity(params.entries.len());
        for (slot, (name, tensor)) in params.entries.iter().enumerate() {
            ids.push(tape.param(tensor.clone(), slot));
            names.push(name.clone());
        }
        BoundParams { ids, names }
    }

    pub fn id(&self, name: &str) -> VarId {
        let at = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[at]
    }
}

/// Encoder activations exposed for the objectives, saliency, and tests.
pub struct EncoderOutput {
    /// Final-layer-norm output, (1 + n_patches) x hidden.
    pub normed: VarId,
    /// Representations entering the final transformer block. Attribution
    /// hooks here: downstream of this point the class logit still mixes
    /// patch tokens through the final block's attention, so patch rows carry
    /// gradient. (At the block's output only the class row does.)
    pub saliency_target: VarId,
    /// Row-softmax attention probabilities, one id per (layer, head).
    pub attn_probs: Vec<VarId>,
}

/// Pre-norm encoder over one image's patch matrix (n_patches x patch_dim).
/// Masked patch embeddings are replaced by the mask embedding before the
/// position embeddings are added.
pub fn forward_encoder(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    patch_matrix: &Tensor,
    mask: Option<&[usize]>,
) -> Result<EncoderOutput, ModelError> {
    config.validate()?;
    if patch_matrix.rows != config.n_patches() || patch_matrix.cols != config.patch_dim() {
        return Err(ModelError::Shape(format!(
            "patch matrix {}x{}, expected {}x{}",
            patch_matrix.rows,
            patch_matrix.cols,
            config.n_patches(),
            config.patch_dim()
        )));
    }
    if let Some(mask) = mask {
        if mask.iter().any(|&i| i >= config.n_patches()) {
            return Err(ModelError::Argument("mask index out of range".into()));
        }
    }

    let patches = tape.leaf(patch_matrix.clone());
    let embedded = tape.matmul(patches, bound.id("patch_embed.weight"));
    let mut x = tape.add_row(embedded, bound.id("patch_embed.bias"));
    if let Some(mask) = mask {
        if !mask.is_empty() {
            x = tape.replace_rows(x, bound.id("mask_embed"), mask);
        }
    }
    x = tape.prepend_row(bound.id("class_token"), x);
    x = tape.add(x, bound.id("pos_embed"));

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut attn_probs = Vec::with_capacity(config.layers * config.heads);
    let mut saliency_target = x;
    for layer in 0..config.layers {
        if layer + 1 == config.layers {
            saliency_target = x;
        }
        let p = |s: &str| format!("blocks.{layer}.{s}");
        let normed = tape.layer_norm(x, bound.id(&p("norm1.gain")), bound.id(&p("norm1.bias")), LN_EPS);
        let project = |tape: &mut Tape, what: &str| {
            let w = bound.id(&p(&format!("attn.{what}.weight")));
            let b = bound.id(&p(&format!("attn.{what}.bias")));
            let prod = tape.matmul(normed, w);
            tape.add_row(prod, b)
        };
        let q = project(tape, "q");
        let k = project(tape, "k");
        let v = project(tape, "v");
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled);
            attn_probs.push(probs);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let proj = tape.matmul(ctx, bound.id(&p("attn.out.weight")));
        let proj = tape.add_row(proj, bound.id(&p("attn.out.bias")));
        x = tape.add(x, proj);

        let normed2 = tape.layer_norm(x, bound.id(&p("norm2.gain")), bound.id(&p("norm2.bias")), LN_EPS);
        let up = tape.matmul(normed2, bound.id(&p("mlp.fc1.weight")));
        let up = tape.add_row(up, bound.id(&p("mlp.fc1.bias")));
        let act = tape.gelu(up);
        let down = tape.matmul(act, bound.id(&p("mlp.fc2.weight")));
        let down = tape.add_row(down, bound.id(&p("mlp.fc2.bias")));
        x = tape.add(x, down);
    }

    let normed = tape.layer_norm(x, bound.id("norm.gain"), bound.id("norm.bias"), LN_EPS);
    Ok(EncoderOutput {
        normed,
        saliency_target,
        attn_probs,
    })
}

/// Mean cross-entropy over the masked positions' token predictions.
pub fn mim_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    patch_matrix: &Tensor,
    token_targets: &TokenGrid,
    mask: &[usize],
) -> Result<VarId, ModelError> {
    if mask.is_empty() {
        return Err(ModelError::Argument("mask must be non-empty".into()));
    }
    if token_targets.n_tokens() != config.n_patches() {
        return Err(ModelError::Shape(format!(
            "token grid has {} entries, expected {}",
            token_targets.n_tokens(),
            config.n_patches()
        )));
    }
    let enc = forward_encoder(tape, bound, config, patch_matrix, Some(mask))?;
    // +1 skips the class token row.
    let rows: Vec<usize> = mask.iter().map(|&i| i + 1).collect();
    let selected = tape.select_rows(enc.normed, &rows);
    let logits = tape.matmul(selected, bound.id("mim_head.weight"));
    let targets: Vec<usize> = mask
        .iter()
        .map(|&i| token_targets.tokens[i] as usize)
        .collect();
    if targets.iter().any(|&t| t >= config.vocab_size) {
        return Err(ModelError::Argument("token target out of range".into()));
    }
    Ok(tape.cross_entropy_mean(logits, &targets))
}

/// Class logits from the class-token representation; no masking applied.
pub fn cls_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    patch_matrix: &Tensor,
) -> Result<VarId, ModelError> {
    let enc = forward_encoder(tape, bound, config, patch_matrix, None)?;
    let cls = tape.select_rows(enc.normed, &[0]);
    Ok(tape.matmul(cls, bound.id("cls_head.weight")))
}

/// Classification cross-entropy for one image.
pub fn cls_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    patch_matrix: &Tensor,
    label: usize,
) -> Result<VarId, ModelError> {
    if label >= config.n_classes {
        return Err(ModelError::Argument(format!(
            "label {label} out of range for {} classes",
            config.n_classes
        )));
    }
    let logits = cls_forward(tape, bound, config, patch_matrix)?;
    Ok(tape.cross_entropy_mean(logits, &[label]))
}

/// Runs a classification forward pass, backpropagates the target logit, and
/// returns (per-token activations, per-token gradients) of the last encoder
/// block's patch rows, each n_patches x hidden. This is the input Grad-CAM
/// needs.
pub fn saliency_grad(
    params: &ModelParams,
    config: &ModelConfig,
    patch_matrix: &Tensor,
    target_class: usize,
) -> Result<(Tensor, Tensor, Vec<f64>), ModelError> {
    if target_class >= config.n_classes {
        return Err(ModelError::Argument("target class out of range".into()));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let enc = forward_encoder(&mut tape, &bound, config, patch_matrix, None)?;
    let cls = tape.select_rows(enc.normed, &[0]);
    let logits = tape.matmul(cls, bound.id("cls_head.weight"));
    let target = tape.pick(logits, 0, target_class);
    tape.backward(target);

    let acts = tape.value(enc.saliency_target).clone();
    let grads = tape
        .grad(enc.saliency_target)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(acts.rows, acts.cols));
    // Drop the class-token row; saliency lives on patch tokens.
    let strip = |t: &Tensor| {
        Tensor::from_vec(
            t.rows - 1,
            t.cols,
            t.data[t.cols..].to_vec(),
        )
    };
    let logit_values = tape.value(logits).data.clone();
    Ok((strip(&acts), strip(&grads), logit_values))
}
