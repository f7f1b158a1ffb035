//! The full classifier: patch embedding, window-attention block pairs,
//! patch merging, final norm with spatial average pooling, and one sigmoid
//! head per pathology.

use crate::attention::{window_mha, MhaParams};
use crate::config::{Activation, HeadVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{concat_last, ParamSet, Tensor};
use crate::windowing::{build_shift_mask, cyclic_shift, window_partition, window_reverse, AttnMask, WindowGrid};

/// Weight `[in, out]` with optional bias `[out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    fn init(input: usize, output: usize, bias: bool, rng: &mut SplitMix64) -> Self {
        LinearParams {
            weight: Tensor::trunc_normal(&[input, output], 0.02, rng),
            bias: bias.then(|| Tensor::parameter(vec![0.0; output], &[output]).unwrap()),
        }
    }

    /// Zero weight and bias; used for each head's final projection so a
    /// freshly built model predicts exactly 0.5 everywhere.
    fn zeroed(input: usize, output: usize, bias: bool) -> Self {
        LinearParams {
            weight: Tensor::parameter(vec![0.0; input * output], &[input, output]).unwrap(),
            bias: bias.then(|| Tensor::parameter(vec![0.0; output], &[output]).unwrap()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::parameter(vec![1.0; dim], &[dim]).unwrap(),
            beta: Tensor::parameter(vec![0.0; dim], &[dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, eps)
    }
}

/// One transformer block: pre-norm window attention and a pre-norm MLP,
/// both residual.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: MhaParams,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn init(dim: usize, heads: usize, hidden: usize, qkv_bias: bool, rng: &mut SplitMix64) -> Result<Self> {
        Ok(BlockParams {
            norm1: LayerNormParams::init(dim),
            attn: MhaParams::init(dim, heads, qkv_bias, rng)?,
            norm2: LayerNormParams::init(dim),
            fc1: LinearParams::init(dim, hidden, true, rng),
            fc2: LinearParams::init(hidden, dim, true, rng),
        })
    }
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub blocks: Vec<BlockParams>,
    /// Patch-merge projection into the next stage; absent on the last stage.
    pub merge: Option<LinearParams>,
}

/// Per-pathology MLP: hidden layers then a final projection to one logit.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub layers: Vec<LinearParams>,
}

#[derive(Clone, Debug)]
pub enum Heads {
    /// Independent MLP per class.
    PerClass(Vec<HeadParams>),
    /// Single shared linear layer emitting all class logits.
    Shared(LinearParams),
}

/// All learnable state plus the per-stage attention masks derived from the
/// configuration. Parameters are shared read-only during inference; training
/// replaces them functionally through [`SwinModel::visit_params_mut`].
/// Cloning shares the underlying tensors.
#[derive(Clone)]
pub struct SwinModel {
    pub patch_embed: LinearParams,
    pub stages: Vec<StageParams>,
    pub final_norm: LayerNormParams,
    pub heads: Heads,
    shift_masks: Vec<Option<AttnMask>>,
}

impl SwinModel {
    /// Fresh model. Linear weights are truncated-normal (sigma 0.02), biases
    /// and norm offsets zero, norm scales one, and each head's final layer is
    /// zeroed, so the initial output probability is 0.5 for every class.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let patch_dim = config.patch_size * config.patch_size * 3;
        let patch_embed = LinearParams::init(patch_dim, config.embed_dim, true, &mut rng);

        let mut stages = Vec::with_capacity(config.num_stages());
        for s in 0..config.num_stages() {
            let dim = config.stage_dim(s);
            let hidden = (dim as f64 * config.mlp_ratio) as usize;
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for _ in 0..config.depths[s] {
                blocks.push(BlockParams::init(
                    dim,
                    config.num_heads[s],
                    hidden,
                    config.qkv_bias,
                    &mut rng,
                )?);
            }
            let merge = (s + 1 < config.num_stages())
                .then(|| LinearParams::init(4 * dim, 2 * dim, false, &mut rng));
            stages.push(StageParams { blocks, merge });
        }

        let final_dim = config.final_dim();
        let final_norm = LayerNormParams::init(final_dim);

        let heads = match config.head_variant {
            HeadVariant::Headless => {
                Heads::Shared(LinearParams::zeroed(final_dim, config.num_classes, true))
            }
            _ => {
                let widths = config.head_widths();
                let mut all = Vec::with_capacity(config.num_classes);
                for _ in 0..config.num_classes {
                    let mut layers = Vec::with_capacity(widths.len() + 1);
                    let mut prev = final_dim;
                    for &w in &widths {
                        layers.push(LinearParams::init(prev, w, true, &mut rng));
                        prev = w;
                    }
                    layers.push(LinearParams::zeroed(prev, 1, true));
                    all.push(HeadParams { layers });
                }
                Heads::PerClass(all)
            }
        };

        Ok(SwinModel {
            patch_embed,
            stages,
            final_norm,
            heads,
            shift_masks: build_masks(config)?,
        })
    }

    /// Patch embedding: each non-overlapping `P x P x 3` patch is flattened
    /// and linearly projected to the embed dim. `[B, H, W, 3] -> [B, H/P, W/P, C]`.
    pub fn patch_embed_forward(&self, images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
        let patches = extract_patches(images, config.patch_size)?;
        let [b, h, w, pd] = patches.shape()[..] else {
            unreachable!()
        };
        let tokens = self
            .patch_embed
            .forward(&patches.reshape(&[b * h * w, pd])?)?;
        tokens.reshape(&[b, h, w, config.embed_dim])
    }

    /// Backbone cascade: patch embed, then per stage the block sequence and
    /// (between stages) a patch merge. Returns the final feature map and the
    /// activation captured after the first layer norm of the last block,
    /// which is what saliency maps differentiate against.
    pub fn backbone_forward(&self, images: &Tensor, config: &ModelConfig) -> Result<BackboneOutput> {
        let mut z = self.patch_embed_forward(images, config)?;
        let last_stage = self.stages.len() - 1;
        let mut cam_activation = None;
        for (s, stage) in self.stages.iter().enumerate() {
            let res = config.stage_resolution(s);
            let win = config.effective_window(s);
            let shift = config.shift_size(s);
            let last_block = stage.blocks.len() - 1;
            for (b, block) in stage.blocks.iter().enumerate() {
                let shifted = b % 2 == 1 && shift > 0;
                let capture = (s == last_stage && b == last_block).then_some(&mut cam_activation);
                z = apply_block(
                    &z,
                    block,
                    res,
                    win,
                    if shifted { shift } else { 0 },
                    if shifted { self.shift_masks[s].as_ref() } else { None },
                    config,
                    capture,
                )?;
            }
            if let Some(merge) = &stage.merge {
                z = patch_merge(&z, merge)?;
            }
        }
        Ok(BackboneOutput {
            cam_activation: cam_activation.expect("last block ran"),
            features: z,
        })
    }

    /// Pre-sigmoid class logits: final layer norm over channels, spatial
    /// average pooling, then the head family. `[B, hf, wf, Cf] -> [B, classes]`.
    pub fn head_logits(&self, features: &Tensor, config: &ModelConfig) -> Result<Tensor> {
        let [b, h, w, c] = features.shape()[..] else {
            return Err(Error::ShapeMismatch {
                op: "head_logits",
                lhs: features.shape().to_vec(),
                rhs: vec![],
            });
        };
        if h != w || c != config.final_dim() {
            return Err(Error::ShapeMismatch {
                op: "head_logits",
                lhs: features.shape().to_vec(),
                rhs: vec![config.final_resolution(), config.final_resolution(), config.final_dim()],
            });
        }
        let normed = self.final_norm.forward(features, config.layer_norm_eps)?;
        let pooled = normed.avg_pool2d(h)?.reshape(&[b, c])?;
        match &self.heads {
            Heads::Shared(linear) => linear.forward(&pooled),
            Heads::PerClass(heads) => {
                let mut logits = Vec::with_capacity(heads.len());
                for head in heads {
                    let mut x = pooled.clone();
                    let last = head.layers.len() - 1;
                    for (i, layer) in head.layers.iter().enumerate() {
                        x = layer.forward(&x)?;
                        if i < last {
                            x = activate(&x, config.head_activation);
                        }
                    }
                    logits.push(x); // [B, 1]
                }
                concat_last(&logits)
            }
        }
    }

    /// Per-class probabilities in (0, 1): sigmoid over [`Self::head_logits`].
    pub fn head_forward(&self, features: &Tensor, config: &ModelConfig) -> Result<Tensor> {
        Ok(self.head_logits(features, config)?.sigmoid())
    }

    /// Full forward pass from images to per-class probabilities.
    pub fn forward_probs(&self, images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
        let backbone = self.backbone_forward(images, config)?;
        self.head_forward(&backbone.features, config)
    }

    /// Walk every parameter in a fixed structural order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        // the shared walker needs a mutable self; route through clone-free
        // raw pointers would be overkill, so mirror the mut walker instead
        visit_linear(&self.patch_embed, "patch_embed", &mut |p, t| f(p, t));
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stages.{s}.blocks.{b}");
                f(&format!("{prefix}.norm1.gamma"), &block.norm1.gamma);
                f(&format!("{prefix}.norm1.beta"), &block.norm1.beta);
                f(&format!("{prefix}.attn.wq"), &block.attn.wq);
                f(&format!("{prefix}.attn.wk"), &block.attn.wk);
                f(&format!("{prefix}.attn.wv"), &block.attn.wv);
                f(&format!("{prefix}.attn.wo"), &block.attn.wo);
                if let Some(bias) = &block.attn.bias {
                    for (name, t) in ["bq", "bk", "bv", "bo"].iter().zip(bias) {
                        f(&format!("{prefix}.attn.{name}"), t);
                    }
                }
                f(&format!("{prefix}.norm2.gamma"), &block.norm2.gamma);
                f(&format!("{prefix}.norm2.beta"), &block.norm2.beta);
                visit_linear(&block.fc1, &format!("{prefix}.mlp.fc1"), &mut |p, t| f(p, t));
                visit_linear(&block.fc2, &format!("{prefix}.mlp.fc2"), &mut |p, t| f(p, t));
            }
            if let Some(merge) = &stage.merge {
                visit_linear(merge, &format!("stages.{s}.merge"), &mut |p, t| f(p, t));
            }
        }
        f("final_norm.gamma", &self.final_norm.gamma);
        f("final_norm.beta", &self.final_norm.beta);
        match &self.heads {
            Heads::Shared(linear) => visit_linear(linear, "head", &mut |p, t| f(p, t)),
            Heads::PerClass(heads) => {
                for (c, head) in heads.iter().enumerate() {
                    for (l, layer) in head.layers.iter().enumerate() {
                        visit_linear(layer, &format!("heads.{c}.layers.{l}"), &mut |p, t| f(p, t));
                    }
                }
            }
        }
    }

    /// Mutable variant of [`Self::visit_params`]; paths are identical.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        visit_linear_mut(&mut self.patch_embed, "patch_embed", &mut f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let prefix = format!("stages.{s}.blocks.{b}");
                f(&format!("{prefix}.norm1.gamma"), &mut block.norm1.gamma);
                f(&format!("{prefix}.norm1.beta"), &mut block.norm1.beta);
                f(&format!("{prefix}.attn.wq"), &mut block.attn.wq);
                f(&format!("{prefix}.attn.wk"), &mut block.attn.wk);
                f(&format!("{prefix}.attn.wv"), &mut block.attn.wv);
                f(&format!("{prefix}.attn.wo"), &mut block.attn.wo);
                if let Some(bias) = &mut block.attn.bias {
                    for (name, t) in ["bq", "bk", "bv", "bo"].iter().zip(bias.iter_mut()) {
                        f(&format!("{prefix}.attn.{name}"), t);
                    }
                }
                f(&format!("{prefix}.norm2.gamma"), &mut block.norm2.gamma);
                f(&format!("{prefix}.norm2.beta"), &mut block.norm2.beta);
                visit_linear_mut(&mut block.fc1, &format!("{prefix}.mlp.fc1"), &mut f);
                visit_linear_mut(&mut block.fc2, &format!("{prefix}.mlp.fc2"), &mut f);
            }
            if let Some(merge) = &mut stage.merge {
                visit_linear_mut(merge, &format!("stages.{s}.merge"), &mut f);
            }
        }
        f("final_norm.gamma", &mut self.final_norm.gamma);
        f("final_norm.beta", &mut self.final_norm.beta);
        match &mut self.heads {
            Heads::Shared(linear) => visit_linear_mut(linear, "head", &mut f),
            Heads::PerClass(heads) => {
                for (c, head) in heads.iter_mut().enumerate() {
                    for (l, layer) in head.layers.iter_mut().enumerate() {
                        visit_linear_mut(layer, &format!("heads.{c}.layers.{l}"), &mut f);
                    }
                }
            }
        }
    }

    /// Flatten into a path-keyed set (paths are unique by construction).
    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.visit_params(|path, t| {
            ps.insert(path.to_string(), t.clone()).expect("unique paths");
        });
        ps
    }

    /// Rebuild a model from a flattened set; every path must be present with
    /// the shape the config implies, and no extras are allowed.
    pub fn from_params(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let mut model = SwinModel::init(config, 0)?;
        let mut used = 0usize;
        let mut problem = None;
        model.visit_params_mut(|path, slot| {
            if problem.is_some() {
                return;
            }
            match params.get(path) {
                Some(t) if t.shape() == slot.shape() => {
                    *slot = t.clone();
                    used += 1;
                }
                Some(t) => {
                    problem = Some(format!(
                        "parameter {path:?}: checkpoint shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    ));
                }
                None => problem = Some(format!("checkpoint is missing parameter {path:?}")),
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        if used != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model uses {used}",
                params.len()
            )));
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Parameter count of a single class head.
    pub fn params_per_head(&self) -> Option<usize> {
        match &self.heads {
            Heads::PerClass(heads) => Some(
                heads[0]
                    .layers
                    .iter()
                    .map(LinearParams::num_params)
                    .sum(),
            ),
            Heads::Shared(_) => None,
        }
    }
}

pub struct BackboneOutput {
    pub features: Tensor,
    /// Token map after the first layer norm of the last block, `[B, hf, wf, Cf]`.
    pub cam_activation: Tensor,
}

fn visit_linear(linear: &LinearParams, prefix: &str, f: &mut impl FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.weight"), &linear.weight);
    if let Some(b) = &linear.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn visit_linear_mut(linear: &mut LinearParams, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.weight"), &mut linear.weight);
    if let Some(b) = &mut linear.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn build_masks(config: &ModelConfig) -> Result<Vec<Option<AttnMask>>> {
    (0..config.num_stages())
        .map(|s| {
            let shift = config.shift_size(s);
            if shift == 0 {
                return Ok(None);
            }
            let res = config.stage_resolution(s);
            let grid = WindowGrid::new(res, res, config.effective_window(s), shift)?;
            Ok(Some(build_shift_mask(&grid)))
        })
        .collect()
}

fn activate(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => x.relu(),
        Activation::Gelu => x.gelu(),
    }
}

/// Rearrange `[B, H, W, 3]` into flattened patches `[B, H/P, W/P, 3*P*P]`.
pub fn extract_patches(images: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, h, w, c] = images.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "extract_patches",
            lhs: images.shape().to_vec(),
            rhs: vec![],
        });
    };
    if h % patch != 0 {
        return Err(Error::Divisibility { what: "image height", value: h, divisor: patch });
    }
    if w % patch != 0 {
        return Err(Error::Divisibility { what: "image width", value: w, divisor: patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    images
        .reshape(&[b, gh, patch, gw, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh, gw, patch * patch * c])
}

/// One pre-norm transformer block on a `[B, h, w, C]` token map. With
/// `shift > 0` the map is cyclically translated before windowing and the
/// mask blocks cross-region pairs; the translation is undone afterwards.
#[allow(clippy::too_many_arguments)]
fn apply_block(
    z: &Tensor,
    block: &BlockParams,
    res: usize,
    window: usize,
    shift: usize,
    mask: Option<&AttnMask>,
    config: &ModelConfig,
    capture: Option<&mut Option<Tensor>>,
) -> Result<Tensor> {
    let [b, h, w, c] = z.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "swin_block",
            lhs: z.shape().to_vec(),
            rhs: vec![],
        });
    };
    debug_assert_eq!(h, res);
    let eps = config.layer_norm_eps;

    let normed = block.norm1.forward(z, eps)?;
    if let Some(slot) = capture {
        *slot = Some(normed.clone());
    }
    let attn_in = if shift > 0 {
        cyclic_shift(&normed, shift as i64, shift as i64)?
    } else {
        normed
    };
    let windows = window_partition(&attn_in, window)?;
    let attended = window_mha(&windows, &block.attn, mask)?;
    let map = window_reverse(&attended, window, h, w)?.reshape(&[b, h, w, c])?;
    let map = if shift > 0 {
        cyclic_shift(&map, -(shift as i64), -(shift as i64))?
    } else {
        map
    };
    let after_attn = map.add(z)?;

    let mlp_in = block.norm2.forward(&after_attn, eps)?;
    let hidden = activate(&block.fc1.forward(&mlp_in.reshape(&[b * h * w, c])?)?, config.block_activation);
    let mlp_out = block.fc2.forward(&hidden)?.reshape(&[b, h, w, c])?;
    mlp_out.add(&after_attn)
}

/// A regular-window block followed by a shifted-window block, the unit the
/// stage depths count in pairs. Accepts `[h, w, C]` or `[B, h, w, C]` and
/// preserves the shape.
pub fn swin_block_pair(
    z: &Tensor,
    first: &BlockParams,
    second: &BlockParams,
    window: usize,
    config: &ModelConfig,
) -> Result<Tensor> {
    let rank3 = z.shape().len() == 3;
    let z4 = if rank3 {
        let [h, w, c] = z.shape()[..] else {
            unreachable!()
        };
        z.reshape(&[1, h, w, c])?
    } else {
        z.clone()
    };
    let res = z4.shape()[1];
    let win = window.min(res);
    let shift = if res <= win { 0 } else { win / 2 };
    let mask = if shift > 0 {
        Some(build_shift_mask(&WindowGrid::new(res, z4.shape()[2], win, shift)?))
    } else {
        None
    };
    let mid = apply_block(&z4, first, res, win, 0, None, config, None)?;
    let out = apply_block(&mid, second, res, win, shift, mask.as_ref(), config, None)?;
    if rank3 {
        let [_, h, w, c] = out.shape()[..] else {
            unreachable!()
        };
        out.reshape(&[h, w, c])
    } else {
        Ok(out)
    }
}

/// Downsample by concatenating each 2x2 token group (4C features) and
/// projecting to 2C: `[B, h, w, C] -> [B, h/2, w/2, 2C]`.
pub fn patch_merge(z: &Tensor, merge: &LinearParams) -> Result<Tensor> {
    let grouped = merge_groups(z)?;
    let [b, h, w, four_c] = grouped.shape()[..] else {
        unreachable!()
    };
    let out = merge.forward(&grouped.reshape(&[b * h * w, four_c])?)?;
    let two_c = *out.shape().last().unwrap();
    out.reshape(&[b, h, w, two_c])
}

/// Concatenate each 2x2 neighborhood: `[B, h, w, C] -> [B, h/2, w/2, 4C]`.
pub fn merge_groups(z: &Tensor) -> Result<Tensor> {
    let [b, h, w, c] = z.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "patch_merge",
            lhs: z.shape().to_vec(),
            rhs: vec![],
        });
    };
    if h % 2 != 0 {
        return Err(Error::Divisibility { what: "merge height", value: h, divisor: 2 });
    }
    if w % 2 != 0 {
        return Err(Error::Divisibility { what: "merge width", value: w, divisor: 2 });
    }
    z.reshape(&[b, h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h / 2, w / 2, 4 * c])
}

/// Mean binary cross-entropy over batch and classes, with probabilities
/// clamped to `[1e-12, 1 - 1e-12]` so exact 0/1 predictions stay finite.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: probs.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let p = probs.clamp(1e-12, 1.0 - 1e-12);
    let pos = labels.mul(&p.ln())?;
    let neg = labels
        .neg()
        .add_scalar(1.0)
        .mul(&p.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean_all().neg())
}

/// Parameter count of one per-class head: a linear chain from the pooled
/// feature dim through `widths` to a single logit, every layer biased.
pub fn head_param_count(feature_dim: usize, widths: &[usize]) -> usize {
    let mut total = 0;
    let mut prev = feature_dim;
    for &w in widths.iter().chain(std::iter::once(&1)) {
        total += prev * w + w;
        prev = w;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NUM_CLASSES;
    use crate::tensor::grad_check_at;

    fn rand_images(b: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n = b * size * size * 3;
        Tensor::from_vec((0..n).map(|_| rng.next_f64()).collect(), &[b, size, size, 3]).unwrap()
    }

    #[test]
    fn patch_embed_shapes() {
        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 1).unwrap();
        let tokens = model
            .patch_embed_forward(&rand_images(2, 32, 2), &cfg)
            .unwrap();
        assert_eq!(tokens.shape(), &[2, 16, 16, 16]);

        // 8x8 image with 4 px patches -> 2x2 tokens
        let mut small = cfg.clone();
        small.image_size = 8;
        small.patch_size = 4;
        small.depths = vec![2];
        small.num_heads = vec![2];
        let m2 = SwinModel::init(&small, 1).unwrap();
        let t2 = m2.patch_embed_forward(&rand_images(1, 8, 3), &small).unwrap();
        assert_eq!(t2.shape(), &[1, 2, 2, 16]);
    }

    #[test]
    fn patch_count_at_full_scale() {
        // 224 / 4 = 56 per side, 3136 tokens total
        let cfg = ModelConfig::full_scale(HeadVariant::Mlp3);
        assert_eq!(cfg.stage_resolution(0), 56);
        assert_eq!(56 * 56, 224 * 224 / (4 * 4));
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 3).unwrap();
        let images = Tensor::full(&[1, 32, 32, 3], 0.42);
        let tokens = model.patch_embed_forward(&images, &cfg).unwrap();
        let first = &tokens.data()[..16];
        for chunk in tokens.data().chunks(16) {
            assert_eq!(chunk, first);
        }
    }

    #[test]
    fn patch_embed_rejects_indivisible() {
        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 1).unwrap();
        let images = rand_images(1, 31, 4);
        assert!(model.patch_embed_forward(&images, &cfg).is_err());
    }

    fn zero_block_branches(block: &mut BlockParams) {
        let zero_like = |t: &Tensor| Tensor::parameter(vec![0.0; t.numel()], t.shape()).unwrap();
        block.attn.wo = zero_like(&block.attn.wo);
        block.fc2.weight = zero_like(&block.fc2.weight);
        if let Some(b) = &block.fc2.bias {
            block.fc2.bias = Some(zero_like(b));
        }
    }

    #[test]
    fn zeroed_projections_make_block_pair_identity() {
        let cfg = ModelConfig::desk();
        let mut rng = SplitMix64::new(5);
        let mut b1 = BlockParams::init(8, 2, 32, false, &mut rng).unwrap();
        let mut b2 = BlockParams::init(8, 2, 32, false, &mut rng).unwrap();
        zero_block_branches(&mut b1);
        zero_block_branches(&mut b2);
        let z = Tensor::from_vec((0..8 * 8 * 8).map(|i| i as f64 * 0.01).collect(), &[8, 8, 8]).unwrap();
        let out = swin_block_pair(&z, &b1, &b2, 4, &cfg).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn block_pair_preserves_shape() {
        let cfg = ModelConfig::desk();
        let mut rng = SplitMix64::new(6);
        let b1 = BlockParams::init(16, 2, 64, false, &mut rng).unwrap();
        let b2 = BlockParams::init(16, 2, 64, false, &mut rng).unwrap();
        let mut rng2 = SplitMix64::new(8);
        let z = Tensor::from_vec((0..8 * 8 * 16).map(|_| rng2.next_f64()).collect(), &[8, 8, 16]).unwrap();
        let out = swin_block_pair(&z, &b1, &b2, 4, &cfg).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    #[test]
    fn block_pair_gradients_check_out() {
        let mut cfg = ModelConfig::desk();
        cfg.layer_norm_eps = 1e-5;
        let mut rng = SplitMix64::new(9);
        let b1 = BlockParams::init(4, 2, 8, false, &mut rng).unwrap();
        let b2 = BlockParams::init(4, 2, 8, false, &mut rng).unwrap();
        let mut rng2 = SplitMix64::new(10);
        let z = Tensor::from_vec(
            (0..4 * 4 * 4).map(|_| rng2.next_f64() * 2.0 - 1.0).collect(),
            &[4, 4, 4],
        )
        .unwrap();
        let coords: Vec<usize> = (0..z.numel()).collect();
        let err = grad_check_at(
            |x| Ok(swin_block_pair(x, &b1, &b2, 2, &cfg)?.mul(x)?.sum_all()),
            &z,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn merge_shapes_and_identity_projection() {
        let z = Tensor::from_vec((0..2 * 2 * 3).map(|i| i as f64).collect(), &[1, 2, 2, 3]).unwrap();
        let grouped = merge_groups(&z).unwrap();
        assert_eq!(grouped.shape(), &[1, 1, 1, 12]);

        // top-2C-rows-of-identity projection keeps the first 2C concatenated values
        let c = 3;
        let mut weight = vec![0.0; 4 * c * 2 * c];
        for i in 0..2 * c {
            weight[i * 2 * c + i] = 1.0;
        }
        let merge = LinearParams {
            weight: Tensor::parameter(weight, &[4 * c, 2 * c]).unwrap(),
            bias: None,
        };
        let merged = patch_merge(&z, &merge).unwrap();
        assert_eq!(merged.shape(), &[1, 1, 1, 6]);
        assert_eq!(merged.data(), &grouped.data()[..6]);

        let odd = Tensor::zeros(&[1, 3, 4, 2]);
        assert!(patch_merge(&odd, &merge).is_err());
    }

    #[test]
    fn merge_channel_rule() {
        let mut rng = SplitMix64::new(11);
        let merge = LinearParams::init(4 * 8, 2 * 8, false, &mut rng);
        let z = Tensor::zeros(&[2, 6, 6, 8]);
        let out = patch_merge(&z, &merge).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 16]);
    }

    #[test]
    fn backbone_desk_cascade() {
        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 12).unwrap();
        let out = model.backbone_forward(&rand_images(3, 32, 13), &cfg).unwrap();
        assert_eq!(out.features.shape(), &[3, 2, 2, 128]);
        assert_eq!(out.cam_activation.shape(), &[3, 2, 2, 128]);
    }

    #[test]
    fn residual_chain_reduces_to_embed_plus_merges() {
        let cfg = ModelConfig::desk();
        let mut model = SwinModel::init(&cfg, 14).unwrap();
        for stage in &mut model.stages {
            for block in &mut stage.blocks {
                zero_block_branches(block);
            }
        }
        let images = rand_images(1, 32, 15);
        let full = model.backbone_forward(&images, &cfg).unwrap().features;

        let mut z = model.patch_embed_forward(&images, &cfg).unwrap();
        for stage in &model.stages {
            if let Some(merge) = &stage.merge {
                z = patch_merge(&z, merge).unwrap();
            }
        }
        assert_eq!(full.data(), z.data());
    }

    #[test]
    fn fresh_model_outputs_half_everywhere() {
        for variant in [HeadVariant::Mlp3, HeadVariant::Mlp1, HeadVariant::Headless] {
            let mut cfg = ModelConfig::desk();
            cfg.head_variant = variant;
            cfg.head_widths = variant.default_widths();
            let model = SwinModel::init(&cfg, 16).unwrap();
            let probs = model.forward_probs(&rand_images(2, 32, 17), &cfg).unwrap();
            assert_eq!(probs.shape(), &[2, NUM_CLASSES]);
            for &p in probs.data() {
                assert_eq!(p, 0.5);
            }
        }
    }

    #[test]
    fn probabilities_stay_in_open_unit_interval() {
        let cfg = ModelConfig::desk();
        let mut model = SwinModel::init(&cfg, 18).unwrap();
        // randomize the zeroed final layers too
        let mut rng = SplitMix64::new(19);
        model.visit_params_mut(|_, t| {
            *t = Tensor::trunc_normal(t.shape(), 0.05, &mut rng);
        });
        let probs = model.forward_probs(&rand_images(2, 32, 20), &cfg).unwrap();
        for &p in probs.data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn head_param_count_formula() {
        // pooled dim 1536 through widths [384, 48, 48] to one logit
        let count = head_param_count(1536, &[384, 48, 48]);
        let expect = (1536 * 384 + 384) + (384 * 48 + 48) + (48 * 48 + 48) + (48 + 1);
        assert_eq!(count, expect);

        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 21).unwrap();
        assert_eq!(
            model.params_per_head().unwrap(),
            head_param_count(cfg.final_dim(), &cfg.head_widths())
        );
    }

    #[test]
    fn heads_are_independent_bit_exactly() {
        let cfg = ModelConfig::desk();
        let mut model = SwinModel::init(&cfg, 22).unwrap();
        let mut rng = SplitMix64::new(23);
        model.visit_params_mut(|_, t| {
            *t = Tensor::trunc_normal(t.shape(), 0.1, &mut rng);
        });
        let images = rand_images(2, 32, 24);
        let before = model.forward_probs(&images, &cfg).unwrap();

        // perturb every layer of head 3
        let target = 3;
        if let Heads::PerClass(heads) = &mut model.heads {
            for layer in &mut heads[target].layers {
                let bumped: Vec<f64> = layer.weight.data().iter().map(|v| v + 0.25).collect();
                layer.weight = Tensor::parameter(bumped, layer.weight.shape()).unwrap();
            }
        }
        let after = model.forward_probs(&images, &cfg).unwrap();
        for b in 0..2 {
            for c in 0..NUM_CLASSES {
                let (x, y) = (before.data()[b * NUM_CLASSES + c], after.data()[b * NUM_CLASSES + c]);
                if c == target {
                    assert_ne!(x, y);
                } else {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn bce_reference_values() {
        let half = Tensor::full(&[2, 2], 0.5);
        let labels = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let loss = bce_loss(&half, &labels).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        let exact = bce_loss(&labels, &labels).unwrap().item();
        assert!(exact >= 0.0 && exact < 1e-11);

        let p = Tensor::from_vec(vec![0.9, 0.2], &[1, 2]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let loss = bce_loss(&p, &y).unwrap().item();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.164252).abs() < 1e-6);

        assert!(bce_loss(&p, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn params_roundtrip_through_set() {
        let cfg = ModelConfig::desk();
        let model = SwinModel::init(&cfg, 25).unwrap();
        let ps = model.to_params();
        let rebuilt = SwinModel::from_params(&cfg, &ps).unwrap();
        let images = rand_images(1, 32, 26);
        let a = model.forward_probs(&images, &cfg).unwrap();
        let b = rebuilt.forward_probs(&images, &cfg).unwrap();
        assert_eq!(a.data(), b.data());

        // dropping a parameter is detected
        let mut partial = ParamSet::new();
        let mut skipped_one = false;
        for (path, t) in ps.iter() {
            if !skipped_one && path.starts_with("final_norm") {
                skipped_one = true;
                continue;
            }
            partial.insert(path.clone(), t.clone()).unwrap();
        }
        assert!(SwinModel::from_params(&cfg, &partial).is_err());
    }
}
