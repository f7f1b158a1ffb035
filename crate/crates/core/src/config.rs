//! Model architecture configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the fourteen pathology classes in canonical (alphabetical)
/// order. Label vectors, per-class heads, and report columns all use this
/// order; the dataset CSV itself imposes none.
pub const CLASS_NAMES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Index of a canonical class name, e.g. for selecting a saliency target.
pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c.eq_ignore_ascii_case(name))
}

/// Shape of the classifier on top of the shared backbone: either one shared
/// linear layer emitting all class logits, or an independent MLP per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Headless,
    Mlp1,
    Mlp2,
    Mlp3,
}

impl HeadVariant {
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            HeadVariant::Headless => vec![],
            HeadVariant::Mlp1 => vec![48],
            HeadVariant::Mlp2 => vec![384, 48],
            HeadVariant::Mlp3 => vec![384, 48, 48],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Headless => "headless",
            HeadVariant::Mlp1 => "mlp1",
            HeadVariant::Mlp2 => "mlp2",
            HeadVariant::Mlp3 => "mlp3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "headless" => Ok(HeadVariant::Headless),
            "mlp1" => Ok(HeadVariant::Mlp1),
            "mlp2" => Ok(HeadVariant::Mlp2),
            "mlp3" => Ok(HeadVariant::Mlp3),
            other => Err(Error::Config(format!(
                "unknown head variant {other:?}; expected headless|mlp1|mlp2|mlp3"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Full architecture description. Stage `s` operates on a
/// `image_size / (patch_size * 2^s)` token grid with `embed_dim * 2^s`
/// channels; resolution quarters and channels double at each patch merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per stage; entries must be even so regular and shifted
    /// window attention alternate in pairs.
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub head_variant: HeadVariant,
    /// Hidden widths of each per-class head; the final projection to one
    /// logit is implicit. Defaults to the variant's widths.
    #[serde(default)]
    pub head_widths: Vec<usize>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Hidden width of each block's MLP as a multiple of its channel dim.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default = "default_block_act")]
    pub block_activation: Activation,
    #[serde(default = "default_head_act")]
    pub head_activation: Activation,
}

fn default_num_classes() -> usize {
    NUM_CLASSES
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_eps() -> f64 {
    1e-5
}
fn default_block_act() -> Activation {
    Activation::Gelu
}
fn default_head_act() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    /// Small configuration for tests and laptop-scale training: 32 px input,
    /// 2 px patches, 16 channels, four 2-block stages, window 4.
    pub fn desk() -> Self {
        let variant = HeadVariant::Mlp3;
        ModelConfig {
            image_size: 32,
            patch_size: 2,
            embed_dim: 16,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![2, 4, 8, 16],
            window_size: 4,
            head_variant: variant,
            head_widths: variant.default_widths(),
            num_classes: NUM_CLASSES,
            mlp_ratio: 4.0,
            layer_norm_eps: 1e-5,
            qkv_bias: false,
            block_activation: Activation::Gelu,
            head_activation: Activation::Relu,
        }
    }

    /// Full-scale layout: 224 px input, 4 px patches, 192 channels and four
    /// stages ending in 1536 channels of 7x7 features. Constructible but far
    /// too slow to train here.
    pub fn full_scale(head_variant: HeadVariant) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 192,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![6, 12, 24, 48],
            window_size: 7,
            head_variant,
            head_widths: head_variant.default_widths(),
            num_classes: NUM_CLASSES,
            mlp_ratio: 4.0,
            layer_norm_eps: 1e-5,
            qkv_bias: false,
            block_activation: Activation::Gelu,
            head_activation: Activation::Relu,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel count at stage `s` (doubles per merge).
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token-grid side length at stage `s` (halves per merge).
    pub fn stage_resolution(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn final_resolution(&self) -> usize {
        self.stage_resolution(self.num_stages() - 1)
    }

    /// Window size actually used at a stage: when the grid is no larger than
    /// the configured window, the window covers the whole grid.
    pub fn effective_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_resolution(stage))
    }

    /// Shift for the shifted-attention block of a pair. A single window
    /// covering the grid needs no shift; otherwise half the effective window,
    /// floored.
    pub fn shift_size(&self, stage: usize) -> usize {
        let res = self.stage_resolution(stage);
        let win = self.effective_window(stage);
        if res <= win {
            0
        } else {
            win / 2
        }
    }

    pub fn head_widths(&self) -> Vec<usize> {
        if self.head_widths.is_empty() {
            self.head_variant.default_widths()
        } else {
            self.head_widths.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths ({:?}) and num_heads ({:?}) must be nonempty and equal length",
                self.depths, self.num_heads
            ));
        }
        if self.window_size == 0 {
            return fail("window_size must be at least 1".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.num_heads).enumerate() {
            if depth == 0 || depth % 2 != 0 {
                return fail(format!("stage {s}: depth {depth} must be even and positive"));
            }
            let dim = self.stage_dim(s);
            if heads == 0 || dim % heads != 0 {
                return fail(format!(
                    "stage {s}: channels {dim} not divisible by {heads} heads"
                ));
            }
            let res = self.stage_resolution(s);
            if res == 0 {
                return fail(format!("stage {s}: token grid vanished; too many stages"));
            }
            let win = self.effective_window(s);
            if res % win != 0 {
                return fail(format!(
                    "stage {s}: resolution {res} not divisible by window {win}"
                ));
            }
        }
        if self.head_variant != HeadVariant::Headless && self.head_widths().is_empty() {
            return fail("MLP head variants need at least one hidden width".into());
        }
        Ok(())
    }

    /// Write the sidecar config stored next to checkpoints.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize model config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let cfg: ModelConfig = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("parse {}: {e}", path.as_ref().display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
