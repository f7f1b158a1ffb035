//! Saliency maps: gradient of a class logit with respect to the activation
//! after the first layer norm of the last transformer block, channel-pooled,
//! rectified, and upsampled to the input image.

use std::path::Path;

use crate::config::ModelConfig;
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::SwinModel;
use crate::tensor::Tensor;

/// Saliency map at input resolution with values in [0, 1]; the maximum is 1
/// unless the map is identically zero.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// True when the class was picked as the largest logit rather than given.
    pub dominant: bool,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Index of the largest logit, earliest on exact ties. The sigmoid is
/// monotone, so ranking by probability picks the same class.
pub fn dominant_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Compute the saliency map of `target_class` (or the most dominant logit
/// when absent) for one `[H, W, 3]` image.
///
/// Steps: forward with the post-norm activation `A` of the last block
/// captured; backward from the chosen pre-sigmoid logit; weight each channel
/// of `A` by the spatial mean of its gradient; rectify the weighted sum;
/// normalize by the maximum (an all-zero map stays zero); bilinear-upsample
/// to the image and renormalize so the peak is exactly one.
pub fn grad_cam(
    model: &SwinModel,
    config: &ModelConfig,
    image: &Tensor,
    target_class: Option<usize>,
) -> Result<Heatmap> {
    let [h, w, ch] = image.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    };
    if ch != 3 {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            lhs: image.shape().to_vec(),
            rhs: vec![h, w, 3],
        });
    }
    if let Some(c) = target_class {
        if c >= config.num_classes {
            return Err(Error::Config(format!(
                "class index {c} out of range for {} classes",
                config.num_classes
            )));
        }
    }

    let batch = image.reshape(&[1, h, w, 3])?;
    let backbone = model.backbone_forward(&batch, config)?;
    let logits = model.head_logits(&backbone.features, config)?;
    let (class, dominant) = match target_class {
        Some(c) => (c, false),
        None => (dominant_class(logits.data()), true),
    };

    // isolate the chosen logit and differentiate it
    let mut pick = vec![0.0; config.num_classes];
    pick[class] = 1.0;
    let selector = Tensor::from_vec(pick, &[1, config.num_classes])?;
    logits.mul(&selector)?.sum_all().backward()?;

    let activation = &backbone.cam_activation; // [1, hf, wf, Cf]
    let [_, hf, wf, cf] = activation.shape()[..] else {
        unreachable!()
    };
    let grad = activation.grad_or_zeros();
    let act = activation.data();

    // channel weights: spatial mean of the gradient
    let tokens = hf * wf;
    let mut alpha = vec![0.0; cf];
    for t in 0..tokens {
        for c in 0..cf {
            alpha[c] += grad[t * cf + c];
        }
    }
    for a in alpha.iter_mut() {
        *a /= tokens as f64;
    }

    // rectified weighted channel sum on the token grid
    let mut cam = vec![0.0; tokens];
    for t in 0..tokens {
        let mut acc = 0.0;
        for c in 0..cf {
            acc += alpha[c] * act[t * cf + c];
        }
        cam[t] = acc.max(0.0);
    }
    normalize_by_max(&mut cam);
    let mut up = resize_bilinear(&cam, hf, wf, h, w, 1);
    normalize_by_max(&mut up);

    Ok(Heatmap {
        values: up,
        height: h,
        width: w,
        target_class: class,
        dominant,
    })
}

fn normalize_by_max(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
    }
}

/// Fraction of total heatmap mass inside one image quadrant
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
pub fn quadrant_mass(map: &Heatmap, quadrant: usize) -> f64 {
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in 0..map.height {
        for x in 0..map.width {
            if crate::data::synthetic::pixel_quadrant(y, x, map.height) == quadrant {
                inside += map.at(y, x);
            }
        }
    }
    inside / total
}

const BLEND: f64 = 0.4;

fn colormap(v: f64) -> [f64; 3] {
    let seg = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [seg(3.0), seg(2.0), seg(1.0)]
}

/// Write the original image and the colormapped overlay side by side as an
/// 8-bit RGB PNG (`2 * W x H`). Identical inputs produce identical bytes.
pub fn render_heatmap(map: &Heatmap, image: &Tensor, out_path: impl AsRef<Path>) -> Result<()> {
    let [h, w, _] = image.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "render_heatmap",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    };
    if h != map.height || w != map.width {
        return Err(Error::ShapeMismatch {
            op: "render_heatmap",
            lhs: vec![map.height, map.width],
            rhs: vec![h, w],
        });
    }
    let mut canvas = image::RgbImage::new(2 * w as u32, h as u32);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let px = &image.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
            canvas.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_byte(px[0]), to_byte(px[1]), to_byte(px[2])]),
            );
            let heat = colormap(map.at(y, x));
            let blended = [0, 1, 2].map(|c| to_byte((1.0 - BLEND) * px[c] + BLEND * heat[c]));
            canvas.put_pixel((w + x) as u32, y as u32, image::Rgb(blended));
        }
    }
    canvas
        .save(&out_path)
        .map_err(|e| Error::Data(format!("write {}: {e}", out_path.as_ref().display())))?;
    Ok(())
}
