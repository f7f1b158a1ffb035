//! Synthetic stand-in dataset: each pathology class gets a fixed image cell
//! in a 4x4 grid, and a positive label paints a bright square into that cell
//! over a noise background. Geometry is deterministic per class, so a
//! detector has a localized feature to find and saliency tests know where
//! the evidence lives. Patient ids are assigned round-robin.

use std::path::{Path, PathBuf};

use crate::config::{CLASS_NAMES, NUM_CLASSES};
use crate::error::Result;
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
pub struct SyntheticOpts {
    pub num_images: usize,
    pub image_size: u32,
    pub seed: u64,
    pub images_per_patient: usize,
    /// Independent probability that each class is positive in an image.
    pub positive_rate: f64,
}

impl Default for SyntheticOpts {
    fn default() -> Self {
        SyntheticOpts {
            num_images: 96,
            image_size: 32,
            seed: 0,
            images_per_patient: 3,
            positive_rate: 0.35,
        }
    }
}

/// Grid cell (row, col) of a class's pattern in the 4x4 layout.
pub fn class_cell(class: usize) -> (u32, u32) {
    (class as u32 / 4, class as u32 % 4)
}

/// Image quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
/// that fully contains a class's pattern cell.
pub fn class_quadrant(class: usize) -> usize {
    let (r, c) = class_cell(class);
    ((r / 2) * 2 + c / 2) as usize
}

/// Quadrant of a pixel position in a `size x size` image.
pub fn pixel_quadrant(y: usize, x: usize, size: usize) -> usize {
    let half = size / 2;
    (if y < half { 0 } else { 2 }) + usize::from(x >= half)
}

/// Write `num_images` PNGs plus a label CSV in the ingestion schema into
/// `dir`; returns the CSV path. Output is a pure function of the options.
pub fn generate(dir: impl AsRef<Path>, opts: &SyntheticOpts) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = SplitMix64::new(opts.seed);
    let size = opts.image_size;
    let cell = size / 4;
    assert!(cell >= 2, "image_size must be at least 8");

    let mut csv = String::from("Image Index,Finding Labels,Follow-up #,Patient ID\n");
    for i in 0..opts.num_images {
        let labels: Vec<bool> = (0..NUM_CLASSES)
            .map(|_| rng.next_f64() < opts.positive_rate)
            .collect();

        let mut pixels = vec![0u8; (size * size) as usize];
        for p in pixels.iter_mut() {
            *p = (rng.next_f64() * 48.0) as u8;
        }
        for (class, &on) in labels.iter().enumerate() {
            if !on {
                continue;
            }
            let (r, c) = class_cell(class);
            let margin = cell / 8;
            let side = cell - 2 * margin;
            let (y0, x0) = (r * cell + margin, c * cell + margin);
            let intensity = 180.0 + rng.next_f64() * 75.0;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    pixels[(y * size + x) as usize] = intensity as u8;
                }
            }
        }
        let name = format!("synth_{i:05}.png");
        image::GrayImage::from_raw(size, size, pixels)
            .expect("buffer matches dims")
            .save(dir.join(&name))?;

        let findings: Vec<&str> = labels
            .iter()
            .enumerate()
            .filter_map(|(k, &on)| on.then_some(CLASS_NAMES[k]))
            .collect();
        let findings = if findings.is_empty() {
            "No Finding".to_string()
        } else {
            findings.join("|")
        };
        let patient = i / opts.images_per_patient;
        csv.push_str(&format!("{name},{findings},0,synth-p{patient}\n"));
    }
    let csv_path = dir.join("Data_Entry.csv");
    std::fs::write(&csv_path, csv)?;
    Ok(csv_path)
}
