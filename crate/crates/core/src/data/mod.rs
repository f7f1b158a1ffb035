//! Dataset ingestion: ChestX-ray14-format label CSVs, deterministic
//! patient-wise splits, PNG loading with bilinear resize, and batch
//! assembly. A synthetic generator (see [`synthetic`]) stands in for the
//! real 45 GB dataset so every test runs from scratch.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::config::{class_index, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// One dataset row: image file name, owning patient, and the multi-hot
/// label vector in canonical class order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub image_id: String,
    pub patient_id: String,
    pub labels: [u8; NUM_CLASSES],
}

/// Parse a `Data_Entry_2017.csv`-schema file: the header must contain the
/// image-index, finding-labels (pipe-separated) and patient-id columns;
/// other columns are ignored. `No Finding` maps to the all-zero vector.
pub fn parse_label_csv(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::Data(format!("open {}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("read header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Data(format!("missing column {name:?} in label CSV")))
    };
    let image_col = find("Image Index")?;
    let labels_col = find("Finding Labels")?;
    let patient_col = find("Patient ID")?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        let image_id = row
            .get(image_col)
            .unwrap_or_default()
            .trim()
            .to_string();
        if image_id.is_empty() {
            return Err(Error::Data(format!("row {}: empty image id", line + 2)));
        }
        if !seen.insert(image_id.clone()) {
            return Err(Error::Data(format!("duplicate image id {image_id:?}")));
        }
        let patient_id = row
            .get(patient_col)
            .unwrap_or_default()
            .trim()
            .to_string();
        let findings = row.get(labels_col).unwrap_or_default().trim();
        let mut labels = [0u8; NUM_CLASSES];
        if !findings.eq_ignore_ascii_case("No Finding") && !findings.is_empty() {
            for token in findings.split('|') {
                let token = token.trim();
                match class_index(token) {
                    Some(idx) => labels[idx] = 1,
                    None => {
                        return Err(Error::Data(format!(
                            "unknown pathology label {token:?} for image {image_id:?}"
                        )))
                    }
                }
            }
        }
        records.push(PatientRecord {
            image_id,
            patient_id,
            labels,
        });
    }
    Ok(records)
}

/// Patient-disjoint split of a dataset. Train and val image lists cover the
/// input exactly, and no patient contributes to both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_frac: f64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Shuffle the unique patient ids with the seeded generator, send the first
/// `floor(train_frac * patients)` to train, and let every image follow its
/// patient. The patient list is collected in first-appearance order before
/// shuffling, so the result depends only on (records, train_frac, seed).
pub fn patient_split(
    records: &[PatientRecord],
    train_frac: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty record list".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!(
            "train_frac {train_frac} must be within [0, 1]"
        )));
    }
    let mut patients = Vec::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.patient_id.as_str()) {
            patients.push(r.patient_id.clone());
        }
    }
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut patients);
    let cut = (train_frac * patients.len() as f64).floor() as usize;
    let train_patients: HashSet<&str> = patients[..cut].iter().map(String::as_str).collect();

    let mut manifest = SplitManifest {
        seed,
        train_frac,
        train: Vec::new(),
        val: Vec::new(),
    };
    for r in records {
        if train_patients.contains(r.patient_id.as_str()) {
            manifest.train.push(r.image_id.clone());
        } else {
            manifest.val.push(r.image_id.clone());
        }
    }
    Ok(manifest)
}

impl SplitManifest {
    /// Build a manifest from explicit image lists (the official
    /// one-filename-per-line split files). Patient disjointness is still
    /// enforced against the records.
    pub fn from_lists(
        records: &[PatientRecord],
        train_ids: &[String],
        val_ids: &[String],
    ) -> Result<SplitManifest> {
        let by_id: HashMap<&str, &PatientRecord> =
            records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let patient_of = |id: &String| -> Result<&str> {
            by_id
                .get(id.as_str())
                .map(|r| r.patient_id.as_str())
                .ok_or_else(|| Error::Data(format!("listed image {id:?} not in label CSV")))
        };
        let mut train_patients = BTreeSet::new();
        for id in train_ids {
            train_patients.insert(patient_of(id)?);
        }
        for id in val_ids {
            let p = patient_of(id)?;
            if train_patients.contains(p) {
                return Err(Error::Data(format!(
                    "patient {p:?} appears in both sides of the provided split"
                )));
            }
        }
        let total = train_ids.len() + val_ids.len();
        Ok(SplitManifest {
            seed: 0,
            train_frac: train_ids.len() as f64 / total.max(1) as f64,
            train: train_ids.to_vec(),
            val: val_ids.to_vec(),
        })
    }

    /// Verify patient disjointness and exact coverage against the records.
    pub fn check_against(&self, records: &[PatientRecord]) -> Result<()> {
        let by_id: HashMap<&str, &str> = records
            .iter()
            .map(|r| (r.image_id.as_str(), r.patient_id.as_str()))
            .collect();
        let patients = |ids: &[String]| -> Result<HashSet<&str>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Data(format!("manifest image {id:?} unknown")))
                })
                .collect()
        };
        let tp = patients(&self.train)?;
        let vp = patients(&self.val)?;
        if let Some(shared) = tp.intersection(&vp).next() {
            return Err(Error::Data(format!(
                "patient {shared:?} appears in both train and val"
            )));
        }
        if self.train.len() + self.val.len() != records.len() {
            return Err(Error::Data(format!(
                "manifest covers {} images, dataset has {}",
                self.train.len() + self.val.len(),
                records.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("train_frac={}\n", self.train_frac));
        for id in &self.train {
            out.push_str(&format!("train {id}\n"));
        }
        for id in &self.val {
            out.push_str(&format!("val {id}\n"));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitManifest> {
        let reader = BufReader::new(std::fs::File::open(&path)?);
        let mut lines = reader.lines();
        let header = |l: Option<std::io::Result<String>>, key: &str| -> Result<String> {
            let line = l.ok_or_else(|| Error::Data(format!("manifest missing {key}= line")))??;
            line.strip_prefix(&format!("{key}="))
                .map(str::to_string)
                .ok_or_else(|| Error::Data(format!("expected {key}=..., got {line:?}")))
        };
        let seed: u64 = header(lines.next(), "seed")?
            .parse()
            .map_err(|e| Error::Data(format!("bad seed: {e}")))?;
        let train_frac: f64 = header(lines.next(), "train_frac")?
            .parse()
            .map_err(|e| Error::Data(format!("bad train_frac: {e}")))?;
        let mut manifest = SplitManifest {
            seed,
            train_frac,
            train: Vec::new(),
            val: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            match line.split_once(' ') {
                Some(("train", id)) => manifest.train.push(id.to_string()),
                Some(("val", id)) => manifest.val.push(id.to_string()),
                _ => return Err(Error::Data(format!("bad manifest line {line:?}"))),
            }
        }
        Ok(manifest)
    }
}

/// Read an official split file: one image filename per line, blanks skipped.
pub fn read_image_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let reader = BufReader::new(std::fs::File::open(&path)?);
    let mut ids = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            ids.push(trimmed.to_string());
        }
    }
    Ok(ids)
}

/// Load an 8-bit grayscale or RGB PNG, replicate grayscale to three
/// channels, bilinear-resize to `target x target`, and scale to [0, 1].
pub fn load_image(path: impl AsRef<Path>, target: usize) -> Result<Tensor> {
    let img = image::open(&path).map_err(|e| {
        Error::Data(format!("unreadable image {}: {e}", path.as_ref().display()))
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(gray) => gray
            .into_raw()
            .into_iter()
            .flat_map(|v| {
                let x = v as f64 / 255.0;
                [x, x, x]
            })
            .collect(),
        image::DynamicImage::ImageRgb8(rgb) => rgb
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        other => {
            return Err(Error::Data(format!(
                "unsupported image format {:?} for {}; expected 8-bit grayscale or RGB",
                other.color(),
                path.as_ref().display()
            )))
        }
    };
    let resized = resize_bilinear(&rgb, h, w, target, target, 3);
    Tensor::from_vec(resized, &[target, target, 3])
}

/// Bilinear resampling with half-pixel centers. Resizing to the source size
/// reproduces the input exactly, and constant images stay constant.
pub fn resize_bilinear(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    channels: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_h * dst_w * channels];
    let scale_y = src_h as f64 / dst_h as f64;
    let scale_x = src_w as f64 / dst_w as f64;
    for y in 0..dst_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(src_h - 1);
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = (sy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..dst_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(src_w - 1);
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = (sx - x0 as f64).clamp(0.0, 1.0);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * src_w + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[(y * dst_w + x) * channels + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// One split side loaded into memory: flattened images plus label vectors.
#[derive(Clone)]
pub struct LoadedSplit {
    pub image_size: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<[f64; NUM_CLASSES]>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load the images named by one manifest side, in manifest order.
pub fn load_split_side(
    images_dir: impl AsRef<Path>,
    ids: &[String],
    records: &[PatientRecord],
    image_size: usize,
) -> Result<LoadedSplit> {
    let by_id: BTreeMap<&str, &PatientRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut split = LoadedSplit {
        image_size,
        images: Vec::with_capacity(ids.len()),
        labels: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let record = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("image {id:?} has no label row")))?;
        let img = load_image(images_dir.as_ref().join(id), image_size)?;
        split.images.push(img.data().to_vec());
        split.labels.push(record.labels.map(|v| v as f64));
    }
    Ok(split)
}

/// A materialized minibatch.
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
}

/// Assemble batches over a loaded split. With `shuffle` the order is a
/// seeded permutation (so seeds s and s+1 give different epochs over the
/// same multiset); without it the split order is preserved. The last batch
/// may be smaller.
pub fn make_batches(
    split: &LoadedSplit,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if shuffle {
        SplitMix64::new(seed).shuffle(&mut order);
    }
    let s = split.image_size;
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut images = Vec::with_capacity(b * s * s * 3);
        let mut labels = Vec::with_capacity(b * NUM_CLASSES);
        for &i in chunk {
            images.extend_from_slice(&split.images[i]);
            labels.extend_from_slice(&split.labels[i]);
        }
        batches.push(Batch {
            images: Tensor::from_vec(images, &[b, s, s, 3])?,
            labels: Tensor::from_vec(labels, &[b, NUM_CLASSES])?,
        });
    }
    Ok(batches)
}
