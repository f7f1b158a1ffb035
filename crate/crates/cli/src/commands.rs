//! Implementations of the CLI subcommands. Each command's outputs are a
//! pure function of the config file, input files, and flags; rerunning
//! overwrites the same bytes.

use std::path::{Path, PathBuf};

use swinchex_core::complexity::{complexity_csv, ComplexityQuery};
use swinchex_core::config::ModelConfig;
use swinchex_core::data::{
    load_image, load_split_side, parse_label_csv, patient_split, read_image_list, LoadedSplit,
    PatientRecord, SplitManifest,
};
use swinchex_core::eval::write_report_csv;
use swinchex_core::gradcam::{grad_cam, render_heatmap};
use swinchex_core::model::SwinModel;
use swinchex_core::train::{evaluate_checkpoint, run_training, TrainPlan};
use swinchex_core::{checkpoint, class_index, selftest, Error, Result, CLASS_NAMES};

use crate::config::RunConfig;

fn load_records(config: &RunConfig) -> Result<Vec<PatientRecord>> {
    parse_label_csv(&config.data.labels_csv)
}

/// Build and write the split manifest.
pub fn cmd_split(config: &RunConfig) -> Result<()> {
    let records = load_records(config)?;
    let manifest = match (&config.data.train_list, &config.data.val_list) {
        (Some(train), Some(val)) => {
            let train_ids = read_image_list(train)?;
            let val_ids = read_image_list(val)?;
            SplitManifest::from_lists(&records, &train_ids, &val_ids)?
        }
        (None, None) => patient_split(&records, config.data.train_frac, config.data.seed)?,
        _ => {
            return Err(Error::Config(
                "set both data.train_list and data.val_list, or neither".into(),
            ))
        }
    };
    manifest.check_against(&records)?;
    if let Some(parent) = config.data.manifest.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    manifest.save(&config.data.manifest)?;
    println!(
        "wrote {} ({} train / {} val images, seed {})",
        config.data.manifest.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.seed
    );
    Ok(())
}

fn load_sides(config: &RunConfig) -> Result<(LoadedSplit, LoadedSplit)> {
    let records = load_records(config)?;
    let manifest = SplitManifest::load(&config.data.manifest).map_err(|e| {
        Error::Data(format!(
            "cannot read manifest {} (run `swinchex split` first): {e}",
            config.data.manifest.display()
        ))
    })?;
    manifest.check_against(&records)?;
    let train = load_split_side(
        &config.data.images_dir,
        &manifest.train,
        &records,
        config.model.image_size,
    )?;
    let val = load_split_side(
        &config.data.images_dir,
        &manifest.val,
        &records,
        config.model.image_size,
    )?;
    Ok((train, val))
}

/// Train for the configured epochs, checkpointing and logging metrics.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let (train, val) = load_sides(config)?;
    let plan = TrainPlan {
        config: config.model.clone(),
        opts: config.train.clone(),
        out_dir: config.output.dir.clone(),
    };
    println!(
        "training on {} images, validating on {} ({} epochs, lr {})",
        train.len(),
        val.len(),
        config.train.epochs,
        config.train.lr
    );
    let outcome = run_training(&plan, &train, &val)?;
    std::fs::write(config.output.dir.join("run_config.toml"), config.to_toml()?)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    for (epoch, stats) in outcome.state.history.iter().enumerate() {
        println!(
            "epoch {epoch}: train_loss {:.6}, val mean AUC {:.6}",
            stats.train_loss, stats.val_mean_auc
        );
    }
    println!(
        "best epoch {} (val mean AUC {:.6}); artifacts in {}",
        outcome.best_epoch,
        outcome.state.history[outcome.best_epoch].val_mean_auc,
        config.output.dir.display()
    );
    Ok(())
}

/// Resolve the sidecar config next to a checkpoint, falling back to the run
/// config's model section.
fn model_config_for(checkpoint_file: &Path, config: &RunConfig) -> Result<ModelConfig> {
    let sidecar = checkpoint_file.parent().map(|d| d.join("config.toml"));
    match sidecar {
        Some(path) if path.is_file() => ModelConfig::load(&path),
        _ => Ok(config.model.clone()),
    }
}

/// Evaluate one or more checkpoints on a split; writes the report table.
pub fn cmd_eval(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::Config("eval needs at least one --checkpoint".into()));
    }
    let (train, val) = load_sides(config)?;
    let side = match split {
        "train" => &train,
        "val" => &val,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected train or val"
            )))
        }
    };
    let mut columns = Vec::new();
    for path in checkpoints {
        let model_config = model_config_for(path, config)?;
        let report =
            evaluate_checkpoint(&model_config, path, side, config.train.batch_size, split)?;
        let undefined = report.undefined_classes();
        if !undefined.is_empty() {
            eprintln!(
                "warning: AUC undefined for {} on {split}; excluded from the mean",
                undefined.join(", ")
            );
        }
        println!(
            "{}: mean AUC {:.6} on {split}",
            path.display(),
            report.mean_auc
        );
        let name = format!(
            "{}:{}",
            model_config.head_variant.name(),
            path.file_stem().unwrap_or_default().to_string_lossy()
        );
        columns.push((name, report));
    }
    std::fs::create_dir_all(&config.output.dir)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("report.csv"));
    write_report_csv(&out_path, &columns)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Render a saliency heatmap for one image.
pub fn cmd_gradcam(
    config: &RunConfig,
    checkpoint_file: &Path,
    image_path: &Path,
    class: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let model_config = model_config_for(checkpoint_file, config)?;
    let params = checkpoint::load(checkpoint_file)?;
    let model = SwinModel::from_params(&model_config, &params)?;
    let image = load_image(image_path, model_config.image_size)?;
    let target = match class {
        None => None,
        Some(s) => Some(resolve_class(s)?),
    };
    let map = grad_cam(&model, &model_config, &image, target)?;
    std::fs::create_dir_all(&config.output.dir)?;
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        config
            .output
            .dir
            .join(format!("gradcam_{}.png", CLASS_NAMES[map.target_class]))
    });
    render_heatmap(&map, &image, &out_path)?;
    println!(
        "wrote {} (class {}{})",
        out_path.display(),
        CLASS_NAMES[map.target_class],
        if map.dominant { ", dominant logit" } else { "" }
    );
    Ok(())
}

fn resolve_class(s: &str) -> Result<usize> {
    if let Ok(idx) = s.parse::<usize>() {
        if idx < CLASS_NAMES.len() {
            return Ok(idx);
        }
        return Err(Error::Config(format!(
            "class index {idx} out of range 0..{}",
            CLASS_NAMES.len()
        )));
    }
    class_index(s).ok_or_else(|| {
        Error::Config(format!(
            "unknown class {s:?}; expected one of {}",
            CLASS_NAMES.join(", ")
        ))
    })
}

/// Emit the attention-complexity CSV for the requested grid points.
pub fn cmd_complexity(points: &[String], out: Option<&Path>) -> Result<()> {
    let queries: Vec<ComplexityQuery> = if points.is_empty() {
        let mut qs = Vec::new();
        for (h, c) in [(4usize, 4usize), (8, 8), (16, 16)] {
            qs.push(ComplexityQuery::new(h, h, c, 4)?);
        }
        qs
    } else {
        points
            .iter()
            .map(|p| {
                let parts: Vec<usize> = p
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("bad --point {p:?}: {e}")))?;
                let [h, w, c, m] = parts[..] else {
                    return Err(Error::Config(format!(
                        "--point {p:?} must be h,w,C,M"
                    )));
                };
                ComplexityQuery::new(h, w, c, m)
            })
            .collect::<Result<_>>()?
    };
    let csv = complexity_csv(&queries)?;
    match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Run the built-in verification suites; exit nonzero on any failure.
pub fn cmd_check() -> Result<()> {
    let outcomes = selftest::run_all();
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "[{}] {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::CheckFailed(format!(
            "{failed} of {} suites failed",
            outcomes.len()
        )));
    }
    println!("all {} suites passed", outcomes.len());
    Ok(())
}
