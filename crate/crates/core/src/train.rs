//! Training loop: decoupled-weight-decay adaptive-moment updates (or plain
//! SGD), per-epoch validation AUC, checkpointing, and the metrics CSV. The
//! whole pipeline is a pure function of (seed, config, data), so two runs
//! with the same inputs produce byte-identical artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ModelConfig, CLASS_NAMES};
use crate::data::{make_batches, Batch, LoadedSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate, select_best_epoch, EvalReport};
use crate::model::{bce_loss, SwinModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay; the default for
    /// transformer fine-tuning.
    AdamW,
    Sgd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 3e-5,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Optimizer state: first/second moments per parameter path plus the shared
/// step count. Parameters are replaced functionally, which also discards
/// their gradients, so no separate zeroing pass is needed.
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(opts: &TrainOptions) -> Self {
        Optimizer {
            kind: opts.optimizer,
            beta1: opts.beta1,
            beta2: opts.beta2,
            eps: opts.eps,
            weight_decay: opts.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update from the gradients currently on the parameters.
    pub fn step(&mut self, model: &mut SwinModel, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        model.visit_params_mut(|path, param| {
            let grad = param.grad_or_zeros();
            let mut data = param.data().to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in data.iter_mut().zip(&grad) {
                        *p -= lr * (g + self.weight_decay * *p);
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = self
                        .moments
                        .entry(path.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    for i in 0..grad.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps)
                            + self.weight_decay * data[i]);
                    }
                }
            }
            *param = Tensor::parameter(data, param.shape()).expect("shape unchanged");
        });
    }
}

/// Per-epoch record: mean train loss plus the validation AUC breakdown.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_mean_auc: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Mutable training-run state; reproducible from (seed, config, manifest).
pub struct TrainState {
    pub epoch: usize,
    pub model: SwinModel,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(config: &ModelConfig, opts: &TrainOptions) -> Result<Self> {
        Ok(TrainState {
            epoch: 0,
            model: SwinModel::init(config, opts.seed)?,
            optimizer: Optimizer::new(opts),
            seed: opts.seed,
            history: Vec::new(),
        })
    }
}

/// One pass over the batches: forward, loss, backward, update. Returns the
/// mean train loss; a non-finite loss aborts with its location.
pub fn train_epoch(
    state: &mut TrainState,
    config: &ModelConfig,
    batches: &[Batch],
    lr: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (bi, batch) in batches.iter().enumerate() {
        let probs = state.model.forward_probs(&batch.images, config)?;
        let loss = bce_loss(&probs, &batch.labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                batch: bi,
                value,
            });
        }
        loss.backward()?;
        state.optimizer.step(&mut state.model, lr);
        total += value;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Everything a training run needs besides the loaded data.
#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub config: ModelConfig,
    pub opts: TrainOptions,
    pub out_dir: PathBuf,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub warnings: Vec<String>,
}

/// Run the full protocol: train for a fixed epoch count, evaluate validation
/// AUC after each epoch, checkpoint every epoch, then record the epoch with
/// the maximum validation AUC (earliest on ties). No learning-rate schedule
/// and no early stopping.
pub fn run_training(
    plan: &TrainPlan,
    train: &LoadedSplit,
    val: &LoadedSplit,
) -> Result<TrainOutcome> {
    if plan.opts.epochs == 0 {
        return Err(Error::Config("nothing to train: epochs = 0".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    plan.config.validate()?;
    std::fs::create_dir_all(&plan.out_dir)?;
    plan.config.save(plan.out_dir.join("config.toml"))?;

    let mut state = TrainState::new(&plan.config, &plan.opts)?;
    let val_batches = make_batches(val, plan.opts.batch_size, 0, false)?;
    let mut warnings = Vec::new();

    let mut metrics = String::from("epoch,train_loss,val_mean_auc");
    for class in CLASS_NAMES {
        metrics.push(',');
        metrics.push_str(class);
    }
    metrics.push('\n');

    for epoch in 0..plan.opts.epochs {
        state.epoch = epoch;
        let batches = make_batches(
            train,
            plan.opts.batch_size,
            plan.opts.seed.wrapping_add(epoch as u64 + 1),
            true,
        )?;
        let train_loss = train_epoch(&mut state, &plan.config, &batches, plan.opts.lr)?;
        let report = evaluate(&state.model, &plan.config, &val_batches, "val", epoch)?;
        let undefined = report.undefined_classes();
        if !undefined.is_empty() && warnings.is_empty() {
            warnings.push(format!(
                "validation AUC undefined for {} (single-class split); excluded from the mean",
                undefined.join(", ")
            ));
        }

        metrics.push_str(&format!("{epoch},{train_loss:.6},{:.6}", report.mean_auc));
        for value in &report.per_class {
            match value {
                Some(v) => metrics.push_str(&format!(",{v:.6}")),
                None => metrics.push_str(",NA"),
            }
        }
        metrics.push('\n');

        checkpoint::save(&state.model.to_params(), checkpoint_path(&plan.out_dir, epoch))?;
        state.history.push(EpochStats {
            train_loss,
            val_mean_auc: report.mean_auc,
            per_class: report.per_class,
        });
    }

    let metrics_csv = plan.out_dir.join("metrics.csv");
    std::fs::write(&metrics_csv, metrics)?;

    let aucs: Vec<f64> = state.history.iter().map(|h| h.val_mean_auc).collect();
    let best_epoch = select_best_epoch(&aucs)?;
    let best_checkpoint = checkpoint_path(&plan.out_dir, best_epoch);
    std::fs::write(
        plan.out_dir.join("best.txt"),
        format!(
            "best_epoch={best_epoch}\ncheckpoint={}\nval_mean_auc={:.6}\n",
            best_checkpoint
                .file_name()
                .unwrap_or_default()
                .to_string_lossy(),
            aucs[best_epoch]
        ),
    )?;

    Ok(TrainOutcome {
        state,
        best_epoch,
        best_checkpoint,
        metrics_csv,
        warnings,
    })
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.swcx"))
}

/// Evaluate a stored checkpoint against loaded data.
pub fn evaluate_checkpoint(
    config: &ModelConfig,
    checkpoint_file: impl AsRef<Path>,
    data: &LoadedSplit,
    batch_size: usize,
    split: &str,
) -> Result<EvalReport> {
    let params = checkpoint::load(checkpoint_file)?;
    let model = SwinModel::from_params(config, &params)?;
    let batches = make_batches(data, batch_size, 0, false)?;
    evaluate(&model, config, &batches, split, 0)
}
