//! End-to-end training: shuffled mini-batches, one optimizer step per batch,
//! per-epoch metrics.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec, PairedSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode};
use crate::memory::DEFAULT_SCALE;
use crate::model::{Architecture, Batch, GradientFlow, Model};
use crate::optim::{Optimizer, OptimizerKind, OptimizerSettings};
use crate::seed::rng_for;
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub optimizer_settings: OptimizerSettings,
    pub batch_size: usize,
    pub epochs: usize,
    /// `N`; zero trains the memory-free baseline.
    pub slots: usize,
    /// `r`
    pub scale: f64,
    pub detach_target_addressing: bool,
    pub detach_save_target: bool,
    pub share_head: bool,
    pub hidden: usize,
    pub source_features: usize,
    pub target_features: usize,
    pub fused: usize,
    pub seed: u64,
    /// Evaluate on the test set every this many epochs (and after the last);
    /// zero disables evaluation during training.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            optimizer_settings: OptimizerSettings::default(),
            batch_size: 32,
            epochs: 20,
            slots: 32,
            scale: DEFAULT_SCALE,
            detach_target_addressing: true,
            detach_save_target: false,
            share_head: true,
            hidden: 32,
            source_features: 16,
            target_features: 16,
            fused: 32,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it makes every step a no-op
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, spec: &DatasetSpec) -> Architecture {
        Architecture {
            source_input: spec.source_dim,
            target_input: spec.target_dim,
            hidden: self.hidden,
            source_features: self.source_features,
            target_features: self.target_features,
            fused: self.fused,
            classes: spec.num_classes,
            slots: self.slots,
            scale: self.scale,
            share_head: self.share_head,
        }
    }

    pub fn flow(&self) -> GradientFlow {
        GradientFlow {
            detach_target: self.detach_target_addressing,
            detach_save_target: self.detach_save_target,
        }
    }

    pub fn init_model(&self, spec: &DatasetSpec) -> Result<Model> {
        Model::init(self.architecture(spec), &mut rng_for(self.seed, &[STREAM_INIT]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    /// Absent for the memory-free model.
    pub l_save: Option<f64>,
    pub l_bridge: Option<f64>,
    pub l_task: f64,
    pub l_total: f64,
    pub acc_recall: Option<f64>,
    pub acc_oracle: Option<f64>,
    pub acc_baseline: Option<f64>,
    pub recall_fidelity: Option<f64>,
    pub wall_secs: f64,
}

/// Per-epoch training record with the effective configuration echoed as
/// leading `#` comment lines of the CSV form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub config_echo: String,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str =
    "epoch,l_save,l_bridge,l_task,l_total,acc_recall,acc_oracle,acc_baseline,recall_fidelity,wall_secs";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    /// Equality of every recorded value except wall time.
    pub fn same_values(&self, other: &MetricsLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.wall_secs = 0.0;
                b.wall_secs = 0.0;
                a == b
            })
    }

    pub fn l_save_series(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.l_save).collect()
    }

    pub fn l_bridge_series(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.l_bridge).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for line in self.config_echo.lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(s, "{METRICS_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                opt(r.l_save),
                opt(r.l_bridge),
                r.l_task,
                r.l_total,
                opt(r.acc_recall),
                opt(r.acc_oracle),
                opt(r.acc_baseline),
                opt(r.recall_fidelity),
                r.wall_secs
            );
        }
        s
    }
}

fn stack<S: PairedSource + ?Sized>(data: &S, idx: &[usize], target: bool) -> Result<Tensor> {
    let get = |i: usize| if target { data.target(i) } else { data.source(i) };
    let mut out = Vec::new();
    let (mut steps, mut cols) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        let x = get(i);
        if k == 0 {
            (steps, cols) = (x.rows(), x.cols());
            out.reserve(idx.len() * steps * cols);
        }
        if x.rows() != steps || x.cols() != cols {
            return Err(Error::dim("batch", format!("{steps}x{cols}"), format!("{}x{}", x.rows(), x.cols())));
        }
        out.extend_from_slice(x.data());
    }
    Tensor::matrix(idx.len() * steps, cols, out)
}

/// Stacks samples `idx` of `data` into one batch. Target streams are read
/// only when `with_target` is set.
pub fn make_batch<S: PairedSource + ?Sized>(data: &S, idx: &[usize], with_target: bool) -> Result<Batch> {
    if idx.is_empty() {
        return Err(Error::dim("batch", "at least one sample", 0));
    }
    let x_src = stack(data, idx, false)?;
    let x_tgt = if with_target { Some(stack(data, idx, true)?) } else { None };
    Ok(Batch {
        steps: data.source(idx[0]).rows(),
        x_src,
        x_tgt,
        labels: idx.iter().map(|&i| data.label(i)).collect(),
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricsLog,
}

/// Trains a fresh model initialised from `config.seed`.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let model = config.init_model(&train_set.spec)?;
    train_from(model, config, train_set, test_set)
}

/// Continues training `model`; the batch order depends only on
/// `config.seed` and the epoch number.
pub fn train_from(mut model: Model, config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_dataset(&model, train_set)?;
    check_dataset(&model, test_set)?;
    let flow = config.flow();
    let with_target = model.arch.has_memory();
    let mut optimizer = Optimizer::new(config.optimizer, config.lr, config.optimizer_settings, &model.store)?;
    let mut log = MetricsLog {
        config_echo: toml::to_string(config).expect("train config serializes"),
        rows: Vec::new(),
    };
    let start = Instant::now();
    let mut iteration = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut save, mut bridge, mut task, mut total, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            iteration += 1;
            let batch = make_batch(train_set, chunk, with_target)?;
            let terms = model.accumulate_gradients(&batch, flow)?;
            for (name, v) in [
                ("L_save", terms.save),
                ("L_bridge", terms.bridge),
                ("L_task", terms.task),
                ("L_total", terms.total),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFinite { term: name, epoch, iteration });
                }
            }
            optimizer.step(&mut model.store)?;
            let w = chunk.len() as f64;
            save += terms.save * w;
            bridge += terms.bridge * w;
            task += terms.task * w;
            total += terms.total * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        let mut row = MetricsRow {
            epoch,
            l_save: with_target.then_some(save / n),
            l_bridge: with_target.then_some(bridge / n),
            l_task: task / n,
            l_total: total / n,
            acc_recall: None,
            acc_oracle: None,
            acc_baseline: None,
            recall_fidelity: None,
            wall_secs: 0.0,
        };
        let due = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        if due && !test_set.is_empty() {
            if with_target {
                let r = evaluate(&model, test_set, EvalMode::Oracle)?;
                row.acc_recall = r.accuracy_recall;
                row.acc_oracle = r.accuracy_oracle;
                row.recall_fidelity = r.recall_fidelity;
            } else {
                row.acc_baseline = evaluate(&model, test_set, EvalMode::Baseline)?.accuracy_baseline;
            }
        }
        row.wall_secs = start.elapsed().as_secs_f64();
        debug!("epoch {epoch}: {row:?}");
        info!(
            "epoch {epoch}/{}: L_total {:.4} L_task {:.4}",
            config.epochs, row.l_total, row.l_task
        );
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

/// Fails with an incompatibility error when `data` does not fit `model`.
pub fn check_dataset(model: &Model, data: &Dataset) -> Result<()> {
    let a = &model.arch;
    let s = &data.spec;
    if a.source_input != s.source_dim || a.target_input != s.target_dim || a.classes != s.num_classes {
        return Err(Error::Incompatible(format!(
            "model expects d_src={}, d_tgt={}, K={} but dataset has d_src={}, d_tgt={}, K={}",
            a.source_input, a.target_input, a.classes, s.source_dim, s.target_dim, s.num_classes
        )));
    }
    Ok(())
}
