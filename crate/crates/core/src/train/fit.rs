//! The training loop: seeded shuffling and subsampling, Adam with a step schedule,
//! per-epoch validation and best-model selection.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use super::optim::{adam_step, steplr, AdamConfig, OptimizerState};
use super::GradientSession;
use crate::data::{SampleRecord, ZScoreStats};
use crate::encoding::CoordinateNormalizer;
use crate::error::{Result, RetoError};
use crate::metrics::{relative_l2, relative_l2_per_channel};
use crate::model::{Model, ParameterStore};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: u64,
    pub adam: AdamConfig,
    pub points_per_sample: usize,
    pub seed: u64,
    /// When false the log's `seconds` column is written as `-`, making logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 1,
            initial_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_step_epochs: 50,
            adam: AdamConfig::default(),
            points_per_sample: 512,
            seed: 0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(RetoError::Config(m.into()));
        if self.epochs < 1 {
            return err("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return err("batch size must be at least 1");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return err("initial learning rate must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return err("learning-rate decay factor must lie in (0, 1]");
        }
        if self.lr_step_epochs < 1 {
            return err("learning-rate step must be at least 1 epoch");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return err("Adam betas must lie in (0, 1)");
        }
        if !(a.eps > 0.0) {
            return err("Adam epsilon must be positive");
        }
        if self.points_per_sample < 1 {
            return err("points per sample must be at least 1");
        }
        Ok(())
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        steplr(epoch, self.initial_lr, self.lr_decay_factor, self.lr_step_epochs)
    }
}

/// A sample with normalized coordinates and both Z-scored and physical targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub coords: Array2<f64>,
    pub target_z: Array2<f64>,
    pub target: Array2<f64>,
}

impl PreparedSample {
    pub fn new(rec: &SampleRecord, channels: &[String], normalizer: &CoordinateNormalizer, zscore: &ZScoreStats) -> Result<Self> {
        let target = rec.select_channels(channels)?;
        Ok(Self {
            sample_id: rec.sample_id.clone(),
            coords: normalizer.apply_rows(rec.coords.view()),
            target_z: zscore.apply(target.view())?,
            target,
        })
    }

    pub fn num_points(&self) -> usize {
        self.coords.nrows()
    }
}

/// Relative L2 of one sample in physical units: per channel, and over the whole field.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub per_channel: Vec<f64>,
    pub overall: f64,
}

pub fn evaluate_sample(model: &Model, sample: &PreparedSample, zscore: &ZScoreStats) -> Result<SampleError> {
    let pred = zscore.invert(model.forward_normalized(sample.coords.view(), None)?.view())?;
    Ok(SampleError {
        per_channel: relative_l2_per_channel(pred.view(), sample.target.view())?,
        overall: relative_l2(pred.view(), sample.target.view())?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: u64,
    pub lr: f64,
    pub train_mse: f64,
    /// Validation relative L2 per channel, averaged over samples.
    pub val_rel_l2: Vec<f64>,
    /// Relative L2 over all channels together, averaged over samples; the model-selection criterion.
    pub val_score: f64,
    pub seconds: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_mse\tval_rel_l2_per_channel\tval_rel_l2_field\tseconds";

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{:e}\t{:e}\t", self.epoch, self.lr, self.train_mse);
        for (i, v) in self.val_rel_l2.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v:e}");
        }
        let _ = write!(s, "\t{:e}\t", self.val_score);
        match self.seconds {
            Some(t) => {
                let _ = write!(s, "{t:.3}");
            }
            None => s.push('-'),
        }
        s
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Parameters with the best validation score seen (or the final ones without validation data).
    pub best: Model,
    pub best_epoch: u64,
    pub best_score: f64,
    pub last: Model,
    pub log: Vec<EpochRecord>,
    pub optimizer_steps: u64,
    /// Set when training stopped on a non-finite loss or gradient; `best` remains the last good model.
    pub aborted: Option<RetoError>,
}

fn mean_over_samples(per_sample: &[SampleError], channels: usize) -> (Vec<f64>, f64) {
    let mut acc = vec![0.0; channels];
    let mut overall = 0.0;
    for e in per_sample {
        for (a, x) in acc.iter_mut().zip(&e.per_channel) {
            *a += x;
        }
        overall += e.overall;
    }
    let k = 1.0 / per_sample.len() as f64;
    (acc.iter().map(|a| a * k).collect(), overall * k)
}

/// Trains `model` starting after `start_epoch` completed epochs.
///
/// `on_epoch` is called after every epoch with the record and a flag saying whether the
/// model improved; returning an error stops training and propagates it.
pub fn fit<F>(
    mut model: Model,
    train: &[PreparedSample],
    val: &[PreparedSample],
    zscore: &ZScoreStats,
    cfg: &TrainConfig,
    start_epoch: u64,
    mut on_epoch: F,
) -> Result<FitOutcome>
where
    F: FnMut(&EpochRecord, Option<&Model>) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(RetoError::EmptyDataset);
    }
    let channels = model.config().out_channels;
    let mut state: OptimizerState<ParameterStore> = OptimizerState::new(model.params());
    let mut best = model.clone();
    let mut best_epoch = start_epoch;
    let mut best_score = f64::INFINITY;
    let mut log = Vec::new();
    let mut aborted = None;

    'epochs: for epoch in start_epoch..start_epoch + cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad: Option<ParameterStore> = None;
            for &i in batch {
                let s = &train[i];
                let n = cfg.points_per_sample.min(s.num_points());
                let mut rng = stream_rng(cfg.seed, &format!("subsample/{epoch}/{i}"));
                let rows = index::sample(&mut rng, s.num_points(), n).into_vec();
                let x = s.coords.select(Axis(0), &rows);
                let y = s.target_z.select(Axis(0), &rows);
                let mut session = GradientSession::new(&model);
                let loss = session.forward(x.view(), y.view())?;
                if !loss.is_finite() {
                    aborted = Some(RetoError::NonFiniteLoss { epoch: epoch + 1 });
                    break 'epochs;
                }
                loss_sum += loss;
                let g = session.backward()?;
                grad = Some(match grad {
                    None => g,
                    Some(mut acc) => {
                        for ((_, a), (_, _, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut g = grad.expect("non-empty batch");
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                for (_, t) in g.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= k);
                }
            }
            match adam_step(model.params_mut(), &g, &mut state, lr, &cfg.adam) {
                Ok(()) => {}
                Err(e @ RetoError::NonFiniteGradient { .. }) => {
                    aborted = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if !model.params().all_finite() {
                aborted = Some(RetoError::NonFiniteLoss { epoch: epoch + 1 });
                break 'epochs;
            }
        }

        let per_sample = val
            .par_iter()
            .map(|s| evaluate_sample(&model, s, zscore))
            .collect::<Result<Vec<_>>>()?;
        let (val_rel_l2, val_score) = if per_sample.is_empty() {
            (Vec::new(), f64::NAN)
        } else {
            mean_over_samples(&per_sample, channels)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_mse: loss_sum / train.len() as f64,
            val_rel_l2,
            val_score,
            seconds: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        let improved = if val.is_empty() || val_score < best_score {
            best = model.clone();
            best_epoch = epoch + 1;
            if !val.is_empty() {
                best_score = val_score;
            }
            true
        } else {
            false
        };
        log::info!("{}", record.to_line());
        on_epoch(&record, improved.then_some(&best))?;
        log.push(record);
    }

    Ok(FitOutcome {
        best,
        best_epoch,
        best_score,
        last: model,
        log,
        optimizer_steps: state.t,
        aborted,
    })
}
