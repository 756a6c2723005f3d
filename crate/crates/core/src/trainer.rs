//! Training loop: normalise → encode → kernel loss → penalty → optimizer
//! step, with metrics logging, a held-out evaluation slice, and
//! checkpointing.

use std::path::PathBuf;

use ndarray::Axis;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, ActivationBatch, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grad::loss_gradients;
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{BilinearModel, ModelDims, Variant};
use crate::optim::{alpha_at, lr_at, OptimConfig};
use crate::topk::{self, TopKModel};

#[derive(Debug, Clone)]
pub enum DataSource {
    /// activation dump on disk
    Dump(PathBuf),
    /// generated on the fly; the sample count is the second field
    Synthetic(SyntheticSpec, usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub variant: Variant,
    pub alpha_target: f64,
    pub optim: OptimConfig,
    pub source: DataSource,
    pub batch_size: usize,
    pub log_every: usize,
    pub checkpoint: Option<PathBuf>,
    /// seed for parameter init (data seeds live in the synthetic spec)
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.alpha_target < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.dims.d_lat == 0 {
            return Err(Error::Config("d_lat must be >= 1 for training".into()));
        }
        if let DataSource::Synthetic(spec, n) = &self.source {
            spec.validate()?;
            if spec.d_in != self.dims.d_in {
                return Err(Error::shape(
                    "train config",
                    format!("d_in {}", self.dims.d_in),
                    format!("synthetic d_in {}", spec.d_in),
                ));
            }
            if *n < 2 * self.batch_size {
                return Err(Error::Config(
                    "synthetic sample count must cover at least two batches".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub error: f64,
    pub density: f64,
    pub total: f64,
    pub lr: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// loss on the held-out slice, unweighted by alpha
    pub held_out: Option<LossBreakdown>,
    pub dropped_rows: usize,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,error,density,total,lr,alpha\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.error, r.density, r.total, r.lr, r.alpha
            ));
        }
        out
    }
}

/// Loaded and normalised data, split into a training slice and a held-out
/// tail (last 5%, never trained on).
pub struct SplitData {
    pub train: ActivationBatch,
    pub held_out: Option<ActivationBatch>,
    pub dropped: usize,
}

pub fn load_source(source: &DataSource) -> Result<ActivationBatch> {
    match source {
        DataSource::Dump(path) => {
            let rows = data::load_dump_all(path)?;
            data::normalize(&rows)
        }
        DataSource::Synthetic(spec, n) => Ok(data::generate(spec, *n)?.0),
    }
}

pub fn split_held_out(batch: ActivationBatch) -> SplitData {
    let n = batch.n_samples();
    let tail = (n / 20).max(2);
    if n < tail + 2 {
        return SplitData { train: batch, held_out: None, dropped: 0 };
    }
    let train_rows = batch.rows.slice(ndarray::s![..n - tail, ..]).to_owned();
    let held_rows = batch.rows.slice(ndarray::s![n - tail.., ..]).to_owned();
    SplitData {
        train: ActivationBatch { rows: train_rows, meta: None, dropped: batch.dropped },
        held_out: Some(ActivationBatch { rows: held_rows, meta: None, dropped: 0 }),
        dropped: batch.dropped,
    }
}

fn batch_at(train: &ActivationBatch, step: usize, batch_size: usize) -> ActivationBatch {
    let n = train.n_samples();
    let bs = batch_size.min(n);
    let n_batches = n / bs;
    let start = (step % n_batches.max(1)) * bs;
    let rows = train.rows.slice(ndarray::s![start..start + bs, ..]).to_owned();
    ActivationBatch { rows, meta: None, dropped: 0 }
}

/// Error and density at the current parameters, without alpha weighting.
pub fn evaluate(model: &BilinearModel, batch: &ActivationBatch) -> Result<LossBreakdown> {
    if batch.n_samples() < 2 {
        return Err(Error::Invalid("evaluation needs at least 2 samples".into()));
    }
    total_loss(model, batch, 0.0)
}

pub fn train(config: &TrainConfig) -> Result<(BilinearModel, TrainReport)> {
    config.validate()?;
    let all = load_source(&config.source)?;
    if all.d_in() != config.dims.d_in {
        return Err(Error::shape(
            "train data",
            format!("d_in {}", config.dims.d_in),
            format!("{}", all.d_in()),
        ));
    }
    let split = split_held_out(all);
    if split.train.n_samples() < config.batch_size {
        return Err(Error::Config(format!(
            "training slice has {} samples, batch_size is {}",
            split.train.n_samples(),
            config.batch_size
        )));
    }

    let mut model = BilinearModel::init(config.dims, config.variant, config.seed)?;
    let mut records = Vec::new();

    for step in 0..config.optim.steps {
        let batch = batch_at(&split.train, step, config.batch_size);
        let alpha = alpha_at(step, config.alpha_target, &config.optim);
        let (breakdown, grads) = loss_gradients(&model, &batch, alpha).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("step {step}: {what}")),
            other => other,
        })?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: error {} density {}",
                breakdown.error, breakdown.density
            )));
        }
        let lr = lr_at(step, &config.optim)?;
        if step % config.log_every == 0 || step + 1 == config.optim.steps {
            records.push(TrainRecord {
                step,
                error: breakdown.error,
                density: breakdown.density,
                total: breakdown.total,
                lr,
                alpha,
            });
        }
        crate::optim::step(&mut model, &grads, step, &config.optim)?;
    }

    let held_out = match &split.held_out {
        Some(h) if h.n_samples() >= 2 => Some(evaluate(&model, h)?),
        _ => None,
    };
    if let Some(path) = &config.checkpoint {
        checkpoint::save(path, &Checkpoint::Bilinear(model.clone()))?;
    }
    Ok((model, TrainReport { records, held_out, dropped_rows: split.dropped }))
}

/// TopK baseline trained on the same data pipeline and schedule. Reported
/// error is the product-space conversion of the raw squared residual, so
/// it lands on the same axis as the bilinear losses; density is the fixed
/// active fraction k / d_lat.
pub fn train_topk(config: &TrainConfig, k: usize) -> Result<(TopKModel, TrainReport)> {
    config.validate()?;
    let all = load_source(&config.source)?;
    let split = split_held_out(all);
    let mut model = TopKModel::init(config.dims.d_in, config.dims.d_lat, k, config.seed)?;
    let mut records = Vec::new();
    let density = k as f64 / config.dims.d_lat as f64;

    for step in 0..config.optim.steps {
        let batch = batch_at(&split.train, step, config.batch_size);
        let mean_s = topk::train_step(&mut model, &batch, step, &config.optim)?;
        if step % config.log_every == 0 || step + 1 == config.optim.steps {
            let lr = lr_at(step, &config.optim)?;
            records.push(TrainRecord {
                step,
                error: topk::quadratic_error_approx(mean_s),
                density,
                total: mean_s,
                lr,
                alpha: 0.0,
            });
        }
    }

    let held_out = match &split.held_out {
        Some(h) if h.n_samples() >= 2 => Some(evaluate_topk(&model, h)?),
        _ => None,
    };
    if let Some(path) = &config.checkpoint {
        checkpoint::save(path, &Checkpoint::TopK(model.clone()))?;
    }
    Ok((model, TrainReport { records, held_out, dropped_rows: split.dropped }))
}

/// Product-space error of a TopK model, using the exact conversion with
/// each sample's reconstruction norm.
pub fn evaluate_topk(model: &TopKModel, batch: &ActivationBatch) -> Result<LossBreakdown> {
    let fwd = topk::topk_forward(model, batch)?;
    let norms = fwd.recon.map_axis(Axis(1), |row| row.iter().map(|x| x * x).sum::<f64>().sqrt());
    let mut total = 0.0;
    for (s, norm) in fwd.sse.iter().zip(norms.iter()) {
        total += topk::quadratic_error(*s, *norm);
    }
    let error = total / batch.n_samples() as f64;
    let density = model.k as f64 / model.d_lat() as f64;
    Ok(LossBreakdown { error, density, total: error })
}

#[derive(Debug, Clone, Copy)]
pub struct ParetoRow {
    pub alpha: f64,
    pub error: f64,
    pub density: f64,
}

/// One full train + held-out evaluation per alpha.
pub fn pareto_sweep(config: &TrainConfig, alphas: &[f64]) -> Result<Vec<ParetoRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = config.clone();
        cfg.alpha_target = alpha;
        cfg.checkpoint = None;
        let (model, report) = train(&cfg)?;
        let eval = match report.held_out {
            Some(b) => b,
            None => {
                let all = load_source(&cfg.source)?;
                evaluate(&model, &all)?
            }
        };
        rows.push(ParetoRow { alpha, error: eval.error, density: eval.density });
    }
    Ok(rows)
}

pub fn pareto_csv(rows: &[ParetoRow]) -> String {
    let mut out = String::from("alpha,error,density\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.alpha, r.error, r.density));
    }
    out
}
