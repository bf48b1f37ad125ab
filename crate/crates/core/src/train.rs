//! Learning-rate schedule, SGD with momentum, and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{self, SamplePair, SyntheticSpec};
use crate::error::{Result, ScdError};
use crate::graph::GradReport;
use crate::losses::{self, LossConfig};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::{self, DecoderConfig, Params};
use crate::precision::{emulated_backward, Precision, PrecisionMode};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_fraction: f64,
    pub poly_power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lr_peak: 0.03, lr_floor: 0.0, warmup_fraction: 0.1, poly_power: 1.0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return Err(ScdError::Param(format!("need 0 <= lr_floor <= lr_peak, got {} and {}", self.lr_floor, self.lr_peak)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ScdError::Param(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(self.poly_power > 0.0) {
            return Err(ScdError::Param(format!("poly power {} must be positive", self.poly_power)));
        }
        Ok(())
    }
}

/// Linear warmup over the first `floor(warmup_fraction * total)` steps, then
/// polynomial decay from `lr_peak` to `lr_floor`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step > total_steps {
        return Err(ScdError::Contract(format!("step {step} beyond total {total_steps}")));
    }
    let w = (cfg.warmup_fraction * total_steps as f64).floor() as usize;
    if step < w {
        return Ok(cfg.lr_peak * (step + 1) as f64 / w as f64);
    }
    let t = if total_steps > w { (step - w) as f64 / (total_steps - w) as f64 } else { 1.0 };
    Ok(cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * (1.0 - t).powf(cfg.poly_power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-5, grad_clip: None }
    }
}

/// Parameters plus optimizer state.
///
/// Shuffling is seeded from (seed, epoch), so no RNG needs to be carried.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Params,
    pub momentum: Vec<Tensor4>,
    pub step: usize,
    pub best_fscd: Option<f64>,
}

impl TrainState {
    pub fn new(params: Params) -> Self {
        let momentum = params.iter().map(|(_, p)| Tensor4::zeros(p.shape())).collect();
        Self { params, momentum, step: 0, best_fscd: None }
    }
}

/// Clip factor that brings `norm` down to `clip`, or 1.
pub fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

pub fn sgd_step(state: &mut TrainState, grads: &GradReport, lr: f64, cfg: &SgdConfig) -> Result<()> {
    if grads.nonfinite_count > 0 {
        return Err(ScdError::Numerical(format!("{} non-finite gradient entries at step {}", grads.nonfinite_count, state.step)));
    }
    let factor = clip_factor(grads.global_norm(), cfg.grad_clip);
    for ((name, p), buf) in state.params.iter_mut().zip(&mut state.momentum) {
        let g = grads.get(name).ok_or_else(|| ScdError::Shape(format!("no gradient for '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(ScdError::Shape(format!("gradient for '{name}' has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        for ((pv, bv), gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
            let gd = gv * factor + cfg.weight_decay * *pv;
            *bv = cfg.momentum * *bv + gd;
            *pv -= lr * *bv;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated in memory: validation samples follow the training ones in the same stream.
    Synthetic { spec: SyntheticSpec, train_pairs: usize, val_pairs: usize },
    Dirs { train: PathBuf, val: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic { spec: SyntheticSpec::default(), train_pairs: 200, val_pairs: 50 }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        match self {
            Self::Synthetic { spec, train_pairs, val_pairs } => {
                if *train_pairs == 0 || *val_pairs == 0 {
                    return Err(ScdError::Param("train and val pair counts must be positive".into()));
                }
                Ok((data::generate_set(spec, 0, *train_pairs)?, data::generate_set(spec, *train_pairs as u64, *val_pairs)?))
            }
            Self::Dirs { train, val } => Ok((data::load_dir(train)?, data::load_dir(val)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub precision: Precision,
    pub loss_scale: f64,
    pub decoder: DecoderConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            sgd: SgdConfig::default(),
            batch_size: 8,
            epochs: 30,
            seed: 0,
            loss: LossConfig::default(),
            precision: Precision::Fp32Ref,
            loss_scale: 1024.0,
            decoder: DecoderConfig::default(),
            data: DataSource::default(),
            out_dir: PathBuf::from("run"),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.decoder.validate()?;
        self.precision_mode().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ScdError::Param("batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return Err(ScdError::Param("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ScdError::Param(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn precision_mode(&self) -> PrecisionMode {
        PrecisionMode { precision: self.precision, loss_scale: self.loss_scale, grad_clip: self.sgd.grad_clip }
    }
}

pub const CURVES_HEADER: &str = "epoch,step,lr,total,ce_A,ce_B,change,sc,activation_ratio,val_fscd,val_miou,val_oa,val_sek";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: MetricReport,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best: MetricReport,
    pub final_state: TrainState,
    pub checkpoint: PathBuf,
    pub curves: PathBuf,
}

/// Confusion matrix of the model's predictions over `samples`.
pub fn evaluate_model(params: &Params, cfg: &DecoderConfig, samples: &[SamplePair], threshold: f64, batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes - 1);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (a, b, labels) = data::make_batch(&refs)?;
        let pred = model::predict(params, cfg, &a, &b)?;
        let (pa, pb, _) = model::predict_scd_map(&pred, threshold);
        cm.accumulate(&labels.sem_a, &labels.sem_b, &pa, &pb)?;
    }
    Ok(cm)
}

/// Epoch order: a permutation seeded by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(data::sample_seed(seed, epoch as u64)));
    order
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| ScdError::io(path, e))?))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// Runs the full protocol, calling `on_epoch` after each validation pass.
pub fn train_with(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = cfg.data.load()?;
    let classes = cfg.decoder.num_classes - 1;
    for s in train_set.iter().chain(&val_set) {
        if let Some(&l) = s.sem_a.iter().chain(&s.sem_b).find(|&&l| l != losses::IGNORE_INDEX && l as usize > classes) {
            return Err(ScdError::Data(format!("label {l} exceeds {classes} classes")));
        }
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| ScdError::io(&cfg.out_dir, e))?;
    let curves_path = cfg.out_dir.join("curves.csv");
    let ckpt_path = cfg.out_dir.join("best.ckpt");
    let mut curves = create(&curves_path)?;
    let io = |e| ScdError::io(&curves_path, e);
    writeln!(curves, "{CURVES_HEADER}").map_err(io)?;

    let mut state = TrainState::new(model::init_params(&cfg.decoder, cfg.seed)?);
    let mode = cfg.precision_mode();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut summaries = Vec::with_capacity(cfg.epochs);
    let mut best: Option<MetricReport> = None;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut skipped = 0;
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = state.step;
            let lr = lr_schedule(step, total_steps, &cfg.schedule)?;
            let refs: Vec<&SamplePair> = chunk.iter().map(|&j| &train_set[j]).collect();
            let (a, b, labels) = data::make_batch(&refs)?;
            let (mut graph, nodes) = model::forward_graph(&state.params, &cfg.decoder, &a, &b)?;
            let (loss, parts) = losses::total_loss(&mut graph, &nodes.loss_inputs(), &labels, &cfg.loss)?;
            let grads = emulated_backward(&mut graph, loss, &mode)?;
            let overflow = grads.nonfinite_count > 0 || !parts.total.is_finite();
            if overflow && cfg.precision == Precision::Fp32Ref {
                return Err(ScdError::Numerical(format!("non-finite loss or gradient at epoch {} step {step}", epoch + 1)));
            }
            if overflow {
                skipped += 1;
                state.step += 1;
            } else {
                sgd_step(&mut state, &grads, lr, &cfg.sgd)?;
            }
            loss_sum += parts.total;
            write!(
                curves,
                "{},{},{},{},{},{},{},{},{}",
                epoch + 1,
                step,
                lr,
                parts.total,
                parts.ce_a,
                parts.ce_b,
                parts.change_term,
                parts.sc_term,
                parts.activation_ratio
            )
            .map_err(io)?;
            if i + 1 == per_epoch {
                let report = evaluate_model(&state.params, &cfg.decoder, &val_set, cfg.threshold, cfg.batch_size)?.report()?;
                writeln!(curves, ",{},{},{},{}", report.f_scd, report.miou, report.oa, report.sek).map_err(io)?;
                if best.is_none_or(|b| report.f_scd > b.f_scd) {
                    best = Some(report);
                    state.best_fscd = Some(report.f_scd);
                    checkpoint::save(&state.params, &ckpt_path)?;
                }
                let summary = EpochSummary { epoch: epoch + 1, mean_loss: loss_sum / per_epoch as f64, val: report, skipped_steps: skipped };
                on_epoch(&summary);
                summaries.push(summary);
            } else {
                writeln!(curves, ",,,,").map_err(io)?;
            }
        }
    }
    curves.flush().map_err(io)?;
    let best = best.expect("at least one epoch");
    data::write_report(&best, &cfg.out_dir.join("metrics.csv"))?;
    Ok(TrainOutcome { epochs: summaries, best, final_state: state, checkpoint: ckpt_path, curves: curves_path })
}
