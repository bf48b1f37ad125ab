//! binary16 emulation and the near-margin instability experiment.

use std::io::Write;
use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, ScdError};
use crate::graph::{Graph, GradReport, NodeId};
use crate::losses::{self, ChangeLabel, ConsistencyVariant, Hinge};
use crate::tensor::Tensor4;
use crate::train::{lr_schedule, ScheduleConfig};

/// Round to the nearest binary16 value (ties to even), widened back to f64.
pub fn to_binary16(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

pub fn quantize_tensor(x: &Tensor4) -> Tensor4 {
    x.map(to_binary16)
}

fn quantize_in_place(t: &mut Tensor4) {
    t.data_mut().iter_mut().for_each(|v| *v = to_binary16(*v));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp32Ref,
    Fp16Emulated,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fp32Ref => "fp32",
            Self::Fp16Emulated => "fp16",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = ScdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" | "fp32-ref" => Ok(Self::Fp32Ref),
            "fp16" | "fp16-emulated" => Ok(Self::Fp16Emulated),
            _ => Err(ScdError::Param(format!("unknown precision '{s}' (fp32|fp16)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionMode {
    pub precision: Precision,
    pub loss_scale: f64,
    pub grad_clip: Option<f64>,
}

impl Default for PrecisionMode {
    fn default() -> Self {
        Self { precision: Precision::Fp32Ref, loss_scale: 1024.0, grad_clip: None }
    }
}

impl PrecisionMode {
    pub fn fp16(loss_scale: f64) -> Self {
        Self { precision: Precision::Fp16Emulated, loss_scale, grad_clip: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_scale > 0.0) {
            return Err(ScdError::Param(format!("loss scale {} must be positive", self.loss_scale)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ScdError::Param(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Backward under the given precision.
///
/// In fp16 mode the graph's cached forward values are replaced by a replay in
/// which every leaf and op output is rounded to binary16; the loss is seeded
/// with `loss_scale`, every backward tensor is rounded, and the parameter
/// gradients are unscaled in f64.
pub fn emulated_backward(graph: &mut Graph, loss: NodeId, mode: &PrecisionMode) -> Result<GradReport> {
    mode.validate()?;
    match mode.precision {
        Precision::Fp32Ref => graph.backward(loss),
        Precision::Fp16Emulated => {
            graph.replay_with(&quantize_in_place)?;
            let scaled = graph.backward_with(loss, mode.loss_scale, Some(&quantize_in_place))?;
            let grads = scaled.grads.into_iter().map(|(n, g)| (n, g.scale(1.0 / mode.loss_scale))).collect();
            let mut report = GradReport::from_grads(grads);
            if !graph.value(loss).item().is_finite() {
                report.nonfinite_count += 1;
            }
            Ok(report)
        }
    }
}

/// Backward with a loss scale but no rounding; used to check scaling is exact.
pub fn scaled_backward(graph: &Graph, loss: NodeId, loss_scale: f64) -> Result<GradReport> {
    let scaled = graph.backward_with(loss, loss_scale, None)?;
    let grads = scaled.grads.into_iter().map(|(n, g)| (n, g.scale(1.0 / loss_scale))).collect();
    Ok(GradReport::from_grads(grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub activation_ratio: f64,
    pub grad_norm: f64,
    pub nonfinite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityTrace {
    pub records: Vec<StepRecord>,
    pub unstable: bool,
    pub first_event_step: Option<usize>,
}

impl StabilityTrace {
    pub const CSV_HEADER: &'static str = "step,loss,activation_ratio,grad_norm,nonfinite";

    pub fn file_name(variant: ConsistencyVariant, precision: Precision, seed: u64) -> String {
        format!("trace_{variant}_{precision}_seed{seed}.csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{}\n",
                r.step,
                r.loss,
                r.activation_ratio,
                r.grad_norm,
                u8::from(r.nonfinite)
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| ScdError::io(path, e))
    }
}

/// Cliff thresholds for `detect_instability`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CliffRule {
    pub ratio_jump: f64,
    pub mad_factor: f64,
    pub min_loss_jump: f64,
    pub window: usize,
}

impl Default for CliffRule {
    fn default() -> Self {
        Self { ratio_jump: 0.5, mad_factor: 5.0, min_loss_jump: 0.1, window: 20 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// First step after `burn_in` showing a cliff.
///
/// The loss rule compares the step's loss change against the median absolute
/// deviation of the preceding `window` one-step changes.
pub fn detect_instability(records: &[StepRecord], burn_in: usize, rule: &CliffRule) -> (bool, Option<usize>) {
    for t in burn_in + 1..records.len() {
        let (prev, cur) = (&records[t - 1], &records[t]);
        if cur.nonfinite || (cur.activation_ratio - prev.activation_ratio).abs() >= rule.ratio_jump {
            return (true, Some(cur.step));
        }
        let lo = t.saturating_sub(rule.window);
        if t - lo >= 2 {
            let mut diffs: Vec<f64> = (lo + 1..t).map(|s| records[s].loss - records[s - 1].loss).collect();
            let med = median(&mut diffs.clone());
            let mut dev: Vec<f64> = diffs.iter_mut().map(|d| (*d - med).abs()).collect();
            let mad = median(&mut dev);
            let jump = (cur.loss - prev.loss).abs();
            if jump >= rule.mad_factor * mad && jump >= rule.min_loss_jump {
                return (true, Some(cur.step));
            }
        }
    }
    (false, None)
}

/// The near-margin population and its training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityConfig {
    pub pairs: usize,
    pub dim: usize,
    pub margin: f64,
    pub tau: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub seed: u64,
    pub variant: ConsistencyVariant,
    pub mode: PrecisionMode,
    /// Fraction of the population that is changed.
    pub changed_fraction: f64,
    /// Changed cosines start in [m - gap - spread, m - gap].
    pub gap: f64,
    pub spread: f64,
    /// Unchanged cosines start in [unchanged_cos - 0.02, unchanged_cos + 0.02].
    pub unchanged_cos: f64,
    /// Nuisance-channel magnitude of unchanged and changed pairs.
    pub unchanged_nuisance: f64,
    pub changed_nuisance: f64,
    pub burn_in_fraction: f64,
    pub rule: CliffRule,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        Self {
            pairs: 4096,
            dim: 16,
            margin: 0.1,
            tau: 0.5,
            lr_peak: 1.0,
            lr_floor: 0.5,
            warmup_fraction: 0.1,
            steps: 200,
            seed: 0,
            variant: ConsistencyVariant::Sc,
            mode: PrecisionMode::fp16(1024.0),
            changed_fraction: 0.5,
            gap: 4e-4,
            spread: 3e-4,
            unchanged_cos: 0.9,
            unchanged_nuisance: 0.015,
            changed_nuisance: 1.0,
            burn_in_fraction: 0.1,
            rule: CliffRule::default(),
        }
    }
}

impl InstabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScdError::Param(m));
        if self.pairs < 2 || self.dim < 2 || self.steps < 1 {
            return bad(format!("need pairs >= 2, dim >= 2, steps >= 1 (got {}, {}, {})", self.pairs, self.dim, self.steps));
        }
        if !(self.changed_fraction > 0.0 && self.changed_fraction < 1.0) {
            return bad(format!("changed fraction {} outside (0, 1)", self.changed_fraction));
        }
        if self.variant == ConsistencyVariant::None {
            return bad("the experiment needs a consistency loss (sc|ssc)".into());
        }
        if self.variant == ConsistencyVariant::Ssc && !(self.tau > 0.0) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return bad(format!("need 0 <= lr_floor <= lr_peak (got {}, {})", self.lr_floor, self.lr_peak));
        }
        let (cn, un) = (self.changed_nuisance, self.unchanged_nuisance);
        let top = self.margin - self.gap;
        let lo = top - self.spread;
        if !(lo * (1.0 + cn * cn) - cn * cn >= -1.0 && top * (1.0 + cn * cn) - cn * cn <= 1.0) {
            return bad("changed cosine band is unreachable with this nuisance magnitude".into());
        }
        let uc = self.unchanged_cos;
        if !((uc - 0.02) * (1.0 + un * un) - un * un > -1.0 && (uc + 0.02) * (1.0 + un * un) - un * un < 1.0) {
            return bad("unchanged cosine band is unreachable".into());
        }
        self.mode.validate()
    }

    fn hinge(&self) -> Hinge {
        match self.variant {
            ConsistencyVariant::Ssc => Hinge::Soft { tau: self.tau },
            _ => Hinge::Hard,
        }
    }
}

/// Unit vector in R^k drawn uniformly.
fn unit(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A unit vector whose cosine with unit `a` is exactly `rho`.
fn with_cosine(rng: &mut ChaCha8Rng, a: &[f64], rho: f64) -> Vec<f64> {
    loop {
        let mut r = unit(rng, a.len());
        let d: f64 = r.iter().zip(a).map(|(x, y)| x * y).sum();
        r.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            let s = (1.0 - rho * rho).max(0.0).sqrt();
            return a.iter().zip(&r).map(|(x, y)| rho * x + s * y / n).collect();
        }
    }
}

/// The constructed population: per-pair embeddings (u1, u2) and labels.
///
/// Channel 0 is a nuisance channel shared in sign by both members of every
/// pair; channels 1.. carry the pair's own content. The only learnable state
/// is a gain on the nuisance channel, shared by all pairs. Raising it pulls
/// unchanged pairs together and also raises every changed cosine by almost the
/// same amount, so the changed band moves as a block.
pub struct Population {
    pub u1: Tensor4,
    pub u2: Tensor4,
    pub labels: Vec<ChangeLabel>,
}

pub fn build_population(cfg: &InstabilityConfig) -> Result<Population> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, d) = (cfg.pairs, cfg.dim);
    let changed = ((p as f64) * cfg.changed_fraction).round().clamp(1.0, (p - 1) as f64) as usize;
    let mut u1 = Tensor4::zeros([p, d, 1, 1]);
    let mut u2 = Tensor4::zeros([p, d, 1, 1]);
    let mut labels = Vec::with_capacity(p);
    for i in 0..p {
        let is_changed = i >= p - changed;
        let (nu, target) = if is_changed {
            let top = cfg.margin - cfg.gap;
            (cfg.changed_nuisance, top - cfg.spread * rng.random::<f64>())
        } else {
            (cfg.unchanged_nuisance, cfg.unchanged_cos + 0.04 * (rng.random::<f64>() - 0.5))
        };
        // With unit content vectors, cos = (rho + nu^2) / (1 + nu^2).
        let rho = target * (1.0 + nu * nu) - nu * nu;
        let a = unit(&mut rng, d - 1);
        let b = with_cosine(&mut rng, &a, rho);
        let row = i * d..(i + 1) * d;
        for (u, content) in [(&mut u1, &a), (&mut u2, &b)] {
            let r = &mut u.data_mut()[row.clone()];
            r[0] = nu;
            r[1..].copy_from_slice(content);
        }
        labels.push(if is_changed { ChangeLabel::Changed } else { ChangeLabel::Unchanged });
    }
    Ok(Population { u1, u2, labels })
}

/// Records the consistency-loss graph over the population for gain `g`.
/// Returns (graph, cosine node, loss node).
pub fn population_graph(pop: &Population, gain: f64, cfg: &InstabilityConfig) -> Result<(Graph, NodeId, NodeId)> {
    let d = cfg.dim;
    let mut g = Graph::new();
    let gain_id = g.param("nuisance_gain", Tensor4::scalar(gain));
    let mut feats = Vec::new();
    for u in [&pop.u1, &pop.u2] {
        let x = g.constant(u.clone());
        let nuis = g.slice_channels(x, 0, 1)?;
        let content = g.slice_channels(x, 1, d - 1)?;
        let scaled = g.mul(nuis, gain_id)?;
        feats.push(g.concat_channels(&[scaled, content])?);
    }
    let cos = g.cosine(feats[0], feats[1])?;
    let loss = g.consistency(cos, &pop.labels, cfg.margin, cfg.hinge())?;
    Ok((g, cos, loss))
}

/// Σ over changed pairs of |dL/dcos|, per step, from a finished run's cosines.
pub fn changed_gradient_mass(cos: &Tensor4, labels: &[ChangeLabel], margin: f64, hinge: Hinge) -> f64 {
    let count = labels.iter().filter(|&&y| y != ChangeLabel::Ignore).count() as f64;
    cos.data()
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == ChangeLabel::Changed)
        .map(|(&c, &y)| losses::consistency_slope(c, y, margin, hinge).abs() / count)
        .sum()
}

/// Full run: the trace plus the per-step changed-pair gradient mass.
pub fn run_instability_detailed(cfg: &InstabilityConfig) -> Result<(StabilityTrace, Vec<f64>)> {
    let pop = build_population(cfg)?;
    let sched = ScheduleConfig {
        lr_peak: cfg.lr_peak,
        lr_floor: cfg.lr_floor,
        warmup_fraction: cfg.warmup_fraction,
        poly_power: 1.0,
    };
    let mut gain = 1.0;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut mass = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (mut graph, cos, loss) = population_graph(&pop, gain, cfg)?;
        let report = emulated_backward(&mut graph, loss, &cfg.mode)?;
        let cos_v = graph.value(cos);
        let activation_ratio = losses::gradient_activation_ratio(cos_v, &pop.labels, cfg.margin)?;
        mass.push(changed_gradient_mass(cos_v, &pop.labels, cfg.margin, cfg.hinge()));
        let grad = report.get("nuisance_gain").expect("registered").item();
        let grad_norm = grad.abs();
        let nonfinite = report.nonfinite_count > 0;
        records.push(StepRecord { step, loss: graph.value(loss).item(), activation_ratio, grad_norm, nonfinite });
        if nonfinite {
            break;
        }
        let clipped = match cfg.mode.grad_clip {
            Some(c) if grad_norm > c => grad * c / grad_norm,
            _ => grad,
        };
        gain -= lr_schedule(step, cfg.steps, &sched)? * clipped;
    }
    let burn_in = (cfg.burn_in_fraction * cfg.steps as f64).floor() as usize;
    let (unstable, first_event_step) = detect_instability(&records, burn_in, &cfg.rule);
    Ok((StabilityTrace { records, unstable, first_event_step }, mass))
}

pub fn run_instability_experiment(cfg: &InstabilityConfig) -> Result<StabilityTrace> {
    Ok(run_instability_detailed(cfg)?.0)
}
