//! Consistency losses, segmentation losses and the composite objective.

use crate::error::{Result, ScdError};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::tensor::Tensor4;

pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel supervision for the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeLabel {
    /// y = +1
    Unchanged,
    /// y = -1
    Changed,
    Ignore,
}

/// Changed-branch penalty shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hinge {
    /// max(0, c - m)
    Hard,
    /// tau * softplus((c - m) / tau)
    Soft { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyVariant {
    None,
    Sc,
    Ssc,
}

impl std::str::FromStr for ConsistencyVariant {
    type Err = ScdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sc" => Ok(Self::Sc),
            "ssc" => Ok(Self::Ssc),
            _ => Err(ScdError::Param(format!("unknown loss variant '{s}' (none|sc|ssc)"))),
        }
    }
}

impl std::fmt::Display for ConsistencyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Sc => "sc",
            Self::Ssc => "ssc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub tau: f64,
    pub sc_weight: f64,
    pub variant: ConsistencyVariant,
    pub ignore_index: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.1, tau: 0.5, sc_weight: 1.0, variant: ConsistencyVariant::Ssc, ignore_index: IGNORE_INDEX }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > -1.0 && self.margin < 1.0) {
            return Err(ScdError::Param(format!("margin {} outside (-1, 1)", self.margin)));
        }
        if self.variant == ConsistencyVariant::Ssc && !(self.tau > 0.0) {
            return Err(ScdError::Param(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }

    pub fn hinge(&self) -> Option<Hinge> {
        match self.variant {
            ConsistencyVariant::None => None,
            ConsistencyVariant::Sc => Some(Hinge::Hard),
            ConsistencyVariant::Ssc => Some(Hinge::Soft { tau: self.tau }),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_a: f64,
    pub ce_b: f64,
    pub change_term: f64,
    pub sc_term: f64,
    pub activation_ratio: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn bce_with_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub fn consistency_term(c: f64, y: ChangeLabel, m: f64, hinge: Hinge) -> f64 {
    match (y, hinge) {
        (ChangeLabel::Ignore, _) => 0.0,
        (ChangeLabel::Unchanged, _) => 1.0 - c,
        (ChangeLabel::Changed, Hinge::Hard) => (c - m).max(0.0),
        // τ·softplus(x/τ) written as the hard hinge plus a positive residual,
        // so the soft term never rounds below the hard one
        (ChangeLabel::Changed, Hinge::Soft { tau }) => (c - m).max(0.0) + tau * (-((c - m) / tau).abs()).exp().ln_1p(),
    }
}

/// d(term)/dc.
pub fn consistency_slope(c: f64, y: ChangeLabel, m: f64, hinge: Hinge) -> f64 {
    match (y, hinge) {
        (ChangeLabel::Ignore, _) => 0.0,
        (ChangeLabel::Unchanged, _) => -1.0,
        (ChangeLabel::Changed, Hinge::Hard) => {
            if c > m {
                1.0
            } else {
                0.0
            }
        }
        (ChangeLabel::Changed, Hinge::Soft { tau }) => sigmoid((c - m) / tau),
    }
}

/// Per-pixel cosine similarity over channels, shape (n,1,h,w).
pub fn cosine_map(x1: &Tensor4, x2: &Tensor4) -> Result<Tensor4> {
    Ok(kernels::cosine_parts(x1, x2)?.cos)
}

fn reduce(cos: &Tensor4, y: &[ChangeLabel], m: f64, hinge: Hinge) -> Result<f64> {
    if y.len() != cos.len() {
        return Err(ScdError::Shape(format!("{} labels for {:?}", y.len(), cos.shape())));
    }
    let mut g = Graph::new();
    let c = g.constant(cos.clone());
    let l = g.consistency(c, y, m, hinge)?;
    Ok(g.value(l).item())
}

pub fn sc_loss(cos: &Tensor4, y: &[ChangeLabel], m: f64) -> Result<f64> {
    reduce(cos, y, m, Hinge::Hard)
}

pub fn ssc_loss(cos: &Tensor4, y: &[ChangeLabel], m: f64, tau: f64) -> Result<f64> {
    reduce(cos, y, m, Hinge::Soft { tau })
}

/// Fraction of changed pixels whose cosine exceeds the margin.
pub fn gradient_activation_ratio(cos: &Tensor4, y: &[ChangeLabel], m: f64) -> Result<f64> {
    if y.len() != cos.len() {
        return Err(ScdError::Shape(format!("{} labels for {:?}", y.len(), cos.shape())));
    }
    let (mut changed, mut active) = (0usize, 0usize);
    for (&c, &l) in cos.data().iter().zip(y) {
        if l == ChangeLabel::Changed {
            changed += 1;
            active += usize::from(c > m);
        }
    }
    if changed == 0 {
        return Err(ScdError::EmptyReduction("no changed pixels".into()));
    }
    Ok(active as f64 / changed as f64)
}

pub fn semantic_ce(logits: &Tensor4, labels: &[u8], ignore_index: u8) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.semantic_ce(x, labels, ignore_index)?;
    Ok(g.value(l).item())
}

pub fn change_bce(change_logit: &Tensor4, mask: &[u8]) -> Result<f64> {
    let targets: Vec<f64> = mask.iter().map(|&v| f64::from(v != 0)).collect();
    let mut g = Graph::new();
    let x = g.constant(change_logit.clone());
    let l = g.change_bce(x, &targets)?;
    Ok(g.value(l).item())
}

/// Ground truth for one batch, each map flattened in (n, h, w) order.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub sem_a: Vec<u8>,
    pub sem_b: Vec<u8>,
    pub change: Vec<u8>,
}

impl BatchLabels {
    pub fn change_labels(&self, ignore: u8) -> Vec<ChangeLabel> {
        (0..self.change.len())
            .map(|k| {
                if self.sem_a[k] == ignore || self.sem_b[k] == ignore || self.change[k] == ignore {
                    ChangeLabel::Ignore
                } else if self.change[k] != 0 {
                    ChangeLabel::Changed
                } else {
                    ChangeLabel::Unchanged
                }
            })
            .collect()
    }
}

/// Graph handles for the pieces `total_loss` needs.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub sem_logits_a: NodeId,
    pub sem_logits_b: NodeId,
    pub change_logit: NodeId,
    pub feat_a: NodeId,
    pub feat_b: NodeId,
}

/// Builds the training objective on `graph`; returns the scalar node and its breakdown.
///
/// Semantic cross-entropy is supervised only where a pixel carries a class
/// (label 0 marks no-change and is excluded, as is `ignore_index`). A batch
/// without any such pixel contributes 0 for that term.
pub fn total_loss(graph: &mut Graph, inputs: &LossInputs, labels: &BatchLabels, cfg: &LossConfig) -> Result<(NodeId, LossBreakdown)> {
    cfg.validate()?;
    let ignore = cfg.ignore_index;
    let ce = |g: &mut Graph, logits: NodeId, sem: &[u8]| -> Result<NodeId> {
        let mapped: Vec<u8> = sem.iter().map(|&l| if l == 0 { ignore } else { l }).collect();
        match g.semantic_ce(logits, &mapped, ignore) {
            Err(ScdError::EmptyReduction(_)) => Ok(g.constant(Tensor4::scalar(0.0))),
            other => other,
        }
    };
    let ce_a = ce(graph, inputs.sem_logits_a, &labels.sem_a)?;
    let ce_b = ce(graph, inputs.sem_logits_b, &labels.sem_b)?;
    let targets: Vec<f64> = labels.change.iter().map(|&v| f64::from(v != 0 && v != ignore)).collect();
    let bce = graph.change_bce(inputs.change_logit, &targets)?;

    let y = labels.change_labels(ignore);
    let cos = graph.cosine(inputs.feat_a, inputs.feat_b)?;
    let activation_ratio = gradient_activation_ratio(graph.value(cos), &y, cfg.margin).unwrap_or(0.0);

    let mut total = graph.add(ce_a, ce_b)?;
    total = graph.add(total, bce)?;
    let mut sc_term = 0.0;
    if let Some(hinge) = cfg.hinge() {
        let sc = graph.consistency(cos, &y, cfg.margin, hinge)?;
        sc_term = graph.value(sc).item();
        let weighted = graph.affine(sc, cfg.sc_weight, 0.0)?;
        total = graph.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        total: graph.value(total).item(),
        ce_a: graph.value(ce_a).item(),
        ce_b: graph.value(ce_b).item(),
        change_term: graph.value(bce).item(),
        sc_term,
        activation_ratio,
    };
    Ok((total, breakdown))
}
