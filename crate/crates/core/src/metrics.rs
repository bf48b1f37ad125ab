//! Confusion-matrix accumulation and the SCD metric suite.

use crate::error::{Result, ScdError};
use crate::losses::IGNORE_INDEX;

/// (K+1)x(K+1) counts; rows are ground truth, index 0 is no-change.
///
/// F_scd is a function of the same per-date tallies, so it is derived from
/// the matrix rather than kept as separate counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub oa: f64,
    pub f_scd: f64,
    pub miou: f64,
    pub sek: f64,
    pub p_scd: f64,
    pub r_scd: f64,
    pub iou_changed: f64,
    pub iou_unchanged: f64,
    pub kappa: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "oa,f_scd,miou,sek,p_scd,r_scd";

    pub fn csv_row(&self) -> String {
        [self.oa, self.f_scd, self.miou, self.sek, self.p_scd, self.r_scd]
            .iter()
            .map(|v| format!("{:.2}", v * 100.0))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

impl ConfusionMatrix {
    /// Empty matrix over `k` semantic classes plus no-change.
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; (k + 1) * (k + 1)], total: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.k + 1) + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Add one tally per date for every pixel not ignored in either ground truth map.
    pub fn accumulate(&mut self, gt_a: &[u8], gt_b: &[u8], pred_a: &[u8], pred_b: &[u8]) -> Result<()> {
        let n = gt_a.len();
        if gt_b.len() != n || pred_a.len() != n || pred_b.len() != n {
            return Err(ScdError::Shape("label maps differ in size".into()));
        }
        let k = self.k as u8;
        let check = |v: u8| -> Result<()> {
            if v > k && v != IGNORE_INDEX {
                Err(ScdError::Data(format!("label {v} out of range for {} classes", self.k)))
            } else {
                Ok(())
            }
        };
        for p in 0..n {
            for v in [gt_a[p], gt_b[p], pred_a[p], pred_b[p]] {
                check(v)?;
            }
        }
        let dim = self.k + 1;
        for p in 0..n {
            if [gt_a[p], gt_b[p], pred_a[p], pred_b[p]].contains(&IGNORE_INDEX) {
                continue;
            }
            self.counts[gt_a[p] as usize * dim + pred_a[p] as usize] += 1;
            self.counts[gt_b[p] as usize * dim + pred_b[p] as usize] += 1;
            self.total += 2;
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.k != other.k {
            return Err(ScdError::Shape(format!("merge of K={} with K={}", self.k, other.k)));
        }
        Ok(Self {
            k: self.k,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        })
    }

    fn non_empty(&self) -> Result<()> {
        if self.total == 0 {
            Err(ScdError::EmptyReduction("confusion matrix is empty".into()))
        } else {
            Ok(())
        }
    }

    /// (TN, FP, FN, TP) of the change/no-change binarization.
    fn binary(&self) -> (f64, f64, f64, f64) {
        let (mut tn, mut fp, mut fneg, mut tp) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..=self.k {
            for j in 0..=self.k {
                let v = self.get(i, j);
                match (i == 0, j == 0) {
                    (true, true) => tn += v,
                    (true, false) => fp += v,
                    (false, true) => fneg += v,
                    (false, false) => tp += v,
                }
            }
        }
        (tn as f64, fp as f64, fneg as f64, tp as f64)
    }

    fn ious(&self) -> (f64, f64) {
        let (tn, fp, fneg, tp) = self.binary();
        (ratio(tn, tn + fp + fneg), ratio(tp, tp + fp + fneg))
    }

    pub fn oa(&self) -> Result<f64> {
        self.non_empty()?;
        let trace: u64 = (0..=self.k).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / self.total as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        self.non_empty()?;
        let (u, c) = self.ious();
        Ok((u + c) / 2.0)
    }

    /// Cohen's kappa with the no-change/no-change cell zeroed.
    pub fn separated_kappa(&self) -> f64 {
        let dim = self.k + 1;
        let mut q: Vec<f64> = self.counts.iter().map(|&v| v as f64).collect();
        q[0] = 0.0;
        let sum: f64 = q.iter().sum();
        if sum == 0.0 {
            return 0.0;
        }
        let po = (0..dim).map(|i| q[i * dim + i]).sum::<f64>() / sum;
        let pe = (0..dim)
            .map(|i| {
                let row: f64 = (0..dim).map(|j| q[i * dim + j]).sum();
                let col: f64 = (0..dim).map(|j| q[j * dim + i]).sum();
                row * col
            })
            .sum::<f64>()
            / (sum * sum);
        if pe == 1.0 {
            0.0
        } else {
            (po - pe) / (1.0 - pe)
        }
    }

    pub fn sek(&self) -> Result<f64> {
        self.non_empty()?;
        let q_sum = self.total - self.get(0, 0);
        if q_sum == 0 {
            return Ok(0.0);
        }
        let (_, iou_c) = self.ious();
        Ok(self.separated_kappa() * (iou_c - 1.0).exp())
    }

    /// (P_scd, R_scd, F_scd).
    pub fn f_scd(&self) -> Result<(f64, f64, f64)> {
        self.non_empty()?;
        let (mut correct, mut pred_changed, mut gt_changed) = (0u64, 0u64, 0u64);
        for i in 0..=self.k {
            for j in 0..=self.k {
                let v = self.get(i, j);
                if j != 0 {
                    pred_changed += v;
                }
                if i != 0 {
                    gt_changed += v;
                }
                if i != 0 && i == j {
                    correct += v;
                }
            }
        }
        let p = ratio(correct as f64, pred_changed as f64);
        let r = ratio(correct as f64, gt_changed as f64);
        Ok((p, r, ratio(2.0 * p * r, p + r)))
    }

    pub fn report(&self) -> Result<MetricReport> {
        let (p_scd, r_scd, f_scd) = self.f_scd()?;
        let (iou_unchanged, iou_changed) = self.ious();
        Ok(MetricReport {
            oa: self.oa()?,
            f_scd,
            miou: self.miou()?,
            sek: self.sek()?,
            p_scd,
            r_scd,
            iou_changed,
            iou_unchanged,
            kappa: self.separated_kappa(),
        })
    }
}

/// F_scd straight from label maps, without building a matrix.
pub fn f_scd_from_maps(gt_a: &[u8], gt_b: &[u8], pred_a: &[u8], pred_b: &[u8], k: usize) -> Result<(f64, f64, f64)> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(gt_a, gt_b, pred_a, pred_b)?;
    cm.f_scd()
}
