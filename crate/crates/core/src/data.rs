//! Synthetic bi-temporal pairs, on-disk sample layout and directory evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScdError};
use crate::losses::{BatchLabels, IGNORE_INDEX};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::netpbm::{self, GrayImage};
use crate::tensor::Tensor4;

/// One co-registered image pair with its labels.
///
/// `sem_a`/`sem_b` hold 0 where nothing changed, 1..=K otherwise, 255 to ignore.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image_a: Tensor4,
    pub image_b: Tensor4,
    pub sem_a: Vec<u8>,
    pub sem_b: Vec<u8>,
    pub change_mask: Vec<u8>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.image_a.h()
    }

    pub fn width(&self) -> usize {
        self.image_a.w()
    }

    /// Builds a pair from images and semantic maps, deriving the change mask.
    pub fn from_maps(image_a: Tensor4, image_b: Tensor4, sem_a: Vec<u8>, sem_b: Vec<u8>) -> Result<Self> {
        let [n, c, h, w] = image_a.shape();
        if n != 1 || c != 3 || image_b.shape() != image_a.shape() {
            return Err(ScdError::Data(format!("image shapes {:?} and {:?}", image_a.shape(), image_b.shape())));
        }
        if sem_a.len() != h * w || sem_b.len() != h * w {
            return Err(ScdError::Data(format!("label maps do not match {h}x{w} images")));
        }
        let change_mask = sem_a
            .iter()
            .zip(&sem_b)
            .map(|(&a, &b)| if a == IGNORE_INDEX || b == IGNORE_INDEX { IGNORE_INDEX } else { u8::from(a != 0 || b != 0) })
            .collect();
        Ok(Self { image_a, image_b, sem_a, sem_b, change_mask })
    }
}

/// Parameters of a synthetic split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub change_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { size: 64, classes: 4, change_rate: 0.3, seed: 0 }
    }
}

/// Per-sample seed so that sample `index` does not depend on the count.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(29)
}

/// Class colour; hues spaced by the golden ratio so any K stays distinct.
pub fn class_color(class: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 6] =
        [[0.85, 0.25, 0.2], [0.2, 0.7, 0.25], [0.2, 0.3, 0.85], [0.85, 0.8, 0.25], [0.7, 0.25, 0.8], [0.25, 0.8, 0.8]];
    if let Some(c) = TABLE.get(class) {
        return *c;
    }
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.6 * r, 0.2 + 0.6 * g, 0.2 + 0.6 * b]
}

/// Random-order flood fill from scattered seeds; returns region ids and their count.
fn grow_regions(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<usize>, usize) {
    let regions = (h * w / 256).max(4);
    let mut owner = vec![usize::MAX; h * w];
    let mut frontier = Vec::new();
    let mut placed = 0;
    while placed < regions {
        let p = rng.random_range(0..h * w);
        if owner[p] == usize::MAX {
            owner[p] = placed;
            frontier.push(p);
            placed += 1;
        }
    }
    while !frontier.is_empty() {
        let p = frontier.swap_remove(rng.random_range(0..frontier.len()));
        let (y, x) = (p / w, p % w);
        let neighbours = [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ];
        for q in neighbours.into_iter().flatten() {
            if owner[q] == usize::MAX {
                owner[q] = owner[p];
                frontier.push(q);
            }
        }
    }
    (owner, regions)
}

pub fn gen_synthetic_pair(seed: u64, h: usize, w: usize, k: usize, change_rate: f64) -> Result<SamplePair> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(ScdError::Param(format!("size {h}x{w} must be positive multiples of 32")));
    }
    if !(2..=254).contains(&k) {
        return Err(ScdError::Param(format!("class count {k} outside 2..=254")));
    }
    if !(change_rate > 0.0 && change_rate < 1.0) {
        return Err(ScdError::Param(format!("change rate {change_rate} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (owner, regions) = grow_regions(&mut rng, h, w);
    let mut area = vec![0usize; regions];
    for &r in &owner {
        area[r] += 1;
    }
    let before: Vec<usize> = (0..regions).map(|_| rng.random_range(0..k)).collect();

    let mut order: Vec<usize> = (0..regions).collect();
    order.shuffle(&mut rng);
    let target = change_rate * (h * w) as f64;
    let mut changed = vec![false; regions];
    let mut covered = 0.0;
    for r in order {
        let with = covered + area[r] as f64;
        if (with - target).abs() < (covered - target).abs() {
            changed[r] = true;
            covered = with;
        }
    }
    let after: Vec<usize> = (0..regions)
        .map(|r| if changed[r] { (before[r] + rng.random_range(1..k)) % k } else { before[r] })
        .collect();

    let mut render = |classes: &[usize]| {
        let mut img = Tensor4::zeros([1, 3, h, w]);
        for (p, &r) in owner.iter().enumerate() {
            let color = class_color(classes[r]);
            for (c, base) in color.iter().enumerate() {
                let v = base + rng.random_range(-0.1..=0.1);
                let i = img.index(0, c, p / w, p % w);
                img.data_mut()[i] = v.clamp(0.0, 1.0);
            }
        }
        img
    };
    let image_a = render(&before);
    let image_b = render(&after);
    let label = |classes: &[usize]| -> Vec<u8> {
        owner.iter().map(|&r| if changed[r] { classes[r] as u8 + 1 } else { 0 }).collect()
    };
    SamplePair::from_maps(image_a, image_b, label(&before), label(&after))
}

/// Samples `start..start + count` of a synthetic split.
pub fn generate_set(spec: &SyntheticSpec, start: u64, count: usize) -> Result<Vec<SamplePair>> {
    (start..start + count as u64)
        .map(|i| gen_synthetic_pair(sample_seed(spec.seed, i), spec.size, spec.size, spec.classes, spec.change_rate))
        .collect()
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

fn gray(h: usize, w: usize, data: &[u8]) -> Result<GrayImage> {
    GrayImage::new(w, h, data.to_vec())
}

pub fn write_labels(dir: &Path, id: &str, sem_a: &[u8], sem_b: &[u8], h: usize, w: usize) -> Result<()> {
    netpbm::write_pgm(&gray(h, w, sem_a)?, &dir.join(format!("{id}_semA.pgm")))?;
    netpbm::write_pgm(&gray(h, w, sem_b)?, &dir.join(format!("{id}_semB.pgm")))
}

/// Writes `{id}_A.ppm`, `{id}_B.ppm`, `{id}_semA.pgm`, `{id}_semB.pgm`.
pub fn write_sample(dir: &Path, id: &str, s: &SamplePair) -> Result<()> {
    netpbm::write_ppm(&s.image_a, &dir.join(format!("{id}_A.ppm")))?;
    netpbm::write_ppm(&s.image_b, &dir.join(format!("{id}_B.ppm")))?;
    write_labels(dir, id, &s.sem_a, &s.sem_b, s.height(), s.width())
}

pub fn read_sample(dir: &Path, id: &str) -> Result<SamplePair> {
    let image_a = netpbm::read_ppm(&dir.join(format!("{id}_A.ppm")))?;
    let image_b = netpbm::read_ppm(&dir.join(format!("{id}_B.ppm")))?;
    let (sem_a, sem_b) = read_labels(dir, id)?;
    if sem_a.width != image_a.w() || sem_a.height != image_a.h() {
        return Err(ScdError::Data(format!("sample {id}: labels and images differ in size")));
    }
    SamplePair::from_maps(image_a, image_b, sem_a.data, sem_b.data).map_err(|e| ScdError::Data(format!("sample {id}: {e}")))
}

pub fn read_labels(dir: &Path, id: &str) -> Result<(GrayImage, GrayImage)> {
    let path = |suffix: &str| dir.join(format!("{id}_{suffix}.pgm"));
    let (pa, pb) = (path("semA"), path("semB"));
    for p in [&pa, &pb] {
        if !p.exists() {
            return Err(ScdError::Data(format!("sample {id}: missing {}", p.display())));
        }
    }
    let a = netpbm::read_pgm(&pa)?;
    let b = netpbm::read_pgm(&pb)?;
    if (a.width, a.height) != (b.width, b.height) {
        return Err(ScdError::Data(format!("sample {id}: semA and semB differ in size")));
    }
    Ok((a, b))
}

/// Sorted ids of every `{id}_semA.pgm` in `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| ScdError::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ScdError::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_semA.pgm")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dir(dir: &Path) -> Result<Vec<SamplePair>> {
    let ids = list_ids(dir)?;
    if ids.is_empty() {
        return Err(ScdError::Data(format!("no samples in {}", dir.display())));
    }
    ids.iter().map(|id| read_sample(dir, id)).collect()
}

/// Stacks samples into (n,3,H,W) images and flattened labels.
pub fn make_batch(samples: &[&SamplePair]) -> Result<(Tensor4, Tensor4, BatchLabels)> {
    let a: Vec<&Tensor4> = samples.iter().map(|s| &s.image_a).collect();
    let b: Vec<&Tensor4> = samples.iter().map(|s| &s.image_b).collect();
    let labels = BatchLabels {
        sem_a: samples.iter().flat_map(|s| s.sem_a.iter().copied()).collect(),
        sem_b: samples.iter().flat_map(|s| s.sem_b.iter().copied()).collect(),
        change: samples.iter().flat_map(|s| s.change_mask.iter().copied()).collect(),
    };
    Ok((Tensor4::stack(&a)?, Tensor4::stack(&b)?, labels))
}

/// Confusion matrix of one prediction directory against ground truth.
pub fn accumulate_dirs(pred_dir: &Path, gt_dir: &Path, ids: &[String], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    for id in ids {
        let (ga, gb) = read_labels(gt_dir, id)?;
        let (pa, pb) = read_labels(pred_dir, id)?;
        if (pa.width, pa.height) != (ga.width, ga.height) {
            return Err(ScdError::Data(format!("sample {id}: prediction and ground truth differ in size")));
        }
        cm.accumulate(&ga.data, &gb.data, &pa.data, &pb.data).map_err(|e| ScdError::Data(format!("sample {id}: {e}")))?;
    }
    Ok(cm)
}

/// Scores every ground-truth id in `gt_dir` against its counterpart in `pred_dir`.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, k: usize) -> Result<MetricReport> {
    let ids = list_ids(gt_dir)?;
    if ids.is_empty() {
        return Err(ScdError::EmptyReduction(format!("no ground truth in {}", gt_dir.display())));
    }
    accumulate_dirs(pred_dir, gt_dir, &ids, k)?.report()
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let text = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    fs::write(path, text).map_err(|e| ScdError::io(path, e))
}

pub fn split_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("train"), root.join("val"))
}
