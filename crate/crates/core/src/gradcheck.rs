//! Finite-difference suite over every differentiable op and model component.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{finite_diff_check, Graph, NodeId, Pointwise};
use crate::losses::{self, BatchLabels, ChangeLabel, Hinge, LossConfig};
use crate::model::{self, Bound, DecoderConfig, FeatureTriplet, Params};
use crate::tensor::Tensor4;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

/// Every checked loss is multiplied by this. The central difference carries an
/// absolute error of about ulp(L)/eps; at |L| ~ 1 that exceeds what the 1e-8
/// denominator floor tolerates for near-zero gradients, so the losses are kept
/// around 1e-3 instead.
pub const LOSS_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Ctx {
    g: Graph,
    rng: ChaCha8Rng,
    leaves: usize,
}

impl Ctx {
    fn new(seed: u64) -> Self {
        Self { g: Graph::new(), rng: ChaCha8Rng::seed_from_u64(seed), leaves: 0 }
    }

    fn uniform(&mut self, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
        Tensor4::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }

    fn param(&mut self, shape: [usize; 4]) -> NodeId {
        let t = self.uniform(shape, -1.0, 1.0);
        self.leaves += 1;
        self.g.param(format!("p{}", self.leaves), t)
    }

    /// Values with |x| >= 0.05 so kinks at 0 stay out of reach of the probe.
    fn param_off_zero(&mut self, shape: [usize; 4]) -> NodeId {
        let t = Tensor4::from_fn(shape, |_| {
            let m: f64 = self.rng.random_range(0.05..1.0);
            if self.rng.random_bool(0.5) { m } else { -m }
        });
        self.leaves += 1;
        self.g.param(format!("p{}", self.leaves), t)
    }

    /// sum(w * x) with fixed random w, so every output entry matters.
    fn readout(&mut self, x: NodeId) -> Result<NodeId> {
        let w = self.uniform(self.g.value(x).shape(), -1.0, 1.0);
        let w = self.g.constant(w);
        let p = self.g.mul(x, w)?;
        self.g.sum(p)
    }

    fn finish(mut self, loss: NodeId) -> Result<(Graph, NodeId)> {
        let scaled = self.g.affine(loss, LOSS_SCALE, 0.0)?;
        Ok((self.g, scaled))
    }
}

fn op_check(seed: u64, build: impl FnOnce(&mut Ctx) -> Result<NodeId>) -> Result<(Graph, NodeId)> {
    let mut ctx = Ctx::new(seed);
    let out = build(&mut ctx)?;
    let loss = if ctx.g.value(out).len() == 1 { out } else { ctx.readout(out)? };
    ctx.finish(loss)
}

/// Small decoder used by the model-level checks.
pub fn tiny_decoder() -> DecoderConfig {
    DecoderConfig { num_classes: 3, stem_width: 4, encoder_widths: [4, 4, 4, 4], decoder_width: 4, ..DecoderConfig::default() }
}

/// He-initialised parameters with random biases, so no pre-activation sits
/// exactly on a relu kink.
fn check_params(cfg: &DecoderConfig, seed: u64, prefixes: &[&str]) -> Result<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let mut out = Params::new();
    for (n, t) in model::init_params(cfg, seed)?.iter() {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| n.starts_with(p)) {
            continue;
        }
        let t = if n.ends_with(".b") { Tensor4::from_fn(t.shape(), |_| rng.random_range(-0.2..0.2)) } else { t.clone() };
        out.insert(n, t);
    }
    Ok(out)
}

fn triplet(ctx: &mut Ctx, shape: [usize; 4]) -> FeatureTriplet {
    FeatureTriplet { a: ctx.param(shape), b: ctx.param(shape), c: ctx.param(shape) }
}

fn sum_triplet(ctx: &mut Ctx, t: &FeatureTriplet) -> Result<NodeId> {
    let a = ctx.readout(t.a)?;
    let b = ctx.readout(t.b)?;
    let c = ctx.readout(t.c)?;
    let ab = ctx.g.add(a, b)?;
    ctx.g.add(ab, c)
}

fn model_check(seed: u64, prefixes: &[&str], build: impl FnOnce(&mut Ctx, &Bound) -> Result<NodeId>) -> Result<(Graph, NodeId)> {
    let cfg = tiny_decoder();
    let params = check_params(&cfg, seed, prefixes)?;
    let mut ctx = Ctx::new(seed + 1);
    let bound = Bound::new(&mut ctx.g, &params, &cfg);
    let loss = build(&mut ctx, &bound)?;
    ctx.finish(loss)
}

fn labels_for(rng: &mut ChaCha8Rng, n: usize, k: u8) -> Vec<u8> {
    (0..n).map(|_| if rng.random_bool(0.1) { losses::IGNORE_INDEX } else { rng.random_range(0..k) }).collect()
}

type Check = (&'static str, fn(u64) -> Result<(Graph, NodeId)>);

fn checks() -> Vec<Check> {
    vec![
        ("conv2d", |s| {
            op_check(s, |c| {
                let x = c.param([2, 3, 8, 8]);
                let k = c.param([4, 3, 3, 3]);
                let bias = c.param([1, 4, 1, 1]);
                c.g.conv2d(x, k, Some(bias), 2, 1)
            })
        }),
        ("conv2d_1x1", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 4, 4]);
                let k = c.param([3, 4, 1, 1]);
                c.g.conv2d(x, k, None, 1, 0)
            })
        }),
        ("bilinear_upsample", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 4, 4]);
                c.g.upsample(x, 2)
            })
        }),
        ("global_avg_pool", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.global_avg_pool(x)
            })
        }),
        ("global_max_pool", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.global_max_pool(x)
            })
        }),
        ("channel_mean", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.channel_mean(x)
            })
        }),
        ("channel_max", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.channel_max(x)
            })
        }),
        ("relu", |s| {
            op_check(s, |c| {
                let x = c.param_off_zero([2, 4, 8, 8]);
                c.g.pointwise(Pointwise::Relu, x)
            })
        }),
        ("sigmoid", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.pointwise(Pointwise::Sigmoid, x)
            })
        }),
        ("abs", |s| {
            op_check(s, |c| {
                let x = c.param_off_zero([2, 4, 8, 8]);
                c.g.pointwise(Pointwise::Abs, x)
            })
        }),
        ("softplus", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.pointwise(Pointwise::Softplus, x)
            })
        }),
        ("concat_channels", |s| {
            op_check(s, |c| {
                let a = c.param([2, 1, 8, 8]);
                let b = c.param([2, 3, 8, 8]);
                c.g.concat_channels(&[a, b])
            })
        }),
        ("slice_channels", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.slice_channels(x, 1, 2)
            })
        }),
        ("add_broadcast", |s| {
            op_check(s, |c| {
                let a = c.param([2, 4, 8, 8]);
                let b = c.param([1, 4, 1, 1]);
                c.g.add(a, b)
            })
        }),
        ("sub", |s| {
            op_check(s, |c| {
                let a = c.param([2, 4, 8, 8]);
                let b = c.param([2, 4, 8, 8]);
                c.g.sub(a, b)
            })
        }),
        ("mul_broadcast", |s| {
            op_check(s, |c| {
                let a = c.param([2, 1, 8, 8]);
                let b = c.param([2, 4, 8, 8]);
                c.g.mul(a, b)
            })
        }),
        ("affine", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                c.g.affine(x, -1.5, 0.25)
            })
        }),
        ("mean", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                let y = c.g.mul(x, x)?;
                c.g.mean(y)
            })
        }),
        ("cosine", |s| {
            op_check(s, |c| {
                let a = c.param([2, 4, 8, 8]);
                let b = c.param([2, 4, 8, 8]);
                c.g.cosine(a, b)
            })
        }),
        ("sc_loss", |s| consistency_check(s, Hinge::Hard)),
        ("ssc_loss", |s| consistency_check(s, Hinge::Soft { tau: 0.5 })),
        ("semantic_ce", |s| {
            op_check(s, |c| {
                let x = c.param([2, 4, 8, 8]);
                let labels = labels_for(&mut c.rng, 128, 4);
                c.g.semantic_ce(x, &labels, losses::IGNORE_INDEX)
            })
        }),
        ("change_bce", |s| {
            op_check(s, |c| {
                let x = c.param([2, 1, 8, 8]);
                let t: Vec<f64> = (0..128).map(|_| f64::from(c.rng.random_bool(0.3))).collect();
                c.g.change_bce(x, &t)
            })
        }),
        ("cbam", |s| {
            model_check(s, &["seed.sem.cbam"], |c, m| {
                let x = c.param([2, 4, 4, 4]);
                let y = model::cbam(&mut c.g, m, x, "seed.sem.cbam")?;
                c.readout(y)
            })
        }),
        ("feature_compress", |s| {
            model_check(s, &["seed.sem"], |c, m| {
                let x = c.param([2, 4, 4, 4]);
                let y = model::feature_compress(&mut c.g, m, x, "seed.sem")?;
                c.readout(y)
            })
        }),
        ("shallow_branch", |s| {
            model_check(s, &["seed."], |c, m| {
                let fa = c.param([1, 4, 4, 4]);
                let fb = c.param([1, 4, 4, 4]);
                let t = model::shallow_branch(&mut c.g, m, fa, fb, "seed")?;
                sum_triplet(c, &t)
            })
        }),
        ("deep_branch", |s| {
            model_check(s, &["blk1.deep"], |c, m| {
                let x = triplet(c, [1, 4, 4, 4]);
                let t = model::deep_branch(&mut c.g, m, &x, "blk1.deep")?;
                sum_triplet(c, &t)
            })
        }),
        ("cagm", |s| {
            model_check(s, &["blk1.gate", "blk1.fuse"], |c, m| {
                let h = triplet(c, [2, 4, 4, 4]);
                let z = triplet(c, [2, 4, 4, 4]);
                let (t, _, _) = model::cagm(&mut c.g, m, &h, &z, "blk1")?;
                sum_triplet(c, &t)
            })
        }),
        ("cg_decoder_block", |s| {
            model_check(s, &["blk1."], |c, m| {
                let x = triplet(c, [1, 4, 4, 4]);
                let fa = c.param([1, 4, 8, 8]);
                let fb = c.param([1, 4, 8, 8]);
                let deep = model::deep_branch(&mut c.g, m, &x, "blk1.deep")?;
                let shallow = model::shallow_branch(&mut c.g, m, fa, fb, "blk1.sh")?;
                let (t, _, _) = model::cagm(&mut c.g, m, &deep, &shallow, "blk1")?;
                sum_triplet(c, &t)
            })
        }),
        ("toy_encoder", |s| {
            model_check(s, &["enc."], |c, m| {
                let a = c.uniform([1, 3, 32, 32], 0.0, 1.0);
                let b = c.uniform([1, 3, 32, 32], 0.0, 1.0);
                let (a, b) = (c.g.constant(a), c.g.constant(b));
                let f = model::toy_encoder(&mut c.g, m, a, b)?;
                let mut total = c.readout(f.scales[0].0)?;
                for &(fa, fb) in &f.scales {
                    for x in [fa, fb] {
                        let r = c.readout(x)?;
                        total = c.g.add(total, r)?;
                    }
                }
                Ok(total)
            })
        }),
        ("end_to_end", end_to_end_check),
    ]
}

fn consistency_check(seed: u64, hinge: Hinge) -> Result<(Graph, NodeId)> {
    op_check(seed, |c| {
        let a = c.param([2, 4, 8, 8]);
        let b = c.param([2, 4, 8, 8]);
        let cos = c.g.cosine(a, b)?;
        let labels: Vec<ChangeLabel> = (0..128)
            .map(|_| match c.rng.random_range(0..10) {
                0 => ChangeLabel::Ignore,
                1..=4 => ChangeLabel::Changed,
                _ => ChangeLabel::Unchanged,
            })
            .collect();
        c.g.consistency(cos, &labels, 0.1, hinge)
    })
}

fn end_to_end_check(seed: u64) -> Result<(Graph, NodeId)> {
    let cfg = tiny_decoder();
    let params = check_params(&cfg, seed, &[])?;
    let mut ctx = Ctx::new(seed + 1);
    let m = Bound::new(&mut ctx.g, &params, &cfg);
    let a = ctx.uniform([1, 3, 32, 32], 0.0, 1.0);
    let b = ctx.uniform([1, 3, 32, 32], 0.0, 1.0);
    let (a, b) = (ctx.g.constant(a), ctx.g.constant(b));
    let feats = model::toy_encoder(&mut ctx.g, &m, a, b)?;
    let nodes = model::cg_decoder_forward(&mut ctx.g, &m, &feats)?;
    let n = 32 * 32;
    let sem_a: Vec<u8> = (0..n).map(|_| if ctx.rng.random_bool(0.4) { ctx.rng.random_range(1..3) } else { 0 }).collect();
    let sem_b: Vec<u8> = sem_a.iter().map(|&l| if l == 0 { 0 } else { 3 - l }).collect();
    let change = sem_a.iter().map(|&l| u8::from(l != 0)).collect();
    let labels = BatchLabels { sem_a, sem_b, change };
    let cfg = LossConfig::default();
    let (loss, _) = losses::total_loss(&mut ctx.g, &nodes.loss_inputs(), &labels, &cfg)?;
    ctx.finish(loss)
}

/// The graph and loss node a named check differentiates.
pub fn build_check(name: &str, seed: u64) -> Option<Result<(Graph, NodeId)>> {
    checks().into_iter().find(|(n, _)| *n == name).map(|(_, f)| f(seed))
}

pub fn check_names() -> Vec<&'static str> {
    checks().into_iter().map(|(n, _)| n).collect()
}

/// Runs every check; `filter` keeps names containing the given substring.
pub fn run_suite(seed: u64, filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f) in checks() {
        if filter.is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let t0 = Instant::now();
        let (mut g, loss) = f(seed)?;
        let max_rel_error = finite_diff_check(&mut g, loss, EPS)?;
        out.push(CheckResult { name, max_rel_error, seconds: t0.elapsed().as_secs_f64() });
    }
    Ok(out)
}
