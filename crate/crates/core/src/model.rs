//! Toy siamese encoder and the cascaded gated decoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScdError};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::losses::LossInputs;
use crate::tensor::Tensor4;

/// How a block merges its deep and shallow triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Change-aware gating.
    Cagm,
    /// Plain elementwise sum (ablation).
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Semantic logit channels; channel 0 is the no-change slot.
    pub num_classes: usize,
    pub stem_width: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_width: usize,
    pub blocks: usize,
    pub fusion: Fusion,
    pub cbam_reduction: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            stem_width: 8,
            encoder_widths: [16, 16, 32, 32],
            decoder_width: 16,
            blocks: 3,
            fusion: Fusion::Cagm,
            cbam_reduction: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(ScdError::Param(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.stem_width == 0 || self.decoder_width == 0 || self.encoder_widths.contains(&0) || self.cbam_reduction == 0 {
            return Err(ScdError::Param("widths must be at least 1".into()));
        }
        if !(1..=3).contains(&self.blocks) {
            return Err(ScdError::Param(format!("blocks {} outside 1..=3", self.blocks)));
        }
        Ok(())
    }

    fn hidden(&self, c: usize) -> usize {
        (c / self.cbam_reduction).max(1)
    }

    /// Upsampling factor from the last block to input resolution.
    pub fn head_factor(&self) -> usize {
        32 >> self.blocks
    }

    /// Recover the configuration from parameter shapes.
    pub fn infer(params: &Params) -> Result<Self> {
        let shape = |n: &str| {
            params.get(n).map(|t| t.shape()).ok_or_else(|| ScdError::Format(format!("missing parameter '{n}'")))
        };
        let stem = shape("enc.stem.w")?;
        let mut encoder_widths = [0; 4];
        for (s, w) in encoder_widths.iter_mut().enumerate() {
            *w = shape(&format!("enc.s{}.w", s + 1))?[0];
        }
        let head = shape("head.sem.w")?;
        let blocks = (1..=3).take_while(|k| params.get(&format!("blk{k}.fuse.sem.w")).is_some()).count();
        let fusion = if params.get("blk1.gate.local.w").is_some() { Fusion::Cagm } else { Fusion::Add };
        let cbam_in = shape("seed.sem.cbam.fc1.w")?;
        let cfg = Self {
            num_classes: head[0],
            stem_width: stem[0],
            encoder_widths,
            decoder_width: head[1],
            blocks,
            fusion,
            cbam_reduction: (cbam_in[1] / cbam_in[0]).max(1),
        };
        cfg.validate()?;
        let expected = param_specs(&cfg);
        for (name, s) in &expected {
            if shape(name)? != *s {
                return Err(ScdError::Format(format!("parameter '{name}' has shape {:?}, expected {s:?}", shape(name)?)));
            }
        }
        if expected.len() != params.len() {
            return Err(ScdError::Format(format!("{} parameters, expected {}", params.len(), expected.len())));
        }
        Ok(cfg)
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor4)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor4) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor4> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

fn conv_spec(out: &mut Vec<(String, [usize; 4])>, name: &str, co: usize, ci: usize, k: usize, bias: bool) {
    out.push((format!("{name}.w"), [co, ci, k, k]));
    if bias {
        out.push((format!("{name}.b"), [1, co, 1, 1]));
    }
}

fn compress_spec(out: &mut Vec<(String, [usize; 4])>, cfg: &DecoderConfig, name: &str, ci: usize) {
    let hid = cfg.hidden(ci);
    conv_spec(out, &format!("{name}.cbam.fc1"), hid, ci, 1, true);
    conv_spec(out, &format!("{name}.cbam.fc2"), ci, hid, 1, true);
    conv_spec(out, &format!("{name}.cbam.spatial"), 1, 2, 7, true);
    conv_spec(out, &format!("{name}.proj"), cfg.decoder_width, ci, 1, true);
}

/// Every parameter name and shape, in creation order.
pub fn param_specs(cfg: &DecoderConfig) -> Vec<(String, [usize; 4])> {
    let mut out = Vec::new();
    let d = cfg.decoder_width;
    let ew = cfg.encoder_widths;
    conv_spec(&mut out, "enc.stem", cfg.stem_width, 3, 3, true);
    let mut prev = cfg.stem_width;
    for (s, &w) in ew.iter().enumerate() {
        conv_spec(&mut out, &format!("enc.s{}", s + 1), w, prev, 3, true);
        prev = w;
    }
    compress_spec(&mut out, cfg, "seed.sem", ew[3]);
    compress_spec(&mut out, cfg, "seed.chg", d);
    for k in 1..=cfg.blocks {
        let p = format!("blk{k}");
        conv_spec(&mut out, &format!("{p}.deep.sem1"), d, d, 3, true);
        conv_spec(&mut out, &format!("{p}.deep.sem2"), d, d, 3, true);
        conv_spec(&mut out, &format!("{p}.deep.chg1x"), d, d, 3, true);
        conv_spec(&mut out, &format!("{p}.deep.chg1h"), d, d, 3, false);
        conv_spec(&mut out, &format!("{p}.deep.chg2"), d, d, 3, true);
        compress_spec(&mut out, cfg, &format!("{p}.sh.sem"), ew[3 - k]);
        compress_spec(&mut out, cfg, &format!("{p}.sh.chg"), d);
        if cfg.fusion == Fusion::Cagm {
            conv_spec(&mut out, &format!("{p}.gate.local"), 2, 2 * d, 3, true);
            conv_spec(&mut out, &format!("{p}.gate.global"), 2, 2 * d, 1, true);
        }
        conv_spec(&mut out, &format!("{p}.fuse.sem"), d, d, 3, true);
        conv_spec(&mut out, &format!("{p}.fuse.chg"), d, d, 3, true);
    }
    conv_spec(&mut out, "head.sem", cfg.num_classes, d, 1, true);
    conv_spec(&mut out, "head.chg", 1, d, 1, true);
    out
}

/// He-normal kernels (variance 2/fan_in), zero biases.
pub fn init_params(cfg: &DecoderConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (name, shape) in param_specs(cfg) {
        let t = if name.ends_with(".b") {
            Tensor4::zeros(shape)
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            Tensor4::from_fn(shape, |_| normal.sample(&mut rng))
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// (pre-change, post-change, change) features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureTriplet {
    pub a: NodeId,
    pub b: NodeId,
    pub c: NodeId,
}

/// Encoder output: per scale (A, B) feature nodes at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub scales: [(NodeId, NodeId); 4],
}

/// Graph-side handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub sem_a: NodeId,
    pub sem_b: NodeId,
    pub change: NodeId,
    pub feat_a: NodeId,
    pub feat_b: NodeId,
    /// (W_z, W_h) per block; empty for additive fusion.
    pub gates: Vec<(NodeId, NodeId)>,
}

impl ForwardNodes {
    pub fn loss_inputs(&self) -> LossInputs {
        LossInputs {
            sem_logits_a: self.sem_a,
            sem_logits_b: self.sem_b,
            change_logit: self.change,
            feat_a: self.feat_a,
            feat_b: self.feat_b,
        }
    }
}

/// Value-side prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScdPrediction {
    pub sem_logits_a: Tensor4,
    pub sem_logits_b: Tensor4,
    pub change_logit: Tensor4,
    pub heatmaps: Vec<(Tensor4, Tensor4)>,
}

/// Model parameters registered on a graph.
pub struct Bound<'a> {
    pub cfg: &'a DecoderConfig,
    ids: HashMap<String, NodeId>,
}

impl<'a> Bound<'a> {
    pub fn new(graph: &mut Graph, params: &Params, cfg: &'a DecoderConfig) -> Self {
        let ids = params.iter().map(|(n, t)| (n.to_string(), graph.param(n, t.clone()))).collect();
        Self { cfg, ids }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| ScdError::Shape(format!("missing parameter '{name}'")))
    }

    fn conv(&self, g: &mut Graph, x: NodeId, name: &str, stride: usize, padding: usize) -> Result<NodeId> {
        let w = self.id(&format!("{name}.w"))?;
        let b = self.ids.get(&format!("{name}.b")).copied();
        g.conv2d(x, w, b, stride, padding)
    }

    fn same_conv(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let k = g.value(self.id(&format!("{name}.w"))?).h();
        self.conv(g, x, name, 1, k / 2)
    }
}

pub fn toy_encoder(g: &mut Graph, m: &Bound, image_a: NodeId, image_b: NodeId) -> Result<MultiScaleFeatures> {
    let (sa, sb) = (g.value(image_a).shape(), g.value(image_b).shape());
    if sa != sb {
        return Err(ScdError::Shape(format!("image shapes {sa:?} and {sb:?} differ")));
    }
    if sa[1] != 3 || sa[2] % 32 != 0 || sa[3] % 32 != 0 {
        return Err(ScdError::Shape(format!("images must be (n,3,H,W) with H, W divisible by 32, got {sa:?}")));
    }
    let mut run = |x: NodeId| -> Result<[NodeId; 4]> {
        let stem = m.conv(g, x, "enc.stem", 2, 1)?;
        let mut cur = g.relu(stem)?;
        let mut out = [cur; 4];
        for (s, slot) in out.iter_mut().enumerate() {
            let y = m.conv(g, cur, &format!("enc.s{}", s + 1), 2, 1)?;
            cur = g.relu(y)?;
            *slot = cur;
        }
        Ok(out)
    };
    let fa = run(image_a)?;
    let fb = run(image_b)?;
    Ok(MultiScaleFeatures { scales: std::array::from_fn(|s| (fa[s], fb[s])) })
}

pub fn cbam(g: &mut Graph, m: &Bound, f: NodeId, name: &str) -> Result<NodeId> {
    let fc1 = m.id(&format!("{name}.fc1.w"))?;
    if g.value(fc1).c() != g.value(f).c() {
        return Err(ScdError::Shape(format!(
            "{name}: input has {} channels, expected {}",
            g.value(f).c(),
            g.value(fc1).c()
        )));
    }
    let avg = g.global_avg_pool(f)?;
    let max = g.global_max_pool(f)?;
    let mut mlp = |v: NodeId| -> Result<NodeId> {
        let h = m.conv(g, v, &format!("{name}.fc1"), 1, 0)?;
        let h = g.relu(h)?;
        m.conv(g, h, &format!("{name}.fc2"), 1, 0)
    };
    let ma = mlp(avg)?;
    let mm = mlp(max)?;
    let logits = g.add(ma, mm)?;
    let ca = g.sigmoid(logits)?;
    let f1 = g.mul(f, ca)?;
    let mean = g.channel_mean(f1)?;
    let mx = g.channel_max(f1)?;
    let pooled = g.concat_channels(&[mean, mx])?;
    let sa = m.conv(g, pooled, &format!("{name}.spatial"), 1, 3)?;
    let sa = g.sigmoid(sa)?;
    g.mul(f1, sa)
}

pub fn feature_compress(g: &mut Graph, m: &Bound, f: NodeId, name: &str) -> Result<NodeId> {
    let attended = cbam(g, m, f, &format!("{name}.cbam"))?;
    m.conv(g, attended, &format!("{name}.proj"), 1, 0)
}

pub fn shallow_branch(g: &mut Graph, m: &Bound, fa: NodeId, fb: NodeId, name: &str) -> Result<FeatureTriplet> {
    if g.value(fa).shape() != g.value(fb).shape() {
        return Err(ScdError::Shape(format!("{name}: F_A and F_B differ in shape")));
    }
    let za = feature_compress(g, m, fa, &format!("{name}.sem"))?;
    let zb = feature_compress(g, m, fb, &format!("{name}.sem"))?;
    let diff = g.sub(za, zb)?;
    let diff = g.abs(diff)?;
    let zc = feature_compress(g, m, diff, &format!("{name}.chg"))?;
    Ok(FeatureTriplet { a: za, b: zb, c: zc })
}

fn check_triplet(g: &Graph, t: &FeatureTriplet, name: &str) -> Result<()> {
    let s = g.value(t.a).shape();
    if g.value(t.b).shape() != s || g.value(t.c).shape() != s {
        return Err(ScdError::Shape(format!("{name}: triplet members differ in shape")));
    }
    Ok(())
}

/// DoubleConv on each date with shared weights, DoubleConv on the change path
/// over (x_C, h_A, h_B), then ×2 upsampling.
///
/// The change path's first convolution over Cat(x_C, h_A, h_B) uses one kernel
/// slice for both h_A and h_B, evaluated as conv(x_C) + (conv(h_A) + conv(h_B))
/// so that swapping the dates leaves it bit-identical.
pub fn deep_branch(g: &mut Graph, m: &Bound, x: &FeatureTriplet, name: &str) -> Result<FeatureTriplet> {
    check_triplet(g, x, name)?;
    let mut dc_sem = |v: NodeId| -> Result<NodeId> {
        let h = m.same_conv(g, v, &format!("{name}.sem1"))?;
        let h = g.relu(h)?;
        let h = m.same_conv(g, h, &format!("{name}.sem2"))?;
        g.relu(h)
    };
    let ha = dc_sem(x.a)?;
    let hb = dc_sem(x.b)?;
    let cx = m.same_conv(g, x.c, &format!("{name}.chg1x"))?;
    let ca = m.same_conv(g, ha, &format!("{name}.chg1h"))?;
    let cb = m.same_conv(g, hb, &format!("{name}.chg1h"))?;
    let pair = g.add(ca, cb)?;
    let hc = g.add(cx, pair)?;
    let hc = g.relu(hc)?;
    let hc = m.same_conv(g, hc, &format!("{name}.chg2"))?;
    let hc = g.relu(hc)?;
    Ok(FeatureTriplet { a: g.upsample(ha, 2)?, b: g.upsample(hb, 2)?, c: g.upsample(hc, 2)? })
}

/// Change-aware gating; returns the fused triplet and (W_z, W_h).
pub fn cagm(g: &mut Graph, m: &Bound, deep: &FeatureTriplet, shallow: &FeatureTriplet, name: &str) -> Result<(FeatureTriplet, NodeId, NodeId)> {
    check_triplet(g, deep, name)?;
    check_triplet(g, shallow, name)?;
    if g.value(deep.a).shape() != g.value(shallow.a).shape() {
        return Err(ScdError::Shape(format!(
            "{name}: deep {:?} vs shallow {:?}",
            g.value(deep.a).shape(),
            g.value(shallow.a).shape()
        )));
    }
    let cat = g.concat_channels(&[deep.c, shallow.c])?;
    let local = m.same_conv(g, cat, &format!("{name}.gate.local"))?;
    let local = g.sigmoid(local)?;
    let pooled = g.global_avg_pool(cat)?;
    let global = m.conv(g, pooled, &format!("{name}.gate.global"), 1, 0)?;
    let global = g.sigmoid(global)?;
    let boost = g.affine(global, 1.0, 1.0)?;
    let weights = g.mul(boost, local)?;
    debug_assert!(g.value(weights).data().iter().all(|w| (0.0..=2.0).contains(w)));
    let wz = g.slice_channels(weights, 0, 1)?;
    let wh = g.slice_channels(weights, 1, 1)?;
    let mut fuse = |z: NodeId, h: NodeId, conv: &str| -> Result<NodeId> {
        let gz = g.mul(wz, z)?;
        let gh = g.mul(wh, h)?;
        let s = g.add(gz, gh)?;
        m.same_conv(g, s, &format!("{name}.fuse.{conv}"))
    };
    let a = fuse(shallow.a, deep.a, "sem")?;
    let b = fuse(shallow.b, deep.b, "sem")?;
    let c = fuse(shallow.c, deep.c, "chg")?;
    Ok((FeatureTriplet { a, b, c }, wz, wh))
}

fn additive(g: &mut Graph, m: &Bound, deep: &FeatureTriplet, shallow: &FeatureTriplet, name: &str) -> Result<FeatureTriplet> {
    let mut fuse = |z: NodeId, h: NodeId, conv: &str| -> Result<NodeId> {
        let s = g.add(z, h)?;
        m.same_conv(g, s, &format!("{name}.fuse.{conv}"))
    };
    Ok(FeatureTriplet { a: fuse(shallow.a, deep.a, "sem")?, b: fuse(shallow.b, deep.b, "sem")?, c: fuse(shallow.c, deep.c, "chg")? })
}

pub fn cg_decoder_forward(g: &mut Graph, m: &Bound, feats: &MultiScaleFeatures) -> Result<ForwardNodes> {
    let cfg = m.cfg;
    let (fa4, fb4) = feats.scales[3];
    let mut x = shallow_branch(g, m, fa4, fb4, "seed")?;
    let mut gates = Vec::new();
    for k in 1..=cfg.blocks {
        let p = format!("blk{k}");
        let deep = deep_branch(g, m, &x, &format!("{p}.deep"))?;
        let (fa, fb) = feats.scales[3 - k];
        let shallow = shallow_branch(g, m, fa, fb, &format!("{p}.sh"))?;
        x = match cfg.fusion {
            Fusion::Cagm => {
                let (t, wz, wh) = cagm(g, m, &deep, &shallow, &p)?;
                gates.push((wz, wh));
                t
            }
            Fusion::Add => additive(g, m, &deep, &shallow, &p)?,
        };
    }
    let f = cfg.head_factor();
    let feat_a = g.upsample(x.a, f)?;
    let feat_b = g.upsample(x.b, f)?;
    let feat_c = g.upsample(x.c, f)?;
    let sem_a = m.conv(g, feat_a, "head.sem", 1, 0)?;
    let sem_b = m.conv(g, feat_b, "head.sem", 1, 0)?;
    let change = m.conv(g, feat_c, "head.chg", 1, 0)?;
    Ok(ForwardNodes { sem_a, sem_b, change, feat_a, feat_b, gates })
}

/// Record the whole model on a fresh graph.
pub fn forward_graph(params: &Params, cfg: &DecoderConfig, image_a: &Tensor4, image_b: &Tensor4) -> Result<(Graph, ForwardNodes)> {
    let mut g = Graph::new();
    let m = Bound::new(&mut g, params, cfg);
    let a = g.constant(image_a.clone());
    let b = g.constant(image_b.clone());
    let feats = toy_encoder(&mut g, &m, a, b)?;
    let nodes = cg_decoder_forward(&mut g, &m, &feats)?;
    Ok((g, nodes))
}

pub fn predict(params: &Params, cfg: &DecoderConfig, image_a: &Tensor4, image_b: &Tensor4) -> Result<ScdPrediction> {
    let (g, nodes) = forward_graph(params, cfg, image_a, image_b)?;
    Ok(ScdPrediction {
        sem_logits_a: g.value(nodes.sem_a).clone(),
        sem_logits_b: g.value(nodes.sem_b).clone(),
        change_logit: g.value(nodes.change).clone(),
        heatmaps: nodes.gates.iter().map(|&(z, h)| (g.value(z).clone(), g.value(h).clone())).collect(),
    })
}

/// Label maps for both dates and the binary change mask, flattened (n, h, w).
///
/// Semantic labels are the argmax over the class channels 1.. (lowest index
/// wins ties); channel 0 is never a semantic answer.
pub fn predict_scd_map(pred: &ScdPrediction, threshold: f64) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mask: Vec<u8> = pred.change_logit.data().iter().map(|&x| u8::from(crate::losses::sigmoid(x) > threshold)).collect();
    let labels = |logits: &Tensor4| -> Vec<u8> {
        let classes = kernels::slice_channels(logits, 1, logits.c() - 1).expect("at least two channels");
        kernels::channel_argmax(&classes)
            .iter()
            .zip(&mask)
            .map(|(&k, &changed)| if changed == 1 { (k + 1) as u8 } else { 0 })
            .collect()
    };
    (labels(&pred.sem_logits_a), labels(&pred.sem_logits_b), mask)
}

/// 8-bit heatmap value for a gate weight in (0, 2).
pub fn heatmap_byte(w: f64) -> u8 {
    (255.0 * w / 2.0).round().clamp(0.0, 255.0) as u8
}
