use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scd_core::model::*;
use scd_core::{Graph, ScdError, Tensor4};

fn image(seed: u64, size: usize) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn([1, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn random_biases(params: &mut Params, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn zero(params: &mut Params, prefix: &str) {
    for (name, t) in params.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn bits(t: &Tensor4) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn output_and_encoder_shapes() {
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let a = g.constant(image(1, 64));
    let b = g.constant(image(2, 64));
    let feats = toy_encoder(&mut g, &m, a, b).unwrap();
    let want = [[1, 16, 16, 16], [1, 16, 8, 8], [1, 32, 4, 4], [1, 32, 2, 2]];
    for (s, &(fa, fb)) in feats.scales.iter().enumerate() {
        assert_eq!(g.value(fa).shape(), want[s]);
        assert_eq!(g.value(fb).shape(), want[s]);
    }
    let out = cg_decoder_forward(&mut g, &m, &feats).unwrap();
    assert_eq!(g.value(out.sem_a).shape(), [1, 5, 64, 64]);
    assert_eq!(g.value(out.sem_b).shape(), [1, 5, 64, 64]);
    assert_eq!(g.value(out.change).shape(), [1, 1, 64, 64]);
    // each block doubles the resolution
    let sides: Vec<usize> = out.gates.iter().map(|&(z, _)| g.value(z).h()).collect();
    assert_eq!(sides, [4, 8, 16]);
    assert_eq!(cfg.head_factor(), 4);
}

#[test]
fn encoder_rejects_bad_images() {
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    assert!(matches!(predict(&params, &cfg, &image(0, 48), &image(1, 48)), Err(ScdError::Shape(_))));
    assert!(matches!(predict(&params, &cfg, &image(0, 64), &image(1, 32)), Err(ScdError::Shape(_))));
}

#[test]
fn identical_dates_give_identical_semantics() {
    let cfg = DecoderConfig::default();
    let mut params = init_params(&cfg, 3).unwrap();
    random_biases(&mut params, 3);
    let x = image(5, 64);
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let a = g.constant(x.clone());
    let b = g.constant(x);
    let feats = toy_encoder(&mut g, &m, a, b).unwrap();
    for &(fa, fb) in &feats.scales {
        assert_eq!(g.value(fa), g.value(fb));
    }
    let out = cg_decoder_forward(&mut g, &m, &feats).unwrap();
    assert_eq!(bits(g.value(out.sem_a)), bits(g.value(out.sem_b)));
}

#[test]
fn swapping_dates_is_exactly_symmetric() {
    for (seed, fusion) in [(0, Fusion::Cagm), (1, Fusion::Cagm), (2, Fusion::Add)] {
        let cfg = DecoderConfig { fusion, ..Default::default() };
        let mut params = init_params(&cfg, seed).unwrap();
        random_biases(&mut params, seed + 10);
        let (x, y) = (image(seed * 2, 64), image(seed * 2 + 1, 64));
        let p = predict(&params, &cfg, &x, &y).unwrap();
        let q = predict(&params, &cfg, &y, &x).unwrap();
        assert_eq!(bits(&p.sem_logits_a), bits(&q.sem_logits_b));
        assert_eq!(bits(&p.sem_logits_b), bits(&q.sem_logits_a));
        assert_eq!(bits(&p.change_logit), bits(&q.change_logit));
        for ((z1, h1), (z2, h2)) in p.heatmaps.iter().zip(&q.heatmaps) {
            assert_eq!(bits(z1), bits(z2));
            assert_eq!(bits(h1), bits(h2));
        }
    }
}

#[test]
fn zero_attention_weights_scale_by_a_quarter() {
    let cfg = DecoderConfig::default();
    let mut params = init_params(&cfg, 0).unwrap();
    zero(&mut params, "seed.sem.cbam.");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor4::from_fn([1, 32, 4, 4], |_| rng.random_range(-2.0..2.0));
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let x = g.constant(f.clone());
    let y = cbam(&mut g, &m, x, "seed.sem.cbam").unwrap();
    for (&o, &i) in g.value(y).data().iter().zip(f.data()) {
        assert_eq!(o, 0.25 * i);
    }
}

#[test]
fn attention_never_amplifies() {
    let cfg = DecoderConfig::default();
    let mut params = init_params(&cfg, 1).unwrap();
    random_biases(&mut params, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = Tensor4::from_fn([2, 32, 4, 4], |_| rng.random_range(-3.0..3.0));
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let x = g.constant(f.clone());
    let y = cbam(&mut g, &m, x, "seed.sem.cbam").unwrap();
    for (&o, &i) in g.value(y).data().iter().zip(f.data()) {
        assert!(o.abs() <= i.abs());
    }
    let wrong = g.constant(Tensor4::zeros([1, 8, 4, 4]));
    assert!(matches!(cbam(&mut g, &m, wrong, "seed.sem.cbam"), Err(ScdError::Shape(_))));
}

#[test]
fn compression_shapes_and_zero_weights() {
    let cfg = DecoderConfig { encoder_widths: [16, 16, 64, 32], ..Default::default() };
    let mut params = init_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Tensor4::from_fn([1, 64, 8, 8], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let x = g.constant(f.clone());
    let y = feature_compress(&mut g, &m, x, "blk1.sh.sem").unwrap();
    assert_eq!(g.value(y).shape(), [1, 16, 8, 8]);

    zero(&mut params, "blk1.sh.sem.proj");
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let x = g.constant(f);
    let y = feature_compress(&mut g, &m, x, "blk1.sh.sem").unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shallow_branch_on_equal_inputs() {
    let cfg = DecoderConfig::default();
    let mut params = init_params(&cfg, 5).unwrap();
    random_biases(&mut params, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = Tensor4::from_fn([1, 32, 4, 4], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let fa = g.constant(f.clone());
    let fb = g.constant(f);
    let t = shallow_branch(&mut g, &m, fa, fb, "blk1.sh").unwrap();
    assert_eq!(g.value(t.a), g.value(t.b));
    for id in [t.a, t.b, t.c] {
        assert_eq!(g.value(id).shape(), [1, 16, 4, 4]);
    }
    // zero difference: the change compressor only sees its projection bias
    let bias = params.get("blk1.sh.chg.proj.b").unwrap();
    let zc = g.value(t.c);
    for c in 0..16 {
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(zc.at(0, c, y, x), bias.at(0, c, 0, 0));
            }
        }
    }
}

#[test]
fn deep_branch_doubles_resolution() {
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rand = || Tensor4::from_fn([1, 16, 4, 4], |_| rng.random_range(-1.0..1.0));
    let (xa, xc) = (rand(), rand());
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let t = FeatureTriplet { a: g.constant(xa.clone()), b: g.constant(xa), c: g.constant(xc) };
    let out = deep_branch(&mut g, &m, &t, "blk1.deep").unwrap();
    for id in [out.a, out.b, out.c] {
        assert_eq!(g.value(id).shape(), [1, 16, 8, 8]);
    }
    assert_eq!(g.value(out.a), g.value(out.b));
}

fn gate_weights(params: &Params, cfg: &DecoderConfig, seed: u64) -> (Tensor4, Tensor4) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let m = Bound::new(&mut g, params, cfg);
    let mut triplet = |g: &mut Graph| FeatureTriplet {
        a: g.constant(Tensor4::from_fn([1, 16, 8, 8], |_| rng.random_range(-3.0..3.0))),
        b: g.constant(Tensor4::from_fn([1, 16, 8, 8], |_| rng.random_range(-3.0..3.0))),
        c: g.constant(Tensor4::from_fn([1, 16, 8, 8], |_| rng.random_range(-3.0..3.0))),
    };
    let deep = triplet(&mut g);
    let shallow = triplet(&mut g);
    let (out, wz, wh) = cagm(&mut g, &m, &deep, &shallow, "blk2").unwrap();
    assert_eq!(g.value(out.c).shape(), [1, 16, 8, 8]);
    (g.value(wz).clone(), g.value(wh).clone())
}

#[test]
fn zero_gates_give_three_quarters() {
    let cfg = DecoderConfig::default();
    let mut params = init_params(&cfg, 0).unwrap();
    zero(&mut params, "blk2.gate.");
    let (wz, wh) = gate_weights(&params, &cfg, 1);
    assert!(wz.data().iter().chain(wh.data()).all(|&w| w == 0.75));
    assert_eq!(heatmap_byte(0.75), 96);
}

#[test]
fn gate_weights_stay_in_open_interval() {
    let cfg = DecoderConfig::default();
    for seed in 0..5 {
        let mut params = init_params(&cfg, seed).unwrap();
        random_biases(&mut params, seed);
        let (wz, wh) = gate_weights(&params, &cfg, seed);
        assert_eq!(wz.shape(), [1, 1, 8, 8]);
        assert!(wz.data().iter().chain(wh.data()).all(|&w| w > 0.0 && w < 2.0));
    }
}

#[test]
fn gating_rejects_mismatched_scales() {
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let m = Bound::new(&mut g, &params, &cfg);
    let big = g.constant(Tensor4::zeros([1, 16, 8, 8]));
    let small = g.constant(Tensor4::zeros([1, 16, 4, 4]));
    let deep = FeatureTriplet { a: big, b: big, c: big };
    let shallow = FeatureTriplet { a: small, b: small, c: small };
    assert!(matches!(cagm(&mut g, &m, &deep, &shallow, "blk1"), Err(ScdError::Shape(_))));
}

#[test]
fn heatmap_bytes() {
    assert_eq!(heatmap_byte(0.0), 0);
    assert_eq!(heatmap_byte(1.0), 128);
    assert_eq!(heatmap_byte(2.0), 255);
    assert_eq!(heatmap_byte(3.0), 255);
    assert_eq!(heatmap_byte(-1.0), 0);
}

fn prediction(sem: Tensor4, change: f64) -> ScdPrediction {
    let [n, _, h, w] = sem.shape();
    ScdPrediction {
        sem_logits_a: sem.clone(),
        sem_logits_b: sem,
        change_logit: Tensor4::full([n, 1, h, w], change),
        heatmaps: vec![],
    }
}

#[test]
fn label_map_examples() {
    let sem = Tensor4::from_fn([1, 5, 2, 3], |[_, c, _, _]| if c == 2 { 10.0 } else { 0.0 });
    let (a, b, mask) = predict_scd_map(&prediction(sem.clone(), -10.0), 0.5);
    assert!(a.iter().chain(&b).chain(&mask).all(|&v| v == 0));
    let (a, b, mask) = predict_scd_map(&prediction(sem, 10.0), 0.5);
    assert!(a.iter().chain(&b).all(|&v| v == 2));
    assert!(mask.iter().all(|&v| v == 1));

    let tie = Tensor4::from_fn([1, 5, 2, 2], |[_, c, _, _]| if c == 1 || c == 3 { 4.0 } else { 0.0 });
    assert!(predict_scd_map(&prediction(tie, 10.0), 0.5).0.iter().all(|&v| v == 1));
    // the no-change channel is never a semantic answer
    let slot0 = Tensor4::from_fn([1, 5, 1, 2], |[_, c, _, _]| if c == 0 { 50.0 } else { c as f64 });
    assert_eq!(predict_scd_map(&prediction(slot0, 10.0), 0.5).0, [4, 4]);
}

#[test]
fn forward_is_deterministic() {
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 9).unwrap();
    let (x, y) = (image(1, 32), image(2, 32));
    let p = predict(&params, &cfg, &x, &y).unwrap();
    let q = predict(&params, &cfg, &x, &y).unwrap();
    assert_eq!(bits(&p.sem_logits_a), bits(&q.sem_logits_a));
    assert_eq!(bits(&p.change_logit), bits(&q.change_logit));
    assert_eq!(init_params(&cfg, 9).unwrap().iter().count(), params.len());
}

#[test]
fn config_is_recovered_from_shapes() {
    for cfg in [
        DecoderConfig::default(),
        DecoderConfig { fusion: Fusion::Add, blocks: 2, ..Default::default() },
        DecoderConfig { num_classes: 3, decoder_width: 8, encoder_widths: [8, 8, 16, 16], stem_width: 4, ..Default::default() },
    ] {
        let params = init_params(&cfg, 0).unwrap();
        assert_eq!(DecoderConfig::infer(&params).unwrap(), cfg);
        let specs = param_specs(&cfg);
        assert_eq!(params.len(), specs.len());
        let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(params.count_scalars(), total);
    }
    let cfg = DecoderConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let mut missing = Params::new();
    for (n, t) in params.iter().filter(|(n, _)| *n != "head.chg.b") {
        missing.insert(n, t.clone());
    }
    assert!(matches!(DecoderConfig::infer(&missing), Err(ScdError::Format(_))));
    let mut reshaped = params.clone();
    *reshaped.get_mut("blk1.deep.chg2.w").unwrap() = Tensor4::zeros([16, 16, 1, 1]);
    assert!(matches!(DecoderConfig::infer(&reshaped), Err(ScdError::Format(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        DecoderConfig { num_classes: 1, ..Default::default() },
        DecoderConfig { blocks: 4, ..Default::default() },
        DecoderConfig { decoder_width: 0, ..Default::default() },
    ] {
        assert!(matches!(init_params(&cfg, 0), Err(ScdError::Param(_))));
    }
}
