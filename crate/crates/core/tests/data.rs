use proptest::prelude::*;
use scd_core::checkpoint;
use scd_core::config::{load_config, parse_config, to_flags};
use scd_core::data::*;
use scd_core::model::{init_params, predict, DecoderConfig, Params};
use scd_core::netpbm::*;
use scd_core::{ScdError, Tensor4};

#[test]
fn pgm_bytes_and_round_trip() {
    let img = GrayImage::new(2, 2, vec![0, 1, 2, 255]).unwrap();
    let bytes = encode_pgm(&img);
    assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x01, 0x02, 0xFF]);
    assert_eq!(decode_pgm(&bytes).unwrap(), img);

    let commented = b"P5\n# made by hand\n2 # width\n2\n255\n\x00\x01\x02\xff";
    assert_eq!(decode_pgm(commented).unwrap(), img);
}

#[test]
fn malformed_rasters_are_rejected() {
    let bad: [&[u8]; 6] = [
        b"P5\n2 2\n65535\n\x00\x00\x00\x00\x00\x00\x00\x00",
        b"P6\n2 2\n255\n\x00\x01\x02\x03",
        b"P5\n2 2\n255\n\x00\x01",
        b"P5\n2\n",
        b"P5\n0 2\n255\n",
        b"",
    ];
    for b in bad {
        assert!(matches!(decode_pgm(b), Err(ScdError::Format(_))), "{:?}", String::from_utf8_lossy(b));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.pgm");
    std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
    match read_pgm(&path) {
        Err(ScdError::Format(m)) => assert!(m.contains("deep.pgm") && m.contains("65535")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ppm_rounding() {
    let img = Tensor4::from_fn([1, 3, 1, 3], |[_, _, _, x]| [0.0, 1.0, 0.5][x]);
    let bytes = encode_ppm(&img).unwrap();
    assert_eq!(&bytes[bytes.len() - 9..], &[0, 0, 0, 255, 255, 255, 128, 128, 128]);
    let back = decode_ppm(&bytes).unwrap();
    assert_eq!(back.at(0, 0, 0, 2), 128.0 / 255.0);
    assert!(encode_ppm(&Tensor4::zeros([1, 1, 2, 2])).is_err());
}

proptest! {
    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let data: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = GrayImage::new(w, h, data).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_round_trips_bytes(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
        let img = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| f64::from((seed >> ((c + y + x) % 50)) as u8) / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()).unwrap(), bytes);
    }
}

#[test]
fn generated_pairs_satisfy_the_label_invariant() {
    for seed in 0..10 {
        let s = gen_synthetic_pair(seed, 64, 64, 4, 0.3).unwrap();
        assert_eq!(s.image_a.shape(), [1, 3, 64, 64]);
        assert!(s.image_a.data().iter().chain(s.image_b.data()).all(|&v| (0.0..=1.0).contains(&v)));
        for p in 0..64 * 64 {
            let (a, b) = (s.sem_a[p], s.sem_b[p]);
            assert_eq!(s.change_mask[p] == 1, a != 0 || b != 0);
            // a changed pixel always has a real from-to transition
            assert_eq!(a == 0, b == 0);
            assert!(a <= 4 && b <= 4);
            if a != 0 {
                assert_ne!(a, b);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(gen_synthetic_pair(11, 64, 64, 4, 0.3).unwrap(), gen_synthetic_pair(11, 64, 64, 4, 0.3).unwrap());
    assert_ne!(gen_synthetic_pair(11, 64, 64, 4, 0.3).unwrap(), gen_synthetic_pair(12, 64, 64, 4, 0.3).unwrap());
    let spec = SyntheticSpec::default();
    let all = generate_set(&spec, 0, 6).unwrap();
    assert_eq!(generate_set(&spec, 4, 2).unwrap(), all[4..]);
}

#[test]
fn change_fraction_tracks_the_rate() {
    for rate in [0.1, 0.3, 0.5] {
        for seed in 0..50 {
            let s = gen_synthetic_pair(sample_seed(seed, 0), 64, 64, 4, rate).unwrap();
            let frac = s.change_mask.iter().filter(|&&m| m == 1).count() as f64 / (64.0 * 64.0);
            assert!((frac - rate).abs() <= 0.1, "rate {rate} seed {seed}: {frac}");
        }
    }
}

#[test]
fn bad_generator_arguments() {
    assert!(matches!(gen_synthetic_pair(0, 48, 64, 4, 0.3), Err(ScdError::Param(_))));
    assert!(matches!(gen_synthetic_pair(0, 64, 64, 1, 0.3), Err(ScdError::Param(_))));
    assert!(matches!(gen_synthetic_pair(0, 64, 64, 4, 1.0), Err(ScdError::Param(_))));
}

#[test]
fn mask_propagates_ignore() {
    let img = Tensor4::zeros([1, 3, 1, 3]);
    let s = SamplePair::from_maps(img.clone(), img, vec![0, 255, 2], vec![0, 1, 0]).unwrap();
    assert_eq!(s.change_mask, [0, 255, 1]);
}

#[test]
fn samples_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { size: 32, ..Default::default() };
    let set = generate_set(&spec, 0, 3).unwrap();
    for (i, s) in set.iter().enumerate() {
        write_sample(dir.path(), &sample_id(i), s).unwrap();
    }
    assert_eq!(list_ids(dir.path()).unwrap(), ["00000", "00001", "00002"]);
    let back = load_dir(dir.path()).unwrap();
    for (a, b) in set.iter().zip(&back) {
        assert_eq!(a.sem_a, b.sem_a);
        assert_eq!(a.change_mask, b.change_mask);
        // images come back quantized to bytes
        for (x, y) in a.image_a.data().iter().zip(b.image_a.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    std::fs::remove_file(dir.path().join("00001_semB.pgm")).unwrap();
    match read_sample(dir.path(), "00001") {
        Err(ScdError::Data(m)) => assert!(m.contains("00001")),
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dir(empty.path()), Err(ScdError::Data(_))));
}

#[test]
fn directory_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    let set = generate_set(&SyntheticSpec { size: 32, ..Default::default() }, 0, 4).unwrap();
    for (i, s) in set.iter().enumerate() {
        write_labels(&gt, &sample_id(i), &s.sem_a, &s.sem_b, 32, 32).unwrap();
        write_labels(&pred, &sample_id(i), &s.sem_a, &s.sem_b, 32, 32).unwrap();
    }
    let r = evaluate(&pred, &gt, 4).unwrap();
    assert_eq!((r.oa, r.miou, r.sek, r.f_scd), (1.0, 1.0, 1.0, 1.0));

    // sharded accumulation merges to the single-stream result
    let noisy = |v: &[u8]| v.iter().enumerate().map(|(i, &l)| if i % 7 == 0 { (l + 1) % 5 } else { l }).collect::<Vec<_>>();
    for (i, s) in set.iter().enumerate() {
        write_labels(&pred, &sample_id(i), &noisy(&s.sem_a), &noisy(&s.sem_b), 32, 32).unwrap();
    }
    let ids = list_ids(&gt).unwrap();
    let whole = accumulate_dirs(&pred, &gt, &ids, 4).unwrap();
    let left = accumulate_dirs(&pred, &gt, &ids[..1], 4).unwrap();
    let right = accumulate_dirs(&pred, &gt, &ids[1..], 4).unwrap();
    assert_eq!(left.merge(&right).unwrap().report().unwrap(), whole.report().unwrap());
    assert_eq!(evaluate(&pred, &gt, 4).unwrap(), whole.report().unwrap());

    let out = dir.path().join("metrics.csv");
    write_report(&whole.report().unwrap(), &out).unwrap();
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("oa,f_scd,miou,sek,p_scd,r_scd\n"));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(evaluate(&pred, &empty, 4), Err(ScdError::EmptyReduction(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = DecoderConfig { fusion: scd_core::model::Fusion::Add, ..Default::default() };
    let params = init_params(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&params, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for ((n1, a), (n2, b)) in params.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let s = gen_synthetic_pair(0, 32, 32, 4, 0.3).unwrap();
    let p = predict(&params, &cfg, &s.image_a, &s.image_b).unwrap();
    let q = predict(&back, &DecoderConfig::infer(&back).unwrap(), &s.image_a, &s.image_b).unwrap();
    assert_eq!(p, q);
}

#[test]
fn checkpoint_layout_and_corruption() {
    let mut p = Params::new();
    p.insert("x", Tensor4::new([1, 1, 1, 2], vec![1.5, -2.0]).unwrap());
    let bytes = checkpoint::encode(&p);
    let mut want = b"SCD1".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.push(b'x');
    for d in [1u32, 1, 1, 2] {
        want.extend(d.to_le_bytes());
    }
    want.extend(1.5f64.to_le_bytes());
    want.extend((-2.0f64).to_le_bytes());
    assert_eq!(bytes, want);

    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 1]), Err(ScdError::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(checkpoint::decode(&extra), Err(ScdError::Format(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(checkpoint::decode(&magic), Err(ScdError::Format(_))));
    let mut version = bytes;
    version[4] = 2;
    assert!(matches!(checkpoint::decode(&version), Err(ScdError::Format(_))));
}

#[test]
fn config_files() {
    let text = "# run\nepochs = 3\n\nlr_peak=0.05 # faster\nvariant = ssc\n";
    let pairs = parse_config(text).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(to_flags(&pairs), ["--epochs=3", "--lr-peak=0.05", "--variant=ssc"]);
    assert!(matches!(parse_config("epochs 3"), Err(ScdError::Param(_))));
    assert!(matches!(parse_config("bad key = 1"), Err(ScdError::Param(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, text).unwrap();
    assert_eq!(load_config(&path).unwrap(), pairs);
    assert!(matches!(load_config(&dir.path().join("missing.cfg")), Err(ScdError::Io { .. })));
}
