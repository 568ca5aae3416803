use evrecon::events::{
    encode_events, parse_event_text, read_event_binary, write_event_binary, write_event_text, window_by_count,
    window_by_duration, EventStream, EventTensor,
};
use evrecon::events::normalize_tensor;
use evrecon::image::{FlowField, Image};
use evrecon::losses::{reconstruction_loss, temporal_loss, ReconKind};
use evrecon::metrics::{equalize, mse, ssim};
use evrecon::nn::gradcheck::{gradient_check, GradCheckOp};
use evrecon::nn::{
    e2vid_forward, load_checkpoint, save_checkpoint, AdamState, Mode, ModelWeights, NetworkConfig, SkipMode, Tensor4,
};
use evrecon::pipeline::{deflicker, lab_to_rgb, percentile, postprocess, rgb_to_lab, Frame};
use evrecon::simulator::{simulate_sequence, ContrastThresholds, EventGenerator, SimConfig};
use evrecon::trainer::{predict_sequence, prepare_sequence, Augmentation};
use evrecon::Error;
use proptest::prelude::*;

fn stream_strategy() -> impl Strategy<Value = EventStream> {
    (1usize..20, 1usize..20, prop::collection::vec((0.0f64..1e-3, any::<u16>(), any::<u16>(), any::<bool>()), 0..200))
        .prop_map(|(w, h, raw)| {
            let mut t = 0.0;
            let events = raw
                .into_iter()
                .map(|(dt, x, y, p)| {
                    t += dt;
                    evrecon::events::Event::new(t, x % w as u16, y % h as u16, if p { 1 } else { -1 })
                })
                .collect();
            EventStream::new(w, h, events).unwrap()
        })
}

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, w * h).prop_map(move |d| Image::from_vec(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_exact(s in stream_strategy()) {
        let back = read_event_binary(&write_event_binary(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn text_round_trip_keeps_nanoseconds(s in stream_strategy()) {
        let mut buf = Vec::new();
        write_event_text(&s, &mut buf).unwrap();
        let back = parse_event_text(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for (a, b) in back.events().iter().zip(s.events()) {
            prop_assert!((a.t - b.t).abs() <= 5e-10);
            prop_assert_eq!((a.x, a.y, a.polarity), (b.x, b.y, b.polarity));
        }
    }

    #[test]
    fn voxel_sum_equals_polarity_sum(s in stream_strategy(), bins in 1usize..8) {
        let v = encode_events(s.events(), bins, s.height(), s.width()).unwrap();
        prop_assert!((v.sum() - s.polarity_sum() as f64).abs() <= 1e-9 * (s.len().max(1) as f64));
    }

    #[test]
    fn count_windows_partition_a_prefix(s in stream_strategy(), n in 1usize..50) {
        let w = window_by_count(&s, n).unwrap();
        prop_assert_eq!(w.len(), s.len() / n);
        prop_assert!(w.iter().all(|w| w.len() == n));
    }

    #[test]
    fn duration_windows_cover_every_event(s in stream_strategy(), tau in 1e-5f64..1e-2) {
        let total: usize = window_by_duration(&s, tau).unwrap().iter().map(|w| w.len()).sum();
        prop_assert_eq!(total, s.len());
    }

    #[test]
    fn postprocess_lands_in_unit_range_and_is_idempotent(img in image_strategy(12, 9)) {
        let out = postprocess(&img);
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = postprocess(&out);
        prop_assert!(out.data.iter().zip(&again.data).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn percentile_is_monotone(mut v in prop::collection::vec(-5.0f64..5.0, 1..100), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&v, lo) <= percentile(&v, hi));
        prop_assert_eq!(percentile(&v, 0.0), v[0]);
        prop_assert_eq!(percentile(&v, 1.0), *v.last().unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image_strategy(16, 16), b in image_strategy(16, 16)) {
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!(mse(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn lab_round_trip(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
        let back = lab_to_rgb(rgb_to_lab([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn flips_permute_voxels(bins in 1usize..4, seed in any::<u64>()) {
        let (w, h) = (10, 7);
        let mut s = seed | 1;
        let mut t = EventTensor::zeros(bins, h, w);
        for v in t.values.iter_mut() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            *v = (s % 7) as f64 - 3.0;
        }
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let aug = Augmentation { flip_h: fh, flip_v: fv, ..Augmentation::identity(w, h) };
            let out = aug.apply_tensor(&t);
            let mut a = out.values.clone();
            let mut b = t.values.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(aug.apply_tensor(&out).values, t.values.clone());
        }
    }
}

#[test]
fn rotation_roughly_conserves_central_mass() {
    let (w, h) = (40, 40);
    let mut t = EventTensor::zeros(2, h, w);
    for b in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let r2 = (x as f64 - 19.5).powi(2) + (y as f64 - 19.5).powi(2);
                t.values[(b * h + y) * w + x] = (-r2 / 40.0).exp() * if b == 0 { 1.0 } else { -0.5 };
            }
        }
    }
    for deg in [-20.0f64, -7.0, 5.0, 20.0] {
        let aug = Augmentation { angle: deg.to_radians(), ..Augmentation::identity(w, h) };
        let out = aug.apply_tensor(&t);
        for b in 0..2 {
            let (s0, s1): (f64, f64) = (t.bin(b).iter().sum(), out.bin(b).iter().sum());
            assert!((s1 - s0).abs() <= 0.05 * s0.abs(), "{deg} deg bin {b}: {s0} -> {s1}");
        }
    }
}

/// Mean absolute change when equalization is applied a second time, on
/// simulated ground-truth frames.
#[test]
fn equalization_is_idempotent_within_tolerance() {
    let mut worst: f64 = 0.0;
    for (seed, size) in [(0u64, 64usize), (1, 64), (0, 256)] {
        let seq = simulate_sequence(&SimConfig { seed, width: size, height: size, duration: 0.1, ..SimConfig::default() }).unwrap();
        let once = equalize(&seq.gt_frames[3]).unwrap();
        let twice = equalize(&once).unwrap();
        let change = once.data.iter().zip(&twice.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / once.len() as f64;
        println!("equalize twice, seed {seed} {size}px: mean change {change:.4}");
        worst = worst.max(change);
    }
    assert!(worst < 0.02, "mean change {worst:.4} exceeds 0.02");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let net = NetworkConfig {
        num_encoders: 2,
        num_residual: 1,
        base_channels: 4,
        skip: SkipMode::Concat,
        input_bins: 3,
        unroll: 4,
    };
    let w = ModelWeights::init(&net, 9).unwrap();
    let bytes = save_checkpoint(&w, &net, Some(&AdamState::default()));
    let ck = load_checkpoint(&bytes, Some(&net)).unwrap();
    assert_eq!(ck.config, net);
    for (k, t) in &w.params {
        let back = &ck.weights.params[k];
        assert!(t.data().iter().zip(back.data()).all(|(a, b)| (*a as f32) as f64 == *b), "{k}");
    }
    let mut bad = bytes.clone();
    bad[40] ^= 0x10;
    assert!(matches!(load_checkpoint(&bad, None), Err(Error::Checksum { .. })));
    let other = NetworkConfig { base_channels: 8, ..net };
    match load_checkpoint(&bytes, Some(&other)) {
        Err(Error::ConfigMismatch { key, .. }) => assert_eq!(key, "base_channels"),
        r => panic!("expected a config mismatch, got {r:?}"),
    }
}

#[test]
fn deflicker_leaves_constant_video_alone() {
    let frames: Vec<Frame> = (0..5)
        .map(|k| Frame { timestamp: k as f64, image: Image::filled(4, 4, 0.3) })
        .collect();
    let out = deflicker(&frames, 0.7).unwrap();
    assert!(out.iter().all(|f| f.image.data.iter().all(|v| (v - 0.3).abs() < 1e-15)));
    assert_eq!(deflicker(&frames, 0.0).unwrap(), frames);
    assert!(deflicker(&frames, 1.0).is_err());
}

fn mutate_record(kind: usize, field: usize) -> String {
    let mut f: Vec<String> = ["0.5", "1", "2", "1"].iter().map(|s| s.to_string()).collect();
    match kind {
        0 => {
            f.remove(field);
        }
        1 => f.push("7".into()),
        2 => f[field] = "abc".into(),
        3 => f[field] = "".into(),
        4 => f[1 + field % 2] = "1.5".into(),
        5 => f[3] = ["2", "-2", "p", "1.0"][field].into(),
        _ => f[0] = ["nan", "inf", "-inf", "1e999"][field].into(),
    }
    f.join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_parser_rejects_broken_records(kind in 0usize..7, field in 0usize..4) {
        let line = mutate_record(kind, field);
        let text = format!("4 4\n0.1 0 0 1\n{line}\n");
        prop_assert!(parse_event_text(text.as_bytes()).is_err(), "accepted `{}`", line);
        prop_assert!(parse_event_text("4 4\n0.1 0 0 1\n0.5 1 2 1\n".as_bytes()).is_ok());
    }

    #[test]
    fn same_polarity_neighbours_are_one_threshold_apart(
        logs in prop::collection::vec(prop::collection::vec(-4.0f64..0.0, 3), 2..12),
        c_pos in 0.05f64..0.4,
        c_neg in 0.05f64..0.4,
    ) {
        let mut gen = EventGenerator::new(3, 1, ContrastThresholds { c_pos, c_neg }).unwrap();
        let times: Vec<f64> = (0..logs.len()).map(|k| k as f64 * 1e-3).collect();
        for (l, t) in logs.iter().zip(&times) {
            gen.push_log(l, *t).unwrap();
        }
        let stream = gen.finish().unwrap();
        let signal = |px: usize, t: f64| {
            let k = ((t / 1e-3).floor() as usize).min(logs.len() - 2);
            let u = (t - times[k]) / 1e-3;
            logs[k][px] + u * (logs[k + 1][px] - logs[k][px])
        };
        for px in 0..3 {
            let own: Vec<_> = stream.events().iter().filter(|e| e.x as usize == px).collect();
            for pair in own.windows(2) {
                if pair[0].polarity != pair[1].polarity {
                    continue;
                }
                let step = signal(px, pair[1].t) - signal(px, pair[0].t);
                let c = if pair[0].polarity > 0 { c_pos } else { -c_neg };
                prop_assert!((step - c).abs() < 1e-9, "pixel {} step {} expected {}", px, step, c);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(a in image_strategy(6, 5), b in image_strategy(6, 5), m in image_strategy(6, 5), d in -2.0f64..2.0) {
        let mut flow = FlowField::zeros(6, 5);
        for i in 0..30 {
            flow.dx[i] = d * (i % 6) as f64 / 5.0;
            flow.dy[i] = -d * (i / 6) as f64 / 4.0;
        }
        prop_assert!(temporal_loss(&a, &b, &flow, &m).unwrap() >= 0.0);
        prop_assert_eq!(temporal_loss(&a, &a, &FlowField::zeros(6, 5), &m).unwrap(), 0.0);
        for kind in [ReconKind::L1, ReconKind::Mse] {
            prop_assert!(reconstruction_loss(&a, &b, kind).unwrap() >= 0.0);
        }
    }
}

#[test]
fn gradients_match_differences_on_five_seeds() {
    for seed in 0..5 {
        for op in GradCheckOp::ALL {
            let r = gradient_check(op, op.default_shape(), seed).unwrap();
            assert!(r.max_rel_err < 1e-4, "{op:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn stepwise_forward_matches_sequence_prediction() {
    let net = NetworkConfig { num_encoders: 2, num_residual: 1, base_channels: 4, skip: SkipMode::Sum, input_bins: 5, unroll: 4 };
    let w = ModelWeights::init(&net, 3).unwrap();
    let seq = simulate_sequence(&SimConfig { seed: 4, width: 24, height: 24, duration: 0.12, ..SimConfig::default() }).unwrap();
    let prepared = prepare_sequence(&seq, 5, "s").unwrap();
    let batch = predict_sequence(&w, &net, &prepared, true).unwrap();
    let mut state = None;
    for (t, expected) in prepared.windows.iter().zip(&batch) {
        let x = Tensor4::from_event_tensor(&normalize_tensor(t.clone()));
        let (img, next) = e2vid_forward(&x, state.as_ref(), &w, &net, Mode::Eval).unwrap();
        assert_eq!(&img.image(0, 0), expected);
        state = Some(next);
    }
    assert!(batch.len() >= 4);
}
