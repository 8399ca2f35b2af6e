use super::*;
use crate::config::SimConfig;
use crate::dataset::{generate_commands, run_episode, Scenario, SAMPLES_PER_COMMAND};
use crate::metrics::smape;
use crate::nn::kl_to_standard_normal;
use rand::Rng;
use std::sync::OnceLock;

/// 40 commands with vision.
fn small() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        run_episode(Scenario::Cluttered, &generate_commands(40, 3), &SimConfig::default(), 3, true).unwrap()
    })
}

/// 4000 samples, proprioception only.
fn desk() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        run_episode(Scenario::Empty, &generate_commands(400, 11), &SimConfig::default(), 11, false).unwrap()
    })
}

fn p1(latent: usize) -> ArchSpec {
    ArchSpec::new(Variant::P1, latent, true).unwrap()
}

fn p2(latent: usize) -> ArchSpec {
    ArchSpec::new(Variant::P2, latent, true).unwrap()
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        max_epochs: epochs,
        ..TrainConfig::desk(seed)
    }
}

fn obs(ds: &Dataset, range: std::ops::Range<usize>, v: Variant) -> Vec<ObservationBundle> {
    range.map(|i| ObservationBundle::from_sample(&ds.samples[i], v).unwrap()).collect()
}

#[test]
fn layer_arithmetic() {
    let a = ArchSpec::new(Variant::P1, 4, false).unwrap();
    assert_eq!((a.encoder_output_len(), a.decoder_input_len()), (8, 7));
    assert_eq!(p2(16).conv_side(), (64 - 4) / 2 + 1);
    assert_eq!(p2(16).encoder_output_len(), 32);
    assert_eq!(a.observation_len(), 20);
    assert_eq!(p2(64).observation_len(), 20 + 64 * 64 * 3);
    assert_eq!(a.label(), "p1-L4");

    let m = FusionModel::build(p2(16), small().stats.clone(), 0).unwrap();
    let shape = |n: &str| m.params.iter().find(|(k, _)| *k == n).unwrap().1.shape().to_vec();
    assert_eq!(shape("enc.fc1.w"), vec![8 * 31 * 31 + 20, HIDDEN_WIDTH]);
    assert_eq!(shape("enc.head.w"), vec![HIDDEN_WIDTH, 32]);
    assert_eq!(shape("dec.fc1.w"), vec![19, HIDDEN_WIDTH]);
    assert_eq!(shape("dec.out.w"), vec![HIDDEN_WIDTH, 40]);
    assert!(m.encoder_params().iter().all(|n| n.starts_with("enc.")));
}

#[test]
fn latent_sizes_are_checked() {
    for &l in &P1_LATENTS {
        ArchSpec::new(Variant::P1, l, false).unwrap();
    }
    for &l in &P2_LATENTS {
        ArchSpec::new(Variant::P2, l, false).unwrap();
    }
    assert!(matches!(
        ArchSpec::new(Variant::P1, 64, false),
        Err(ModelError::InvalidLatent { latent: 64, .. })
    ));
    assert!(ArchSpec::new(Variant::P2, 4, false).is_err());
    assert!(ArchSpec::new(Variant::P1, 32, true).is_ok());
    assert!(matches!(ArchSpec::new(Variant::P1, 0, true), Err(ModelError::InvalidArch(_))));
    assert_eq!("P2".parse::<Variant>().unwrap(), Variant::P2);
    assert!("p3".parse::<Variant>().is_err());
}

#[test]
fn seeded_builds_match() {
    let s = small().stats.clone();
    let a = FusionModel::build(p1(4), s.clone(), 9).unwrap();
    assert_eq!(a, FusionModel::build(p1(4), s.clone(), 9).unwrap());
    assert_ne!(a.params, FusionModel::build(p1(4), s, 10).unwrap().params);
}

#[test]
fn fresh_encoders_are_deterministic_and_bounded() {
    let ds = small();
    for arch in [p1(16), p2(16)] {
        let m = FusionModel::build(arch, ds.stats.clone(), 1).unwrap();
        let o = obs(ds, 0..ds.len(), arch.variant);
        let a = m.encode_batch(&o).unwrap();
        assert_eq!(a, m.encode_batch(&o).unwrap());
        assert_eq!(m.encode(&o[5]).unwrap(), a[5]);
        for d in &a {
            assert_eq!(d.mu.len() + d.logvar.len(), 32);
            assert!(d.mu.iter().chain(&d.logvar).all(|v| v.is_finite() && v.abs() < 1e3));
        }
    }
}

#[test]
fn mean_mode_prediction_is_deterministic_and_split() {
    let ds = small();
    let cmd = ds.samples[7].command();
    for arch in [p1(2), p2(16)] {
        let m = FusionModel::build(arch, ds.stats.clone(), 2).unwrap();
        let o = ObservationBundle::from_sample(&ds.samples[6], arch.variant).unwrap();
        let a = m.predict(&o, &cmd, None).unwrap();
        assert_eq!(a, m.predict(&o, &cmd, None).unwrap());
        let zeros = vec![0.0; arch.latent];
        assert_eq!(a, m.predict(&o, &cmd, Some(&zeros)).unwrap());
        let ones = vec![1.0; arch.latent];
        assert_ne!(a, m.predict(&o, &cmd, Some(&ones)).unwrap());
        match arch.variant {
            Variant::P1 => assert!(a.flow.is_none()),
            Variant::P2 => assert_eq!(a.flow.as_ref().unwrap().pixels().len(), 64 * 64 * 3),
        }
        assert!(a.finger_q.iter().chain(&a.forces).all(|v| v.is_finite()));
    }
}

#[test]
fn modality_and_range_errors() {
    let ds = small();
    let m2 = FusionModel::build(p2(16), ds.stats.clone(), 0).unwrap();
    let m1 = FusionModel::build(p1(4), ds.stats.clone(), 0).unwrap();
    let o1 = ObservationBundle::from_sample(&ds.samples[0], Variant::P1).unwrap();
    let o2 = ObservationBundle::from_sample(&ds.samples[0], Variant::P2).unwrap();
    assert!(matches!(m2.encode(&o1), Err(ModelError::Modality(_))));
    assert!(matches!(m1.encode(&o2), Err(ModelError::Modality(_))));
    assert!(matches!(
        m1.predict(&o1, &Command::new(0.0, 0.0, 0.0), None),
        Err(ModelError::ActionOutOfRange(_))
    ));
    let mut blind = m2.clone();
    assert!(matches!(blind.train(desk(), &quick(0, 1)), Err(ModelError::Modality(_))));
    let no_frame = desk().samples[0].clone();
    assert!(ObservationBundle::from_sample(&no_frame, Variant::P2).is_none());
}

#[test]
fn training_needs_a_transition() {
    let one = Dataset::new(Scenario::Empty, 0, false, vec![desk().samples[0].clone()], String::new()).unwrap();
    let mut m = FusionModel::build(p1(2), desk().stats.clone(), 0).unwrap();
    assert!(matches!(m.train(&one, &quick(0, 1)), Err(ModelError::TooSmall(_))));
    let mut bad = quick(0, 1);
    bad.batch_size = 0;
    assert!(matches!(m.train(desk(), &bad), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut m = FusionModel::build(p1(2), small().stats.clone(), 0).unwrap();
    let last = m.params.index_of("dec.out.b").unwrap();
    m.params.get_mut(last).data_mut()[0] = f32::NAN;
    let err = m.train(small(), &quick(0, 1)).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteLoss { epoch: 1, batch: 0, .. }), "{err}");
}

/// Eight settled samples, one per command and renumbered as one episode, so
/// every transition has its own action.
fn eight_samples() -> Dataset {
    let ds = desk();
    let picks = (0..8).map(|k| {
        let s = &ds.samples[k * SAMPLES_PER_COMMAND + SAMPLES_PER_COMMAND - 1];
        Sample::new(k as u32, s.action, s.arm_q, s.finger_q, s.forces, None)
    });
    Dataset::new(Scenario::Empty, 0, false, picks.collect(), String::new()).unwrap()
}

#[test]
fn overfits_eight_samples() {
    let ds = eight_samples();
    let mut m = FusionModel::build(p1(2), ds.stats.clone(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 2000,
        learning_rate: 2e-3,
        holdout: false,
        ..TrainConfig::desk(0)
    };
    let history = m.train(&ds, &cfg).unwrap();
    let last = history.last().unwrap();
    assert!(last.total() < 0.05, "{last:?}");

    let starts = pair_starts(&ds, 0..ds.len());
    assert_eq!(starts.len(), 7);
    let preds = m.predict_transitions(&ds, &starts).unwrap();
    let mut mae = [0.0f32; TARGET_DIM];
    for (p, &t) in preds.iter().zip(&starts) {
        let s = &ds.samples[t + 1];
        let want = [ds.stats.standardize(Q_OFFSET, &s.finger_q), ds.stats.standardize(FORCE_OFFSET, &s.forces)].concat();
        let got = [ds.stats.standardize(Q_OFFSET, &p.finger_q), ds.stats.standardize(FORCE_OFFSET, &p.forces)].concat();
        for (k, (w, g)) in want.iter().zip(&got).enumerate() {
            mae[k] += (w - g).abs() / starts.len() as f32;
        }
    }
    for (k, e) in mae.iter().enumerate() {
        assert!(*e < 0.01, "channel {k}: mean abs error {e}");
    }
}

#[test]
fn loss_decreases_on_desk_data() {
    let mut m = FusionModel::build(p1(4), desk().stats.clone(), 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        ..TrainConfig::desk(0)
    };
    let mut seen = 0;
    let h = m.train_with(desk(), &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 10);
    assert!(h[9].total() < h[0].total(), "{:?} vs {:?}", h[9], h[0]);
    assert!(h.iter().all(|e| e.val_mse.is_some()));

    let mut csv = Vec::new();
    write_history_csv(&h, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_mse,train_kl,val_mse\n1,"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = FusionModel::build(p1(2), small().stats.clone(), 4).unwrap();
        let h = m.train(small(), &quick(8, 3)).unwrap();
        (m, h)
    };
    assert_eq!(run(), run());
}

#[test]
fn shuffled_targets_validate_worse() {
    let ds = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled_samples = ds
        .samples
        .iter()
        .zip(&perm)
        .map(|(s, &p)| {
            let src = &ds.samples[p];
            Sample::new(s.index, s.action, s.arm_q, src.finger_q, src.forces, None)
        })
        .collect();
    let shuffled = Dataset::new(ds.scenario, ds.seed, false, shuffled_samples, String::new()).unwrap();

    let cfg = TrainConfig {
        max_epochs: 10,
        ..TrainConfig::desk(1)
    };
    let val = |d: &Dataset| {
        let mut m = FusionModel::build(p1(4), d.stats.clone(), 1).unwrap();
        m.train(d, &cfg).unwrap().last().unwrap().val_mse.unwrap()
    };
    let (real, noise) = (val(ds), val(&shuffled));
    assert!(real < noise, "true {real} vs shuffled {noise}");
}

fn trained_p1(latent: usize) -> FusionModel {
    static M: OnceLock<FusionModel> = OnceLock::new();
    let m = M.get_or_init(|| {
        let mut m = FusionModel::build(p1(4), desk().stats.clone(), 0).unwrap();
        m.train(desk(), &TrainConfig::desk(0)).unwrap();
        m
    });
    assert_eq!(m.arch.latent, latent);
    m.clone()
}

#[test]
fn decoder_uses_the_action() {
    let m = trained_p1(4);
    let ds = desk();
    let o = ObservationBundle::from_sample(&ds.samples[100], Variant::P1).unwrap();
    let commands = generate_commands(20, 99);
    let preds: Vec<Prediction> = commands.iter().map(|c| m.predict(&o, c, None).unwrap()).collect();
    assert!(preds.iter().any(|p| p.finger_q != preds[0].finger_q));
}

#[test]
fn held_out_kl_is_regular() {
    let m = trained_p1(4);
    let ds = desk();
    let o = obs(ds, ds.split_index()..ds.len(), Variant::P1);
    let mut total = 0.0;
    for d in m.encode_batch(&o).unwrap() {
        let mu: Vec<f64> = d.mu.iter().map(|&v| v as f64).collect();
        let lv: Vec<f64> = d.logvar.iter().map(|&v| v as f64).collect();
        total += kl_to_standard_normal(&mu, &lv).unwrap();
    }
    let mean = total / o.len() as f64;
    assert!(mean.is_finite() && mean < 10.0 * 4.0, "{mean}");
}

#[test]
fn predictions_roundtrip_through_standardization() {
    let m = trained_p1(4);
    let ds = desk();
    let (_, val) = split_pairs(ds);
    for p in m.predict_transitions(ds, &val[..50]).unwrap() {
        for (offset, values) in [(Q_OFFSET, &p.finger_q), (FORCE_OFFSET, &p.forces)] {
            let back = m.stats.destandardize(offset, &m.stats.standardize(offset, values));
            for (a, b) in values.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn reconstruction_leaves_the_encoder_alone() {
    let m = trained_p1(4);
    let before = m.clone();
    let (r, h) = train_reconstruction(&m, desk(), &quick(2, 5)).unwrap();
    assert_eq!(m, before);
    assert_eq!(r.encoder.params, before.params);
    assert!(h.last().unwrap().train_mse < h[0].train_mse);
    assert!(h.iter().all(|e| e.train_kl == 0.0 && e.val_mse.is_some()));
    let q = r.reconstruct_samples(desk(), &[0, 1, 2]).unwrap();
    assert_eq!(q.len(), 3);
}

#[test]
fn wide_latent_reconstructs_well() {
    let ds = desk();
    let mut m = FusionModel::build(p1(32), ds.stats.clone(), 0).unwrap();
    m.train(ds, &TrainConfig::desk(0)).unwrap();
    let (r, _) = train_reconstruction(&m, ds, &TrainConfig::desk(0)).unwrap();
    let held: Vec<usize> = (ds.split_index()..ds.len()).collect();
    let got = r.reconstruct_samples(ds, &held).unwrap();
    let (mut a, mut p) = (Vec::new(), Vec::new());
    for (&i, g) in held.iter().zip(&got) {
        a.extend(ds.samples[i].finger_q.iter().map(|&v| v as f64));
        p.extend(g.iter().map(|&v| v as f64));
    }
    let s = smape(&a, &p).unwrap();
    assert!(s < 5.0, "reconstruction SMAPE {s}");
}

#[test]
fn models_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small();
    let mut m = FusionModel::build(p2(16), ds.stats.clone(), 3).unwrap();
    m.train(ds, &quick(3, 1)).unwrap();
    let path = dir.path().join("m.ssm");
    m.save(&path).unwrap();
    let back = FusionModel::load(&path).unwrap();
    assert_eq!(back, m);
    let o = ObservationBundle::from_sample(&ds.samples[3], Variant::P2).unwrap();
    let cmd = ds.samples[4].command();
    assert_eq!(back.predict(&o, &cmd, None).unwrap(), m.predict(&o, &cmd, None).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.ssm");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(FusionModel::load(&bad).is_err());

    // Tensors from another architecture are refused.
    let mut file = m.to_model_file();
    file.descriptor = FusionModel::build(p2(64), ds.stats.clone(), 0).unwrap().descriptor();
    assert!(matches!(FusionModel::from_model_file(file), Err(ModelError::Descriptor(_))));
    let mut file = m.to_model_file();
    file.descriptor = "{\"kind\":\"other\"}".into();
    assert!(FusionModel::from_model_file(file).is_err());
}

#[test]
fn transition_batches_follow_the_episode() {
    let ds = small();
    let (train, val) = split_pairs(ds);
    let split = ds.split_index();
    assert_eq!(train, (0..split - 1).collect::<Vec<_>>());
    assert_eq!(val, (split..ds.len() - 1).collect::<Vec<_>>());
    let b = data::transition_batch(ds, &ds.stats, &[4, 9], true).unwrap();
    assert_eq!(b.action.shape(), &[2, ACTION_DIM]);
    assert_eq!(b.action.row(1), &ds.samples[10].action_normalized[..]);
    assert_eq!(b.targets.shape(), &[2, TARGET_DIM]);
    let flow = b.flow.unwrap();
    let expected = crate::render::frame_diff(&ds.samples[4].frame().unwrap(), &ds.samples[5].frame().unwrap());
    assert_eq!(chw_to_hwc(flow.row(0)), expected.pixels());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let i = rng.random_range(0..ds.len() - 1);
    let t = data::transition_batch(ds, &ds.stats, &[i], false).unwrap();
    assert_eq!(t.targets.row(0)[..N_JOINTS], ds.stats.standardize(Q_OFFSET, &ds.samples[i + 1].finger_q)[..]);
}
