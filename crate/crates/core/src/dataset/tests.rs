use super::*;
use crate::sim::Q2_RANGE;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn cfg() -> SimConfig {
    SimConfig::default()
}

fn toy_sample(index: u32, q: f32, f: f32, a: [f32; 3]) -> Sample {
    Sample::new(index, a, a, [q; N_JOINTS], [f; N_JOINTS], None)
}

#[test]
fn smooth_step_endpoints_and_midpoint() {
    assert_eq!(smooth_step(-0.4, 1.7, 0.0).unwrap(), -0.4);
    assert_eq!(smooth_step(-0.4, 1.7, 1.0).unwrap(), 1.7);
    assert_eq!(smooth_step(0.0, 2.0, 0.5).unwrap(), 1.0);
}

#[test]
fn smooth_step_has_flat_ends() {
    let h = 1e-4;
    let f = |u: f64| smooth_step(0.3, 2.1, u).unwrap();
    // one-sided evaluation is avoided by extending the cubic past the ends
    let cubic = |u: f64| 0.3 + 1.8 * (3.0 * u * u - 2.0 * u * u * u);
    for u in [0.0, 1.0] {
        let d = (cubic(u + h) - cubic(u - h)) / (2.0 * h);
        assert!(d.abs() < 1e-6, "slope {d} at {u}");
        assert_eq!(cubic(u), f(u));
    }
    let interior = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
    assert!((interior - 1.8 * 1.5).abs() < 1e-6);
}

#[test]
fn smooth_step_rejects_out_of_range_parameter() {
    assert!(matches!(smooth_step(0.0, 1.0, 1.0001), Err(DatasetError::Domain(_))));
    assert!(matches!(smooth_step(0.0, 1.0, -0.1), Err(DatasetError::Domain(_))));
    assert!(smooth_step(0.0, 1.0, f64::NAN).is_err());
}

#[test]
fn generated_commands_are_reproducible_and_in_range() {
    let a = generate_commands(4000, 11);
    assert_eq!(a.len(), 4000);
    assert_eq!(a, generate_commands(4000, 11));
    assert_ne!(a, generate_commands(4000, 12));
    assert!(a.iter().all(|c| c.is_within_workspace()));
}

#[test]
fn ten_samples_per_command() {
    let cmds = generate_commands(3, 5);
    let ds = run_episode(Scenario::Empty, &cmds, &cfg(), 5, false).unwrap();
    assert_eq!(ds.len(), 30);
    for (i, s) in ds.samples.iter().enumerate() {
        assert_eq!(s.index as usize, i);
        assert_eq!(s.command().to_array().map(|v| v as f32), cmds[i / 10].to_array().map(|v| v as f32));
        assert!(s.frame.is_none());
    }
    // a segment's last sample sees the arm at its target
    for (k, c) in cmds.iter().enumerate() {
        let s = &ds.samples[k * 10 + 9];
        assert_eq!(s.arm_q, c.to_array().map(|v| v as f32));
    }
}

#[test]
fn raised_finger_records_no_force() {
    let cmds: Vec<Command> = generate_commands(20, 3)
        .into_iter()
        .map(|c| Command::new(c.q1, 0.4 * c.q2, c.q3))
        .collect();
    let ds = run_episode(Scenario::Empty, &cmds, &cfg(), 3, false).unwrap();
    assert!(ds.samples.iter().all(|s| s.forces.iter().all(|&f| f == 0.0)));
}

#[test]
fn vision_frames_are_recorded() {
    let cmds = generate_commands(1, 2);
    let ds = run_episode(Scenario::Cluttered, &cmds, &cfg(), 2, true).unwrap();
    assert!(ds.has_vision);
    let first = ds.samples[0].frame().unwrap();
    let last = ds.samples[9].frame().unwrap();
    assert!(first.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(first, last);
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str| {
        let cmds = generate_commands(4, 21);
        let ds = run_episode(Scenario::Cluttered, &cmds, &cfg(), 21, true).unwrap();
        let path = dir.path().join(name);
        ds.save(&path).unwrap();
        Sha256::digest(std::fs::read(path).unwrap())
    };
    assert_eq!(digest("a.ssd"), digest("b.ssd"));
}

#[test]
fn unstable_physics_aborts_with_partial_count() {
    let mut c = cfg();
    c.contact.penalty_stiffness = 1e9;
    let cmds = vec![
        Command::new(Command::REST.q1 + 0.6, Q2_RANGE.0, 1.4),
        Command::new(Command::REST.q1 - 0.6, Q2_RANGE.0, 0.2),
        Command::new(Command::REST.q1, Q2_RANGE.0, 1.0),
    ];
    match run_episode(Scenario::Empty, &cmds, &c, 0, false) {
        Err(DatasetError::Simulation { completed, .. }) => assert!(completed < 30),
        other => panic!("expected a simulation failure, got {other:?}"),
    }
}

#[test]
fn commands_outside_workspace_are_rejected() {
    let cmds = vec![Command::new(0.0, -0.5, 0.5)];
    assert!(matches!(
        run_episode(Scenario::Empty, &cmds, &cfg(), 0, false),
        Err(DatasetError::InvalidEpisode(_))
    ));
    assert!(run_episode(Scenario::Empty, &[], &cfg(), 0, false).is_err());
}

#[test]
fn identical_samples_get_clamped_std() {
    let s = toy_sample(0, 0.25, 1.5, [3.0, -0.5, 0.75]);
    let samples: Vec<Sample> = (0..5).map(|i| Sample { index: i, ..s.clone() }).collect();
    let st = compute_norm_stats(&samples).unwrap();
    assert!(st.clamped.iter().all(|&c| c));
    assert!(st.std.iter().all(|&v| v == 1.0));
    assert_eq!(st.mean[Q_OFFSET], 0.25);
    assert_eq!(st.mean[FORCE_OFFSET + 7], 1.5);
    assert_eq!(&st.mean[ACTION_OFFSET..], &[3.0, -0.5, 0.75]);
}

#[test]
fn two_sample_stats_by_hand() {
    let a = toy_sample(0, 1.0, 0.0, [3.0, -1.0, 0.0]);
    let b = toy_sample(1, 3.0, 4.0, [3.0, 0.0, 1.0]);
    let st = compute_norm_stats(&[a, b]).unwrap();
    // mean (1+3)/2, population std |3-1|/2
    assert_eq!(st.mean[0], 2.0);
    assert_eq!(st.std[0], 1.0);
    assert!(!st.clamped[0]);
    assert_eq!(st.mean[FORCE_OFFSET], 2.0);
    assert_eq!(st.std[FORCE_OFFSET], 2.0);
    assert_eq!(st.mean[ACTION_OFFSET], 3.0);
    assert!(st.clamped[ACTION_OFFSET]);
    assert_eq!(st.mean[ACTION_OFFSET + 1], -0.5);
    assert_eq!(st.std[ACTION_OFFSET + 1], 0.5);
    assert_eq!(st.std[ACTION_OFFSET + 2], 0.5);
}

#[test]
fn stats_of_nothing_is_an_error() {
    assert!(matches!(compute_norm_stats(&[]), Err(DatasetError::Empty)));
}

proptest! {
    #[test]
    fn standardize_roundtrip(
        q in prop::collection::vec(-3.0f32..3.0, N_JOINTS),
        spread in 0.01f32..5.0,
        shift in -2.0f32..2.0,
    ) {
        let a = Sample::new(0, [3.0, -0.5, 0.5], [0.0; 3], std::array::from_fn(|i| q[i]), [0.0; N_JOINTS], None);
        let b = Sample::new(1, [3.0, -0.5, 0.5], [0.0; 3], std::array::from_fn(|i| q[i] * spread + shift), [1.0; N_JOINTS], None);
        let st = compute_norm_stats(&[a.clone(), b]).unwrap();
        let z = st.standardize(Q_OFFSET, &a.finger_q);
        let back = st.destandardize(Q_OFFSET, &z);
        for (x, y) in back.iter().zip(&a.finger_q) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

fn small_dataset(vision: bool) -> Dataset {
    let cmds = generate_commands(1, 8);
    run_episode(Scenario::Cluttered, &cmds, &cfg(), 8, vision).unwrap()
}

#[test]
fn save_load_roundtrip_is_value_identical() {
    let dir = tempfile::tempdir().unwrap();
    for vision in [false, true] {
        let ds = small_dataset(vision);
        assert_eq!(ds.len(), 10);
        let path = dir.path().join(format!("d{vision}.ssd"));
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}

#[test]
fn file_size_is_predicted_exactly() {
    let ds = small_dataset(true);
    let bytes = ds.to_bytes();
    let header = 4 + 4 + 1 + 1 + 2 + 8 + 4 + 4 + ds.config.len() + 43 * 2 * 4;
    let record = 4 + 46 * 4 + 64 * 64 * 3;
    assert_eq!(bytes.len(), header + 10 * record + 4);
    assert_eq!(bytes.len(), file_size(ds.config.len(), 10, true));
}

#[test]
fn flipped_payload_byte_fails_checksum() {
    let ds = small_dataset(false);
    let bytes = ds.to_bytes();
    for pos in [30, header_size(ds.config.len()) + 17, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        let err = Dataset::from_bytes(&bad).unwrap_err();
        assert!(
            matches!(err, DatasetError::Checksum { .. }),
            "byte {pos}: {err}"
        );
    }
}

#[test]
fn each_corruption_kind_has_its_own_error() {
    let ds = small_dataset(false);
    let bytes = ds.to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        Dataset::from_bytes(&bad),
        Err(DatasetError::UnsupportedVersion(2))
    ));

    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            Dataset::from_bytes(&bytes[..cut]),
            Err(DatasetError::Truncated { .. })
        ));
    }

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::Corrupt(_))));

    // tampered statistics with a valid checksum
    let mut bad = bytes[..bytes.len() - 4].to_vec();
    let stats_at = header_size(ds.config.len()) - 43 * 8;
    bad[stats_at..stats_at + 4].copy_from_slice(&123.0f32.to_le_bytes());
    let crc = crc32fast::hash(&bad[8..]);
    bad.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::Corrupt(_))));
}

#[test]
fn save_leaves_no_partial_file_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("d.ssd");
    assert!(matches!(small_dataset(false).save(&path), Err(DatasetError::Io { .. })));
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 0);
}

#[test]
fn recorded_episodes_respect_ranges_and_quasi_static_bounds() {
    let c = cfg();
    let cmds = generate_commands(150, 4);
    let mut fastest: f64 = 0.0;
    let ds = run_episode_with(Scenario::Cluttered, &cmds, &c, 4, false, |w, _| {
        for v in &w.finger.angular_velocities {
            fastest = fastest.max(v.abs());
        }
    })
    .unwrap();
    assert!(fastest < c.sampling.quasi_static_velocity_bound, "{fastest}");
    for s in &ds.samples {
        assert!(s.command().is_within_workspace());
        let arm = Command::from_array(s.arm_q.map(f64::from));
        // f32 storage may round just past a range edge
        let nudged = Command::new(
            arm.q1.clamp(Q1_RANGE.0, Q1_RANGE.1),
            arm.q2.clamp(Q2_RANGE.0, Q2_RANGE.1),
            arm.q3.clamp(Q3_RANGE.0, Q3_RANGE.1),
        );
        assert!((nudged.q1 - arm.q1).abs() < 1e-6 && (nudged.q2 - arm.q2).abs() < 1e-6);
        assert!((nudged.q3 - arm.q3).abs() < 1e-6);
        assert!(s.forces.iter().all(|&f| f >= 0.0));
        assert!(s.finger_q.iter().all(|q| q.is_finite()));
    }
    for pair in ds.samples.windows(2) {
        for j in 0..N_JOINTS {
            let dq = (pair[1].finger_q[j] - pair[0].finger_q[j]).abs() as f64;
            assert!(dq < c.sampling.quasi_static_angle_step, "joint {j}: {dq}");
        }
    }
}
