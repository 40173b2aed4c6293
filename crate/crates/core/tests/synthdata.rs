use dirnet::posehead::{forward_kinematics, PoseParams, Skeleton, NUM_BONES, NUM_DOF, POSE_DIM};
use dirnet::synthdata::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(samples: usize, seed: u64) -> GenConfig {
    GenConfig { samples, seed, ..Default::default() }
}

fn quiet() -> GenConfig {
    GenConfig { background: Background::Flat, noise_sigma: 0.0, ..Default::default() }
}

#[test]
fn degenerate_ranges_give_a_single_pose() {
    let cfg = GenConfig {
        theta: (0..NUM_DOF).map(|i| [0.1 * i as f64; 2]).collect(),
        beta: [1.05; 2],
        rot_x: [0.2; 2],
        rot_y: [-0.1; 2],
        rot_z: [0.7; 2],
        scale: [0.3; 2],
        translation: [0.5; 2],
        ..Default::default()
    };
    let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
    let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(99), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.t, [32.0, 32.0]);
    assert!(a.beta.iter().all(|&v| v == 1.05f32 as f64));
}

#[test]
fn unreachable_bounds_are_reported() {
    let cfg = GenConfig { scale: [3.0, 3.0], ..Default::default() };
    let err = sample_pose(&mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap_err();
    assert!(matches!(err, dirnet::Error::Sampling { attempts: 100 }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        GenConfig { image_size: 48, ..Default::default() },
        GenConfig { beta: [1.2, 1.1], ..Default::default() },
        GenConfig { theta: vec![[0.0, 0.1]; 3], ..Default::default() },
        GenConfig { noise_sigma: -0.1, ..Default::default() },
        GenConfig { samples: 0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().unwrap_err().is_validation());
    }
}

#[test]
fn fixed_seed_gives_identical_pose_sequence() {
    let cfg = GenConfig::default();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| sample_pose(&mut rng, &cfg).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn rendering_is_repeatable() {
    let cfg = quiet();
    let pose = sample_pose(&mut ChaCha8Rng::seed_from_u64(3), &cfg).unwrap();
    assert_eq!(render(&pose, &cfg, 1), render(&pose, &cfg, 2));
    let noisy = GenConfig::default();
    assert_eq!(render(&pose, &noisy, 7), render(&pose, &noisy, 7));
}

#[test]
fn joints_are_visible() {
    let h = 64;
    for background in [Background::Flat, Background::Gradient, Background::Noise] {
        let cfg = GenConfig { background, noise_sigma: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..20 {
            let pose = sample_pose(&mut rng, &cfg).unwrap();
            let empty = PoseParams { t: [-1e3, -1e3], ..pose.clone() };
            let bg = render(&empty, &cfg, k);
            let bg_mean = bg.iter().map(|&v| v as f64).sum::<f64>() / bg.len() as f64;
            let img = render(&pose, &cfg, k);
            let (_, j2) = pose.joints(&Skeleton::hand());
            for p in j2.chunks(2) {
                let (x, y) = (p[0].round() as usize, p[1].round() as usize);
                let intensity = (0..3).map(|c| img[c * h * h + y * h + x] as f64).sum::<f64>() / 3.0;
                assert!(intensity > bg_mean, "{background:?}: {intensity} <= {bg_mean}");
            }
        }
    }
}

/// Camera depth of each joint, larger is nearer.
fn depths(pose: &PoseParams<f64>) -> Vec<f64> {
    let [a, b, c] = pose.axis_angle;
    let angle = (a * a + b * b + c * c).sqrt();
    let k = [a / angle, b / angle, c / angle];
    let (sn, cs) = angle.sin_cos();
    // Third row of cos I + sin [k]x + (1 - cos) k k^T.
    let row = [-sn * k[1] + (1.0 - cs) * k[2] * k[0], sn * k[0] + (1.0 - cs) * k[2] * k[1], cs + (1.0 - cs) * k[2] * k[2]];
    forward_kinematics(&Skeleton::hand(), &pose.theta, &pose.beta)
        .iter()
        .map(|p| pose.s * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]))
        .collect()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let u = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) };
    ((p[0] - a[0] - u * d[0]).powi(2) + (p[1] - a[1] - u * d[1]).powi(2)).sqrt()
}

#[test]
fn nearer_bone_wins_where_bones_cross() {
    let cfg = quiet();
    let h = cfg.image_size;
    let mut theta = vec![0.0; NUM_DOF];
    // Index finger swung across the middle finger.
    theta[4] = 0.9;
    theta[5] = 0.6;
    let pose = PoseParams { theta, beta: vec![1.0; NUM_BONES], axis_angle: [0.05, 0.0, 0.0], t: [32.0, 4.0], s: 40.0 };
    let skel = Skeleton::hand();
    let (_, j2) = pose.joints(&skel);
    let j2: Vec<[f64; 2]> = j2.chunks(2).map(|c| [c[0], c[1]]).collect();
    let z = depths(&pose);
    let img = render(&pose, &cfg, 0);

    // (start, end, radius, depth, colour) of every bone and joint disk.
    let mut shapes: Vec<([f64; 2], [f64; 2], f64, f64, [f32; 3])> = skel
        .joints
        .iter()
        .enumerate()
        .filter_map(|(j, s)| s.parent.map(|q| (j2[q], j2[j], cfg.thickness / 2.0, (z[q] + z[j]) / 2.0, bone_color(j, q))))
        .collect();
    shapes.extend((0..j2.len()).map(|j| (j2[j], j2[j], joint_radius(&cfg), z[j], joint_color(j))));

    let mut crossings = 0;
    for y in 0..h {
        for x in 0..h {
            let p = [x as f64, y as f64];
            let touching: Vec<_> = shapes
                .iter()
                .map(|s| (segment_distance(p, s.0, s.1), s))
                .filter(|(d, s)| *d < s.2 + 0.5)
                .collect();
            let Some(&(d, nearest)) = touching.iter().max_by(|a, b| a.1 .3.total_cmp(&b.1 .3)) else { continue };
            if d > nearest.2 - 0.5 {
                continue;
            }
            let want = nearest.4;
            if touching.iter().all(|(d, s)| s.4 == want || *d > s.2 - 0.5) {
                continue;
            }
            crossings += 1;
            let got = [img[y * h + x], img[h * h + y * h + x], img[2 * h * h + y * h + x]];
            assert_eq!(got, want, "pixel ({x}, {y})");
        }
    }
    assert!(crossings >= 10, "pose has only {crossings} crossing pixels");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = small(12, 4);
    let a = generate_dataset(&cfg, 1).unwrap().to_bytes();
    let b = generate_dataset(&cfg, 1).unwrap().to_bytes();
    assert_eq!(a, b);
    let c = generate_dataset(&small(12, 5), 1).unwrap().to_bytes();
    assert_ne!(a, c);
}

#[test]
fn parallel_and_serial_generation_agree() {
    let cfg = small(17, 8);
    let serial = generate_dataset(&cfg, 1).unwrap().to_bytes();
    let parallel = generate_dataset(&cfg, 4).unwrap().to_bytes();
    assert_eq!(serial, parallel);
}

#[test]
fn file_size_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ipd");
    let cfg = small(9, 2);
    let ds = generate_dataset(&cfg, 2).unwrap();
    ds.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = bytes[8..].iter().position(|&b| b == b'\n').unwrap() + 1 + 8;
    let h = 64;
    assert_eq!(bytes.len(), header_len + 9 * (3 * h * h + 42 + 63 + POSE_DIM) * 4);
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.header.split, Split { train: [0, 7], val: [7, 8], test: [8, 9] });
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ipd");
    let mut bytes = generate_dataset(&small(2, 0), 1).unwrap().to_bytes();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Dataset::read(&path), Err(dirnet::Error::Format { .. })));
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(Dataset::read(&path).is_err());
    let missing = dir.path().join("missing.ipd");
    let err = Dataset::read(&missing).unwrap_err();
    assert!(err.to_string().contains("missing.ipd"), "{err}");
}

#[test]
fn batches_have_network_shapes() {
    let ds = generate_dataset(&small(4, 1), 1).unwrap();
    let b = ds.batch::<f32>(&[3, 1]).unwrap();
    assert_eq!(b.images.shape(), &[2, 3, 64, 64]);
    assert_eq!(b.joints_2d.shape(), &[2, 21, 2]);
    assert_eq!(b.joints_3d.shape(), &[2, 21, 3]);
    assert_eq!(&b.joints_2d.data()[..42], &ds.samples[3].joints_2d[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_in_bounds_and_self_consistent(seed in any::<u64>(), index in 0usize..10_000) {
        let cfg = GenConfig { seed, ..Default::default() };
        let s = generate_sample(&cfg, index).unwrap();
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.joints_2d.iter().all(|&v| v >= 0.0 && v < 64.0));
        for (a, b) in reproject(&s).iter().zip(&s.joints_2d) {
            prop_assert!((a - *b as f64).abs() < 1e-5, "{} vs {}", a, b);
        }
        prop_assert_eq!(s.seed, sample_seed(seed, index as u64));
    }
}
