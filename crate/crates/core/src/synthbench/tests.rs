use super::*;

#[test]
fn scenes_are_deterministic_and_labels_in_range() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let (s1, l1) = gen_scene(seed, &cfg).unwrap();
        let (s2, l2) = gen_scene(seed, &cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert!(l1.labels.iter().all(|&l| (l as usize) < SceneConfig::N_CLASSES));
        let n_fg = s1.layout.len() - 3;
        assert!((2..=6).contains(&n_fg));
    }
    assert!(gen_scene(0, &SceneConfig { h: 48, w: 64 }).is_err());
}

#[test]
fn class_frequencies_over_many_scenes() {
    let cfg = SceneConfig::default();
    let mut present = [0usize; 6];
    for seed in 0..1000 {
        let (_, labels) = gen_scene(seed, &cfg).unwrap();
        let mut seen = [false; 6];
        labels.labels.iter().for_each(|&l| seen[l as usize] = true);
        for c in 0..6 {
            present[c] += seen[c] as usize;
        }
    }
    for c in 0..3 {
        assert!(present[c] >= 950, "band class {c}: {present:?}");
    }
    for c in 3..6 {
        assert!(present[c] >= 500, "object class {c}: {present:?}");
    }
}

#[test]
fn identity_style_keeps_base_render() {
    let (scene, _) = gen_scene(3, &SceneConfig::default()).unwrap();
    let base = render_base(&scene);
    assert_eq!(apply_style(&scene, &DomainStyle::IDENTITY, 99), base);
}

#[test]
fn brightness_shifts_mean_exactly() {
    let gray = Image::filled(32, 32, [0.5; 3]);
    let style = DomainStyle {
        brightness: 0.2,
        ..DomainStyle::IDENTITY
    };
    let out = stylize(&gray, &style, 1);
    assert!((out.mean() - gray.mean() - 0.2).abs() <= 1e-7);
}

#[test]
fn domains_share_labels_but_not_pixels() {
    let cfg = SceneConfig::default();
    let clear = generate_domain("clear", &domain_preset("clear").unwrap(), 10, 8, &cfg).unwrap();
    for (name, style) in DOMAIN_PRESETS.iter().skip(1) {
        let other = generate_domain(name, style, 10, 8, &cfg).unwrap();
        for (a, b) in clear.samples.iter().zip(&other.samples) {
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.image, b.image);
        }
        assert_eq!(clear.class_histogram(), other.class_histogram());
        let (ma, mb) = (mean(&clear), mean(&other));
        assert!((ma - mb).abs() > 1e-3, "{name}: means {ma} vs {mb}");
    }
}

fn mean(ds: &Dataset) -> f64 {
    let n: usize = ds.samples.iter().map(|s| s.image.len()).sum();
    ds.samples
        .iter()
        .flat_map(|s| s.image.iter())
        .map(|&v| f64::from(v))
        .sum::<f64>()
        / n as f64
}

#[test]
fn presets_are_valid() {
    for (name, s) in DOMAIN_PRESETS {
        s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert!(domain_preset("FOG").is_some());
    assert!(domain_preset("snow").is_none());
    let bad = DomainStyle {
        contrast: 2.0,
        ..DomainStyle::IDENTITY
    };
    assert!(bad.validate().is_err());
}

#[test]
fn dataset_round_trip_and_size() {
    let cfg = SceneConfig::default();
    let ds = generate_domain("fog", &domain_preset("fog").unwrap(), 0, 10, &cfg).unwrap();
    let bytes = ds.to_bytes().unwrap();
    // 64·64·3 f32 values (49152 bytes) plus 4096 label bytes per sample.
    assert_eq!(bytes.len(), 28 + 10 * (64 * 64 * 3 * 4 + 4096));
    assert_eq!(bytes.len(), encoded_len(10, 64, 64));
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fog.cmsb");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert!(matches!(
        read_dataset(&dir.path().join("missing.cmsb")),
        Err(DatasetError::Io(_))
    ));
}

#[test]
fn dataset_errors_are_typed() {
    let cfg = SceneConfig { h: 32, w: 32 };
    let ds = generate_domain("clear", &domain_preset("clear").unwrap(), 0, 2, &cfg).unwrap();
    let bytes = ds.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(
        Dataset::from_bytes(&bad),
        Err(DatasetError::UnsupportedVersion(7))
    ));
    for cut in [0, 2, 20, 27, 28, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            Dataset::from_bytes(&bytes[..cut]),
            Err(DatasetError::Truncated)
        ));
    }
    let mut bad = bytes.clone();
    bad[20] = 1;
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::Malformed(_))));
    let mut bad = bytes;
    bad.push(0);
    assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::Malformed(_))));
}
