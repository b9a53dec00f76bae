//! Dataset loading, augmentation, and synthetic-generator behavior.

use irstd_core::data::{
    augment, nearest_resize_mask, read_manifest, synth_generate, synth_sample, write_dataset,
    Dataset, DatasetOptions, Sample, SynthConfig,
};
use irstd_core::Error;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;

fn tiny_sample(id: &str, h: usize, w: usize) -> Sample {
    let image = ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| {
        ((ix[1] * w + ix[2]) as f64) / ((h * w) as f64)
    });
    let mask = Array2::from_shape_fn((h, w), |(i, j)| i == h / 2 && j == w / 2);
    Sample {
        id: id.to_string(),
        image,
        mask,
    }
}

// ------------------------------------------------------------- manifests

#[test]
fn manifest_skips_comments_and_blanks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.txt");
    fs::write(&path, "# header\na\n\n  b \n# tail\nc\n").unwrap();
    assert_eq!(read_manifest(&path).unwrap(), vec!["a", "b", "c"]);
}

#[test]
fn dataset_yields_manifest_order_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<Sample> = (0..4).map(|i| tiny_sample(&format!("s{i}"), 8, 8)).collect();
    write_dataset(dir.path(), &samples).unwrap();
    // Reverse the manifest: load order must follow it, not the file system.
    fs::write(dir.path().join("split.txt"), "s3\ns1\ns0\ns2\n").unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("split.txt"),
        DatasetOptions::default(),
    )
    .unwrap();
    let ids: Vec<String> = ds.iter().map(|s| s.unwrap().id).collect();
    assert_eq!(ids, vec!["s3", "s1", "s0", "s2"]);
}

#[test]
fn exclusion_list_drops_ids_preserving_order() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<Sample> = (0..4).map(|i| tiny_sample(&format!("s{i}"), 8, 8)).collect();
    write_dataset(dir.path(), &samples).unwrap();
    fs::write(dir.path().join("bad.txt"), "s1\n# reason: sensor glitch\ns3\n").unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("manifest.txt"),
        DatasetOptions {
            exclude: Some(dir.path().join("bad.txt")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(ds.ids(), &["s0".to_string(), "s2".to_string()]);
}

#[test]
fn missing_mask_error_names_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![tiny_sample("lonely", 8, 8)];
    write_dataset(dir.path(), &samples).unwrap();
    fs::remove_file(dir.path().join("masks/lonely.png")).unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("manifest.txt"),
        DatasetOptions::default(),
    )
    .unwrap();
    let err = ds.load(0).unwrap_err();
    match err {
        Error::Data(msg) => assert!(msg.contains("lonely"), "message was: {msg}"),
        other => panic!("expected Data error, got {other:?}"),
    }
}

#[test]
fn gray_masks_binarize_at_half() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    let img = image::GrayImage::from_pixel(4, 4, image::Luma([10u8]));
    img.save(dir.path().join("images/g.png")).unwrap();
    let mut m = image::GrayImage::new(4, 4);
    m.put_pixel(0, 0, image::Luma([255])); // binary on
    m.put_pixel(1, 0, image::Luma([200])); // above threshold
    m.put_pixel(2, 0, image::Luma([100])); // below threshold
    m.put_pixel(3, 0, image::Luma([128])); // exactly at threshold
    m.save(dir.path().join("masks/g.png")).unwrap();
    fs::write(dir.path().join("manifest.txt"), "g\n").unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("manifest.txt"),
        DatasetOptions::default(),
    )
    .unwrap();
    let s = ds.load(0).unwrap();
    assert!(s.mask[(0, 0)]);
    assert!(s.mask[(0, 1)]);
    assert!(!s.mask[(0, 2)]);
    assert!(s.mask[(0, 3)]);
    assert_eq!(s.mask.iter().filter(|&&v| v).count(), 3);
}

#[test]
fn load_resize_option_applies_to_both_image_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![tiny_sample("r", 10, 14)];
    write_dataset(dir.path(), &samples).unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("manifest.txt"),
        DatasetOptions {
            resize_to: Some((16, 16)),
            ..Default::default()
        },
    )
    .unwrap();
    let s = ds.load(0).unwrap();
    assert_eq!(s.image.shape(), &[1, 16, 16]);
    assert_eq!(s.mask.dim(), (16, 16));
    // Nearest-neighbour keeps the mask binary and non-empty.
    assert!(s.mask.iter().any(|&v| v));
}

#[test]
fn write_then_load_roundtrip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 7,
        ..Default::default()
    };
    let originals = synth_generate(&cfg, 3).unwrap();
    write_dataset(dir.path(), &originals).unwrap();
    let ds = Dataset::open(
        dir.path(),
        &dir.path().join("manifest.txt"),
        DatasetOptions::default(),
    )
    .unwrap();
    let loaded = ds.load_all().unwrap();
    assert_eq!(loaded.len(), originals.len());
    for (a, b) in originals.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask, "masks roundtrip exactly");
        let max_err = a
            .image
            .iter()
            .zip(b.image.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "8-bit quantization bound, got {max_err}");
    }
}

// ----------------------------------------------------------- augmentation

#[test]
fn unit_scale_full_crop_is_identity() {
    let s = tiny_sample("id", 12, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = augment(&s, (1.0, 1.0), (12, 12), &mut rng);
    assert_eq!(out.image, s.image);
    assert_eq!(out.mask, s.mask);
}

#[test]
fn augment_shapes_follow_the_crop() {
    let s = tiny_sample("id", 20, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let out = augment(&s, (0.5, 2.0), (16, 16), &mut rng);
        assert_eq!(out.image.shape(), &[1, 16, 16]);
        assert_eq!(out.mask.dim(), (16, 16));
        out.validate().unwrap();
    }
}

#[test]
fn augment_pads_with_zeros_when_scaled_below_crop() {
    // 8x8 scaled by 0.5 -> 4x4, cropped at 16x16: everything fits in the
    // top-left quadrant and the rest is zero / false.
    let mut s = tiny_sample("id", 8, 8);
    s.image.fill(1.0);
    s.mask.fill(true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = augment(&s, (0.5, 0.5), (16, 16), &mut rng);
    for i in 0..16 {
        for j in 0..16 {
            let inside = i < 4 && j < 4;
            assert_eq!(out.mask[(i, j)], inside, "at ({i},{j})");
            if !inside {
                assert_eq!(out.image[IxDyn(&[0, i, j])], 0.0);
            }
        }
    }
}

#[test]
fn augment_keeps_image_and_mask_aligned() {
    // A bright block with a matching mask: after augmentation, every
    // interior masked pixel (all 8 neighbours also masked) must still sit
    // on bright image content.
    let h = 32;
    let mut image = ArrayD::zeros(IxDyn(&[1, h, h]));
    let mut mask = Array2::from_elem((h, h), false);
    for i in 10..20 {
        for j in 14..24 {
            image[IxDyn(&[0, i, j])] = 1.0;
            mask[(i, j)] = true;
        }
    }
    let s = Sample {
        id: "block".into(),
        image,
        mask,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let out = augment(&s, (0.6, 1.8), (24, 24), &mut rng);
        for i in 1..23usize {
            for j in 1..23usize {
                let interior = (-1i64..=1)
                    .flat_map(|di| (-1i64..=1).map(move |dj| (di, dj)))
                    .all(|(di, dj)| {
                        out.mask[((i as i64 + di) as usize, (j as i64 + dj) as usize)]
                    });
                if interior {
                    let v = out.image[IxDyn(&[0, i, j])];
                    assert!(v > 0.9, "masked interior pixel ({i},{j}) has image {v}");
                }
            }
        }
    }
}

#[test]
fn augment_streams_are_deterministic_per_seed() {
    let s = tiny_sample("id", 16, 16);
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10)
            .map(|_| augment(&s, (0.5, 2.0), (12, 12), &mut rng))
            .collect::<Vec<_>>()
    };
    let a = run(9);
    let b = run(9);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
    }
    let c = run(10);
    assert!(
        a.iter().zip(&c).any(|(x, y)| x.image != y.image || x.mask != y.mask),
        "different seeds should differ somewhere"
    );
}

#[test]
fn nearest_mask_resize_preserves_binarity_and_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let m = Array2::from_shape_fn((9, 13), |_| rand::Rng::gen_bool(&mut rng, 0.3));
        let up = nearest_resize_mask(&m, 27, 39);
        let down = nearest_resize_mask(&up, 9, 13);
        assert_eq!(down, m, "integer up/down nearest resize roundtrips");
    }
}

// -------------------------------------------------------------- synthesis

#[test]
fn synth_is_deterministic_per_seed_and_index() {
    let cfg = SynthConfig::default();
    let a = synth_sample(&cfg, 5);
    let b = synth_sample(&cfg, 5);
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask, b.mask);
    let c = synth_sample(&cfg, 6);
    assert!(a.image != c.image, "different indices differ");
    let other = SynthConfig {
        seed: 99,
        ..Default::default()
    };
    let d = synth_sample(&other, 5);
    assert!(a.image != d.image, "different seeds differ");
}

#[test]
fn synth_zero_targets_gives_empty_mask() {
    let cfg = SynthConfig {
        n_targets: (0, 0),
        ..Default::default()
    };
    for i in 0..5 {
        let s = synth_sample(&cfg, i);
        assert!(s.mask.iter().all(|&v| !v));
        s.validate().unwrap();
    }
}

#[test]
fn synth_component_area_tracks_the_radius() {
    // The half-peak disk of radius r covers ~pi r^2 pixels; the contract
    // bounds it by [pi (r/2)^2, pi (2r)^2].
    for &r in &[1.5f64, 2.5, 4.0] {
        let cfg = SynthConfig {
            n_targets: (1, 1),
            radius: (r, r),
            height: 64,
            width: 64,
            ..Default::default()
        };
        for i in 0..10 {
            let s = synth_sample(&cfg, i);
            let area = s.mask.iter().filter(|&&v| v).count() as f64;
            let lo = std::f64::consts::PI * (r / 2.0) * (r / 2.0);
            let hi = std::f64::consts::PI * (2.0 * r) * (2.0 * r);
            assert!(
                area >= lo && area <= hi,
                "r={r} index={i}: area {area} outside [{lo:.2}, {hi:.2}]"
            );
        }
    }
}

#[test]
fn synth_mask_is_the_half_peak_set() {
    // With a single target and a flat contrast, recompute the mask from
    // first principles: distance to the blob centre below r.
    let r = 3.0;
    let cfg = SynthConfig {
        n_targets: (1, 1),
        radius: (r, r),
        contrast: (0.8, 0.8),
        clutter_octaves: 1,
        ..Default::default()
    };
    let s = synth_sample(&cfg, 0);
    // Recover the centre as the masked centroid.
    let pts: Vec<(usize, usize)> = s
        .mask
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((i, j), _)| (i, j))
        .collect();
    assert!(!pts.is_empty());
    let cy = pts.iter().map(|p| p.0 as f64).sum::<f64>() / pts.len() as f64;
    let cx = pts.iter().map(|p| p.1 as f64).sum::<f64>() / pts.len() as f64;
    for ((i, j), &v) in s.mask.indexed_iter() {
        let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
        if d < r - 1.0 {
            assert!(v, "pixel ({i},{j}) at distance {d:.2} should be masked");
        }
        if d > r + 1.0 {
            assert!(!v, "pixel ({i},{j}) at distance {d:.2} should be clear");
        }
    }
}

#[test]
fn synth_images_stay_in_unit_range_and_validate() {
    let cfg = SynthConfig {
        n_targets: (2, 4),
        contrast: (0.8, 0.9),
        ..Default::default()
    };
    for s in synth_generate(&cfg, 8).unwrap() {
        s.validate().unwrap();
        assert_eq!(s.image.shape(), &[1, 64, 64]);
    }
}

#[test]
fn synth_target_count_respects_the_range() {
    use irstd_core::metrics::connected_components;
    let cfg = SynthConfig {
        n_targets: (2, 2),
        radius: (2.0, 3.0),
        ..Default::default()
    };
    let mut seen_two = 0;
    for i in 0..10 {
        let s = synth_sample(&cfg, i);
        let comps = connected_components(&s.mask);
        assert!(comps.len() <= 2);
        if comps.len() == 2 {
            seen_two += 1;
        }
    }
    // Placement rejection can occasionally drop a target; most runs keep both.
    assert!(seen_two >= 8, "only {seen_two}/10 kept both targets");
}

#[test]
fn synth_config_validation_rejects_bad_ranges() {
    let base = SynthConfig::default();
    let bad_radius = SynthConfig {
        radius: (0.5, 2.0),
        ..base.clone()
    };
    assert!(bad_radius.validate().is_err());
    let huge_radius = SynthConfig {
        radius: (2.0, 60.0),
        ..base.clone()
    };
    assert!(huge_radius.validate().is_err());
    let bad_contrast = SynthConfig {
        contrast: (0.0, 0.5),
        ..base.clone()
    };
    assert!(bad_contrast.validate().is_err());
    let inverted = SynthConfig {
        n_targets: (3, 1),
        ..base.clone()
    };
    assert!(inverted.validate().is_err());
    assert!(base.validate().is_ok());
}

#[test]
fn with_channels_replicates_grayscale() {
    let s = tiny_sample("c", 6, 6);
    let x = s.with_channels(3);
    assert_eq!(x.shape(), &[3, 6, 6]);
    for c in 0..3 {
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(x[IxDyn(&[c, i, j])], s.image[IxDyn(&[0, i, j])]);
            }
        }
    }
}
