use super::*;
use crate::rng::substream;
use ndarray::Array4;

const EXT: Extent = Extent {
    height: 16,
    width: 16,
};

/// Deterministic 2-image batch with pixels on the 8-bit grid, including
/// exact 0.0 and 1.0 values.
fn checker_batch() -> ImageBatch {
    let mut data = Array4::<f32>::zeros((2, 1, 16, 16));
    for n in 0..2 {
        for y in 0..16 {
            for x in 0..16 {
                let b = (n * 91 + y * 37 + x * 13) % 256;
                data[(n, 0, y, x)] = b as f32 / 255.0;
            }
        }
    }
    data[(0, 0, 0, 0)] = 1.0;
    data[(0, 0, 0, 1)] = 0.0;
    ImageBatch::new(data, vec![0, 1]).unwrap()
}

fn op(kind: OpKind, levels: &[i32]) -> OpInstance {
    OpInstance::new(kind, levels.to_vec())
}

#[test]
fn registry_rejects_empty_and_duplicates() {
    assert!(matches!(
        Registry::new(vec![], EXT),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Registry::new(vec![OpKind::Rotate, OpKind::Rotate], EXT),
        Err(Error::Config(_))
    ));
}

#[test]
fn sampled_pipelines_stay_in_domain() {
    let reg = Registry::full(EXT);
    let mut rng = substream(11, "sampling", &[0]);
    for _ in 0..500 {
        let p = sample_pipeline(&mut rng, &reg, 2).unwrap();
        assert_eq!(p.ops.len(), 2);
        p.validate(EXT).unwrap();
        assert_ne!(p.ops[0].kind, p.ops[1].kind, "without replacement");
    }
}

#[test]
fn sampling_is_deterministic_in_the_stream() {
    let reg = Registry::full(EXT);
    let mut a = substream(3, "sampling", &[7]);
    let mut b = substream(3, "sampling", &[7]);
    for _ in 0..20 {
        assert_eq!(
            sample_pipeline(&mut a, &reg, 3).unwrap(),
            sample_pipeline(&mut b, &reg, 3).unwrap()
        );
    }
}

#[test]
fn oversized_n_ops_samples_with_replacement() {
    let reg = Registry::new(vec![OpKind::Rotate, OpKind::Cutout], EXT).unwrap();
    let mut rng = substream(5, "sampling", &[0]);
    let p = sample_pipeline(&mut rng, &reg, 5).unwrap();
    assert_eq!(p.ops.len(), 5);
    assert!(matches!(
        sample_pipeline(&mut rng, &reg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn kind_selection_is_uniform() {
    // Implementation draws vs an independent rejection sampler, plus a
    // chi-square test of the counts against the uniform expectation.
    let reg = Registry::full(EXT);
    let n: usize = 1_000_000;
    let mut counts = [0u64; 10];
    let mut rng = substream(42, "sampling-uniformity", &[]);
    for _ in 0..n {
        let p = sample_pipeline(&mut rng, &reg, 2).unwrap();
        for o in &p.ops {
            counts[OpKind::ALL.iter().position(|k| *k == o.kind).unwrap()] += 1;
        }
    }

    // Oracle: draw unordered distinct pairs by rejection from raw uniforms.
    let mut oracle_counts = [0u64; 10];
    let mut orng = substream(43, "uniform-pair-oracle", &[]);
    use rand::Rng;
    for _ in 0..n {
        let a = orng.gen_range(0..10usize);
        let b = loop {
            let b = orng.gen_range(0..10usize);
            if b != a {
                break b;
            }
        };
        oracle_counts[a] += 1;
        oracle_counts[b] += 1;
    }

    let slots = (2 * n) as f64;
    let expected = slots / 10.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 27.877, "chi2 = {chi2}, counts {counts:?}");

    for k in 0..10 {
        let f = counts[k] as f64 / slots;
        let fo = oracle_counts[k] as f64 / slots;
        assert!((f - 0.1).abs() < 0.001, "kind {k}: frequency {f}");
        assert!((f - fo).abs() < 0.0015, "kind {k}: {f} vs oracle {fo}");
    }
}

#[test]
fn magnitude_levels_are_uniform() {
    let reg = Registry::new(vec![OpKind::Rotate], EXT).unwrap();
    let mut rng = substream(17, "level-uniformity", &[]);
    let mut counts = [0u64; 10];
    let n = 200_000;
    for _ in 0..n {
        let p = sample_pipeline(&mut rng, &reg, 1).unwrap();
        counts[p.ops[0].levels[0] as usize] += 1;
    }
    let expected = n as f64 / 10.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 27.877, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn physical_tables_match_frozen_values() {
    let p = |k, i, l| level_to_physical(k, i, l, EXT).unwrap();

    assert_eq!(p(OpKind::Rotate, 0, 0), 0.0);
    assert_eq!(p(OpKind::Rotate, 0, 9), 30.0);

    // round(level * 0.3 * 16 / 9) pixels.
    let translate: Vec<f64> = (0..=9).map(|l| p(OpKind::TranslateX, 0, l)).collect();
    assert_eq!(translate, vec![0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0]);

    assert!((p(OpKind::ShearX, 0, 9) - 0.3).abs() < 1e-12);
    assert!((p(OpKind::Brightness, 0, 9) - 1.9).abs() < 1e-12);
    assert_eq!(p(OpKind::Brightness, 1, 0), -1.0);
    assert_eq!(p(OpKind::Brightness, 1, 1), 1.0);

    assert_eq!(p(OpKind::Solarize, 0, 0), 1.0);
    assert_eq!(p(OpKind::Solarize, 0, 9), 0.0);

    let bits: Vec<f64> = (0..=9).map(|l| p(OpKind::Posterize, 0, l)).collect();
    assert_eq!(bits, vec![8.0, 8.0, 8.0, 7.0, 7.0, 6.0, 6.0, 5.0, 5.0, 4.0]);

    assert_eq!(p(OpKind::Cutout, 0, 9), 8.0);
    assert_eq!(p(OpKind::Cutout, 1, 13), 13.0);
    assert_eq!(p(OpKind::Cutout, 2, 4), 4.0);
}

#[test]
fn out_of_domain_levels_are_rejected() {
    assert!(matches!(
        level_to_physical(OpKind::Rotate, 0, 10, EXT),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        level_to_physical(OpKind::Rotate, 1, 0, EXT),
        Err(Error::Domain(_))
    ));
    let batch = checker_batch();
    assert!(matches!(
        apply_op(&op(OpKind::Rotate, &[-1]), &batch),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        apply_op(&op(OpKind::Cutout, &[3, 16, 0]), &batch),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        apply_op(&op(OpKind::Rotate, &[3, 0]), &batch),
        Err(Error::Domain(_))
    ));
}

#[test]
fn magnitudes_are_monotone_toward_stronger_augmentation() {
    for kind in OpKind::ALL {
        let vals: Vec<f64> = (0..=9)
            .map(|l| level_to_physical(kind, 0, l, EXT).unwrap())
            .collect();
        match kind {
            // Threshold and retained bits shrink as the effect strengthens.
            OpKind::Solarize | OpKind::Posterize => {
                assert!(
                    vals.windows(2).all(|w| w[1] <= w[0]),
                    "{kind}: {vals:?} not non-increasing"
                );
            }
            _ => {
                assert!(
                    vals.windows(2).all(|w| w[1] >= w[0]),
                    "{kind}: {vals:?} not non-decreasing"
                );
            }
        }
    }
}

#[test]
fn adaptable_params_enumerates_in_order() {
    let p = Pipeline::new(vec![op(OpKind::Rotate, &[3]), op(OpKind::Cutout, &[5, 8, 8])]);
    let locs = adaptable_params(&p);
    let pairs: Vec<(usize, usize)> = locs.iter().map(|l| (l.op_index, l.param_index)).collect();
    assert_eq!(pairs, vec![(0, 0), (1, 0), (1, 1), (1, 2)]);

    let p = Pipeline::new(vec![op(OpKind::TranslateX, &[4, 1])]);
    let locs = adaptable_params(&p);
    assert_eq!(locs.len(), 1, "direction flag must not be adaptable");
    assert_eq!((locs[0].op_index, locs[0].param_index), (0, 0));

    assert!(adaptable_params(&Pipeline::default()).is_empty());
}

#[test]
fn identity_levels_are_bit_exact() {
    let batch = checker_batch();
    let identity_ops = vec![
        op(OpKind::Rotate, &[0]),
        op(OpKind::TranslateX, &[0, 0]),
        op(OpKind::TranslateX, &[0, 1]),
        op(OpKind::TranslateY, &[0, 0]),
        op(OpKind::TranslateY, &[0, 1]),
        op(OpKind::ShearX, &[0]),
        op(OpKind::ShearY, &[0]),
        op(OpKind::Brightness, &[0, 0]),
        op(OpKind::Brightness, &[0, 1]),
        op(OpKind::Contrast, &[0, 0]),
        op(OpKind::Contrast, &[0, 1]),
        op(OpKind::Posterize, &[0]),
        op(OpKind::Cutout, &[0, 3, 12]),
    ];
    for o in &identity_ops {
        let out = apply_op(o, &batch).unwrap();
        assert_eq!(
            out.data, batch.data,
            "{} at identity level changed pixels",
            o.kind
        );
        assert_eq!(out.labels, batch.labels);
    }

    let all_identity = Pipeline::new(identity_ops);
    let out = apply_pipeline(&all_identity, &batch).unwrap();
    assert_eq!(out.data, batch.data);

    let empty = apply_pipeline(&Pipeline::default(), &batch).unwrap();
    assert_eq!(empty.data, batch.data);
}

#[test]
fn solarize_level_zero_still_flips_saturated_pixels() {
    let batch = checker_batch();
    let out = apply_op(&op(OpKind::Solarize, &[0]), &batch).unwrap();
    // Pixel (0,0,0,0) was exactly 1.0 and flips to 0.0; everything below
    // the threshold is untouched.
    assert_eq!(out.data[(0, 0, 0, 0)], 0.0);
    assert_eq!(out.data[(0, 0, 0, 1)], batch.data[(0, 0, 0, 1)]);
    assert_eq!(out.data[(1, 0, 5, 5)], batch.data[(1, 0, 5, 5)]);
}

#[test]
fn apply_is_pure_and_repeatable() {
    let batch = checker_batch();
    let before = batch.data.clone();
    let o = op(OpKind::Rotate, &[7]);
    let a = apply_op(&o, &batch).unwrap();
    let b = apply_op(&o, &batch).unwrap();
    assert_eq!(batch.data, before, "input batch was mutated");
    assert_eq!(a.data, b.data, "same op, same input, different output");
}

#[test]
fn outputs_stay_in_unit_range() {
    let batch = checker_batch();
    for kind in OpKind::ALL {
        let specs = kind.param_specs(EXT);
        for level in 0..=9 {
            let levels: Vec<i32> = specs
                .iter()
                .map(|s| level.clamp(s.min_level, s.max_level))
                .collect();
            let out = apply_op(&op(kind, &levels), &batch).unwrap();
            for p in out.data.iter() {
                assert!(
                    p.is_finite() && (0.0..=1.0).contains(p),
                    "{kind} level {level} produced {p}"
                );
            }
        }
    }
}

#[test]
fn brightness_matches_closed_form() {
    let data = Array4::<f32>::from_elem((1, 1, 16, 16), 0.5);
    let batch = ImageBatch::new(data, vec![0]).unwrap();

    let up = apply_op(&op(OpKind::Brightness, &[9, 1]), &batch).unwrap();
    for p in up.data.iter() {
        assert!((p - 0.95).abs() < 1e-6, "expected 0.5 * 1.9, got {p}");
    }

    let down = apply_op(&op(OpKind::Brightness, &[9, 0]), &batch).unwrap();
    for p in down.data.iter() {
        assert!((p - 0.05).abs() < 1e-6, "expected 0.5 * 0.1, got {p}");
    }
}

#[test]
fn contrast_moves_pixels_about_the_image_mean() {
    let mut data = Array4::<f32>::from_elem((1, 1, 16, 16), 0.5);
    data[(0, 0, 0, 0)] = 0.9;
    data[(0, 0, 0, 1)] = 0.1;
    let batch = ImageBatch::new(data, vec![0]).unwrap();
    let out = apply_op(&op(OpKind::Contrast, &[9, 1]), &batch).unwrap();
    // Factor 1.9 pushes values away from the mean (which is 0.5 here by
    // symmetry): 0.5 + 1.9 * 0.4 clamps to 1, 0.5 - 1.9 * 0.4 clamps to 0.
    assert_eq!(out.data[(0, 0, 0, 0)], 1.0);
    assert_eq!(out.data[(0, 0, 0, 1)], 0.0);
    let mid = out.data[(0, 0, 5, 5)];
    assert!((mid - 0.5).abs() < 1e-6, "mean pixel moved to {mid}");
}

#[test]
fn translate_directions_and_round_trip() {
    let mut data = Array4::<f32>::zeros((1, 1, 16, 16));
    data[(0, 0, 8, 8)] = 1.0;
    let batch = ImageBatch::new(data, vec![0]).unwrap();

    // Level 9 is 5 pixels; direction level 1 shifts right, 0 shifts left.
    let right = apply_op(&op(OpKind::TranslateX, &[9, 1]), &batch).unwrap();
    assert_eq!(right.data[(0, 0, 8, 13)], 1.0);
    let left = apply_op(&op(OpKind::TranslateX, &[9, 0]), &batch).unwrap();
    assert_eq!(left.data[(0, 0, 8, 3)], 1.0);

    // Content away from the borders survives a there-and-back shift.
    let mut data = Array4::<f32>::zeros((1, 1, 16, 16));
    for y in 0..16 {
        for x in 5..11 {
            data[(0, 0, y, x)] = ((y * 31 + x * 7) % 200) as f32 / 255.0;
        }
    }
    let batch = ImageBatch::new(data, vec![0]).unwrap();
    let there = apply_op(&op(OpKind::TranslateX, &[9, 1]), &batch).unwrap();
    let back = apply_op(&op(OpKind::TranslateX, &[9, 0]), &there).unwrap();
    assert_eq!(back.data, batch.data);
}

#[test]
fn rotation_moves_content_to_the_forward_mapped_location() {
    let mut data = Array4::<f32>::zeros((1, 1, 16, 16));
    data[(0, 0, 2, 11)] = 1.0;
    let batch = ImageBatch::new(data, vec![0]).unwrap();
    let out = apply_op(&op(OpKind::Rotate, &[9]), &batch).unwrap();

    // Forward-map the bright pixel by +30 degrees about the center and
    // check the kernel (which uses the inverse map) lands within a pixel.
    let theta = 30.0f64.to_radians();
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (11.0 - 7.5, 2.0 - 7.5);
    let fx = c * dx - s * dy + 7.5;
    let fy = s * dx + c * dy + 7.5;

    let mut best = (0usize, 0usize, 0.0f32);
    for y in 0..16 {
        for x in 0..16 {
            if out.data[(0, 0, y, x)] > best.2 {
                best = (y, x, out.data[(0, 0, y, x)]);
            }
        }
    }
    assert_eq!(best.2, 1.0, "bright pixel lost");
    let dist = ((best.1 as f64 - fx).powi(2) + (best.0 as f64 - fy).powi(2)).sqrt();
    assert!(dist <= 1.0, "pixel at ({}, {}), expected near ({fy:.2}, {fx:.2})", best.0, best.1);
}

#[test]
fn identity_prefix_does_not_change_composition() {
    let batch = checker_batch();
    let with_identity = Pipeline::new(vec![
        op(OpKind::Rotate, &[0]),
        op(OpKind::Cutout, &[5, 8, 8]),
    ]);
    let alone = Pipeline::new(vec![op(OpKind::Cutout, &[5, 8, 8])]);
    let a = apply_pipeline(&with_identity, &batch).unwrap();
    let b = apply_pipeline(&alone, &batch).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn posterize_quantizes_to_retained_bits() {
    let mut data = Array4::<f32>::zeros((1, 1, 16, 16));
    data[(0, 0, 0, 0)] = 200.0 / 255.0;
    data[(0, 0, 0, 1)] = 1.0;
    let batch = ImageBatch::new(data, vec![0]).unwrap();
    // Level 9 retains 4 bits: 200 = 0xC8 -> 0xC0 = 192, 255 -> 0xF0 = 240.
    let out = apply_op(&op(OpKind::Posterize, &[9]), &batch).unwrap();
    assert_eq!(out.data[(0, 0, 0, 0)], 192.0 / 255.0);
    assert_eq!(out.data[(0, 0, 0, 1)], 240.0 / 255.0);
}

#[test]
fn solarize_full_strength_inverts_everything() {
    let batch = checker_batch();
    let out = apply_op(&op(OpKind::Solarize, &[9]), &batch).unwrap();
    for (o, i) in out.data.iter().zip(batch.data.iter()) {
        assert_eq!(*o, 1.0 - *i);
    }
}

#[test]
fn cutout_zeroes_a_clipped_square() {
    let data = Array4::<f32>::from_elem((1, 1, 16, 16), 1.0);
    let batch = ImageBatch::new(data, vec![0]).unwrap();

    let out = apply_op(&op(OpKind::Cutout, &[9, 8, 8]), &batch).unwrap();
    let zeros = out.data.iter().filter(|p| **p == 0.0).count();
    assert_eq!(zeros, 64, "side 8 patch fully inside the image");
    assert_eq!(out.data[(0, 0, 4, 4)], 0.0);
    assert_eq!(out.data[(0, 0, 3, 4)], 1.0);

    let corner = apply_op(&op(OpKind::Cutout, &[9, 0, 0]), &batch).unwrap();
    let zeros = corner.data.iter().filter(|p| **p == 0.0).count();
    assert_eq!(zeros, 16, "corner patch clips to 4x4");
}

#[test]
fn labels_pass_through_unchanged() {
    let batch = checker_batch();
    let mut rng = substream(23, "sampling", &[0]);
    let reg = Registry::full(EXT);
    for _ in 0..20 {
        let p = sample_pipeline(&mut rng, &reg, 2).unwrap();
        let out = apply_pipeline(&p, &batch).unwrap();
        assert_eq!(out.labels, batch.labels);
    }
}
