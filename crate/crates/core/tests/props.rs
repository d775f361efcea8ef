//! Property tests for the library's structural invariants. Rendering is
//! deliberately absent here (a single frame costs ~100 ms; statistical
//! render checks live in the optics unit tests and the acceptance suite).

use proptest::prelude::*;

use specktile::dataset::{decode_spkl, encode_spkl, epoch_order, quantize_to_u8_levels, standardize};
use specktile::geom::{Point2, Point3};
use specktile::mechanics::{
    canonical_class_name, deform_scatterers, surface_indent, ContactStimulus, MaterialModel,
};
use specktile::model::Head;
use specktile::optics::{
    crop_origin, spectral_wavelengths_nm, zncc, CropSpec, Normalization, Provenance, SpeckleImage,
    CROP_SIZE,
};
use specktile::ops;
use specktile::scene::{image_sources, sample_scatterers, SceneConfig, SlabGeometry, FACE_MARGIN_MM};
use specktile::tensor::Tensor;
use specktile::training::regression_metrics;

fn image_from(h: usize, w: usize, pixels: Vec<f64>) -> SpeckleImage {
    SpeckleImage {
        h,
        w,
        pixels,
        normalization: Normalization::Raw,
        provenance: Provenance {
            scene_hash: String::new(),
            stimulus_hash: String::new(),
            noise_seed: 0,
        },
    }
}

fn slab() -> SlabGeometry {
    SlabGeometry {
        width_mm: 55.0,
        depth_mm: 61.0,
        thickness_mm: 3.0,
        refractive_index: 1.41,
    }
}

proptest! {
    #[test]
    fn spkl_round_trip_is_bit_exact(
        h in 1usize..6,
        w in 1usize..6,
        fill in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 36),
    ) {
        let pixels = fill[..h * w].to_vec();
        let bytes = encode_spkl(h, w, &pixels).unwrap();
        let (dh, dw, back) = decode_spkl(&bytes).unwrap();
        prop_assert_eq!((dh, dw), (h, w));
        let a: Vec<u32> = pixels.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantized_levels_are_whole_and_bounded(
        pixels in proptest::collection::vec(0.0f32..1e6, 1..64),
    ) {
        for q in quantize_to_u8_levels(&pixels) {
            prop_assert!((0.0..=255.0).contains(&q));
            prop_assert_eq!(q.fract(), 0.0);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 1usize..300, seed in any::<u64>(), epoch in 0u64..50) {
        let order = epoch_order(n, seed, epoch);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn zncc_is_affine_invariant_and_bounded(
        base in proptest::collection::vec(0.0f64..1.0, 16),
        gain in 0.1f64..10.0,
        offset in -5.0f64..5.0,
        other in proptest::collection::vec(0.0f64..1.0, 16),
    ) {
        let spread = base.iter().cloned().fold(f64::MIN, f64::max)
            - base.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        let ospread = other.iter().cloned().fold(f64::MIN, f64::max)
            - other.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(ospread > 1e-6);

        let a = image_from(4, 4, base.clone());
        let scaled = image_from(4, 4, base.iter().map(|v| gain * v + offset).collect());
        let b = image_from(4, 4, other);
        prop_assert!((zncc(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
        let r_ab = zncc(&a, &b).unwrap();
        let r_ba = zncc(&b, &a).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r_ab));
        prop_assert!((r_ab - r_ba).abs() < 1e-12);
    }

    #[test]
    fn standardize_centers_and_scales(
        pixels in proptest::collection::vec(0.0f32..100.0, 8..64),
    ) {
        let spread = pixels.iter().cloned().fold(f32::MIN, f32::max)
            - pixels.iter().cloned().fold(f32::MAX, f32::min);
        prop_assume!(spread > 1e-3);
        let z = standardize(&pixels);
        let n = z.len() as f64;
        let mean: f64 = z.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-4);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rmse_never_below_mae(
        truth in proptest::collection::vec(-10.0f64..10.0, 1..40),
        noise in proptest::collection::vec(-3.0f64..3.0, 40),
    ) {
        let predicted: Vec<f64> = truth
            .iter()
            .zip(&noise)
            .map(|(t, e)| t + e)
            .collect();
        let rep = regression_metrics(&truth, &predicted).unwrap();
        prop_assert!(rep.rmse >= rep.mae - 1e-12);
    }

    #[test]
    fn matmul_variants_match_naive(
        m in 1usize..5,
        k in 1usize..5,
        n in 1usize..5,
        fill in proptest::collection::vec(-2.0f64..2.0, 50),
    ) {
        let a: Vec<f64> = fill[..m * k].to_vec();
        let b: Vec<f64> = fill[25..25 + k * n].to_vec();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    want[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        let got = ops::matmul_nn(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
        // nt: b stored transposed (n, k)
        let mut bt = vec![0.0; k * n];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let got = ops::matmul_nt(&a, &bt, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
        // tn: a stored transposed (k, m)
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let got = ops::matmul_tn(&at, &b, k, m, n);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution(
        n in 1usize..3,
        c in 1usize..3,
        f in 1usize..3,
        h in 3usize..6,
        w in 3usize..6,
        fill in proptest::collection::vec(-1.0f64..1.0, 2 * 2 * 5 * 5 + 2 * 2 * 9 + 2),
    ) {
        let x = Tensor::from_vec(&[n, c, h, w], fill[..n * c * h * w].to_vec()).unwrap();
        let base = 2 * 2 * 5 * 5;
        let wt = Tensor::from_vec(&[f, c, 3, 3], fill[base..base + f * c * 9].to_vec()).unwrap();
        let b = Tensor::from_vec(&[f], fill[base + 2 * 2 * 9..base + 2 * 2 * 9 + f].to_vec()).unwrap();
        let y = ops::conv2d_forward(&x, &wt, &b).unwrap();
        prop_assert_eq!(&y.shape[..], &[n, f, h, w][..]);
        // same-size output, zero padding, kernel centred on each pixel
        for s in 0..n {
            for fi in 0..f {
                for r in 0..h {
                    for col in 0..w {
                        let mut acc = b.data[fi];
                        for ci in 0..c {
                            for kr in 0..3 {
                                for kc in 0..3 {
                                    let rr = r as isize + kr - 1;
                                    let cc = col as isize + kc - 1;
                                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                        continue;
                                    }
                                    let xi = ((s * c + ci) * h + rr as usize) * w + cc as usize;
                                    let wi = ((fi * c + ci) * 3 + kr as usize) * 3 + kc as usize;
                                    acc += x.data[xi] * wt.data[wi];
                                }
                            }
                        }
                        let yi = ((s * f + fi) * h + r) * w + col;
                        prop_assert!((y.data[yi] - acc).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_takes_window_maxima(
        fill in proptest::collection::vec(-10.0f64..10.0, 2 * 4 * 4),
    ) {
        let x = Tensor::from_vec(&[1, 2, 4, 4], fill.clone()).unwrap();
        let (y, _) = ops::maxpool_forward(&x).unwrap();
        prop_assert_eq!(&y.shape[..], &[1, 2, 2, 2][..]);
        for ci in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    let mut want = f64::MIN;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            want = want.max(fill[(ci * 4 + 2 * r + dr) * 4 + 2 * c + dc]);
                        }
                    }
                    prop_assert_eq!(y.data[(ci * 2 + r) * 2 + c], want);
                }
            }
        }
    }

    #[test]
    fn indent_is_bounded_and_monotone_in_force(
        f1 in 0.0f64..20.0,
        df in 0.0f64..20.0,
        px in 0.0f64..55.0,
        py in 0.0f64..61.0,
    ) {
        let geom = slab();
        let mat = MaterialModel::for_slab(&geom);
        let mk = |force| ContactStimulus::point_contact(Point2::new(27.5, 30.5), force);
        let at = Point2::new(px, py);
        let d1 = surface_indent(&mk(f1), &mat, at);
        let d2 = surface_indent(&mk(f1 + df), &mat, at);
        prop_assert!(d1 >= 0.0 && d1 <= mat.max_indent_mm + 1e-12);
        prop_assert!(d2 + 1e-12 >= d1, "indent must grow with force");
    }

    #[test]
    fn deformed_scatterers_stay_inside_the_slab(
        seed in any::<u64>(),
        force in 0.01f64..50.0,
        cx in 5.0f64..50.0,
        cy in 5.0f64..56.0,
    ) {
        let geom = slab();
        let field = sample_scatterers(&geom, 60, seed).unwrap();
        let stim = ContactStimulus::point_contact(Point2::new(cx, cy), force);
        let mat = MaterialModel::for_slab(&geom);
        let moved = deform_scatterers(&field, &stim, &mat, &geom).unwrap();
        prop_assert_eq!(moved.positions.len(), field.positions.len());
        for p in &moved.positions {
            prop_assert!(p.x >= 0.0 && p.x <= geom.width_mm);
            prop_assert!(p.y >= 0.0 && p.y <= geom.depth_mm);
            prop_assert!(p.z >= 0.0 && p.z <= geom.thickness_mm);
        }
    }

    #[test]
    fn sampled_scatterers_respect_face_margin(count in 1usize..200, seed in any::<u64>()) {
        let geom = slab();
        let field = sample_scatterers(&geom, count, seed).unwrap();
        prop_assert_eq!(field.len(), count);
        for p in &field.positions {
            prop_assert!(p.x >= FACE_MARGIN_MM && p.x <= geom.width_mm - FACE_MARGIN_MM);
            prop_assert!(p.y >= FACE_MARGIN_MM && p.y <= geom.depth_mm - FACE_MARGIN_MM);
            prop_assert!(p.z >= FACE_MARGIN_MM && p.z <= geom.thickness_mm - FACE_MARGIN_MM);
        }
        let again = sample_scatterers(&geom, count, seed).unwrap();
        prop_assert_eq!(field.positions, again.positions);
    }

    #[test]
    fn image_sources_mirror_across_the_bottom_face(
        x in 0.0f64..55.0,
        y in 0.0f64..61.0,
        z in 0.0f64..3.0,
    ) {
        let geom = slab();
        let p = Point3::new(x, y, z);
        prop_assert_eq!(image_sources(p, &geom, 0), vec![p]);
        let with_mirror = image_sources(p, &geom, 1);
        prop_assert_eq!(with_mirror.len(), 2);
        prop_assert_eq!(with_mirror[0], p);
        let m = with_mirror[1];
        prop_assert_eq!((m.x, m.y), (p.x, p.y));
        prop_assert!((m.z - (2.0 * geom.thickness_mm - p.z)).abs() < 1e-12);
    }

    #[test]
    fn crop_origins_keep_the_window_inside(
        h in CROP_SIZE..400usize,
        w in CROP_SIZE..400usize,
        r_frac in 0.0f64..1.0,
        c_frac in 0.0f64..1.0,
    ) {
        // explicit origin, clamped by parse rules to valid range by caller
        let r = ((h - CROP_SIZE) as f64 * r_frac) as usize;
        let c = ((w - CROP_SIZE) as f64 * c_frac) as usize;
        let (or, oc) = crop_origin(h, w, CropSpec::Origin { row: r, col: c }).unwrap();
        prop_assert!(or + CROP_SIZE <= h && oc + CROP_SIZE <= w);
        prop_assert_eq!((or, oc), (r, c));
    }

    #[test]
    fn class_name_canonicalization_is_idempotent(raw in "[A-Za-z _-]{1,24}") {
        let once = canonical_class_name(&raw);
        prop_assert_eq!(canonical_class_name(&once), once.clone());
        prop_assert!(!once.contains(' ') && !once.contains('_'));
    }
}

#[test]
fn spectral_samples_center_on_the_nominal_wavelength() {
    let mut source = SceneConfig::flat_default().source;
    source.spectral_samples = 5;
    source.linewidth_nm = 1.2;
    let lams = spectral_wavelengths_nm(&source);
    assert_eq!(lams.len(), 5);
    let mean: f64 = lams.iter().sum::<f64>() / lams.len() as f64;
    assert!((mean - source.wavelength_nm).abs() < 1e-9, "symmetric quantiles");
    assert!(lams.windows(2).all(|p| p[0] < p[1]), "quantile order");
}

#[test]
fn decoder_heads_pass_a_gradient_spot_check() {
    let rep = specktile::model::grad_check_decoder(Head::Classifier { classes: 3 }, 99).unwrap();
    assert!(rep.passed, "max rel {:.2e} at {}", rep.max_rel_err, rep.worst);
}
