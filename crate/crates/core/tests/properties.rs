//! Property-based checks of the module invariants.

mod common;

use lungfuse::eval::{avg_min_distance, extract_surface, min_distances, wilcoxon_signed_rank, SurfacePointSet};
use lungfuse::io::{parse_header, read_raw_metaimage, write_metaimage_as, ElementType};
use lungfuse::mask::{label_components, largest_component, lung_mask, morphology, BinaryMask, Connectivity, LungMaskParams, MorphOp};
use lungfuse::penalty::{bending_energy, correct_folding, inverse_consistency, min_determinant, volume_preservation};
use lungfuse::similarity::{nmi, joint_histogram, IntensityWindow, JointHistogram, SimilarityConfig};
use lungfuse::transform::{fit_affine_landmarks, AffineTransform, ControlLattice, Deformation, LandmarkSet};
use lungfuse::volume::{build_pyramid, crop_to_extent, downsample, upsample, Aabb, Grid, Volume};
use lungfuse::{Mat3, Vec3};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn random_mask(dims: [usize; 3]) -> impl Strategy<Value = BinaryMask> {
    let n = dims.iter().product::<usize>();
    proptest::collection::vec(proptest::bool::weighted(0.45), n)
        .prop_map(move |bits| BinaryMask::new(Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap(), bits).unwrap())
}

fn lattice_on(grid: &Grid, spacing: f64) -> ControlLattice {
    ControlLattice::covering(&grid.extent(), [spacing; 3]).unwrap()
}

fn field(l: &ControlLattice, f: impl Fn(Vec3) -> Vec3) -> ControlLattice {
    let [nx, ny, nz] = l.dims();
    let mut c = Vec::with_capacity(l.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                c.push(f(l.control_point(i, j, k)));
            }
        }
    }
    l.with_coefficients(c)
}

fn rotation(a: f64, b: f64, c: f64) -> Mat3 {
    nalgebra::Rotation3::from_euler_angles(a, b, c).into_inner()
}

proptest! {
    #![proptest_config(config())]

    // volume

    #[test]
    fn constant_survives_down_and_up(c in -2000.0f64..2000.0, f in 2usize..4) {
        let g = Grid::new([16, 18, 20], [0.7, 0.8, 0.9], [1.0, -2.0, 3.0]).unwrap();
        let v = Volume::constant(g, c).unwrap();
        let down = downsample(&v, f).unwrap();
        let up = upsample(&down, v.spacing()).unwrap();
        for x in up.data() {
            prop_assert!((x - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn trilinear_functions_are_reproduced(
        coef in proptest::array::uniform8(-5.0f64..5.0),
        p in (1.0f64..8.0, 1.0f64..7.0, 1.0f64..6.0),
    ) {
        let g = Grid::new([10, 9, 8], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let f = |x: f64, y: f64, z: f64| {
            coef[0] + coef[1] * x + coef[2] * y + coef[3] * z
                + coef[4] * x * y + coef[5] * y * z + coef[6] * x * z + coef[7] * x * y * z
        };
        let v = Volume::from_fn(g.clone(), |i, j, k| {
            let q = g.point(i, j, k);
            f(q[0], q[1], q[2])
        }).unwrap();
        let got = v.sample(&Vec3::new(p.0, p.1, p.2)).unwrap();
        let want = f(p.0, p.1, p.2);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn pyramid_spacing_doubles(levels in 1usize..4, s in 0.05f64..1.5) {
        let g = Grid::new([64, 64, 64], [s; 3], [0.0; 3]).unwrap();
        let v = Volume::constant(g.clone(), 1.0).unwrap();
        let m = BinaryMask::full(g);
        let pyr = build_pyramid(&v, &v, &m, &m, levels).unwrap();
        for pair in pyr.windows(2) {
            for a in 0..3 {
                let ratio = pair[0].target_spacing[a] / pair[1].target_spacing[a];
                prop_assert!((ratio - 2.0).abs() < 1e-12);
                prop_assert!((pair[0].reference.spacing()[a] - pair[0].floating.spacing()[a]).abs() < 1e-9);
            }
        }
        prop_assert!((pyr.last().unwrap().target_spacing[0] - s).abs() < 1e-12);
    }

    #[test]
    fn crop_is_idempotent(lo in vec3(4.0), size in (2.0f64..8.0, 2.0f64..8.0, 2.0f64..8.0)) {
        let g = Grid::new([12, 12, 12], [1.0; 3], [-4.0; 3]).unwrap();
        let v = Volume::from_fn(g, |i, j, k| (i * 100 + j * 10 + k) as f64).unwrap();
        let bbox = Aabb::new(lo, lo + Vec3::new(size.0, size.1, size.2));
        let once = crop_to_extent(&v, &bbox, 0).unwrap();
        let twice = crop_to_extent(&once, &bbox, 0).unwrap();
        prop_assert_eq!(once, twice);
    }

    // mask

    #[test]
    fn erosion_and_dilation_bracket(m in random_mask([7, 6, 5]), r in 1usize..3) {
        let e = morphology(&m, MorphOp::Erode, r).unwrap();
        let d = morphology(&m, MorphOp::Dilate, r).unwrap();
        for n in 0..m.bits().len() {
            prop_assert!(!e.bits()[n] || m.bits()[n]);
            prop_assert!(!m.bits()[n] || d.bits()[n]);
        }
    }

    #[test]
    fn opening_and_closing_are_idempotent(m in random_mask([7, 6, 5]), r in 1usize..3) {
        for op in [MorphOp::Open, MorphOp::Close] {
            let once = morphology(&m, op, r).unwrap();
            let twice = morphology(&once, op, r).unwrap();
            prop_assert_eq!(&once, &twice, "{:?}", op);
        }
    }

    #[test]
    fn largest_component_is_connected_subset(m in random_mask([6, 6, 6]), six in any::<bool>()) {
        prop_assume!(!m.is_empty());
        let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
        let big = largest_component(&m, conn).unwrap();
        for n in 0..m.bits().len() {
            prop_assert!(!big.bits()[n] || m.bits()[n]);
        }
        let (_, sizes) = label_components(&big, conn);
        prop_assert_eq!(sizes.iter().skip(1).filter(|&&n| n > 0).count(), 1);
    }

    #[test]
    fn lung_mask_avoids_boundary(
        centre in (6.0f64..10.0, 6.0f64..10.0, 6.0f64..10.0),
        r in 2.5f64..4.5,
        outer in any::<bool>(),
    ) {
        let g = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let c = Vec3::new(centre.0, centre.1, centre.2);
        // Soft tissue with an air ball inside and, optionally, air at the border.
        let v = Volume::from_fn(g.clone(), |i, j, k| {
            let p = g.point(i, j, k);
            if (p - c).norm() < r || (outer && (i == 0 || k == 15)) { -850.0 } else { 40.0 }
        }).unwrap();
        if let Ok(m) = lung_mask(&v, &LungMaskParams::default()) {
            prop_assert!(!m.touches_boundary());
        }
    }

    // transform

    #[test]
    fn partition_of_unity(v in vec3(10.0), x in vec3(1.0), s in 2.0f64..5.0) {
        let g = Grid::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let l = field(&lattice_on(&g, s), |_| v);
        let p = Vec3::new(5.5, 5.5, 5.5) + x * 3.0;
        let d = l.displacement(&p).unwrap();
        prop_assert!((d - v).norm() <= 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>(), x in vec3(3.0)) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let base = lattice_on(&g, 3.0);
        let l = base.with_coefficients(
            (0..base.len()).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        );
        let p = Vec3::new(5.5, 5.5, 5.5) + x;
        let j = l.jacobian(&p).unwrap();
        let h = 1e-3 * 3.0;
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let fd = (l.displacement(&(p + e)).unwrap() - l.displacement(&(p - e)).unwrap()) / (2.0 * h);
            // The Jacobian is of the full map, identity included.
            let col = j.column(a).into_owned() - e / h;
            prop_assert!((col - fd).norm() <= 1e-5 * col.norm().max(1e-3), "axis {a}: {col} vs {fd}");
        }
    }

    #[test]
    fn refinement_preserves_field(seed in any::<u64>(), x in vec3(4.0)) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let base = lattice_on(&g, 4.0);
        let l = base.with_coefficients(
            (0..base.len()).map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect(),
        );
        let fine = l.refine();
        let p = Vec3::new(7.5, 7.5, 7.5) + x;
        prop_assert!((l.displacement(&p).unwrap() - fine.displacement(&p).unwrap()).norm() <= 1e-9);
    }

    #[test]
    fn affine_fit_recovers_generator(
        angles in (-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5),
        scale in (0.8f64..1.2, 0.8f64..1.2, 0.8f64..1.2),
        t in vec3(20.0),
        pts in proptest::collection::vec(vec3(30.0), 5..9),
    ) {
        let m = rotation(angles.0, angles.1, angles.2) * Mat3::from_diagonal(&Vec3::new(scale.0, scale.1, scale.2));
        let a = AffineTransform::new(m, t).unwrap();
        let pairs: Vec<_> = pts.iter().map(|p| (*p, a.apply(p))).collect();
        let Ok(lm) = LandmarkSet::new(pairs) else { return Ok(()) };
        let Ok(fit) = fit_affine_landmarks(&lm) else { return Ok(()) };
        prop_assume!(fit.mode == lungfuse::transform::FitMode::Affine);
        prop_assert!((fit.transform.matrix() - m).norm() <= 1e-9, "{}", fit.transform.matrix() - m);
        prop_assert!((fit.transform.translation() - t).norm() <= 1e-9 * t.norm().max(1.0));
    }

    // similarity

    #[test]
    fn nmi_stays_in_unit_range(counts in proptest::collection::vec(0.0f64..10.0, 64)) {
        prop_assume!(counts.iter().sum::<f64>() > 0.0);
        let v = nmi(&JointHistogram::from_counts(8, counts).unwrap()).unwrap().value;
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&v), "{v}");
    }

    #[test]
    fn nmi_ignores_bin_relabelling(counts in proptest::collection::vec(0.0f64..10.0, 64), perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
        prop_assume!(counts.iter().sum::<f64>() > 0.0);
        let permuted: Vec<f64> = (0..64).map(|n| counts[(n / 8) * 8 + perm[n % 8]]).collect();
        let a = nmi(&JointHistogram::from_counts(8, counts).unwrap()).unwrap().value;
        let b = nmi(&JointHistogram::from_counts(8, permuted).unwrap()).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn intensity_offset_leaves_histogram_unchanged(offset in -500i32..500, seed in 0u64..1000) {
        let g = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let (v, _) = lungfuse::phantom::lung_phantom(&g, seed, 0.0).unwrap();
        let v = v.map(|x| x.round());
        let shifted = v.map(|x| x + offset as f64);
        let m = BinaryMask::full(g);
        let cfg = SimilarityConfig { min_samples: 0, ..SimilarityConfig::default() };
        let (lo, hi) = v.min_max();
        let w = IntensityWindow::new(lo, hi).unwrap();
        let ws = IntensityWindow::new(lo + offset as f64, hi + offset as f64).unwrap();
        let id = Deformation::identity();
        let a = joint_histogram(&v, &v, &id, &m, &cfg, Some([w, w])).unwrap();
        let b = joint_histogram(&shifted, &shifted, &id, &m, &cfg, Some([ws, ws])).unwrap();
        for (x, y) in a.counts().iter().zip(b.counts()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    // penalty

    #[test]
    fn affine_lattices_have_no_bending(m in proptest::array::uniform9(-0.2f64..0.2), t in vec3(3.0)) {
        let g = Grid::new([12, 11, 10], [1.0; 3], [0.0; 3]).unwrap();
        let a = Mat3::from_row_slice(&m);
        let l = field(&lattice_on(&g, 3.0), |p| a * p + t);
        prop_assert!(bending_energy(&l, &g).unwrap().value.abs() <= 1e-10);
    }

    #[test]
    fn rigid_lattices_preserve_volume(angles in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), t in vec3(3.0)) {
        let g = Grid::new([12, 11, 10], [1.0; 3], [0.0; 3]).unwrap();
        let r = rotation(angles.0, angles.1, angles.2);
        let l = field(&lattice_on(&g, 3.0), |p| r * p - p + t);
        prop_assert!(volume_preservation(&l, &g).unwrap().value.abs() <= 1e-10);
    }

    #[test]
    fn consistency_is_symmetric(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let base = lattice_on(&g, 3.0);
        let mut random = || base.with_coefficients(
            (0..base.len()).map(|_| Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect(),
        );
        let f = Deformation::new(AffineTransform::identity(), random());
        let b = Deformation::new(AffineTransform::identity(), random());
        let ab = inverse_consistency(&f, &b, &g, &g).unwrap().value;
        let ba = inverse_consistency(&b, &f, &g, &g).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1e-12));
    }

    #[test]
    fn folding_repair_leaves_positive_determinants(amp in 1.5f64..3.0, dir in vec3(1.0)) {
        prop_assume!(dir.norm() > 0.3);
        let g = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let mut l = lattice_on(&g, 4.0);
        let [nx, ny, _] = l.dims();
        l.coefficients_mut()[3 + 3 * nx + 3 * nx * ny] = dir.normalize() * amp * 4.0 * 3f64.sqrt();
        match correct_folding(&l, &g) {
            Ok((fixed, report)) => {
                prop_assert!(report.iterations <= 50);
                prop_assert!(min_determinant(&fixed, &g, 1).unwrap() > 1e-6);
            }
            Err(lungfuse::Error::FoldingNotRepaired { locations, .. }) => prop_assert!(!locations.is_empty()),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    // eval

    #[test]
    fn distance_to_self_is_zero(pts in proptest::collection::vec(vec3(10.0), 1..200)) {
        let s = SurfacePointSet { points: pts, source: "a".into() };
        let st = avg_min_distance(&s, &s).unwrap();
        prop_assert_eq!((st.mean, st.std, st.min, st.max), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn kd_tree_matches_brute_force(
        a in proptest::collection::vec(vec3(10.0), 1..300),
        b in proptest::collection::vec(vec3(10.0), 1..300),
    ) {
        let fast = min_distances(&a, &b).unwrap();
        let slow = common::brute_force_distances(&a, &b);
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_wilcoxon_is_scale_invariant(
        pairs in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 6..20),
        k in 0.01f64..100.0,
    ) {
        let (b, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (bs, as_): (Vec<f64>, Vec<f64>) = (b.iter().map(|x| x * k).collect(), a.iter().map(|x| x * k).collect());
        let (Ok(p), Ok(q)) = (wilcoxon_signed_rank(&b, &a), wilcoxon_signed_rank(&bs, &as_)) else { return Ok(()) };
        // Scaling can only merge ties through rounding, which random reals avoid.
        prop_assert!((p.p_value - q.p_value).abs() <= 1e-12);
    }

    #[test]
    fn surface_matches_neighbour_scan(m in random_mask([5, 4, 6])) {
        prop_assume!(!m.is_empty());
        let s = extract_surface(&m, "m").unwrap();
        let g = m.grid();
        let mut oracle = Vec::new();
        for (lin, &on) in m.bits().iter().enumerate() {
            if !on { continue; }
            let [i, j, k] = g.coords(lin);
            let c = g.point(i, j, k);
            for (di, dj, dk) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                let outside = ni < 0 || nj < 0 || nk < 0 || ni >= 5 || nj >= 4 || nk >= 6;
                if outside || !m.get(ni as usize, nj as usize, nk as usize) {
                    oracle.push(c + Vec3::new(di as f64, dj as f64, dk as f64) * 0.5);
                }
            }
        }
        let key = |p: &Vec3| [p[0], p[1], p[2]].map(|x| (x * 2.0).round() as i64);
        let mut got: Vec<_> = s.points.iter().map(key).collect();
        let mut want: Vec<_> = oracle.iter().map(key).collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }

    // io

    #[test]
    fn metaimage_round_trips(
        dims in (2usize..5, 2usize..5, 2usize..5),
        spacing in (0.01f64..3.0, 0.01f64..3.0, 0.01f64..3.0),
        origin in vec3(100.0),
        seed in any::<u64>(),
        ty in 0usize..4,
        msb in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ty = [ElementType::UChar, ElementType::Short, ElementType::Float, ElementType::Double][ty];
        let g = Grid::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2], [origin[0], origin[1], origin[2]]).unwrap();
        let values = (0..g.len()).map(|_| match ty {
            ElementType::UChar => rng.gen_range(0..=255) as f64,
            ElementType::Short => rng.gen_range(-32768..=32767) as f64,
            ElementType::Float => f64::from(rng.gen::<f32>() * 1e4 - 5e3),
            ElementType::Double => rng.gen_range(-1e6..1e6),
        }).collect();
        let v = Volume::new(g.clone(), values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mha");
        write_metaimage_as(&v, &path, ty, msb).unwrap();
        let raw = read_raw_metaimage(&path).unwrap();
        prop_assert_eq!(raw.header.dims, g.dims);
        prop_assert_eq!(raw.header.spacing, g.spacing);
        prop_assert_eq!(raw.header.offset, g.origin);
        for (a, b) in raw.values.iter().zip(v.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_header(&bytes);
    }

    #[test]
    fn header_lines_with_garbage_report_line(line in 1usize..5, junk in "[a-z ]{1,20}") {
        prop_assume!(!junk.trim().is_empty());
        let mut lines = vec!["NDims = 3", "DimSize = 2 2 2", "ElementType = MET_UCHAR", "ElementSpacing = 1 1 1"];
        lines.insert(line - 1, &junk);
        let text = lines.join("\n") + "\nElementDataFile = LOCAL\n";
        match parse_header(text.as_bytes()) {
            Err(e) => {
                let needle = format!("line {line}");
                prop_assert!(e.to_string().contains(&needle), "{}", e);
            }
            Ok(_) => prop_assert!(false, "garbage accepted"),
        }
    }
}
