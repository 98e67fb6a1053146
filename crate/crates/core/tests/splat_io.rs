use proptest::prelude::*;
use xsplain_core::splat_io::*;

fn max_field_diff(a: &[GaussianPrimitive], b: &[GaussianPrimitive]) -> f32 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let p = (0..3).map(move |i| (x.position[i] - y.position[i]).abs());
            let s = (0..3).map(move |i| (x.scale[i] - y.scale[i]).abs());
            let r = (0..4).map(move |i| (x.rotation[i] - y.rotation[i]).abs());
            p.chain(s).chain(r).chain(std::iter::once((x.opacity - y.opacity).abs()))
        })
        .fold(0.0, f32::max)
}

#[test]
fn sphere_round_trip_is_lossless() {
    let s = generate_synthetic(ShapeClass::Sphere, 512, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, enc) in [("bin.ply", PlyEncoding::BinaryLittleEndian), ("ascii.ply", PlyEncoding::Ascii)] {
        let path = dir.path().join(name);
        write_ply_with(&s.primitives, &path, FeatureMode::Gaussian11, enc).unwrap();
        let back = load_ply(&path, FeatureMode::Gaussian11).unwrap();
        assert_eq!(back.len(), 512);
        let d = max_field_diff(&s.primitives, &back);
        assert!(d < 1e-6, "{name}: {d}");
    }
}

#[test]
fn point_cloud_round_trip() {
    let prims: Vec<_> = (0..40)
        .map(|i| {
            let t = i as f32 * 0.3;
            GaussianPrimitive::point([t.cos(), t.sin(), 0.1 * t], [0.0, 0.6, 0.8])
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pc.ply");
    write_ply(&prims, &path, FeatureMode::PointCloud6).unwrap();
    let back = load_ply(&path, FeatureMode::PointCloud6).unwrap();
    assert_eq!(back.len(), prims.len());
    for (a, b) in prims.iter().zip(&back) {
        assert_eq!(a.position, b.position);
        assert_eq!(a.normal(), b.normal());
    }
    let s = LabeledSample::new("pc", 0, FeatureMode::PointCloud6, back, 3).unwrap();
    let x = s.input_features::<f32>();
    // quaternion and opacity slots stay zero in point-cloud mode
    for r in 6..11 {
        assert!(x.row(r).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dataset_survives_disk() {
    let ds = Dataset::synthetic(
        &SyntheticConfig::default(),
        &[ShapeClass::Torus, ShapeClass::Cylinder],
        4,
        64,
        [0.5, 0.25, 0.25],
        11,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path().join("manifest.json"), ds.grid_size).unwrap();
    assert_eq!(back.split, ds.split);
    assert_eq!(back.class_names, ds.class_names);
    for s in &ds.samples {
        let b = back.get(&s.id).unwrap();
        assert_eq!(b.label, s.label);
        assert_eq!(b.voxel_index, s.voxel_index);
        assert!(max_field_diff(&s.primitives, &b.primitives) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counts_cover_every_primitive(seed in 0u64..1000, g in 1usize..9, class in 0usize..4) {
        let s = generate_synthetic(ShapeClass::ALL[class], 64, seed).unwrap().regrid(g).unwrap();
        prop_assert_eq!(s.voxel_counts.iter().map(|&n| n as usize).sum::<usize>(), s.len());
        prop_assert!(s.voxel_index.iter().all(|&v| (v as usize) < g * g * g));
    }

    #[test]
    fn stored_indices_are_reproducible(seed in 0u64..1000, g in 1usize..9) {
        let s = generate_synthetic(ShapeClass::Box, 48, seed).unwrap().regrid(g).unwrap();
        let again = assign_voxels(&s.normalized_positions, g).unwrap();
        prop_assert_eq!(&again.index, &s.voxel_index);
        prop_assert_eq!(&again.counts, &s.voxel_counts);
        // a detour through another grid does not disturb them
        prop_assert_eq!(s.regrid(g + 2).unwrap().regrid(g).unwrap().voxel_index, s.voxel_index.clone());
    }

    #[test]
    fn subsets_keep_stored_metadata(seed in 0u64..1000, drop in 0usize..27) {
        let s = generate_synthetic(ShapeClass::Sphere, 64, seed).unwrap().regrid(3).unwrap();
        let cut = s.without_voxels(&[drop]);
        prop_assert_eq!(cut.voxel_counts[drop], 0);
        prop_assert_eq!(cut.len(), s.len() - s.voxel_counts[drop] as usize);
        prop_assert_eq!(cut.extent, s.extent);
        for v in 0..27 {
            if v != drop {
                prop_assert_eq!(cut.voxel_counts[v], s.voxel_counts[v]);
            }
        }
    }
}
