//! File-format round trips and files written by an independent NIfTI implementation.

use std::path::PathBuf;

use eddycorr::dataset::GradientTable;
use eddycorr::io::{read_bvals_bvecs, read_nifti, read_nifti_header, read_transform, write_bvals_bvecs, write_nifti, write_transform};
use eddycorr::transform::{EddyMotionTransform, N_PARAMS};
use eddycorr::volume::{Geometry, Volume3};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Written by nibabel: float32, dims 5×4×3×2, pixdim (1.5, 2, 2.5), sform translation (−3, −4, 5),
/// value at (i, j, k, t) = 0.5·(i + 5j + 20k + 60t) − 3.
#[test]
fn float32_fixture_matches_its_documented_header() {
    let p = fixture("float32_5x4x3x2.nii.gz");
    let h = read_nifti_header(&p).unwrap();
    assert_eq!(&h.dim[..5], &[4, 5, 4, 3, 2]);
    let vols = read_nifti(&p).unwrap();
    assert_eq!(vols.len(), 2);
    let g = vols[0].geometry();
    assert_eq!(g.dims, [5, 4, 3]);
    assert_eq!(g.spacing, [1.5, 2.0, 2.5]);
    assert_eq!(g.origin, [-3.0, -4.0, 5.0]);
    for (t, v) in vols.iter().enumerate() {
        for [i, j, k] in g.voxels() {
            let want = 0.5 * (i + 5 * j + 20 * k + 60 * t) as f32 - 3.0;
            assert_eq!(v.get(i, j, k), want);
        }
    }
}

/// Written by nibabel from the values 0.25·n − 7 (n the x-fastest linear index), stored as
/// int16 with a slope and intercept of its own choosing; pixdim (2, 2, 3).
#[test]
fn scaled_int16_fixture_decodes_to_the_original_values() {
    let p = fixture("int16_scaled_6x5x4.nii");
    let h = read_nifti_header(&p).unwrap();
    assert_eq!(h.datatype, 4);
    assert!(h.scl_slope > 0.0 && h.scl_slope < 1e-3);
    let vols = read_nifti(&p).unwrap();
    assert_eq!(vols.len(), 1);
    assert_eq!(vols[0].geometry().dims, [6, 5, 4]);
    assert_eq!(vols[0].geometry().spacing, [2.0, 2.0, 3.0]);
    for (n, &x) in vols[0].data().iter().enumerate() {
        let want = 0.25 * n as f64 - 7.0;
        assert!((x as f64 - want).abs() <= 0.5 * h.scl_slope as f64 + 1e-5, "{n}: {x} vs {want}");
    }
}

fn small_geometry() -> impl Strategy<Value = Geometry> {
    // The header stores spacing and origin as f32.
    (1usize..6, 1usize..6, 1usize..5, 0.5f32..4.0, -50.0f32..50.0).prop_map(|(nx, ny, nz, s, o)| {
        let f = |x: f32| x as f64;
        Geometry::new([nx, ny, nz], [f(s), f(s * 1.25), f(s * 0.75)], [f(o), f(-o), f(0.5 * o)]).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nifti_float32_round_trip_is_bitwise(
        geom in small_geometry(),
        n_vols in 1usize..4,
        ped in 0usize..3,
        gz in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let vols: Vec<Volume3> = (0..n_vols)
            .map(|t| {
                let mut s = seed.wrapping_add(t as u32 * 7919);
                Volume3::from_fn(geom, ped, |_| {
                    s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                    f32::from_bits(s & 0x7f7f_ffff | (s & 0x8000_0000)) as f64
                })
                .unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_nifti(&p, &vols).unwrap();
        let back = read_nifti(&p).unwrap();
        prop_assert_eq!(back.len(), vols.len());
        for (a, b) in back.iter().zip(&vols) {
            prop_assert_eq!(a.geometry(), b.geometry());
            prop_assert_eq!(a.ped_axis(), ped);
            let bits = |v: &Volume3| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn gradient_table_round_trips(
        rows in prop::collection::vec((0u8..4, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20),
    ) {
        let mut bvals = Vec::new();
        let mut bvecs = Vec::new();
        for (shell, x, y, z) in rows {
            let n = (x * x + y * y + z * z).sqrt();
            if shell == 0 || n < 0.1 {
                bvals.push(0.0);
                bvecs.push([0.0; 3]);
            } else {
                bvals.push(650.0 * shell as f64);
                bvecs.push([x / n, y / n, z / n]);
            }
        }
        let table = GradientTable::new(bvals, bvecs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pb, pv) = (dir.path().join("bvals"), dir.path().join("bvecs"));
        write_bvals_bvecs(&table, &pb, &pv).unwrap();
        let back = read_bvals_bvecs(&pb, &pv).unwrap();
        prop_assert_eq!(back.len(), table.len());
        for i in 0..table.len() {
            let ((b0, g0), (b1, g1)) = (table.entry(i), back.entry(i));
            prop_assert!((b0 - b1).abs() <= 1e-6);
            for a in 0..3 {
                prop_assert!((g0[a] - g1[a]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn transform_json_round_trip_preserves_the_field(
        params in prop::array::uniform16(-0.02f64..0.02),
        ped in 0usize..3,
    ) {
        let g = Geometry::new([10, 9, 7], [2.0, 2.0, 2.5], [-9.0, -8.0, -7.5]).unwrap();
        let mut p = params;
        for x in p.iter_mut().skip(13) {
            *x *= 50.0;
        }
        assert_eq!(p.len(), N_PARAMS);
        let t = EddyMotionTransform::from_params(g, ped, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        write_transform(&path, &t).unwrap();
        let back = read_transform(&path).unwrap();
        prop_assert_eq!(back.params(), t.params());
        let (a, b) = (t.displacement_field(&g).unwrap(), back.displacement_field(&g).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }
}
