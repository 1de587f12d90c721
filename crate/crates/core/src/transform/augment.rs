//! Spatial augmentations that keep the PED direction parallel.
//!
//! An affine whose PED column has no off-PED entries, or a displacement field that
//! moves voxels along the PED only, can be applied identically to a moving/reference
//! pair without breaking the single-axis structure of the eddy model.

use rand::Rng;

use super::{EddyMotionTransform, RigidParams};
use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3};

/// Voxel-space homogeneous affine with `A[i][ped] = 0` for every `i != ped`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedAffine {
    matrix: [[f64; 4]; 4],
    ped_axis: usize,
}

impl PedAffine {
    pub fn new(matrix: [[f64; 4]; 4], ped_axis: usize) -> Result<Self> {
        if ped_axis > 2 {
            return Err(Error::InvalidArgument(format!("ped_axis {ped_axis} out of range")));
        }
        for (i, row) in matrix.iter().enumerate().take(3) {
            if i != ped_axis && row[ped_axis] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "affine entry ({i},{ped_axis}) must be zero to preserve the PED"
                )));
            }
        }
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("last affine row must be [0 0 0 1]".into()));
        }
        Ok(Self { matrix, ped_axis })
    }

    pub fn identity(ped_axis: usize) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self::new(m, ped_axis).expect("identity is PED-compatible")
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn ped_axis(&self) -> usize {
        self.ped_axis
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|i| m[i][0] * x[0] + m[i][1] * x[1] + m[i][2] * x[2] + m[i][3])
    }
}

/// Ranges for [`random_ped_affine`].
#[derive(Debug, Clone, Copy)]
pub struct AffineRanges {
    /// Max absolute perturbation of each linear entry away from the identity.
    pub linear: f64,
    /// Max absolute translation (voxels).
    pub translation: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            linear: 0.05,
            translation: 2.0,
        }
    }
}

/// Draw a random PED-compatible affine acting about the centre of `grid`.
pub fn random_ped_affine<R: Rng>(rng: &mut R, ranges: AffineRanges, grid: &Geometry, ped_axis: usize) -> Result<PedAffine> {
    if !ranges.linear.is_finite() || !ranges.translation.is_finite() || ranges.linear < 0.0 || ranges.translation < 0.0 {
        return Err(Error::InvalidArgument("affine ranges must be finite and non-negative".into()));
    }
    let mut lin = [[0.0; 3]; 3];
    for (i, row) in lin.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let base = if i == j { 1.0 } else { 0.0 };
            let jitter = if ranges.linear > 0.0 {
                rng.random_range(-ranges.linear..=ranges.linear)
            } else {
                0.0
            };
            *v = base + jitter;
        }
    }
    for (i, row) in lin.iter_mut().enumerate() {
        if i != ped_axis {
            row[ped_axis] = 0.0;
        }
    }
    let c = grid.center();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        let shift = if ranges.translation > 0.0 {
            rng.random_range(-ranges.translation..=ranges.translation)
        } else {
            0.0
        };
        let lc: f64 = (0..3).map(|j| lin[i][j] * c[j]).sum();
        m[i][..3].copy_from_slice(&lin[i]);
        m[i][3] = c[i] - lc + shift;
    }
    m[3][3] = 1.0;
    PedAffine::new(m, ped_axis)
}

/// A displacement field with a nonzero component along the PED only (voxels).
#[derive(Debug, Clone, PartialEq)]
pub struct PedDeformationField {
    field: Volume3,
    control_spacing: f64,
    amplitude: f64,
}

impl PedDeformationField {
    pub fn field(&self) -> &Volume3 {
        &self.field
    }

    pub fn ped_axis(&self) -> usize {
        self.field.ped_axis()
    }

    pub fn control_spacing(&self) -> f64 {
        self.control_spacing
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Displacement vector at voxel coordinates `x` (trilinear between voxels).
    pub fn displacement_at(&self, x: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        d[self.ped_axis()] = self.field.sample_with_gradient(x).0;
        d
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let d = self.displacement_at(x);
        [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
    }
}

fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Smooth random PED-only field: uniform control values in `[-amplitude, amplitude]` on
/// a grid of `control_spacing` voxels, interpolated with cubic B-splines.
pub fn random_ped_field<R: Rng>(
    rng: &mut R,
    control_spacing: f64,
    amplitude: f64,
    grid: &Geometry,
    ped_axis: usize,
) -> Result<PedDeformationField> {
    if !(control_spacing > 0.0) || !control_spacing.is_finite() {
        return Err(Error::InvalidArgument("control spacing must be positive".into()));
    }
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidArgument("amplitude must be finite and non-negative".into()));
    }
    // Control points at index m·spacing for m in -1 ..= ceil((n-1)/spacing) + 1.
    let ctrl_dims = grid.dims.map(|n| ((n as f64 - 1.0) / control_spacing).ceil() as usize + 3);
    let n_ctrl = ctrl_dims[0] * ctrl_dims[1] * ctrl_dims[2];
    let ctrl: Vec<f64> = (0..n_ctrl)
        .map(|_| {
            if amplitude > 0.0 {
                rng.random_range(-amplitude..=amplitude)
            } else {
                0.0
            }
        })
        .collect();
    let cidx = |a: usize, b: usize, c: usize| a + ctrl_dims[0] * (b + ctrl_dims[1] * c);

    let data = grid
        .voxels()
        .map(|v| {
            let t = v.map(|c| c as f64 / control_spacing + 1.0);
            let base = t.map(|s| s.floor() as isize);
            let mut acc = 0.0;
            for dc in -1..=2isize {
                let c = base[2] + dc;
                if c < 0 || c as usize >= ctrl_dims[2] {
                    continue;
                }
                let wc = cubic_bspline(t[2] - c as f64);
                for db in -1..=2isize {
                    let b = base[1] + db;
                    if b < 0 || b as usize >= ctrl_dims[1] {
                        continue;
                    }
                    let wb = cubic_bspline(t[1] - b as f64);
                    for da in -1..=2isize {
                        let a = base[0] + da;
                        if a < 0 || a as usize >= ctrl_dims[0] {
                            continue;
                        }
                        let wa = cubic_bspline(t[0] - a as f64);
                        acc += wa * wb * wc * ctrl[cidx(a as usize, b as usize, c as usize)];
                    }
                }
            }
            acc as f32
        })
        .collect();
    Ok(PedDeformationField {
        field: Volume3::new(*grid, ped_axis, data)?,
        control_spacing,
        amplitude,
    })
}

/// Pull-resample `vol` through `map`: `out(x) = vol(map(x))`.
pub fn warp_with(vol: &Volume3, map: impl Fn([f64; 3]) -> [f64; 3]) -> Volume3 {
    let g = *vol.geometry();
    let data = g
        .voxels()
        .map(|v| vol.sample_with_gradient(map(v.map(|c| c as f64))).0 as f32)
        .collect();
    vol.with_data(data).expect("same grid")
}

/// Augment a registration pair: both images go through the same PED-compatible
/// spatial map (field, then affine); the moving image is additionally moved by
/// `moving_rigid`, composed on the right.
pub fn augment_pair(
    moving: &Volume3,
    reference: &Volume3,
    affine: &PedAffine,
    field: &PedDeformationField,
    moving_rigid: &RigidParams,
) -> Result<(Volume3, Volume3)> {
    moving.check_same_grid(reference, "augment_pair")?;
    moving.check_same_grid(field.field(), "augment_pair field")?;
    let ped = moving.ped_axis();
    if affine.ped_axis() != ped || field.ped_axis() != ped {
        return Err(Error::InvalidArgument("augmentation PED axis differs from the images'".into()));
    }
    let rigid = EddyMotionTransform::new(*moving.geometry(), ped, Default::default(), *moving_rigid)?.prepare();
    let spatial = |x: [f64; 3]| affine.apply(field.apply(x));
    let reference_out = warp_with(reference, spatial);
    let moving_out = warp_with(moving, |x| spatial(rigid.apply(x)));
    Ok((moving_out, reference_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{QuadEddyParams, N_PARAMS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Geometry {
        Geometry::isotropic([20, 24, 16], 2.0).unwrap()
    }

    #[test]
    fn constraint_entries_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ped in 0..3 {
            for _ in 0..50 {
                let a = random_ped_affine(&mut rng, AffineRanges::default(), &grid(), ped).unwrap();
                for i in 0..3 {
                    if i != ped {
                        assert_eq!(a.matrix()[i][ped], 0.0);
                    }
                }
            }
        }
        let mut bad = PedAffine::identity(1).matrix;
        bad[0][1] = 0.1;
        assert!(PedAffine::new(bad, 1).is_err());
    }

    #[test]
    fn moving_along_ped_keeps_off_ped_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_ped_affine(&mut rng, AffineRanges::default(), &grid(), 1).unwrap();
        let x = [3.0, 4.0, 5.0];
        let y0 = a.apply(x);
        let y1 = a.apply([3.0, 11.5, 5.0]);
        assert_eq!(y0[0], y1[0]);
        assert_eq!(y0[2], y1[2]);
    }

    #[test]
    fn zero_amplitude_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_ped_field(&mut rng, 5.0, 0.0, &grid(), 1).unwrap();
        assert!(f.field().data().iter().all(|&v| v == 0.0));
        assert_eq!(f.apply([1.5, 2.5, 3.5]), [1.5, 2.5, 3.5]);
    }

    #[test]
    fn field_is_ped_only_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_ped_field(&mut rng, 4.0, 1.5, &grid(), 2).unwrap();
        assert!(f.field().data().iter().all(|&v| v.abs() <= 1.5));
        assert!(f.field().data().iter().any(|&v| v != 0.0));
        for _ in 0..100 {
            let x = [rng.random_range(0.0..19.0), rng.random_range(0.0..23.0), rng.random_range(0.0..15.0)];
            let d = f.displacement_at(x);
            assert_eq!(d[0], 0.0);
            assert_eq!(d[1], 0.0);
        }
        assert!(random_ped_field(&mut rng, 0.0, 1.0, &grid(), 2).is_err());
        assert!(random_ped_field(&mut rng, 4.0, -1.0, &grid(), 2).is_err());
    }

    #[test]
    fn composition_with_eddy_keeps_off_ped_of_affine_rigid() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_ped_affine(&mut rng, AffineRanges::default(), &g, 1).unwrap();
            let mut p = [0.0; N_PARAMS];
            for v in p.iter_mut().take(10) {
                *v = rng.random_range(-0.05..0.05);
            }
            for v in p.iter_mut().skip(10).take(3) {
                *v = rng.random_range(-0.05..0.05);
            }
            for v in p.iter_mut().skip(13) {
                *v = rng.random_range(-1.0..1.0);
            }
            let t = EddyMotionTransform::from_params(g, 1, &p).unwrap();
            for _ in 0..100 {
                let x = [rng.random_range(0.0..19.0), rng.random_range(0.0..23.0), rng.random_range(0.0..15.0)];
                let full = a.apply(t.apply(x));
                let rigid_only = a.apply(t.apply_rigid(x));
                assert!((full[0] - rigid_only[0]).abs() < 1e-12);
                assert!((full[2] - rigid_only[2]).abs() < 1e-12);
            }
        }
        let _ = QuadEddyParams::zero();
    }

    #[test]
    fn augment_pair_with_identities_is_identity() {
        let g = grid();
        let vol = Volume3::from_fn(g, 1, |[i, j, k]| (i + 2 * j + 3 * k) as f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = random_ped_field(&mut rng, 4.0, 0.0, &g, 1).unwrap();
        let (m, r) = augment_pair(&vol, &vol, &PedAffine::identity(1), &field, &RigidParams::identity()).unwrap();
        assert_eq!(m, vol);
        assert_eq!(r, vol);
    }

    #[test]
    fn augment_pair_field_only_moves_along_ped() {
        // An image constant along the PED is invariant under a PED-only field.
        let g = grid();
        let vol = Volume3::from_fn(g, 1, |[i, _, k]| (i * k) as f64 + 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let field = random_ped_field(&mut rng, 4.0, 0.8, &g, 1).unwrap();
        let (_, r) = augment_pair(&vol, &vol, &PedAffine::identity(1), &field, &RigidParams::identity()).unwrap();
        for [i, j, k] in g.voxels() {
            if j >= 2 && j + 2 < 24 {
                assert!((r.get(i, j, k) - vol.get(i, j, k)).abs() < 1e-4);
            }
        }
    }
}
