//! Quadratic eddy-current distortion composed with rigid head motion.
//!
//! A point `x` (voxel coordinates of the reference grid) is first moved rigidly,
//! `r = R(x)`, by a rotation about the grid centre in mm followed by a translation
//! in mm. The eddy displacement `uᵀQu + L·u + t` is then evaluated at the normalised
//! coordinates `u` of `r` and added to the PED component only:
//!
//! ```text
//! y = E(R(x)),   y_ped = r_ped + (uᵀQu + L·u + t) · (n_ped - 1) / 2
//! ```
//!
//! The sixteen parameters are ordered `q11 q12 q13 q22 q23 q33 l1 l2 l3 t` followed by
//! the rotations about x, y, z (radians) and the translations (mm).

pub mod augment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, NormalizedCoords, Volume3};

pub const N_PARAMS: usize = 16;
pub const N_EDDY: usize = 10;
pub const IDX_T: usize = 9;
pub const IDX_ROT: usize = 10;
pub const IDX_TRANS: usize = 13;

/// Margin on `1 + dδ/dx_ped` required by [`EddyMotionTransform::is_invertible`].
pub const INVERTIBILITY_MARGIN: f64 = 0.05;

/// Parameters of the quadratic distortion along the PED, in normalised units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadEddyParams {
    /// Upper triangle of the symmetric Q: q11, q12, q13, q22, q23, q33.
    pub q: [f64; 6],
    pub l: [f64; 3],
    pub t: f64,
}

impl QuadEddyParams {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self {
            q: [p[0], p[1], p[2], p[3], p[4], p[5]],
            l: [p[6], p[7], p[8]],
            t: p[9],
        }
    }

    pub fn to_array(&self) -> [f64; N_EDDY] {
        let q = self.q;
        [q[0], q[1], q[2], q[3], q[4], q[5], self.l[0], self.l[1], self.l[2], self.t]
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_slice(&self.to_array().map(|v| v * s))
    }

    /// Polynomial basis such that `δ(u) = Σ params[i] · basis[i]`.
    #[inline]
    pub fn basis(u: NormalizedCoords) -> [f64; N_EDDY] {
        let [a, b, c] = u.0;
        [a * a, 2.0 * a * b, 2.0 * a * c, b * b, 2.0 * b * c, c * c, a, b, c, 1.0]
    }

    pub fn displacement(&self, u: NormalizedCoords) -> f64 {
        let basis = Self::basis(u);
        self.to_array().iter().zip(basis).map(|(p, b)| p * b).sum()
    }

    /// Gradient of the displacement with respect to `u`: `2Qu + Lᵀ`.
    #[inline]
    pub fn gradient(&self, u: NormalizedCoords) -> [f64; 3] {
        let [q11, q12, q13, q22, q23, q33] = self.q;
        let [a, b, c] = u.0;
        [
            2.0 * (q11 * a + q12 * b + q13 * c) + self.l[0],
            2.0 * (q12 * a + q22 * b + q23 * c) + self.l[1],
            2.0 * (q13 * a + q23 * b + q33 * c) + self.l[2],
        ]
    }
}

/// `δ(u) = uᵀQu + L·u + t`.
pub fn eddy_displacement(e: &QuadEddyParams, u: NormalizedCoords) -> f64 {
    e.displacement(u)
}

/// Rigid motion: rotations about x, y, z (radians; z applied first) about the grid
/// centre, then a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidParams {
    pub euler: [f64; 3],
    pub trans: [f64; 3],
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[inline]
fn matvec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_x(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
    )
}

fn rot_y(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
    )
}

fn rot_z(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

impl RigidParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.euler.iter().chain(&self.trans).all(|&v| v == 0.0)
    }

    /// `R = Rx · Ry · Rz`.
    pub fn rotation(&self) -> Mat3 {
        self.rotation_with_derivatives().0
    }

    /// Rotation and its derivatives with respect to the three angles.
    pub fn rotation_with_derivatives(&self) -> (Mat3, [Mat3; 3]) {
        let (rx, drx) = rot_x(self.euler[0]);
        let (ry, dry) = rot_y(self.euler[1]);
        let (rz, drz) = rot_z(self.euler[2]);
        let ryz = matmul(&ry, &rz);
        let r = matmul(&rx, &ryz);
        let d0 = matmul(&drx, &ryz);
        let d1 = matmul(&rx, &matmul(&dry, &rz));
        let d2 = matmul(&rx, &matmul(&ry, &drz));
        (r, [d0, d1, d2])
    }
}

/// `E ∘ R` bound to a reference grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EddyMotionTransform {
    pub eddy: QuadEddyParams,
    pub rigid: RigidParams,
    ped_axis: usize,
    geom: Geometry,
}

impl EddyMotionTransform {
    pub fn identity(geom: Geometry, ped_axis: usize) -> Result<Self> {
        Self::new(geom, ped_axis, QuadEddyParams::zero(), RigidParams::identity())
    }

    pub fn new(geom: Geometry, ped_axis: usize, eddy: QuadEddyParams, rigid: RigidParams) -> Result<Self> {
        if ped_axis > 2 {
            return Err(Error::InvalidArgument(format!("ped_axis {ped_axis} out of range")));
        }
        Ok(Self {
            eddy,
            rigid,
            ped_axis,
            geom,
        })
    }

    pub fn from_params(geom: Geometry, ped_axis: usize, p: &[f64; N_PARAMS]) -> Result<Self> {
        let mut t = Self::identity(geom, ped_axis)?;
        t.set_params(p);
        Ok(t)
    }

    pub fn for_volume(vol: &Volume3) -> Self {
        Self::identity(*vol.geometry(), vol.ped_axis()).expect("volume ped axis is valid")
    }

    pub fn ped_axis(&self) -> usize {
        self.ped_axis
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn params(&self) -> [f64; N_PARAMS] {
        let mut p = [0.0; N_PARAMS];
        p[..N_EDDY].copy_from_slice(&self.eddy.to_array());
        p[IDX_ROT..IDX_TRANS].copy_from_slice(&self.rigid.euler);
        p[IDX_TRANS..].copy_from_slice(&self.rigid.trans);
        p
    }

    pub fn set_params(&mut self, p: &[f64; N_PARAMS]) {
        self.eddy = QuadEddyParams::from_slice(&p[..N_EDDY]);
        self.rigid.euler = [p[10], p[11], p[12]];
        self.rigid.trans = [p[13], p[14], p[15]];
    }

    /// Precompute rotation matrices and grid constants for repeated evaluation.
    pub fn prepare(&self) -> PreparedTransform {
        let (rot, drot) = self.rigid.rotation_with_derivatives();
        let dims = self.geom.dims;
        let half = dims.map(|n| (n as f64 - 1.0) / 2.0);
        PreparedTransform {
            eddy: self.eddy.to_array(),
            eddy_params: self.eddy,
            rigid_identity: self.rigid.is_identity(),
            rot,
            drot,
            trans: self.rigid.trans,
            spacing: self.geom.spacing,
            center: half,
            half,
            inv_half: half.map(|h| if h > 0.0 { 1.0 / h } else { 0.0 }),
            ped: self.ped_axis,
        }
    }

    /// Map reference-grid voxel coordinates to distorted voxel coordinates.
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        self.prepare().apply(x)
    }

    /// The rigid part alone, `R(x)`, in voxel coordinates.
    pub fn apply_rigid(&self, x: [f64; 3]) -> [f64; 3] {
        self.prepare().rigid(x).0
    }

    /// `∂y/∂θ` for each of the sixteen parameters (three components each).
    pub fn jacobian_wrt_params(&self, x: [f64; 3]) -> [[f64; 3]; N_PARAMS] {
        self.prepare().apply_with_jacobian(x).1
    }

    fn check_grid(&self, grid: &Geometry) -> Result<()> {
        if self.geom.matches(grid) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "transform bound to {:?}, grid is {:?}",
                self.geom, grid
            )))
        }
    }

    /// PED component of `apply(x) - x` at every voxel, in voxels.
    pub fn displacement_field(&self, grid: &Geometry) -> Result<Volume3> {
        self.check_grid(grid)?;
        let prep = self.prepare();
        let p = self.ped_axis;
        let data = grid
            .voxels()
            .map(|v| {
                let x = v.map(|c| c as f64);
                let y = prep.apply(x);
                debug_assert!({
                    let r = prep.rigid(x).0;
                    (0..3).filter(|&a| a != p).all(|a| y[a] == r[a])
                });
                (y[p] - x[p]) as f32
            })
            .collect();
        Volume3::new(*grid, p, data)
    }

    /// Full 3-vector displacement `apply(x) - x` at every voxel, in storage order.
    pub fn displacement_vectors(&self, grid: &Geometry) -> Result<Vec<[f64; 3]>> {
        self.check_grid(grid)?;
        let prep = self.prepare();
        Ok(grid
            .voxels()
            .map(|v| {
                let x = v.map(|c| c as f64);
                let y = prep.apply(x);
                [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
            })
            .collect())
    }

    /// True when `1 + dδ_vox/dx_ped > 0.05` over the whole grid.
    ///
    /// The derivative is affine in the coordinates, so the grid corners and centre
    /// bound it.
    pub fn is_invertible(&self, grid: &Geometry) -> bool {
        let prep = self.prepare();
        let [nx, ny, nz] = grid.dims.map(|n| n as f64 - 1.0);
        let mut pts = vec![grid.center()];
        for &i in &[0.0, nx] {
            for &j in &[0.0, ny] {
                for &k in &[0.0, nz] {
                    pts.push([i, j, k]);
                }
            }
        }
        pts.into_iter().all(|v| {
            let r = self.geom.mm_to_voxel(grid.voxel_to_mm(v));
            prep.ped_slope(r) > INVERTIBILITY_MARGIN
        })
    }

    /// Solve `apply(x) = y` for `x`, to `tol` voxels.
    pub fn invert_along_ped(&self, y: [f64; 3], tol: f64) -> Result<[f64; 3]> {
        if !y.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidCoordinate(y));
        }
        self.prepare().invert(y, tol)
    }
}

/// An [`EddyMotionTransform`] with rotation matrices precomputed.
#[derive(Debug, Clone, Copy)]
pub struct PreparedTransform {
    eddy: [f64; N_EDDY],
    eddy_params: QuadEddyParams,
    rigid_identity: bool,
    rot: Mat3,
    drot: [Mat3; 3],
    trans: [f64; 3],
    spacing: [f64; 3],
    center: [f64; 3],
    half: [f64; 3],
    inv_half: [f64; 3],
    ped: usize,
}

impl PreparedTransform {
    #[inline]
    fn normalized(&self, r: [f64; 3]) -> NormalizedCoords {
        NormalizedCoords([0, 1, 2].map(|a| (r[a] - self.center[a]) * self.inv_half[a]))
    }

    /// Rigid motion in voxel coordinates; also returns the centred mm offset of `x`.
    #[inline]
    fn rigid(&self, x: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let pm = [0, 1, 2].map(|a| (x[a] - self.center[a]) * self.spacing[a]);
        if self.rigid_identity {
            // Exact pass-through keeps off-PED coordinates bit-identical.
            return (x, pm);
        }
        let rm = matvec(&self.rot, pm);
        let r = [0, 1, 2].map(|a| (rm[a] + self.trans[a]) / self.spacing[a] + self.center[a]);
        (r, pm)
    }

    #[inline]
    fn delta(&self, u: NormalizedCoords) -> f64 {
        let b = QuadEddyParams::basis(u);
        let mut d = 0.0;
        for i in 0..N_EDDY {
            d += self.eddy[i] * b[i];
        }
        d
    }

    /// `1 + ∂(δ·h_ped)/∂r_ped` at rigidly moved coordinates `r`.
    #[inline]
    fn ped_slope(&self, r: [f64; 3]) -> f64 {
        let g = self.eddy_params.gradient(self.normalized(r));
        // h_ped / h_ped cancels.
        if self.half[self.ped] > 0.0 {
            1.0 + g[self.ped]
        } else {
            1.0
        }
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let (mut y, _) = self.rigid(x);
        let u = self.normalized(y);
        y[self.ped] += self.delta(u) * self.half[self.ped];
        y
    }

    /// Mapped point and `∂y/∂θ` for all parameters.
    #[inline]
    pub fn apply_with_jacobian(&self, x: [f64; 3]) -> ([f64; 3], [[f64; 3]; N_PARAMS]) {
        let p = self.ped;
        let hp = self.half[p];
        let (r, pm) = self.rigid(x);
        let u = self.normalized(r);
        let basis = QuadEddyParams::basis(u);
        let mut y = r;
        let mut delta = 0.0;
        for i in 0..N_EDDY {
            delta += self.eddy[i] * basis[i];
        }
        y[p] += delta * hp;

        let mut jac = [[0.0; 3]; N_PARAMS];
        for i in 0..N_EDDY {
            jac[i][p] = basis[i] * hp;
        }
        let g = self.eddy_params.gradient(u);
        // dδ_vox/dr_a = h_p · g_a / h_a
        let chain = [0, 1, 2].map(|a| hp * g[a] * self.inv_half[a]);
        for k in 0..3 {
            let dm = matvec(&self.drot[k], pm);
            let dr = [0, 1, 2].map(|a| dm[a] / self.spacing[a]);
            let mut col = dr;
            col[p] += chain[0] * dr[0] + chain[1] * dr[1] + chain[2] * dr[2];
            jac[IDX_ROT + k] = col;

            let mut col = [0.0; 3];
            col[k] = 1.0 / self.spacing[k];
            col[p] += chain[k] / self.spacing[k];
            jac[IDX_TRANS + k] = col;
        }
        (y, jac)
    }

    fn inverse_rigid(&self, r: [f64; 3]) -> [f64; 3] {
        if self.rigid_identity {
            return r;
        }
        let rm = [0, 1, 2].map(|a| (r[a] - self.center[a]) * self.spacing[a] - self.trans[a]);
        // Rᵀ = R⁻¹
        let pm = [0, 1, 2].map(|i| self.rot[0][i] * rm[0] + self.rot[1][i] * rm[1] + self.rot[2][i] * rm[2]);
        [0, 1, 2].map(|a| pm[a] / self.spacing[a] + self.center[a])
    }

    /// Solve `apply(x) = y` for `x`, to `tol` voxels.
    pub fn invert(&self, y: [f64; 3], tol: f64) -> Result<[f64; 3]> {
        const MAX_ITERS: usize = 100;
        let p = self.ped;
        let hp = self.half[p];
        let mut r = y;
        let f = |s: f64, r: &mut [f64; 3]| {
            r[p] = s;
            s + self.delta(self.normalized(*r)) * hp - y[p]
        };
        let target = 0.1 * tol;

        let s0 = y[p];
        let f0 = f(s0, &mut r);
        if f0.abs() <= target {
            return self.finish_inverse(r, s0);
        }
        // Bracket the root: f is increasing where the transform is invertible.
        let dir = -f0.signum();
        let mut step = f0.abs().max(1.0);
        let (mut lo, mut hi);
        let mut expansions = 0;
        loop {
            let s1 = s0 + dir * step;
            let f1 = f(s1, &mut r);
            if f1.signum() != f0.signum() || f1 == 0.0 {
                if dir > 0.0 {
                    lo = s0;
                    hi = s1;
                } else {
                    lo = s1;
                    hi = s0;
                }
                break;
            }
            step *= 2.0;
            expansions += 1;
            if expansions > 60 {
                return Err(Error::NonInvertible(format!("no root along the PED line through {y:?}")));
            }
        }

        // Safeguarded Newton.
        let mut s = 0.5 * (lo + hi);
        for _ in 0..MAX_ITERS {
            let fs = f(s, &mut r);
            if fs.abs() <= target {
                return self.finish_inverse(r, s);
            }
            if fs < 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let slope = self.ped_slope(r);
            let newton = s - fs / slope;
            s = if slope > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * (1.0 + s.abs()) {
                let fs = f(s, &mut r);
                if fs.abs() <= tol {
                    return self.finish_inverse(r, s);
                }
                break;
            }
        }
        Err(Error::NoConvergence(format!(
            "PED inversion at {y:?} did not reach tolerance {tol} in {MAX_ITERS} iterations"
        )))
    }

    fn finish_inverse(&self, mut r: [f64; 3], s: f64) -> Result<[f64; 3]> {
        r[self.ped] = s;
        let slope = self.ped_slope(r);
        if slope <= 0.0 {
            return Err(Error::NonInvertible(format!(
                "PED line folds at {r:?} (slope {slope:.3})"
            )));
        }
        Ok(self.inverse_rigid(r))
    }
}
