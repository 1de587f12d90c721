//! Scalar 3D volumes on a regular grid.
//!
//! Voxel `(i, j, k)` sits at physical position `origin + spacing * (i, j, k)` (mm).
//! Data is stored x-fastest. Continuous sampling is trilinear with zero padding:
//! neighbours outside the grid contribute zero, so material that leaves the field of
//! view fades out over one voxel instead of being clamped.

use crate::error::{Error, Result};

/// Grid geometry shared by a volume and every transform bound to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Isotropic geometry at the origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Continuous voxel coordinates of the grid centre.
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] as f64 - 1.0) / 2.0)
    }

    pub fn voxel_to_mm(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.spacing[a] * p[a])
    }

    pub fn mm_to_voxel(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (x[a] - self.origin[a]) / self.spacing[a])
    }

    /// Tolerant equality used for geometry checks between volumes and transforms.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-9 * self.spacing[a]
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-9 * (1.0 + self.origin[a].abs())
            })
    }

    /// Iterate over all voxel indices in storage order.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
    }
}

/// Volume-centred normalised coordinates in `[-1, 1]^3`.
///
/// Index `i` on an axis of size `n` maps to `2 i / (n - 1) - 1`. A singleton axis maps to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedCoords(pub [f64; 3]);

/// A 3D scalar image with grid geometry and a phase-encoding axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geom: Geometry,
    ped_axis: usize,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(geom: Geometry, ped_axis: usize, data: Vec<f32>) -> Result<Self> {
        if ped_axis > 2 {
            return Err(Error::InvalidGeometry(format!("ped_axis must be 0, 1 or 2, got {ped_axis}")));
        }
        if data.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self {
            geom,
            ped_axis,
            data,
        })
    }

    pub fn zeros(geom: Geometry, ped_axis: usize) -> Result<Self> {
        Self::new(geom, ped_axis, vec![0.0; geom.len()])
    }

    /// Build a volume by evaluating `f` at every voxel index.
    pub fn from_fn(geom: Geometry, ped_axis: usize, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = geom.voxels().map(|v| f(v) as f32).collect();
        Self::new(geom, ped_axis, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn ped_axis(&self) -> usize {
        self.ped_axis
    }

    pub fn with_ped_axis(mut self, ped_axis: usize) -> Result<Self> {
        if ped_axis > 2 {
            return Err(Error::InvalidGeometry(format!("ped_axis must be 0, 1 or 2, got {ped_axis}")));
        }
        self.ped_axis = ped_axis;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geom.index(i, j, k)]
    }

    /// A new volume on the same grid with replaced data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.geom, self.ped_axis, data)
    }

    /// Voxelwise intensity map; geometry and PED axis are preserved.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            geom: self.geom,
            ped_axis: self.ped_axis,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.geom.matches(&other.geom)
    }

    pub fn check_same_grid(&self, other: &Volume3, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.geom, other.geom
            )))
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    #[inline]
    fn at_padded(&self, i: isize, j: isize, k: isize) -> f64 {
        let [nx, ny, nz] = self.geom.dims;
        if i < 0 || j < 0 || k < 0 || i as usize >= nx || j as usize >= ny || k as usize >= nz {
            0.0
        } else {
            self.data[i as usize + nx * (j as usize + ny * k as usize)] as f64
        }
    }

    /// Trilinear sample at continuous voxel coordinates with zero padding.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Result<f64> {
        check_finite(p)?;
        Ok(self.sample_with_gradient(p).0)
    }

    /// Exact partial derivative of the trilinear interpolant along `axis`.
    ///
    /// The interpolant is piecewise linear along each axis; on a cell boundary the
    /// lower cell's slope is returned.
    pub fn derivative_along_axis(&self, p: [f64; 3], axis: usize) -> Result<f64> {
        check_finite(p)?;
        if axis > 2 {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        Ok(self.sample_with_gradient(p).1[axis])
    }

    /// Interpolated value and its gradient (intensity per voxel) at `p`.
    ///
    /// Caller guarantees `p` is finite. Cells are chosen as `[ceil(p) - 1, ceil(p)]`,
    /// which returns the stored value exactly at grid nodes and the lower-cell slope on
    /// cell boundaries.
    #[inline]
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let [nx, ny, nz] = self.geom.dims;
        if p[0] <= -1.0
            || p[1] <= -1.0
            || p[2] <= -1.0
            || p[0] > nx as f64
            || p[1] > ny as f64
            || p[2] > nz as f64
        {
            return (0.0, [0.0; 3]);
        }
        let cx = p[0].ceil();
        let cy = p[1].ceil();
        let cz = p[2].ceil();
        let (i0, fx) = (cx as isize - 1, p[0] - (cx - 1.0));
        let (j0, fy) = (cy as isize - 1, p[1] - (cy - 1.0));
        let (k0, fz) = (cz as isize - 1, p[2] - (cz - 1.0));

        let c000 = self.at_padded(i0, j0, k0);
        let c100 = self.at_padded(i0 + 1, j0, k0);
        let c010 = self.at_padded(i0, j0 + 1, k0);
        let c110 = self.at_padded(i0 + 1, j0 + 1, k0);
        let c001 = self.at_padded(i0, j0, k0 + 1);
        let c101 = self.at_padded(i0 + 1, j0, k0 + 1);
        let c011 = self.at_padded(i0, j0 + 1, k0 + 1);
        let c111 = self.at_padded(i0 + 1, j0 + 1, k0 + 1);

        let gx = 1.0 - fx;
        let gy = 1.0 - fy;
        let gz = 1.0 - fz;

        // Interpolate along x on the four x-edges.
        let e00 = gx * c000 + fx * c100;
        let e10 = gx * c010 + fx * c110;
        let e01 = gx * c001 + fx * c101;
        let e11 = gx * c011 + fx * c111;
        // Then along y.
        let f0 = gy * e00 + fy * e10;
        let f1 = gy * e01 + fy * e11;
        let value = gz * f0 + fz * f1;

        let dz = f1 - f0;
        let dy = gz * (e10 - e00) + fz * (e11 - e01);
        let dx = gz * (gy * (c100 - c000) + fy * (c110 - c010))
            + fz * (gy * (c101 - c001) + fy * (c111 - c011));
        (value, [dx, dy, dz])
    }

    /// Catmull-Rom cubic sample with zero padding; exact at grid points.
    pub fn sample_cubic(&self, p: [f64; 3]) -> f64 {
        let dims = self.geom.dims;
        if (0..3).any(|a| !(p[a] > -2.0 && p[a] < dims[a] as f64 + 1.0)) {
            return 0.0;
        }
        let base = p.map(|c| c.floor());
        let w = [0, 1, 2].map(|a| catmull_rom_weights(p[a] - base[a]));
        let b = base.map(|c| c as isize - 1);
        let mut acc = 0.0;
        for (dk, wk) in w[2].iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            let mut plane = 0.0;
            for (dj, wj) in w[1].iter().enumerate() {
                if *wj == 0.0 {
                    continue;
                }
                let mut row = 0.0;
                for (di, wi) in w[0].iter().enumerate() {
                    if *wi != 0.0 {
                        row += wi * self.at_padded(b[0] + di as isize, b[1] + dj as isize, b[2] + dk as isize);
                    }
                }
                plane += wj * row;
            }
            acc += wk * plane;
        }
        acc
    }

    pub fn voxel_to_normalized(&self, p: [f64; 3]) -> NormalizedCoords {
        voxel_to_normalized(&self.geom, p)
    }

    pub fn normalized_to_voxel(&self, u: NormalizedCoords) -> [f64; 3] {
        normalized_to_voxel(&self.geom, u)
    }

    /// Separable Gaussian smoothing (sigma in voxels), edge-replicating.
    pub fn gaussian_smooth(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|w| *w /= norm);

        let mut buf: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        for axis in 0..3 {
            buf = convolve_axis(&buf, &self.geom, axis, &kernel, radius);
        }
        Self {
            geom: self.geom,
            ped_axis: self.ped_axis,
            data: buf.into_iter().map(|v| v as f32).collect(),
        }
    }

    /// Halve the resolution: each coarse voxel is the mean of a 2x2x2 block of `self`.
    ///
    /// Returns `None` when any axis would drop below 4 voxels.
    pub fn downsample2(&self) -> Option<Self> {
        let dims = self.geom.dims.map(|n| n / 2);
        if dims.iter().any(|&n| n < 4) {
            return None;
        }
        let spacing = self.geom.spacing.map(|s| 2.0 * s);
        let origin = [0, 1, 2].map(|a| self.geom.origin[a] + 0.5 * self.geom.spacing[a]);
        let geom = Geometry {
            dims,
            spacing,
            origin,
        };
        let data = geom
            .voxels()
            .map(|[i, j, k]| {
                let mut acc = 0.0f64;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            acc += self.get(2 * i + di, 2 * j + dj, 2 * k + dk) as f64;
                        }
                    }
                }
                (acc / 8.0) as f32
            })
            .collect();
        Some(Self {
            geom,
            ped_axis: self.ped_axis,
            data,
        })
    }
}

fn check_finite(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidCoordinate(p))
    }
}

pub fn voxel_to_normalized(geom: &Geometry, p: [f64; 3]) -> NormalizedCoords {
    NormalizedCoords([0, 1, 2].map(|a| {
        let n = geom.dims[a];
        if n < 2 {
            0.0
        } else {
            2.0 * p[a] / (n as f64 - 1.0) - 1.0
        }
    }))
}

pub fn normalized_to_voxel(geom: &Geometry, u: NormalizedCoords) -> [f64; 3] {
    [0, 1, 2].map(|a| {
        let n = geom.dims[a];
        if n < 2 {
            0.0
        } else {
            (u.0[a] + 1.0) * (n as f64 - 1.0) / 2.0
        }
    })
}

fn convolve_axis(src: &[f64], geom: &Geometry, axis: usize, kernel: &[f64], radius: isize) -> Vec<f64> {
    let dims = geom.dims;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; src.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = geom.coords(idx)[axis] as isize;
        let base = idx - c as usize * stride;
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let pos = (c + t as isize - radius).clamp(0, n - 1) as usize;
            acc += w * src[base + pos * stride];
        }
        *o = acc;
    }
    out
}

/// Gaussian pyramid: level 0 is `vol`; each further level is smoothed with `sigma`
/// (voxels of the finer level) and halved. Stops early once an axis would fall below 4.
pub fn gaussian_pyramid(vol: &Volume3, levels: usize, sigma: f64) -> Result<Vec<Volume3>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let mut out = vec![vol.clone()];
    while out.len() < levels {
        let prev = out.last().expect("non-empty");
        match prev.gaussian_smooth(sigma).downsample2() {
            Some(next) => out.push(next),
            None => break,
        }
    }
    Ok(out)
}

/// Weights of the samples at offsets -1, 0, 1, 2 for fractional position `t` in [0, 1).
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}
