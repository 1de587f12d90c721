//! Ellipsoidal tensor phantom: outer CSF rim, gray matter, a ventricle and fiber slabs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::BinaryMask;
use crate::volume::{Geometry, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Background,
    Csf,
    GrayMatter,
    WhiteMatter,
}

/// Axis-aligned box of white matter with a principal fiber direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberSlab {
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    /// Half extents in voxels; a voxel is inside when `|v - c| < half` on every axis.
    pub half_extent: [f64; 3],
    pub orientation: [f64; 3],
}

impl FiberSlab {
    fn contains(&self, v: [f64; 3]) -> bool {
        (0..3).all(|a| (v[a] - self.center[a]).abs() < self.half_extent[a])
    }
}

/// Ellipsoid in voxel coordinates; a voxel is inside when `Σ((v-c)/r)² <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn level(&self, v: [f64; 3]) -> f64 {
        (0..3).map(|a| ((v[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    pub fn contains(&self, v: [f64; 3]) -> bool {
        self.level(v) <= 1.0
    }

    fn shrunk(&self, by: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            semi_axes: self.semi_axes.map(|r| r - by),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub brain: Ellipsoid,
    /// Thickness of the outer CSF shell, in voxels.
    pub rim_thickness: f64,
    pub ventricle: Ellipsoid,
    pub slabs: Vec<FiberSlab>,
    /// Gaussian point-spread function width (voxels) applied to the parameter maps.
    pub psf_sigma: f64,
    /// Images are formed on a grid this many times finer than the acquisition grid.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    2
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let c = [31.5, 31.5, 19.5];
        let at = |d: [f64; 3]| [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
        let slab = |d: [f64; 3], half_extent: [f64; 3], orientation: [f64; 3]| FiberSlab {
            center: at(d),
            half_extent,
            orientation,
        };
        Self {
            dims: [64, 64, 40],
            spacing: [2.0; 3],
            brain: Ellipsoid {
                center: c,
                semi_axes: [23.0, 28.0, 16.0],
            },
            rim_thickness: 2.0,
            ventricle: Ellipsoid {
                center: at([0.0, -3.0, 0.0]),
                semi_axes: [9.0, 4.0, 7.0],
            },
            slabs: vec![
                slab([-13.0, 0.0, 0.0], [3.0, 10.0, 5.0], [0.0, 1.0, 0.0]),
                slab([13.0, 2.0, 0.0], [3.0, 10.0, 5.0], [0.0, 0.0, 1.0]),
                slab([0.0, 0.0, 10.0], [8.0, 6.0, 2.0], [1.0, 0.0, 0.0]),
                slab([0.0, 16.0, 0.0], [7.0, 3.0, 4.0], [1.0, 0.0, 0.0]),
                slab([2.0, -17.0, -3.0], [6.0, 3.0, 3.0], [0.0, 0.0, 1.0]),
            ],
            psf_sigma: 1.4,
            supersample: default_supersample(),
        }
    }
}

impl PhantomSpec {
    /// The default layout on a 32×32×20 grid of 4 mm voxels.
    pub fn scaled_down() -> Self {
        let d = Self::default();
        let pos = |c: [f64; 3]| c.map(|x| (x + 0.5) * 0.5 - 0.5);
        let half = |r: [f64; 3]| r.map(|x| x * 0.5);
        Self {
            dims: d.dims.map(|n| n / 2),
            spacing: d.spacing.map(|s| s * 2.0),
            brain: Ellipsoid {
                center: pos(d.brain.center),
                semi_axes: half(d.brain.semi_axes),
            },
            rim_thickness: d.rim_thickness * 0.5,
            ventricle: Ellipsoid {
                center: pos(d.ventricle.center),
                semi_axes: half(d.ventricle.semi_axes),
            },
            slabs: d
                .slabs
                .iter()
                .map(|s| FiberSlab {
                    center: pos(s.center),
                    half_extent: half(s.half_extent),
                    orientation: s.orientation,
                })
                .collect(),
            psf_sigma: d.psf_sigma,
            supersample: d.supersample,
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }
}

/// Signal parameters of one tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueProps {
    pub s0: f64,
    /// Diffusivities (mm²/s): along the fiber, then the two perpendicular ones.
    pub eigenvalues: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueParams {
    pub csf: TissueProps,
    pub gray_matter: TissueProps,
    pub white_matter: TissueProps,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            csf: TissueProps {
                s0: 1.0,
                eigenvalues: [3.0e-3; 3],
            },
            gray_matter: TissueProps {
                s0: 0.75,
                eigenvalues: [0.8e-3; 3],
            },
            white_matter: TissueProps {
                s0: 0.65,
                eigenvalues: [1.7e-3, 0.3e-3, 0.3e-3],
            },
        }
    }
}

impl TissueParams {
    fn validate(&self) -> Result<()> {
        for (name, t) in [("csf", self.csf), ("gray_matter", self.gray_matter), ("white_matter", self.white_matter)] {
            if !(t.s0 >= 0.0) || t.eigenvalues.iter().any(|&e| !(e >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name}: S0 and eigenvalues must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn get(&self, t: Tissue) -> Option<TissueProps> {
        match t {
            Tissue::Background => None,
            Tissue::Csf => Some(self.csf),
            Tissue::GrayMatter => Some(self.gray_matter),
            Tissue::WhiteMatter => Some(self.white_matter),
        }
    }
}

/// Symmetric tensor stored as `[dxx, dxy, dxz, dyy, dyz, dzz]`.
pub type Tensor = [f64; 6];

/// Voxelwise labels, tensors and S0.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    geom: Geometry,
    labels: Vec<Tissue>,
    tensors: Vec<Tensor>,
    s0: Vec<f64>,
}

/// `λ∥ e eᵀ + λ⊥ (I - e eᵀ)`, using the mean of the two perpendicular eigenvalues.
pub fn tensor_from(eigenvalues: [f64; 3], orientation: [f64; 3]) -> Tensor {
    let n = orientation.iter().map(|c| c * c).sum::<f64>().sqrt();
    let e = orientation.map(|c| c / n);
    let par = eigenvalues[0];
    let perp = 0.5 * (eigenvalues[1] + eigenvalues[2]);
    let m = |i: usize, j: usize| {
        let id = if i == j { 1.0 } else { 0.0 };
        perp * id + (par - perp) * e[i] * e[j]
    };
    [m(0, 0), m(0, 1), m(0, 2), m(1, 1), m(1, 2), m(2, 2)]
}

/// `gᵀ D g`.
pub fn quadratic_form(d: &Tensor, g: [f64; 3]) -> f64 {
    d[0] * g[0] * g[0]
        + d[3] * g[1] * g[1]
        + d[5] * g[2] * g[2]
        + 2.0 * (d[1] * g[0] * g[1] + d[2] * g[0] * g[2] + d[4] * g[1] * g[2])
}

/// Label every voxel; overlapping regions are rejected.
pub fn build_phantom(spec: &PhantomSpec, tissues: &TissueParams) -> Result<Phantom> {
    build_phantom_sampled(spec, tissues, 1)
}

/// The phantom on a grid `factor` times finer; fine index `factor·i` is acquisition voxel `i`.
pub fn build_phantom_sampled(spec: &PhantomSpec, tissues: &TissueParams, factor: usize) -> Result<Phantom> {
    if factor == 0 {
        return Err(Error::InvalidArgument("supersampling factor must be at least 1".into()));
    }
    let native = spec.geometry()?;
    let f = factor as f64;
    let geom = Geometry::new(
        native.dims.map(|n| (n - 1) * factor + 1),
        native.spacing.map(|s| s / f),
        native.origin,
    )?;
    tissues.validate()?;
    if spec.rim_thickness < 0.0 || spec.brain.semi_axes.iter().any(|&r| r <= spec.rim_thickness) {
        return Err(Error::InvalidArgument("rim thicker than the brain".into()));
    }
    for s in &spec.slabs {
        if s.orientation.iter().map(|c| c * c).sum::<f64>() < 1e-12 {
            return Err(Error::InvalidArgument("fiber slab orientation is zero".into()));
        }
    }
    let interior = spec.brain.shrunk(spec.rim_thickness);
    let mut labels = Vec::with_capacity(geom.len());
    let mut tensors = Vec::with_capacity(geom.len());
    let mut s0 = Vec::with_capacity(geom.len());
    for v in geom.voxels() {
        let p = v.map(|c| c as f64 / f);
        let in_brain = spec.brain.contains(p);
        let in_interior = interior.contains(p);
        let in_ventricle = spec.ventricle.contains(p);
        let slabs: Vec<&FiberSlab> = spec.slabs.iter().filter(|s| s.contains(p)).collect();

        let rim = in_brain && !in_interior;
        let n_regions = rim as usize + in_ventricle as usize + slabs.len();
        if n_regions > 1 {
            return Err(Error::Overlap(format!("phantom regions overlap at voxel {p:?}")));
        }
        if (in_ventricle || !slabs.is_empty()) && !in_interior {
            return Err(Error::Overlap(format!("region extends outside the brain interior at voxel {p:?}")));
        }
        let (label, tensor) = if !in_brain {
            (Tissue::Background, [0.0; 6])
        } else if rim || in_ventricle {
            (Tissue::Csf, tensor_from(tissues.csf.eigenvalues, [1.0, 0.0, 0.0]))
        } else if let Some(slab) = slabs.first() {
            (Tissue::WhiteMatter, tensor_from(tissues.white_matter.eigenvalues, slab.orientation))
        } else {
            (Tissue::GrayMatter, tensor_from(tissues.gray_matter.eigenvalues, [1.0, 0.0, 0.0]))
        };
        labels.push(label);
        tensors.push(tensor);
        s0.push(tissues.get(label).map_or(0.0, |t| t.s0));
    }
    Ok(Phantom { geom, labels, tensors, s0 })
}

impl Phantom {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    pub fn s0_volume(&self, ped_axis: usize) -> Result<Volume3> {
        Volume3::new(self.geom, ped_axis, self.s0.iter().map(|&v| v as f32).collect())
    }

    pub fn tissue_mask(&self, t: Tissue) -> BinaryMask {
        BinaryMask::new(self.geom, self.labels.iter().map(|&l| l == t).collect()).expect("same grid")
    }

    /// Every non-background voxel.
    pub fn brain_mask(&self) -> BinaryMask {
        BinaryMask::new(self.geom, self.labels.iter().map(|&l| l != Tissue::Background).collect())
            .expect("same grid")
    }

    /// Parameter maps seen through a Gaussian point-spread function of `sigma` voxels.
    ///
    /// S0 is smoothed directly; tensors are mixed with S0 weights, so background
    /// contributes no diffusivity. Labels stay sharp.
    pub fn blurred(&self, sigma: f64) -> Result<Phantom> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("psf sigma {sigma} is negative")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let smooth = |f: &dyn Fn(usize) -> f64| -> Result<Vec<f32>> {
            let data = (0..self.s0.len()).map(|i| f(i) as f32).collect();
            Ok(Volume3::new(self.geom, 0, data)?.gaussian_smooth(sigma).into_data())
        };
        let s0 = smooth(&|i| self.s0[i])?;
        let weighted: Vec<Vec<f32>> = (0..6)
            .map(|c| smooth(&|i| self.s0[i] * self.tensors[i][c]))
            .collect::<Result<_>>()?;
        let tensors = (0..s0.len())
            .map(|i| {
                let w = s0[i] as f64;
                if w > 1e-6 {
                    [0, 1, 2, 3, 4, 5].map(|c| weighted[c][i] as f64 / w)
                } else {
                    [0.0; 6]
                }
            })
            .collect();
        Ok(Phantom {
            geom: self.geom,
            labels: self.labels.clone(),
            tensors,
            s0: s0.into_iter().map(|v| v as f64).collect(),
        })
    }

    /// Largest S0 in the phantom; the noise scale refers to it.
    pub fn s0_ref(&self) -> f64 {
        self.s0.iter().copied().fold(0.0, f64::max)
    }
}

fn check_encoding(b: f64, g: [f64; 3]) -> Result<()> {
    if !(b >= 0.0) {
        return Err(Error::InvalidArgument(format!("b-value {b} is negative")));
    }
    let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if b > 0.0 && (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("gradient direction has norm {norm}, expected 1")));
    }
    Ok(())
}

fn signal(s0: f64, d: &Tensor, b: f64, g: [f64; 3]) -> f32 {
    if b == 0.0 {
        s0 as f32
    } else {
        (s0 * (-b * quadratic_form(d, g)).exp()) as f32
    }
}

/// `S = S0 · exp(-b gᵀDg)`.
pub fn simulate_signal(phantom: &Phantom, b: f64, g: [f64; 3], ped_axis: usize) -> Result<Volume3> {
    check_encoding(b, g)?;
    let data = phantom.s0.iter().zip(&phantom.tensors).map(|(&s0, d)| signal(s0, d, b, g)).collect();
    Volume3::new(phantom.geom, ped_axis, data)
}

/// Voxelwise mean of [`simulate_signal`] over `encodings`, accumulated in f64 in the given order.
pub fn mean_signal(phantom: &Phantom, encodings: &[(f64, [f64; 3])], ped_axis: usize) -> Result<Volume3> {
    if encodings.is_empty() {
        return Err(Error::InvalidArgument("mean of zero volumes".into()));
    }
    for &(b, g) in encodings {
        check_encoding(b, g)?;
    }
    let n = encodings.len() as f64;
    let data = phantom
        .s0
        .par_iter()
        .zip(&phantom.tensors)
        .map(|(&s0, d)| (encodings.iter().map(|&(b, g)| signal(s0, d, b, g) as f64).sum::<f64>() / n) as f32)
        .collect();
    Volume3::new(phantom.geom, ped_axis, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_phantom() -> Phantom {
        build_phantom(&PhantomSpec::default(), &TissueParams::default()).unwrap()
    }

    fn idx(p: &Phantom, v: [usize; 3]) -> usize {
        p.geometry().index(v[0], v[1], v[2])
    }

    #[test]
    fn region_examples() {
        let p = default_phantom();
        let spec = PhantomSpec::default();
        // On the x axis through the centre, the outermost brain voxel is in the rim.
        let rim = [9, 31, 19];
        assert_eq!(p.labels()[idx(&p, rim)], Tissue::Csf);
        assert_eq!(p.tensors()[idx(&p, rim)], [3.0e-3, 0.0, 0.0, 3.0e-3, 0.0, 3.0e-3]);
        assert_eq!(p.s0()[idx(&p, [0, 0, 0])], 0.0);
        assert_eq!(p.tensors()[idx(&p, [0, 0, 0])], [0.0; 6]);

        let c = spec.slabs[2].center.map(|x| x.round() as usize);
        assert_eq!(p.labels()[idx(&p, c)], Tissue::WhiteMatter);
        let d = p.tensors()[idx(&p, c)];
        // Principal eigenvector (1,0,0): D e1 = λ∥ e1.
        assert!((d[0] - 1.7e-3).abs() < 1e-15 && d[1] == 0.0 && d[2] == 0.0);
        assert!((quadratic_form(&d, [0.0, 1.0, 0.0]) - 0.3e-3).abs() < 1e-15);
        assert_eq!(p.labels()[idx(&p, [31, 31, 19])], Tissue::Csf);
    }

    #[test]
    fn all_tissues_present() {
        let p = default_phantom();
        for t in [Tissue::Csf, Tissue::GrayMatter, Tissue::WhiteMatter, Tissue::Background] {
            assert!(p.tissue_mask(t).count() > 500, "{t:?}");
        }
    }

    #[test]
    fn overlap_is_rejected() {
        let mut spec = PhantomSpec::default();
        spec.slabs[0].center = spec.ventricle.center;
        assert!(matches!(build_phantom(&spec, &TissueParams::default()), Err(Error::Overlap(_))));

        let mut spec = PhantomSpec::default();
        spec.slabs[0].half_extent[0] = 30.0;
        assert!(matches!(build_phantom(&spec, &TissueParams::default()), Err(Error::Overlap(_))));
    }

    #[test]
    fn signal_examples() {
        let p = default_phantom();
        let b0 = simulate_signal(&p, 0.0, [0.0; 3], 1).unwrap();
        for (a, &s) in b0.data().iter().zip(p.s0()) {
            assert_eq!(*a, s as f32);
        }
        let csf = p.tissue_mask(Tissue::Csf);
        let gm = p.tissue_mask(Tissue::GrayMatter);
        for g in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]] {
            let s = simulate_signal(&p, 2000.0, g, 1).unwrap();
            for i in csf.indices() {
                assert!((s.data()[i] as f64 - (-6.0f64).exp()).abs() < 1e-6);
            }
            for i in gm.indices() {
                assert!((s.data()[i] as f64 - 0.75 * (-1.6f64).exp()).abs() < 1e-6);
            }
        }
        assert!((-6.0f64).exp() < 0.0025);
        assert!(simulate_signal(&p, 1000.0, [0.5, 0.0, 0.0], 1).is_err());
        assert!(simulate_signal(&p, -1.0, [0.0; 3], 1).is_err());
    }
}
