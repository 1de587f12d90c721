//! Synthetic multi-shell diffusion datasets with known distortions.
//!
//! A tensor phantom is imaged along the gradient table of an [`AcquisitionSpec`];
//! each volume is then distorted by a ground-truth [`EddyMotionTransform`] and
//! corrupted by Rician noise.

pub mod directions;
pub mod phantom;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_b0, DwiDataset, GradientTable};
use crate::error::{Error, Result};
use crate::evaluation::BinaryMask;
use crate::transform::{EddyMotionTransform, QuadEddyParams, RigidParams};
use crate::volume::{voxel_to_normalized, Geometry, Volume3};

pub use directions::{min_antipodal_angle, random_directions, uniform_directions};
pub use phantom::{build_phantom, build_phantom_sampled, mean_signal, simulate_signal, FiberSlab, Phantom, PhantomSpec, Tissue, TissueParams, TissueProps};

/// Tolerance used when inverting ground-truth transforms, in voxels.
const INVERT_TOL: f64 = 1e-9;
const MAX_REDRAWS: usize = 100;

// RNG stream namespaces.
const STREAM_BASE: u64 = 1;
const STREAM_RIGID: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_DIRECTIONS: u64 = 4;

/// Deterministic generator for one `(purpose, index)` pair of a dataset seed.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng
}

/// The generator behind volume `index`'s noise draws.
pub fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_NOISE, index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub n_b0: usize,
    /// `(b-value, number of directions)` per shell.
    pub shells: Vec<(f64, usize)>,
    pub ped_axis: usize,
    /// Euler angles (radians) applied to every direction set.
    #[serde(default)]
    pub direction_rotation: [f64; 3],
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            n_b0: 13,
            shells: vec![(650.0, 15), (1000.0, 30), (2000.0, 60)],
            ped_axis: 1,
            direction_rotation: [0.0; 3],
        }
    }
}

impl AcquisitionSpec {
    fn validate(&self) -> Result<()> {
        if self.ped_axis > 2 {
            return Err(Error::InvalidArgument(format!("ped_axis {} out of range", self.ped_axis)));
        }
        for &(b, n) in &self.shells {
            if !(b >= 0.0) || (b > 0.0 && n == 0) {
                return Err(Error::InvalidArgument(format!("invalid shell ({b}, {n})")));
            }
        }
        Ok(())
    }

    pub fn n_volumes(&self) -> usize {
        self.n_b0 + self.shells.iter().map(|s| s.1).sum::<usize>()
    }

    pub fn b_max(&self) -> f64 {
        self.shells.iter().map(|s| s.0).fold(0.0, f64::max)
    }

    /// b=0 volumes first, then each shell in order.
    pub fn gradient_table(&self, seed: u64) -> Result<GradientTable> {
        self.validate()?;
        let rot = RigidParams {
            euler: self.direction_rotation,
            trans: [0.0; 3],
        }
        .rotation();
        let mut bvals = vec![0.0; self.n_b0];
        let mut bvecs = vec![[0.0; 3]; self.n_b0];
        for (s, &(b, n)) in self.shells.iter().enumerate() {
            let dseed = stream_rng(seed, STREAM_DIRECTIONS, s as u64).random::<u64>();
            for g in uniform_directions(n, dseed) {
                bvals.push(b);
                bvecs.push([0, 1, 2].map(|i| rot[i][0] * g[0] + rot[i][1] * g[1] + rot[i][2] * g[2]));
            }
        }
        GradientTable::new(bvals, bvecs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    /// Half-widths of the uniform draws of the per-unit-gradient base coefficients.
    pub q_range: f64,
    pub l_range: f64,
    pub t_range: f64,
    /// Largest eddy displacement (voxels) allowed inside the brain; bases exceeding it are redrawn.
    pub max_displacement: f64,
    pub rotation_deg: f64,
    pub translation_mm: f64,
    /// Rician noise level as a fraction of the phantom's largest S0.
    pub noise_sigma: f64,
    /// Keep volume 0 undistorted so that it can serve as the registration reference.
    pub static_reference: bool,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self {
            q_range: 0.03,
            l_range: 0.05,
            t_range: 0.05,
            max_displacement: 4.0,
            rotation_deg: 1.0,
            translation_mm: 1.0,
            noise_sigma: 0.02,
            static_reference: true,
        }
    }
}

impl DistortionSpec {
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn eddy_only(mut self) -> Self {
        self.rotation_deg = 0.0;
        self.translation_mm = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        let v = [
            self.q_range,
            self.l_range,
            self.t_range,
            self.max_displacement,
            self.rotation_deg,
            self.translation_mm,
            self.noise_sigma,
        ];
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidArgument("distortion ranges must be >= 0".into()));
        }
        Ok(())
    }
}

/// Eddy coefficients per unit gradient along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EddyBase {
    pub per_axis: [QuadEddyParams; 3],
}

impl EddyBase {
    pub fn sample<R: Rng>(spec: &DistortionSpec, rng: &mut R) -> Self {
        let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        let per_axis = [0; 3].map(|_| QuadEddyParams {
            q: [0; 6].map(|_| u(spec.q_range)),
            l: [0; 3].map(|_| u(spec.l_range)),
            t: u(spec.t_range),
        });
        Self { per_axis }
    }

    /// `√(b / b_max) · Σ_k g_k c_k`; zero for b=0.
    pub fn eddy_for(&self, b: f64, g: [f64; 3], b_max: f64) -> QuadEddyParams {
        if is_b0(b) || b_max <= 0.0 {
            return QuadEddyParams::zero();
        }
        let s = (b / b_max).sqrt();
        let mut out = [0.0; 10];
        for (k, c) in self.per_axis.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(c.to_array()) {
                *o += s * g[k] * v;
            }
        }
        QuadEddyParams::from_slice(&out)
    }
}

fn sample_rigid<R: Rng>(spec: &DistortionSpec, rng: &mut R) -> RigidParams {
    let rot = spec.rotation_deg.to_radians();
    let tr = spec.translation_mm;
    let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
    RigidParams {
        euler: [0; 3].map(|_| u(rot)),
        trans: [0; 3].map(|_| u(tr)),
    }
}

/// Ground-truth transform for one volume: deterministic eddy part from `base`,
/// rigid part drawn from `rng` (redrawn while the result is not invertible).
#[allow(clippy::too_many_arguments)]
pub fn sample_distortion<R: Rng>(
    spec: &DistortionSpec,
    base: &EddyBase,
    b: f64,
    g: [f64; 3],
    b_max: f64,
    grid: &Geometry,
    ped_axis: usize,
    rng: &mut R,
) -> Result<EddyMotionTransform> {
    if !(b >= 0.0) {
        return Err(Error::InvalidArgument(format!("b-value {b} is negative")));
    }
    let eddy = base.eddy_for(b, g, b_max);
    for _ in 0..MAX_REDRAWS {
        let t = EddyMotionTransform::new(*grid, ped_axis, eddy, sample_rigid(spec, rng))?;
        if t.is_invertible(grid) {
            return Ok(t);
        }
    }
    Err(Error::NonInvertible(format!(
        "no invertible transform after {MAX_REDRAWS} draws (b={b})"
    )))
}

/// Image of `vol` under `t`: `distorted(y) = vol(t⁻¹(y))`.
///
/// Resampling `distorted` at `t(x)` then returns `vol(x)` up to interpolation.
pub fn apply_distortion(vol: &Volume3, t: &EddyMotionTransform) -> Result<Volume3> {
    distort_supersampled(vol, 1, vol.geometry(), t)
}

/// [`apply_distortion`] for an image `fine` held on a grid `factor` times finer than `grid`.
///
/// Each output voxel is a cubic interpolation of `fine` at the exact preimage of its centre.
pub fn distort_supersampled(fine: &Volume3, factor: usize, grid: &Geometry, t: &EddyMotionTransform) -> Result<Volume3> {
    check_fine_grid(fine, factor, grid)?;
    if !t.is_invertible(grid) {
        return Err(Error::NonInvertible("transform folds along the PED".into()));
    }
    let prep = t.prepare();
    let f = factor as f64;
    let mut data = Vec::with_capacity(grid.len());
    for v in grid.voxels() {
        let x = prep.invert(v.map(|c| c as f64), INVERT_TOL)?;
        data.push(fine.sample_cubic(x.map(|c| c * f)) as f32);
    }
    Volume3::new(*grid, fine.ped_axis(), data)
}

/// Values of `fine` at the voxels of `grid` (every `factor`-th sample).
pub fn decimate(fine: &Volume3, factor: usize, grid: &Geometry) -> Result<Volume3> {
    check_fine_grid(fine, factor, grid)?;
    Volume3::from_fn(*grid, fine.ped_axis(), |[i, j, k]| {
        fine.get(i * factor, j * factor, k * factor) as f64
    })
}

fn check_fine_grid(fine: &Volume3, factor: usize, grid: &Geometry) -> Result<()> {
    let expected = grid.dims.map(|n| (n - 1) * factor + 1);
    if factor == 0 || fine.dims() != expected {
        return Err(Error::GeometryMismatch(format!(
            "fine grid {:?} does not refine {:?} by {factor}",
            fine.dims(),
            grid.dims
        )));
    }
    Ok(())
}

/// Rician corruption `√((S + n₁)² + n₂²)` with `n ~ N(0, (sigma·s0_ref)²)`.
pub fn add_noise<R: Rng>(vol: &Volume3, sigma: f64, s0_ref: f64, rng: &mut R) -> Result<Volume3> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(vol.map(f32::abs));
    }
    let normal = Normal::new(0.0, sigma * s0_ref).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = vol
        .data()
        .iter()
        .map(|&s| {
            let n1: f64 = normal.sample(rng);
            let n2: f64 = normal.sample(rng);
            ((s as f64 + n1).hypot(n2)) as f32
        })
        .collect();
    vol.with_data(data)
}

/// Largest eddy displacement magnitude (voxels) over the set voxels of `mask`.
pub fn max_eddy_displacement(eddy: &QuadEddyParams, mask: &BinaryMask, ped_axis: usize) -> f64 {
    let g = mask.geometry();
    let h = (g.dims[ped_axis] as f64 - 1.0) / 2.0;
    mask.indices()
        .map(|i| {
            let p = g.coords(i).map(|c| c as f64);
            (eddy.displacement(voxel_to_normalized(g, p)) * h).abs()
        })
        .fold(0.0, f64::max)
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub tissues: TissueParams,
    #[serde(default)]
    pub acquisition: AcquisitionSpec,
    #[serde(default)]
    pub distortion: DistortionSpec,
}

impl SimulationConfig {
    pub fn generate(&self, seed: u64) -> Result<SimulationOutput> {
        generate_dataset(&self.phantom, &self.tissues, &self.acquisition, &self.distortion, seed)
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    /// Distorted volumes with noise.
    pub dataset: DwiDataset,
    /// Distorted volumes before noise.
    pub distorted_clean: Vec<Volume3>,
    /// Undistorted, noiseless volumes.
    pub clean: Vec<Volume3>,
    pub transforms: Vec<EddyMotionTransform>,
    /// `(mean b, mean of clean volumes)` per shell, b=0 included.
    pub powder: Vec<(f64, Volume3)>,
    /// The powder averages on the supersampled grid.
    pub fine_powder: Vec<(f64, Volume3)>,
    /// Refinement factor of the supersampled grid.
    pub supersample: usize,
    pub phantom: Phantom,
    pub eddy_base: EddyBase,
    /// Noise scale reference (largest S0).
    pub s0_ref: f64,
    /// Noise standard deviation as a fraction of `s0_ref`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SimulationOutput {
    pub fn powder_average(&self, b: f64) -> Option<&Volume3> {
        find_shell(&self.powder, b)
    }

    pub fn fine_powder_average(&self, b: f64) -> Option<&Volume3> {
        find_shell(&self.fine_powder, b)
    }

    pub fn brain_mask(&self) -> BinaryMask {
        self.phantom.brain_mask()
    }
}

fn find_shell(powder: &[(f64, Volume3)], b: f64) -> Option<&Volume3> {
    powder
        .iter()
        .find(|(sb, _)| (sb - b).abs() <= crate::dataset::SHELL_TOLERANCE)
        .map(|(_, v)| v)
}

/// Voxelwise mean of `vols`, accumulated in f64 in the given order.
pub fn mean_volume(vols: &[&Volume3]) -> Result<Volume3> {
    let first = vols.first().ok_or_else(|| Error::InvalidArgument("mean of zero volumes".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for v in vols {
        first.check_same_grid(v, "mean_volume")?;
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += x as f64;
        }
    }
    let n = vols.len() as f64;
    first.with_data(acc.into_iter().map(|a| (a / n) as f32).collect())
}

fn draw_base(
    spec: &DistortionSpec,
    table: &GradientTable,
    b_max: f64,
    grid: &Geometry,
    ped_axis: usize,
    brain: &BinaryMask,
    seed: u64,
) -> Result<EddyBase> {
    let mut rng = stream_rng(seed, STREAM_BASE, 0);
    'draw: for _ in 0..MAX_REDRAWS {
        let base = EddyBase::sample(spec, &mut rng);
        for (&b, &g) in table.bvals().iter().zip(table.bvecs()) {
            let eddy = base.eddy_for(b, g, b_max);
            let t = EddyMotionTransform::new(*grid, ped_axis, eddy, RigidParams::identity())?;
            if !t.is_invertible(grid) || max_eddy_displacement(&eddy, brain, ped_axis) > spec.max_displacement {
                continue 'draw;
            }
        }
        return Ok(base);
    }
    Err(Error::NonInvertible(format!(
        "no admissible eddy base after {MAX_REDRAWS} draws"
    )))
}

/// Build phantom, gradient table, ground-truth transforms and images.
///
/// Each volume uses its own RNG streams, so the output does not depend on the
/// number of worker threads.
pub fn generate_dataset(
    phantom_spec: &PhantomSpec,
    tissues: &TissueParams,
    acq: &AcquisitionSpec,
    dist: &DistortionSpec,
    seed: u64,
) -> Result<SimulationOutput> {
    dist.validate()?;
    let phantom = build_phantom(phantom_spec, tissues)?;
    let factor = phantom_spec.supersample;
    let imaged = build_phantom_sampled(phantom_spec, tissues, factor)?.blurred(phantom_spec.psf_sigma * factor as f64)?;
    let grid = *phantom.geometry();
    let ped = acq.ped_axis;
    let table = acq.gradient_table(seed)?;
    let b_max = acq.b_max();
    let brain = phantom.brain_mask();
    let base = draw_base(dist, &table, b_max, &grid, ped, &brain, seed)?;
    let s0_ref = phantom.s0_ref();

    let per_volume: Vec<(EddyMotionTransform, Volume3, Volume3, Volume3)> = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let (b, g) = table.entry(i);
            let t = if i == 0 && dist.static_reference {
                EddyMotionTransform::new(grid, ped, base.eddy_for(b, g, b_max), RigidParams::identity())?
            } else {
                let mut rng = stream_rng(seed, STREAM_RIGID, i as u64);
                sample_distortion(dist, &base, b, g, b_max, &grid, ped, &mut rng)?
            };
            let fine = simulate_signal(&imaged, b, g, ped)?;
            let clean = decimate(&fine, factor, &grid)?;
            let distorted = distort_supersampled(&fine, factor, &grid, &t)?;
            let noisy = add_noise(&distorted, dist.noise_sigma, s0_ref, &mut noise_rng(seed, i as u64))?;
            Ok((t, clean, distorted, noisy))
        })
        .collect::<Result<_>>()?;

    let mut transforms = Vec::with_capacity(per_volume.len());
    let mut clean = Vec::with_capacity(per_volume.len());
    let mut distorted_clean = Vec::with_capacity(per_volume.len());
    let mut noisy = Vec::with_capacity(per_volume.len());
    for (t, c, d, n) in per_volume {
        transforms.push(t);
        clean.push(c);
        distorted_clean.push(d);
        noisy.push(n);
    }
    let shells = table.shells();
    let powder = shells
        .iter()
        .map(|(b, idx)| {
            let vols: Vec<&Volume3> = idx.iter().map(|&i| &clean[i]).collect();
            Ok((*b, mean_volume(&vols)?))
        })
        .collect::<Result<_>>()?;
    let fine_powder = shells
        .iter()
        .map(|(b, idx)| {
            let encodings: Vec<(f64, [f64; 3])> = idx.iter().map(|&i| table.entry(i)).collect();
            Ok((*b, mean_signal(&imaged, &encodings, ped)?))
        })
        .collect::<Result<_>>()?;
    Ok(SimulationOutput {
        dataset: DwiDataset::new(noisy, table)?,
        distorted_clean,
        clean,
        transforms,
        powder,
        fine_powder,
        supersample: factor,
        phantom,
        eddy_base: base,
        s0_ref,
        noise_sigma: dist.noise_sigma,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{erode, mae};

    fn small_config() -> SimulationConfig {
        SimulationConfig {
            phantom: PhantomSpec::scaled_down(),
            acquisition: AcquisitionSpec {
                n_b0: 2,
                shells: vec![(650.0, 3), (2000.0, 6)],
                ..Default::default()
            },
            distortion: DistortionSpec {
                max_displacement: 2.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Full-size phantom with a short protocol.
    fn default_grid_config() -> SimulationConfig {
        SimulationConfig {
            acquisition: AcquisitionSpec {
                n_b0: 2,
                shells: vec![(650.0, 3), (2000.0, 6)],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn b0_has_zero_eddy_and_rigid_is_drawn() {
        let spec = DistortionSpec::default();
        let mut rng = stream_rng(1, 0, 0);
        let base = EddyBase::sample(&spec, &mut rng);
        let grid = Geometry::isotropic([64, 64, 40], 2.0).unwrap();
        let t = sample_distortion(&spec, &base, 0.0, [0.0; 3], 2000.0, &grid, 1, &mut rng).unwrap();
        assert!(t.eddy.is_zero());
        assert!(!t.rigid.is_identity());
    }

    #[test]
    fn eddy_scaling_rule() {
        let spec = DistortionSpec::default();
        let base = EddyBase::sample(&spec, &mut stream_rng(2, 0, 0));
        let g = [0.48, -0.6, 0.64];
        let neg = g.map(|c| -c);
        let a = base.eddy_for(1000.0, g, 2000.0).to_array();
        let b = base.eddy_for(1000.0, neg, 2000.0).to_array();
        for k in 0..10 {
            assert!((a[k] + b[k]).abs() < 1e-15);
        }
        let lo = base.eddy_for(650.0, g, 2000.0).to_array();
        let hi = base.eddy_for(2000.0, g, 2000.0).to_array();
        let norm = |v: &[f64; 10]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&lo) / norm(&hi) - (650.0f64 / 2000.0).sqrt()).abs() < 1e-12);
        assert!(((650.0f64 / 2000.0).sqrt() - 0.570).abs() < 1e-3);
    }

    #[test]
    fn identity_distortion_is_bitwise() {
        let g = Geometry::isotropic([10, 12, 8], 2.0).unwrap();
        let vol = Volume3::from_fn(g, 1, |[i, j, k]| (i * 7 + j * 3 + k) as f64 * 0.1).unwrap();
        let t = EddyMotionTransform::identity(g, 1).unwrap();
        assert_eq!(apply_distortion(&vol, &t).unwrap(), vol);
    }

    #[test]
    fn translation_round_trip_sets_sign() {
        // Content of a +2 voxel t-shift moves to +2 along the PED.
        let g = Geometry::isotropic([8, 20, 6], 2.0).unwrap();
        let vol = Volume3::from_fn(g, 1, |[_, j, _]| if j == 8 { 1.0 } else { 0.0 }).unwrap();
        let mut t = EddyMotionTransform::identity(g, 1).unwrap();
        t.eddy.t = 2.0 / 9.5;
        let d = apply_distortion(&vol, &t).unwrap();
        assert!((d.get(3, 10, 2) - 1.0).abs() < 1e-6);
        assert!(d.get(3, 8, 2).abs() < 1e-6);
    }

    #[test]
    fn distort_then_correct_round_trip() {
        let cfg = default_grid_config();
        let out = cfg.generate(5).unwrap();
        let interior = erode(&out.brain_mask(), 2);
        for i in 0..out.clean.len() {
            let t = out.transforms[i].prepare();
            let d = &out.distorted_clean[i];
            let corrected = Volume3::from_fn(*d.geometry(), 1, |v| d.sample_with_gradient(t.apply(v.map(|c| c as f64))).0).unwrap();
            let (lo, hi) = out.clean[i].min_max();
            let err = mae(&corrected, &out.clean[i], &interior).unwrap();
            assert!(err < 0.02 * (hi - lo) as f64, "volume {i}: {err}");
        }
    }

    #[test]
    fn rayleigh_floor_mean() {
        let g = Geometry::isotropic([100, 100, 10], 1.0).unwrap();
        let zero = Volume3::zeros(g, 1).unwrap();
        let mut rng = stream_rng(9, 0, 0);
        let n = add_noise(&zero, 0.02, 1.5, &mut rng).unwrap();
        assert!(n.data().iter().all(|&v| v >= 0.0));
        let mean = n.data().iter().map(|&v| v as f64).sum::<f64>() / n.len() as f64;
        let expect = 0.02 * 1.5 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / expect - 1.0).abs() < 0.01, "{mean} vs {expect}");
    }

    #[test]
    fn zero_sigma_keeps_magnitude() {
        let g = Geometry::isotropic([4, 4, 4], 1.0).unwrap();
        let v = Volume3::from_fn(g, 1, |[i, j, k]| i as f64 - j as f64 * k as f64).unwrap();
        let n = add_noise(&v, 0.0, 1.0, &mut stream_rng(0, 0, 0)).unwrap();
        assert_eq!(n, v.map(f32::abs));
    }

    #[test]
    fn default_protocol_has_118_volumes() {
        let acq = AcquisitionSpec::default();
        assert_eq!(acq.n_volumes(), 118);
        let t = acq.gradient_table(0).unwrap();
        assert_eq!(t.len(), 118);
        assert_eq!(t.b0_indices().len(), 13);
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = small_config();
        let a = cfg.generate(3).unwrap();
        let b = cfg.generate(3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.transforms, b.transforms);
        let c = cfg.generate(4).unwrap();
        assert_ne!(a.dataset, c.dataset);
        assert_eq!(a.dataset.len(), 11);
        assert_eq!(a.transforms[0], EddyMotionTransform::identity(*a.phantom.geometry(), 1).unwrap());
        for (i, t) in a.transforms.iter().enumerate() {
            assert!(t.is_invertible(a.phantom.geometry()));
            assert_eq!(t.eddy.is_zero(), is_b0(a.dataset.table.bvals()[i]));
        }
        assert_eq!(a.powder.len(), 3);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small_config();
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| cfg.generate(8).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn powder_average_is_direction_independent() {
        let mut cfg = small_config();
        cfg.acquisition.shells = vec![(2000.0, 60)];
        cfg.distortion = cfg.distortion.noiseless();
        let a = cfg.generate(6).unwrap();
        cfg.acquisition.direction_rotation = [0.4, -0.7, 1.1];
        let b = cfg.generate(6).unwrap();
        let (pa, pb) = (a.powder_average(2000.0).unwrap(), b.powder_average(2000.0).unwrap());
        let (lo, hi) = pa.min_max();
        let full = BinaryMask::full(*pa.geometry());
        let err = mae(pa, pb, &full).unwrap();
        assert!(err < 0.01 * (hi - lo) as f64, "{err}");
    }

    #[test]
    fn csf_vanishes_at_b2000() {
        let mut cfg = default_grid_config();
        cfg.acquisition.shells = vec![(2000.0, 12)];
        let out = cfg.generate(1).unwrap();
        let csf = out.phantom.tissue_mask(Tissue::Csf);
        let wm = out.phantom.tissue_mask(Tissue::WhiteMatter);
        for i in out.dataset.table.shell_indices(2000.0).unwrap() {
            let v = &out.clean[i];
            let mean = |m: &BinaryMask| m.indices().map(|j| v.data()[j] as f64).sum::<f64>() / m.count() as f64;
            assert!(mean(&csf) < 0.05 * mean(&wm));
        }
    }
}
