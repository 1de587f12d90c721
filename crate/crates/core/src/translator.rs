//! Contrast translation towards the orientation-averaged `b_ref` appearance.
//!
//! Registration compares every volume with a common reference, which only works
//! once contrast differences between b-values and gradient directions are
//! removed. Three interchangeable translators are provided: a pass-through, a
//! monotone histogram match to a template, and an oracle that uses simulation
//! ground truth.

use crate::dataset::DwiDataset;
use crate::error::{Error, Result};
use crate::evaluation::foreground_mask;
use crate::simulator::{add_noise, decimate, distort_supersampled, mean_volume, noise_rng, SimulationOutput};
use crate::transform::EddyMotionTransform;
use crate::volume::{Geometry, Volume3};

/// Foreground threshold as a fraction of the 99th percentile.
pub const FOREGROUND_FRACTION: f64 = 0.05;
pub const DEFAULT_QUANTILES: usize = 256;
pub const DEFAULT_B_REF: f64 = 2000.0;

/// What a translator may know about the volume it maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeMeta {
    pub index: usize,
    pub b: f64,
    pub g: [f64; 3],
}

impl VolumeMeta {
    pub fn of(dataset: &DwiDataset, index: usize) -> Self {
        let (b, g) = dataset.table.entry(index);
        Self { index, b, g }
    }
}

#[derive(Debug, Clone)]
pub enum TranslatorKind {
    Identity,
    HistogramMatch(HistogramMatch),
    Oracle(OracleTranslator),
}

impl TranslatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            TranslatorKind::Identity => "identity",
            TranslatorKind::HistogramMatch(_) => "histogram_match",
            TranslatorKind::Oracle(_) => "oracle",
        }
    }
}

pub fn translate(kind: &TranslatorKind, vol: &Volume3, meta: &VolumeMeta) -> Result<Volume3> {
    match kind {
        TranslatorKind::Identity => Ok(vol.clone()),
        TranslatorKind::HistogramMatch(h) => h.apply(vol),
        TranslatorKind::Oracle(o) => o.apply(vol, meta),
    }
}

/// Evenly spaced quantiles (linear interpolation) of `sorted`.
fn quantiles(sorted: &[f64], n: usize) -> Vec<f64> {
    let last = (sorted.len() - 1) as f64;
    (0..n)
        .map(|k| {
            let pos = k as f64 / (n - 1) as f64 * last;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect()
}

fn foreground_quantiles(vol: &Volume3, n: usize) -> Result<Vec<f64>> {
    let mask = foreground_mask(vol, FOREGROUND_FRACTION);
    let mut v: Vec<f64> = mask.indices().map(|i| vol.data()[i] as f64).collect();
    if v.is_empty() {
        return Err(Error::EmptyMask("no foreground voxels to match".into()));
    }
    v.sort_by(f64::total_cmp);
    Ok(quantiles(&v, n))
}

/// Monotone intensity remapping onto the foreground quantiles of a template.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramMatch {
    template_quantiles: Vec<f64>,
}

impl HistogramMatch {
    pub fn new(template: &Volume3, n_quantiles: usize) -> Result<Self> {
        if n_quantiles < 2 {
            return Err(Error::InvalidArgument(format!("n_quantiles must be >= 2, got {n_quantiles}")));
        }
        Ok(Self {
            template_quantiles: foreground_quantiles(template, n_quantiles)?,
        })
    }

    pub fn n_quantiles(&self) -> usize {
        self.template_quantiles.len()
    }

    pub fn template_quantiles(&self) -> &[f64] {
        &self.template_quantiles
    }

    /// The piecewise-linear map taking `vol`'s foreground quantiles to the template's.
    pub fn mapping_for(&self, vol: &Volume3) -> Result<QuantileMap> {
        let xs = foreground_quantiles(vol, self.n_quantiles())?;
        QuantileMap::new(xs, self.template_quantiles.clone())
    }

    pub fn apply(&self, vol: &Volume3) -> Result<Volume3> {
        let map = self.mapping_for(vol)?;
        Ok(vol.map(|v| map.eval(v as f64) as f32))
    }
}

/// Non-decreasing piecewise-linear function through `(xs[k], ys[k])`.
///
/// Below the first landmark it scales towards the origin, above the last it
/// continues with the ratio of the last landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl QuantileMap {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::InvalidArgument("quantile map needs matching landmark lists".into()));
        }
        if xs.windows(2).any(|w| w[1] < w[0]) || ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("quantile landmarks must be non-decreasing".into()));
        }
        Ok(Self { xs, ys })
    }

    pub fn eval(&self, v: f64) -> f64 {
        let (xs, ys) = (&self.xs, &self.ys);
        let n = xs.len();
        if v <= xs[0] {
            return if xs[0] > 0.0 && ys[0] >= 0.0 {
                v * ys[0] / xs[0]
            } else {
                ys[0] + (v - xs[0])
            };
        }
        if v >= xs[n - 1] {
            return if xs[n - 1] > 0.0 && ys[n - 1] >= 0.0 {
                ys[n - 1] + (v - xs[n - 1]) * ys[n - 1] / xs[n - 1]
            } else {
                ys[n - 1] + (v - xs[n - 1])
            };
        }
        // First landmark strictly above v; xs[k-1] <= v < xs[k].
        let k = xs.partition_point(|&x| x <= v);
        let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
        y0 + (v - x0) / (x1 - x0) * (y1 - y0)
    }
}

/// Noise the oracle reproduces: the simulator's per-volume complex noise draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleNoise {
    pub seed: u64,
    /// Noise standard deviation as a fraction of `s0_ref`.
    pub sigma: f64,
    pub s0_ref: f64,
}

/// Ground-truth translation: the `b_ref` powder average carried through the
/// volume's true distortion, optionally with that volume's noise realisation.
#[derive(Debug, Clone)]
pub struct OracleTranslator {
    target: Volume3,
    /// Refinement of `target` relative to the acquisition grid.
    factor: usize,
    grid: Geometry,
    transforms: Vec<EddyMotionTransform>,
    noise: Option<OracleNoise>,
}

impl OracleTranslator {
    pub fn new(target: Volume3, transforms: Vec<EddyMotionTransform>, noise: Option<OracleNoise>) -> Result<Self> {
        let grid = *target.geometry();
        Self::supersampled(target, 1, grid, transforms, noise)
    }

    /// Oracle whose target lives on a grid `factor` times finer than `grid`.
    pub fn supersampled(
        target: Volume3,
        factor: usize,
        grid: Geometry,
        transforms: Vec<EddyMotionTransform>,
        noise: Option<OracleNoise>,
    ) -> Result<Self> {
        // Rejects a target that does not refine `grid`.
        decimate(&target, factor, &grid)?;
        for t in &transforms {
            if !t.geometry().matches(&grid) {
                return Err(Error::GeometryMismatch("oracle transform not bound to the target grid".into()));
            }
        }
        Ok(Self {
            target,
            factor,
            grid,
            transforms,
            noise,
        })
    }

    /// Oracle from simulation output, reproducing each volume's noise draws.
    pub fn from_simulation(sim: &SimulationOutput, b_ref: f64) -> Result<Self> {
        let target = sim
            .fine_powder_average(b_ref)
            .ok_or_else(|| Error::Missing(format!("no ground-truth powder average for b={b_ref}")))?
            .clone();
        let noise = (sim.noise_sigma > 0.0).then_some(OracleNoise {
            seed: sim.seed,
            sigma: sim.noise_sigma,
            s0_ref: sim.s0_ref,
        });
        let grid = *sim.phantom.geometry();
        Self::supersampled(target, sim.supersample, grid, sim.transforms.clone(), noise)
    }

    fn apply(&self, vol: &Volume3, meta: &VolumeMeta) -> Result<Volume3> {
        let t = self
            .transforms
            .get(meta.index)
            .ok_or_else(|| Error::Missing(format!("no ground-truth transform for volume {}", meta.index)))?;
        if !vol.geometry().matches(&self.grid) {
            return Err(Error::GeometryMismatch("oracle translation: volume is not on the oracle grid".into()));
        }
        let warped = distort_supersampled(&self.target, self.factor, &self.grid, t)?.with_ped_axis(vol.ped_axis())?;
        match self.noise {
            None => Ok(warped),
            Some(n) => add_noise(&warped, n.sigma, n.s0_ref, &mut noise_rng(n.seed, meta.index as u64)),
        }
    }
}

/// Voxelwise mean of the volumes in the `b_ref` shell.
pub fn build_template(dataset: &DwiDataset, b_ref: f64) -> Result<Volume3> {
    let idx = dataset
        .table
        .shell_indices(b_ref)
        .ok_or_else(|| Error::Missing(format!("dataset has no b={b_ref} shell")))?;
    let vols: Vec<&Volume3> = idx.iter().map(|&i| &dataset.volumes[i]).collect();
    mean_volume(&vols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GradientTable;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(seed: u64, gain: f64) -> Volume3 {
        let g = Geometry::isotropic([16, 16, 12], 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(g, 1, |[i, j, k]| {
            let r2 = (i as f64 - 7.5).powi(2) + (j as f64 - 7.5).powi(2) + (k as f64 - 5.5).powi(2);
            let base = if r2 < 36.0 { gain * (1.0 + 0.05 * i as f64) } else { 0.0 };
            base + rng.random_range(0.0..0.01)
        })
        .unwrap()
    }

    fn meta() -> VolumeMeta {
        VolumeMeta {
            index: 0,
            b: 1000.0,
            g: [1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn identity_passes_through() {
        let v = blob(1, 1.0);
        assert_eq!(translate(&TranslatorKind::Identity, &v, &meta()).unwrap(), v);
    }

    #[test]
    fn histogram_fixed_point() {
        let t = blob(2, 1.0);
        let h = HistogramMatch::new(&t, DEFAULT_QUANTILES).unwrap();
        let out = h.apply(&t).unwrap();
        let q = h.template_quantiles();
        let width = (q[q.len() - 1] - q[0]) / (q.len() - 1) as f64;
        let err: f64 = out.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / t.len() as f64;
        assert!(err < width, "{err} vs {width}");
        assert!(HistogramMatch::new(&t, 1).is_err());
    }

    #[test]
    fn histogram_matches_scaled_input_and_is_monotone() {
        let t = blob(3, 0.2);
        let h = HistogramMatch::new(&t, 64).unwrap();
        let v = blob(4, 3.0);
        let out = h.apply(&v).unwrap();
        let mut pairs: Vec<(f32, f32)> = v.data().iter().copied().zip(out.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
        // The brightest voxels land near the template's brightest.
        let (_, hi_t) = t.min_max();
        let (_, hi_o) = out.min_max();
        assert!((hi_o - hi_t).abs() < 0.02 * hi_t);
    }

    #[test]
    fn translation_commutes_with_voxel_permutation() {
        let t = blob(5, 1.0);
        let h = TranslatorKind::HistogramMatch(HistogramMatch::new(&t, 32).unwrap());
        let v = blob(6, 2.0);
        let n = v.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7919) % n).collect();
        let permuted = v.with_data(perm.iter().map(|&p| v.data()[p]).collect()).unwrap();
        for kind in [TranslatorKind::Identity, h] {
            let a = translate(&kind, &v, &meta()).unwrap();
            let b = translate(&kind, &permuted, &meta()).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                assert_eq!(b.data()[i], a.data()[p]);
            }
        }
    }

    #[test]
    fn oracle_identity_returns_target() {
        let target = blob(7, 1.0);
        let id = EddyMotionTransform::for_volume(&target);
        let o = TranslatorKind::Oracle(OracleTranslator::new(target.clone(), vec![id], None).unwrap());
        let v = blob(8, 4.0);
        assert_eq!(translate(&o, &v, &meta()).unwrap(), target);
        let missing = VolumeMeta { index: 3, ..meta() };
        assert!(translate(&o, &v, &missing).is_err());
    }

    #[test]
    fn template_examples() {
        let a = blob(9, 1.0);
        let b = blob(10, 2.0);
        let table = GradientTable::new(vec![0.0, 2000.0, 2000.0], vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let ds = DwiDataset::new(vec![a.clone(), a.clone(), b.clone()], table).unwrap();
        let t = build_template(&ds, 2000.0).unwrap();
        for ((x, y), m) in a.data().iter().zip(b.data()).zip(t.data()) {
            assert!(((x + y) / 2.0 - m).abs() < 1e-6);
        }
        assert_eq!(build_template(&ds, 0.0).unwrap(), a);
        assert!(matches!(build_template(&ds, 1000.0), Err(Error::Missing(_))));
    }

    #[test]
    fn quantile_map_extrapolates_monotonically() {
        let m = QuantileMap::new(vec![1.0, 2.0, 2.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(m.eval(0.5), 5.0);
        assert_eq!(m.eval(1.5), 15.0);
        assert_eq!(m.eval(3.0), 35.0);
        assert_eq!(m.eval(5.0), 50.0);
        assert!(QuantileMap::new(vec![2.0, 1.0], vec![0.0, 1.0]).is_err());
    }
}
