//! MSE registration of translated volumes and resampling-based correction.
//!
//! For each volume the sixteen transform parameters minimise
//! `(1/N) Σ_mask (moving(T(x)) - reference(x))²` over a Gaussian pyramid, coarse to
//! fine, starting from the identity. Two optimisers are available: damped
//! Gauss-Newton (Levenberg-Marquardt) and Adam. Both only accept steps that lower
//! the loss.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_b0, DwiDataset};
use crate::error::{Error, Result};
use crate::evaluation::{threshold_mask, BinaryMask};
use crate::transform::{EddyMotionTransform, PreparedTransform, IDX_T, IDX_TRANS, N_EDDY, N_PARAMS};
use crate::translator::{translate, TranslatorKind, VolumeMeta, FOREGROUND_FRACTION};
use crate::volume::{gaussian_pyramid, Geometry, Volume3};

const PYRAMID_SIGMA: f64 = 1.0;
const MAX_DAMPING: f64 = 1e10;
const DIVERGENCE_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GaussNewton,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub optimizer: Optimizer,
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    pub adam_lr: f64,
    /// Initial Levenberg damping, multiplied or divided by `damping_factor`.
    pub damping: f64,
    pub damping_factor: f64,
    /// Stop when the relative loss decrease over `tol_window` accepted steps is below this.
    pub tol: f64,
    pub tol_window: usize,
    pub levels: usize,
    /// Parameters held at their initial value.
    pub fixed: [bool; N_PARAMS],
    /// L2 weight on all free parameters.
    pub regularization: f64,
    /// L2 weight on eddy `t` when it and the PED translation are both free.
    pub gauge_weight: f64,
    /// Loss mask threshold (fraction of the mask source's 99th percentile); `None` uses every voxel.
    pub mask_fraction: Option<f64>,
    /// Gaussian width (voxels) applied to both images at the finest level.
    pub smoothing: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::GaussNewton,
            max_iters: 200,
            adam_lr: 1e-2,
            damping: 1e-3,
            damping_factor: 10.0,
            tol: 1e-7,
            tol_window: 5,
            levels: 3,
            fixed: [false; N_PARAMS],
            regularization: 0.0,
            gauge_weight: 1e-6,
            mask_fraction: Some(FOREGROUND_FRACTION),
            smoothing: 1.0,
        }
    }
}

impl RegistrationConfig {
    /// Rigid parameters frozen at identity, in addition to any already frozen.
    pub fn eddy_only(mut self) -> Self {
        self.fixed[N_EDDY..].iter_mut().for_each(|f| *f = true);
        self
    }

    /// Eddy parameters frozen at zero, in addition to any already frozen.
    pub fn rigid_only(mut self) -> Self {
        self.fixed[..N_EDDY].iter_mut().for_each(|f| *f = true);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("levels must be >= 1".into()));
        }
        if self.fixed.iter().all(|&f| f) {
            return Err(Error::InvalidArgument("all parameters are fixed".into()));
        }
        if self.tol_window == 0 || !(self.damping_factor > 1.0) || !(self.damping >= 0.0) || !(self.adam_lr > 0.0) {
            return Err(Error::InvalidArgument("invalid optimizer settings".into()));
        }
        if !(self.regularization >= 0.0) || !(self.gauge_weight >= 0.0) {
            return Err(Error::InvalidArgument("regularization weights must be >= 0".into()));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::InvalidArgument(format!("smoothing {} is negative", self.smoothing)));
        }
        if let Some(f) = self.mask_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("mask fraction {f} not in (0, 1)")));
            }
        }
        Ok(())
    }

    fn free(&self) -> Vec<usize> {
        (0..N_PARAMS).filter(|&i| !self.fixed[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelTrace {
    pub level: usize,
    pub dims: [usize; 3],
    /// Loss after every accepted step, starting with the level's initial loss.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: EddyMotionTransform,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<LevelTrace>,
    pub converged: bool,
}

impl RegistrationResult {
    pub fn identity(geom: Geometry, ped_axis: usize) -> Result<Self> {
        Ok(Self {
            transform: EddyMotionTransform::identity(geom, ped_axis)?,
            initial_loss: 0.0,
            final_loss: 0.0,
            trace: Vec::new(),
            converged: true,
        })
    }
}

/// One pyramid level: moving image plus the masked reference samples.
struct Level {
    moving: Volume3,
    /// Level-0 voxel coordinates of each masked level voxel and the reference value there.
    samples: Vec<([f64; 3], f64)>,
    /// `x0 = scale·x_l + offset` per axis.
    scale: [f64; 3],
    offset: [f64; 3],
}

struct Eval {
    mse: f64,
    grad: [f64; N_PARAMS],
    /// Gauss-Newton matrix over the free parameters, row-major.
    hess: Vec<f64>,
}

impl Level {
    fn new(moving: Volume3, reference: &Volume3, mask: &BinaryMask, base: &Geometry) -> Result<Self> {
        moving.check_same_grid(reference, "registration level")?;
        let g = *reference.geometry();
        if mask.is_empty() {
            return Err(Error::EmptyMask("registration loss mask".into()));
        }
        if !mask.geometry().matches(&g) {
            return Err(Error::GeometryMismatch("loss mask grid differs from the reference".into()));
        }
        let scale = [0, 1, 2].map(|a| g.spacing[a] / base.spacing[a]);
        let offset = [0, 1, 2].map(|a| (g.origin[a] - base.origin[a]) / base.spacing[a]);
        let samples = mask
            .indices()
            .map(|i| {
                let v = g.coords(i);
                let x0 = [0, 1, 2].map(|a| scale[a] * v[a] as f64 + offset[a]);
                (x0, reference.data()[i] as f64)
            })
            .collect();
        Ok(Self {
            moving,
            samples,
            scale,
            offset,
        })
    }

    #[inline]
    fn to_level(&self, y0: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (y0[a] - self.offset[a]) / self.scale[a])
    }

    fn mse(&self, prep: &PreparedTransform) -> f64 {
        let mut acc = 0.0;
        for &(x0, r) in &self.samples {
            let y = self.to_level(prep.apply(x0));
            let d = self.moving.sample_with_gradient(y).0 - r;
            acc += d * d;
        }
        acc / self.samples.len() as f64
    }

    fn evaluate(&self, prep: &PreparedTransform, free: &[usize]) -> Eval {
        let nf = free.len();
        let mut grad = [0.0; N_PARAMS];
        let mut hess = vec![0.0; nf * nf];
        let mut jf = vec![0.0; nf];
        let mut acc = 0.0;
        for &(x0, r) in &self.samples {
            let (y0, jac) = prep.apply_with_jacobian(x0);
            let (m, dm) = self.moving.sample_with_gradient(self.to_level(y0));
            let res = m - r;
            acc += res * res;
            let w = [0, 1, 2].map(|a| dm[a] / self.scale[a]);
            for (slot, &p) in jf.iter_mut().zip(free) {
                let j = &jac[p];
                *slot = w[0] * j[0] + w[1] * j[1] + w[2] * j[2];
            }
            for a in 0..nf {
                grad[free[a]] += res * jf[a];
                let row = &mut hess[a * nf..(a + 1) * nf];
                for b in a..nf {
                    row[b] += jf[a] * jf[b];
                }
            }
        }
        let n = self.samples.len() as f64;
        for g in grad.iter_mut() {
            *g *= 2.0 / n;
        }
        for a in 0..nf {
            for b in a..nf {
                let v = hess[a * nf + b] * 2.0 / n;
                hess[a * nf + b] = v;
                hess[b * nf + a] = v;
            }
        }
        Eval {
            mse: acc / n,
            grad,
            hess,
        }
    }

    /// RMS level-0 voxel displacement per unit change of each parameter, at `prep`.
    fn parameter_scales(&self, prep: &PreparedTransform) -> [f64; N_PARAMS] {
        let mut acc = [0.0; N_PARAMS];
        for &(x0, _) in &self.samples {
            let (_, jac) = prep.apply_with_jacobian(x0);
            for (a, j) in acc.iter_mut().zip(jac.iter()) {
                *a += j[0] * j[0] + j[1] * j[1] + j[2] * j[2];
            }
        }
        let n = self.samples.len() as f64;
        acc.map(|s| {
            let rms = (s / n).sqrt();
            if rms > 0.0 {
                1.0 / rms
            } else {
                1.0
            }
        })
    }
}

/// The parameter penalty and its gradient / Gauss-Newton terms.
struct Penalty {
    weights: [f64; N_PARAMS],
}

impl Penalty {
    fn new(config: &RegistrationConfig, ped_axis: usize) -> Self {
        let mut weights = [0.0; N_PARAMS];
        for (i, w) in weights.iter_mut().enumerate() {
            if !config.fixed[i] {
                *w = config.regularization;
            }
        }
        if !config.fixed[IDX_T] && !config.fixed[IDX_TRANS + ped_axis] {
            weights[IDX_T] += config.gauge_weight;
        }
        Self { weights }
    }

    fn value(&self, p: &[f64; N_PARAMS]) -> f64 {
        self.weights.iter().zip(p).map(|(w, x)| w * x * x).sum()
    }

    fn add_to(&self, p: &[f64; N_PARAMS], free: &[usize], eval: &mut Eval) {
        let nf = free.len();
        for (a, &i) in free.iter().enumerate() {
            eval.grad[i] += 2.0 * self.weights[i] * p[i];
            eval.hess[a * nf + a] += 2.0 * self.weights[i];
        }
    }
}

/// Mean squared error over `mask` between `moving` resampled at `T(x)` and `reference`.
pub fn mse_objective(moving: &Volume3, reference: &Volume3, t: &EddyMotionTransform, mask: &BinaryMask) -> Result<f64> {
    let level = Level::new(moving.clone(), reference, mask, t.geometry())?;
    check_bound(t, reference)?;
    Ok(level.mse(&t.prepare()))
}

/// Analytic gradient of [`mse_objective`] with respect to all sixteen parameters.
pub fn gradient(
    moving: &Volume3,
    reference: &Volume3,
    t: &EddyMotionTransform,
    mask: &BinaryMask,
) -> Result<[f64; N_PARAMS]> {
    let level = Level::new(moving.clone(), reference, mask, t.geometry())?;
    check_bound(t, reference)?;
    let free: Vec<usize> = (0..N_PARAMS).collect();
    Ok(level.evaluate(&t.prepare(), &free).grad)
}

fn check_bound(t: &EddyMotionTransform, reference: &Volume3) -> Result<()> {
    if t.geometry().matches(reference.geometry()) {
        Ok(())
    } else {
        Err(Error::GeometryMismatch("transform is not bound to the reference grid".into()))
    }
}

/// Reference pyramid and loss masks, reusable across moving volumes.
pub struct PreparedReference {
    levels: Vec<Volume3>,
    masks: Vec<BinaryMask>,
}

impl PreparedReference {
    /// Loss masks are thresholded on `reference` itself.
    pub fn new(reference: &Volume3, config: &RegistrationConfig) -> Result<Self> {
        Self::with_mask_source(reference, reference, config)
    }

    /// Loss masks are thresholded on `mask_source`, e.g. the untranslated reference,
    /// whose background noise floor lies well below the threshold.
    pub fn with_mask_source(reference: &Volume3, mask_source: &Volume3, config: &RegistrationConfig) -> Result<Self> {
        config.validate()?;
        reference.check_same_grid(mask_source, "loss mask source")?;
        let mut levels = gaussian_pyramid(reference, config.levels, PYRAMID_SIGMA)?;
        levels[0] = levels[0].gaussian_smooth(config.smoothing);
        let masks = gaussian_pyramid(mask_source, levels.len(), PYRAMID_SIGMA)?
            .iter()
            .map(|l| match config.mask_fraction {
                Some(f) => threshold_mask(l, f)
                    .map_err(|_| Error::EmptyMask("reference foreground is empty".into())),
                None => Ok(BinaryMask::full(*l.geometry())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, masks })
    }

    pub fn base(&self) -> &Volume3 {
        &self.levels[0]
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.masks[0]
    }
}

/// Register `moving` to `reference` (both already translated).
pub fn register(moving: &Volume3, reference: &Volume3, config: &RegistrationConfig) -> Result<RegistrationResult> {
    let prepared = PreparedReference::new(reference, config)?;
    register_prepared(moving, &prepared, config)
}

pub fn register_prepared(
    moving: &Volume3,
    reference: &PreparedReference,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    let base = reference.base();
    moving.check_same_grid(base, "register")?;
    let mut transform = EddyMotionTransform::identity(*base.geometry(), base.ped_axis())?;
    let mut moving_levels = gaussian_pyramid(moving, reference.levels.len(), PYRAMID_SIGMA)?;
    moving_levels[0] = moving_levels[0].gaussian_smooth(config.smoothing);
    let free = config.free();
    let penalty = Penalty::new(config, base.ped_axis());

    let mut trace = Vec::new();
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    let mut converged = false;
    for lvl in (0..reference.levels.len()).rev() {
        let level = Level::new(
            moving_levels[lvl].clone(),
            &reference.levels[lvl],
            &reference.masks[lvl],
            base.geometry(),
        )?;
        let out = match config.optimizer {
            Optimizer::GaussNewton => levenberg_marquardt(&level, &mut transform, &free, &penalty, config)?,
            Optimizer::Adam => adam(&level, &mut transform, &free, &penalty, config)?,
        };
        if lvl == reference.levels.len() - 1 {
            initial_loss = out.losses.first().copied();
        }
        final_loss = *out.losses.last().expect("initial loss recorded");
        converged = out.converged;
        trace.push(LevelTrace {
            level: lvl,
            dims: reference.levels[lvl].dims(),
            losses: out.losses,
            iterations: out.iterations,
            converged: out.converged,
        });
    }
    Ok(RegistrationResult {
        transform,
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
        trace,
        converged,
    })
}

struct LevelOutcome {
    losses: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Optimization("loss is not finite".into()))
    }
}

fn window_converged(losses: &[f64], config: &RegistrationConfig) -> bool {
    let w = config.tol_window;
    if losses.len() <= w {
        return false;
    }
    let old = losses[losses.len() - 1 - w];
    let new = losses[losses.len() - 1];
    old <= 0.0 || (old - new) / old < config.tol
}

fn check_divergence(losses: &[f64]) -> Result<()> {
    if losses.len() > DIVERGENCE_STEPS && losses.windows(2).rev().take(DIVERGENCE_STEPS).all(|w| w[1] > w[0]) {
        return Err(Error::Optimization("loss increased over consecutive accepted steps".into()));
    }
    Ok(())
}

fn levenberg_marquardt(
    level: &Level,
    t: &mut EddyMotionTransform,
    free: &[usize],
    penalty: &Penalty,
    config: &RegistrationConfig,
) -> Result<LevelOutcome> {
    let nf = free.len();
    let mut params = t.params();
    let mut eval = level.evaluate(&t.prepare(), free);
    penalty.add_to(&params, free, &mut eval);
    let mut loss = finite(eval.mse + penalty.value(&params))?;
    let mut losses = vec![loss];
    let mut mu = config.damping;
    let mut converged = loss == 0.0;
    let mut iterations = 0;
    while !converged && iterations < config.max_iters {
        iterations += 1;
        let dmax = (0..nf).map(|a| eval.hess[a * nf + a]).fold(0.0, f64::max);
        let floor = (dmax * 1e-12).max(f64::MIN_POSITIVE);
        let mut a = DMatrix::from_row_slice(nf, nf, &eval.hess);
        for i in 0..nf {
            a[(i, i)] += mu * eval.hess[i * nf + i].max(floor);
        }
        let rhs = DVector::from_iterator(nf, free.iter().map(|&i| -eval.grad[i]));
        let step = match a.cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                mu *= config.damping_factor;
                if mu > MAX_DAMPING {
                    converged = true;
                }
                continue;
            }
        };
        let mut trial = params;
        for (k, &i) in free.iter().enumerate() {
            trial[i] += step[k];
        }
        let mut tt = *t;
        tt.set_params(&trial);
        let prep = tt.prepare();
        let mut trial_eval = level.evaluate(&prep, free);
        penalty.add_to(&trial, free, &mut trial_eval);
        let trial_loss = trial_eval.mse + penalty.value(&trial);
        if trial_loss.is_nan() {
            return Err(Error::Optimization("loss is not finite".into()));
        }
        if trial_loss < loss {
            params = trial;
            *t = tt;
            eval = trial_eval;
            loss = trial_loss;
            losses.push(loss);
            mu /= config.damping_factor;
            check_divergence(&losses)?;
            converged = loss == 0.0 || window_converged(&losses, config);
        } else {
            mu *= config.damping_factor;
            converged = mu > MAX_DAMPING;
        }
    }
    Ok(LevelOutcome {
        losses,
        iterations,
        converged,
    })
}

fn adam(
    level: &Level,
    t: &mut EddyMotionTransform,
    free: &[usize],
    penalty: &Penalty,
    config: &RegistrationConfig,
) -> Result<LevelOutcome> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-12;
    // Optimise in units of one voxel of RMS displacement per parameter.
    let scales = level.parameter_scales(&t.prepare());
    let mut params = t.params();
    let mut eval = level.evaluate(&t.prepare(), free);
    penalty.add_to(&params, free, &mut eval);
    let mut loss = finite(eval.mse + penalty.value(&params))?;
    let mut losses = vec![loss];
    let (mut m, mut v) = ([0.0; N_PARAMS], [0.0; N_PARAMS]);
    let mut lr = config.adam_lr;
    let mut converged = loss == 0.0;
    let mut iterations = 0;
    let mut step_count = 0;
    while !converged && iterations < config.max_iters {
        iterations += 1;
        step_count += 1;
        let mut trial = params;
        for &i in free {
            let g = eval.grad[i] * scales[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let mh = m[i] / (1.0 - BETA1.powi(step_count));
            let vh = v[i] / (1.0 - BETA2.powi(step_count));
            trial[i] -= lr * scales[i] * mh / (vh.sqrt() + EPS);
        }
        let mut tt = *t;
        tt.set_params(&trial);
        let mut trial_eval = level.evaluate(&tt.prepare(), free);
        penalty.add_to(&trial, free, &mut trial_eval);
        let trial_loss = trial_eval.mse + penalty.value(&trial);
        if trial_loss.is_nan() {
            return Err(Error::Optimization("loss is not finite".into()));
        }
        if trial_loss < loss {
            params = trial;
            *t = tt;
            eval = trial_eval;
            loss = trial_loss;
            losses.push(loss);
            lr = (lr * 1.1).min(config.adam_lr);
            check_divergence(&losses)?;
            converged = loss == 0.0 || window_converged(&losses, config);
        } else {
            lr *= 0.5;
            converged = lr < config.adam_lr * 1e-6;
        }
    }
    Ok(LevelOutcome {
        losses,
        iterations,
        converged,
    })
}

/// Resample the original (untranslated) volume at `T(x)`.
pub fn correct(moving: &Volume3, t: &EddyMotionTransform) -> Result<Volume3> {
    if !t.geometry().matches(moving.geometry()) {
        return Err(Error::GeometryMismatch("transform is not bound to the volume grid".into()));
    }
    let prep = t.prepare();
    let data = moving
        .geometry()
        .voxels()
        .map(|v| moving.sample_with_gradient(prep.apply(v.map(|c| c as f64))).0 as f32)
        .collect();
    moving.with_data(data)
}

#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    pub corrected: DwiDataset,
    pub results: Vec<RegistrationResult>,
    pub reference_index: usize,
}

/// Translate, register and correct every volume against the translated b=0 reference.
///
/// b=0 volumes other than the reference are registered rigid-only, without translation,
/// against the untranslated reference.
pub fn correct_dataset(
    dataset: &DwiDataset,
    reference_index: usize,
    translator: &TranslatorKind,
    config: &RegistrationConfig,
) -> Result<CorrectionOutput> {
    config.validate()?;
    let b0 = dataset.table.b0_indices();
    if b0.is_empty() {
        return Err(Error::Missing("dataset has no b=0 volume to use as reference".into()));
    }
    if !b0.contains(&reference_index) {
        return Err(Error::InvalidArgument(format!(
            "reference volume {reference_index} is not a b=0 volume"
        )));
    }
    let ref_vol = &dataset.volumes[reference_index];
    let ref_t = translate(translator, ref_vol, &VolumeMeta::of(dataset, reference_index))?;
    let prepared = PreparedReference::with_mask_source(&ref_t, ref_vol, config)?;
    let rigid_cfg = config.clone().rigid_only();
    // b=0 volumes already share the reference contrast and are registered untranslated.
    let prepared_b0 = PreparedReference::new(ref_vol, config)?;

    let per_volume: Vec<(Volume3, RegistrationResult)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let vol = &dataset.volumes[i];
            let meta = VolumeMeta::of(dataset, i);
            let cfg = if is_b0(meta.b) { &rigid_cfg } else { config };
            // With rigid motion frozen as well, b=0 volumes have nothing to estimate.
            if i == reference_index || cfg.fixed.iter().all(|&f| f) {
                return Ok((vol.clone(), RegistrationResult::identity(*vol.geometry(), vol.ped_axis())?));
            }
            let result = if is_b0(meta.b) {
                register_prepared(vol, &prepared_b0, cfg)?
            } else {
                register_prepared(&translate(translator, vol, &meta)?, &prepared, cfg)?
            };
            Ok((correct(vol, &result.transform)?, result))
        })
        .collect::<Result<_>>()?;
    let (volumes, results): (Vec<_>, Vec<_>) = per_volume.into_iter().unzip();
    Ok(CorrectionOutput {
        corrected: DwiDataset::new(volumes, dataset.table.clone())?,
        results,
        reference_index,
    })
}
