//! Finite-difference verification of the analytic registration gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::BinaryMask;
use crate::registration::{gradient, mse_objective};
use crate::simulator::apply_distortion;
use crate::transform::{EddyMotionTransform, N_PARAMS};
use crate::volume::{Geometry, Volume3};

/// Components smaller than this are not compared.
pub const MIN_COMPONENT: f64 = 1e-8;
/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default relative-error threshold.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub configs: usize,
    /// Gradient components compared (those above [`MIN_COMPONENT`]).
    pub components: usize,
    pub max_rel_err: f64,
}

/// Smoothed uniform noise under a window that vanishes at the grid border, like an
/// object surrounded by background.
fn smooth_random(geom: Geometry, rng: &mut ChaCha8Rng) -> Result<Volume3> {
    let noise = Volume3::from_fn(geom, 1, |_| rng.random_range(0.0..1.0))?.gaussian_smooth(2.0);
    let window = |v: usize, n: usize| (std::f64::consts::PI * (v + 1) as f64 / (n + 1) as f64).sin().powi(2);
    Volume3::from_fn(geom, 1, |[i, j, k]| {
        let [nx, ny, nz] = geom.dims;
        noise.get(i, j, k) as f64 * window(i, nx) * window(j, ny) * window(k, nz)
    })
}

/// Moderate random parameters: eddy terms of a few voxels, rotations under a degree, shifts under 2 mm.
fn random_params(rng: &mut ChaCha8Rng) -> [f64; N_PARAMS] {
    let mut p = [0.0; N_PARAMS];
    for (i, x) in p.iter_mut().enumerate() {
        let r = match i {
            0..=5 => 0.01,
            6..=9 => 0.03,
            10..=12 => 0.015,
            _ => 2.0,
        };
        *x = rng.random_range(-r..r);
    }
    p
}

/// One random (image pair, parameters) configuration; returns (compared, worst rel. error).
fn check_one(seed: u64, index: u64, dims: [usize; 3], h: f64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let geom = Geometry::isotropic(dims, 2.0)?;
    let ped = rng.random_range(0..3);
    let moving = smooth_random(geom, &mut rng)?;
    // The reference is the moving image under another transform plus independent structure.
    let warp = EddyMotionTransform::from_params(geom, ped, &random_params(&mut rng))?;
    let warped = apply_distortion(&moving, &warp)?;
    let extra = smooth_random(geom, &mut rng)?;
    let reference = warped.with_data(warped.data().iter().zip(extra.data()).map(|(a, b)| a + 0.2 * b).collect())?;
    let mask = BinaryMask::full(geom);
    let p = random_params(&mut rng);
    let t = EddyMotionTransform::from_params(geom, ped, &p)?;
    let analytic = gradient(&moving, &reference, &t, &mask)?;
    let (mut n, mut worst) = (0, 0.0f64);
    for i in 0..N_PARAMS {
        if analytic[i].abs() <= MIN_COMPONENT {
            continue;
        }
        let at = |delta: f64| -> Result<f64> {
            let mut q = p;
            q[i] += delta;
            mse_objective(&moving, &reference, &EddyMotionTransform::from_params(geom, ped, &q)?, &mask)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs());
        n += 1;
    }
    Ok((n, worst))
}

/// Compare the analytic gradient with central differences over `n_configs` random cases.
pub fn gradient_check(seed: u64, n_configs: usize, dims: [usize; 3], h: f64) -> Result<GradCheckReport> {
    let per: Vec<(usize, f64)> = (0..n_configs as u64)
        .into_par_iter()
        .map(|i| check_one(seed, i, dims, h))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        configs: n_configs,
        components: per.iter().map(|c| c.0).sum(),
        max_rel_err: per.iter().map(|c| c.1).fold(0.0, f64::max),
    })
}
