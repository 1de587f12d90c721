//! Gradient direction sets from electrostatic repulsion on the sphere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const ITERATIONS: usize = 500;

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

/// `n` random unit vectors, isotropic, from a seeded normal draw.
pub fn random_directions(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
            if v.iter().map(|c| c * c).sum::<f64>() > 1e-12 {
                break normalize(v);
            }
        })
        .collect()
}

/// Coulomb energy of the point set and its antipodal copies.
fn energy(dirs: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let (a, b) = (dirs[i], dirs[j]);
            let dm = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
            let dp = (0..3).map(|k| (a[k] + b[k]).powi(2)).sum::<f64>().sqrt();
            e += 1.0 / dm.max(1e-12) + 1.0 / dp.max(1e-12);
        }
    }
    e
}

fn forces(dirs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut f = vec![[0.0; 3]; dirs.len()];
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let (a, b) = (dirs[i], dirs[j]);
            for sign in [-1.0, 1.0] {
                // Pair (a, sign·b): force on a along a - sign·b.
                let d = [a[0] - sign * b[0], a[1] - sign * b[1], a[2] - sign * b[2]];
                let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-24);
                let s = 1.0 / (r2 * r2.sqrt());
                for k in 0..3 {
                    f[i][k] += s * d[k];
                    f[j][k] -= sign * s * d[k];
                }
            }
        }
    }
    f
}

/// Deterministic, approximately uniform unit directions.
///
/// Starts from [`random_directions`] and runs a fixed number of projected
/// gradient steps on the antipodally symmetric Coulomb energy, with a step that
/// grows on success and halves on rejection.
pub fn uniform_directions(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut dirs = random_directions(n, seed);
    if n < 2 {
        return dirs;
    }
    let mut e = energy(&dirs);
    let mut step = 0.1 / n as f64;
    for _ in 0..ITERATIONS {
        let f = forces(&dirs);
        let fmax = f
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max);
        if fmax == 0.0 {
            break;
        }
        let trial: Vec<[f64; 3]> = dirs
            .iter()
            .zip(&f)
            .map(|(d, fv)| normalize([0, 1, 2].map(|k| d[k] + step * fv[k] / fmax)))
            .collect();
        let et = energy(&trial);
        if et < e {
            dirs = trial;
            e = et;
            step = (step * 1.2).min(0.5);
        } else {
            step *= 0.5;
        }
    }
    dirs
}

/// Smallest angle (radians) between any two axes `±g_i`, `±g_j`.
pub fn min_antipodal_angle(dirs: &[[f64; 3]]) -> f64 {
    let mut best = std::f64::consts::FRAC_PI_2;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let c = (0..3).map(|k| dirs[i][k] * dirs[j][k]).sum::<f64>().abs().min(1.0);
            best = best.min(c.acos());
        }
    }
    best
}
