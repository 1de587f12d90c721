//! Masks, morphology and the misalignment / accuracy metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::EddyMotionTransform;
use crate::volume::{Geometry, Volume3};

/// A boolean field on a volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geom: Geometry,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn full(geom: Geometry) -> Self {
        Self {
            geom,
            data: vec![true; geom.len()],
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        Self {
            geom,
            data: geom.voxels().map(&mut f).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geom.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Storage indices of the set voxels.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            geom: self.geom,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn to_volume(&self, ped_axis: usize) -> Volume3 {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3::new(self.geom, ped_axis, data).expect("mask grid is valid")
    }

    pub fn from_volume(vol: &Volume3) -> Self {
        Self {
            geom: *vol.geometry(),
            data: vol.data().iter().map(|&v| v > 0.5).collect(),
        }
    }

    fn check_grid(&self, geom: &Geometry, what: &str) -> Result<()> {
        if self.geom.matches(geom) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{what}: mask {:?} vs {:?}", self.geom, geom)))
        }
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f32], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v: Vec<f32> = values.to_vec();
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut a, rest) = v.select_nth_unstable_by(lo, f32::total_cmp);
    let b = if frac > 0.0 {
        rest.iter().copied().fold(f32::INFINITY, f32::min)
    } else {
        a
    };
    a as f64 + frac * (b as f64 - a as f64)
}

fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `vol > frac · p99(vol)`, without connected-component filtering.
pub fn foreground_mask(vol: &Volume3, frac: f64) -> BinaryMask {
    let thr = frac * percentile(vol.data(), 99.0);
    BinaryMask {
        geom: *vol.geometry(),
        data: vol.data().iter().map(|&v| v as f64 > thr).collect(),
    }
}

/// Relative threshold at `frac` of the 99th percentile, keeping the largest
/// 6-connected component.
pub fn threshold_mask(vol: &Volume3, frac: f64) -> Result<BinaryMask> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold fraction {frac} not in (0, 1)")));
    }
    let fg = foreground_mask(vol, frac);
    if fg.is_empty() {
        return Err(Error::EmptyMask("nothing above threshold".into()));
    }
    Ok(largest_component(&fg))
}

const NEIGHBOURS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn neighbour(geom: &Geometry, v: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let c = v[a] as isize + d[a];
        if c < 0 || c as usize >= geom.dims[a] {
            return None;
        }
        out[a] = c as usize;
    }
    Some(out)
}

/// Largest 6-connected component (ties go to the component found first in storage order).
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let geom = mask.geom;
    let mut label = vec![0u32; geom.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..geom.len() {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let v = geom.coords(idx);
            for d in NEIGHBOURS {
                if let Some(n) = neighbour(&geom, v, d) {
                    let ni = geom.index(n[0], n[1], n[2]);
                    if mask.data[ni] && label[ni] == 0 {
                        label[ni] = next;
                        queue.push_back(ni);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    BinaryMask {
        geom,
        data: label.iter().map(|&l| l != 0 && l == best.0).collect(),
    }
}

fn morph_step(mask: &BinaryMask, dilate: bool) -> BinaryMask {
    let geom = mask.geom;
    let data = geom
        .voxels()
        .map(|v| {
            let here = mask.data[geom.index(v[0], v[1], v[2])];
            let mut nbrs = NEIGHBOURS.iter().map(|&d| {
                // Outside the grid counts as background.
                neighbour(&geom, v, d).is_some_and(|n| mask.data[geom.index(n[0], n[1], n[2])])
            });
            if dilate {
                here || nbrs.any(|b| b)
            } else {
                here && nbrs.all(|b| b)
            }
        })
        .collect();
    BinaryMask { geom, data }
}

/// Iterated dilation with the 6-connected cross.
pub fn dilate(mask: &BinaryMask, iters: usize) -> BinaryMask {
    (0..iters).fold(mask.clone(), |m, _| morph_step(&m, true))
}

/// Iterated erosion with the 6-connected cross; the grid border erodes.
pub fn erode(mask: &BinaryMask, iters: usize) -> BinaryMask {
    (0..iters).fold(mask.clone(), |m, _| morph_step(&m, false))
}

/// `dilate(brain, dil_iters) AND NOT erode(brain, ero_iters)`.
pub fn interface_mask(brain: &BinaryMask, dil_iters: usize, ero_iters: usize) -> Result<BinaryMask> {
    if brain.is_empty() {
        return Err(Error::EmptyMask("brain mask is empty".into()));
    }
    let out = dilate(brain, dil_iters).and_not(&erode(brain, ero_iters));
    if out.is_empty() {
        return Err(Error::EmptyMask("interface mask is empty".into()));
    }
    Ok(out)
}

/// Distribution summary of a metric over a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdSummary {
    pub mean_std: f64,
    pub median_std: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Population standard deviation across `volumes` at each voxel, summarised over `mask`.
pub fn std_across_volumes(volumes: &[&Volume3], mask: &BinaryMask) -> Result<(Volume3, StdSummary)> {
    if volumes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 volumes for a standard deviation, got {}",
            volumes.len()
        )));
    }
    let first = volumes[0];
    for v in &volumes[1..] {
        first.check_same_grid(v, "std_across_volumes")?;
    }
    mask.check_grid(first.geometry(), "std_across_volumes")?;
    if mask.is_empty() {
        return Err(Error::EmptyMask("std summary mask".into()));
    }
    let n = volumes.len() as f64;
    let data: Vec<f32> = (0..first.len())
        .map(|i| {
            let mean = volumes.iter().map(|v| v.data()[i] as f64).sum::<f64>() / n;
            let var = volumes
                .iter()
                .map(|v| {
                    let d = v.data()[i] as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt() as f32
        })
        .collect();
    let map = first.with_data(data)?;
    let mut vals: Vec<f64> = mask.indices().map(|i| map.data()[i] as f64).collect();
    vals.sort_by(f64::total_cmp);
    let summary = StdSummary {
        mean_std: vals.iter().sum::<f64>() / vals.len() as f64,
        median_std: sorted_percentile(&vals, 50.0),
        q1: sorted_percentile(&vals, 25.0),
        q3: sorted_percentile(&vals, 75.0),
    };
    Ok((map, summary))
}

/// Mean absolute difference over `mask`.
pub fn mae(a: &Volume3, b: &Volume3, mask: &BinaryMask) -> Result<f64> {
    a.check_same_grid(b, "mae")?;
    mask.check_grid(a.geometry(), "mae")?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask("mae".into()));
    }
    let sum: f64 = mask
        .indices()
        .map(|i| (a.data()[i] as f64 - b.data()[i] as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

fn check_transforms(est: &EddyMotionTransform, gt: &EddyMotionTransform, grid: &Geometry, mask: &BinaryMask) -> Result<()> {
    if !est.geometry().matches(grid) || !gt.geometry().matches(grid) {
        return Err(Error::GeometryMismatch("transforms are not bound to the evaluation grid".into()));
    }
    if est.ped_axis() != gt.ped_axis() {
        return Err(Error::GeometryMismatch("transforms use different PED axes".into()));
    }
    mask.check_grid(grid, "displacement_rmse")?;
    if mask.is_empty() {
        return Err(Error::EmptyMask("displacement_rmse".into()));
    }
    Ok(())
}

/// RMS over `mask` of the difference between the PED displacement fields (voxels).
pub fn displacement_rmse(
    est: &EddyMotionTransform,
    gt: &EddyMotionTransform,
    grid: &Geometry,
    mask: &BinaryMask,
) -> Result<f64> {
    check_transforms(est, gt, grid, mask)?;
    let (pe, pg) = (est.prepare(), gt.prepare());
    let ped = est.ped_axis();
    let mut acc = 0.0;
    for idx in mask.indices() {
        let x = grid.coords(idx).map(|c| c as f64);
        let d = pe.apply(x)[ped] - pg.apply(x)[ped];
        acc += d * d;
    }
    Ok((acc / mask.count() as f64).sqrt())
}

/// RMS over `mask` of the Euclidean distance between the full displacement vectors (voxels).
pub fn displacement_rmse_full(
    est: &EddyMotionTransform,
    gt: &EddyMotionTransform,
    grid: &Geometry,
    mask: &BinaryMask,
) -> Result<f64> {
    check_transforms(est, gt, grid, mask)?;
    let (pe, pg) = (est.prepare(), gt.prepare());
    let mut acc = 0.0;
    for idx in mask.indices() {
        let x = grid.coords(idx).map(|c| c as f64);
        let (a, b) = (pe.apply(x), pg.apply(x));
        acc += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    }
    Ok((acc / mask.count() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ellipsoid(dims: [usize; 3], c: [f64; 3], r: [f64; 3]) -> BinaryMask {
        let g = Geometry::isotropic(dims, 1.0).unwrap();
        BinaryMask::from_fn(g, |v| (0..3).map(|a| ((v[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0)
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f32> = (0..101).rev().map(|x| x as f32).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 50.0), 50.0);
        let v = [1.0f32, 2.0, 4.0, 8.0];
        assert!((percentile(&v, 50.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_mask_errors_and_scale_invariance() {
        let g = Geometry::isotropic([10, 10, 10], 1.0).unwrap();
        let zero = Volume3::zeros(g, 1).unwrap();
        assert!(matches!(threshold_mask(&zero, 0.05), Err(Error::EmptyMask(_))));
        assert!(threshold_mask(&zero, 1.5).is_err());

        let blob = ellipsoid([10, 10, 10], [4.5; 3], [3.0; 3]);
        let vol = Volume3::from_fn(g, 1, |[i, j, k]| if blob.get(i, j, k) { 1.0 + i as f64 } else { 0.0 }).unwrap();
        let m = threshold_mask(&vol, 0.05).unwrap();
        assert_eq!(m, blob);
        let scaled = vol.map(|v| 3.5 * v);
        assert_eq!(threshold_mask(&scaled, 0.05).unwrap(), m);
    }

    #[test]
    fn keeps_largest_component() {
        let g = Geometry::isotropic([12, 5, 5], 1.0).unwrap();
        let m = BinaryMask::from_fn(g, |[i, j, k]| j == 2 && k == 2 && (i < 2 || (5..10).contains(&i)));
        let l = largest_component(&m);
        assert_eq!(l.count(), 5);
        assert!(l.get(7, 2, 2));
        assert!(!l.get(0, 2, 2));
    }

    #[test]
    fn morphology_basics() {
        let g = Geometry::isotropic([7, 7, 7], 1.0).unwrap();
        let single = BinaryMask::from_fn(g, |v| v == [3, 3, 3]);
        assert_eq!(dilate(&single, 0), single);
        assert_eq!(erode(&single, 0), single);
        let cross = dilate(&single, 1);
        assert_eq!(cross.count(), 7);
        assert!(cross.get(2, 3, 3) && cross.get(3, 3, 4) && !cross.get(2, 2, 3));
        assert_eq!(erode(&cross, 1), single);
    }

    #[test]
    fn closing_contains_convex_masks() {
        for (c, r) in [([15.0, 14.0, 12.0], [9.0, 7.0, 5.5]), ([15.5, 15.0, 12.0], [6.3, 10.2, 8.1])] {
            let m = ellipsoid([32, 30, 26], c, r);
            for k in 1..4 {
                assert!(m.is_subset_of(&erode(&dilate(&m, k), k)));
            }
        }
    }

    #[test]
    fn interface_mask_properties() {
        let m = ellipsoid([40, 40, 40], [19.5; 3], [14.0, 12.0, 10.0]);
        assert!(interface_mask(&m, 0, 0).is_err());
        let iface = interface_mask(&m, 2, 2).unwrap();
        assert!(iface.and(&erode(&m, 2)).is_empty());
        // Along the x axis through the centre the shell spans 2 voxels out + 2 in.
        let line: Vec<usize> = (0..40).filter(|&i| iface.get(i, 19, 19)).collect();
        assert_eq!(line.len(), 8);
    }

    #[test]
    fn std_examples() {
        let g = Geometry::isotropic([3, 3, 3], 1.0).unwrap();
        let a = Volume3::from_fn(g, 1, |[i, j, k]| (i + j * k) as f64).unwrap();
        let b = a.map(|v| v + 2.0);
        let full = BinaryMask::full(g);
        let (map, s) = std_across_volumes(&[&a, &a, &a], &full).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.median_std, 0.0);
        let (map, s) = std_across_volumes(&[&a, &b], &full).unwrap();
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!((s.mean_std - 1.0).abs() < 1e-6);
        assert!(std_across_volumes(&[&a], &full).is_err());
    }

    #[test]
    fn std_is_permutation_invariant() {
        let g = Geometry::isotropic([4, 4, 4], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vols: Vec<Volume3> = (0..5)
            .map(|_| Volume3::from_fn(g, 1, |_| rng.random_range(0.0..1.0)).unwrap())
            .collect();
        let refs: Vec<&Volume3> = vols.iter().collect();
        let rev: Vec<&Volume3> = vols.iter().rev().collect();
        let m = BinaryMask::full(g);
        let (a, sa) = std_across_volumes(&refs, &m).unwrap();
        let (b, sb) = std_across_volumes(&rev, &m).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((sa.median_std - sb.median_std).abs() < 1e-6);
    }

    #[test]
    fn mae_examples() {
        let g = Geometry::isotropic([8, 8, 8], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Volume3::from_fn(g, 1, |_| rng.random_range(-1.0..1.0)).unwrap();
        let b = Volume3::from_fn(g, 1, |_| rng.random_range(-1.0..1.0)).unwrap();
        let m = BinaryMask::from_fn(g, |[i, j, k]| (i + j + k) % 3 != 0);
        assert_eq!(mae(&a, &a, &m).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.5);
        assert!((mae(&a, &shifted, &m).unwrap() - 0.5).abs() < 1e-6);

        // Independent recomputation with explicit loops.
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    if (i + j + k) % 3 != 0 {
                        sum += (a.get(i, j, k) as f64 - b.get(i, j, k) as f64).abs();
                        n += 1;
                    }
                }
            }
        }
        let expect = sum / n as f64;
        assert!((mae(&a, &b, &m).unwrap() - expect).abs() <= 1e-12 * expect);
        assert!(mae(&a, &b, &BinaryMask::new(g, vec![false; 512]).unwrap()).is_err());
    }

    #[test]
    fn displacement_rmse_examples() {
        let g = Geometry::isotropic([16, 20, 12], 2.0).unwrap();
        let m = BinaryMask::full(g);
        let id = EddyMotionTransform::identity(g, 1).unwrap();
        assert_eq!(displacement_rmse(&id, &id, &g, &m).unwrap(), 0.0);

        let mut a = id;
        a.eddy.t = 0.5 / 9.5;
        assert!((displacement_rmse(&a, &id, &g, &m).unwrap() - 0.5).abs() < 1e-12);

        // Gauge swap: eddy t versus rigid translation along the PED.
        let mut b = id;
        b.rigid.trans = [0.0, 1.0, 0.0];
        assert!(displacement_rmse(&a, &b, &g, &m).unwrap() < 1e-12);
        assert!(displacement_rmse_full(&a, &b, &g, &m).unwrap() < 1e-12);

        let other = Geometry::isotropic([16, 20, 13], 2.0).unwrap();
        assert!(displacement_rmse(&a, &b, &other, &BinaryMask::full(other)).is_err());
    }
}
