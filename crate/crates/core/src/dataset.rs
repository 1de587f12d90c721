//! Diffusion-weighted series: volumes paired with their b-values and directions.

use crate::error::{Error, Result};
use crate::volume::Volume3;

/// b-values at or below this are treated as non-diffusion-weighted.
pub const B0_THRESHOLD: f64 = 50.0;

/// b-values within this distance of each other belong to the same shell.
pub const SHELL_TOLERANCE: f64 = 50.0;

/// Per-volume b-value (s/mm²) and unit gradient direction (zero for b=0).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    /// Validates lengths and b-values, renormalises directions with |g| > 1e-3 and
    /// zeroes the direction of b=0 rows.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} b-values but {} directions",
                bvals.len(),
                bvecs.len()
            )));
        }
        let mut out = Vec::with_capacity(bvecs.len());
        for (i, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidArgument(format!("b-value {b} at row {i} is invalid")));
            }
            if g.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(format!("direction at row {i} is not finite")));
            }
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if is_b0(b) {
                out.push([0.0; 3]);
            } else if norm > 1e-3 {
                out.push(g.map(|c| c / norm));
            } else {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has b={b} but no gradient direction"
                )));
            }
        }
        Ok(Self { bvals, bvecs: out })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn entry(&self, i: usize) -> (f64, [f64; 3]) {
        (self.bvals[i], self.bvecs[i])
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| is_b0(self.bvals[i])).collect()
    }

    /// Shells as `(mean b-value, volume indices)`, ascending in b. b=0 is shell 0 when present.
    pub fn shells(&self) -> Vec<(f64, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.bvals[a].total_cmp(&self.bvals[b]).then(a.cmp(&b)));
        let mut shells: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in order {
            let b = self.bvals[i];
            match shells.last_mut() {
                Some((_, members)) if (b - self.bvals[members[0]]).abs() <= SHELL_TOLERANCE => members.push(i),
                _ => shells.push((b, vec![i])),
            }
        }
        for (b, members) in shells.iter_mut() {
            members.sort_unstable();
            *b = members.iter().map(|&i| self.bvals[i]).sum::<f64>() / members.len() as f64;
        }
        shells
    }

    /// Indices of the shell whose mean b-value is within tolerance of `b`.
    pub fn shell_indices(&self, b: f64) -> Option<Vec<usize>> {
        self.shells()
            .into_iter()
            .find(|(sb, _)| (sb - b).abs() <= SHELL_TOLERANCE)
            .map(|(_, idx)| idx)
    }
}

pub fn is_b0(b: f64) -> bool {
    b <= B0_THRESHOLD
}

/// A 4D diffusion series stored volume-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiDataset {
    pub volumes: Vec<Volume3>,
    pub table: GradientTable,
}

impl DwiDataset {
    pub fn new(volumes: Vec<Volume3>, table: GradientTable) -> Result<Self> {
        if volumes.len() != table.len() {
            return Err(Error::InvalidArgument(format!(
                "{} volumes but {} gradient table rows",
                volumes.len(),
                table.len()
            )));
        }
        if let Some(first) = volumes.first() {
            for (i, v) in volumes.iter().enumerate().skip(1) {
                if !first.same_grid(v) || first.ped_axis() != v.ped_axis() {
                    return Err(Error::GeometryMismatch(format!("volume {i} differs from volume 0")));
                }
            }
        }
        Ok(Self { volumes, table })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalises_and_zeroes_b0() {
        let t = GradientTable::new(vec![0.0, 1000.0], vec![[0.3, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.bvecs(), &[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(GradientTable::new(vec![1000.0], vec![[0.0; 3]]).is_err());
        assert!(GradientTable::new(vec![-1.0], vec![[0.0; 3]]).is_err());
        assert!(GradientTable::new(vec![0.0, 0.0], vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn groups_shells() {
        let bvals = vec![0.0, 995.0, 2000.0, 5.0, 1005.0, 1990.0];
        let bvecs = vec![[0.0, 0.0, 1.0]; 6];
        let t = GradientTable::new(bvals, bvecs).unwrap();
        let shells = t.shells();
        assert_eq!(shells.len(), 3);
        assert_eq!(shells[0].1, vec![0, 3]);
        assert_eq!(shells[1].1, vec![1, 4]);
        assert!((shells[1].0 - 1000.0).abs() < 1e-12);
        assert_eq!(t.shell_indices(2000.0).unwrap(), vec![2, 5]);
        assert!(t.shell_indices(650.0).is_none());
        assert_eq!(t.b0_indices(), vec![0, 3]);
    }
}
