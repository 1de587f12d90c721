//! JSON documents: transforms, configurations and metrics.
//!
//! Every schema rejects unknown fields, so a typo fails loudly with the field name.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{EddyMotionTransform, QuadEddyParams, RigidParams};
use crate::volume::Geometry;

use super::{atomic_write, read_file};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridJson {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub eddy: String,
    pub euler: String,
    pub trans: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            eddy: "normalized".into(),
            euler: "radians".into(),
            trans: "mm".into(),
        }
    }
}

/// On-disk form of an [`EddyMotionTransform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformFile {
    pub ped_axis: usize,
    pub grid: GridJson,
    pub eddy: QuadEddyParams,
    pub rigid: RigidParams,
    pub units: Units,
}

impl From<&EddyMotionTransform> for TransformFile {
    fn from(t: &EddyMotionTransform) -> Self {
        let g = t.geometry();
        Self {
            ped_axis: t.ped_axis(),
            grid: GridJson {
                dims: g.dims,
                spacing: g.spacing,
                origin: g.origin,
            },
            eddy: t.eddy,
            rigid: t.rigid,
            units: Units::default(),
        }
    }
}

impl TransformFile {
    pub fn to_transform(&self) -> Result<EddyMotionTransform> {
        if self.units != Units::default() {
            return Err(Error::InvalidArgument(format!(
                "unsupported transform units {:?}, expected {:?}",
                self.units,
                Units::default()
            )));
        }
        let geom = Geometry::new(self.grid.dims, self.grid.spacing, self.grid.origin)?;
        EddyMotionTransform::new(geom, self.ped_axis, self.eddy, self.rigid)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_transform(path: &Path) -> Result<EddyMotionTransform> {
    read_json::<TransformFile>(path)?.to_transform()
}

pub fn write_transform(path: &Path, t: &EddyMotionTransform) -> Result<()> {
    write_json(path, &TransformFile::from(t))
}
