//! Raw displacements and contact point of a single patch.

use serde::{Deserialize, Serialize};

use crate::fields::{divergence, VectorField2};
use crate::nhhd::{decompose, Decomposition, NhhdError};
use crate::segmentation::ContactPatch;

/// How the normal raw displacement is accumulated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DnMode {
    /// Sum of the Euclidean norms of the divergent component.
    #[default]
    VectorNorm,
    /// Sum of the absolute scalar divergence of the flow.
    ScalarDiv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawContact {
    #[serde(rename = "x2D")]
    pub x2d: f64,
    #[serde(rename = "y2D")]
    pub y2d: f64,
    #[serde(rename = "Ds1")]
    pub ds1: f64,
    #[serde(rename = "Ds2")]
    pub ds2: f64,
    #[serde(rename = "Dn")]
    pub dn: f64,
    #[serde(rename = "dPF")]
    pub dpf: f64,
}

/// `(Ds1, Ds2, Dn)`: tangential flow sums along image x and y, and the normal
/// displacement.
pub fn raw_displacements(subflow: &VectorField2, dec: &Decomposition, mode: DnMode) -> (f64, f64, f64) {
    let ds1 = subflow.u().iter().sum();
    let ds2 = subflow.v().iter().sum();
    let dn = match mode {
        DnMode::VectorNorm => dec.d.u().iter().zip(dec.d.v()).map(|(a, b)| a.hypot(*b)).sum(),
        DnMode::ScalarDiv => divergence(subflow).values().iter().map(|v| v.abs()).sum(),
    };
    (ds1, ds2, dn)
}

/// Contact pixel at the minimum of the divergent potential, plus the
/// potential's range.
pub fn locate(dec: &Decomposition, origin: (usize, usize)) -> (f64, f64, f64) {
    let (x, y) = dec.d_pot.argmin();
    let (lo, hi) = dec.d_pot.min_max();
    ((origin.0 + x) as f64, (origin.1 + y) as f64, hi - lo)
}

pub fn analyze_patch(patch: &ContactPatch, mode: DnMode) -> Result<(RawContact, Decomposition), NhhdError> {
    let dec = decompose(&patch.subflow)?;
    let (ds1, ds2, dn) = raw_displacements(&patch.subflow, &dec, mode);
    let (x2d, y2d, dpf) = locate(&dec, (patch.bbox.x0, patch.bbox.y0));
    Ok((RawContact { x2d, y2d, ds1, ds2, dn, dpf }, dec))
}
