//! Multi-contact sensing for curved optical tactile skins.
//!
//! A dense marker flow is segmented into contact patches, each patch is split
//! with a natural Helmholtz-Hodge decomposition, and the resulting raw
//! displacements are mapped to contact locations (mm) and forces (N) by
//! fitted polynomials. A synthetic skin model stands in for the hardware.

// `!(a < b)` is used on purpose where NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fields;
pub mod nhhd;
pub mod segmentation;
pub mod contact;
pub mod geometry;
pub mod poly;
pub mod calibration;
pub mod simulator;
pub mod flowest;
pub mod pipeline;
