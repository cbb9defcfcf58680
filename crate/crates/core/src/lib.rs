//! Neural spline conditional density estimation with split-conformal
//! prediction sets.
//!
//! The pipeline is: [`data`] loads and splits a regression dataset,
//! [`model`] fits a network that maps covariates to a [`spline::SplineDensity`],
//! [`conformal`] calibrates negative-density, HPD or histogram scores into
//! prediction sets that are unions of intervals, and [`metrics`] measures
//! coverage and size.

// `!(a > b)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod data;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod output;
pub mod spline;
