//! Measuring how much website-fingerprint features leak about the visited
//! website, in bits.
//!
//! The pipeline mirrors the measurement architecture: traces are reduced to
//! fingerprints ([`features`]), per-website densities are modelled with
//! adaptive kernels ([`density`]), the [`analyzer`] prunes redundant features
//! and groups dependent ones, and the [`quantifier`] estimates mutual
//! information by Monte Carlo over the fitted models.

pub mod analyzer;
pub mod bounds;
pub mod cli;
pub mod defenses;
pub mod density;
pub mod features;
pub mod infotheory;
pub mod quantifier;
pub mod stats;
pub mod traces;
pub mod validation;
