//! Reconstruction of the hidden model, up to gauge, from admissible energy
//! measurements only.
//!
//! Every scalar consumed here is an [`Oracle`](crate::oracle::Oracle) output,
//! counted by [`Measurer`]. The stages are:
//!
//! 1. cross-Gram of a staggered atom dictionary and its energy coordinates `Z`;
//! 2. the free-evolution generator `D_Z` from cross-Grams of slightly shifted atoms;
//! 3. velocity pairings of single-node probes, turned into position and
//!    acceleration functionals through `D_Z`;
//! 4. chart frames from smooth candidate waves and the recovered cocycle;
//! 5. the fiber metric from constrained minimal energies;
//! 6. the operator stencil fitted from the wave graph.

mod delta;
mod dictionary;
mod frame;
mod metric;
mod operator;
mod pairing;
mod pipeline;
mod synth;

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AdmissibleQuery, Oracle};

pub use delta::{delta_search, DeltaLevel, DeltaSequence};
pub use dictionary::{
    build_gram, estimate_generator, staggered_layout, Atom, AtomDictionary, CrossGram,
    EnergyCoordinates, Generator,
};
pub use frame::{frame_and_cocycle, select_candidates, ChartFrame, RecoveredFrames};
pub use metric::{metric_recover, polarize, RecoveredMetric};
pub use operator::{fit_node, operator_recover, RecoveredOperator};
pub use pairing::{pairing_functionals, velocity_pairing, PairingTable, Probe};
pub use pipeline::{
    reconstruct, reconstruct_with_artifacts, AtomRecord, ChartRecord, FramesRecord, GramRecord,
    RecoveredModel, Roles, StageArtifacts, StageReport, TransitionEntry,
};
pub use synth::{measure_target, semi_norm, synthesize, SynthMode, VirtualSource};

/// Parses a rational written as `p/q`, an integer, or a plain decimal such as `0.05`.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let t = s.trim();
    let bad = || Error::ConfigInvalid {
        path: String::new(),
        message: format!("`{s}` is not a rational number"),
    };
    if let Ok(q) = BigRational::from_str(t) {
        return Ok(q);
    }
    let (int, frac) = t.split_once('.').ok_or_else(bad)?;
    let num = BigRational::from_str(&format!("{int}{frac}")).map_err(|_| bad())?;
    let den = num_bigint::BigInt::from(10u32).pow(frac.len() as u32);
    Ok(num / BigRational::from_integer(den))
}

/// Tolerances, steps and layout choices of the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    /// Shift of the first dictionary atom (rational).
    pub base_shift: String,
    /// Gap between consecutive atom supports (rational).
    pub gap: String,
    /// Central difference step for the measured pairings (rational).
    pub pairing_step: String,
    /// Shift step for the generator estimate (rational).
    pub generator_step: String,
    /// Combine steps `h` and `h/2` by Richardson extrapolation.
    pub richardson: bool,
    /// Relative singular-value cutoff for the Gram rank.
    pub rank_rtol: f64,
    /// Ridge parameter relative to the Gram trace.
    pub ridge: f64,
    /// Largest accepted relative disagreement between steps `h` and `h/2`.
    pub derivative_tol: f64,
    /// Number of recovered charts and their overlap in nodes.
    pub charts: usize,
    pub chart_overlap: usize,
    /// Number of low generator modes offered as frame candidates, per fiber dimension.
    pub candidates_per_rank: usize,
    /// Smallest acceptable frame score.
    pub frame_tol: f64,
    /// Largest acceptable condition number of a recovered transition.
    pub overlap_condition_tol: f64,
    /// Smallest relative singular value of the jet matrix.
    pub jet_tol: f64,
    /// Largest relative residual of the stencil fit.
    pub fit_tol: f64,
    /// Largest Cauchy defect accepted by the delta search.
    pub cauchy_tol: f64,
    /// Nodes at which the delta search runs (empty: skip).
    pub delta_nodes: Vec<usize>,
    /// Asymmetry accepted when decomposing the rebuilt operator.
    pub rebuilt_asymmetry_tol: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            base_shift: "1/10".into(),
            gap: "1/20".into(),
            pairing_step: "1/1000".into(),
            generator_step: "1/1000".into(),
            richardson: true,
            rank_rtol: 1e-9,
            ridge: 1e-10,
            derivative_tol: 1e-2,
            charts: 4,
            chart_overlap: 3,
            candidates_per_rank: 6,
            frame_tol: 1e-6,
            overlap_condition_tol: 1e8,
            jet_tol: 1e-10,
            fit_tol: 1e-3,
            cauchy_tol: 1e-3,
            delta_nodes: Vec::new(),
            rebuilt_asymmetry_tol: 1e-2,
        }
    }
}

/// Counts every scalar taken from the oracle, for the firewall audit.
pub struct Measurer<'a> {
    oracle: &'a Oracle,
    consumed: AtomicUsize,
    start: usize,
}

const CHUNK: usize = 16_384;

impl<'a> Measurer<'a> {
    pub fn new(oracle: &'a Oracle) -> Self {
        Self {
            oracle,
            consumed: AtomicUsize::new(0),
            start: oracle.query_count(),
        }
    }

    pub fn oracle(&self) -> &Oracle {
        self.oracle
    }

    pub fn catalog(&self) -> &crate::oracle::FamilyCatalog {
        self.oracle.catalog()
    }

    pub fn measure(&self, q: &AdmissibleQuery) -> Result<f64> {
        let e = self.oracle.measure(q)?;
        self.consumed.fetch_add(1, Ordering::Relaxed);
        Ok(e)
    }

    /// Measures lazily generated queries in parallel chunks, preserving order.
    pub fn measure_many(
        &self,
        count: usize,
        make: impl Fn(usize) -> AdmissibleQuery + Sync,
    ) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let mut out = Vec::with_capacity(count);
        let mut lo = 0;
        while lo < count {
            let hi = (lo + CHUNK).min(count);
            let qs: Vec<AdmissibleQuery> = (lo..hi).into_par_iter().map(&make).collect();
            out.extend(self.oracle.measure_batch(&qs)?);
            self.consumed.fetch_add(hi - lo, Ordering::Relaxed);
            lo = hi;
        }
        Ok(out)
    }

    pub fn consumed(&self) -> usize {
        self.consumed.load(Ordering::Relaxed)
    }

    /// `true` when every oracle query since construction was consumed here.
    pub fn audit(&self) -> bool {
        self.oracle.query_count() - self.start == self.consumed()
    }
}
