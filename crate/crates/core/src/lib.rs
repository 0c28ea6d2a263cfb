//! Multi-source domain adaptation by joint representation alignment.
//!
//! The crate trains a representation `g(u, ·)`, a predictor `h(v, ·)` and a
//! duplicate predictor `h(v′, ·)` whose ascent realises the dual form of two
//! Wasserstein-1 distances. Parameters move by Langevin steps whose squared
//! gradient norms are kept in a ledger; the ledger feeds both the domain-weight
//! regulariser and the generalization bound report.
//!
//! Module map:
//! - [`diffcore`]: dense matrices and a reverse-mode tape.
//! - [`models`]: the three MLPs and their spectral Lipschitz certificates.
//! - [`risks`]: empirical risks, dual Wasserstein estimates and both gradient penalties.
//! - [`optimizer`]: Langevin and ascent steps plus the gradient-norm ledger.
//! - [`alpha_solver`]: simplex-constrained domain weights.
//! - [`theory`]: exact transport oracles, inequality checks and bound calculators.
//! - [`data`]: synthetic sources, target shift, CSV ingestion and batch streams.
//! - [`harness`]: configuration, the training loop and CSV outputs.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alpha_solver;
pub mod data;
pub mod diffcore;
pub mod harness;
pub mod models;
pub mod optimizer;
pub mod risks;
pub mod seeding;
pub mod theory;

pub use alpha_solver::{AlphaObjective, DomainWeights};
pub use data::{LabeledSet, MultiSourceDataset, ShiftSpec, SyntheticBenchmark, UnlabeledSet};
pub use diffcore::{DenseMatrix, Graph, ParameterVector};
pub use harness::{ExperimentConfig, Mode, RunError, RunOutcome};
pub use models::{Architecture, LipschitzCertificate, ModelTriple, Task};
pub use optimizer::{GradNormLedger, SgldConfig};
pub use risks::{ObjectiveWeights, RiskBreakdown};
pub use theory::{BoundConstants, BoundReport, GroundMetric};
