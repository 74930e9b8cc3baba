//! Alternating minimization and gradient-descent solvers for mixed linear
//! regression, with a spectral initializer, convergence-rate metrics and a
//! reproducible benchmark harness.

pub mod am;
pub mod bench;
pub mod datagen;
pub mod error;
pub mod gd;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod spectral;

pub use am::{run_am, AmConfig, Trace};
pub use datagen::{perturbed_init, sample_instance, GroundTruth, Instance, ParamSet};
pub use error::{MixregError, Result};
pub use gd::{run_gd, tune_step_size, GdConfig};
pub use metrics::{dist, fit_convergence_exponent, loss, RateFit, Window};
pub use spectral::{spectral_init, GridSpec};
pub use bench::{compare_table, lemma1_sweep, run_panel, ExperimentSpec, Lemma1Spec, Panel};
