//! ELU-RMDN: a recurrent mixture density network for conditional density
//! forecasting of return series.
//!
//! The model has three subnetworks fed by the previous return (mixing and
//! mean networks) and by the previous squared residual and component variance
//! (variance network). Variances pass through a positive exponential linear
//! unit so they stay strictly positive. With one component and only the
//! linear hidden nodes the model reduces to an AR(1)-GARCH(1,1), which is
//! provided separately in [`garch`] as a baseline and as the target of the
//! linear-node pretraining schedule in [`optim`].

pub mod autodiff;
pub mod data;
pub mod error;
pub mod garch;
pub mod harness;
pub mod mixture;
pub mod optim;
pub mod rmdn;

pub use autodiff::{apply_mask, finite_diff_check, gradient, FreezeMask, GradientVector};
pub use data::ReturnSeries;
pub use error::{Error, Result};
pub use garch::GarchParams;
pub use mixture::MixtureStep;
pub use optim::{AdamState, ConvergenceStatus, TrainReport, TrainSchedule};
pub use rmdn::{InitScheme, RecurrentState, RmdnConfig, RmdnParams};
pub use harness::{run_benchmark, BenchmarkReport, Method, ReportFormat, RunRecord};
