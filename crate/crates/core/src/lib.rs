//! Marginal additive subdistribution hazards regression for clustered
//! competing-risks data.
//!
//! The estimators are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix `f64`, which is what the command-line tool uses.

pub mod censoring;
pub mod dataset;
pub mod error;
pub mod fitter;
pub mod gof;
pub mod linalg;
pub mod scalar;
pub mod variance;
pub mod weights;

pub use censoring::{cc_weight, fit_censoring_km, ipcw_weight, CensoringModel};
pub use dataset::{
    build_grid, counting_process, load_dataset, save_dataset, CauseCode, ClusteredDataset,
    CovariatePath, DatasetBuilder, Schema, SubjectRecord, TimeBasis, TimeGrid,
};
pub use error::{Error, Result};
pub use fitter::{fit, fit_with_censoring, FitResult, Mode, RiskAggregates};
pub use scalar::Scalar;
pub use weights::WeightMatrix;

pub type Dataset = dataset::ClusteredDataset<f64>;
pub type Record = dataset::SubjectRecord<f64>;
pub type Grid = dataset::TimeGrid<f64>;
pub type Censoring = censoring::CensoringModel<f64>;
pub type Fit = fitter::FitResult<f64>;
pub type Sandwich = variance::SandwichParts<f64>;
pub type Cif = variance::CifPrediction<f64>;
pub type Report = gof::GofReport<f64>;
