//! Deterministic simulator for federated learning across clients with
//! heterogeneous data and heterogeneous model capacities.
//!
//! The server trains one global dense classifier. Each round it extracts
//! width-restricted sub-models matching per-client budgets, clients run local
//! SGD, and the server selectively averages the returned parameters. On top
//! of that baseline sits an optional data-free distillation stage: a
//! conditional generator trained against the uploaded local models under
//! fidelity, transferability and diversity objectives synthesizes data, an
//! exponential-moving-average copy of the generator stabilizes the stream
//! across rounds, and the global model distills the locals' ensembled logits
//! on the synthetic batches with dynamic per-label weighting and label
//! sampling.
//!
//! Everything is 64-bit, single-threaded and seeded through one master seed,
//! so any run is reproducible bit for bit.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod heterofed;
pub mod models;
pub mod optim;
pub mod orchestrator;
pub mod params;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
