pub mod belief;
pub mod error;
pub mod linalg;
pub mod recursive;
pub mod rng;
pub mod ensemble;
pub mod models;
pub mod metrics;
pub mod oracle;
pub mod harness;
