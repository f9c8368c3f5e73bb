//! Phishing address detection on transaction multigraphs.
//!
//! The pipeline turns raw value transfers into per-address representations
//! built from three blocks and classifies them with boosted trees:
//!
//! * hand-crafted statistics of each address ([`txgraph`]),
//! * trading features: per-pair transaction sequences encoded by an LSTM
//!   ([`temporal_edge`]) and pooled onto addresses with multi-head attention
//!   ([`edge2node`]),
//! * structural features from a graph autoencoder trained jointly with the
//!   two modules above ([`structural`]).
//!
//! [`synthgen`] produces seeded synthetic networks with planted phishing
//! behaviour, and [`evaluation`] runs ablations and sensitivity sweeps on them.

pub mod classifier;
pub mod config;
pub mod edge2node;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod nncore;
pub mod structural;
pub mod synthgen;
pub mod temporal_edge;
pub mod txgraph;

pub use classifier::{GbdtConfig, GbdtModel, LabeledDataset, Split};
pub use config::{RunConfig, SeqLength};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{AblationVariant, MetricsReport};
pub use ingest::{Label, LabelSet, TransactionRecord};
pub use nncore::{Matrix, ParamStore};
pub use structural::NodeRepresentation;
pub use txgraph::{NodeStatFeatures, TxMultiGraph};
