//! Scheduling engine for model-less inference serving.
//!
//! Callers state a latency SLO and an accuracy floor; the engine chooses a
//! concrete model-variant (architecture x hardware x optimizer x batch size),
//! places it on a worker, and scales instances and workers as load moves.
//! Everything runs inside a deterministic discrete-event simulator.
//!
//! Module map:
//!
//! * [`catalog`]: architectures, variants, and profile generation/ingestion
//! * [`store`]: indexed metadata store for variants, instances and workers
//! * [`lifecycle`]: instance state machine and monitor classification
//! * [`selection`]: per-query variant and worker choice, mitigation plans
//! * [`scaling`]: action cost, exact ILP search and greedy model autoscaling
//! * [`cluster`]: worker-level autoscaling rules and bin-pack dispatch
//! * [`workload`]: arrival patterns, trace replay and popularity sampling
//! * [`sim`]: the discrete-event engine and its metrics
//! * [`experiment`]: config files, experiment runs and run comparison

pub mod catalog;
pub mod cluster;
pub mod experiment;
pub mod ids;
pub mod lifecycle;
pub mod resources;
pub mod scaling;
pub mod selection;
pub mod sim;
pub mod store;
pub mod time;
pub mod workload;

pub use catalog::{Catalog, ModelArchitecture, VariantProfile};
pub use ids::{AppId, ArchId, InstanceId, VariantId, WorkerId};
pub use lifecycle::InstanceState;
pub use resources::{Hardware, Resources};
pub use store::MetadataStore;
