//! coopsim: a deterministic simulator and benchmark harness for
//! vehicle-infrastructure cooperative driving.
//!
//! The library models the full cooperation loop with oracle perception in
//! place of neural backbones:
//!
//! - [`scenario`]: synthetic intersection worlds and per-view oracle
//!   perception (agent queries, lane queries, occupancy probability maps).
//! - [`infra`]: the roadside unit's sparse-dense hybrid payload — filtered
//!   instance queries plus a `(p0, p1)` occupancy map whose linear flow
//!   enables latency compensation.
//! - [`channel`]: bit-exact wire codec, byte-per-second cost accounting,
//!   bandwidth budgeting with score-based retention, seeded corruption, and
//!   a latency queue.
//! - [`fusion`]: temporal/spatial synchronization, Hungarian cross-view
//!   matching, confidence-weighted query fusion, ego-area removal, lane
//!   concatenation, and occupancy warp + max fusion.
//! - [`planner`]: command-conditioned candidate trajectories scored against
//!   forecast occupied grids.
//! - [`metrics`]: detection AP, MOTA, occupancy/lane IoU, and planning
//!   L2/collision/off-road rates.
//! - [`harness`]: experiment configs, the four comparison modes, and the
//!   bandwidth/latency/corruption sweeps, all deterministic per seed.
//!
//! Start with the runnable examples (`cargo run --example <name>`):
//! `generate_scenario`, `hybrid_payload`, `channel_conditions`,
//! `fusion_pipeline`, `plan_avoidance`, `evaluate_modes`, `ablation_sweeps`.
//! The `coopsim` binary wraps the harness for batch use
//! (`coopsim gen|run|sweep|report`).
//!
//! Programmatic use is one call per experiment cell:
//!
//! ```
//! use coopsim::harness::{run_mode, ExperimentConfig, Mode};
//!
//! let cfg = ExperimentConfig {
//!     seeds: vec![0],
//!     feature_dim: 16,
//!     mode: Mode::Univ2x,
//!     ..Default::default()
//! };
//! let record = run_mode(&cfg).unwrap();
//! assert!(record.mean.det_recall > 0.5);
//! assert!(record.mean.avg_bps > 0.0);
//! ```

pub mod channel;
pub mod core;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod infra;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};
