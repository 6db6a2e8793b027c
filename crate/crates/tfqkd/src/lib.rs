//! Simulator and finite-key analysis engine for sending-or-not-sending
//! twin-field quantum key distribution with free-running lasers.
//!
//! The crate covers the full classical chain of such an experiment:
//!
//! * [`config`] — validated run descriptions: source intensities and
//!   probabilities, link budget, pulse-train timing, security parameters.
//! * [`channel`] — the physical model: phase-noise trajectories,
//!   interference click probabilities, analytic expected counts, and a
//!   seeded Monte Carlo frame simulator.
//! * [`phase`] — per-slice drift estimation from strong reference pulses,
//!   phase compensation, and the post-selection window.
//! * [`sifting`] — effective-event classification, raw-key construction
//!   with the send-or-not bit mapping, X-window error tallies.
//! * [`aopp`] — actively-odd-parity pairing of the raw keys.
//! * [`finite_key`] — Chernoff interval estimation, decoy-state bounds,
//!   pairing-transformed bounds, the secure key rate, and the
//!   repeaterless capacity benchmark.
//! * [`optimizer`] — operating-point search and distance sweeps.
//! * [`table`] / [`report`] — diff-friendly text formats for counts
//!   tables, analysis reports, and sweep curves.
//! * [`pipeline`] — the glue joining all of the above.

pub mod aopp;
pub mod channel;
pub mod config;
pub mod finite_key;
pub mod optimizer;
pub mod phase;
pub mod pipeline;
pub mod report;
pub mod sifting;
pub mod table;

pub use config::{
    arm_transmittance, validate_config, FrameTiming, LinkModel, NoiseConfig, Party,
    SecurityParams, Source, SourceSettings, UntaggedSources, ValidatedConfig,
};
pub use finite_key::{
    binary_entropy, chernoff_lower, chernoff_upper, plob_bound, KeyRateReport,
};
