//! Domain types, validation, and derived optical quantities shared by the
//! rest of the engine.
//!
//! A run is described by four blocks: the per-party source settings (four
//! intensities and their selection probabilities), the optical link budget,
//! the pulse-train timing, and the security parameters of the finite-key
//! analysis. All of them are immutable after validation and safe to share
//! across worker threads.
//!
//! Loss convention: the midpoint insertion loss and the detection time-gate
//! loss are shared elements, but each arm's photons traverse them once, so
//! both dB values are charged in full to every arm. `dark_rate_hz` is the
//! effective in-gate background rate per detector (intrinsic dark counts
//! plus reference-pulse scatter folded into one number).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Identifies one of the two transmitting parties / fiber arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Alice,
    Bob,
}

/// The four source choices available in each time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    /// Vacuum (intensity 0).
    V,
    /// Weak decoy.
    X,
    /// Strong decoy.
    Y,
    /// Signal.
    Z,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::V, Source::X, Source::Y, Source::Z];

    pub fn index(self) -> usize {
        match self {
            Source::V => 0,
            Source::X => 1,
            Source::Y => 2,
            Source::Z => 3,
        }
    }

    pub fn from_index(i: usize) -> Source {
        Source::ALL[i]
    }

    pub fn label(self) -> char {
        match self {
            Source::V => 'v',
            Source::X => 'x',
            Source::Y => 'y',
            Source::Z => 'z',
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Per-party intensities and selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSettings {
    pub mu_v: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    pub p_v: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
}

impl SourceSettings {
    pub fn intensity(&self, s: Source) -> f64 {
        match s {
            Source::V => self.mu_v,
            Source::X => self.mu_x,
            Source::Y => self.mu_y,
            Source::Z => self.mu_z,
        }
    }

    pub fn probability(&self, s: Source) -> f64 {
        match s {
            Source::V => self.p_v,
            Source::X => self.p_x,
            Source::Y => self.p_y,
            Source::Z => self.p_z,
        }
    }
}

/// Optical link budget and detection parameters.
///
/// Lengths/losses are per arm; the shared midpoint losses are charged in
/// full to each arm (see module docs). Detector efficiencies are indexed by
/// arm for the purpose of [`arm_transmittance`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub arm_length_km_a: f64,
    pub arm_length_km_b: f64,
    pub attenuation_db_per_km: f64,
    pub midpoint_insertion_db: f64,
    pub gate_loss_db: f64,
    pub detector_efficiency_1: f64,
    pub detector_efficiency_2: f64,
    /// Effective in-gate background rate per detector, Hz.
    pub dark_rate_hz: f64,
    pub gate_ns: f64,
    /// Matched-phase X-basis error floor (encodes interference visibility).
    pub baseline_x_error: f64,
}

impl LinkModel {
    pub fn arm_length_km(&self, party: Party) -> f64 {
        match party {
            Party::Alice => self.arm_length_km_a,
            Party::Bob => self.arm_length_km_b,
        }
    }

    pub fn detector_efficiency(&self, party: Party) -> f64 {
        match party {
            Party::Alice => self.detector_efficiency_1,
            Party::Bob => self.detector_efficiency_2,
        }
    }

    /// Background click probability per detector per gate.
    pub fn dark_per_gate(&self) -> f64 {
        self.dark_rate_hz * self.gate_ns * 1e-9
    }

    /// Interference visibility implied by the baseline X error:
    /// a matched-phase error fraction e gives V = 1 - 2e.
    pub fn visibility(&self) -> f64 {
        1.0 - 2.0 * self.baseline_x_error
    }

    /// Total channel loss quoted for the link (fiber only, both arms), dB.
    pub fn total_fiber_loss_db(&self) -> f64 {
        (self.arm_length_km_a + self.arm_length_km_b) * self.attenuation_db_per_km
    }
}

/// Pulse-train timing of one modulation period.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTiming {
    pub period_ns: f64,
    pub n_signal: u32,
    pub signal_width_ps: f64,
    pub signal_interval_ns: f64,
    pub n_reference: u32,
    pub reference_width_ns: f64,
    pub extinction_ns: f64,
    pub n_phase_values: u32,
}

impl Default for FrameTiming {
    fn default() -> Self {
        FrameTiming {
            period_ns: 1000.0,
            n_signal: 100,
            signal_width_ps: 240.0,
            signal_interval_ns: 3.76,
            n_reference: 4,
            reference_width_ns: 124.0,
            extinction_ns: 104.0,
            n_phase_values: 16,
        }
    }
}

impl FrameTiming {
    /// Effective signal rate in Hz (signals per period / period length).
    pub fn signal_rate_hz(&self) -> f64 {
        self.n_signal as f64 / (self.period_ns * 1e-9)
    }
}

/// Finite-key security parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SecurityParams {
    /// Error-correction efficiency factor multiplying H(E).
    pub f_ec: f64,
    /// Failure probability per use of a concentration bound and for the
    /// error-correction / privacy-amplification steps.
    pub epsilon: f64,
    /// Total number of pulse pairs sent.
    pub n_total: f64,
}

/// Which raw-key source intensities contribute untagged (single-photon)
/// bits in the analysis. The stronger distillation counts both y and z;
/// the fallback counts z only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UntaggedSources {
    #[default]
    YandZ,
    ZOnly,
}

impl UntaggedSources {
    pub fn label(self) -> &'static str {
        match self {
            UntaggedSources::YandZ => "yz",
            UntaggedSources::ZOnly => "z",
        }
    }

    pub fn parse(s: &str) -> Option<UntaggedSources> {
        match s {
            "yz" | "y+z" => Some(UntaggedSources::YandZ),
            "z" => Some(UntaggedSources::ZOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("selection probabilities sum to {sum} (party {party:?}); must be 1 within 1e-12")]
    ProbabilityNotNormalized { party: Party, sum: f64 },
    #[error("intensity ordering violated (party {party:?}): need 0 = mu_v < mu_x < mu_y <= mu_z, got mu_v={mu_v}, mu_x={mu_x}, mu_y={mu_y}, mu_z={mu_z}")]
    IntensityOrderViolation {
        party: Party,
        mu_v: f64,
        mu_x: f64,
        mu_y: f64,
        mu_z: f64,
    },
    #[error("negative probability {value} for source {which} (party {party:?})")]
    NegativeProbability {
        party: Party,
        which: char,
        value: f64,
    },
    #[error("negative loss or rate: {field} = {value}")]
    NegativeLoss { field: &'static str, value: f64 },
    #[error("detector efficiency {value} outside (0, 1]: {field}")]
    BadEfficiency { field: &'static str, value: f64 },
    #[error("baseline X error {0} outside [0, 0.5)")]
    BadBaselineError(f64),
    #[error("timing invariant violated: {0}")]
    BadTiming(String),
    #[error("security parameter invalid: {0}")]
    BadSecurity(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("io error: {0}")]
    Io(String),
}

/// A fully validated run configuration.
///
/// Construction is only possible through [`validate_config`] or
/// [`ValidatedConfig::load`], so holding one is proof that every type
/// invariant holds.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub alice: SourceSettings,
    pub bob: SourceSettings,
    pub link: LinkModel,
    pub timing: FrameTiming,
    pub security: SecurityParams,
    pub untagged_sources: UntaggedSources,
}

fn validate_sources(party: Party, s: &SourceSettings) -> Result<(), ConfigError> {
    for (src, p) in [
        ('v', s.p_v),
        ('x', s.p_x),
        ('y', s.p_y),
        ('z', s.p_z),
    ] {
        if p < 0.0 {
            return Err(ConfigError::NegativeProbability {
                party,
                which: src,
                value: p,
            });
        }
    }
    let sum = s.p_v + s.p_x + s.p_y + s.p_z;
    if (sum - 1.0).abs() > 1e-12 {
        return Err(ConfigError::ProbabilityNotNormalized { party, sum });
    }
    let ordered = s.mu_v == 0.0 && s.mu_v < s.mu_x && s.mu_x < s.mu_y && s.mu_y <= s.mu_z;
    if !ordered {
        return Err(ConfigError::IntensityOrderViolation {
            party,
            mu_v: s.mu_v,
            mu_x: s.mu_x,
            mu_y: s.mu_y,
            mu_z: s.mu_z,
        });
    }
    Ok(())
}

fn validate_link(link: &LinkModel) -> Result<(), ConfigError> {
    let losses: [(&'static str, f64); 6] = [
        ("arm_length_km_a", link.arm_length_km_a),
        ("arm_length_km_b", link.arm_length_km_b),
        ("attenuation_db_per_km", link.attenuation_db_per_km),
        ("midpoint_insertion_db", link.midpoint_insertion_db),
        ("gate_loss_db", link.gate_loss_db),
        ("dark_rate_hz", link.dark_rate_hz),
    ];
    for (field, value) in losses {
        if value < 0.0 {
            return Err(ConfigError::NegativeLoss { field, value });
        }
    }
    if link.gate_ns < 0.0 {
        return Err(ConfigError::NegativeLoss {
            field: "gate_ns",
            value: link.gate_ns,
        });
    }
    for (field, value) in [
        ("detector_efficiency_1", link.detector_efficiency_1),
        ("detector_efficiency_2", link.detector_efficiency_2),
    ] {
        if !(value > 0.0 && value <= 1.0) {
            return Err(ConfigError::BadEfficiency { field, value });
        }
    }
    if !(0.0..0.5).contains(&link.baseline_x_error) {
        return Err(ConfigError::BadBaselineError(link.baseline_x_error));
    }
    Ok(())
}

fn validate_timing(t: &FrameTiming) -> Result<(), ConfigError> {
    if t.n_signal == 0 || t.period_ns <= 0.0 {
        return Err(ConfigError::BadTiming(
            "period and signal count must be positive".into(),
        ));
    }
    // All signals must fit in the leading part of the period that is not
    // occupied by reference and extinction pulses.
    let signal_span_ns = t.n_signal as f64 * t.signal_interval_ns;
    let tail_ns = t.n_reference as f64 * t.reference_width_ns + t.extinction_ns;
    if signal_span_ns + tail_ns > t.period_ns + 1e-9 {
        return Err(ConfigError::BadTiming(format!(
            "signal span {signal_span_ns} ns plus reference/extinction {tail_ns} ns exceeds period {} ns",
            t.period_ns
        )));
    }
    if t.n_phase_values == 0 {
        return Err(ConfigError::BadTiming("n_phase_values must be >= 1".into()));
    }
    Ok(())
}

fn validate_security(s: &SecurityParams) -> Result<(), ConfigError> {
    if s.f_ec < 1.0 {
        return Err(ConfigError::BadSecurity(format!(
            "f_ec = {} must be >= 1",
            s.f_ec
        )));
    }
    if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
        return Err(ConfigError::BadSecurity(format!(
            "epsilon = {} must lie in (0, 1)",
            s.epsilon
        )));
    }
    if s.n_total.is_nan() || s.n_total <= 0.0 {
        return Err(ConfigError::BadSecurity(format!(
            "n_total = {} must be positive",
            s.n_total
        )));
    }
    Ok(())
}

/// Validate all blocks and assemble a [`ValidatedConfig`].
///
/// Symmetric experiments pass the same `SourceSettings` for both parties.
pub fn validate_config(
    alice: SourceSettings,
    bob: SourceSettings,
    link: LinkModel,
    timing: FrameTiming,
    security: SecurityParams,
) -> Result<ValidatedConfig, ConfigError> {
    validate_sources(Party::Alice, &alice)?;
    validate_sources(Party::Bob, &bob)?;
    validate_link(&link)?;
    validate_timing(&timing)?;
    validate_security(&security)?;
    Ok(ValidatedConfig {
        alice,
        bob,
        link,
        timing,
        security,
        untagged_sources: UntaggedSources::default(),
    })
}

impl ValidatedConfig {
    pub fn settings(&self, party: Party) -> &SourceSettings {
        match party {
            Party::Alice => &self.alice,
            Party::Bob => &self.bob,
        }
    }

    /// Probability that a window uses Alice source `l` and Bob source `r`.
    pub fn pair_probability(&self, l: Source, r: Source) -> f64 {
        self.alice.probability(l) * self.bob.probability(r)
    }
}

/// One-arm transmittance: fiber attenuation, the full midpoint insertion
/// and gate losses, and the detector efficiency assigned to that arm.
pub fn arm_transmittance(link: &LinkModel, party: Party) -> f64 {
    let db = link.arm_length_km(party) * link.attenuation_db_per_km
        + link.midpoint_insertion_db
        + link.gate_loss_db;
    10f64.powf(-db / 10.0) * link.detector_efficiency(party)
}

/// Fiber-only transmittance of one arm (no midpoint losses, no detector).
pub fn fiber_transmittance(length_km: f64, attenuation_db_per_km: f64) -> f64 {
    10f64.powf(-(length_km * attenuation_db_per_km) / 10.0)
}

// ---------------------------------------------------------------------------
// Config file loading: line-oriented `key = value` text, strict key set.
// ---------------------------------------------------------------------------

struct KvFile {
    entries: Vec<(usize, String, String)>,
}

impl KvFile {
    fn parse(text: &str) -> Result<KvFile, ConfigError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push((line_no, key.trim().to_string(), value.trim().to_string()));
        }
        Ok(KvFile { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(_, _, v)| v.as_str())
    }

    fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        let raw = self
            .get(key)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))?;
        raw.parse::<f64>().map_err(|e| ConfigError::Parse {
            line: self.line_of(key),
            message: format!("bad number for `{key}`: {e}"),
        })
    }

    fn optional_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<f64>().map_err(|e| ConfigError::Parse {
                line: self.line_of(key),
                message: format!("bad number for `{key}`: {e}"),
            }),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, _)| *l)
            .unwrap_or(0)
    }
}

const SOURCE_KEYS: [&str; 8] = ["mu_v", "mu_x", "mu_y", "mu_z", "p_v", "p_x", "p_y", "p_z"];
const LINK_KEYS: [&str; 10] = [
    "arm_length_km_a",
    "arm_length_km_b",
    "attenuation_db_per_km",
    "midpoint_insertion_db",
    "gate_loss_db",
    "detector_efficiency_1",
    "detector_efficiency_2",
    "dark_rate_hz",
    "gate_ns",
    "baseline_x_error",
];
const TIMING_KEYS: [&str; 8] = [
    "period_ns",
    "n_signal",
    "signal_width_ps",
    "signal_interval_ns",
    "n_reference",
    "reference_width_ns",
    "extinction_ns",
    "n_phase_values",
];
const SECURITY_KEYS: [&str; 3] = ["f_ec", "epsilon", "n_total"];
const NOISE_KEYS: [&str; 4] = [
    "delta_nu_std_hz",
    "delta_nu_range_hz",
    "drift_rate_rad_per_us",
    "fiber_drift_rad_per_us",
];
const OTHER_KEYS: [&str; 1] = ["untagged_sources"];

/// Phase-noise block as stored in config files; mirrored into
/// `channel::PhaseNoiseParams` by the loader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub delta_nu_std_hz: f64,
    pub delta_nu_range_hz: f64,
    pub drift_rate_rad_per_us: f64,
    pub fiber_drift_rad_per_us: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            delta_nu_std_hz: 60.0,
            delta_nu_range_hz: 450.0,
            drift_rate_rad_per_us: 0.015,
            fiber_drift_rad_per_us: 0.0,
        }
    }
}

impl ValidatedConfig {
    /// Load and validate a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<(ValidatedConfig, NoiseConfig), ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{path:?}: {e}")))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<(ValidatedConfig, NoiseConfig), ConfigError> {
        let kv = KvFile::parse(text)?;

        let mut known: HashSet<String> = HashSet::new();
        for k in SOURCE_KEYS {
            known.insert(k.to_string());
            known.insert(format!("{k}_b"));
        }
        known.extend(LINK_KEYS.iter().map(|s| s.to_string()));
        known.extend(TIMING_KEYS.iter().map(|s| s.to_string()));
        known.extend(SECURITY_KEYS.iter().map(|s| s.to_string()));
        known.extend(NOISE_KEYS.iter().map(|s| s.to_string()));
        known.extend(OTHER_KEYS.iter().map(|s| s.to_string()));

        for (line, key, _) in &kv.entries {
            if !known.contains(key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    line: *line,
                });
            }
        }

        let source = |suffix: &str| -> Result<SourceSettings, ConfigError> {
            let g = |base: &str| -> Result<f64, ConfigError> {
                let key = format!("{base}{suffix}");
                if suffix.is_empty() || kv.get(&key).is_some() {
                    kv.require_f64(&key)
                } else {
                    // Asymmetric keys fall back to the symmetric value.
                    kv.require_f64(base)
                }
            };
            Ok(SourceSettings {
                mu_v: g("mu_v")?,
                mu_x: g("mu_x")?,
                mu_y: g("mu_y")?,
                mu_z: g("mu_z")?,
                p_v: g("p_v")?,
                p_x: g("p_x")?,
                p_y: g("p_y")?,
                p_z: g("p_z")?,
            })
        };
        let alice = source("")?;
        let bob = source("_b")?;

        let link = LinkModel {
            arm_length_km_a: kv.require_f64("arm_length_km_a")?,
            arm_length_km_b: kv.require_f64("arm_length_km_b")?,
            attenuation_db_per_km: kv.require_f64("attenuation_db_per_km")?,
            midpoint_insertion_db: kv.require_f64("midpoint_insertion_db")?,
            gate_loss_db: kv.require_f64("gate_loss_db")?,
            detector_efficiency_1: kv.require_f64("detector_efficiency_1")?,
            detector_efficiency_2: kv.require_f64("detector_efficiency_2")?,
            dark_rate_hz: kv.require_f64("dark_rate_hz")?,
            gate_ns: kv.require_f64("gate_ns")?,
            baseline_x_error: kv.require_f64("baseline_x_error")?,
        };

        let dt = FrameTiming::default();
        let timing = FrameTiming {
            period_ns: kv.optional_f64("period_ns", dt.period_ns)?,
            n_signal: kv.optional_f64("n_signal", dt.n_signal as f64)? as u32,
            signal_width_ps: kv.optional_f64("signal_width_ps", dt.signal_width_ps)?,
            signal_interval_ns: kv.optional_f64("signal_interval_ns", dt.signal_interval_ns)?,
            n_reference: kv.optional_f64("n_reference", dt.n_reference as f64)? as u32,
            reference_width_ns: kv.optional_f64("reference_width_ns", dt.reference_width_ns)?,
            extinction_ns: kv.optional_f64("extinction_ns", dt.extinction_ns)?,
            n_phase_values: kv.optional_f64("n_phase_values", dt.n_phase_values as f64)? as u32,
        };

        let security = SecurityParams {
            f_ec: kv.require_f64("f_ec")?,
            epsilon: kv.require_f64("epsilon")?,
            n_total: kv.require_f64("n_total")?,
        };

        let dn = NoiseConfig::default();
        let noise = NoiseConfig {
            delta_nu_std_hz: kv.optional_f64("delta_nu_std_hz", dn.delta_nu_std_hz)?,
            delta_nu_range_hz: kv.optional_f64("delta_nu_range_hz", dn.delta_nu_range_hz)?,
            drift_rate_rad_per_us: kv.optional_f64("drift_rate_rad_per_us", dn.drift_rate_rad_per_us)?,
            fiber_drift_rad_per_us: kv
                .optional_f64("fiber_drift_rad_per_us", dn.fiber_drift_rad_per_us)?,
        };

        let untagged = match kv.get("untagged_sources") {
            None => UntaggedSources::default(),
            Some(raw) => UntaggedSources::parse(raw).ok_or(ConfigError::Parse {
                line: kv.line_of("untagged_sources"),
                message: format!("untagged_sources must be `yz` or `z`, got `{raw}`"),
            })?,
        };

        let mut cfg = validate_config(alice, bob, link, timing, security)?;
        cfg.untagged_sources = untagged;
        Ok((cfg, noise))
    }
}
