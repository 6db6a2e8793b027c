//! Physical model of the twin-field link: phase-noise trajectories,
//! per-slot click probabilities at the midpoint beam splitter, analytic
//! expected detection counts per source pair, and a seeded Monte Carlo
//! frame simulator that produces per-event records with hidden truth tags.
//!
//! Phase conventions: announced encoder phase differences are Bob minus
//! Alice, and the channel drift `delta` enters the fringe as
//! `cos(raw - delta)`. Detector 1 is the constructive port at zero
//! compensated phase. The drift trajectory is
//!
//! ```text
//!   delta(t) = 2 pi Int delta_nu(t) dt + W(t)
//! ```
//!
//! with `delta_nu` a bounded slowly varying frequency difference and `W`
//! a random walk whose per-microsecond RMS step is the configured drift
//! rate (laser and fiber contributions added in quadrature).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{arm_transmittance, NoiseConfig, Party, Source, ValidatedConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("model domain error: {0}")]
    ModelDomain(String),
}

/// Relaxation time of the slow frequency-difference wander.
const OU_TAU_S: f64 = 60.0;

/// Periods per phase-estimation slice (10 us of 1 us periods).
pub const SLICE_PERIODS: u32 = 10;

/// Parameters of the relative phase noise between the two sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseNoiseParams {
    /// Standard deviation of the slow laser frequency difference, Hz.
    pub delta_nu_std_hz: f64,
    /// Hard bound on |delta_nu|, Hz.
    pub delta_nu_range_hz: f64,
    /// RMS phase random-walk step per microsecond, rad (laser term).
    pub drift_rate_rad_per_us: f64,
    /// Additional channel-induced random-walk rate, rad per microsecond.
    pub fiber_drift_rad_per_us: f64,
}

impl From<NoiseConfig> for PhaseNoiseParams {
    fn from(n: NoiseConfig) -> Self {
        PhaseNoiseParams {
            delta_nu_std_hz: n.delta_nu_std_hz,
            delta_nu_range_hz: n.delta_nu_range_hz,
            drift_rate_rad_per_us: n.drift_rate_rad_per_us,
            fiber_drift_rad_per_us: n.fiber_drift_rad_per_us,
        }
    }
}

impl PhaseNoiseParams {
    pub fn zero() -> Self {
        PhaseNoiseParams {
            delta_nu_std_hz: 0.0,
            delta_nu_range_hz: 0.0,
            drift_rate_rad_per_us: 0.0,
            fiber_drift_rad_per_us: 0.0,
        }
    }

    /// Combined random-walk RMS per microsecond.
    pub fn walk_rate_rad_per_us(&self) -> f64 {
        (self.drift_rate_rad_per_us.powi(2) + self.fiber_drift_rad_per_us.powi(2)).sqrt()
    }
}

/// Phase accumulated by a fixed frequency difference after `t_s` seconds.
pub fn frequency_phase(delta_nu_hz: f64, t_s: f64) -> f64 {
    2.0 * std::f64::consts::PI * delta_nu_hz * t_s
}

/// Evolving drift state; one instance per simulation shard.
struct DriftProcess {
    params: PhaseNoiseParams,
    delta_nu_hz: f64,
    phase: f64,
}

impl DriftProcess {
    fn new(params: PhaseNoiseParams, rng: &mut impl Rng, random_start: bool) -> Self {
        let mut delta_nu = 0.0;
        let mut phase = 0.0;
        if params.delta_nu_std_hz > 0.0 {
            let g: f64 = rng.sample(StandardNormal);
            delta_nu = (g * params.delta_nu_std_hz)
                .clamp(-params.delta_nu_range_hz, params.delta_nu_range_hz);
        }
        if random_start {
            phase = rng.gen::<f64>() * std::f64::consts::TAU;
        }
        DriftProcess {
            params,
            delta_nu_hz: delta_nu,
            phase,
        }
    }

    fn step_us(&mut self, dt_us: f64, rng: &mut impl Rng) {
        self.phase += frequency_phase(self.delta_nu_hz, dt_us * 1e-6);
        let walk = self.params.walk_rate_rad_per_us();
        if walk > 0.0 {
            let g: f64 = rng.sample(StandardNormal);
            self.phase += walk * dt_us.sqrt() * g;
        }
        if self.params.delta_nu_std_hz > 0.0 {
            let decay = (-dt_us * 1e-6 / OU_TAU_S).exp();
            let g: f64 = rng.sample(StandardNormal);
            self.delta_nu_hz = (self.delta_nu_hz * decay
                + self.params.delta_nu_std_hz * (1.0 - decay * decay).sqrt() * g)
                .clamp(-self.params.delta_nu_range_hz, self.params.delta_nu_range_hz);
        }
    }
}

/// A sampled drift trajectory with one value per step.
#[derive(Debug, Clone)]
pub struct PhasePath {
    pub dt_us: f64,
    pub values: Vec<f64>,
}

/// Sample `delta(t)` at 1 us resolution over `duration_us`, starting from
/// zero phase. Deterministic under the seed.
pub fn sample_phase_path(params: &PhaseNoiseParams, duration_us: f64, seed: u64) -> PhasePath {
    assert!(duration_us > 0.0, "duration must be positive");
    let steps = duration_us.ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut process = DriftProcess::new(*params, &mut rng, false);
    let mut values = Vec::with_capacity(steps + 1);
    values.push(process.phase);
    for _ in 0..steps {
        process.step_us(1.0, &mut rng);
        values.push(process.phase);
    }
    PhasePath { dt_us: 1.0, values }
}

// ---------------------------------------------------------------------------
// Click probabilities.
// ---------------------------------------------------------------------------

/// Mean photon numbers at the two detectors for a pulse pair interfering
/// at the midpoint splitter.
#[inline]
fn detector_means(
    mu_a: f64,
    mu_b: f64,
    dtheta: f64,
    eta_a: f64,
    eta_b: f64,
    visibility: f64,
) -> (f64, f64) {
    let fa = eta_a * mu_a;
    let fb = eta_b * mu_b;
    let avg = 0.5 * (fa + fb);
    let cross = visibility * (fa * fb).sqrt() * dtheta.cos();
    (avg + cross, avg - cross)
}

#[inline]
fn click_from_mean(n: f64, dark: f64) -> f64 {
    1.0 - (1.0 - dark) * (-n).exp()
}

/// Click probability per detector for one pulse pair.
///
/// Detector 1 sees `n1 = (eta_a mu_a + eta_b mu_b)/2 +
/// V sqrt(eta_a mu_a eta_b mu_b) cos(dtheta)`, detector 2 the mirror
/// image, and `p_i = 1 - (1 - dark) exp(-n_i)`.
pub fn click_probabilities(
    mu_a: f64,
    mu_b: f64,
    dtheta: f64,
    eta_a: f64,
    eta_b: f64,
    dark_per_gate: f64,
    visibility: f64,
) -> Result<(f64, f64), ChannelError> {
    if mu_a < 0.0 || mu_b < 0.0 {
        return Err(ChannelError::ModelDomain("negative intensity".into()));
    }
    if !(0.0..=1.0).contains(&eta_a) || !(0.0..=1.0).contains(&eta_b) {
        return Err(ChannelError::ModelDomain(
            "transmittance outside [0, 1]".into(),
        ));
    }
    if !(0.0..=1.0).contains(&visibility) {
        return Err(ChannelError::ModelDomain(
            "visibility outside [0, 1]".into(),
        ));
    }
    if !(0.0..1.0).contains(&dark_per_gate) {
        return Err(ChannelError::ModelDomain(
            "dark probability outside [0, 1)".into(),
        ));
    }
    let (n1, n2) = detector_means(mu_a, mu_b, dtheta, eta_a, eta_b, visibility);
    debug_assert!(n1 >= -1e-15 && n2 >= -1e-15);
    Ok((click_from_mean(n1, dark_per_gate), click_from_mean(n2, dark_per_gate)))
}

#[inline]
fn effective_and_error(n1: f64, n2: f64, dark: f64) -> (f64, f64) {
    let p1 = click_from_mean(n1, dark);
    let p2 = click_from_mean(n2, dark);
    let eff = p1 * (1.0 - p2) + p2 * (1.0 - p1);
    // Error at zero compensated phase: the destructive port clicked alone.
    let err = p2 * (1.0 - p1);
    (eff, err)
}

// ---------------------------------------------------------------------------
// Analytic expected counts.
// ---------------------------------------------------------------------------

/// Expected (real-valued) sent and detected counts per source pair.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    pub sent: [[f64; 4]; 4],
    pub detected: [[f64; 4]; 4],
}

impl ExpectedCounts {
    pub fn detected_total(&self) -> f64 {
        self.detected.iter().flatten().sum()
    }
}

/// Derived per-arm transmittances and detection constants.
#[derive(Debug, Clone, Copy)]
pub struct LinkBudget {
    pub eta_a: f64,
    pub eta_b: f64,
    pub dark: f64,
    pub visibility: f64,
}

impl LinkBudget {
    pub fn of(cfg: &ValidatedConfig) -> LinkBudget {
        LinkBudget {
            eta_a: arm_transmittance(&cfg.link, Party::Alice),
            eta_b: arm_transmittance(&cfg.link, Party::Bob),
            dark: cfg.link.dark_per_gate(),
            visibility: cfg.link.visibility(),
        }
    }

    /// Interference visibility seen by a single photon split across the
    /// two (possibly asymmetric) arms.
    pub fn single_photon_visibility(&self) -> f64 {
        if self.eta_a <= 0.0 || self.eta_b <= 0.0 {
            return 0.0;
        }
        self.visibility * 2.0 * (self.eta_a * self.eta_b).sqrt() / (self.eta_a + self.eta_b)
    }
}

fn simpson<F: Fn(f64) -> f64>(lo: f64, hi: f64, n_half: usize, f: F) -> f64 {
    // Composite Simpson with 2*n_half intervals.
    let n = 2 * n_half;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Expected effective-event probability for a pulse pair, averaged over
/// the stationary uniform distribution of the relative phase. The
/// discrete 16-value encoding convolved with the drift phase is exactly
/// uniform, so the continuous average applies to every interfering pair.
fn pair_effective_probability(mu_a: f64, mu_b: f64, budget: &LinkBudget) -> f64 {
    let fa = budget.eta_a * mu_a;
    let fb = budget.eta_b * mu_b;
    if fa == 0.0 || fb == 0.0 {
        let (n1, n2) = detector_means(mu_a, mu_b, 0.0, budget.eta_a, budget.eta_b, 0.0);
        return effective_and_error(n1, n2, budget.dark).0;
    }
    let f = |phi: f64| {
        let (n1, n2) =
            detector_means(mu_a, mu_b, phi, budget.eta_a, budget.eta_b, budget.visibility);
        effective_and_error(n1, n2, budget.dark).0
    };
    simpson(0.0, std::f64::consts::PI, 64, f) / std::f64::consts::PI
}

/// Analytic expected counts for every source pair at the configured
/// `n_total`. Deterministic; linear in `n_total`.
pub fn expected_pair_counts(cfg: &ValidatedConfig, _noise: &PhaseNoiseParams) -> ExpectedCounts {
    let budget = LinkBudget::of(cfg);
    let mut out = ExpectedCounts {
        sent: [[0.0; 4]; 4],
        detected: [[0.0; 4]; 4],
    };
    for l in Source::ALL {
        for r in Source::ALL {
            let sent = cfg.security.n_total * cfg.pair_probability(l, r);
            let p = pair_effective_probability(
                cfg.alice.intensity(l),
                cfg.bob.intensity(r),
                &budget,
            );
            out.sent[l.index()][r.index()] = sent;
            out.detected[l.index()][r.index()] = sent * p;
        }
    }
    out
}

/// Expected post-selected xx-window tallies.
#[derive(Debug, Clone, Copy)]
pub struct XxWindowExpectation {
    /// Accepted detections inside the window, absolute counts.
    pub accepted: f64,
    /// Errors among the accepted detections.
    pub errors: f64,
    /// Error fraction.
    pub qber: f64,
}

/// Window-resolved xx statistics under ideal phase compensation; the
/// configured visibility absorbs the residual estimation error.
pub fn expected_xx_window(cfg: &ValidatedConfig, ds_half_deg: f64) -> XxWindowExpectation {
    let budget = LinkBudget::of(cfg);
    let delta = ds_half_deg.to_radians();
    let mu_a = cfg.alice.mu_x;
    let mu_b = cfg.bob.mu_x;
    let eff = |phi: f64| {
        let (n1, n2) =
            detector_means(mu_a, mu_b, phi, budget.eta_a, budget.eta_b, budget.visibility);
        effective_and_error(n1, n2, budget.dark)
    };
    // Both windows (around 0 and around pi) contribute identically.
    let accepted_rate =
        simpson(0.0, delta, 64, |phi| eff(phi).0) * 2.0 / std::f64::consts::PI;
    let error_rate = simpson(0.0, delta, 64, |phi| eff(phi).1) * 2.0 / std::f64::consts::PI;
    let sent_xx = cfg.security.n_total * cfg.pair_probability(Source::X, Source::X);
    let accepted = sent_xx * accepted_rate;
    let errors = sent_xx * error_rate;
    XxWindowExpectation {
        accepted,
        errors,
        qber: if accepted > 0.0 { errors / accepted } else { 0.0 },
    }
}

/// Model-level ground truth used by oracle tests and bound-validation
/// harnesses; never consumed by the analysis path.
#[derive(Debug, Clone, Copy)]
pub struct TruthModel {
    /// Yield of a single photon emitted by Alice (Bob vacuum).
    pub y1_alice: f64,
    /// Yield of a single photon emitted by Bob (Alice vacuum).
    pub y1_bob: f64,
    /// Expected untagged events among raw-key pairs (y and z sources).
    pub n1_mean_yz: f64,
    /// Expected untagged events counting z pairs only.
    pub n1_mean_z: f64,
    /// Phase-flip rate of single-photon events inside the window.
    pub e1_true: f64,
}

/// Yield of a one-sided single photon: the photon survives with the arm
/// transmittance and then registers alone, or it is lost and a lone
/// background count fires.
fn single_photon_yield(eta: f64, dark: f64) -> f64 {
    eta * (1.0 - dark) + (1.0 - eta) * 2.0 * dark * (1.0 - dark)
}

pub fn truth_model(cfg: &ValidatedConfig, ds_half_deg: f64) -> TruthModel {
    let budget = LinkBudget::of(cfg);
    let y1_alice = single_photon_yield(budget.eta_a, budget.dark);
    let y1_bob = single_photon_yield(budget.eta_b, budget.dark);

    let a1 = |mu: f64| mu * (-mu).exp();
    let n = cfg.security.n_total;
    let vy = n * cfg.pair_probability(Source::V, Source::Y) * a1(cfg.bob.mu_y) * y1_bob;
    let vz = n * cfg.pair_probability(Source::V, Source::Z) * a1(cfg.bob.mu_z) * y1_bob;
    let yv = n * cfg.pair_probability(Source::Y, Source::V) * a1(cfg.alice.mu_y) * y1_alice;
    let zv = n * cfg.pair_probability(Source::Z, Source::V) * a1(cfg.alice.mu_z) * y1_alice;

    // Single-photon interference error averaged over the acceptance
    // window, diluted by background-induced events.
    let v1 = budget.single_photon_visibility();
    let delta = ds_half_deg.to_radians();
    let mean_cos = if delta > 0.0 { delta.sin() / delta } else { 1.0 };
    let eta_mean = 0.5 * (budget.eta_a + budget.eta_b);
    let sig = eta_mean;
    let bg = (1.0 - eta_mean) * 2.0 * budget.dark;
    let w_bg = if sig + bg > 0.0 { bg / (sig + bg) } else { 0.0 };
    let e1_true = (1.0 - w_bg) * 0.5 * (1.0 - v1 * mean_cos) + w_bg * 0.5;

    TruthModel {
        y1_alice,
        y1_bob,
        n1_mean_yz: vy + vz + yv + zv,
        n1_mean_z: vz + zv,
        e1_true,
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo frame simulation.
// ---------------------------------------------------------------------------

/// Per-pair tallies of a simulated run; mergeable by addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairCounts {
    pub sent: [[u64; 4]; 4],
    /// Effective (exactly-one-click) events per detector.
    pub detected: [[[u64; 2]; 4]; 4],
}

impl PairCounts {
    pub fn zero() -> PairCounts {
        PairCounts {
            sent: [[0; 4]; 4],
            detected: [[[0; 2]; 4]; 4],
        }
    }

    pub fn detected_pair(&self, l: Source, r: Source) -> u64 {
        let d = self.detected[l.index()][r.index()];
        d[0] + d[1]
    }

    pub fn detected_total(&self) -> u64 {
        self.detected.iter().flatten().flatten().sum()
    }

    pub fn merge(&mut self, other: &PairCounts) {
        for l in 0..4 {
            for r in 0..4 {
                self.sent[l][r] += other.sent[l][r];
                self.detected[l][r][0] += other.detected[l][r][0];
                self.detected[l][r][1] += other.detected[l][r][1];
            }
        }
    }
}

/// Hidden ground truth attached to each simulated click event.
#[derive(Debug, Clone, Copy)]
pub struct EventTruth {
    pub alice_photons: u8,
    pub bob_photons: u8,
    /// Drift phase at the event's period, radians.
    pub drift_phase: f32,
    /// True when no signal photon reached either detector.
    pub background_only: bool,
}

/// One simulated detection event (at least one detector clicked).
#[derive(Debug, Clone, Copy)]
pub struct EventRecord {
    pub slot: u64,
    pub slice: u32,
    pub alice_source: Source,
    pub bob_source: Source,
    pub alice_phase_idx: u8,
    pub bob_phase_idx: u8,
    pub click_1: bool,
    pub click_2: bool,
    pub truth: EventTruth,
}

impl EventRecord {
    pub fn effective(&self) -> bool {
        self.click_1 ^ self.click_2
    }

    /// Announced encoder phase difference, Bob minus Alice, radians.
    pub fn encoder_phase_diff(&self, n_phase_values: u32) -> f64 {
        let n = n_phase_values as f64;
        let diff = (self.bob_phase_idx as f64 - self.alice_phase_idx as f64) / n;
        (diff * std::f64::consts::TAU).rem_euclid(std::f64::consts::TAU)
    }
}

/// Reference-pulse tallies of one 10 us slice.
#[derive(Debug, Clone)]
pub struct SliceRefCounts {
    pub slice: u32,
    /// counts[phase_group][detector].
    pub counts: [[u32; 2]; 4],
    /// True drift phase at the slice midpoint (oracle tag).
    pub true_drift: f64,
}

/// Complete output of a Monte Carlo run.
#[derive(Debug)]
pub struct SimOutput {
    pub counts: PairCounts,
    pub events: Vec<EventRecord>,
    pub slices: Vec<SliceRefCounts>,
}

/// Fixed encoder phases of the four strong reference pulses.
pub const REFERENCE_PHASES: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    3.0 * std::f64::consts::FRAC_PI_2,
];

/// Monte Carlo simulation options.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Reference-pulse detection rate per detector, MHz.
    pub reference_rate_mhz: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            reference_rate_mhz: 1.5,
        }
    }
}

#[inline]
fn sample_poisson(rng: &mut impl Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    if mean > 64.0 {
        // Knuth's product underflows at large means; the normal
        // approximation is ample there.
        let g: f64 = rng.sample(StandardNormal);
        return (mean + mean.sqrt() * g).round().max(0.0) as u32;
    }
    let floor = (-mean).exp();
    let mut k = 0u32;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= floor {
            return k;
        }
        k += 1;
        if k > 10_000 {
            return k;
        }
    }
}

struct Shard {
    counts: PairCounts,
    events: Vec<EventRecord>,
    slices: Vec<SliceRefCounts>,
}

#[allow(clippy::too_many_arguments)]
fn simulate_shard(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    budget: &LinkBudget,
    options: &SimOptions,
    seed: u64,
    shard_idx: u64,
    first_slice: u64,
    n_slices: u64,
    slots_total: u64,
) -> Shard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard_idx + 1);
    let mut drift = DriftProcess::new(*noise, &mut rng, true);

    let n_signal = cfg.timing.n_signal as u64;
    let period_us = cfg.timing.period_ns * 1e-3;
    let n_phases = cfg.timing.n_phase_values;
    let slice_us = SLICE_PERIODS as f64 * period_us;
    let ref_mean_per_group = options.reference_rate_mhz * slice_us / 4.0;

    let cum_a = cumulative(&[
        cfg.alice.p_v,
        cfg.alice.p_x,
        cfg.alice.p_y,
        cfg.alice.p_z,
    ]);
    let cum_b = cumulative(&[cfg.bob.p_v, cfg.bob.p_x, cfg.bob.p_y, cfg.bob.p_z]);
    let mu_a = [cfg.alice.mu_v, cfg.alice.mu_x, cfg.alice.mu_y, cfg.alice.mu_z];
    let mu_b = [cfg.bob.mu_v, cfg.bob.mu_x, cfg.bob.mu_y, cfg.bob.mu_z];

    let mut out = Shard {
        counts: PairCounts::zero(),
        events: Vec::new(),
        slices: Vec::with_capacity(n_slices as usize),
    };
    let dark = budget.dark;

    for local_slice in 0..n_slices {
        let slice = first_slice + local_slice;
        let mut mid_drift = drift.phase;

        for period in 0..SLICE_PERIODS as u64 {
            if period == SLICE_PERIODS as u64 / 2 {
                mid_drift = drift.phase;
            }
            let delta = drift.phase;
            for s in 0..n_signal {
                let slot = (slice * SLICE_PERIODS as u64 + period) * n_signal + s;
                if slot >= slots_total {
                    break;
                }
                let a = pick(&cum_a, rng.gen::<f64>());
                let b = pick(&cum_b, rng.gen::<f64>());
                out.counts.sent[a][b] += 1;

                let ma = mu_a[a];
                let mb = mu_b[b];
                let mut click_1 = false;
                let mut click_2 = false;
                let mut n_a: u8 = 0;
                let mut n_b: u8 = 0;
                let mut photon_registered = false;
                let mut ia: u8 = 0;
                let mut ib: u8 = 0;

                if ma > 0.0 && mb > 0.0 {
                    // Two-source interference: coherent outputs at the
                    // splitter; photon-number tags are source labels only.
                    ia = (rng.gen::<u32>() % n_phases) as u8;
                    ib = (rng.gen::<u32>() % n_phases) as u8;
                    let raw = std::f64::consts::TAU * (ib as f64 - ia as f64)
                        / n_phases as f64;
                    let phi = raw - delta;
                    let (m1, m2) =
                        detector_means(ma, mb, phi, budget.eta_a, budget.eta_b, budget.visibility);
                    let k1 = sample_poisson(&mut rng, m1);
                    let k2 = sample_poisson(&mut rng, m2);
                    photon_registered = k1 + k2 > 0;
                    click_1 = k1 > 0;
                    click_2 = k2 > 0;
                    n_a = sample_poisson(&mut rng, ma).min(255) as u8;
                    n_b = sample_poisson(&mut rng, mb).min(255) as u8;
                } else if ma > 0.0 || mb > 0.0 {
                    // One-sided emission: photon-number-resolved, exact.
                    let (mu, eta, from_alice) = if ma > 0.0 {
                        (ma, budget.eta_a, true)
                    } else {
                        (mb, budget.eta_b, false)
                    };
                    let n = sample_poisson(&mut rng, mu);
                    for _ in 0..n {
                        if rng.gen::<f64>() < eta {
                            photon_registered = true;
                            if rng.gen::<f64>() < 0.5 {
                                click_1 = true;
                            } else {
                                click_2 = true;
                            }
                        }
                    }
                    if from_alice {
                        n_a = n.min(255) as u8;
                    } else {
                        n_b = n.min(255) as u8;
                    }
                }

                if !click_1 && dark > 0.0 && rng.gen::<f64>() < dark {
                    click_1 = true;
                }
                if !click_2 && dark > 0.0 && rng.gen::<f64>() < dark {
                    click_2 = true;
                }

                if click_1 || click_2 {
                    if click_1 ^ click_2 {
                        let det = if click_1 { 0 } else { 1 };
                        out.counts.detected[a][b][det] += 1;
                    }
                    out.events.push(EventRecord {
                        slot,
                        slice: slice as u32,
                        alice_source: Source::from_index(a),
                        bob_source: Source::from_index(b),
                        alice_phase_idx: ia,
                        bob_phase_idx: ib,
                        click_1,
                        click_2,
                        truth: EventTruth {
                            alice_photons: n_a,
                            bob_photons: n_b,
                            drift_phase: delta as f32,
                            background_only: !photon_registered,
                        },
                    });
                }
            }
            drift.step_us(period_us, &mut rng);
        }

        // Reference-pulse detections, one Poisson tally per phase group
        // and detector, using the mid-slice drift for the fringe.
        let mut counts = [[0u32; 2]; 4];
        for (g, phase) in REFERENCE_PHASES.iter().enumerate() {
            let fringe = budget.visibility * (phase - mid_drift).cos();
            counts[g][0] = sample_poisson(&mut rng, ref_mean_per_group * (1.0 + fringe));
            counts[g][1] = sample_poisson(&mut rng, ref_mean_per_group * (1.0 - fringe));
        }
        out.slices.push(SliceRefCounts {
            slice: slice as u32,
            counts,
            true_drift: mid_drift.rem_euclid(std::f64::consts::TAU),
        });
    }
    out
}

fn cumulative(p: &[f64; 4]) -> [f64; 4] {
    let mut c = [0.0; 4];
    let mut acc = 0.0;
    for i in 0..4 {
        acc += p[i];
        c[i] = acc;
    }
    c[3] = 1.0 + 1e-12;
    c
}

#[inline]
fn pick(cum: &[f64; 4], u: f64) -> usize {
    if u < cum[0] {
        0
    } else if u < cum[1] {
        1
    } else if u < cum[2] {
        2
    } else {
        3
    }
}

/// Per-slot Monte Carlo over `n_frames` pulse-pair slots.
///
/// Work is sharded over slice ranges with per-shard derived random
/// streams and merged by elementwise addition, so the output is
/// deterministic under the seed regardless of the thread count.
pub fn simulate_frames(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    n_frames: u64,
    seed: u64,
    options: &SimOptions,
) -> SimOutput {
    assert!(n_frames >= 1, "need at least one frame");
    let budget = LinkBudget::of(cfg);
    let n_signal = cfg.timing.n_signal as u64;
    let slots_per_slice = n_signal * SLICE_PERIODS as u64;
    let n_slices = n_frames.div_ceil(slots_per_slice);

    const SLICES_PER_SHARD: u64 = 64;
    let n_shards = n_slices.div_ceil(SLICES_PER_SHARD);

    let shards: Vec<Shard> = (0..n_shards)
        .into_par_iter()
        .map(|shard_idx| {
            let first_slice = shard_idx * SLICES_PER_SHARD;
            let count = SLICES_PER_SHARD.min(n_slices - first_slice);
            simulate_shard(
                cfg,
                noise,
                &budget,
                options,
                seed,
                shard_idx,
                first_slice,
                count,
                n_frames,
            )
        })
        .collect();

    let mut out = SimOutput {
        counts: PairCounts::zero(),
        events: Vec::new(),
        slices: Vec::new(),
    };
    for shard in shards {
        out.counts.merge(&shard.counts);
        out.events.extend(shard.events);
        out.slices.extend(shard.slices);
    }
    out
}
