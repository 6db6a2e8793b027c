//! Finite-size key analysis: Chernoff interval estimation, decoy-state
//! bounds on untagged bits and phase-flip error, propagation of those
//! bounds through odd-parity pairing, the final key rate, and the
//! repeaterless capacity benchmark.
//!
//! The multiplicative Chernoff tails being inverted are
//!
//! ```text
//!   P(X >= (1+d) mu) <= exp(-d^2 mu / (2+d))      (upper tail)
//!   P(X <= (1-d) mu) <= exp(-d^2 mu / 2)          (lower tail)
//! ```
//!
//! Given an observation `k`, `chernoff_upper` returns the largest
//! expectation still compatible with the lower tail at failure probability
//! `eps`, and `chernoff_lower` the smallest expectation compatible with the
//! upper tail. Both are found by bisection seeded with the closed-form
//! roots of the corresponding quadratics.

use thiserror::Error;

use crate::config::{SecurityParams, SourceSettings, UntaggedSources};

#[derive(Debug, Error, PartialEq)]
pub enum FiniteKeyError {
    #[error("decoy yields inconsistent: {0}")]
    DecoyInfeasible(String),
    #[error("no accepted X-window events")]
    NoAcceptedEvents,
    #[error("phase error bound reached {0}; no extractable key")]
    BoundCollapse(f64),
    #[error("invalid input: {0}")]
    BadInput(String),
}

/// Binary entropy in bits; 0 at the endpoints by continuity.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

const BISECT_REL_TOL: f64 = 1e-12;

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // Invariant: f(lo) <= 0 <= f(hi) or f(lo) >= 0 >= f(hi).
    let rising = f(hi) >= f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        let go_up = if rising { v < 0.0 } else { v > 0.0 };
        if go_up {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= BISECT_REL_TOL * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Largest expectation whose lower Chernoff tail still reaches the
/// observation `k` with probability >= `eps`.
pub fn chernoff_upper(observed: f64, epsilon: f64) -> f64 {
    assert!(observed >= 0.0 && epsilon > 0.0 && epsilon < 1.0);
    let k = observed;
    let beta = (1.0 / epsilon).ln();
    // Exact root of (mu - k)^2 = 2 mu beta as the seed.
    let seed = k + beta + (2.0 * k * beta + beta * beta).sqrt();
    let f = |mu: f64| (mu - k) * (mu - k) - 2.0 * mu * beta;
    bisect(k + beta, seed * 1.5 + 1.0, f)
}

/// Smallest expectation whose upper Chernoff tail still reaches the
/// observation `k` with probability >= `eps`. Zero observations give a
/// zero lower bound.
pub fn chernoff_lower(observed: f64, epsilon: f64) -> f64 {
    assert!(observed >= 0.0 && epsilon > 0.0 && epsilon < 1.0);
    let k = observed;
    let beta = (1.0 / epsilon).ln();
    if k <= beta {
        // (k - mu)^2 <= beta (k + mu) already holds at mu = 0.
        return 0.0;
    }
    let f = |mu: f64| (k - mu) * (k - mu) - beta * (k + mu);
    bisect(0.0, k, f)
}

/// Repeaterless secret-key capacity per pulse, `-log2(1 - eta)`.
/// Zero loss gives an unbounded capacity, reported as infinity.
pub fn plob_bound(total_loss_db: f64) -> f64 {
    assert!(total_loss_db >= 0.0);
    if total_loss_db == 0.0 {
        return f64::INFINITY;
    }
    let eta = 10f64.powf(-total_loss_db / 10.0);
    -(1.0 - eta).log2()
}

// ---------------------------------------------------------------------------
// Analysis input: per-pair counts plus the post-selected X-window tallies.
// ---------------------------------------------------------------------------

/// Counts feeding the finite-key analysis, either transcribed from an
/// experiment or produced by the channel model. Indexed by
/// `Source::index()`: `sent[l][r]` with Alice source `l`, Bob source `r`.
#[derive(Debug, Clone)]
pub struct CountsInput {
    pub sent: [[f64; 4]; 4],
    pub detected: [[f64; 4]; 4],
    /// Accepted xx detections inside the phase window.
    pub xx_accepted: f64,
    /// Errors among the accepted xx detections.
    pub xx_errors: f64,
    /// Half-window of the phase post-selection, degrees.
    pub ds_half_deg: f64,
    pub n_total: f64,
}

const V: usize = 0;
const X: usize = 1;
const Y: usize = 2;
const Z: usize = 3;

impl CountsInput {
    /// Fraction of uniformly distributed phase differences falling inside
    /// the acceptance windows around 0 and pi.
    pub fn window_fraction(&self) -> f64 {
        self.ds_half_deg / 90.0
    }

    pub fn raw_key_total(&self) -> f64 {
        let mut sum = 0.0;
        for l in [V, Y, Z] {
            for r in [V, Y, Z] {
                sum += self.detected[l][r];
            }
        }
        sum
    }
}

/// Composition of the raw key strings implied by per-pair counts.
#[derive(Debug, Clone, Copy)]
pub struct RawKeyComposition {
    /// Bob-bit-0 positions (Bob sent y or z).
    pub n_bob0: f64,
    /// Bob-bit-1 positions (Bob sent vacuum).
    pub n_bob1: f64,
    /// Error fraction among Bob-0 positions (Alice also sent y/z).
    pub err0: f64,
    /// Error fraction among Bob-1 positions (Alice also sent vacuum).
    pub err1: f64,
    /// Error rate over the full raw key.
    pub qber_before: f64,
    /// Error rate over the signal/vacuum subset only (vv, vz, zv, zz).
    pub qber_z_subset: f64,
}

impl RawKeyComposition {
    pub fn from_counts(c: &CountsInput) -> RawKeyComposition {
        let d = &c.detected;
        let n_bob1 = d[V][V] + d[Y][V] + d[Z][V];
        let n_bob0 = d[V][Y] + d[V][Z] + d[Y][Y] + d[Y][Z] + d[Z][Y] + d[Z][Z];
        let err0_count = d[Y][Y] + d[Y][Z] + d[Z][Y] + d[Z][Z];
        let err1_count = d[V][V];
        let total = n_bob0 + n_bob1;
        let z_subset = d[V][V] + d[V][Z] + d[Z][V] + d[Z][Z];
        RawKeyComposition {
            n_bob0,
            n_bob1,
            err0: if n_bob0 > 0.0 { err0_count / n_bob0 } else { 0.0 },
            err1: if n_bob1 > 0.0 { err1_count / n_bob1 } else { 0.0 },
            qber_before: if total > 0.0 {
                (err0_count + err1_count) / total
            } else {
                0.0
            },
            qber_z_subset: if z_subset > 0.0 {
                (d[V][V] + d[Z][Z]) / z_subset
            } else {
                0.0
            },
        }
    }

    pub fn pairs_formed(&self) -> f64 {
        self.n_bob0.min(self.n_bob1)
    }

    /// Probability that a random 0-1 pair survives Alice's parity check.
    pub fn survive_probability(&self) -> f64 {
        self.err0 * self.err1 + (1.0 - self.err0) * (1.0 - self.err1)
    }

    pub fn survived_expected(&self) -> f64 {
        self.pairs_formed() * self.survive_probability()
    }

    /// Error rate among survived pairs: both constituents must be errors.
    pub fn qber_after_expected(&self) -> f64 {
        let p = self.survive_probability();
        if p <= 0.0 {
            return 0.0;
        }
        self.err0 * self.err1 / p
    }
}

// ---------------------------------------------------------------------------
// Decoy-state lower bound on untagged bits.
// ---------------------------------------------------------------------------

/// Lower bounds produced by the decoy analysis.
#[derive(Debug, Clone, Copy)]
pub struct UntaggedBounds {
    /// Single-photon yield lower bound, photon emitted on Alice's side.
    pub s1_alice: f64,
    /// Single-photon yield lower bound, photon emitted on Bob's side.
    pub s1_bob: f64,
    /// Untagged bits among Bob-bit-0 raw-key positions.
    pub n1_bob0: f64,
    /// Untagged bits among Bob-bit-1 raw-key positions.
    pub n1_bob1: f64,
    /// Total untagged bits before pairing.
    pub n1: f64,
}

/// Options controlling how the counts enter the analysis.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    pub untagged: UntaggedSources,
    /// Error correction runs before the decoy analysis, so the
    /// vacuum-related counts n_vv, n_vy, n_yv are exchanged exactly.
    /// When false they are widened by a second bounding round to model
    /// their estimation from sampling.
    pub ec_before_decoy: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            untagged: UntaggedSources::YandZ,
            ec_before_decoy: true,
        }
    }
}

/// Single-photon yield lower bound from the two weak intensities and the
/// vacuum rate:
///
/// ```text
/// s1 >= [ mu_y^2 e^{mu_x} S_x - mu_x^2 e^{mu_y} S_y - (mu_y^2 - mu_x^2) S_0 ]
///       / ( mu_x mu_y (mu_y - mu_x) )
/// ```
///
/// Terms of photon number >= 3 enter with negative coefficients and only
/// strengthen the bound.
fn single_photon_yield_lower(
    mu_x: f64,
    mu_y: f64,
    bounded: [f64; 3],
    central: [f64; 3],
) -> Result<f64, FiniteKeyError> {
    if !(mu_x > 0.0 && mu_y > mu_x) {
        return Err(FiniteKeyError::BadInput(format!(
            "decoy intensities must satisfy 0 < mu_x < mu_y, got {mu_x}, {mu_y}"
        )));
    }
    let numerator = |s: [f64; 3]| {
        mu_y * mu_y * mu_x.exp() * s[0]
            - mu_x * mu_x * mu_y.exp() * s[1]
            - (mu_y * mu_y - mu_x * mu_x) * s[2]
    };
    let num = numerator(bounded);
    if num < 0.0 {
        // Distinguish fluctuation-driven negativity (bound clamps at
        // zero) from genuinely inconsistent central yields.
        if numerator(central) < 0.0 {
            return Err(FiniteKeyError::DecoyInfeasible(format!(
                "weak-decoy yield below the vacuum/strong-decoy floor (numerator {num:.3e})"
            )));
        }
        return Ok(0.0);
    }
    Ok(num / (mu_x * mu_y * (mu_y - mu_x)))
}

/// Decoy-state lower bound on the number of untagged bits before pairing.
///
/// Uses the vacuum-related counting rates (vv, vx, xv, vy, yv): observed
/// counts are converted to Chernoff-bounded expected per-pulse yields and
/// fed to the two-intensity bound, then scaled by the single-photon
/// emission weight of each raw-key source pair.
pub fn decoy_untagged_lower(
    counts: &CountsInput,
    alice: &SourceSettings,
    bob: &SourceSettings,
    epsilon: f64,
    options: &AnalysisOptions,
) -> Result<UntaggedBounds, FiniteKeyError> {
    let d = &counts.detected;
    let s = &counts.sent;
    for (l, r) in [(V, V), (V, X), (X, V), (V, Y), (Y, V)] {
        if s[l][r] <= 0.0 {
            return Err(FiniteKeyError::BadInput(format!(
                "no pulses sent for decoy pair ({l},{r})"
            )));
        }
        if d[l][r] > s[l][r] {
            return Err(FiniteKeyError::BadInput(format!(
                "detected exceeds sent for decoy pair ({l},{r})"
            )));
        }
    }

    let widen_upper = |k: f64| {
        if options.ec_before_decoy {
            chernoff_upper(k, epsilon)
        } else {
            chernoff_upper(chernoff_upper(k, epsilon), epsilon)
        }
    };

    // Rates with the fluctuation direction that weakens the bound.
    let s_vv_u = widen_upper(d[V][V]) / s[V][V];
    let s_vx_l = chernoff_lower(d[V][X], epsilon) / s[V][X];
    let s_xv_l = chernoff_lower(d[X][V], epsilon) / s[X][V];
    let s_vy_u = widen_upper(d[V][Y]) / s[V][Y];
    let s_yv_u = widen_upper(d[Y][V]) / s[Y][V];

    let central = |l: usize, r: usize| d[l][r] / s[l][r];
    let s1_bob = single_photon_yield_lower(
        bob.mu_x,
        bob.mu_y,
        [s_vx_l, s_vy_u, s_vv_u],
        [central(V, X), central(V, Y), central(V, V)],
    )?;
    let s1_alice = single_photon_yield_lower(
        alice.mu_x,
        alice.mu_y,
        [s_xv_l, s_yv_u, s_vv_u],
        [central(X, V), central(Y, V), central(V, V)],
    )?;

    // Single-photon emission weight of a coherent pulse of intensity mu.
    let a1 = |mu: f64| mu * (-mu).exp();

    let (mut n1_bob0, mut n1_bob1) = (0.0, 0.0);
    // Bob-0 positions: Alice vacuum, Bob sent the photon.
    n1_bob0 += s[V][Z] * a1(bob.mu_z) * s1_bob;
    // Bob-1 positions: Bob vacuum, Alice sent the photon.
    n1_bob1 += s[Z][V] * a1(alice.mu_z) * s1_alice;
    if options.untagged == UntaggedSources::YandZ {
        n1_bob0 += s[V][Y] * a1(bob.mu_y) * s1_bob;
        n1_bob1 += s[Y][V] * a1(alice.mu_y) * s1_alice;
    }

    Ok(UntaggedBounds {
        s1_alice,
        s1_bob,
        n1_bob0,
        n1_bob1,
        n1: n1_bob0 + n1_bob1,
    })
}

// ---------------------------------------------------------------------------
// Phase-flip error bound.
// ---------------------------------------------------------------------------

/// Upper bound on the phase-flip error rate of untagged bits before
/// pairing, from the post-selected xx error tally:
///
/// ```text
/// e1 <= [ T^U - (1/2) e^{-mu_xx} S_vv^L ] / ( mu_xx e^{-mu_xx} s1 )
/// ```
///
/// with `mu_xx = mu_x(A) + mu_x(B)`, `T = errors / (sent_xx * window)` and
/// `s1` the mean single-photon yield bound of the two sides.
pub fn phase_flip_upper(
    counts: &CountsInput,
    alice: &SourceSettings,
    bob: &SourceSettings,
    untagged: &UntaggedBounds,
    epsilon: f64,
) -> Result<f64, FiniteKeyError> {
    if counts.xx_accepted <= 0.0 {
        return Err(FiniteKeyError::NoAcceptedEvents);
    }
    if counts.xx_errors > counts.xx_accepted {
        return Err(FiniteKeyError::BadInput(
            "xx errors exceed accepted detections".into(),
        ));
    }
    let window = counts.window_fraction();
    let sent_in_window = counts.sent[X][X] * window;
    if sent_in_window <= 0.0 {
        return Err(FiniteKeyError::NoAcceptedEvents);
    }

    let t_upper = chernoff_upper(counts.xx_errors, epsilon) / sent_in_window;
    let s_vv_lower = chernoff_lower(counts.detected[V][V], epsilon) / counts.sent[V][V];

    let mu_xx = alice.mu_x + bob.mu_x;
    let s1 = 0.5 * (untagged.s1_alice + untagged.s1_bob);
    if s1 <= 0.0 {
        return Err(FiniteKeyError::DecoyInfeasible(
            "single-photon yield bound is zero".into(),
        ));
    }
    let denom = mu_xx * (-mu_xx).exp() * s1;
    let num = (t_upper - 0.5 * (-mu_xx).exp() * s_vv_lower).max(0.0);
    Ok((num / denom).min(1.0))
}

// ---------------------------------------------------------------------------
// Pairing transformation of the bounds.
// ---------------------------------------------------------------------------

/// Bounds after odd-parity pairing.
#[derive(Debug, Clone, Copy)]
pub struct PairedBounds {
    pub n1_after: f64,
    pub e1ph_after: f64,
    /// Sampling margin added on top of the pair error combination.
    pub pairing_margin: f64,
}

/// Map pre-pairing bounds through the pairing statistics.
///
/// Untagged 0-bits pair with untagged 1-bits into untagged pairs; their
/// parity is odd on both sides up to error events, so the untagged pair
/// count is the both-untagged fraction of the formed pairs. The phase
/// error of a pair flips when exactly one constituent flips, giving
/// `2 e (1 - e)` plus a sampling margin at the pair population size.
pub fn aopp_bounds(
    untagged: &UntaggedBounds,
    e1ph_before: f64,
    comp: &RawKeyComposition,
    epsilon: f64,
) -> Result<PairedBounds, FiniteKeyError> {
    if untagged.n1 <= 0.0 {
        return Err(FiniteKeyError::BadInput(
            "untagged lower bound must be positive before pairing".into(),
        ));
    }
    if comp.n_bob0 <= 0.0 || comp.n_bob1 <= 0.0 {
        return Err(FiniteKeyError::BadInput(
            "raw key has no pairs to form".into(),
        ));
    }
    let ng = comp.pairs_formed();
    let frac0 = (untagged.n1_bob0 / comp.n_bob0).min(1.0);
    let frac1 = (untagged.n1_bob1 / comp.n_bob1).min(1.0);
    let n1_after = ng * frac0 * frac1;

    let e_pair = 2.0 * e1ph_before * (1.0 - e1ph_before);
    let margin = if n1_after > 0.0 && e_pair > 0.0 {
        let pairs = 0.5 * n1_after;
        (2.0 * (1.0 / epsilon).ln() * e_pair * (1.0 - e_pair) / pairs).sqrt()
    } else {
        0.0
    };
    let e1ph_after = e_pair + margin;
    if e1ph_after >= 0.5 {
        return Err(FiniteKeyError::BoundCollapse(e1ph_after));
    }
    Ok(PairedBounds {
        n1_after,
        e1ph_after,
        pairing_margin: margin,
    })
}

// ---------------------------------------------------------------------------
// Key rate.
// ---------------------------------------------------------------------------

/// One named failure-probability allocation in the final rate.
#[derive(Debug, Clone)]
pub struct EpsilonTerm {
    pub name: &'static str,
    pub epsilon: f64,
    pub bits: f64,
}

/// Result of the rate computation with its audit trail.
#[derive(Debug, Clone)]
pub struct KeyRate {
    /// Secure bits per pulse pair, clamped at zero.
    pub rate: f64,
    /// Secure bits before dividing by the pulse count.
    pub secure_bits: f64,
    pub delta_finite_bits: f64,
    pub epsilon_terms: Vec<EpsilonTerm>,
}

/// `R = [ n1' (1 - H(e1')) - f n_surv H(E') - Delta ] / N`, clamped at 0.
pub fn key_rate(
    n1_after: f64,
    e1ph_after: f64,
    survived_bits: f64,
    qber_after: f64,
    sec: &SecurityParams,
) -> KeyRate {
    let eps = sec.epsilon;
    let ec_verify = (2.0 / eps).log2();
    let pa = 2.0 * (1.0 / eps).log2();
    let delta = ec_verify + pa;

    let secret = n1_after * (1.0 - binary_entropy(e1ph_after));
    let leak = sec.f_ec * survived_bits * binary_entropy(qber_after);
    let secure_bits = (secret - leak - delta).max(0.0);

    KeyRate {
        rate: secure_bits / sec.n_total,
        secure_bits,
        delta_finite_bits: delta,
        epsilon_terms: vec![
            EpsilonTerm {
                name: "error_correction_verify",
                epsilon: eps,
                bits: ec_verify,
            },
            EpsilonTerm {
                name: "privacy_amplification",
                epsilon: eps,
                bits: pa,
            },
        ],
    }
}

/// Full analysis output for one dataset.
#[derive(Debug, Clone)]
pub struct KeyRateReport {
    pub n1_before: f64,
    pub n1_after: f64,
    pub e1ph_before: f64,
    pub e1ph_after: f64,
    pub qber_before: f64,
    pub qber_after: f64,
    /// Error rate over the vacuum/signal subset of the raw key.
    pub qber_z_subset: f64,
    pub survived_bits: f64,
    pub pairs_formed: f64,
    pub raw_key_bits: f64,
    pub ds_half_deg: f64,
    pub rate: f64,
    pub secure_bits: f64,
    pub s1_alice: f64,
    pub s1_bob: f64,
    pub n_total: f64,
    pub untagged_sources: UntaggedSources,
    pub delta_finite_bits: f64,
    pub pairing_margin: f64,
    pub epsilon: f64,
    pub epsilon_terms: Vec<EpsilonTerm>,
    pub detected_total: f64,
    pub plob: Option<f64>,
}

/// Run the complete finite-key chain on one set of counts.
pub fn analyze_counts(
    counts: &CountsInput,
    alice: &SourceSettings,
    bob: &SourceSettings,
    sec: &SecurityParams,
    options: &AnalysisOptions,
) -> Result<KeyRateReport, FiniteKeyError> {
    let eps = sec.epsilon;
    let untagged = decoy_untagged_lower(counts, alice, bob, eps, options)?;
    let e1ph_before = phase_flip_upper(counts, alice, bob, &untagged, eps)?;
    let comp = RawKeyComposition::from_counts(counts);
    let paired = aopp_bounds(&untagged, e1ph_before, &comp, eps)?;
    let survived = comp.survived_expected();
    let qber_after = comp.qber_after_expected();
    let kr = key_rate(paired.n1_after, paired.e1ph_after, survived, qber_after, sec);

    let mut detected_total = 0.0;
    for row in &counts.detected {
        for v in row {
            detected_total += v;
        }
    }

    Ok(KeyRateReport {
        n1_before: untagged.n1,
        n1_after: paired.n1_after,
        e1ph_before,
        e1ph_after: paired.e1ph_after,
        qber_before: comp.qber_before,
        qber_after,
        qber_z_subset: comp.qber_z_subset,
        survived_bits: survived,
        pairs_formed: comp.pairs_formed(),
        raw_key_bits: counts.raw_key_total(),
        ds_half_deg: counts.ds_half_deg,
        rate: kr.rate,
        secure_bits: kr.secure_bits,
        s1_alice: untagged.s1_alice,
        s1_bob: untagged.s1_bob,
        n_total: counts.n_total,
        untagged_sources: options.untagged,
        delta_finite_bits: kr.delta_finite_bits,
        pairing_margin: paired.pairing_margin,
        epsilon: eps,
        epsilon_terms: kr.epsilon_terms,
        detected_total,
        plob: None,
    })
}
