//! Event classification and sifting: keep single-click events, build the
//! aligned raw key strings with the send-or-not bit mapping, and tally
//! post-selected X-window statistics.
//!
//! Windows in which either party chose the weak decoy `x` are announced
//! and never enter the raw keys. Simulated events carry hidden truth tags
//! for oracle tests, but nothing in this module reads them.

use thiserror::Error;

use crate::channel::{EventRecord, SliceRefCounts};
use crate::config::Source;
use crate::phase::{self, PhaseSlice, PostSelect};

#[derive(Debug, Error, PartialEq)]
pub enum SiftError {
    #[error("source pair ({0}, {1}) involves an announced x window and cannot key")]
    XWindowNotKeyable(char, char),
    #[error("no accepted X-window events")]
    NoAcceptedEvents,
}

/// Raw-key bits for one unannounced effective event.
///
/// The sender of vacuum takes bit 0 on Alice's side and bit 1 on Bob's;
/// a send decision (y or z) takes the complementary bit. Correct events
/// therefore agree: exactly one party sent.
pub fn z_bit_mapping(alice: Source, bob: Source) -> Result<(bool, bool), SiftError> {
    if alice == Source::X || bob == Source::X {
        return Err(SiftError::XWindowNotKeyable(alice.label(), bob.label()));
    }
    let bit_a = alice != Source::V;
    let bit_b = bob == Source::V;
    Ok((bit_a, bit_b))
}

/// Split records into effective events (exactly one click) and discards.
pub fn classify_effective(records: &[EventRecord]) -> Vec<&EventRecord> {
    records.iter().filter(|r| r.effective()).collect()
}

/// Accumulated sifting output.
#[derive(Debug, Default)]
pub struct SiftedData {
    /// Aligned raw keys over unannounced effective events, in slot order.
    pub raw_key_a: Vec<bool>,
    pub raw_key_b: Vec<bool>,
    /// Effective counts per unannounced pair, indexed by source index
    /// over {v, y, z} mapped through `Source::index()`.
    pub z_counts: [[u64; 4]; 4],
    /// Announced effective counts (any x involvement).
    pub announced_counts: [[u64; 4]; 4],
    /// Raw-key error tally under the agreement convention.
    pub z_errors: u64,
}

impl SiftedData {
    pub fn raw_key_len(&self) -> usize {
        self.raw_key_a.len()
    }

    pub fn qber_before(&self) -> f64 {
        if self.raw_key_a.is_empty() {
            return 0.0;
        }
        self.z_errors as f64 / self.raw_key_a.len() as f64
    }
}

/// Build raw keys from effective events. Events from announced windows
/// are tallied separately; double clicks must already be filtered.
pub fn sift_z_windows(effective: &[&EventRecord]) -> SiftedData {
    let mut out = SiftedData::default();
    for record in effective {
        let (a, b) = (record.alice_source, record.bob_source);
        if a == Source::X || b == Source::X {
            out.announced_counts[a.index()][b.index()] += 1;
            continue;
        }
        out.z_counts[a.index()][b.index()] += 1;
        let (bit_a, bit_b) = z_bit_mapping(a, b).expect("x windows filtered above");
        if bit_a != bit_b {
            out.z_errors += 1;
        }
        out.raw_key_a.push(bit_a);
        out.raw_key_b.push(bit_b);
    }
    out
}

/// Post-selected X-window statistics at one window setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XxStats {
    pub accepted: u64,
    pub errors: u64,
    pub qber: f64,
}

/// Tally accepted xx events and their errors at the given half-window.
///
/// Acceptance applies the per-slice phase compensation to the announced
/// encoder difference; an error is a click in the detector inconsistent
/// with the accepted fringe (after the flip for the pi-window).
pub fn xx_error_stats(
    effective: &[&EventRecord],
    slices: &[SliceRefCounts],
    half_window_deg: f64,
    min_counts: u32,
    n_phase_values: u32,
) -> Result<XxStats, SiftError> {
    let estimates: Vec<Option<PhaseSlice>> = slices
        .iter()
        .map(|s| phase::estimate_from_slice(s, min_counts).ok())
        .collect();
    let by_index = |idx: u32| -> Option<&PhaseSlice> {
        slices
            .binary_search_by_key(&idx, |s| s.slice)
            .ok()
            .and_then(|pos| estimates[pos].as_ref())
    };

    let mut accepted = 0u64;
    let mut errors = 0u64;
    for record in effective {
        if record.alice_source != Source::X || record.bob_source != Source::X {
            continue;
        }
        let Some(slice) = by_index(record.slice) else {
            // Slices failing the count floor discard their signal slots.
            continue;
        };
        if !slice.est_ok {
            continue;
        }
        let raw = record.encoder_phase_diff(n_phase_values);
        let corrected = phase::compensate(raw, slice).expect("est_ok checked");
        match phase::postselect(corrected, half_window_deg) {
            PostSelect::Reject => {}
            PostSelect::Accept { flip } => {
                accepted += 1;
                // Detector 1 is the constructive port at zero phase.
                let wrong = if flip { record.click_1 } else { record.click_2 };
                if wrong {
                    errors += 1;
                }
            }
        }
    }
    if accepted == 0 {
        return Err(SiftError::NoAcceptedEvents);
    }
    Ok(XxStats {
        accepted,
        errors,
        qber: errors as f64 / accepted as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{EventTruth, REFERENCE_PHASES};

    fn record(alice: Source, bob: Source, click_1: bool, click_2: bool) -> EventRecord {
        EventRecord {
            slot: 0,
            slice: 0,
            alice_source: alice,
            bob_source: bob,
            alice_phase_idx: 0,
            bob_phase_idx: 0,
            click_1,
            click_2,
            truth: EventTruth {
                alice_photons: 0,
                bob_photons: 0,
                drift_phase: 0.0,
                background_only: false,
            },
        }
    }

    #[test]
    fn double_clicks_discarded_single_clicks_kept() {
        let records = vec![
            record(Source::V, Source::Z, true, true),
            record(Source::V, Source::Z, true, false),
            record(Source::V, Source::Z, false, true),
            record(Source::V, Source::Z, false, false),
        ];
        let effective = classify_effective(&records);
        assert_eq!(effective.len(), 2);
    }

    #[test]
    fn bit_mapping_matches_protocol() {
        // Send/not-send agreement: (v, z) is a correct event.
        assert_eq!(z_bit_mapping(Source::V, Source::Z).unwrap(), (false, false));
        // Both vacuum: a background-induced error.
        assert_eq!(z_bit_mapping(Source::V, Source::V).unwrap(), (false, true));
        // Both sent: a double-send error.
        assert_eq!(z_bit_mapping(Source::Z, Source::Z).unwrap(), (true, false));
        assert!(matches!(
            z_bit_mapping(Source::X, Source::Z),
            Err(SiftError::XWindowNotKeyable('x', 'z'))
        ));
    }

    #[test]
    fn raw_key_length_equals_unannounced_effective_count() {
        let records = vec![
            record(Source::V, Source::Z, true, false),
            record(Source::Z, Source::V, false, true),
            record(Source::X, Source::Z, true, false),
            record(Source::Y, Source::Y, true, false),
            record(Source::V, Source::V, false, true),
        ];
        let effective = classify_effective(&records);
        let sifted = sift_z_windows(&effective);
        assert_eq!(sifted.raw_key_len(), 4);
        let z_total: u64 = sifted.z_counts.iter().flatten().sum();
        assert_eq!(z_total, 4);
        let announced: u64 = sifted.announced_counts.iter().flatten().sum();
        assert_eq!(announced, 1);
        // Errors: yy (both sent) and vv (background) are disagreements.
        assert_eq!(sifted.z_errors, 2);
    }

    fn clean_slice(delta: f64) -> SliceRefCounts {
        let mut counts = [[0u32; 2]; 4];
        for (k, phi) in REFERENCE_PHASES.iter().enumerate() {
            let fringe = (phi - delta).cos();
            counts[k][0] = (500.0 * (1.0 + fringe)) as u32;
            counts[k][1] = (500.0 * (1.0 - fringe)) as u32;
        }
        SliceRefCounts {
            slice: 0,
            counts,
            true_drift: delta,
        }
    }

    #[test]
    fn xx_stats_error_free_with_perfect_interference() {
        // Zero drift, encoder difference 0: detector 1 clicks are
        // correct, detector 2 clicks are errors.
        let slices = vec![clean_slice(0.0)];
        let mut records = Vec::new();
        for _ in 0..50 {
            records.push(record(Source::X, Source::X, true, false));
        }
        let effective = classify_effective(&records);
        let stats = xx_error_stats(&effective, &slices, 8.0, 10, 16).unwrap();
        assert_eq!(stats.accepted, 50);
        assert_eq!(stats.errors, 0);
        assert_eq!(stats.qber, 0.0);
    }

    #[test]
    fn xx_stats_counts_wrong_port_after_flip() {
        let slices = vec![clean_slice(0.0)];
        // Encoder difference pi (index 8 of 16): flip window, so a
        // detector-2 click is correct and detector 1 is the error.
        let mut rec = record(Source::X, Source::X, true, false);
        rec.bob_phase_idx = 8;
        let records = vec![rec];
        let effective = classify_effective(&records);
        let stats = xx_error_stats(&effective, &slices, 8.0, 10, 16).unwrap();
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.errors, 1);
    }

    #[test]
    fn xx_stats_rejects_out_of_window() {
        let slices = vec![clean_slice(0.0)];
        // Encoder difference pi/2 (index 4 of 16) lies outside any
        // window narrower than 45 degrees.
        let mut rec = record(Source::X, Source::X, true, false);
        rec.bob_phase_idx = 4;
        let records = vec![rec];
        let effective = classify_effective(&records);
        let err = xx_error_stats(&effective, &slices, 8.0, 10, 16).unwrap_err();
        assert_eq!(err, SiftError::NoAcceptedEvents);
    }

    #[test]
    fn xx_stats_uses_slice_compensation() {
        // Drift pi/4 moves encoder difference pi/4 into the zero window.
        let delta = std::f64::consts::FRAC_PI_4;
        let slices = vec![clean_slice(delta)];
        let mut rec = record(Source::X, Source::X, true, false);
        rec.bob_phase_idx = 2; // 2/16 of a turn = pi/4
        let records = vec![rec];
        let effective = classify_effective(&records);
        let stats = xx_error_stats(&effective, &slices, 8.0, 10, 16).unwrap();
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.errors, 0);
    }
}
