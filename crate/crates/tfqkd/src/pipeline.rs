//! End-to-end wiring: counts-table analysis, analytic simulation into
//! tables and reports, and the Monte Carlo path through sifting and
//! pairing.

use thiserror::Error;

use crate::aopp::{self, AoppError};
use crate::channel::{
    self, expected_pair_counts, expected_xx_window, PairCounts, PhaseNoiseParams, SimOptions,
};
use crate::config::{Source, UntaggedSources, ValidatedConfig};
use crate::finite_key::{
    self, AnalysisOptions, CountsInput, FiniteKeyError, KeyRateReport, RawKeyComposition,
};
use crate::phase::DEFAULT_MIN_COUNTS;
use crate::sifting::{self, SiftError, XxStats};
use crate::table::{CountsTableFile, TableError, XxWindowPoint};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    FiniteKey(#[from] FiniteKeyError),
    #[error(transparent)]
    Sift(#[from] SiftError),
    #[error(transparent)]
    Aopp(#[from] AoppError),
}

/// Sweep grid used when emitting X-window statistics.
pub const XX_SWEEP_GRID: [f64; 6] = [2.0, 8.0, 10.0, 12.0, 30.0, 45.0];

/// Analysis of a loaded counts table.
pub struct AnalyzeOutcome {
    pub report: KeyRateReport,
    /// Relative deviation of summed cells from the recorded total.
    pub table_deviation: Option<f64>,
}

/// Run the finite-key analysis on a counts table.
///
/// The table's pulse count overrides the config; the distillation choice
/// comes from the explicit override, then the table, then the config.
pub fn analyze_table(
    cfg: &ValidatedConfig,
    table: &CountsTableFile,
    ds_half_deg: Option<f64>,
    untagged_override: Option<UntaggedSources>,
) -> Result<AnalyzeOutcome, PipelineError> {
    analyze_table_curtailed(cfg, table, ds_half_deg, untagged_override, None)
}

/// Like [`analyze_table`], optionally re-analyzing a proportionally
/// curtailed dataset: every count is scaled to the reduced pulse budget
/// before the finite-size analysis runs.
pub fn analyze_table_curtailed(
    cfg: &ValidatedConfig,
    table: &CountsTableFile,
    ds_half_deg: Option<f64>,
    untagged_override: Option<UntaggedSources>,
    curtail_n_total: Option<f64>,
) -> Result<AnalyzeOutcome, PipelineError> {
    let ds = ds_half_deg.unwrap_or(table.ds_half_deg);
    let untagged = untagged_override
        .or(table.untagged_sources)
        .unwrap_or(cfg.untagged_sources);
    let mut counts = table.to_counts_input(ds)?;
    if let Some(n_small) = curtail_n_total {
        let scale = n_small / table.n_total;
        for l in 0..4 {
            for r in 0..4 {
                counts.sent[l][r] *= scale;
                counts.detected[l][r] *= scale;
            }
        }
        counts.xx_accepted *= scale;
        counts.xx_errors *= scale;
        counts.n_total = n_small;
    }
    let mut sec = cfg.security.clone();
    sec.n_total = counts.n_total;
    let options = AnalysisOptions {
        untagged,
        ec_before_decoy: true,
    };
    let mut report = finite_key::analyze_counts(&counts, &cfg.alice, &cfg.bob, &sec, &options)?;
    report.plob = Some(finite_key::plob_bound(table.fiber_loss_db));
    Ok(AnalyzeOutcome {
        report,
        table_deviation: table.detected_total_deviation(),
    })
}

/// Analytic expected-counts input at one window setting.
pub fn expected_counts_input(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    ds_half_deg: f64,
) -> CountsInput {
    let expected = expected_pair_counts(cfg, noise);
    let window = expected_xx_window(cfg, ds_half_deg);
    CountsInput {
        sent: expected.sent,
        detected: expected.detected,
        xx_accepted: window.accepted,
        xx_errors: window.errors,
        ds_half_deg,
        n_total: cfg.security.n_total,
    }
}

/// Analytic pipeline evaluation: expected counts straight into the
/// finite-key analysis. This is the default engine path and the
/// optimizer objective.
pub fn analyze_expected(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    ds_half_deg: f64,
) -> Result<KeyRateReport, PipelineError> {
    let counts = expected_counts_input(cfg, noise, ds_half_deg);
    let options = AnalysisOptions {
        untagged: cfg.untagged_sources,
        ec_before_decoy: true,
    };
    let mut report =
        finite_key::analyze_counts(&counts, &cfg.alice, &cfg.bob, &cfg.security, &options)?;
    report.plob = Some(finite_key::plob_bound(cfg.link.total_fiber_loss_db()));
    Ok(report)
}

/// Render the analytic expectation as a counts-table file, including the
/// X-window sweep grid and the aggregate cross-checks.
pub fn simulate_expected_table(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    ds_half_deg: f64,
) -> CountsTableFile {
    let expected = expected_pair_counts(cfg, noise);
    let mut sent = [[0u64; 4]; 4];
    let mut detected = [[0u64; 4]; 4];
    for l in 0..4 {
        for r in 0..4 {
            sent[l][r] = expected.sent[l][r].round() as u64;
            detected[l][r] = expected.detected[l][r].round() as u64;
        }
    }
    let mut xx_windows: Vec<XxWindowPoint> = Vec::new();
    let mut grid: Vec<f64> = XX_SWEEP_GRID.to_vec();
    if !grid.iter().any(|&g| (g - ds_half_deg).abs() < 1e-9) {
        grid.push(ds_half_deg);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    for ds in grid {
        let w = expected_xx_window(cfg, ds);
        xx_windows.push(XxWindowPoint {
            ds_half_deg: ds,
            detections: w.accepted.round() as u64,
            qber: w.qber,
        });
    }

    let comp = RawKeyComposition::from_counts(&expected_counts_input(cfg, noise, ds_half_deg));
    CountsTableFile {
        fiber_length_km: cfg.link.arm_length_km_a + cfg.link.arm_length_km_b,
        fiber_loss_db: cfg.link.total_fiber_loss_db(),
        n_total: cfg.security.n_total,
        ds_half_deg,
        untagged_sources: Some(cfg.untagged_sources),
        sent,
        detected,
        detected_total: Some(detected.iter().flatten().sum()),
        survived_after_aopp: Some(comp.survived_expected().round() as u64),
        qber_before_aopp: Some(comp.qber_before),
        qber_after_aopp: Some(comp.qber_after_expected()),
        xx_windows,
    }
}

/// Post-processing summary of one Monte Carlo run.
pub struct McOutcome {
    pub counts: PairCounts,
    pub raw_key_bits: u64,
    pub qber_before: f64,
    pub pairs_formed: u64,
    pub survived_bits: u64,
    pub qber_after: f64,
    /// Survived bits over all effective events (announced included).
    pub survived_fraction: f64,
    pub xx: Option<XxStats>,
    /// Finite-key report when the run is large enough for the decoy
    /// bounds to be feasible.
    pub report: Option<KeyRateReport>,
}

/// Run the Monte Carlo simulator and the full classical post-processing
/// chain on its records.
pub fn run_monte_carlo(
    cfg: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    n_frames: u64,
    seed: u64,
    ds_half_deg: f64,
    sim: &SimOptions,
) -> Result<McOutcome, PipelineError> {
    let out = channel::simulate_frames(cfg, noise, n_frames, seed, sim);
    let effective = sifting::classify_effective(&out.events);
    let sifted = sifting::sift_z_windows(&effective);
    let xx = sifting::xx_error_stats(
        &effective,
        &out.slices,
        ds_half_deg,
        DEFAULT_MIN_COUNTS,
        cfg.timing.n_phase_values,
    )
    .ok();

    let aopp_result = aopp::run_aopp(&sifted.raw_key_a, &sifted.raw_key_b, seed ^ 0xA0BB)?;

    let detected_total = out.counts.detected_total();
    let survived_fraction = if detected_total > 0 {
        aopp_result.pairs_survived as f64 / detected_total as f64
    } else {
        0.0
    };

    // Assemble a finite-key report when xx statistics exist; small runs
    // may still fail the decoy feasibility check, which is reported as
    // an absent rate rather than an error.
    let report = xx.as_ref().and_then(|stats| {
        let mut counts_input = CountsInput {
            sent: [[0.0; 4]; 4],
            detected: [[0.0; 4]; 4],
            xx_accepted: stats.accepted as f64,
            xx_errors: stats.errors as f64,
            ds_half_deg,
            n_total: n_frames as f64,
        };
        for l in 0..4 {
            for r in 0..4 {
                counts_input.sent[l][r] = out.counts.sent[l][r] as f64;
                counts_input.detected[l][r] =
                    (out.counts.detected[l][r][0] + out.counts.detected[l][r][1]) as f64;
            }
        }
        let mut sec = cfg.security.clone();
        sec.n_total = n_frames as f64;
        let options = AnalysisOptions {
            untagged: cfg.untagged_sources,
            ec_before_decoy: true,
        };
        finite_key::analyze_counts(&counts_input, &cfg.alice, &cfg.bob, &sec, &options).ok()
    });

    Ok(McOutcome {
        counts: out.counts,
        raw_key_bits: sifted.raw_key_len() as u64,
        qber_before: sifted.qber_before(),
        pairs_formed: aopp_result.pairs_formed as u64,
        survived_bits: aopp_result.pairs_survived as u64,
        qber_after: aopp_result.qber_after,
        survived_fraction,
        xx,
        report: report.map(|mut r| {
            r.plob = Some(finite_key::plob_bound(cfg.link.total_fiber_loss_db()));
            r
        }),
    })
}

/// Raw-key composition of a Monte Carlo run from its pair counts, used
/// to compare actual pairing statistics with the expected-value model.
pub fn mc_composition(counts: &PairCounts) -> RawKeyComposition {
    let mut input = CountsInput {
        sent: [[0.0; 4]; 4],
        detected: [[0.0; 4]; 4],
        xx_accepted: 0.0,
        xx_errors: 0.0,
        ds_half_deg: 8.0,
        n_total: 1.0,
    };
    for l in Source::ALL {
        for r in Source::ALL {
            input.sent[l.index()][r.index()] = counts.sent[l.index()][r.index()] as f64;
            input.detected[l.index()][r.index()] = counts.detected_pair(l, r) as f64;
        }
    }
    RawKeyComposition::from_counts(&input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        validate_config, FrameTiming, LinkModel, SecurityParams, SourceSettings,
    };

    pub(crate) fn cfg_201() -> ValidatedConfig {
        let s = SourceSettings {
            mu_v: 0.0,
            mu_x: 0.092,
            mu_y: 0.342,
            mu_z: 0.463,
            p_v: 0.7,
            p_x: 0.05,
            p_y: 0.05,
            p_z: 0.2,
        };
        validate_config(
            s.clone(),
            s,
            LinkModel {
                arm_length_km_a: 100.5,
                arm_length_km_b: 100.5,
                attenuation_db_per_km: 0.167,
                midpoint_insertion_db: 1.8,
                gate_loss_db: 1.2,
                detector_efficiency_1: 0.70,
                detector_efficiency_2: 0.72,
                dark_rate_hz: 58.3,
                gate_ns: 0.3,
                baseline_x_error: 0.028,
            },
            FrameTiming::default(),
            SecurityParams {
                f_ec: 1.16,
                epsilon: 1e-10,
                n_total: 2.87e12,
            },
        )
        .unwrap()
    }

    #[test]
    fn analytic_pipeline_produces_positive_rate() {
        let cfg = cfg_201();
        let report = analyze_expected(&cfg, &PhaseNoiseParams::zero(), 8.0).unwrap();
        assert!(report.rate > 1e-5, "rate = {}", report.rate);
        assert!(report.e1ph_before > 0.0 && report.e1ph_before < 0.1);
        assert!(report.n1_after < report.n1_before);
        assert!(report.e1ph_after > report.e1ph_before);
    }

    #[test]
    fn expected_table_round_trips_through_analysis() {
        let cfg = cfg_201();
        let table = simulate_expected_table(&cfg, &PhaseNoiseParams::zero(), 8.0);
        let parsed = crate::table::CountsTableFile::parse(&table.render()).unwrap();
        let outcome = analyze_table(&cfg, &parsed, None, None).unwrap();
        let direct = analyze_expected(&cfg, &PhaseNoiseParams::zero(), 8.0).unwrap();
        let rel = (outcome.report.rate - direct.rate).abs() / direct.rate;
        assert!(rel < 0.01, "table path deviates by {rel}");
        assert!(outcome.table_deviation.unwrap().abs() < 1e-6);
    }

    #[test]
    fn monte_carlo_chain_runs_and_pairs() {
        let cfg = cfg_201();
        let mc = run_monte_carlo(
            &cfg,
            &PhaseNoiseParams::zero(),
            2_000_000,
            13,
            8.0,
            &SimOptions::default(),
        )
        .unwrap();
        assert!(mc.raw_key_bits > 1000);
        assert!(mc.qber_before > 0.2 && mc.qber_before < 0.33);
        assert!(mc.survived_bits > 0);
        assert!(mc.qber_after < mc.qber_before);
    }
}
