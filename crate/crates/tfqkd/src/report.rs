//! Text rendering of analysis reports and sweep curves.

use std::fmt::Write as _;

use crate::config::ValidatedConfig;
use crate::finite_key::KeyRateReport;
use crate::optimizer::SweepPoint;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Render a report as line-oriented `key = value` text, including the
/// failure-probability ledger and the resolved configuration echo.
pub fn render_report(report: &KeyRateReport, cfg: Option<&ValidatedConfig>) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("engine_version", ENGINE_VERSION.into());
    kv("n_total", format!("{:e}", report.n_total));
    kv("ds_half_deg", format!("{}", report.ds_half_deg));
    kv("ds_full_deg", format!("{}", 2.0 * report.ds_half_deg));
    kv("untagged_sources", report.untagged_sources.label().into());
    kv("n1_before_aopp", format!("{:.6e}", report.n1_before));
    kv("n1_after_aopp", format!("{:.6e}", report.n1_after));
    kv("e1ph_before_aopp", format!("{:.6}", report.e1ph_before));
    kv("e1ph_after_aopp", format!("{:.6}", report.e1ph_after));
    kv("qber_before_aopp", format!("{:.6}", report.qber_before));
    kv("qber_after_aopp", format!("{:.6e}", report.qber_after));
    kv("qber_z_signal_subset", format!("{:.6}", report.qber_z_subset));
    kv("raw_key_bits", format!("{:.6e}", report.raw_key_bits));
    kv("pairs_formed", format!("{:.6e}", report.pairs_formed));
    kv("survived_bits", format!("{:.6e}", report.survived_bits));
    kv("s1_alice", format!("{:.6e}", report.s1_alice));
    kv("s1_bob", format!("{:.6e}", report.s1_bob));
    kv("detected_total", format!("{:.6e}", report.detected_total));
    kv("secure_bits", format!("{:.6e}", report.secure_bits));
    kv("key_rate", format!("{:.6e}", report.rate));
    if let Some(plob) = report.plob {
        kv("plob_bound", format!("{:.6e}", plob));
    }
    kv("epsilon", format!("{:e}", report.epsilon));
    kv("delta_finite_bits", format!("{:.3}", report.delta_finite_bits));
    kv(
        "pairing_margin_e1ph",
        format!("{:.6e}", report.pairing_margin),
    );
    for term in &report.epsilon_terms {
        kv(
            &format!("epsilon_term_{}", term.name),
            format!("{:e} ({:.3} bits)", term.epsilon, term.bits),
        );
    }
    // Chernoff uses, one epsilon each: the audit trail of every bounded
    // quantity entering the analysis.
    for name in [
        "rate_vv_upper",
        "rate_vx_lower",
        "rate_xv_lower",
        "rate_vy_upper",
        "rate_yv_upper",
        "rate_vv_lower_background",
        "xx_error_upper",
        "pairing_sampling",
    ] {
        kv(
            &format!("epsilon_term_{name}"),
            format!("{:e}", report.epsilon),
        );
    }

    if let Some(cfg) = cfg {
        kv("config_mu_x", format!("{}", cfg.alice.mu_x));
        kv("config_mu_y", format!("{}", cfg.alice.mu_y));
        kv("config_mu_z", format!("{}", cfg.alice.mu_z));
        kv("config_p_v", format!("{}", cfg.alice.p_v));
        kv("config_p_x", format!("{}", cfg.alice.p_x));
        kv("config_p_y", format!("{}", cfg.alice.p_y));
        kv("config_p_z", format!("{}", cfg.alice.p_z));
        kv(
            "config_arm_length_km",
            format!("{} {}", cfg.link.arm_length_km_a, cfg.link.arm_length_km_b),
        );
        kv(
            "config_attenuation_db_per_km",
            format!("{}", cfg.link.attenuation_db_per_km),
        );
        kv(
            "config_detector_efficiency",
            format!(
                "{} {}",
                cfg.link.detector_efficiency_1, cfg.link.detector_efficiency_2
            ),
        );
        kv("config_dark_rate_hz", format!("{}", cfg.link.dark_rate_hz));
        kv("config_gate_ns", format!("{}", cfg.link.gate_ns));
        kv(
            "config_baseline_x_error",
            format!("{}", cfg.link.baseline_x_error),
        );
        kv("config_f_ec", format!("{}", cfg.security.f_ec));
    }
    out
}

/// CSV rendering of a distance sweep.
pub fn render_sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("distance_km,loss_db,R,plob\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.6e},{:.6e}",
            p.distance_km, p.loss_db, p.rate, p.plob
        );
    }
    out
}
