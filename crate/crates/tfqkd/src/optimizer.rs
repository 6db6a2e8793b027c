//! Parameter search over source intensities, sending probabilities, and
//! the post-selection window, maximizing the analytic key rate; distance
//! sweeps for rate-versus-length curves.
//!
//! The objective is smooth and low-dimensional, so the search is
//! coordinate descent (golden-section per axis) from several starts,
//! followed by a Nelder-Mead polish around the best point found.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::PhaseNoiseParams;
use crate::config::{SourceSettings, ValidatedConfig};
use crate::finite_key::plob_bound;
use crate::pipeline::analyze_expected;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error("parameter box contains no feasible point: {0}")]
    InfeasibleBox(String),
}

/// Inclusive search ranges per coordinate.
#[derive(Debug, Clone)]
pub struct ParameterBox {
    pub mu_x: (f64, f64),
    pub mu_y: (f64, f64),
    pub mu_z: (f64, f64),
    pub p_v: (f64, f64),
    pub p_x: (f64, f64),
    pub p_y: (f64, f64),
    pub ds_half_deg: (f64, f64),
}

impl Default for ParameterBox {
    fn default() -> Self {
        ParameterBox {
            mu_x: (0.02, 0.20),
            mu_y: (0.20, 0.60),
            mu_z: (0.25, 0.80),
            p_v: (0.30, 0.90),
            p_x: (0.01, 0.30),
            p_y: (0.01, 0.30),
            ds_half_deg: (2.0, 45.0),
        }
    }
}

const DIM: usize = 7;
type Params = [f64; DIM];

impl ParameterBox {
    fn lo(&self) -> Params {
        [
            self.mu_x.0,
            self.mu_y.0,
            self.mu_z.0,
            self.p_v.0,
            self.p_x.0,
            self.p_y.0,
            self.ds_half_deg.0,
        ]
    }

    fn hi(&self) -> Params {
        [
            self.mu_x.1,
            self.mu_y.1,
            self.mu_z.1,
            self.p_v.1,
            self.p_x.1,
            self.p_y.1,
            self.ds_half_deg.1,
        ]
    }

    fn feasible(&self, p: &Params) -> bool {
        let lo = self.lo();
        let hi = self.hi();
        for i in 0..DIM {
            if p[i] < lo[i] - 1e-12 || p[i] > hi[i] + 1e-12 {
                return false;
            }
        }
        let [mu_x, mu_y, mu_z, p_v, p_x, p_y, _] = *p;
        mu_x < mu_y && mu_y <= mu_z && p_v + p_x + p_y < 1.0 - 1e-9
    }

    fn check(&self) -> Result<(), OptimizeError> {
        if self.mu_x.0 >= self.mu_y.1 {
            return Err(OptimizeError::InfeasibleBox(
                "mu_x range entirely above mu_y range".into(),
            ));
        }
        if self.mu_y.0 > self.mu_z.1 {
            return Err(OptimizeError::InfeasibleBox(
                "mu_y range entirely above mu_z range".into(),
            ));
        }
        if self.p_v.0 + self.p_x.0 + self.p_y.0 >= 1.0 {
            return Err(OptimizeError::InfeasibleBox(
                "minimum probabilities already exceed 1".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("mu_x", self.mu_x),
            ("mu_y", self.mu_y),
            ("mu_z", self.mu_z),
            ("p_v", self.p_v),
            ("p_x", self.p_x),
            ("p_y", self.p_y),
            ("ds_half_deg", self.ds_half_deg),
        ] {
            if lo > hi {
                return Err(OptimizeError::InfeasibleBox(format!(
                    "{name} range is empty"
                )));
            }
        }
        Ok(())
    }
}

/// Best parameters found by the search.
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub settings: SourceSettings,
    pub ds_half_deg: f64,
    pub rate: f64,
    pub evaluations: u64,
}

fn params_to_config(template: &ValidatedConfig, p: &Params) -> ValidatedConfig {
    let [mu_x, mu_y, mu_z, p_v, p_x, p_y, _] = *p;
    let settings = SourceSettings {
        mu_v: 0.0,
        mu_x,
        mu_y,
        mu_z,
        p_v,
        p_x,
        p_y,
        p_z: 1.0 - p_v - p_x - p_y,
    };
    let mut cfg = template.clone();
    cfg.alice = settings.clone();
    cfg.bob = settings;
    cfg
}

struct Objective<'a> {
    template: &'a ValidatedConfig,
    noise: PhaseNoiseParams,
    bounds: &'a ParameterBox,
}

impl Objective<'_> {
    /// Key rate at the point; infeasible or failed analyses score -1.
    fn eval(&self, p: &Params, evals: &mut u64) -> f64 {
        *evals += 1;
        if !self.bounds.feasible(p) {
            return -1.0;
        }
        let cfg = params_to_config(self.template, p);
        match analyze_expected(&cfg, &self.noise, p[6]) {
            Ok(report) => report.rate,
            Err(_) => -1.0,
        }
    }
}

fn golden_section(
    obj: &Objective<'_>,
    p: &Params,
    axis: usize,
    lo: f64,
    hi: f64,
    evals: &mut u64,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut a = lo;
    let mut b = hi;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let at = |x: f64, evals: &mut u64| {
        let mut q = *p;
        q[axis] = x;
        obj.eval(&q, evals)
    };
    let mut fc = at(c, evals);
    let mut fd = at(d, evals);
    for _ in 0..28 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = at(c, evals);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = at(d, evals);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn coordinate_descent(obj: &Objective<'_>, start: Params, evals: &mut u64) -> (Params, f64) {
    let lo = obj.bounds.lo();
    let hi = obj.bounds.hi();
    let mut p = start;
    let mut best = obj.eval(&p, evals);
    for _ in 0..3 {
        let before = best;
        for axis in 0..DIM {
            let (x, fx) = golden_section(obj, &p, axis, lo[axis], hi[axis], evals);
            if fx > best {
                p[axis] = x;
                best = fx;
            }
        }
        if best - before <= 1e-4 * best.abs().max(1e-30) {
            break;
        }
    }
    (p, best)
}

fn nelder_mead(obj: &Objective<'_>, start: Params, evals: &mut u64) -> (Params, f64) {
    let lo = obj.bounds.lo();
    let hi = obj.bounds.hi();
    // Simplex of DIM+1 points around the start, stepping 2% of each range.
    let mut simplex: Vec<(Params, f64)> = Vec::with_capacity(DIM + 1);
    simplex.push((start, obj.eval(&start, evals)));
    for i in 0..DIM {
        let mut q = start;
        let step = 0.02 * (hi[i] - lo[i]).max(1e-9);
        q[i] = (q[i] + step).min(hi[i]);
        if (q[i] - start[i]).abs() < 1e-12 {
            q[i] = (start[i] - step).max(lo[i]);
        }
        simplex.push((q, obj.eval(&q, evals)));
    }

    for _ in 0..160 {
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[DIM].1;
        if (best - worst).abs() <= 1e-6 * best.abs().max(1e-30) {
            break;
        }
        let mut centroid = [0.0; DIM];
        for (p, _) in simplex.iter().take(DIM) {
            for i in 0..DIM {
                centroid[i] += p[i] / DIM as f64;
            }
        }
        let clamp = |p: &mut Params| {
            for i in 0..DIM {
                p[i] = p[i].clamp(lo[i], hi[i]);
            }
        };
        let towards = |alpha: f64| {
            let mut q = [0.0; DIM];
            for i in 0..DIM {
                q[i] = centroid[i] + alpha * (centroid[i] - simplex[DIM].0[i]);
            }
            clamp(&mut q);
            q
        };

        let reflected = towards(1.0);
        let fr = obj.eval(&reflected, evals);
        if fr > simplex[0].1 {
            let expanded = towards(2.0);
            let fe = obj.eval(&expanded, evals);
            simplex[DIM] = if fe > fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr > simplex[DIM - 1].1 {
            simplex[DIM] = (reflected, fr);
        } else {
            let contracted = towards(-0.5);
            let finternal = obj.eval(&contracted, evals);
            if finternal_better(finternal, simplex[DIM].1) {
                simplex[DIM] = (contracted, finternal_value(finternal));
            } else {
                // Shrink towards the best vertex.
                let anchor = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    for (x, a) in entry.0.iter_mut().zip(anchor.iter()) {
                        *x = a + 0.5 * (*x - a);
                    }
                    entry.1 = obj.eval(&entry.0, evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    simplex[0]
}

fn finternal_better(candidate: f64, worst: f64) -> bool {
    candidate > worst
}

fn finternal_value(v: f64) -> f64 {
    v
}

fn random_start(bounds: &ParameterBox, rng: &mut ChaCha8Rng) -> Params {
    let lo = bounds.lo();
    let hi = bounds.hi();
    loop {
        let mut p = [0.0; DIM];
        for i in 0..DIM {
            p[i] = lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>();
        }
        if bounds.feasible(&p) {
            return p;
        }
    }
}

/// Search the box for the rate-maximizing operating point.
///
/// `extra_starts` pins additional start points (known operating points);
/// the multi-start result can never fall below the best pinned start.
pub fn optimize_params(
    template: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    bounds: &ParameterBox,
    n_starts: usize,
    seed: u64,
    extra_starts: &[(SourceSettings, f64)],
) -> Result<OptimizeResult, OptimizeError> {
    bounds.check()?;
    let obj = Objective {
        template,
        noise: *noise,
        bounds,
    };

    let mut starts: Vec<Params> = Vec::new();
    for (s, ds) in extra_starts {
        starts.push([s.mu_x, s.mu_y, s.mu_z, s.p_v, s.p_x, s.p_y, *ds]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A mid-box heuristic start plus seeded random starts.
    let lo = bounds.lo();
    let hi = bounds.hi();
    let mut mid = [0.0; DIM];
    for i in 0..DIM {
        mid[i] = 0.5 * (lo[i] + hi[i]);
    }
    if bounds.feasible(&mid) {
        starts.push(mid);
    }
    while starts.len() < n_starts.max(1) + extra_starts.len() {
        starts.push(random_start(bounds, &mut rng));
    }

    let results: Vec<(Params, f64, u64)> = starts
        .par_iter()
        .map(|&start| {
            let mut evals = 0u64;
            let (p, _) = coordinate_descent(&obj, start, &mut evals);
            let (p, f) = nelder_mead(&obj, p, &mut evals);
            (p, f, evals)
        })
        .collect();

    // Also score the raw pinned starts so the contract "never below the
    // best start" holds even if a descent path wanders off a ridge.
    let mut best_p = results[0].0;
    let mut best_f = results[0].1;
    let mut evals_total = 0u64;
    for &(p, f, e) in &results {
        evals_total += e;
        if f > best_f {
            best_f = f;
            best_p = p;
        }
    }
    for &start in &starts {
        let mut e = 0u64;
        let f = obj.eval(&start, &mut e);
        evals_total += e;
        if f > best_f {
            best_f = f;
            best_p = start;
        }
    }

    let cfg = params_to_config(template, &best_p);
    Ok(OptimizeResult {
        settings: cfg.alice.clone(),
        ds_half_deg: best_p[6],
        rate: best_f.max(0.0),
        evaluations: evals_total,
    })
}

/// How the source parameters are chosen along a distance sweep.
#[derive(Debug, Clone)]
pub enum SweepMode {
    /// Keep the template's sources; evaluate at this window.
    Fixed { ds_half_deg: f64 },
    /// Re-optimize the operating point at every distance.
    Reoptimized {
        bounds: ParameterBox,
        n_starts: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub distance_km: f64,
    pub loss_db: f64,
    pub rate: f64,
    pub plob: f64,
}

/// Evaluate the analytic pipeline over a list of total link lengths.
/// Arms split the distance symmetrically.
pub fn sweep_distance(
    template: &ValidatedConfig,
    noise: &PhaseNoiseParams,
    distances_km: &[f64],
    mode: &SweepMode,
) -> Vec<SweepPoint> {
    assert!(!distances_km.is_empty(), "distance list must be non-empty");
    distances_km
        .iter()
        .map(|&d| {
            let mut cfg = template.clone();
            cfg.link.arm_length_km_a = d / 2.0;
            cfg.link.arm_length_km_b = d / 2.0;
            let loss_db = cfg.link.total_fiber_loss_db();
            let rate = match mode {
                SweepMode::Fixed { ds_half_deg } => analyze_expected(&cfg, noise, *ds_half_deg)
                    .map(|r| r.rate)
                    .unwrap_or(0.0),
                SweepMode::Reoptimized {
                    bounds,
                    n_starts,
                    seed,
                } => optimize_params(&cfg, noise, bounds, *n_starts, *seed, &[])
                    .map(|r| r.rate)
                    .unwrap_or(0.0),
            };
            SweepPoint {
                distance_km: d,
                loss_db,
                rate,
                plob: plob_bound(loss_db),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, FrameTiming, LinkModel, SecurityParams};

    fn template(arm_km: f64, dark_hz: f64, n_total: f64) -> ValidatedConfig {
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
                arm_length_km_a: arm_km,
                arm_length_km_b: arm_km,
                attenuation_db_per_km: 0.167,
                midpoint_insertion_db: 1.8,
                gate_loss_db: 1.2,
                detector_efficiency_1: 0.70,
                detector_efficiency_2: 0.72,
                dark_rate_hz: dark_hz,
                gate_ns: 0.3,
                baseline_x_error: 0.028,
            },
            FrameTiming::default(),
            SecurityParams {
                f_ec: 1.16,
                epsilon: 1e-10,
                n_total,
            },
        )
        .unwrap()
    }

    #[test]
    fn infeasible_box_rejected() {
        let bad = ParameterBox {
            mu_x: (0.5, 0.6),
            mu_y: (0.2, 0.4),
            ..Default::default()
        };
        let cfg = template(100.5, 58.3, 2.87e12);
        let err = optimize_params(&cfg, &PhaseNoiseParams::zero(), &bad, 1, 0, &[]).unwrap_err();
        assert!(matches!(err, OptimizeError::InfeasibleBox(_)));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = template(100.5, 58.3, 2.87e12);
        let bounds = ParameterBox::default();
        let a = optimize_params(&cfg, &PhaseNoiseParams::zero(), &bounds, 2, 11, &[]).unwrap();
        let b = optimize_params(&cfg, &PhaseNoiseParams::zero(), &bounds, 2, 11, &[]).unwrap();
        assert_eq!(a.rate, b.rate);
        assert_eq!(a.ds_half_deg, b.ds_half_deg);
        assert_eq!(a.settings, b.settings);
    }

    #[test]
    fn multi_start_never_below_best_pinned_start() {
        let cfg = template(100.5, 58.3, 2.87e12);
        let bounds = ParameterBox::default();
        let pinned = (cfg.alice.clone(), 8.0);
        let pinned_rate = analyze_expected(&cfg, &PhaseNoiseParams::zero(), 8.0)
            .unwrap()
            .rate;
        let got = optimize_params(
            &cfg,
            &PhaseNoiseParams::zero(),
            &bounds,
            2,
            3,
            &[pinned],
        )
        .unwrap();
        assert!(
            got.rate >= pinned_rate,
            "optimizer {} fell below pinned {}",
            got.rate,
            pinned_rate
        );
    }

    #[test]
    fn zero_loss_link_prefers_narrow_window_and_positive_rate() {
        let mut cfg = template(0.0, 0.0, 1e10);
        cfg.link.midpoint_insertion_db = 0.0;
        cfg.link.gate_loss_db = 0.0;
        let bounds = ParameterBox::default();
        let got =
            optimize_params(&cfg, &PhaseNoiseParams::zero(), &bounds, 2, 5, &[]).unwrap();
        assert!(got.rate > 0.0);
        assert!(
            got.ds_half_deg < 12.0,
            "expected a narrow window, got {}",
            got.ds_half_deg
        );
    }

    #[test]
    fn single_distance_sweep_equals_direct_evaluation() {
        let cfg = template(100.5, 58.3, 2.87e12);
        let pts = sweep_distance(
            &cfg,
            &PhaseNoiseParams::zero(),
            &[201.0],
            &SweepMode::Fixed { ds_half_deg: 8.0 },
        );
        assert_eq!(pts.len(), 1);
        let direct = analyze_expected(&cfg, &PhaseNoiseParams::zero(), 8.0).unwrap();
        assert!((pts[0].rate - direct.rate).abs() < 1e-12 * direct.rate.max(1e-30));
    }

    #[test]
    fn sweep_monotone_in_distance() {
        let cfg = template(100.5, 30.0, 2.87e12);
        let pts = sweep_distance(
            &cfg,
            &PhaseNoiseParams::zero(),
            &[150.0, 200.0, 250.0, 300.0],
            &SweepMode::Fixed { ds_half_deg: 8.0 },
        );
        for pair in pts.windows(2) {
            assert!(pair[0].rate >= pair[1].rate);
        }
    }

    #[test]
    fn asymptotic_slope_half_of_direct_transmission() {
        // With no background and an effectively infinite pulse budget the
        // rate scales with the single-arm transmittance, whose log-slope
        // over distance is half the full-channel slope.
        let mut cfg = template(100.0, 0.0, 1e30);
        cfg.link.baseline_x_error = 0.01;
        let distances: Vec<f64> = (0..7).map(|i| 100.0 + 50.0 * i as f64).collect();
        let pts = sweep_distance(
            &cfg,
            &PhaseNoiseParams::zero(),
            &distances,
            &SweepMode::Fixed { ds_half_deg: 8.0 },
        );
        let xs: Vec<f64> = pts.iter().map(|p| p.distance_km).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.rate.log10()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        let direct = -0.167 / 10.0;
        let ratio = slope / direct;
        assert!(
            (0.40..0.60).contains(&ratio),
            "slope ratio = {ratio}, slope = {slope}"
        );
    }
}
