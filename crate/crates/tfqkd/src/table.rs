//! Counts-table files: line-oriented `key = value` text holding the
//! per-pair sent/detected tallies of one run, the operating metadata,
//! optional aggregate cross-checks, and the post-selected X-window sweep.
//!
//! The format is deliberately diff-friendly because tables are often
//! hand-transcribed. Unknown keys are rejected; cellwise invariants are
//! enforced on load.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::{Source, UntaggedSources};
use crate::finite_key::CountsInput;

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invariant violation at cell {cell}: {message}")]
    InvariantViolation { cell: String, message: String },
    #[error("no xx window entry at ds_half_deg = {0}")]
    MissingWindow(f64),
    #[error("io error: {0}")]
    Io(String),
}

/// One entry of the X-window sweep: accepted detections and their error
/// fraction at a half-window setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XxWindowPoint {
    pub ds_half_deg: f64,
    pub detections: u64,
    pub qber: f64,
}

/// In-memory form of a counts-table file.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsTableFile {
    pub fiber_length_km: f64,
    pub fiber_loss_db: f64,
    pub n_total: f64,
    pub ds_half_deg: f64,
    pub untagged_sources: Option<UntaggedSources>,
    pub sent: [[u64; 4]; 4],
    pub detected: [[u64; 4]; 4],
    pub detected_total: Option<u64>,
    pub survived_after_aopp: Option<u64>,
    pub qber_before_aopp: Option<f64>,
    pub qber_after_aopp: Option<f64>,
    pub xx_windows: Vec<XxWindowPoint>,
}

fn pair_key(prefix: &str, l: Source, r: Source) -> String {
    format!("{prefix}_{}{}", l.label(), r.label())
}

impl CountsTableFile {
    pub fn load(path: &Path) -> Result<CountsTableFile, TableError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TableError::Io(format!("{path:?}: {e}")))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<CountsTableFile, TableError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
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
            let (key, value) = line.split_once('=').ok_or(TableError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push((line_no, key.trim().to_string(), value.trim().to_string()));
        }

        let mut known: Vec<String> = vec![
            "fiber_length_km".into(),
            "fiber_loss_db".into(),
            "n_total".into(),
            "ds_half_deg".into(),
            "untagged_sources".into(),
            "detected_total".into(),
            "survived_after_aopp".into(),
            "qber_before_aopp".into(),
            "qber_after_aopp".into(),
            "xx_window".into(),
        ];
        for l in Source::ALL {
            for r in Source::ALL {
                known.push(pair_key("sent", l, r));
                known.push(pair_key("detected", l, r));
            }
        }
        for (line, key, _) in &entries {
            if !known.iter().any(|k| k == key) {
                return Err(TableError::UnknownKey {
                    key: key.clone(),
                    line: *line,
                });
            }
        }

        let find = |key: &str| -> Option<(usize, &str)> {
            entries
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(l, _, v)| (*l, v.as_str()))
        };
        let require_f64 = |key: &str| -> Result<f64, TableError> {
            let (line, v) = find(key).ok_or_else(|| TableError::MissingKey(key.into()))?;
            v.parse::<f64>().map_err(|e| TableError::Parse {
                line,
                message: format!("bad number for `{key}`: {e}"),
            })
        };
        let require_u64 = |key: &str| -> Result<u64, TableError> {
            let (line, v) = find(key).ok_or_else(|| TableError::MissingKey(key.into()))?;
            v.parse::<u64>().map_err(|e| TableError::Parse {
                line,
                message: format!("bad count for `{key}`: {e}"),
            })
        };
        let optional_u64 = |key: &str| -> Result<Option<u64>, TableError> {
            match find(key) {
                None => Ok(None),
                Some((line, v)) => v
                    .parse::<u64>()
                    .map(Some)
                    .map_err(|e| TableError::Parse {
                        line,
                        message: format!("bad count for `{key}`: {e}"),
                    }),
            }
        };
        let optional_f64 = |key: &str| -> Result<Option<f64>, TableError> {
            match find(key) {
                None => Ok(None),
                Some((line, v)) => v.parse::<f64>().map(Some).map_err(|e| TableError::Parse {
                    line,
                    message: format!("bad number for `{key}`: {e}"),
                }),
            }
        };

        let mut sent = [[0u64; 4]; 4];
        let mut detected = [[0u64; 4]; 4];
        for l in Source::ALL {
            for r in Source::ALL {
                sent[l.index()][r.index()] = require_u64(&pair_key("sent", l, r))?;
                detected[l.index()][r.index()] = require_u64(&pair_key("detected", l, r))?;
            }
        }

        let fiber_loss_db = require_f64("fiber_loss_db")?;
        if fiber_loss_db < 0.0 {
            return Err(TableError::InvariantViolation {
                cell: "fiber_loss_db".into(),
                message: "loss must be nonnegative".into(),
            });
        }

        let untagged_sources = match find("untagged_sources") {
            None => None,
            Some((line, v)) => Some(UntaggedSources::parse(v).ok_or(TableError::Parse {
                line,
                message: format!("untagged_sources must be `yz` or `z`, got `{v}`"),
            })?),
        };

        let mut xx_windows = Vec::new();
        for (line, key, value) in &entries {
            if key != "xx_window" {
                continue;
            }
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(TableError::Parse {
                    line: *line,
                    message: "xx_window wants `<ds_half_deg> <detections> <qber>`".into(),
                });
            }
            let bad = |e: &dyn std::fmt::Display| TableError::Parse {
                line: *line,
                message: format!("bad xx_window entry: {e}"),
            };
            xx_windows.push(XxWindowPoint {
                ds_half_deg: parts[0].parse::<f64>().map_err(|e| bad(&e))?,
                detections: parts[1].parse::<u64>().map_err(|e| bad(&e))?,
                qber: parts[2].parse::<f64>().map_err(|e| bad(&e))?,
            });
        }

        let table = CountsTableFile {
            fiber_length_km: require_f64("fiber_length_km")?,
            fiber_loss_db,
            n_total: require_f64("n_total")?,
            ds_half_deg: require_f64("ds_half_deg")?,
            untagged_sources,
            sent,
            detected,
            detected_total: optional_u64("detected_total")?,
            survived_after_aopp: optional_u64("survived_after_aopp")?,
            qber_before_aopp: optional_f64("qber_before_aopp")?,
            qber_after_aopp: optional_f64("qber_after_aopp")?,
            xx_windows,
        };
        table.check_invariants()?;
        Ok(table)
    }

    fn check_invariants(&self) -> Result<(), TableError> {
        for l in Source::ALL {
            for r in Source::ALL {
                let s = self.sent[l.index()][r.index()];
                let d = self.detected[l.index()][r.index()];
                if d > s {
                    return Err(TableError::InvariantViolation {
                        cell: format!("{}{}", l.label(), r.label()),
                        message: format!("detected {d} exceeds sent {s}"),
                    });
                }
            }
        }
        for w in &self.xx_windows {
            if !(w.ds_half_deg > 0.0 && w.ds_half_deg <= 90.0) {
                return Err(TableError::InvariantViolation {
                    cell: "xx_window".into(),
                    message: format!("half-window {} out of (0, 90]", w.ds_half_deg),
                });
            }
            if !(0.0..=1.0).contains(&w.qber) {
                return Err(TableError::InvariantViolation {
                    cell: "xx_window".into(),
                    message: format!("qber {} out of [0, 1]", w.qber),
                });
            }
        }
        Ok(())
    }

    /// Relative deviation of the summed cells from the recorded total,
    /// when the aggregate is present.
    pub fn detected_total_deviation(&self) -> Option<f64> {
        let total = self.detected_total? as f64;
        let sum: u64 = self.detected.iter().flatten().sum();
        Some((sum as f64 - total) / total)
    }

    pub fn window_at(&self, ds_half_deg: f64) -> Option<&XxWindowPoint> {
        self.xx_windows
            .iter()
            .find(|w| (w.ds_half_deg - ds_half_deg).abs() < 1e-9)
    }

    /// Assemble the analysis input at one window setting.
    pub fn to_counts_input(&self, ds_half_deg: f64) -> Result<CountsInput, TableError> {
        let window = self
            .window_at(ds_half_deg)
            .ok_or(TableError::MissingWindow(ds_half_deg))?;
        let mut sent = [[0.0; 4]; 4];
        let mut detected = [[0.0; 4]; 4];
        for l in 0..4 {
            for r in 0..4 {
                sent[l][r] = self.sent[l][r] as f64;
                detected[l][r] = self.detected[l][r] as f64;
            }
        }
        Ok(CountsInput {
            sent,
            detected,
            xx_accepted: window.detections as f64,
            xx_errors: (window.detections as f64 * window.qber).round(),
            ds_half_deg,
            n_total: self.n_total,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TableError> {
        std::fs::write(path, self.render())
            .map_err(|e| TableError::Io(format!("{path:?}: {e}")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "fiber_length_km = {}", self.fiber_length_km);
        let _ = writeln!(out, "fiber_loss_db = {}", self.fiber_loss_db);
        let _ = writeln!(out, "n_total = {}", self.n_total);
        let _ = writeln!(out, "ds_half_deg = {}", self.ds_half_deg);
        if let Some(u) = self.untagged_sources {
            let _ = writeln!(out, "untagged_sources = {}", u.label());
        }
        for l in Source::ALL {
            for r in Source::ALL {
                let _ = writeln!(
                    out,
                    "{} = {}",
                    pair_key("sent", l, r),
                    self.sent[l.index()][r.index()]
                );
            }
        }
        for l in Source::ALL {
            for r in Source::ALL {
                let _ = writeln!(
                    out,
                    "{} = {}",
                    pair_key("detected", l, r),
                    self.detected[l.index()][r.index()]
                );
            }
        }
        if let Some(v) = self.detected_total {
            let _ = writeln!(out, "detected_total = {v}");
        }
        if let Some(v) = self.survived_after_aopp {
            let _ = writeln!(out, "survived_after_aopp = {v}");
        }
        if let Some(v) = self.qber_before_aopp {
            let _ = writeln!(out, "qber_before_aopp = {v}");
        }
        if let Some(v) = self.qber_after_aopp {
            let _ = writeln!(out, "qber_after_aopp = {v}");
        }
        for w in &self.xx_windows {
            let _ = writeln!(
                out,
                "xx_window = {} {} {}",
                w.ds_half_deg, w.detections, w.qber
            );
        }
        out
    }
}
