use std::fmt;

use serde::Serialize;

/// Outcome of one oracle check. `pass` holds exactly when the worst error
/// is within tolerance; a check with no trials passes vacuously and says so.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub worst_error: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub seed: u64,
    pub detail: String,
}

pub const REPORT_CSV_HEADER: &str = "name,pass,worst_error,tolerance,trials,seed,detail";

impl CheckReport {
    pub fn new(
        name: impl Into<String>,
        worst_error: f64,
        tolerance: f64,
        trials: usize,
        seed: u64,
        detail: impl Into<String>,
    ) -> Self {
        let mut detail = detail.into();
        if trials == 0 {
            detail = if detail.is_empty() {
                "no trials".into()
            } else {
                format!("no trials; {detail}")
            };
        }
        Self {
            name: name.into(),
            pass: worst_error <= tolerance,
            worst_error,
            tolerance,
            trials,
            seed,
            detail,
        }
    }

    /// A failed report for a check that could not run at all.
    pub fn aborted(
        name: impl Into<String>,
        tolerance: f64,
        trials: usize,
        seed: u64,
        reason: impl fmt::Display,
    ) -> Self {
        Self {
            name: name.into(),
            pass: false,
            worst_error: f64::INFINITY,
            tolerance,
            trials,
            seed,
            detail: format!("aborted: {reason}"),
        }
    }

    pub fn is_vacuous(&self) -> bool {
        self.trials == 0
    }

    pub fn csv_row(&self) -> String {
        let detail = self.detail.replace('"', "\"\"");
        format!(
            "{},{},{:e},{:e},{},{},\"{}\"",
            self.name, self.pass, self.worst_error, self.tolerance, self.trials, self.seed, detail
        )
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tol {:.1e}), {} trials, seed {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.worst_error,
            self.tolerance,
            self.trials,
            self.seed
        )?;
        if !self.detail.is_empty() {
            write!(f, ", {}", self.detail)?;
        }
        Ok(())
    }
}

/// All reports as CSV with [`REPORT_CSV_HEADER`].
pub fn reports_csv(reports: &[CheckReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
