//! Post-execution checks.
//!
//! Results travel from the script to the validator through stdout markers:
//! a line `KEY=value`, last occurrence wins. Every failure, including an
//! absent marker or an unparsable value, is expressed as a failed check in
//! the [`ValidationOutcome`]; validation itself never errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::ExecutionResult;

/// Relative tolerance applied when a float check names no tolerance.
pub const DEFAULT_REL_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidatorSpec {
    /// Valid iff the process exited with code 0 inside the time limit.
    ExitCode,
    StdoutInt {
        marker: String,
        /// Absent in fixtures whose expected value must be filled in from
        /// the local dataset; the check then fails with an explicit reason.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expected_int: Option<i64>,
    },
    StdoutFloat {
        marker: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expected_float: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rel_tol: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        abs_tol: Option<f64>,
    },
    AllOf {
        children: Vec<ValidatorSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("marker must be a non-empty key without `=` or newlines")]
    BadMarker,
    #[error("tolerances must be finite and >= 0")]
    BadTolerance,
    #[error("all_of needs at least one child")]
    EmptyAllOf,
}

impl ValidatorSpec {
    pub fn stdout_int(marker: &str, expected: i64) -> Self {
        ValidatorSpec::StdoutInt {
            marker: marker.into(),
            expected_int: Some(expected),
        }
    }

    pub fn stdout_float(marker: &str, expected: f64, rel_tol: f64, abs_tol: f64) -> Self {
        ValidatorSpec::StdoutFloat {
            marker: marker.into(),
            expected_float: Some(expected),
            rel_tol: Some(rel_tol),
            abs_tol: Some(abs_tol),
        }
    }

    /// Structural check of kind-specific fields.
    pub fn check(&self) -> Result<(), SpecError> {
        let marker_ok = |m: &str| !m.is_empty() && !m.contains(['=', '\n', '\r']);
        match self {
            ValidatorSpec::ExitCode => Ok(()),
            ValidatorSpec::StdoutInt { marker, .. } => {
                marker_ok(marker).then_some(()).ok_or(SpecError::BadMarker)
            }
            ValidatorSpec::StdoutFloat {
                marker,
                rel_tol,
                abs_tol,
                ..
            } => {
                if !marker_ok(marker) {
                    return Err(SpecError::BadMarker);
                }
                let tol_ok = |t: &Option<f64>| t.is_none_or(|t| t.is_finite() && t >= 0.0);
                if !tol_ok(rel_tol) || !tol_ok(abs_tol) {
                    return Err(SpecError::BadTolerance);
                }
                Ok(())
            }
            ValidatorSpec::AllOf { children } => {
                if children.is_empty() {
                    return Err(SpecError::EmptyAllOf);
                }
                children.iter().try_for_each(ValidatorSpec::check)
            }
        }
    }
}

/// Effective `(rel_tol, abs_tol)`: when neither is given the relative
/// default applies; a lone tolerance leaves the other at zero.
pub fn effective_tolerances(rel_tol: Option<f64>, abs_tol: Option<f64>) -> (f64, f64) {
    match (rel_tol, abs_tol) {
        (None, None) => (DEFAULT_REL_TOL, 0.0),
        (r, a) => (r.unwrap_or(0.0), a.unwrap_or(0.0)),
    }
}

/// `|observed - expected| <= abs_tol + rel_tol * |expected|`.
pub fn within_tolerance(observed: f64, expected: f64, rel_tol: f64, abs_tol: f64) -> bool {
    (observed - expected).abs() <= abs_tol + rel_tol * expected.abs()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl ValidationOutcome {
    pub fn from_checks(checks: Vec<Check>) -> Self {
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
        Self { passed, checks }
    }

    /// An outcome holding a single failed check.
    pub fn failed(name: &str, expected: &str, observed: &str) -> Self {
        Self::from_checks(vec![Check {
            name: name.into(),
            expected: expected.into(),
            observed: observed.into(),
            passed: false,
        }])
    }

    pub fn failing_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("marker `{0}` not found in stdout")]
pub struct MarkerAbsent(pub String);

/// Value following the last line that starts with `MARKER=`, trimmed.
pub fn extract_marker(stdout: &str, marker: &str) -> Result<String, MarkerAbsent> {
    let prefix = format!("{marker}=");
    stdout
        .lines()
        .rev()
        .find_map(|line| line.strip_prefix(prefix.as_str()))
        .map(|v| v.trim().to_string())
        .ok_or_else(|| MarkerAbsent(marker.to_string()))
}

fn exit_check(exec: &ExecutionResult) -> Check {
    let observed = if exec.timed_out {
        "timeout".to_string()
    } else if exec.cancelled {
        "cancelled".to_string()
    } else {
        exec.exit_code
            .map(|c| c.to_string())
            .unwrap_or_else(|| "killed".to_string())
    };
    Check {
        name: "exit_code".into(),
        expected: "0".into(),
        observed,
        passed: exec.succeeded(),
    }
}

fn marker_check<T, P, C>(
    exec: &ExecutionResult,
    marker: &str,
    expected: Option<T>,
    expected_text: String,
    parse: P,
    compare: C,
) -> Check
where
    T: Copy,
    P: Fn(&str) -> Option<T>,
    C: Fn(T, T) -> bool,
{
    let name = format!("marker:{marker}");
    let fail = |observed: String| Check {
        name: name.clone(),
        expected: expected_text.clone(),
        observed,
        passed: false,
    };
    if !exec.succeeded() {
        return fail("not evaluated: execution failed".into());
    }
    let raw = match extract_marker(&exec.stdout, marker) {
        Ok(v) => v,
        Err(_) => return fail("marker absent".into()),
    };
    let Some(value) = parse(&raw) else {
        return fail(format!("unparsable: {raw:?}"));
    };
    let Some(expected) = expected else {
        return fail(format!("{raw} (expected value not configured)"));
    };
    Check {
        name: name.clone(),
        expected: expected_text.clone(),
        observed: raw,
        passed: compare(value, expected),
    }
}

fn collect(spec: &ValidatorSpec, exec: &ExecutionResult, out: &mut Vec<Check>) {
    match spec {
        ValidatorSpec::ExitCode => out.push(exit_check(exec)),
        ValidatorSpec::StdoutInt {
            marker,
            expected_int,
        } => {
            out.push(exit_check(exec));
            let expected_text = expected_int
                .map(|e| e.to_string())
                .unwrap_or_else(|| "unset".into());
            out.push(marker_check(
                exec,
                marker,
                *expected_int,
                expected_text,
                |s| s.parse::<i64>().ok(),
                |a, b| a == b,
            ));
        }
        ValidatorSpec::StdoutFloat {
            marker,
            expected_float,
            rel_tol,
            abs_tol,
        } => {
            out.push(exit_check(exec));
            let (rel, abs) = effective_tolerances(*rel_tol, *abs_tol);
            let expected_text = match expected_float {
                Some(e) => format!("{e} (rel_tol {rel}, abs_tol {abs})"),
                None => "unset".into(),
            };
            out.push(marker_check(
                exec,
                marker,
                *expected_float,
                expected_text,
                |s| s.parse::<f64>().ok().filter(|v| v.is_finite()),
                |obs, exp| within_tolerance(obs, exp, rel, abs),
            ));
        }
        // Every child is evaluated so the audit record is complete.
        ValidatorSpec::AllOf { children } => {
            for child in children {
                collect(child, exec, out);
            }
        }
    }
}

/// Evaluate `spec` against an execution.
pub fn validate(spec: &ValidatorSpec, exec: &ExecutionResult) -> ValidationOutcome {
    let mut checks = Vec::new();
    collect(spec, exec, &mut checks);
    if checks.is_empty() {
        // An empty all_of never validates anything; keep checks non-empty.
        checks.push(Check {
            name: "all_of".into(),
            expected: "at least one child".into(),
            observed: "none".into(),
            passed: false,
        });
    }
    ValidationOutcome::from_checks(checks)
}
