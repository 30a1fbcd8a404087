//! Exit codes and the one-line JSON error report.

use std::process::ExitCode;

use recycled_core::Error as CoreError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const AUDIT: u8 = 4;
pub const NUMERIC: u8 = 5;

/// Failures raised by the binary itself.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Audit(String),
    Numeric(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Audit(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => ("usage", USAGE),
                Failure::Data(_) => ("data", DATA),
                Failure::Audit(_) => ("audit", AUDIT),
                Failure::Numeric(_) => ("numeric", NUMERIC),
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => ("usage", USAGE),
                CoreError::Audit(_) => ("audit", AUDIT),
                CoreError::Numeric(_) | CoreError::NonFinite(_) => ("numeric", NUMERIC),
                _ => ("data", DATA),
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return ("data", DATA);
        }
    }
    ("data", DATA)
}

/// The context chain joined by ": ", skipping causes whose text the
/// previous entry already ends with.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if parts.last().is_some_and(|p| p.ends_with(&text)) {
            continue;
        }
        parts.push(text);
    }
    parts.join(": ")
}

pub fn report(err: &anyhow::Error) -> ExitCode {
    let (kind, code) = classify(err);
    let line = serde_json::json!({
        "error": kind,
        "exit_code": code,
        "message": message(err),
    });
    eprintln!("{line}");
    ExitCode::from(code)
}
