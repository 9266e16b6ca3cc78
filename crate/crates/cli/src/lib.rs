//! Run orchestration for lifelong QA experiments: configuration loading,
//! run directories, checkpoints, evaluation and multi-run reports.

pub mod checkpoint;
pub mod commands;
pub mod report;
pub mod rundir;

use std::fmt;

/// Bad command-line input; exits with the validation code.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// 1 for invalid input or configuration, 2 for failures while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Invalid>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.downcast_ref::<lqa_core::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&Invalid("x".into()).into()), EXIT_VALIDATION);
        assert_eq!(exit_code(&lqa_core::Error::Validation("x".into()).into()), EXIT_VALIDATION);
        assert_eq!(exit_code(&lqa_core::Error::Untrained.into()), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), EXIT_RUNTIME);
    }
}
