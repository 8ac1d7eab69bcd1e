//! Report-style validation results.
//!
//! Validators collect every violation they can find instead of failing on
//! the first one, so a report can name all problems in a model or partition
//! at once.

use std::fmt;

/// Outcome of a structural validation pass over some object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport<V> {
    violations: Vec<V>,
}

impl<V: fmt::Display> ValidationReport<V> {
    pub fn new(violations: Vec<V>) -> Self {
        Self { violations }
    }

    pub fn ok() -> Self {
        Self {
            violations: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[V] {
        &self.violations
    }

    /// Renders the report as one line per violation, for error messages.
    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Converts a failed report into a crate error, passing clean reports
    /// through.
    pub fn into_result(self) -> crate::Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(crate::Error::Validation(self.summary()))
        }
    }
}

impl<V: fmt::Display> fmt::Display for ValidationReport<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.summary())
        }
    }
}
