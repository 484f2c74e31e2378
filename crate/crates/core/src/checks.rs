//! The full finite-difference suite: every primitive, every loss, and the
//! network end to end on miniature shapes.

use crate::tensor::gradcheck::{primitive_suite, GradCheckReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

pub fn full_gradient_suite(tol: f64, seed: u64) -> Vec<GradCheckReport> {
    let mut reports = primitive_suite(1e-3, tol, seed);
    reports.extend(crate::objective::gradient_suite(1e-3, tol, seed));
    reports.push(match crate::network::gradient_check(1e-4, tol, seed) {
        Ok(r) => r,
        Err(e) => GradCheckReport {
            op_name: format!("network ({e})"),
            max_rel_error: f64::INFINITY,
            tolerance: tol,
            passed: false,
        },
    });
    reports
}
