mod common;

use common::grad::{gradient_errors, TOL};

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, err) in gradient_errors() {
        assert!(err < TOL, "{name}: worst relative error {err}");
    }
}
