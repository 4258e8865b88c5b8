mod common;

use adapterforge::adapters::StackMode;
use common::grad_cases::{self, OP_CASES};

#[test]
fn every_op_matches_finite_differences() {
    for (name, case) in OP_CASES {
        if let Err(e) = case() {
            panic!("{name}: {e}");
        }
    }
}

#[test]
fn serial_stacked_model_matches_finite_differences() {
    grad_cases::full_model(StackMode::SerialNewLn).unwrap();
}

#[test]
fn madx_stacked_model_matches_finite_differences() {
    grad_cases::full_model(StackMode::MadX).unwrap();
}
