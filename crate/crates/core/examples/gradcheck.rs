//! Runs the finite-difference gradient suite and prints the per-check report.
//!
//! `cargo run --release --example gradcheck -- matmul` repeats the run with
//! a deliberately broken matmul backward to show the suite catching it.

use cmformer::harness::{run_gradcheck, GradcheckOptions};
use cmformer::ndtensor::OpKind;

fn main() {
    let corrupt = std::env::args()
        .nth(1)
        .map(|name| OpKind::ALL.into_iter().find(|k| k.name() == name).expect("unknown op name"));
    let report = run_gradcheck(&GradcheckOptions {
        corrupt,
        ..GradcheckOptions::default()
    });
    print!("{}", report.to_text());
    if !report.passed() {
        println!("failing: {}", report.failures().join(", "));
    }
}
