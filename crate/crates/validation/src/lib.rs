//! Holds the `acceptance` test target, which checks the workspace against
//! its acceptance criteria and prints one PASS/FAIL line for each.
//!
//! It sits in its own package so that `cargo test --workspace` runs it after
//! every other suite.
