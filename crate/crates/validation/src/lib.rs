//! Acceptance checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p bnprepair-validation -- --nocapture` to see every line.
