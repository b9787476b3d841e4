//! Holds the acceptance suite in `tests/acceptance.rs`; nothing is exported.
//!
//! The suite lives in its own package so that its long training runs come
//! after the unit and property tests of the other crates.
