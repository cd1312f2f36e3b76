//! Holds the acceptance suite under `tests/acceptance.rs`; no library code.
