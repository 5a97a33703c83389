//! Acceptance checks for `lovasz` live in `tests/acceptance.rs`.
