//! Holder crate for the end-to-end acceptance run in `tests/acceptance.rs`.
