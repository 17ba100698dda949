//! Holds the `acceptance` test target, which checks the numbered
//! acceptance criteria end to end. Run it with
//! `cargo test -p edgeloc-verify --test acceptance`.
