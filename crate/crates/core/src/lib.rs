//! Capsule-network indoor localization over WiFi RSS fingerprints.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, convolution, softmax and a reverse-mode tape.
//! * [`fingerprint`]: RSS samples, normalization, difference-matrix features,
//!   grid labels, stratified splitting and AP selection.
//! * [`datasets`]: UJIIndoorLoc ingestion, the synthetic path-loss corpus and
//!   the on-disk corpus format.
//! * [`capsnet`]: the capsule network, dynamic routing, margin loss and training.
//! * [`eval`]: accuracy and error metrics, the kNN baseline and grid search.

pub mod capsnet;
pub mod datasets;
pub mod eval;
pub mod fingerprint;
pub mod tensor;
