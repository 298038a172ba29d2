//! Evaluation engine for three-class diagnostic classifiers (A-EGJA, E-EGJA,
//! control): confusion-matrix metrics with Wald intervals, ROC/PR curves,
//! McNemar-Bowker, DeLong and kappa tests, patient-level and
//! inverse-count-weighted evaluation, reader-study pooling, k-fold splits,
//! and a reference gated fusion head trained with hand-written backprop.

pub mod aggregation;
pub mod data;
pub mod fusion;
pub mod metrics;
pub mod stats;
pub mod cli;
pub mod report;
