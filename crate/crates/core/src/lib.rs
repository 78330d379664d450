//! Conditional-on-activity random rule models for binary risky choice.
//!
//! A menu is a pair of finite-support lotteries. Twelve parameter-free rules
//! each either rank the pair by first-order stochastic dominance of their
//! perceived lotteries or abstain. A softmax gate spreads weight over the
//! rules, and only the rules that speak at a menu share the prediction.
//!
//! The crate covers rule evaluation ([`rules`]), menu encodings
//! ([`features`]), the gated predictor and its training loop ([`gate`]),
//! identification diagnostics ([`identification`]), the two-step estimator
//! ([`two_step`]), summary diagnostics ([`diagnostics`]) and the evaluation
//! harness ([`data`], [`cv`], [`synth`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cv;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod gate;
pub mod identification;
pub mod linalg;
pub mod lottery;
pub mod rules;
pub mod synth;
pub mod two_step;

pub use error::{Error, Result};
pub use features::{FeatureSet, GATE_FEATURE_NAMES};
pub use gate::{GateParams, Prediction, TrainConfig};
pub use lottery::{canonicalize, fsd_compare, Dominance, Lottery, Menu};
pub use rules::{build_rule_matrix, Activity, RuleId, RuleMatrix, RuleOutcome};
