//! Item-based collaborative filtering with factored item similarity (FISM)
//! and neural attentive item similarity (NAIS) models, trained on implicit
//! feedback and evaluated with the leave-one-out top-K protocol.

pub mod autograd;
pub mod baselines;
pub mod dataio;
pub mod evaluator;
pub mod model;
pub mod store;
pub mod synthetic;
pub mod trainer;
