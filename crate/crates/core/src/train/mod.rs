//! Preference training, baseline constructions, the round loop and
//! step-level Best-of-N.

pub mod baselines;
pub mod bon;
pub mod dpo;
pub mod iterate;
