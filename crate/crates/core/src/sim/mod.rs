//! Mechanistic simulators and their priors.

mod hh;
mod lgm;
mod prior;

pub use hh::{
    gating_steady_state_and_tau, hh_prior, simulate_hh, units, vtrap, Gate, GateKinetics, HhConstants, HhParams,
    StimulusProtocol, VoltageTrace, DIVERGENCE_LIMIT_MV, HH_PARAM_NAMES, HH_PRIOR_LOWER, HH_PRIOR_UPPER,
};
pub use lgm::{lgm_posterior_logpdf, LgmConfig, LgmPosterior, LGM_FEATURE_NAMES, LGM_PARAM_NAMES};
pub use prior::BoxPrior;
