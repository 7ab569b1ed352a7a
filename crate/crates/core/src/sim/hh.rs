//! Single-compartment Hodgkin–Huxley neuron with Na, K, slow K (M),
//! high-threshold Ca (L) and leak currents.
//!
//! Internal units: mV, ms, mS/cm², µF/cm², µA/cm². The injected current is
//! given in pA and converted once to a density through the soma area
//! `A = τ / (C·R_in)`.

use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::sim::BoxPrior;

pub const HH_PARAM_NAMES: [&str; 10] =
    ["C", "g_Na", "g_K", "g_M", "g_leak", "g_L", "tau_max", "V_T", "E_leak", "r_SS"];

/// Lower and upper prior bounds, in the order of [`HH_PARAM_NAMES`].
/// `tau_max` is in ms.
pub const HH_PRIOR_LOWER: [f64; 10] = [0.4, 0.5, 1e-4, -3e-5, 1e-4, -3e-5, 50.0, -90.0, -110.0, 0.1];
pub const HH_PRIOR_UPPER: [f64; 10] = [3.0, 80.0, 30.0, 0.6, 0.8, 0.6, 3000.0, -40.0, -50.0, 3.0];

pub fn hh_prior() -> BoxPrior {
    BoxPrior::new(HH_PRIOR_LOWER.to_vec(), HH_PRIOR_UPPER.to_vec()).expect("static prior is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HhParams {
    /// µF/cm²
    pub c: f64,
    /// mS/cm²
    pub g_na: f64,
    pub g_k: f64,
    pub g_m: f64,
    pub g_leak: f64,
    pub g_l: f64,
    /// ms
    pub tau_max: f64,
    /// mV
    pub v_t: f64,
    pub e_leak: f64,
    pub r_ss: f64,
}

impl HhParams {
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() != HH_PARAM_NAMES.len() {
            return Err(FslmError::Dimension { expected: HH_PARAM_NAMES.len(), got: theta.len() });
        }
        Ok(HhParams {
            c: theta[0],
            g_na: theta[1],
            g_k: theta[2],
            g_m: theta[3],
            g_leak: theta[4],
            g_l: theta[5],
            tau_max: theta[6],
            v_t: theta[7],
            e_leak: theta[8],
            r_ss: theta[9],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.c, self.g_na, self.g_k, self.g_m, self.g_leak, self.g_l, self.tau_max, self.v_t, self.e_leak, self.r_ss,
        ]
    }

    pub fn midpoint() -> Self {
        Self::from_slice(&hh_prior().midpoint()).unwrap()
    }

    /// A regularly spiking point of the prior used as the default
    /// observation: the box midpoint with a lower threshold, a weaker leak
    /// and a depolarized leak reversal. The midpoint itself stays
    /// subthreshold under the default 200 pA step.
    pub fn reference() -> Self {
        HhParams { v_t: -65.0, e_leak: -65.0, g_leak: 0.1, ..Self::midpoint() }
    }

    fn validate(&self) -> Result<()> {
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(FslmError::config("HH parameters must be finite"));
        }
        if !(self.c > 0.0) || !(self.r_ss > 0.0) || !(self.tau_max > 0.0) {
            return Err(FslmError::config("HH parameters need C > 0, r_SS > 0 and tau_max > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HhConstants {
    pub e_na: f64,
    pub e_k: f64,
    pub e_ca: f64,
    /// °C, temperature the kinetics were measured at
    pub t1: f64,
    /// °C, simulated temperature
    pub t2: f64,
    pub q10: f64,
    /// Membrane time constant, ms.
    pub tau_membrane: f64,
    /// Input resistance, MΩ.
    pub r_in: f64,
}

impl Default for HhConstants {
    fn default() -> Self {
        HhConstants { e_na: 71.1, e_k: -101.3, e_ca: 131.1, t1: 36.0, t2: 34.0, q10: 3.0, tau_membrane: 11.97, r_in: 126.2 }
    }
}

impl HhConstants {
    pub fn k_tadj(&self) -> f64 {
        self.q10.powf((self.t2 - self.t1) / 10.0)
    }

    /// Soma area in cm² for capacitance `c` (µF/cm²).
    pub fn soma_area(&self, c: f64) -> f64 {
        units::soma_area_cm2(self.tau_membrane, c, self.r_in)
    }
}

/// Unit conversions, kept in one place.
pub mod units {
    /// `A = τ / (C · R_in)` with τ in ms, C in µF/cm², R_in in MΩ; result in cm².
    pub fn soma_area_cm2(tau_ms: f64, c_uf_per_cm2: f64, r_in_mohm: f64) -> f64 {
        // ms·1e-3 / (µF·1e-6 · MΩ·1e6) = 1e-3 · τ / (C·R)
        1e-3 * tau_ms / (c_uf_per_cm2 * r_in_mohm)
    }

    /// pA over an area in cm² to µA/cm².
    pub fn current_density_ua_per_cm2(current_pa: f64, area_cm2: f64) -> f64 {
        current_pa * 1e-6 / area_cm2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusProtocol {
    /// pA
    pub amplitude: f64,
    /// ms
    pub onset: f64,
    pub duration: f64,
    pub total: f64,
    pub dt: f64,
    /// mV
    pub v0: f64,
}

impl Default for StimulusProtocol {
    fn default() -> Self {
        StimulusProtocol { amplitude: 200.0, onset: 100.0, duration: 600.0, total: 800.0, dt: 0.04, v0: -70.0 }
    }
}

impl StimulusProtocol {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.onset >= 0.0) {
            problems.push(format!("onset must be non-negative, got {}", self.onset));
        }
        if !(self.duration >= 0.0) || !(self.onset + self.duration <= self.total) {
            problems.push(format!(
                "stimulus window [{}, {}] must fit in [0, {}]",
                self.onset,
                self.onset + self.duration,
                self.total
            ));
        }
        if ![self.amplitude, self.v0, self.total].iter().all(|v| v.is_finite()) {
            problems.push("amplitude, v0 and total must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FslmError::config(problems.join("; ")))
        }
    }

    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }

    pub fn steps(&self) -> usize {
        (self.total / self.dt).round() as usize
    }

    /// Injected current (pA) at time `t`: a square pulse on `[onset, offset)`.
    pub fn current_at(&self, t: f64) -> f64 {
        if t >= self.onset && t < self.offset() {
            self.amplitude
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageTrace {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    /// m, h, n, p, q, r at the end of the run
    pub gating_final: [f64; 6],
}

impl VoltageTrace {
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }
}

/// `x / (exp(x/c) - 1)`, continuous at `x = 0` where it equals `c`.
pub fn vtrap(x: f64, c: f64) -> f64 {
    let u = x / c;
    if u.abs() < 1e-6 {
        c * (1.0 - 0.5 * u + u * u / 12.0)
    } else {
        x / u.exp_m1()
    }
}

/// Steady state and time constant of one gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub inf: f64,
    pub tau: f64,
}

impl Gate {
    fn from_rates(alpha: f64, beta: f64, rate_scale: f64) -> Gate {
        let s = alpha + beta;
        Gate { inf: alpha / s, tau: 1.0 / (s * rate_scale) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateKinetics {
    pub m: Gate,
    pub h: Gate,
    pub n: Gate,
    pub p: Gate,
    pub q: Gate,
    pub r: Gate,
}

impl GateKinetics {
    pub fn as_array(&self) -> [Gate; 6] {
        [self.m, self.h, self.n, self.p, self.q, self.r]
    }
}

// Rate functions after Pospischil et al. (2008), "Minimal Hodgkin–Huxley
// type models for different classes of cortical and thalamic neurons",
// Biol. Cybern. 99, 427–441. V and V_T in mV, rates in 1/ms.

/// Na activation: α_m = -0.32 (V-V_T-13) / (exp(-(V-V_T-13)/4) - 1)
fn alpha_m(v: f64, v_t: f64) -> f64 {
    0.32 * vtrap(-(v - v_t - 13.0), 4.0)
}
/// β_m = 0.28 (V-V_T-40) / (exp((V-V_T-40)/5) - 1)
fn beta_m(v: f64, v_t: f64) -> f64 {
    0.28 * vtrap(v - v_t - 40.0, 5.0)
}
/// Na inactivation: α_h = 0.128 exp(-(V-V_T-17)/18)
fn alpha_h(v: f64, v_t: f64) -> f64 {
    0.128 * (-(v - v_t - 17.0) / 18.0).exp()
}
/// β_h = 4 / (1 + exp(-(V-V_T-40)/5))
fn beta_h(v: f64, v_t: f64) -> f64 {
    4.0 / (1.0 + (-(v - v_t - 40.0) / 5.0).exp())
}
/// Delayed-rectifier K: α_n = -0.032 (V-V_T-15) / (exp(-(V-V_T-15)/5) - 1)
fn alpha_n(v: f64, v_t: f64) -> f64 {
    0.032 * vtrap(-(v - v_t - 15.0), 5.0)
}
/// β_n = 0.5 exp(-(V-V_T-10)/40)
fn beta_n(v: f64, v_t: f64) -> f64 {
    0.5 * (-(v - v_t - 10.0) / 40.0).exp()
}
/// Slow non-inactivating K: p_∞ = 1 / (1 + exp(-(V+35)/10))
fn p_inf(v: f64) -> f64 {
    1.0 / (1.0 + (-(v + 35.0) / 10.0).exp())
}
/// τ_p = τ_max / (3.3 exp((V+35)/20) + exp(-(V+35)/20))
fn tau_p(v: f64, tau_max: f64) -> f64 {
    let e = ((v + 35.0) / 20.0).exp();
    tau_max / (3.3 * e + 1.0 / e)
}
/// High-threshold Ca activation: α_q = 0.055 (-27-V) / (exp((-27-V)/3.8) - 1)
fn alpha_q(v: f64) -> f64 {
    0.055 * vtrap(-27.0 - v, 3.8)
}
/// β_q = 0.94 exp((-75-V)/17)
fn beta_q(v: f64) -> f64 {
    0.94 * ((-75.0 - v) / 17.0).exp()
}
/// Ca inactivation: α_r = 0.000457 exp((-13-V)/50)
fn alpha_r(v: f64) -> f64 {
    0.000457 * ((-13.0 - v) / 50.0).exp()
}
/// β_r = 0.0065 / (exp((-15-V)/28) + 1)
fn beta_r(v: f64) -> f64 {
    0.0065 / (((-15.0 - v) / 28.0).exp() + 1.0)
}

/// Steady states and time constants of all six gates at voltage `v`.
///
/// Rates of m, h, n, q, r are scaled by `k_tadj / r_ss`; τ_p by `1 / k_tadj`.
pub fn gating_steady_state_and_tau(v: f64, v_t: f64, tau_max: f64, k_tadj: f64, r_ss: f64) -> GateKinetics {
    let s = k_tadj / r_ss;
    GateKinetics {
        m: Gate::from_rates(alpha_m(v, v_t), beta_m(v, v_t), s),
        h: Gate::from_rates(alpha_h(v, v_t), beta_h(v, v_t), s),
        n: Gate::from_rates(alpha_n(v, v_t), beta_n(v, v_t), s),
        p: Gate { inf: p_inf(v), tau: tau_p(v, tau_max) / k_tadj },
        q: Gate::from_rates(alpha_q(v), beta_q(v), s),
        r: Gate::from_rates(alpha_r(v), beta_r(v), s),
    }
}

/// |V| above this aborts the run.
pub const DIVERGENCE_LIMIT_MV: f64 = 500.0;

/// Integrates the membrane equation with exponential Euler.
///
/// Each step first advances V with the conductances frozen at their
/// step-start values (exact for the resulting linear ODE), then advances
/// every gate exactly towards its steady state at the new voltage.
pub fn simulate_hh(params: &HhParams, constants: &HhConstants, stim: &StimulusProtocol) -> Result<VoltageTrace> {
    params.validate()?;
    stim.validate()?;
    let dt = stim.dt;
    let steps = stim.steps();
    let k_tadj = constants.k_tadj();
    let i_density = units::current_density_ua_per_cm2(stim.amplitude, constants.soma_area(params.c));

    let mut v = stim.v0;
    let g0 = gating_steady_state_and_tau(v, params.v_t, params.tau_max, k_tadj, params.r_ss);
    let (mut m, mut h, mut n, mut p, mut q, mut r) = (g0.m.inf, g0.h.inf, g0.n.inf, g0.p.inf, g0.q.inf, g0.r.inf);

    let mut times = Vec::with_capacity(steps + 1);
    let mut voltages = Vec::with_capacity(steps + 1);
    times.push(0.0);
    voltages.push(v);

    for i in 1..=steps {
        let t_prev = (i - 1) as f64 * dt;
        let injected = if stim.current_at(t_prev) != 0.0 { i_density } else { 0.0 };

        let g_na = params.g_na * m * m * m * h;
        let g_k = params.g_k * n * n * n * n;
        let g_m = params.g_m * p;
        let g_l = params.g_l * q * q * r;
        let g_tot = g_na + g_k + params.g_leak + g_m + g_l;
        let drive =
            g_na * constants.e_na + (g_k + g_m) * constants.e_k + params.g_leak * params.e_leak + g_l * constants.e_ca + injected;
        v = if g_tot.abs() > 1e-12 {
            let v_inf = drive / g_tot;
            v_inf + (v - v_inf) * (-dt * g_tot / params.c).exp()
        } else {
            v + dt * (drive - g_tot * v) / params.c
        };
        let t = i as f64 * dt;
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT_MV {
            return Err(FslmError::SimulationDiverged { time_ms: t });
        }

        let k = gating_steady_state_and_tau(v, params.v_t, params.tau_max, k_tadj, params.r_ss);
        m = relax(m, k.m, dt);
        h = relax(h, k.h, dt);
        n = relax(n, k.n, dt);
        p = relax(p, k.p, dt);
        q = relax(q, k.q, dt);
        r = relax(r, k.r, dt);

        times.push(t);
        voltages.push(v);
    }
    Ok(VoltageTrace { times, voltages, gating_final: [m, h, n, p, q, r] })
}

/// Exact solution of `dz/dt = (z_∞ - z)/τ` over one step; a convex
/// combination of `z` and `z_∞`, so it never leaves [0, 1].
#[inline]
fn relax(z: f64, gate: Gate, dt: f64) -> f64 {
    gate.inf + (z - gate.inf) * (-dt / gate.tau).exp()
}
