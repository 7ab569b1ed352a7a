use serde::{Deserialize, Serialize};

use crate::sim::VoltageTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeDetector {
    /// Upward dV/dt crossing that marks a spike threshold, mV/ms.
    pub dvdt_threshold: f64,
    /// The voltage must pass this level (mV) ...
    pub min_peak: f64,
    /// ... within this many ms of the threshold crossing.
    pub max_rise: f64,
}

impl Default for SpikeDetector {
    fn default() -> Self {
        SpikeDetector { dvdt_threshold: 20.0, min_peak: -20.0, max_rise: 2.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvents {
    pub threshold_times: Vec<f64>,
    pub threshold_voltages: Vec<f64>,
    pub peak_times: Vec<f64>,
    pub peak_voltages: Vec<f64>,
    /// Sample index of each peak.
    #[serde(skip)]
    pub peak_indices: Vec<usize>,
}

impl SpikeEvents {
    pub fn len(&self) -> usize {
        self.threshold_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threshold_times.is_empty()
    }
}

/// Central-difference derivative (one-sided at the ends).
pub(crate) fn derivative(v: &[f64], dt: f64) -> Vec<f64> {
    let n = v.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut d = Vec::with_capacity(n);
    d.push((v[1] - v[0]) / dt);
    for i in 1..n - 1 {
        d.push((v[i + 1] - v[i - 1]) / (2.0 * dt));
    }
    d.push((v[n - 1] - v[n - 2]) / dt);
    d
}

/// Detects action potentials: an upward crossing of `dvdt_threshold` by
/// dV/dt, followed by V rising above `min_peak` within `max_rise` ms.
/// Threshold time and voltage are linearly interpolated at the crossing;
/// the peak is the first local maximum after V passes `min_peak`.
pub fn detect_spikes(trace: &VoltageTrace, detector: &SpikeDetector) -> SpikeEvents {
    let mut events = SpikeEvents::default();
    let v = &trace.voltages;
    let t = &trace.times;
    let n = v.len();
    if n < 3 {
        return events;
    }
    let dt = trace.dt();
    let dvdt = derivative(v, dt);
    let rise_steps = (detector.max_rise / dt).ceil() as usize;
    let thr = detector.dvdt_threshold;

    let mut i = 1;
    while i < n {
        if !(dvdt[i - 1] < thr && dvdt[i] >= thr) {
            i += 1;
            continue;
        }
        let limit = (i + rise_steps).min(n - 1);
        let Some(above) = (i..=limit).find(|&j| v[j] > detector.min_peak) else {
            i += 1;
            continue;
        };
        let mut peak = above;
        while peak + 1 < n && v[peak + 1] > v[peak] {
            peak += 1;
        }
        let frac = (thr - dvdt[i - 1]) / (dvdt[i] - dvdt[i - 1]);
        events.threshold_times.push(t[i - 1] + frac * (t[i] - t[i - 1]));
        events.threshold_voltages.push(v[i - 1] + frac * (v[i] - v[i - 1]));
        events.peak_times.push(t[peak]);
        events.peak_voltages.push(v[peak]);
        events.peak_indices.push(peak);
        i = peak + 1;
    }
    events
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::sim::VoltageTrace;

    pub fn flat(v: f64, total: f64, dt: f64) -> VoltageTrace {
        let n = (total / dt).round() as usize + 1;
        VoltageTrace { times: (0..n).map(|i| i as f64 * dt).collect(), voltages: vec![v; n], gating_final: [0.0; 6] }
    }

    /// Adds a triangular excursion from `base` to `peak` and back, starting
    /// at `start` ms and lasting `width` ms.
    pub fn add_triangle(trace: &mut VoltageTrace, start: f64, width: f64, base: f64, peak: f64) {
        for (t, v) in trace.times.iter().zip(trace.voltages.iter_mut()) {
            let s = (t - start) / width;
            if (0.0..=1.0).contains(&s) {
                let h = 1.0 - (2.0 * s - 1.0).abs();
                *v = base + (peak - base) * h;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::sim::{simulate_hh, HhConstants, HhParams, StimulusProtocol};
    use approx::assert_relative_eq;

    #[test]
    fn flat_trace_has_no_spikes() {
        let trace = flat(-70.0, 100.0, 0.04);
        assert!(detect_spikes(&trace, &SpikeDetector::default()).is_empty());
    }

    #[test]
    fn triangle_is_one_spike() {
        let mut trace = flat(-70.0, 50.0, 0.04);
        add_triangle(&mut trace, 20.0, 2.0, -70.0, 30.0);
        let ev = detect_spikes(&trace, &SpikeDetector::default());
        assert_eq!(ev.len(), 1);
        assert_relative_eq!(ev.peak_voltages[0], 30.0, epsilon = 1e-9);
        assert_relative_eq!(ev.peak_times[0], 21.0, epsilon = 1e-9);
        assert!(ev.threshold_times[0] < ev.peak_times[0]);
        assert_relative_eq!(ev.threshold_voltages[0], -70.0, epsilon = 1e-9);
    }

    #[test]
    fn subthreshold_bump_is_ignored() {
        let mut trace = flat(-70.0, 50.0, 0.04);
        // fast enough rise but never reaches -20 mV
        add_triangle(&mut trace, 20.0, 2.0, -70.0, -30.0);
        assert!(detect_spikes(&trace, &SpikeDetector::default()).is_empty());
    }

    #[test]
    fn matches_zero_crossing_count_on_hh() {
        let stim = StimulusProtocol::default();
        let trace = simulate_hh(&HhParams::reference(), &HhConstants::default(), &stim).unwrap();
        let ev = detect_spikes(&trace, &SpikeDetector::default());
        let crossings = trace.voltages.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
        assert_eq!(ev.len(), crossings);
        for w in ev.threshold_times.windows(2) {
            assert!(w[1] > w[0]);
        }
        for i in 0..ev.len() {
            assert!(ev.peak_times[i] > ev.threshold_times[i]);
        }
    }
}
