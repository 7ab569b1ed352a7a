//! Electrophysiology statistics of a stimulated voltage trace.
//!
//! Definitions (spikes are those whose threshold falls inside the stimulus
//! window):
//!
//! | name | value | needs |
//! |------|-------|-------|
//! | APT, APA, APW, AHP | threshold V, peak − threshold, width at half amplitude, threshold − post-spike minimum, of the 1st spike | 1 spike |
//! | APT_3 … AHP_3 | same for the 3rd spike | 3 spikes |
//! | latency | 1st threshold time − onset | 1 spike |
//! | APC | spike count | – |
//! | APC_T1_8, APC_T1_4, APC_T1_2, APC_T2_2 | counts in the first 1/8, 1/4, 1/2 and the second 1/2 of the window | – |
//! | APA_adapt | (APA_last − APA_first) / APA_first | 2 spikes |
//! | mean_APA_adapt | mean of (APA_{i+1} − APA_i) / APA_i | 2 spikes |
//! | CV_APA | std / mean of APA (population std) | 2 spikes |
//! | ISI_adapt | (ISI_last − ISI_first) / ISI_first | 3 spikes |
//! | CV_ISI | std / mean of ISIs | 3 spikes |
//! | mean_Vm, var_Vm | over the stimulus window | – |
//! | mean_Vrest, std_Vrest | over the pre-stimulus window | – |
//!
//! APW is measured between linearly interpolated crossings of the level
//! halfway between threshold and peak. The AHP minimum is searched from the
//! peak up to the next spike threshold or 50 ms, whichever comes first.

use serde::{Deserialize, Serialize};

use super::spikes::{detect_spikes, SpikeDetector, SpikeEvents};
use super::{FeatureSet, FeatureVector};
use crate::sim::{StimulusProtocol, VoltageTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub detector: SpikeDetector,
    /// Longest AHP search window after a peak, ms.
    pub ahp_window: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { detector: SpikeDetector::default(), ahp_window: 50.0 }
    }
}

struct Spike {
    threshold_time: f64,
    threshold_v: f64,
    peak_v: f64,
    width: f64,
    ahp: f64,
}

/// Computes the statistics named in `set`, in its order.
pub fn extract_features(
    trace: &VoltageTrace,
    stim: &StimulusProtocol,
    set: &FeatureSet,
    config: &FeatureConfig,
) -> FeatureVector {
    let events = detect_spikes(trace, &config.detector);
    let spikes = window_spikes(trace, stim, &events, config);
    let values = set.names().iter().map(|name| compute(name, trace, stim, &spikes)).collect();
    FeatureVector::from_values(set.names().to_vec(), values)
}

fn window_spikes(trace: &VoltageTrace, stim: &StimulusProtocol, ev: &SpikeEvents, config: &FeatureConfig) -> Vec<Spike> {
    let mut out = Vec::new();
    for i in 0..ev.len() {
        let rel = ev.threshold_times[i] - stim.onset;
        if rel < 0.0 || rel >= stim.duration {
            continue;
        }
        let peak_idx = ev.peak_indices[i];
        let ahp_end_time = ev
            .threshold_times
            .get(i + 1)
            .copied()
            .unwrap_or(f64::INFINITY)
            .min(ev.peak_times[i] + config.ahp_window);
        let ahp = trace.times[peak_idx..]
            .iter()
            .zip(&trace.voltages[peak_idx..])
            .take_while(|(t, _)| **t <= ahp_end_time)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        out.push(Spike {
            threshold_time: ev.threshold_times[i],
            threshold_v: ev.threshold_voltages[i],
            peak_v: ev.peak_voltages[i],
            width: half_width(trace, peak_idx, 0.5 * (ev.threshold_voltages[i] + ev.peak_voltages[i])),
            ahp: ev.threshold_voltages[i] - ahp,
        });
    }
    out
}

/// Time between the interpolated up- and down-crossings of `level` around
/// the peak; NaN if either side never crosses.
fn half_width(trace: &VoltageTrace, peak: usize, level: f64) -> f64 {
    let (t, v) = (&trace.times, &trace.voltages);
    let interp = |a: usize, b: usize| t[a] + (level - v[a]) / (v[b] - v[a]) * (t[b] - t[a]);
    let Some(up) = (1..=peak).rev().find(|&j| v[j - 1] < level && v[j] >= level) else {
        return f64::NAN;
    };
    let Some(down) = (peak..v.len() - 1).find(|&j| v[j] >= level && v[j + 1] < level) else {
        return f64::NAN;
    };
    interp(down, down + 1) - interp(up - 1, up)
}

fn index_at(trace: &VoltageTrace, time: f64) -> usize {
    let dt = trace.dt();
    if dt <= 0.0 {
        return 0;
    }
    (((time - trace.times[0]) / dt).round().max(0.0) as usize).min(trace.voltages.len())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn cv(xs: &[f64]) -> f64 {
    let (m, v) = mean_var(xs);
    v.sqrt() / m
}

fn count_in(spikes: &[Spike], stim: &StimulusProtocol, from: f64, to: f64) -> f64 {
    spikes
        .iter()
        .filter(|s| {
            let rel = (s.threshold_time - stim.onset) / stim.duration;
            rel >= from && rel < to
        })
        .count() as f64
}

fn compute(name: &str, trace: &VoltageTrace, stim: &StimulusProtocol, spikes: &[Spike]) -> f64 {
    let nth = |k: usize| spikes.get(k);
    let amps: Vec<f64> = spikes.iter().map(|s| s.peak_v - s.threshold_v).collect();
    let isis: Vec<f64> = spikes.windows(2).map(|w| w[1].threshold_time - w[0].threshold_time).collect();
    let stim_window = || {
        let a = index_at(trace, stim.onset);
        let b = index_at(trace, stim.offset());
        &trace.voltages[a..b]
    };
    let rest_window = || &trace.voltages[..index_at(trace, stim.onset)];
    let nan = f64::NAN;
    match name {
        "APT" => nth(0).map_or(nan, |s| s.threshold_v),
        "APA" => nth(0).map_or(nan, |s| s.peak_v - s.threshold_v),
        "APW" => nth(0).map_or(nan, |s| s.width),
        "AHP" => nth(0).map_or(nan, |s| s.ahp),
        "APT_3" => nth(2).map_or(nan, |s| s.threshold_v),
        "APA_3" => nth(2).map_or(nan, |s| s.peak_v - s.threshold_v),
        "APW_3" => nth(2).map_or(nan, |s| s.width),
        "AHP_3" => nth(2).map_or(nan, |s| s.ahp),
        "latency" => nth(0).map_or(nan, |s| s.threshold_time - stim.onset),
        "APC" => spikes.len() as f64,
        "APC_T1_8" => count_in(spikes, stim, 0.0, 0.125),
        "APC_T1_4" => count_in(spikes, stim, 0.0, 0.25),
        "APC_T1_2" => count_in(spikes, stim, 0.0, 0.5),
        "APC_T2_2" => count_in(spikes, stim, 0.5, 1.0),
        "APA_adapt" if amps.len() >= 2 => (amps[amps.len() - 1] - amps[0]) / amps[0],
        "mean_APA_adapt" if amps.len() >= 2 => {
            amps.windows(2).map(|w| (w[1] - w[0]) / w[0]).sum::<f64>() / (amps.len() - 1) as f64
        }
        "CV_APA" if amps.len() >= 2 => cv(&amps),
        "ISI_adapt" if isis.len() >= 2 => (isis[isis.len() - 1] - isis[0]) / isis[0],
        "CV_ISI" if isis.len() >= 2 => cv(&isis),
        "mean_Vm" => mean_var(stim_window()).0,
        "var_Vm" => mean_var(stim_window()).1,
        "mean_Vrest" => mean_var(rest_window()).0,
        "std_Vrest" => mean_var(rest_window()).1.sqrt(),
        _ => nan,
    }
}
