//! Run metrics, moving averages and percentile bands across runs.

use serde::{Deserialize, Serialize};

pub const MOVING_WINDOW: usize = 100;

/// Trailing mean over the last `window` samples (fewer at the start),
/// summed directly so it is reproducible from the raw series.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            series[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

/// Mean of the first (or last) `fraction` of a series, at least one sample.
pub fn window_mean(series: &[f64], fraction: f64, last: bool) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let n = ((series.len() as f64 * fraction).round() as usize).clamp(1, series.len());
    let w = if last {
        &series[series.len() - n..]
    } else {
        &series[..n]
    };
    w.iter().sum::<f64>() / n as f64
}

/// Median of a window of a series (same window rule as [`window_mean`]).
pub fn window_median(series: &[f64], fraction: f64, last: bool) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let n = ((series.len() as f64 * fraction).round() as usize).clamp(1, series.len());
    let w = if last {
        &series[series.len() - n..]
    } else {
        &series[..n]
    };
    percentile(w, 50.0)
}

/// Percentile with linear interpolation between closest ranks:
/// rank `h = p/100 (n - 1)`, value `x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])`
/// on the sorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub const PERCENTILE_RULE: &str = "linear interpolation between closest ranks, h = p/100*(n-1)";

/// One parameter update event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub step: usize,
    pub skipped: bool,
    pub reason: Option<String>,
    /// `||d_i||` per agent (the applied step divided by `alpha`).
    pub direction_norms: Vec<f64>,
    /// Regularizer per agent; empty for first-order updates.
    pub sigmas: Vec<f64>,
    pub mode: String,
    /// Positive definiteness checks, when enabled: local kernels, `I + C`,
    /// the stacked system.
    pub certificates: Option<[bool; 3]>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub policy: f64,
    pub q_eval: f64,
    pub sensitivity: f64,
    pub consensus: f64,
    pub update: f64,
}

/// Everything recorded during one training run.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub td_error: Vec<f64>,
    pub stage_cost: Vec<f64>,
    pub updates: Vec<UpdateEvent>,
    /// Wall-clock seconds per phase, summed over the run.
    pub times: PhaseTimes,
    /// `sum_t gamma^t L_t` over the run.
    pub discounted_return: f64,
}

impl RunMetrics {
    pub fn td_moving(&self) -> Vec<f64> {
        let abs: Vec<f64> = self.td_error.iter().map(|d| d.abs()).collect();
        moving_average(&abs, MOVING_WINDOW)
    }

    pub fn cost_moving(&self) -> Vec<f64> {
        moving_average(&self.stage_cost, MOVING_WINDOW)
    }

    pub fn skipped_updates(&self) -> usize {
        self.updates.iter().filter(|u| u.skipped).count()
    }
}

/// Per-step percentile bands across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Bands {
    pub p32: Vec<f64>,
    pub median: Vec<f64>,
    pub p68: Vec<f64>,
}

/// Bands over equally long series; longer series are truncated to the
/// shortest.
pub fn bands(series: &[Vec<f64>]) -> Bands {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let mut b = Bands {
        p32: Vec::with_capacity(len),
        median: Vec::with_capacity(len),
        p68: Vec::with_capacity(len),
    };
    let mut column = vec![0.0; series.len()];
    for t in 0..len {
        for (c, s) in column.iter_mut().zip(series) {
            *c = s[t];
        }
        b.p32.push(percentile(&column, 32.0));
        b.median.push(percentile(&column, 50.0));
        b.p68.push(percentile(&column, 68.0));
    }
    b
}
