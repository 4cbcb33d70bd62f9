//! Bout detection: moving-average smoothing of the raw signal, its
//! first difference, and the approach criterion (the difference is
//! accelerating and the smoothed level exceeds the initial baseline).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::DofMode;

/// Window used outside DoF-staged runs.
pub const DEFAULT_WINDOW: usize = 5;
pub const BASELINE_LEN: usize = 5;

/// Moving-average window per DoF stage.
pub fn window_for_dof(mode: DofMode) -> usize {
    match mode {
        DofMode::Dof1 => 3,
        DofMode::Dof2 => 5,
        DofMode::Dof3 => 7,
        DofMode::Dof5 => 11,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoutError {
    #[error("baseline needs exactly {BASELINE_LEN} valid readings, got {0}")]
    BaselineSize(usize),
    #[error("baseline readings must be finite and non-negative")]
    BaselineValue,
    #[error("window length must be at least 2, got {0}")]
    Window(usize),
    #[error("bout filter used before a baseline was captured")]
    NotInitialized,
}

/// How the five baseline readings become the bout threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRule {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoutDecision {
    /// y'ₜ
    pub smoothed: f64,
    /// δₜ
    pub delta: f64,
    pub is_bout: bool,
}

impl BoutDecision {
    pub fn toward_source(&self) -> bool {
        self.is_bout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoutState {
    k: usize,
    buffer: VecDeque<f64>,
    baseline: Option<[f64; BASELINE_LEN]>,
    rule: BaselineRule,
    prev_smoothed: f64,
    prev_delta: f64,
}

impl BoutState {
    /// A filter with no baseline; [`BoutState::update`] fails until one is captured.
    pub fn uninitialized(k: usize) -> Result<Self, BoutError> {
        if k < 2 {
            return Err(BoutError::Window(k));
        }
        Ok(Self {
            k,
            buffer: VecDeque::with_capacity(k),
            baseline: None,
            rule: BaselineRule::Max,
            prev_smoothed: 0.0,
            prev_delta: 0.0,
        })
    }

    /// Captures the baseline; the filter starts with an empty window,
    /// δ₋₁ = 0 and y'₋₁ = mean of the baseline.
    pub fn capture_baseline(readings: &[f64], k: usize, rule: BaselineRule) -> Result<Self, BoutError> {
        let baseline: [f64; BASELINE_LEN] = readings
            .try_into()
            .map_err(|_| BoutError::BaselineSize(readings.len()))?;
        if baseline.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(BoutError::BaselineValue);
        }
        let mut state = Self::uninitialized(k)?;
        state.rule = rule;
        state.prev_smoothed = baseline.iter().sum::<f64>() / BASELINE_LEN as f64;
        state.baseline = Some(baseline);
        Ok(state)
    }

    pub fn window(&self) -> usize {
        self.k
    }

    pub fn baseline(&self) -> Option<&[f64; BASELINE_LEN]> {
        self.baseline.as_ref()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.baseline.map(|b| match self.rule {
            BaselineRule::Max => b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            BaselineRule::Mean => b.iter().sum::<f64>() / BASELINE_LEN as f64,
        })
    }

    pub fn prev_delta(&self) -> f64 {
        self.prev_delta
    }

    pub fn prev_smoothed(&self) -> f64 {
        self.prev_smoothed
    }

    /// Number of raw readings currently in the window.
    pub fn filled(&self) -> usize {
        self.buffer.len()
    }

    /// Re-targets the window (e.g. on a DoF stage change), keeping the
    /// newest readings that still fit.
    pub fn set_window(&mut self, k: usize) -> Result<(), BoutError> {
        if k < 2 {
            return Err(BoutError::Window(k));
        }
        self.k = k;
        while self.buffer.len() > k {
            self.buffer.pop_front();
        }
        Ok(())
    }

    pub fn update(&mut self, y: f64) -> Result<BoutDecision, BoutError> {
        let threshold = self.threshold().ok_or(BoutError::NotInitialized)?;
        if self.buffer.len() == self.k {
            self.buffer.pop_front();
        }
        self.buffer.push_back(y);
        let smoothed = self.buffer.iter().sum::<f64>() / self.buffer.len() as f64;
        let delta = smoothed - self.prev_smoothed;
        let is_bout = delta > self.prev_delta && smoothed > threshold;
        self.prev_smoothed = smoothed;
        self.prev_delta = delta;
        Ok(BoutDecision {
            smoothed,
            delta,
            is_bout,
        })
    }
}
