//! One-Euro low-pass filtering for scalar and multi-channel streams.
//!
//! Each step smooths the derivative with a fixed cutoff, raises the value
//! cutoff with the smoothed speed (`fc = min_cutoff + beta·|dx̂|`), and
//! exponentially blends toward the new sample. Time steps come from the
//! sample timestamps, so irregular frame spacing is handled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("time did not advance ({last} -> {t})")]
    NonMonotonicTime { last: f64, t: f64 },
    #[error("expected {expected} channels, got {got}")]
    ChannelCountMismatch { expected: usize, got: usize },
    #[error("invalid filter parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneEuroParams {
    /// Hz.
    pub min_cutoff: f64,
    pub beta: f64,
    /// Hz.
    pub d_cutoff: f64,
}

impl Default for OneEuroParams {
    fn default() -> Self {
        Self { min_cutoff: 1.0, beta: 0.007, d_cutoff: 1.0 }
    }
}

impl OneEuroParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.min_cutoff > 0.0 && self.min_cutoff.is_finite()) {
            return Err(FilterError::InvalidParams("min_cutoff must be positive"));
        }
        if !(self.d_cutoff > 0.0 && self.d_cutoff.is_finite()) {
            return Err(FilterError::InvalidParams("d_cutoff must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FilterError::InvalidParams("beta must be nonnegative"));
        }
        Ok(())
    }
}

/// Smoothing factor of a first-order low-pass with cutoff `cutoff` Hz over `dt` s.
#[inline]
pub fn smoothing_factor(dt: f64, cutoff: f64) -> f64 {
    let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff);
    1.0 / (1.0 + tau / dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneEuroState {
    params: OneEuroParams,
    last_value: f64,
    last_derivative: f64,
    last_timestamp: f64,
    initialized: bool,
}

impl OneEuroState {
    pub fn new(params: OneEuroParams) -> Result<Self, FilterError> {
        params.validate()?;
        Ok(Self { params, last_value: 0.0, last_derivative: 0.0, last_timestamp: 0.0, initialized: false })
    }

    pub fn params(&self) -> &OneEuroParams {
        &self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn last_value(&self) -> f64 {
        self.last_value
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.initialized.then_some(self.last_timestamp)
    }

    /// Filters one sample. The first sample passes through unchanged.
    pub fn step(&mut self, x: f64, t: f64) -> Result<f64, FilterError> {
        if !self.initialized {
            self.last_value = x;
            self.last_derivative = 0.0;
            self.last_timestamp = t;
            self.initialized = true;
            return Ok(x);
        }
        let dt = t - self.last_timestamp;
        if dt.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FilterError::NonMonotonicTime { last: self.last_timestamp, t });
        }
        let p = &self.params;
        let raw_derivative = (x - self.last_value) / dt;
        let a_d = smoothing_factor(dt, p.d_cutoff);
        let derivative = self.last_derivative + a_d * (raw_derivative - self.last_derivative);
        let cutoff = p.min_cutoff + p.beta * derivative.abs();
        let a = smoothing_factor(dt, cutoff);
        // Increment form: a constant input stays bit-exact.
        let value = self.last_value + a * (x - self.last_value);
        self.last_value = value;
        self.last_derivative = derivative;
        self.last_timestamp = t;
        Ok(value)
    }
}

/// Functional form of [`OneEuroState::step`].
pub fn one_euro_step(state: &OneEuroState, x: f64, t: f64) -> Result<(OneEuroState, f64), FilterError> {
    let mut next = *state;
    let y = next.step(x, t)?;
    Ok((next, y))
}

/// Independent one-Euro filters over a fixed number of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OneEuroBank {
    states: Vec<OneEuroState>,
}

impl OneEuroBank {
    pub fn new(channels: usize, params: OneEuroParams) -> Result<Self, FilterError> {
        Ok(Self { states: vec![OneEuroState::new(params)?; channels] })
    }

    pub fn channels(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[OneEuroState] {
        &self.states
    }

    /// Filters one multi-channel sample. On error no channel is advanced.
    pub fn filter(&mut self, xs: &[f64], t: f64) -> Result<Vec<f64>, FilterError> {
        let mut out = vec![0.0; xs.len()];
        self.filter_into(xs, t, &mut out)?;
        Ok(out)
    }

    pub fn filter_into(&mut self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<(), FilterError> {
        if xs.len() != self.states.len() || out.len() != xs.len() {
            return Err(FilterError::ChannelCountMismatch { expected: self.states.len(), got: xs.len() });
        }
        if let Some(last) = self.states.first().and_then(OneEuroState::last_timestamp) {
            if t.partial_cmp(&last) != Some(std::cmp::Ordering::Greater) {
                return Err(FilterError::NonMonotonicTime { last, t });
            }
        }
        for ((state, &x), y) in self.states.iter_mut().zip(xs).zip(out.iter_mut()) {
            *y = state.step(x, t)?;
        }
        Ok(())
    }
}

/// Functional form of [`OneEuroBank::filter`].
pub fn filter_vector_sequence(
    states: &OneEuroBank,
    xs: &[f64],
    t: f64,
) -> Result<(OneEuroBank, Vec<f64>), FilterError> {
    let mut next = states.clone();
    let y = next.filter(xs, t)?;
    Ok((next, y))
}
