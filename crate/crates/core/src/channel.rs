//! Lossy single-hop radio link.
//!
//! Each transmission picks a link state (good or bad) from a two-state
//! mixture; the state sets the receiver's LQI annotation. Loss and CRC
//! corruption are Bernoulli draws at the link's configured rates. Links
//! that spend more time in the bad state therefore show lower and more
//! variable LQI, which is what lets LQI rank links by expected delivery.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LQI_MIN: f64 = 50.0;
pub const LQI_MAX: f64 = 110.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("{name} = {value} outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("{name} = {value} outside the LQI scale [{LQI_MIN}, {LQI_MAX}]")]
    LqiScale { name: &'static str, value: f64 },
    #[error("lqi_sigma must be nonnegative")]
    Sigma,
    #[error("empty LQI window")]
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Marginal probability that a frame never arrives.
    pub loss_prob: f64,
    /// Probability that an arriving frame fails its CRC.
    pub corrupt_prob: f64,
    /// Probability that a delivered frame is received twice.
    pub duplicate_prob: f64,
    pub lqi_mean_good: f64,
    pub lqi_mean_bad: f64,
    pub lqi_sigma: f64,
    /// Long-run fraction of transmissions in the good state.
    pub quality_mixture: f64,
    /// Probability of staying in the previous state; zero draws every
    /// transmission independently.
    pub state_persistence: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            corrupt_prob: 0.0,
            duplicate_prob: 0.0,
            lqi_mean_good: 102.0,
            lqi_mean_bad: 68.0,
            lqi_sigma: 3.0,
            quality_mixture: 1.0,
            state_persistence: 0.0,
        }
    }
}

impl LinkModel {
    pub fn with_loss(loss_prob: f64) -> Self {
        Self {
            loss_prob,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for (name, value) in [
            ("loss_prob", self.loss_prob),
            ("corrupt_prob", self.corrupt_prob),
            ("duplicate_prob", self.duplicate_prob),
            ("quality_mixture", self.quality_mixture),
            ("state_persistence", self.state_persistence),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ChannelError::Probability { name, value });
            }
        }
        for (name, value) in [
            ("lqi_mean_good", self.lqi_mean_good),
            ("lqi_mean_bad", self.lqi_mean_bad),
        ] {
            if !(LQI_MIN..=LQI_MAX).contains(&value) {
                return Err(ChannelError::LqiScale { name, value });
            }
        }
        if !(self.lqi_sigma >= 0.0) {
            return Err(ChannelError::Sigma);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    Lost,
    Corrupted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub outcome: Outcome,
    /// Receiver LQI; absent for lost frames.
    pub lqi: Option<f64>,
    /// The frame arrived twice.
    pub duplicated: bool,
}

impl Delivery {
    pub fn is_intact(&self) -> bool {
        self.outcome == Outcome::Delivered
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkState {
    Good,
    Bad,
}

/// A link model plus the state carried between transmissions.
#[derive(Debug, Clone)]
pub struct Link {
    model: LinkModel,
    lqi_good: Normal<f64>,
    lqi_bad: Normal<f64>,
    state: Option<LinkState>,
}

impl Link {
    pub fn new(model: LinkModel) -> Result<Self, ChannelError> {
        model.validate()?;
        let lqi_good = Normal::new(model.lqi_mean_good, model.lqi_sigma).map_err(|_| ChannelError::Sigma)?;
        let lqi_bad = Normal::new(model.lqi_mean_bad, model.lqi_sigma).map_err(|_| ChannelError::Sigma)?;
        Ok(Self {
            model,
            lqi_good,
            lqi_bad,
            state: None,
        })
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    pub fn transmit<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Delivery {
        let keep = self.model.state_persistence > 0.0
            && self.state.is_some()
            && rng.random::<f64>() < self.model.state_persistence;
        let state = match (keep, self.state) {
            (true, Some(s)) => s,
            _ => {
                if rng.random::<f64>() < self.model.quality_mixture {
                    LinkState::Good
                } else {
                    LinkState::Bad
                }
            }
        };
        self.state = Some(state);

        let dist = match state {
            LinkState::Good => &self.lqi_good,
            LinkState::Bad => &self.lqi_bad,
        };
        if rng.random::<f64>() < self.model.loss_prob {
            return Delivery {
                outcome: Outcome::Lost,
                lqi: None,
                duplicated: false,
            };
        }
        let lqi = dist.sample(rng).clamp(LQI_MIN, LQI_MAX);
        let outcome = if rng.random::<f64>() < self.model.corrupt_prob {
            Outcome::Corrupted
        } else {
            Outcome::Delivered
        };
        let duplicated = outcome == Outcome::Delivered && rng.random::<f64>() < self.model.duplicate_prob;
        Delivery {
            outcome,
            lqi: Some(lqi),
            duplicated,
        }
    }
}

/// One transmission over a memoryless link.
pub fn transmit<R: Rng + ?Sized>(link: &LinkModel, rng: &mut R) -> Result<Delivery, ChannelError> {
    let mut link = Link::new(LinkModel {
        state_persistence: 0.0,
        ..link.clone()
    })?;
    Ok(link.transmit(rng))
}

/// Logistic midpoint and width of the LQI → delivery mapping, fitted
/// against simulated reference links (see the channel tests).
const PRR_LQI_MIDPOINT: f64 = 81.0;
const PRR_LQI_WIDTH: f64 = 4.5;

/// Estimated packet reception ratio from a window of recent LQI values.
pub fn prr_from_lqi(lqi_window: &[f64]) -> Result<f64, ChannelError> {
    if lqi_window.is_empty() {
        return Err(ChannelError::EmptyWindow);
    }
    let mean = lqi_window.iter().sum::<f64>() / lqi_window.len() as f64;
    Ok(1.0 / (1.0 + (-(mean - PRR_LQI_MIDPOINT) / PRR_LQI_WIDTH).exp()))
}
