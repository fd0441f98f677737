//! Conditional noise prediction `eps_hat(x_t; y, t)`.
//!
//! Every gradient rule consumes predictions under exactly four text
//! conditions, addressed by [`Slot`]. [`AnalyticOracle`] answers them in
//! closed form for diagonal Gaussian mixtures; [`remote::RemoteOracle`]
//! forwards them over the line-delimited JSON protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::Timestep;
use crate::error::{Error, Result};
use crate::rules::GuidanceTerms;
use crate::vector::check_dim;

pub mod mixture;
pub mod remote;

pub use mixture::{
    log_density, marginal_at, AnalyticOracle, GaussianComponent, GaussianMixtureScene,
};

/// Default negative fragment appended to the target prompt to form the
/// target-negative prompt.
pub const DEFAULT_NEGATIVE_FRAGMENT: &str = "oversaturated, smooth, pixelated, cartoon, foggy, hazy, blurry, bad structure, noisy, malformed";

/// Separator between the target prompt and the negative fragment in the
/// target-negative prompt.
pub const TNP_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "null")]
    Null,
    #[serde(rename = "gnp")]
    GeneralNegative,
    #[serde(rename = "tnp")]
    TargetNegative,
}

impl Slot {
    pub const ALL: [Slot; 4] = [
        Slot::Target,
        Slot::Null,
        Slot::GeneralNegative,
        Slot::TargetNegative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Target => "target",
            Slot::Null => "null",
            Slot::GeneralNegative => "gnp",
            Slot::TargetNegative => "tnp",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.as_str() == s)
            .ok_or_else(|| Error::Condition(s.to_string()))
    }
}

/// A text-conditioning slot together with the prompt text a remote model
/// would see. Analytic oracles only look at the slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub slot: Slot,
    pub text: Option<String>,
}

/// Target prompt and negative fragment; derives the text of every slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub target: String,
    #[serde(default = "default_fragment")]
    pub negative_fragment: String,
}

fn default_fragment() -> String {
    DEFAULT_NEGATIVE_FRAGMENT.to_string()
}

impl PromptSet {
    pub fn new(target: impl Into<String>) -> Self {
        PromptSet {
            target: target.into(),
            negative_fragment: default_fragment(),
        }
    }

    pub fn text(&self, slot: Slot) -> String {
        match slot {
            Slot::Target => self.target.clone(),
            Slot::Null => String::new(),
            Slot::GeneralNegative => self.negative_fragment.clone(),
            Slot::TargetNegative => {
                format!("{}{}{}", self.target, TNP_SEPARATOR, self.negative_fragment)
            }
        }
    }

    pub fn condition(&self, slot: Slot) -> Condition {
        Condition {
            slot,
            text: Some(self.text(slot)),
        }
    }

    /// Checks that a condition's text is the one this prompt set assigns to
    /// its slot. A condition without text always passes.
    pub fn check(&self, condition: &Condition) -> Result<()> {
        match &condition.text {
            Some(text) if *text != self.text(condition.slot) => Err(Error::Config(format!(
                "slot {} expects text {:?}, got {:?}",
                condition.slot,
                self.text(condition.slot),
                text
            ))),
            _ => Ok(()),
        }
    }
}

pub trait ScoreOracle {
    /// State dimension the oracle serves, when it is fixed.
    fn dim(&self) -> Option<usize>;

    fn predict_noise(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>>;

    /// Predictions for several slots at one `(x_t, t)`. Either every slot
    /// succeeds or the whole batch fails.
    fn predict_slots(&self, x_t: &[f64], t: Timestep, slots: &[Slot]) -> Result<Vec<Vec<f64>>> {
        slots
            .iter()
            .map(|&slot| self.predict_noise(x_t, t, slot))
            .collect()
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for &O {
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }

    fn predict_noise(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        (**self).predict_noise(x_t, t, slot)
    }

    fn predict_slots(&self, x_t: &[f64], t: Timestep, slots: &[Slot]) -> Result<Vec<Vec<f64>>> {
        (**self).predict_slots(x_t, t, slots)
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for Box<O> {
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }

    fn predict_noise(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        (**self).predict_noise(x_t, t, slot)
    }

    fn predict_slots(&self, x_t: &[f64], t: Timestep, slots: &[Slot]) -> Result<Vec<Vec<f64>>> {
        (**self).predict_slots(x_t, t, slots)
    }
}

/// Queries all four slots once at `(x_t, t)` and bundles them with the
/// injected noise `eps`.
pub fn gather_terms<O: ScoreOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: Timestep,
    eps: &[f64],
) -> Result<GuidanceTerms> {
    check_dim(x_t.len(), eps)?;
    let preds = oracle.predict_slots(x_t, t, &Slot::ALL)?;
    let mut preds = preds.into_iter();
    let mut next = |slot: Slot| -> Result<Vec<f64>> {
        let p = preds.next().ok_or_else(|| Error::Oracle {
            slot,
            message: "missing prediction".into(),
        })?;
        if p.len() != x_t.len() {
            return Err(Error::Oracle {
                slot,
                message: format!("prediction has dim {}, expected {}", p.len(), x_t.len()),
            });
        }
        Ok(p)
    };
    Ok(GuidanceTerms {
        eps_tgt: next(Slot::Target)?,
        eps_null: next(Slot::Null)?,
        eps_gnp: next(Slot::GeneralNegative)?,
        eps_tnp: next(Slot::TargetNegative)?,
        eps: eps.to_vec(),
    })
}
