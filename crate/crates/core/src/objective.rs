//! Class-reweighted binary cross-entropy plus the beamformer regularizer.

use serde::{Deserialize, Serialize};

use crate::beamformer::{regularizer_batch, BatchWeights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Genuine,
    Replay,
}

impl Label {
    /// Binary target: genuine = 0, replay = 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Genuine => 0.0,
            Label::Replay => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Replay => "replay",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "replay" => Ok(Label::Replay),
            _ => Err(Error::Config(format!(
                "label must be genuine or replay, got {s:?}"
            ))),
        }
    }
}

/// Per-class loss weights, normalized to sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub genuine: f64,
    pub replay: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights {
        genuine: 1.0,
        replay: 1.0,
    };

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Genuine => self.genuine,
            Label::Replay => self.replay,
        }
    }
}

/// Normalized reciprocal class frequencies.
pub fn class_weights(n_genuine: usize, n_replay: usize) -> Result<ClassWeights> {
    if n_genuine == 0 || n_replay == 0 {
        return Err(Error::Data(format!(
            "class weights need both classes (genuine = {n_genuine}, replay = {n_replay})"
        )));
    }
    let (inv_g, inv_r) = (1.0 / n_genuine as f64, 1.0 / n_replay as f64);
    let total = inv_g + inv_r;
    Ok(ClassWeights {
        genuine: inv_g / total,
        replay: inv_r / total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda: 1e-5,
            gamma: 1e-5,
        }
    }
}

impl RegularizerConfig {
    pub const OFF: RegularizerConfig = RegularizerConfig {
        lambda: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.lambda.is_finite()
            && self.gamma.is_finite())
        {
            return Err(Error::Config(format!(
                "regularizer weights must be finite and non-negative, got lambda {} gamma {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy of one logit, evaluated in logit space.
pub fn weighted_bce(score: f64, label: Label, weights: &ClassWeights) -> f64 {
    let y = label.target();
    weights.for_label(label) * (softplus(score) - y * score)
}

/// Derivative of [`weighted_bce`] with respect to the logit.
pub fn weighted_bce_grad(score: f64, label: Label, weights: &ClassWeights) -> f64 {
    weights.for_label(label) * (sigmoid(score) - label.target())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub regularizer: f64,
}

/// Mean weighted BCE over the batch plus the beamformer regularizer.
pub fn total_loss(
    scores: &[f64],
    labels: &[Label],
    weights: &ClassWeights,
    beam_weights: &BatchWeights,
    reg: &RegularizerConfig,
) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(scores, labels, weights, beam_weights, reg)?.0)
}

/// As [`total_loss`], also returning `d/dscores` and `d/dweights`.
pub fn total_loss_with_grad(
    scores: &[f64],
    labels: &[Label],
    weights: &ClassWeights,
    beam_weights: &BatchWeights,
    reg: &RegularizerConfig,
) -> Result<(LossBreakdown, Vec<f64>, BatchWeights)> {
    if scores.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("loss", "labels", scores.len(), labels.len()));
    }
    if let BatchWeights::PerItem(t) = beam_weights {
        if t.dim(0) != scores.len() {
            return Err(Error::shape(
                "loss",
                "beamformer weight batch",
                scores.len(),
                t.dim(0),
            ));
        }
    }
    let inv_b = 1.0 / scores.len() as f64;
    let mut ce = 0.0;
    let mut dscores = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::NonFinite("classifier score".into()));
        }
        ce += weighted_bce(s, l, weights) * inv_b;
        dscores.push(weighted_bce_grad(s, l, weights) * inv_b);
    }
    let (reg_loss, dw) = regularizer_batch(beam_weights, reg.lambda, reg.gamma)?;
    Ok((
        LossBreakdown {
            total: ce + reg_loss,
            cross_entropy: ce,
            regularizer: reg_loss,
        },
        dscores,
        dw,
    ))
}
