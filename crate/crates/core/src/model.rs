//! The end-to-end detector: STFT stack → beamformer → phase features →
//! CRNN logit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};
use crate::autodiff::Mode;
use crate::beamformer::{
    beamform_batch, beamform_batch_backward, BatchWeights, Beamformer, BeamformerConfig,
    BeamformerMode, BeamformerSaved,
};
use crate::classifier::{Classifier, ClassifierConfig, ClassifierSaved};
use crate::dsp::{polar_features, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::objective::{
    total_loss_with_grad, ClassWeights, Label, LossBreakdown, RegularizerConfig,
};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub beamformer: BeamformerConfig,
    pub classifier: ClassifierConfig,
}

impl ModelConfig {
    /// Full-size architecture: n_f = 64, filters {32, 64, 128}, two
    /// bidirectional GRU layers of 128 units.
    pub fn full(n_channels: usize, sample_rate: u32, mode: BeamformerMode) -> Result<Self> {
        let cfg = ModelConfig {
            stft: StftConfig::for_sample_rate(sample_rate)?,
            beamformer: BeamformerConfig::new(mode, n_channels),
            classifier: ClassifierConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same topology with narrow layers, sized for single-core CPU runs.
    pub fn compact(n_channels: usize, sample_rate: u32, mode: BeamformerMode) -> Result<Self> {
        let cfg = ModelConfig {
            stft: StftConfig::for_sample_rate(sample_rate)?,
            beamformer: BeamformerConfig {
                mode,
                n_channels,
                n_f: 4,
            },
            classifier: ClassifierConfig {
                conv_filters: vec![4, 8, 16],
                kernel: [1, 3],
                pool_rates: vec![8, 8, 4],
                gru_hidden: 16,
                gru_layers: 2,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A few hundred parameters over 17 frequency bins, for gradient checks.
    pub fn tiny(n_channels: usize, mode: BeamformerMode) -> Result<Self> {
        let cfg = ModelConfig {
            stft: StftConfig::new(1000, 30.0)?,
            beamformer: BeamformerConfig {
                mode,
                n_channels,
                n_f: 2,
            },
            classifier: ClassifierConfig {
                conv_filters: vec![2, 3, 2],
                kernel: [1, 3],
                pool_rates: vec![2, 2, 2],
                gru_hidden: 3,
                gru_layers: 2,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.beamformer.validate()?;
        self.classifier.validate(self.stft.n_bins())
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }
}

/// Converts `N` channel waveforms per clip into a `[B, 2N, T, F]` batch.
pub fn spectrogram_batch(clips: &[&[Vec<f64>]], stft: &Stft) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let n = first.len();
    let len = first.first().map(Vec::len).unwrap_or(0);
    let cfg = stft.config();
    let window = cfg.window_samples();
    if len < window {
        return Err(Error::ClipTooShort {
            len,
            needed: window,
        });
    }
    let (t_n, f_n) = (cfg.n_frames(len), cfg.n_bins());
    let plane = t_n * f_n;
    let mut x = Tensor::zeros(&[clips.len(), 2 * n, t_n, f_n]);
    for (b, clip) in clips.iter().enumerate() {
        if clip.len() != n {
            return Err(Error::shape(
                "batch",
                format!("channels of item {b}"),
                n,
                clip.len(),
            ));
        }
        let item = &mut x.data_mut()[b * 2 * n * plane..(b + 1) * 2 * n * plane];
        let (re_all, im_all) = item.split_at_mut(n * plane);
        for (c, wave) in clip.iter().enumerate() {
            if wave.len() != len {
                return Err(Error::shape(
                    "batch",
                    format!("samples of item {b} channel {c}"),
                    len,
                    wave.len(),
                ));
            }
            stft.process_into(
                wave,
                &mut re_all[c * plane..(c + 1) * plane],
                &mut im_all[c * plane..(c + 1) * plane],
            )?;
        }
    }
    Ok(x)
}

/// `[B, 2, T, F]` complex planes → `[B, 3, T, F]` magnitude, sin, cos.
pub fn features_batch(y: &Tensor) -> Tensor {
    let (b_n, t_n, f_n) = (y.dim(0), y.dim(2), y.dim(3));
    let plane = t_n * f_n;
    let mut out = Tensor::zeros(&[b_n, 3, t_n, f_n]);
    for b in 0..b_n {
        let src = &y.data()[b * 2 * plane..(b + 1) * 2 * plane];
        let dst = &mut out.data_mut()[b * 3 * plane..(b + 1) * 3 * plane];
        for i in 0..plane {
            let (m, s, c) = polar_features(src[i], src[plane + i]);
            dst[i] = m;
            dst[plane + i] = s;
            dst[2 * plane + i] = c;
        }
    }
    out
}

/// Chain rule through [`features_batch`]; zero gradient at the origin.
pub fn features_batch_backward(y: &Tensor, dfeat: &Tensor) -> Tensor {
    let (b_n, t_n, f_n) = (y.dim(0), y.dim(2), y.dim(3));
    let plane = t_n * f_n;
    let mut dy = Tensor::zeros(y.shape());
    for b in 0..b_n {
        let src = &y.data()[b * 2 * plane..(b + 1) * 2 * plane];
        let g = &dfeat.data()[b * 3 * plane..(b + 1) * 3 * plane];
        let dst = &mut dy.data_mut()[b * 2 * plane..(b + 1) * 2 * plane];
        for i in 0..plane {
            let (re, im) = (src[i], src[plane + i]);
            let m = re.hypot(im);
            if m == 0.0 {
                continue;
            }
            let (s, c) = (im / m, re / m);
            let (gm, gs, gc) = (g[i], g[plane + i], g[2 * plane + i]);
            // ∂m/∂re = c, ∂s/∂re = -s c / m, ∂c/∂re = s² / m
            dst[i] = gm * c + (-gs * s * c + gc * s * s) / m;
            // ∂m/∂im = s, ∂s/∂im = c² / m, ∂c/∂im = -s c / m
            dst[plane + i] = gm * s + (gs * c * c - gc * s * c) / m;
        }
    }
    dy
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    weights: BatchWeights,
    beamformer: BeamformerSaved,
    beamformed: Tensor,
    classifier: ClassifierSaved,
}

impl ForwardCache {
    pub fn weights(&self) -> &BatchWeights {
        &self.weights
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    beamformer: Beamformer,
    classifier: Classifier,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_bins = config.n_bins();
        let beamformer = Beamformer::new(config.beamformer.clone(), n_bins, &mut rng)?;
        let classifier = Classifier::new(config.classifier.clone(), n_bins, &mut rng)?;
        Ok(Model {
            config,
            beamformer,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn beamformer(&self) -> &Beamformer {
        &self.beamformer
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Learnable scalars in the beamformer and classifier.
    pub fn param_count(&self) -> usize {
        self.beamformer.param_count() + self.classifier.param_count()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
        let (weights, bf_saved) = self.beamformer.forward(x, mode)?;
        let beamformed = beamform_batch(x, &weights)?;
        let feats = features_batch(&beamformed);
        let (scores, clf_saved) = self.classifier.forward(&feats, mode)?;
        Ok((
            scores,
            ForwardCache {
                weights,
                beamformer: bf_saved,
                beamformed,
                classifier: clf_saved,
            },
        ))
    }

    /// Eval-mode logits (higher = more replay-like).
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn loss(
        &self,
        x: &Tensor,
        labels: &[Label],
        class_weights: &ClassWeights,
        reg: &RegularizerConfig,
        mode: Mode,
    ) -> Result<LossBreakdown> {
        let (scores, cache) = self.forward(x, mode)?;
        Ok(total_loss_with_grad(&scores, labels, class_weights, &cache.weights, reg)?.0)
    }

    /// Train-mode forward and backward pass. Gradients are accumulated into
    /// the parameters and batch norm running statistics are updated.
    pub fn accumulate_gradients(
        &mut self,
        x: &Tensor,
        labels: &[Label],
        class_weights: &ClassWeights,
        reg: &RegularizerConfig,
    ) -> Result<LossBreakdown> {
        let (scores, cache) = self.forward(x, Mode::Train)?;
        let (loss, dscores, dw_reg) =
            total_loss_with_grad(&scores, labels, class_weights, &cache.weights, reg)?;
        let dfeat = self.classifier.backward(&cache.classifier, &dscores)?;
        let dy = features_batch_backward(&cache.beamformed, &dfeat);
        let (_, mut dw) = beamform_batch_backward(x, &cache.weights, &dy, false)?;
        match (&mut dw, &dw_reg) {
            (BatchWeights::PerItem(a), BatchWeights::PerItem(b))
            | (BatchWeights::Shared(a), BatchWeights::Shared(b)) => a.add_assign(b),
            _ => unreachable!("same beamformer mode"),
        }
        self.beamformer.backward(&cache.beamformer, &dw)?;
        self.beamformer.commit(&cache.beamformer);
        self.classifier.commit(&cache.classifier);
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Learnable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.beamformer.params_mut();
        out.extend(self.classifier.params_mut());
        out
    }

    /// Every stored tensor (parameters and running statistics) by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.beamformer.visit_tensors("beamformer", &mut out);
        self.classifier.visit_tensors("classifier", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.beamformer.visit_tensors_mut("beamformer", &mut out);
        self.classifier.visit_tensors_mut("classifier", &mut out);
        out
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        self.named_tensors()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect()
    }

    /// Loads tensors by name; every model tensor must be present with a
    /// matching shape.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in self.named_tensors_mut() {
            let src = state
                .get(&name)
                .ok_or_else(|| Error::Config(format!("tensor {name} missing from saved state")))?;
            if src.shape() != slot.shape() {
                return Err(Error::shape(
                    format!("tensor {name}"),
                    "shape",
                    slot.shape(),
                    src.shape(),
                ));
            }
            *slot = src.clone();
        }
        Ok(())
    }
}

/// Compares [`Model::accumulate_gradients`] with central differences of the
/// train-mode loss over every learnable parameter, on random spectrograms of
/// `n_frames` frames. Returns the largest relative error.
pub fn grad_check_model(
    config: &ModelConfig,
    batch: usize,
    n_frames: usize,
    seed: u64,
    epsilon: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.clone(), seed)?;
    let shape = [
        batch,
        2 * config.beamformer.n_channels,
        n_frames,
        config.n_bins(),
    ];
    let x = Tensor::uniform(&shape, 1.0, &mut rng);
    let labels: Vec<Label> = (0..batch)
        .map(|i| {
            if i % 2 == 0 {
                Label::Genuine
            } else {
                Label::Replay
            }
        })
        .collect();
    let cw = ClassWeights {
        genuine: 0.7,
        replay: 0.3,
    };
    let reg = RegularizerConfig {
        lambda: 0.05,
        gamma: 0.5,
    };

    let probe = model.clone();
    let loss = |m: &Model| m.loss(&x, &labels, &cw, &reg, Mode::Train).map(|l| l.total);
    model.zero_grad();
    model.accumulate_gradients(&x, &labels, &cw, &reg)?;
    let mut worst = 0.0f64;
    let n_params = model.params_mut().len();
    for p in 0..n_params {
        let analytic = model.params_mut()[p].grad.data().to_vec();
        let base = probe.clone();
        let mut failed = None;
        let numeric = numeric_gradient(
            |v| {
                let mut m = base.clone();
                m.params_mut()[p].value.data_mut().copy_from_slice(v);
                loss(&m).unwrap_or_else(|e| {
                    failed = Some(e);
                    f64::NAN
                })
            },
            &base.clone().params_mut()[p].value.data().to_vec(),
            epsilon,
        );
        if let Some(e) = failed {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
