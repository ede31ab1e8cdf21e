//! Joint training of beamformer and classifier, and checkpoint I/O.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mode;
use crate::data::{read_clip, replicate_first_channel, ClipRecord, MicId, MultichannelClip};
use crate::dsp::Stft;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, ScoredTrial};
use crate::model::{spectrogram_batch, Model, ModelConfig};
use crate::objective::{class_weights, ClassWeights, Label, RegularizerConfig};
use crate::tensor::{Param, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MALRAD01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub reg: RegularizerConfig,
    pub reweight_classes: bool,
    /// Replicate channel 0 across the array before every forward pass.
    pub alrad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            base_lr: 1e-3,
            epochs: 50,
            val_fraction: 0.1,
            seed: 0,
            reg: RegularizerConfig::default(),
            reweight_classes: true,
            alrad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must be in (0, 1)".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.reg.validate()
    }
}

/// `0.5 * base_lr * (1 + cos(pi * epoch / total))`, stepped once per epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} out of range for {total_epochs} epochs"
        )));
    }
    let c = (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos();
    Ok((0.5 * base_lr * (1.0 + c)).max(0.0))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Regularizer share of `train_loss`.
    pub train_regularizer: f64,
    pub val_loss: f64,
    pub val_eer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mic_id: MicId,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub class_weights: ClassWeights,
    pub history: Vec<EpochStats>,
    /// Final-epoch parameters and running statistics.
    pub tensors: BTreeMap<String, Tensor>,
    pub best_val_epoch: usize,
    pub best_val_tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.train_config.seed
    }

    pub fn model(&self) -> Result<Model> {
        self.build(&self.tensors)
    }

    pub fn best_val_model(&self) -> Result<Model> {
        self.build(&self.best_val_tensors)
    }

    fn build(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        model.load_state(tensors)?;
        Ok(model)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(Model::new(self.model_config.clone(), 0)?.param_count())
    }
}

/// Loads every clip, applying the ALRAD replication when requested.
pub fn load_clips(records: &[ClipRecord], alrad: bool) -> Result<Vec<MultichannelClip>> {
    records
        .iter()
        .map(|r| {
            read_clip(r).map(|c| {
                if alrad {
                    replicate_first_channel(&c)
                } else {
                    c
                }
            })
        })
        .collect()
}

/// Reads the clips named by `records` and trains.
pub fn train(
    records: &[ClipRecord],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<Checkpoint> {
    let clips = load_clips(records, config.alrad)?;
    train_on_clips(&clips, config, model_config)
}

pub(crate) fn check_compatible(
    clips: &[MultichannelClip],
    model_config: &ModelConfig,
) -> Result<MicId> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Data("no clips".into()))?;
    let mic = first.record.mic_id;
    for c in clips {
        if c.record.mic_id != mic {
            return Err(Error::Data(format!(
                "{}: mic_id {} differs from {mic}; train one model per array",
                c.record.path.display(),
                c.record.mic_id
            )));
        }
        if c.sample_rate != model_config.stft.sample_rate {
            return Err(Error::Data(format!(
                "{}: sample_rate {} does not match the model ({})",
                c.record.path.display(),
                c.sample_rate,
                model_config.stft.sample_rate
            )));
        }
        if c.n_channels() != model_config.beamformer.n_channels {
            return Err(Error::Data(format!(
                "{}: {} channels, model expects {}",
                c.record.path.display(),
                c.n_channels(),
                model_config.beamformer.n_channels
            )));
        }
    }
    Ok(mic)
}

fn batch_input(clips: &[&MultichannelClip], stft: &Stft) -> Result<(Tensor, Vec<Label>)> {
    let waves: Vec<&[Vec<f64>]> = clips.iter().map(|c| c.samples.as_slice()).collect();
    let labels = clips.iter().map(|c| c.record.label).collect();
    Ok((spectrogram_batch(&waves, stft)?, labels))
}

/// Mean loss and eval-mode scores over `clips`.
fn evaluate_split(
    model: &Model,
    clips: &[&MultichannelClip],
    stft: &Stft,
    batch_size: usize,
    weights: &ClassWeights,
    reg: &RegularizerConfig,
) -> Result<(f64, Vec<ScoredTrial>)> {
    let mut total = 0.0;
    let mut trials = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size) {
        let (x, labels) = batch_input(chunk, stft)?;
        let (scores, cache) = model.forward(&x, Mode::Eval)?;
        let loss = crate::objective::total_loss(&scores, &labels, weights, cache.weights(), reg)?;
        total += loss.total * chunk.len() as f64;
        trials.extend(
            chunk
                .iter()
                .zip(scores)
                .map(|(c, s)| ScoredTrial::new(s, c)),
        );
    }
    Ok((total / clips.len() as f64, trials))
}

/// Trains on preloaded clips (ALRAD replication, if any, already applied).
pub fn train_on_clips(
    clips: &[MultichannelClip],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    model_config.validate()?;
    let mic_id = check_compatible(clips, model_config)?;

    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(0);
    order.shuffle(&mut split_rng);
    let n_val = ((clips.len() as f64 * config.val_fraction).round() as usize)
        .min(clips.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let val: Vec<&MultichannelClip> = val_idx.iter().map(|&i| &clips[i]).collect();

    let n_genuine = train_idx
        .iter()
        .filter(|&&i| clips[i].record.label == Label::Genuine)
        .count();
    let n_replay = train_idx.len() - n_genuine;
    if n_genuine == 0 || n_replay == 0 {
        return Err(Error::Data(format!(
            "training set needs both classes, got {n_genuine} genuine and {n_replay} replay"
        )));
    }
    let weights = if config.reweight_classes {
        class_weights(n_genuine, n_replay)?
    } else {
        ClassWeights::UNIFORM
    };

    let stft = Stft::new(&model_config.stft)?;
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0, model.state());
    log::info!(
        "training {} params on {} clips ({} validation), {} epochs",
        model.param_count(),
        train_idx.len(),
        val.len(),
        config.epochs
    );

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.base_lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut perm = train_idx.clone();
        perm.shuffle(&mut rng);

        let mut train_loss = 0.0;
        let mut train_regularizer = 0.0;
        for (batch, chunk) in perm.chunks(config.batch_size).enumerate() {
            let items: Vec<&MultichannelClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let (x, labels) = batch_input(&items, &stft)?;
            model.zero_grad();
            let loss = match model.accumulate_gradients(&x, &labels, &weights, &config.reg) {
                Ok(l) => {
                    train_regularizer += l.regularizer * chunk.len() as f64;
                    l.total
                }
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            let grads_finite = model.params_mut().iter().all(|p| p.grad.all_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Diverged { epoch, batch, loss });
            }
            adam.step(model.params_mut(), lr);
            train_loss += loss * chunk.len() as f64;
        }
        train_loss /= perm.len() as f64;
        train_regularizer /= perm.len() as f64;

        let (val_loss, val_eer) = if val.is_empty() {
            (f64::NAN, None)
        } else {
            let (loss, trials) = evaluate_split(
                &model,
                &val,
                &stft,
                config.batch_size,
                &weights,
                &config.reg,
            )?;
            (loss, compute_eer(&trials).ok().map(|e| e.eer))
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.4} (reg {train_regularizer:.4}) val {val_loss:.4} val_eer {}",
            val_eer.map_or("n/a".into(), |e| format!("{:.2}%", 100.0 * e))
        );
        if val_loss < best.0 {
            best = (val_loss, epoch, model.state());
        }
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            train_regularizer,
            val_loss,
            val_eer,
        });
    }

    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        mic_id,
        model_config: model_config.clone(),
        train_config: config.clone(),
        class_weights: weights,
        history,
        tensors: model.state(),
        best_val_epoch: best.1,
        best_val_tensors: best.2,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    mic_id: MicId,
    seed: u64,
    model_config: ModelConfig,
    train_config: TrainConfig,
    class_weights: ClassWeights,
    history: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
    best_val_epoch: usize,
    best_val_tensors: Vec<TensorEntry>,
    data_bytes: u64,
    /// SHA-256 of the data section, hex.
    checksum: String,
}

fn directory(
    tensors: &BTreeMap<String, Tensor>,
    offset: &mut u64,
    data: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            *offset += 8 * t.len() as u64;
            entry
        })
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut data = Vec::new();
    let mut offset = 0;
    let tensors = directory(&ckpt.tensors, &mut offset, &mut data);
    let best_val_tensors = directory(&ckpt.best_val_tensors, &mut offset, &mut data);
    let header = Header {
        format_version: ckpt.format_version,
        mic_id: ckpt.mic_id,
        seed: ckpt.seed(),
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        class_weights: ckpt.class_weights,
        history: ckpt.history.clone(),
        tensors,
        best_val_epoch: ckpt.best_val_epoch,
        best_val_tensors,
        data_bytes: data.len() as u64,
        checksum: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&data);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensors(
    path: &Path,
    entries: &[TensorEntry],
    data: &[u8],
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = data
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("tensor {} lies outside the data section", e.name),
            })?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.insert(e.name.clone(), Tensor::from_vec(&e.shape, values)?);
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let checksum_err = || Error::Checksum {
        path: path.to_path_buf(),
    };
    let len_bytes = bytes.get(8..16).ok_or_else(checksum_err)?;
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + header_len).ok_or_else(checksum_err)?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(&format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let data = &bytes[16 + header_len..];
    if data.len() as u64 != header.data_bytes
        || hex::encode(Sha256::digest(data)) != header.checksum
    {
        return Err(checksum_err());
    }
    Ok(Checkpoint {
        format_version: header.format_version,
        mic_id: header.mic_id,
        model_config: header.model_config,
        train_config: header.train_config,
        class_weights: header.class_weights,
        history: header.history,
        tensors: read_tensors(path, &header.tensors, data)?,
        best_val_epoch: header.best_val_epoch,
        best_val_tensors: read_tensors(path, &header.best_val_tensors, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamformer::BeamformerMode;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 50, 1e-3).unwrap(), 1e-3);
        assert!((cosine_lr(25, 50, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
        let last = cosine_lr(49, 50, 1e-3).unwrap();
        assert!((last - 9.866357858642e-7).abs() / last < 1e-9, "{last}");
        assert!(cosine_lr(50, 50, 1e-3).is_err());
        let lrs: Vec<f64> = (0..50).map(|e| cosine_lr(e, 50, 1e-3).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        Adam::default().step(vec![&mut p], 0.1);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6 && (p.value.data()[1] + 0.9).abs() < 1e-6);
    }

    fn tiny_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::compact(2, 16_000, BeamformerMode::FixedMulti).unwrap();
        let model = Model::new(cfg.clone(), 5).unwrap();
        Checkpoint {
            format_version: FORMAT_VERSION,
            mic_id: MicId::Synthetic,
            model_config: cfg,
            train_config: TrainConfig::default(),
            class_weights: ClassWeights::UNIFORM,
            history: vec![EpochStats {
                epoch: 0,
                lr: 1e-3,
                train_loss: 0.7,
                train_regularizer: 0.01,
                val_loss: 0.69,
                val_eer: Some(0.4),
            }],
            tensors: model.state(),
            best_val_epoch: 0,
            best_val_tensors: model.state(),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = tiny_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (name, t) in &ckpt.tensors {
            let b = &back.tensors[name];
            assert!(t
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Checksum { .. })),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checksum { .. })
        ));
        std::fs::write(&path, b"RIFF0000").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let mut ckpt = tiny_checkpoint();
        ckpt.format_version = 7;
        save_checkpoint(&ckpt, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Version {
                    found: 7,
                    expected: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                val_fraction: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                val_fraction: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
