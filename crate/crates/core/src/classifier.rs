//! Convolutional-recurrent classifier over `[B, 3, T, F]` magnitude /
//! sin / cos features.
//!
//! Three blocks of 1×3 convolution, batch norm, ELU and summed max+average
//! frequency pooling reduce the frequency axis; the per-frame feature maps
//! are flattened channel-major and fed to stacked bidirectional GRUs. The
//! forward direction's last state and the backward direction's first state
//! are concatenated and mapped to one logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Layer, LayerSpec, Mode, Saved};
use crate::beamformer::{push_layer, push_layer_mut};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub conv_filters: Vec<usize>,
    /// `[time, frequency]` kernel extent.
    pub kernel: [usize; 2],
    pub pool_rates: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            conv_filters: vec![32, 64, 128],
            kernel: [1, 3],
            pool_rates: vec![8, 8, 4],
            gru_hidden: 128,
            gru_layers: 2,
        }
    }
}

impl ClassifierConfig {
    /// Frequency bins left after the pooling chain.
    pub fn reduced_bins(&self, n_bins: usize) -> Result<usize> {
        let reduced = self.pool_rates.iter().fold(n_bins, |f, r| f / r.max(&1));
        if reduced == 0 {
            return Err(Error::Config(format!(
                "{n_bins} frequency bins vanish under pooling rates {:?}",
                self.pool_rates
            )));
        }
        Ok(reduced)
    }

    /// Width of each GRU input frame.
    pub fn sequence_width(&self, n_bins: usize) -> Result<usize> {
        Ok(self.conv_filters.last().copied().unwrap_or(3) * self.reduced_bins(n_bins)?)
    }

    pub fn validate(&self, n_bins: usize) -> Result<()> {
        if self.conv_filters.is_empty() || self.conv_filters.len() != self.pool_rates.len() {
            return Err(Error::Config(format!(
                "conv_filters {:?} and pool_rates {:?} must be non-empty and of equal length",
                self.conv_filters, self.pool_rates
            )));
        }
        if self.gru_layers == 0 || self.gru_hidden == 0 {
            return Err(Error::Config(
                "classifier needs at least one GRU layer with a positive width".into(),
            ));
        }
        if self.pool_rates.contains(&0) || self.conv_filters.contains(&0) {
            return Err(Error::Config(
                "pool rates and filter counts must be positive".into(),
            ));
        }
        self.reduced_bins(n_bins)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Layer,
    bn: Layer,
    elu: Layer,
    pool: Layer,
}

#[derive(Clone, Debug)]
pub struct ClassifierSaved {
    blocks: Vec<[Saved; 4]>,
    conv_out_shape: Vec<usize>,
    grus: Vec<Saved>,
    head: Saved,
    steps: usize,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    n_bins: usize,
    blocks: Vec<ConvBlock>,
    grus: Vec<Layer>,
    head: Layer,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        config: ClassifierConfig,
        n_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(n_bins)?;
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (&filters, &rate) in config.conv_filters.iter().zip(&config.pool_rates) {
            blocks.push(ConvBlock {
                conv: Layer::new(
                    LayerSpec::Conv2d {
                        in_channels: in_ch,
                        out_channels: filters,
                        kernel: config.kernel,
                    },
                    rng,
                )?,
                bn: Layer::new(LayerSpec::BatchNorm { channels: filters }, rng)?,
                elu: Layer::new(LayerSpec::Elu, rng)?,
                pool: Layer::new(LayerSpec::PoolMaxAvgSum { rate }, rng)?,
            });
            in_ch = filters;
        }
        let mut grus = Vec::new();
        let mut width = config.sequence_width(n_bins)?;
        for _ in 0..config.gru_layers {
            grus.push(Layer::new(
                LayerSpec::BiGru {
                    input_size: width,
                    hidden_size: config.gru_hidden,
                },
                rng,
            )?);
            width = 2 * config.gru_hidden;
        }
        let head = Layer::new(
            LayerSpec::Linear {
                in_features: 2 * config.gru_hidden,
                out_features: 1,
            },
            rng,
        )?;
        Ok(Classifier {
            config,
            n_bins,
            blocks,
            grus,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.conv, &b.bn, &b.elu, &b.pool])
            .chain(self.grus.iter())
            .chain(std::iter::once(&self.head))
    }

    /// Logits `[B]` for features `[B, 3, T, F]`.
    pub fn forward(&self, features: &Tensor, mode: Mode) -> Result<(Vec<f64>, ClassifierSaved)> {
        features.expect_rank("classifier input", 4)?;
        if features.dim(1) != 3 {
            return Err(Error::shape(
                "classifier input",
                "feature channels",
                3,
                features.dim(1),
            ));
        }
        if features.dim(3) != self.n_bins {
            return Err(Error::shape(
                "classifier input",
                "frequency bins",
                self.n_bins,
                features.dim(3),
            ));
        }
        let (b_n, t_n) = (features.dim(0), features.dim(2));
        if t_n == 0 {
            return Err(Error::shape("classifier input", "time frames", ">= 1", 0));
        }
        let mut saved_blocks = Vec::with_capacity(self.blocks.len());
        let mut h = features.clone();
        for block in &self.blocks {
            let (a, s0) = block.conv.forward(&h, mode)?;
            let (a, s1) = block.bn.forward(&a, mode)?;
            let (a, s2) = block.elu.forward(&a, mode)?;
            let (a, s3) = block.pool.forward(&a, mode)?;
            saved_blocks.push([s0, s1, s2, s3]);
            h = a;
        }
        let conv_out_shape = h.shape().to_vec();
        let mut seq = to_sequence(&h);
        let mut saved_grus = Vec::with_capacity(self.grus.len());
        for gru in &self.grus {
            let (out, s) = gru.forward(&seq, mode)?;
            saved_grus.push(s);
            seq = out;
        }
        let hidden = self.config.gru_hidden;
        let mut summary = Tensor::zeros(&[b_n, 2 * hidden]);
        for b in 0..b_n {
            let last = &seq.data()[(b * t_n + t_n - 1) * 2 * hidden..][..hidden];
            let first = &seq.data()[(b * t_n) * 2 * hidden + hidden..][..hidden];
            summary.data_mut()[b * 2 * hidden..][..hidden].copy_from_slice(last);
            summary.data_mut()[b * 2 * hidden + hidden..][..hidden].copy_from_slice(first);
        }
        let (logits, head_saved) = self.head.forward(&summary, mode)?;
        Ok((
            logits.into_data(),
            ClassifierSaved {
                blocks: saved_blocks,
                conv_out_shape,
                grus: saved_grus,
                head: head_saved,
                steps: t_n,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the feature gradient.
    pub fn backward(&mut self, saved: &ClassifierSaved, dlogits: &[f64]) -> Result<Tensor> {
        let b_n = dlogits.len();
        let hidden = self.config.gru_hidden;
        let t_n = saved.steps;
        let up = Tensor::from_vec(&[b_n, 1], dlogits.to_vec())?;
        let (dsummary, g) = self.head.backward(Some(&saved.head), &up)?;
        self.head.accumulate(&g);

        let mut dseq = Tensor::zeros(&[b_n, t_n, 2 * hidden]);
        for b in 0..b_n {
            let src = &dsummary.data()[b * 2 * hidden..(b + 1) * 2 * hidden];
            dseq.data_mut()[(b * t_n + t_n - 1) * 2 * hidden..][..hidden]
                .copy_from_slice(&src[..hidden]);
            dseq.data_mut()[(b * t_n) * 2 * hidden + hidden..][..hidden]
                .copy_from_slice(&src[hidden..]);
        }
        for (gru, s) in self.grus.iter_mut().zip(&saved.grus).rev() {
            let (dx, g) = gru.backward(Some(s), &dseq)?;
            gru.accumulate(&g);
            dseq = dx;
        }
        let mut dh = from_sequence(&dseq, &saved.conv_out_shape);
        for (block, s) in self.blocks.iter_mut().zip(&saved.blocks).rev() {
            let (d, _) = block.pool.backward(Some(&s[3]), &dh)?;
            let (d, _) = block.elu.backward(Some(&s[2]), &d)?;
            let (d, g) = block.bn.backward(Some(&s[1]), &d)?;
            block.bn.accumulate(&g);
            let (d, g) = block.conv.backward(Some(&s[0]), &d)?;
            block.conv.accumulate(&g);
            dh = d;
        }
        Ok(dh)
    }

    pub fn commit(&mut self, saved: &ClassifierSaved) {
        for (block, s) in self.blocks.iter_mut().zip(&saved.blocks) {
            block.bn.commit(&s[1]);
        }
    }

    pub(crate) fn visit_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, block) in self.blocks.iter().enumerate() {
            push_layer(prefix, &format!("block{}.conv", i + 1), &block.conv, out);
            push_layer(prefix, &format!("block{}.bn", i + 1), &block.bn, out);
        }
        for (i, gru) in self.grus.iter().enumerate() {
            push_layer(prefix, &format!("gru{}", i + 1), gru, out);
        }
        push_layer(prefix, "head", &self.head, out);
    }

    pub(crate) fn visit_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            push_layer_mut(
                prefix,
                &format!("block{}.conv", i + 1),
                &mut block.conv,
                out,
            );
            push_layer_mut(prefix, &format!("block{}.bn", i + 1), &mut block.bn, out);
        }
        for (i, gru) in self.grus.iter_mut().enumerate() {
            push_layer_mut(prefix, &format!("gru{}", i + 1), gru, out);
        }
        push_layer_mut(prefix, "head", &mut self.head, out);
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.extend(block.conv.params.iter_mut());
            out.extend(block.bn.params.iter_mut());
        }
        for gru in &mut self.grus {
            out.extend(gru.params.iter_mut());
        }
        out.extend(self.head.params.iter_mut());
        out
    }
}

/// `[B, C, T, F] -> [B, T, C*F]`, channel-major within a frame.
fn to_sequence(x: &Tensor) -> Tensor {
    let (b_n, c_n, t_n, f_n) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[b_n, t_n, c_n * f_n]);
    for b in 0..b_n {
        for c in 0..c_n {
            for t in 0..t_n {
                let src = &x.data()[((b * c_n + c) * t_n + t) * f_n..][..f_n];
                out.data_mut()[(b * t_n + t) * c_n * f_n + c * f_n..][..f_n].copy_from_slice(src);
            }
        }
    }
    out
}

fn from_sequence(seq: &Tensor, shape: &[usize]) -> Tensor {
    let (b_n, c_n, t_n, f_n) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(shape);
    for b in 0..b_n {
        for c in 0..c_n {
            for t in 0..t_n {
                let src = &seq.data()[(b * t_n + t) * c_n * f_n + c * f_n..][..f_n];
                out.data_mut()[((b * c_n + c) * t_n + t) * f_n..][..f_n].copy_from_slice(src);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_chain_at_16k() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.reduced_bins(513).unwrap(), 2);
        assert_eq!(cfg.sequence_width(513).unwrap(), 256);
    }

    #[test]
    fn pooling_chain_at_44k() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.reduced_bins(1025).unwrap(), 4);
        assert_eq!(cfg.sequence_width(1025).unwrap(), 512);
    }

    #[test]
    fn too_few_bins_fail_at_build_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Classifier::new(ClassifierConfig::default(), 200, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn eval_scores_are_reproducible_and_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ClassifierConfig {
            conv_filters: vec![4, 4],
            kernel: [1, 3],
            pool_rates: vec![4, 4],
            gru_hidden: 5,
            gru_layers: 2,
        };
        let clf = Classifier::new(cfg, 33, &mut rng).unwrap();
        let batch = Tensor::uniform(&[3, 3, 6, 33], 1.0, &mut rng);
        let (a, _) = clf.forward(&batch, Mode::Eval).unwrap();
        let (b, _) = clf.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            let one = Tensor::from_vec(
                &[1, 3, 6, 33],
                batch.data()[i * 3 * 6 * 33..(i + 1) * 3 * 6 * 33].to_vec(),
            )
            .unwrap();
            let (s, _) = clf.forward(&one, Mode::Eval).unwrap();
            assert_eq!(s[0].to_bits(), a[i].to_bits());
        }
    }

    #[test]
    fn sequence_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 3, 4, 5], 1.0, &mut rng);
        let seq = to_sequence(&x);
        assert_eq!(seq.shape(), &[2, 4, 15]);
        // channel-major inside a frame
        assert_eq!(
            seq.data()[(4 + 2) * 15 + 5 + 3],
            x.data()[((3 + 1) * 4 + 2) * 5 + 3]
        );
        assert_eq!(from_sequence(&seq, x.shape()), x);
    }
}
