//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Layer, LayerSpec, Mode};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that gradients which are zero
/// up to round-off do not dominate the report.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// `(f(x + ε e_i) - f(x - ε e_i)) / 2ε` for every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let plus = f(&probe);
            probe[i] = orig - epsilon;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub layer: String,
    pub trials: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl GradCheckReport {
    pub fn new(layer: impl Into<String>, trials: usize, epsilon: f64, tolerance: f64) -> Self {
        let mut notes = Vec::new();
        if !(1e-7..=1e-4).contains(&epsilon) {
            notes.push(format!("epsilon {epsilon} outside [1e-7, 1e-4]"));
        }
        GradCheckReport {
            layer: layer.into(),
            trials,
            epsilon,
            tolerance,
            entries: Vec::new(),
            max_relative_error: 0.0,
            passed: false,
            notes,
        }
    }

    /// Records the error for `name`, keeping the worst value across trials.
    pub fn record(&mut self, name: &str, error: f64) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => e.max_relative_error = e.max_relative_error.max(error),
            None => self.entries.push(GradCheckEntry {
                name: name.to_string(),
                max_relative_error: error,
            }),
        }
    }

    pub fn finish(mut self) -> Self {
        self.max_relative_error = self
            .entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max);
        self.passed = self.notes.is_empty()
            && !self.entries.is_empty()
            && self
                .entries
                .iter()
                .all(|e| e.max_relative_error < self.tolerance);
        self
    }
}

/// Small input shape exercising each layer kind.
pub fn default_input_shape(spec: &LayerSpec) -> Vec<usize> {
    match *spec {
        LayerSpec::Conv2d { in_channels, .. } => vec![2, in_channels, 5, 5],
        LayerSpec::BatchNorm { channels } => vec![4, channels, 3],
        LayerSpec::Elu => vec![3, 4],
        LayerSpec::PoolMaxAvgSum { rate } => vec![2, 2, 3, 2 * rate + 1],
        LayerSpec::BiGru { input_size, .. } => vec![2, 6, input_size],
        LayerSpec::Linear { in_features, .. } => vec![3, in_features],
    }
}

pub fn grad_check(
    spec: &LayerSpec,
    trials: usize,
    epsilon: f64,
    tolerance: f64,
) -> GradCheckReport {
    grad_check_with_shape(
        spec,
        &default_input_shape(spec),
        trials,
        epsilon,
        tolerance,
        0,
    )
}

/// Checks input and parameter gradients of `spec` in train mode on random
/// instances, using the scalar loss `Σ y ⊙ R` for a random projection `R`.
pub fn grad_check_with_shape(
    spec: &LayerSpec,
    input_shape: &[usize],
    trials: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport {
    let mut report = GradCheckReport::new(spec.name(), trials, epsilon, tolerance);
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64));
        let mut layer = match Layer::new(spec.clone(), &mut rng) {
            Ok(l) => l,
            Err(e) => {
                report.notes.push(e.to_string());
                return report.finish();
            }
        };
        if matches!(spec, LayerSpec::BatchNorm { .. }) {
            for p in &mut layer.params {
                p.value = Tensor::uniform(p.value.shape(), 1.5, &mut rng);
            }
        }
        let x = Tensor::uniform(input_shape, 2.0, &mut rng);
        let (y, saved) = match layer.forward(&x, Mode::Train) {
            Ok(v) => v,
            Err(e) => {
                report.notes.push(e.to_string());
                return report.finish();
            }
        };
        let proj = Tensor::uniform(y.shape(), 1.0, &mut rng);
        let (dx, grads) = match layer.backward(Some(&saved), &proj) {
            Ok(v) => v,
            Err(e) => {
                report.notes.push(e.to_string());
                return report.finish();
            }
        };

        let loss_at = |l: &Layer, input: &Tensor| -> f64 {
            l.forward(input, Mode::Train)
                .map(|(out, _)| out.dot(&proj))
                .unwrap_or(f64::NAN)
        };
        let numeric_dx = numeric_gradient(
            |v| {
                loss_at(
                    &layer,
                    &Tensor::from_vec(input_shape, v.to_vec()).expect("same shape"),
                )
            },
            x.data(),
            epsilon,
        );
        report.record("input", max_relative_error(dx.data(), &numeric_dx));

        let names = spec.param_shapes();
        for (idx, (name, shape)) in names.iter().enumerate() {
            let original = layer.params[idx].value.clone();
            let numeric = numeric_gradient(
                |v| {
                    let mut probe = layer.clone();
                    probe.params[idx].value =
                        Tensor::from_vec(shape, v.to_vec()).expect("same shape");
                    loss_at(&probe, &x)
                },
                original.data(),
                epsilon,
            );
            report.record(name, max_relative_error(grads[idx].data(), &numeric));
        }
    }
    report.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn all_kinds() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3],
            },
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: [1, 3],
            },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Elu,
            LayerSpec::PoolMaxAvgSum { rate: 3 },
            LayerSpec::BiGru {
                input_size: 3,
                hidden_size: 4,
            },
            LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            },
        ]
    }

    #[test]
    fn every_layer_kind_passes_on_ten_instances() {
        for spec in all_kinds() {
            let report = grad_check(&spec, 10, EPS, TOL);
            assert!(report.passed, "{report:#?}");
        }
    }

    #[test]
    fn conv_two_to_three_channels() {
        let spec = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 3],
        };
        let report = grad_check_with_shape(&spec, &[1, 2, 5, 5], 2, EPS, TOL, 11);
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn bigru_hidden4_input3_six_steps() {
        let spec = LayerSpec::BiGru {
            input_size: 3,
            hidden_size: 4,
        };
        let report = grad_check_with_shape(&spec, &[1, 6, 3], 3, EPS, TOL, 5);
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn any_layer_on_three_by_four_input() {
        for spec in [LayerSpec::Elu, LayerSpec::BatchNorm { channels: 4 }] {
            let report = grad_check_with_shape(&spec, &[3, 4], 3, EPS, TOL, 1);
            assert!(report.passed, "{report:#?}");
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let report = grad_check(
            &LayerSpec::Linear {
                in_features: 3,
                out_features: 2,
            },
            1,
            EPS,
            0.0,
        );
        assert!(!report.passed);
    }

    #[test]
    fn out_of_range_epsilon_is_reported() {
        let report = grad_check(&LayerSpec::Elu, 1, 1e-2, TOL);
        assert!(!report.passed);
        assert_eq!(report.notes.len(), 1);
    }
}
