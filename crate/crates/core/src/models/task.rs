use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::artifacts::{sha256_hex, ArtifactStore};
use super::features::{LabeledSample, SplitTag};
use super::ModelError;

pub const WEIGHTS_KIND: &str = "weights";

/// Softmax linear classifier over standardized features. `weights` is
/// row-major `labels.len() x (feature_len + 1)`, bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub labels: Vec<String>,
    pub feature_len: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn weights_ref(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("model serializes")
    }

    pub fn load(store: &ArtifactStore, weights_ref: &str) -> Result<Self, ModelError> {
        let bytes = store
            .get(WEIGHTS_KIND, weights_ref)
            .ok_or_else(|| ModelError::UnknownWeights(weights_ref.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::Io(e.to_string()))
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        if features.len() != self.feature_len {
            return Err(ModelError::FeatureLength {
                got: features.len(),
                want: self.feature_len,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidFeatures("non-finite value".into()));
        }
        Ok(softmax(&logits(&self.weights, self.labels.len(), &self.standardize(features))))
    }

    /// Argmax label and its probability; ties go to the lowest label index.
    pub fn predict(&self, features: &[f64]) -> Result<(String, f64), ModelError> {
        let p = self.scores(features)?;
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        Ok((self.labels[best].clone(), p[best]))
    }

    pub fn accuracy(&self, samples: &[&LabeledSample]) -> f64 {
        if samples.is_empty() {
            return f64::NAN;
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict(&s.features).is_ok_and(|(l, _)| l == s.label))
            .count();
        hits as f64 / samples.len() as f64
    }
}

fn logits(w: &[f64], k: usize, x: &[f64]) -> Vec<f64> {
    let stride = x.len() + 1;
    (0..k)
        .map(|c| {
            let row = &w[c * stride..(c + 1) * stride];
            row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()]
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy plus `l2/2 * |W|^2` (biases unpenalized) and its
/// gradient with respect to `w`.
pub fn loss_and_grad(w: &[f64], k: usize, x: &[Vec<f64>], y: &[usize], l2: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let d = x.first().map_or(0, Vec::len);
    let stride = d + 1;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let p = softmax(&logits(w, k, xi));
        loss -= p[yi].max(f64::MIN_POSITIVE).ln();
        for c in 0..k {
            let g = p[c] - if c == yi { 1.0 } else { 0.0 };
            let row = &mut grad[c * stride..(c + 1) * stride];
            for j in 0..d {
                row[j] += g * xi[j];
            }
            row[d] += g;
        }
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    for c in 0..k {
        for j in 0..d {
            let i = c * stride + j;
            loss += 0.5 * l2 * w[i] * w[i];
            grad[i] += l2 * w[i];
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub min_samples_per_label: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            l2: 1e-3,
            seed: 0,
            min_samples_per_label: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub weights_ref: String,
    pub model: LinearModel,
    pub train_accuracy: f64,
    /// None when no sample carries a val/test tag.
    pub holdout_accuracy: Option<f64>,
    pub n_train: usize,
    pub n_holdout: usize,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

/// Full-batch gradient descent on the train split; accuracy reported on
/// val+test. Deterministic in (samples, params).
pub fn task_train(
    samples: &[LabeledSample],
    params: &TrainParams,
    artifacts: Option<&ArtifactStore>,
) -> Result<TrainReport, ModelError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.label.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(ModelError::SingleLabel(
            counts.keys().next().map_or_else(|| "none".into(), |s| s.to_string()),
        ));
    }
    for (label, &count) in &counts {
        if count < params.min_samples_per_label {
            return Err(ModelError::TooFewSamples {
                label: label.to_string(),
                count,
                min: params.min_samples_per_label,
            });
        }
    }
    let mut warnings = Vec::new();
    let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
    if *hi > 50 * *lo {
        warnings.push(format!("label imbalance {hi}:{lo} exceeds 50:1"));
        tracing::warn!(hi, lo, "label imbalance");
    }
    let d = samples[0].features.len();
    if d == 0 || samples.iter().any(|s| s.features.len() != d || s.features.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::InvalidFeatures("inconsistent or non-finite features".into()));
    }
    let labels: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
    let index = |l: &str| labels.iter().position(|x| x == l).expect("label indexed");

    let mut train: Vec<&LabeledSample> = samples.iter().filter(|s| s.split_tag == SplitTag::Train).collect();
    let holdout: Vec<&LabeledSample> = samples.iter().filter(|s| s.split_tag != SplitTag::Train).collect();
    let train_labels: std::collections::BTreeSet<&str> = train.iter().map(|s| s.label.as_str()).collect();
    if train_labels.len() < labels.len() {
        warnings.push("train split misses a label; training on all samples".into());
        train = samples.iter().collect();
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for s in &train {
        for (m, v) in mean.iter_mut().zip(&s.features) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for s in &train {
        for ((sc, v), m) in scale.iter_mut().zip(&s.features).zip(&mean) {
            *sc += (v - m).powi(2) / n;
        }
    }
    for sc in scale.iter_mut() {
        *sc = if *sc > 1e-24 { sc.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|s| s.features.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();
    let y: Vec<usize> = train.iter().map(|s| index(&s.label)).collect();

    let k = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut w: Vec<f64> = (0..k * (d + 1)).map(|_| init.sample(&mut rng)).collect();
    let mut loss = f64::NAN;
    for _ in 0..params.epochs {
        let (l, g) = loss_and_grad(&w, k, &x, &y, params.l2);
        loss = l;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= params.learning_rate * gi;
        }
    }
    if !loss.is_finite() {
        return Err(ModelError::InvalidFeatures("training diverged".into()));
    }
    let model = LinearModel {
        labels,
        feature_len: d,
        mean,
        scale,
        weights: w,
    };
    let weights_ref = model.weights_ref();
    if let Some(store) = artifacts {
        store.put_as(WEIGHTS_KIND, &weights_ref, &model.canonical_bytes())?;
    }
    Ok(TrainReport {
        train_accuracy: model.accuracy(&train),
        holdout_accuracy: (!holdout.is_empty()).then(|| model.accuracy(&holdout)),
        n_train: train.len(),
        n_holdout: holdout.len(),
        final_loss: loss,
        weights_ref,
        model,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Provenance;

    /// Two Gaussian clusters in 4-D whose means differ by 4 sigma per axis.
    pub(crate) fn clusters(n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let a = i % 2 == 0;
                let c = if a { 0.0 } else { 4.0 };
                LabeledSample {
                    features: (0..4).map(|_| c + noise.sample(&mut rng)).collect(),
                    label: if a { "a" } else { "b" }.into(),
                    provenance: Provenance {
                        record_id: format!("r{i}"),
                        t0_ns: 0,
                        t1_ns: 1,
                    },
                    split_tag: SplitTag::for_record(&format!("r{i}")),
                }
            })
            .collect()
    }

    #[test]
    fn separable_set_high_holdout_accuracy() {
        let data = clusters(200, 7);
        let r = task_train(&data, &TrainParams::default(), None).unwrap();
        assert!(r.holdout_accuracy.unwrap() >= 0.95, "{r:?}");
    }

    #[test]
    fn deterministic_weights_ref() {
        let data = clusters(100, 3);
        let store = ArtifactStore::in_memory();
        let a = task_train(&data, &TrainParams::default(), Some(&store)).unwrap();
        let b = task_train(&data, &TrainParams::default(), None).unwrap();
        assert_eq!(a.weights_ref, b.weights_ref);
        assert_eq!(LinearModel::load(&store, &a.weights_ref).unwrap(), a.model);
        let c = task_train(&data, &TrainParams { l2: 1e-2, ..Default::default() }, None).unwrap();
        assert_ne!(a.weights_ref, c.weights_ref);
    }

    #[test]
    fn single_label_and_too_few_rejected() {
        let data: Vec<_> = clusters(40, 1).into_iter().filter(|s| s.label == "a").collect();
        assert_eq!(task_train(&data, &TrainParams::default(), None).unwrap_err(), ModelError::SingleLabel("a".into()));
        let mut data = clusters(40, 1);
        data.truncate(21);
        data.retain(|s| s.label == "a" || s.provenance.record_id == "r1");
        assert!(matches!(
            task_train(&data, &TrainParams::default(), None),
            Err(ModelError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn predict_centroid_tie_and_length() {
        let data = clusters(200, 11);
        let m = task_train(&data, &TrainParams::default(), None).unwrap().model;
        assert_eq!(m.predict(&[0.0; 4]).unwrap().0, "a");
        assert_eq!(m.predict(&[4.0; 4]).unwrap().0, "b");
        assert_eq!(m.predict(&[0.0; 3]), Err(ModelError::FeatureLength { got: 3, want: 4 }));
        let sym = LinearModel {
            labels: vec!["a".into(), "b".into()],
            feature_len: 2,
            mean: vec![0.0; 2],
            scale: vec![1.0; 2],
            weights: vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        };
        assert_eq!(sym.predict(&[0.0, 0.0]).unwrap().0, "a");
    }

    #[test]
    fn imbalance_warning() {
        let mut data = clusters(1200, 5);
        let mut kept_b = 0;
        data.retain(|s| {
            if s.label == "b" {
                kept_b += 1;
                kept_b <= 11
            } else {
                true
            }
        });
        let r = task_train(&data, &TrainParams::default(), None).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("imbalance")));
    }
}
