use serde::{Deserialize, Serialize};

use super::features::{FeatureSpec, Featurizer, SparseVec};
use super::TrainError;
use crate::corpus::seeded_permutation;
use crate::hashing::{mix64, sha256_hex};

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Weight each class by `n / (2 · n_class)`.
    #[serde(default)]
    pub class_weighting: bool,
    /// Return the mean of the iterates over the final epoch instead of the
    /// last iterate.
    #[serde(default)]
    pub tail_averaging: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 5.0, epochs: 4, batch_size: 8, l2: 1e-4, seed: 0, class_weighting: false, tail_averaging: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.l2.is_finite()
            && self.l2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Where the training labels came from; enough to retrain bit-identically.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// `gold`, `surrogate`, `surrogate_filtered`, ...
    pub label_source: String,
    pub arm: String,
    pub task_id: String,
    #[serde(default)]
    pub corpus_hash: String,
    #[serde(default)]
    pub split_manifest_hash: String,
    /// Hash of the exact (id, label) training list.
    #[serde(default)]
    pub training_set_hash: String,
    /// Label source used for hyper-parameter tuning.
    #[serde(default)]
    pub tuned_on: String,
}

/// Sparse weight dump: `(slot, weight)` for every non-zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub featurizer: Featurizer,
    pub weights: Vec<(u32, f64)>,
    pub bias: f64,
    pub train_config: TrainConfig,
    pub provenance: Provenance,
    pub threshold: f64,
    /// Mean regularized loss on the full training set after each epoch.
    pub loss_history: Vec<f64>,
}

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-m))` without overflow.
fn log1p_exp_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Weighted mean logistic loss plus `l2/2 · ‖w‖²`, and its gradient with
/// respect to `(weights, bias)`. The bias is not regularized.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    xs: &[SparseVec],
    ys: &[bool],
    sample_weights: &[f64],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let total_w: f64 = sample_weights.iter().sum();
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for ((x, &y), &sw) in xs.iter().zip(ys).zip(sample_weights) {
        let z = x.dot(weights) + bias;
        let sign = if y { 1.0 } else { -1.0 };
        loss += sw * log1p_exp_neg(sign * z);
        let r = sw * (sigmoid(z) - if y { 1.0 } else { 0.0 });
        for (i, v) in x.iter() {
            grad[i] += r * v;
        }
        grad_b += r;
    }
    let inv = 1.0 / total_w;
    loss *= inv;
    grad_b *= inv;
    let mut sq = 0.0;
    for (g, &w) in grad.iter_mut().zip(weights) {
        *g = *g * inv + l2 * w;
        sq += w * w;
    }
    (loss + 0.5 * l2 * sq, grad, grad_b)
}

fn class_weights(ys: &[bool], balanced: bool) -> Vec<f64> {
    if !balanced {
        return vec![1.0; ys.len()];
    }
    let n = ys.len() as f64;
    let pos = ys.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    ys.iter().map(|&y| if y { n / (2.0 * pos) } else { n / (2.0 * neg) }).collect()
}

/// Dense weights stored as `scale · v` so the L2 shrink of every weight is a
/// single multiply per step.
struct ScaledWeights {
    v: Vec<f64>,
    scale: f64,
}

impl ScaledWeights {
    fn new(dim: usize) -> Self {
        Self { v: vec![0.0; dim], scale: 1.0 }
    }

    fn dot(&self, x: &SparseVec) -> f64 {
        self.scale * x.dot(&self.v)
    }

    fn shrink(&mut self, factor: f64) {
        self.scale *= factor;
        if self.scale < 1e-9 {
            self.materialize();
        }
    }

    fn add(&mut self, i: usize, delta: f64) {
        self.v[i] += delta / self.scale;
    }

    fn materialize(&mut self) {
        let s = self.scale;
        self.v.iter_mut().for_each(|w| *w *= s);
        self.scale = 1.0;
    }

    fn into_dense(mut self) -> Vec<f64> {
        self.materialize();
        self.v
    }
}

fn full_loss(w: &ScaledWeights, bias: f64, xs: &[SparseVec], ys: &[bool], sw: &[f64], l2: f64) -> f64 {
    let total: f64 = sw.iter().sum();
    let mut loss = 0.0;
    for ((x, &y), &s) in xs.iter().zip(ys).zip(sw) {
        let z = w.dot(x) + bias;
        loss += s * log1p_exp_neg(if y { z } else { -z });
    }
    let sq: f64 = w.v.iter().map(|v| v * v).sum::<f64>() * w.scale * w.scale;
    loss / total + 0.5 * l2 * sq
}

/// Trains a logistic-regression model by mini-batch SGD. Each step applies
/// the gradient of the batch's weighted mean loss. Sample order per epoch is a
/// seeded permutation, so identical inputs give identical weights.
pub fn train(
    examples: &[(&str, bool)],
    spec: FeatureSpec,
    config: &TrainConfig,
    provenance: Provenance,
) -> Result<ModelArtifact, TrainError> {
    config.validate()?;
    spec.validate()?;
    let pos = examples.iter().filter(|(_, y)| *y).count();
    if examples.len() < 2 || pos == 0 || pos == examples.len() {
        return Err(TrainError::DegenerateLabels { n: examples.len(), positives: pos });
    }
    let featurizer = Featurizer::fit(spec, examples.iter().map(|(t, _)| *t))?;
    let xs: Vec<SparseVec> = examples.iter().map(|(t, _)| featurizer.transform(t)).collect();
    let ys: Vec<bool> = examples.iter().map(|(_, y)| *y).collect();
    let sw = class_weights(&ys, config.class_weighting);

    let mut w = ScaledWeights::new(spec.hash_dim);
    let mut bias = 0.0;
    let lr = config.learning_rate;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut residuals = Vec::with_capacity(config.batch_size);
    // Only slots present in some training vector can ever become non-zero.
    let touched: Vec<usize> = {
        let mut seen = vec![false; spec.hash_dim];
        xs.iter().flat_map(|x| x.indices.iter()).for_each(|&i| seen[i as usize] = true);
        (0..spec.hash_dim).filter(|&i| seen[i]).collect()
    };
    let mut avg = vec![0.0; touched.len()];
    let mut avg_bias = 0.0;
    let mut avg_steps = 0usize;
    for epoch in 0..config.epochs {
        let last = epoch + 1 == config.epochs;
        let order = seeded_permutation(xs.len(), mix64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9)));
        for batch in order.chunks(config.batch_size) {
            let batch_w: f64 = batch.iter().map(|&i| sw[i]).sum();
            residuals.clear();
            let mut grad_b = 0.0;
            for &i in batch {
                let z = w.dot(&xs[i]) + bias;
                let r = sw[i] * (sigmoid(z) - if ys[i] { 1.0 } else { 0.0 }) / batch_w;
                residuals.push(r);
                grad_b += r;
            }
            // w ← w − lr·(g_data + l2·w) = (1 − lr·l2)·w − lr·g_data
            w.shrink(1.0 - lr * config.l2);
            for (&i, &r) in batch.iter().zip(&residuals) {
                for (j, v) in xs[i].iter() {
                    w.add(j, -lr * r * v);
                }
            }
            bias -= lr * grad_b;
            if config.tail_averaging && last {
                for (a, &j) in avg.iter_mut().zip(&touched) {
                    *a += w.scale * w.v[j];
                }
                avg_bias += bias;
                avg_steps += 1;
            }
        }
        let loss = full_loss(&w, bias, &xs, &ys, &sw, config.l2);
        if !loss.is_finite() || !bias.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        loss_history.push(loss);
    }

    let weights: Vec<(u32, f64)> = if config.tail_averaging {
        let k = avg_steps as f64;
        bias = avg_bias / k;
        touched.iter().zip(&avg).filter(|(_, a)| **a != 0.0).map(|(&i, a)| (i as u32, a / k)).collect()
    } else {
        w.into_dense()
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .map(|(i, v)| (i as u32, v))
            .collect()
    };
    let mut provenance = provenance;
    if provenance.training_set_hash.is_empty() {
        provenance.training_set_hash = training_set_hash(examples);
    }
    Ok(ModelArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        featurizer,
        weights,
        bias,
        train_config: *config,
        provenance,
        threshold: 0.5,
        loss_history,
    })
}

pub fn training_set_hash(examples: &[(&str, bool)]) -> String {
    let mut buf = Vec::new();
    for (t, y) in examples {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        buf.extend_from_slice(t.as_bytes());
        buf.push(u8::from(*y));
    }
    sha256_hex(&buf)
}

impl ModelArtifact {
    /// An untrained model: all weights zero, so every score is exactly 0.5.
    pub fn zero(spec: FeatureSpec) -> Self {
        Self {
            format_version: ARTIFACT_FORMAT_VERSION,
            featurizer: Featurizer { spec, idf: None },
            weights: Vec::new(),
            bias: 0.0,
            train_config: TrainConfig::default(),
            provenance: Provenance::default(),
            threshold: 0.5,
            loss_history: Vec::new(),
        }
    }

    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.featurizer.spec.hash_dim];
        for &(i, v) in &self.weights {
            w[i as usize] = v;
        }
        w
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let m: ModelArtifact = serde_json::from_str(s).map_err(|e| TrainError::Artifact(e.to_string()))?;
        if m.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(TrainError::Artifact(format!("unsupported format version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Fast scorer with a dense copy of the weights.
    pub fn scorer(&self) -> Scorer<'_> {
        Scorer { model: self, dense: self.dense_weights() }
    }
}

pub struct Scorer<'a> {
    model: &'a ModelArtifact,
    dense: Vec<f64>,
}

impl Scorer<'_> {
    pub fn score(&self, text: &str) -> f64 {
        let x = self.model.featurizer.transform(text);
        sigmoid(x.dot(&self.dense) + self.model.bias)
    }

    pub fn predict(&self, text: &str) -> (f64, bool) {
        let s = self.score(text);
        (s, s >= self.model.threshold)
    }
}

/// `(sigmoid(w·x + b), score ≥ threshold)`.
pub fn predict(model: &ModelArtifact, text: &str) -> (f64, bool) {
    let x = model.featurizer.transform(text);
    let lookup: std::collections::HashMap<u32, f64> = model.weights.iter().copied().collect();
    let z: f64 = x.indices.iter().zip(&x.values).map(|(i, v)| lookup.get(i).copied().unwrap_or(0.0) * v).sum::<f64>() + model.bias;
    let s = sigmoid(z);
    (s, s >= model.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn small_spec() -> FeatureSpec {
        FeatureSpec { ngram_lo: 1, ngram_hi: 1, hash_dim: 1 << 12, tf_idf: false, lowercase: true }
    }

    /// 40 samples; positives contain "alpha", negatives contain "omega".
    fn separable() -> Vec<(String, bool)> {
        (0..40)
            .map(|i| {
                let pos = i % 2 == 0;
                let word = if pos { "alpha" } else { "omega" };
                (format!("filler{} {word} filler{}", i % 7, i % 5), pos)
            })
            .collect()
    }

    fn as_refs(v: &[(String, bool)]) -> Vec<(&str, bool)> {
        v.iter().map(|(t, y)| (t.as_str(), *y)).collect()
    }

    #[test]
    fn zero_model_scores_half() {
        let m = ModelArtifact::zero(small_spec());
        for t in ["", "anything", "alpha omega"] {
            assert_eq!(predict(&m, t), (0.5, true));
        }
    }

    #[test]
    fn separable_set_is_fit_perfectly() {
        let data = separable();
        let cfg = TrainConfig { learning_rate: 1.0, epochs: 20, batch_size: 4, l2: 0.0, seed: 1, class_weighting: false, tail_averaging: false };
        let m = train(&as_refs(&data), small_spec(), &cfg, Provenance::default()).unwrap();
        let scorer = m.scorer();
        let mut c = crate::evaluator::Confusion::default();
        for (t, y) in &data {
            let (s, label) = scorer.predict(t);
            assert_eq!((s, label), predict(&m, t));
            c.add(label, *y);
        }
        let r = crate::evaluator::MetricsReport::from_counts("t", crate::evaluator::Arm::Human1000, "m", c);
        assert_eq!(r.f1, 1.0);
        assert!(predict(&m, "alpha").1);
        assert!(!predict(&m, "omega").1);
    }

    #[test]
    fn loss_never_increases_across_epochs() {
        let data = separable();
        let cfg = TrainConfig { learning_rate: 0.5, epochs: 10, batch_size: 8, l2: 1e-3, seed: 4, class_weighting: false, tail_averaging: false };
        let m = train(&as_refs(&data), small_spec(), &cfg, Provenance::default()).unwrap();
        for w in m.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", m.loss_history);
        }
    }

    #[test]
    fn training_is_bit_identical() {
        let data = separable();
        let cfg = TrainConfig { seed: 9, ..TrainConfig::default() };
        let a = train(&as_refs(&data), small_spec(), &cfg, Provenance::default()).unwrap();
        let b = train(&as_refs(&data), small_spec(), &cfg, Provenance::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(ModelArtifact::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let data = vec![("a", true), ("b", true)];
        assert!(matches!(
            train(&data, small_spec(), &TrainConfig::default(), Provenance::default()),
            Err(TrainError::DegenerateLabels { .. })
        ));
        assert!(matches!(
            train(&[("a", true)], small_spec(), &TrainConfig::default(), Provenance::default()),
            Err(TrainError::DegenerateLabels { .. })
        ));
    }

    #[test]
    fn huge_learning_rate_reports_non_finite() {
        let data = separable();
        let cfg = TrainConfig { learning_rate: 1e308, epochs: 3, batch_size: 1, l2: 0.0, seed: 0, class_weighting: false, tail_averaging: false };
        assert!(matches!(
            train(&as_refs(&data), small_spec(), &cfg, Provenance::default()),
            Err(TrainError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let data = separable();
        let mut m = train(&as_refs(&data), small_spec(), &TrainConfig::default(), Provenance::default()).unwrap();
        let mut prev = usize::MAX;
        for k in 0..=20 {
            m.threshold = k as f64 / 20.0;
            let n = data.iter().filter(|(t, _)| predict(&m, t).1).count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn coin_flip_labels_give_chance_accuracy() {
        let corpus = generate(&SynthConfig::binary(2000, 0.5, 77));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let texts: Vec<&str> = corpus.iter().map(|s| s.text()).collect();
        let train_set: Vec<(&str, bool)> = texts[..1000].iter().map(|t| (*t, rng.gen::<bool>())).collect();
        let m = train(&train_set, FeatureSpec::default(), &TrainConfig::default(), Provenance::default()).unwrap();
        let scorer = m.scorer();
        // balanced test labels drawn from the true planting
        let test: Vec<(&str, bool)> = corpus.iter().skip(1000).map(|s| (s.text(), s.gold.as_deref() == Some("pos"))).collect();
        let acc = test.iter().filter(|(t, y)| scorer.predict(t).1 == *y).count() as f64 / test.len() as f64;
        assert!((acc - 0.5).abs() <= 0.08, "{acc}");
    }

    #[test]
    fn sgd_step_matches_analytic_gradient() {
        // One epoch with a batch covering the whole set is one full-gradient step.
        let data = separable();
        let refs = as_refs(&data);
        let cfg = TrainConfig { learning_rate: 0.3, epochs: 1, batch_size: 64, l2: 0.01, seed: 0, class_weighting: false, tail_averaging: false };
        let m = train(&refs, small_spec(), &cfg, Provenance::default()).unwrap();
        let xs: Vec<SparseVec> = refs.iter().map(|(t, _)| m.featurizer.transform(t)).collect();
        let ys: Vec<bool> = refs.iter().map(|(_, y)| *y).collect();
        let w0 = vec![0.0; small_spec().hash_dim];
        let (_, g, gb) = loss_and_gradient(&w0, 0.0, &xs, &ys, &vec![1.0; ys.len()], cfg.l2);
        let w = m.dense_weights();
        for (wi, gi) in w.iter().zip(&g) {
            assert!((wi + cfg.learning_rate * gi).abs() < 1e-12);
        }
        assert!((m.bias + cfg.learning_rate * gb).abs() < 1e-12);
    }
}
