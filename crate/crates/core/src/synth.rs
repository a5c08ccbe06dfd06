//! Seeded synthetic corpora with a planted signal.
//!
//! Every text is a bag of filler tokens. Samples of a class additionally carry
//! one or more tokens drawn from that class's signal vocabulary, so the label
//! is recoverable from the text and the exact planting is known to tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabeledSample, TextSample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Class names and their sampling weights. A binary task is
    /// `[("pos", 0.3), ("neg", 0.7)]` with `background` naming the class that
    /// carries no signal.
    pub classes: Vec<(String, f64)>,
    /// Class that gets no signal tokens, if any.
    pub background: Option<String>,
    pub signal_vocab: usize,
    pub filler_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub signal_tokens: usize,
    /// Probability that a background sample carries a stray signal token of a
    /// random class. Makes the task imperfectly separable.
    pub stray_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Binary planted-signal corpus: `pos` at `positive_rate`, `neg` otherwise.
    pub fn binary(n: usize, positive_rate: f64, seed: u64) -> Self {
        Self {
            n,
            classes: vec![("pos".into(), positive_rate), ("neg".into(), 1.0 - positive_rate)],
            background: Some("neg".into()),
            signal_vocab: 150,
            filler_vocab: 2000,
            min_words: 8,
            max_words: 20,
            signal_tokens: 1,
            stray_rate: 0.04,
            seed,
        }
    }

    /// Balanced binary corpus where each positive carries three signal tokens
    /// out of 40. A linear student needs roughly 1000 labels to cover the
    /// signal vocabulary; 250 leave gaps.
    pub fn distillation(n: usize, seed: u64) -> Self {
        Self { signal_vocab: 40, filler_vocab: 1000, signal_tokens: 3, ..Self::binary(n, 0.5, seed) }
    }

    /// Multi-class corpus where every class carries its own signal.
    pub fn multiclass(n: usize, classes: &[&str], seed: u64) -> Self {
        let w = 1.0 / classes.len() as f64;
        Self {
            n,
            classes: classes.iter().map(|c| (c.to_string(), w)).collect(),
            background: None,
            signal_vocab: 40,
            filler_vocab: 1000,
            min_words: 6,
            max_words: 14,
            signal_tokens: 1,
            stray_rate: 0.0,
            seed,
        }
    }
}

fn filler_word(i: usize) -> String {
    const SYL: [&str; 16] = [
        "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "we", "ya", "zo", "be", "da", "fi", "gu",
    ];
    format!("{}{}{}", SYL[i % 16], SYL[(i / 16) % 16], SYL[(i / 256) % 16])
}

/// Signal token `k` of class `class`.
pub fn signal_word(class: &str, k: usize) -> String {
    format!("{}x{k}", class.to_lowercase().replace(|c: char| !c.is_ascii_alphanumeric(), ""))
}

pub fn generate(cfg: &SynthConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_w: f64 = cfg.classes.iter().map(|(_, w)| w).sum();
    let signal_classes: Vec<&str> = cfg
        .classes
        .iter()
        .map(|(c, _)| c.as_str())
        .filter(|c| Some(*c) != cfg.background.as_deref())
        .collect();
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut r = rng.gen::<f64>() * total_w;
        let mut class = cfg.classes.last().map(|(c, _)| c.as_str()).unwrap_or("");
        for (c, w) in &cfg.classes {
            if r < *w {
                class = c;
                break;
            }
            r -= w;
        }
        let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
        let mut words: Vec<String> = (0..n_words)
            .map(|_| filler_word(rng.gen_range(0..cfg.filler_vocab)))
            .collect();
        let is_background = Some(class) == cfg.background.as_deref();
        if !is_background {
            for _ in 0..cfg.signal_tokens {
                words.push(signal_word(class, rng.gen_range(0..cfg.signal_vocab)));
            }
        } else if !signal_classes.is_empty() && rng.gen::<f64>() < cfg.stray_rate {
            let c = signal_classes.choose(&mut rng).expect("non-empty");
            words.push(signal_word(c, rng.gen_range(0..cfg.signal_vocab)));
        }
        words.shuffle(&mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "synthetic".to_string());
        samples.push(LabeledSample {
            sample: TextSample {
                id: format!("syn-{i:06}"),
                text: words.join(" "),
                meta,
            },
            gold: Some(class.to_string()),
            surrogate: None,
        });
    }
    Corpus::new(samples).expect("generated ids are unique and texts non-empty")
}
