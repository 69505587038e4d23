//! Seeded toy tagging task for tests, benches and smoke runs.
//!
//! The vocabulary has `vocab` word types, of which the first `aspect_types`
//! are aspect words. A token is tagged `B` when it is an aspect word whose
//! predecessor is not, `I` when both are aspect words, and `O` otherwise.
//! The rule depends on one token of left context, so a single convolution
//! with kernel at least 3 can represent it.

use std::collections::HashMap;

use rand::Rng as _;

use crate::data::{build_tables, EmbeddingMap, Label, TaggedSentence, Vocab};
use crate::layers::DoubleEmbedding;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub vocab: usize,
    pub aspect_types: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of a uniformly random replacement label, training split only.
    pub label_noise: f64,
    pub general_dim: usize,
    pub domain_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab: 100,
            aspect_types: 20,
            train: 200,
            validation: 50,
            test: 50,
            min_len: 4,
            max_len: 14,
            label_noise: 0.0,
            general_dim: 30,
            domain_dim: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Vec<TaggedSentence>,
    pub validation: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
    pub general: EmbeddingMap,
    pub domain: EmbeddingMap,
    pub vocab: Vocab,
    pub embedding: DoubleEmbedding,
}

pub fn word(i: usize, aspect_types: usize) -> String {
    if i < aspect_types {
        format!("a{i}")
    } else {
        format!("w{i}")
    }
}

/// Gold labels of a token sequence under the task rule.
pub fn rule_labels(tokens: &[String]) -> Vec<Label> {
    let is_aspect = |t: &String| t.starts_with('a');
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match (is_aspect(t), i > 0 && is_aspect(&tokens[i - 1])) {
            (false, _) => Label::O,
            (true, false) => Label::B,
            (true, true) => Label::I,
        })
        .collect()
}

fn sentence(cfg: &SyntheticConfig, rng: &mut Rng, noise: f64) -> TaggedSentence {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut tokens = Vec::with_capacity(len);
    while tokens.len() < len {
        if rng.gen::<f64>() < 0.2 {
            // an aspect phrase of one to three words
            for _ in 0..rng.gen_range(1..=3usize) {
                tokens.push(word(rng.gen_range(0..cfg.aspect_types), cfg.aspect_types));
            }
        } else {
            tokens.push(word(rng.gen_range(cfg.aspect_types..cfg.vocab), cfg.aspect_types));
        }
    }
    tokens.truncate(len);
    let mut labels = rule_labels(&tokens);
    for l in &mut labels {
        if noise > 0.0 && rng.gen::<f64>() < noise {
            *l = Label::ALL[rng.gen_range(0..3)];
        }
    }
    TaggedSentence::new(tokens, labels).expect("lengths agree")
}

fn vectors(cfg: &SyntheticConfig, dim: usize, stream: u64) -> EmbeddingMap {
    let mut rng = seed::rng(seed::derive(cfg.seed, &[stream]));
    let vectors: HashMap<String, Vec<f64>> = (0..cfg.vocab)
        .map(|i| {
            let v = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (word(i, cfg.aspect_types), v)
        })
        .collect();
    EmbeddingMap {
        dim,
        vectors,
        skipped: 0,
    }
}

/// `word v1 ... vd` text in a stable (sorted) order.
pub fn embeddings_text(map: &EmbeddingMap) -> String {
    let mut words: Vec<&String> = map.vectors.keys().collect();
    words.sort();
    let mut out = String::new();
    for w in words {
        out.push_str(w);
        for v in &map.vectors[w] {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticTask {
    assert!(cfg.aspect_types > 0 && cfg.aspect_types < cfg.vocab);
    assert!(cfg.min_len >= 1 && cfg.min_len <= cfg.max_len);
    let split = |n: usize, stream: u64, noise: f64| -> Vec<TaggedSentence> {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[stream]));
        (0..n).map(|_| sentence(cfg, &mut rng, noise)).collect()
    };
    let train = split(cfg.train, 1, cfg.label_noise);
    let validation = split(cfg.validation, 2, 0.0);
    let test = split(cfg.test, 3, 0.0);
    let general = vectors(cfg, cfg.general_dim, 4);
    let domain = vectors(cfg, cfg.domain_dim, 5);
    let vocab = Vocab::build(&train);
    let (embedding, _) = build_tables(&vocab, &general, &domain, false).expect("valid tables");
    SyntheticTask {
        train,
        validation,
        test,
        general,
        domain,
        vocab,
        embedding,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_embeddings;

    #[test]
    fn labels_follow_rule() {
        let t: Vec<String> = ["w30", "a1", "a2", "w40", "a3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(rule_labels(&t), vec![Label::O, Label::B, Label::I, Label::O, Label::B]);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SyntheticConfig::default();
        let (a, b) = (generate(&cfg), generate(&cfg));
        assert_eq!(a.train, b.train);
        assert_eq!(a.embedding, b.embedding);
        let c = generate(&SyntheticConfig { seed: 1, ..cfg });
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn embedding_text_parses_back() {
        let task = generate(&SyntheticConfig::default());
        let back = parse_embeddings(&embeddings_text(&task.general), 30);
        assert_eq!(back.vectors, task.general.vectors);
    }
}
