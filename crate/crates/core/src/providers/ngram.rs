//! Toy bidirectional bigram model.
//!
//! Scores token `v` at a position as `ln P(v | left) + ln P(right | v)` using
//! add-alpha smoothed counts, falling back to the unigram prior when the left
//! neighbour is masked or absent and dropping the right factor when the right
//! neighbour is masked or absent.

use serde::{Deserialize, Serialize};

use super::{position_from_logits, LogitBundle, LogitProvider, ProviderError, QueryOptions};
use crate::diffusion::{Canvas, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub vocab_size: u32,
    /// Training sequences; bigrams never span two sequences.
    pub corpus: Vec<Vec<TokenId>>,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
}

fn default_smoothing() -> f64 {
    0.1
}

#[derive(Debug, Clone)]
pub struct NGramProvider {
    vocab: Vocabulary,
    smoothing: f64,
    unigram: Vec<f64>,
    bigram: Vec<Vec<f64>>,
    row_totals: Vec<f64>,
}

impl NGramProvider {
    pub fn new(config: &NGramConfig) -> Result<Self, ProviderError> {
        let vocab = Vocabulary::with_trailing_mask(config.vocab_size)?;
        Self::train(vocab, &config.corpus, config.smoothing)
    }

    pub fn train(
        vocab: Vocabulary,
        corpus: &[Vec<TokenId>],
        smoothing: f64,
    ) -> Result<Self, ProviderError> {
        if !(smoothing > 0.0) || !smoothing.is_finite() {
            return Err(ProviderError::Config(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        let v = vocab.size() as usize;
        let mut unigram = vec![0.0; v];
        let mut bigram = vec![vec![0.0; v]; v];
        for seq in corpus {
            if let Some(bad) = seq.iter().find(|&&t| !vocab.is_real(t)) {
                return Err(ProviderError::Config(format!(
                    "corpus token {bad} is not a real token"
                )));
            }
            for &t in seq {
                unigram[t as usize] += 1.0;
            }
            for pair in seq.windows(2) {
                bigram[pair[0] as usize][pair[1] as usize] += 1.0;
            }
        }
        let row_totals = bigram.iter().map(|r| r.iter().sum()).collect();
        Ok(Self {
            vocab,
            smoothing,
            unigram,
            bigram,
            row_totals,
        })
    }

    fn ln_next(&self, prev: TokenId, next: usize) -> f64 {
        let a = self.smoothing;
        let v = self.vocab.size() as f64;
        let prev = prev as usize;
        ((self.bigram[prev][next] + a) / (self.row_totals[prev] + a * v)).ln()
    }

    fn ln_prior(&self, tok: usize) -> f64 {
        let a = self.smoothing;
        let total: f64 = self.unigram.iter().sum();
        ((self.unigram[tok] + a) / (total + a * self.vocab.size() as f64)).ln()
    }

    /// Log-score row for generation position `i`.
    pub fn logits_at(&self, canvas: &Canvas, i: usize) -> Vec<f64> {
        let mask = self.vocab.mask_id();
        let prompt = canvas.prompt();
        let gen = canvas.gen();
        let left = if i == 0 {
            prompt.last().copied()
        } else {
            Some(gen[i - 1])
        }
        .filter(|&t| t != mask);
        let right = gen.get(i + 1).copied().filter(|&t| t != mask);

        (0..self.vocab.size() as usize)
            .map(|v| {
                let base = match left {
                    Some(l) => self.ln_next(l, v),
                    None => self.ln_prior(v),
                };
                base + right.map_or(0.0, |r| self.ln_next(v as TokenId, r as usize))
            })
            .collect()
    }
}

impl LogitProvider for NGramProvider {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        if canvas.vocab() != self.vocab {
            return Err(ProviderError::Config(
                "canvas vocabulary differs from the model vocabulary".into(),
            ));
        }
        let positions = (0..canvas.gen_len())
            .map(|i| position_from_logits(i, &self.logits_at(canvas, i), opts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LogitBundle::new(positions))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "ngram".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 0;
    const B: TokenId = 1;
    const SPACE: TokenId = 2;

    fn ab_corpus() -> Vec<Vec<TokenId>> {
        // "ab ab ab"
        vec![vec![A, B, SPACE, A, B, SPACE, A, B]]
    }

    #[test]
    fn bigram_predicts_b_after_a() {
        let vocab = Vocabulary::with_trailing_mask(3).unwrap();
        let model = NGramProvider::train(vocab, &ab_corpus(), 0.1).unwrap();
        let canvas = Canvas::new(vocab, vec![A], 3, 3).unwrap();
        let bundle = model.query(&canvas, QueryOptions::default()).unwrap();
        assert_eq!(bundle.positions[0].argmax, B);

        // Hand-built table: after 'a' the counts are b:3, so
        // P(b|a) = 3.1 / 3.3 and P(a|a) = P(' '|a) = 0.1 / 3.3.
        let expected = (3.1f64 / 3.3).ln() - (0.1f64 / 3.3).ln();
        assert!((bundle.positions[0].margin() - expected).abs() < 1e-12);
    }

    #[test]
    fn right_context_is_used() {
        let vocab = Vocabulary::with_trailing_mask(3).unwrap();
        let model = NGramProvider::train(vocab, &ab_corpus(), 0.1).unwrap();
        let m = vocab.mask_id();
        // Left neighbour masked, right neighbour 'b': the only token followed by b is a.
        let canvas = Canvas::from_parts(vocab, vec![], vec![m, m, B], 1, 3).unwrap();
        let bundle = model.query(&canvas, QueryOptions::default()).unwrap();
        assert_eq!(bundle.positions[1].argmax, A);
    }

    #[test]
    fn full_rows_are_consistent() {
        let vocab = Vocabulary::with_trailing_mask(3).unwrap();
        let model = NGramProvider::train(vocab, &ab_corpus(), 0.5).unwrap();
        let canvas = Canvas::new(vocab, vec![SPACE], 4, 4).unwrap();
        let opts = QueryOptions {
            want_full: true,
            want_entropy: true,
        };
        let bundle = model.query(&canvas, opts).unwrap();
        bundle.validate(4, vocab).unwrap();
    }

    #[test]
    fn rejects_bad_training_input() {
        let vocab = Vocabulary::with_trailing_mask(3).unwrap();
        assert!(NGramProvider::train(vocab, &[vec![0, 5]], 0.1).is_err());
        assert!(NGramProvider::train(vocab, &ab_corpus(), 0.0).is_err());
    }
}
