//! Token n-gram language model used as the desk perplexity scorer.

use std::collections::{HashMap, HashSet};

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const NEWLINE: &str = "<nl>";

/// Anything that can assign a log-likelihood to a text.
pub trait SequenceScorer {
    /// Total natural-log likelihood and the number of scored tokens.
    fn log_likelihood(&self, text: &str) -> (f64, usize);

    fn perplexity(&self, text: &str) -> f64 {
        let (ll, n) = self.log_likelihood(text);
        if n == 0 {
            return 1.0;
        }
        (-ll / n as f64).exp()
    }
}

/// Split text into words, single punctuation marks and newline tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NEWLINE.to_string());
        }
        let mut word = String::new();
        for c in line.chars() {
            if c.is_alphanumeric() || c == '\'' {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Order-n model with add-one smoothing over the training vocabulary plus
/// one unknown-token slot.
#[derive(Debug, Clone)]
pub struct NGramScorer {
    order: usize,
    vocab_size: usize,
    context_counts: HashMap<Vec<String>, usize>,
    ngram_counts: HashMap<Vec<String>, usize>,
}

impl NGramScorer {
    pub fn fit<S: AsRef<str>>(order: usize, corpus: &[S]) -> Self {
        assert!(order >= 1, "n-gram order must be at least 1");
        let mut vocab: HashSet<String> = HashSet::new();
        let mut context_counts = HashMap::new();
        let mut ngram_counts = HashMap::new();
        for text in corpus {
            let toks = padded(order, text.as_ref());
            vocab.extend(toks.iter().skip(order - 1).cloned());
            for w in toks.windows(order) {
                *ngram_counts.entry(w.to_vec()).or_insert(0) += 1;
                *context_counts.entry(w[..order - 1].to_vec()).or_insert(0) += 1;
            }
        }
        NGramScorer { order, vocab_size: vocab.len() + 1, context_counts, ngram_counts }
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

fn padded(order: usize, text: &str) -> Vec<String> {
    let mut toks: Vec<String> = std::iter::repeat_n(BOS.to_string(), order - 1).collect();
    toks.extend(tokenize(text));
    toks.push(EOS.to_string());
    toks
}

impl SequenceScorer for NGramScorer {
    fn log_likelihood(&self, text: &str) -> (f64, usize) {
        let toks = padded(self.order, text);
        let v = self.vocab_size as f64;
        let mut ll = 0.0;
        let mut n = 0;
        for w in toks.windows(self.order) {
            let c = *self.ngram_counts.get(w).unwrap_or(&0) as f64;
            let h = *self.context_counts.get(&w[..self.order - 1]).unwrap_or(&0) as f64;
            ll += ((c + 1.0) / (h + v)).ln();
            n += 1;
        }
        (ll, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lines() {
        assert_eq!(tokenize("Black - cook. .\nWhite"), ["Black", "-", "cook", ".", ".", "<nl>", "White"]);
    }

    #[test]
    fn probabilities_normalize_over_vocab() {
        let m = NGramScorer::fit(3, &["a - b", "a - c"]);
        // every continuation of a seen context, plus the unknown slot, sums to 1
        let ctx = vec!["a".to_string(), "-".to_string()];
        let h = m.context_counts[&ctx] as f64;
        let mut vocab: Vec<String> = m.ngram_counts.keys().map(|k| k[2].clone()).collect();
        vocab.sort();
        vocab.dedup();
        assert_eq!(vocab.len() + 1, m.vocab_size);
        let total: f64 = vocab
            .iter()
            .map(|w| {
                let mut k = ctx.clone();
                k.push(w.clone());
                (*m.ngram_counts.get(&k).unwrap_or(&0) as f64 + 1.0) / (h + m.vocab_size as f64)
            })
            .sum::<f64>()
            + 1.0 / (h + m.vocab_size as f64);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_raises_perplexity() {
        let clean = ["Jack - Male\nAnna - Female\n", "Ming - Male\nRosa - Female\n"];
        let m = NGramScorer::fit(3, &clean);
        let noisy = "Jack - - Male. . .\n\n\nAnna - Female\n";
        assert!(m.perplexity(noisy) > m.perplexity(clean[0]));
    }
}
