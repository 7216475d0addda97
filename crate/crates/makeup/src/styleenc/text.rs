//! Frozen text embedder: hashing tokenizer over a seeded embedding table,
//! mean pool, fixed linear projection. Stands in for a pretrained text tower
//! by giving each description a distinct, reproducible anchor.

use gradtape::nn::SplitMix64;
use gradtape::Tensor;

pub const VOCAB_SIZE: usize = 2048;

/// Prompt template used for the image-text objective.
pub const STYLE_PROMPT_TEMPLATE: &str =
    "Photography of a person with makeup. The makeup is [makeup]";

pub fn style_prompt(description: &str) -> String {
    STYLE_PROMPT_TEMPLATE.replace("[makeup]", description)
}

pub struct TextEmbedder {
    table: Vec<Vec<f32>>, // VOCAB_SIZE x dim
    proj_w: Vec<Vec<f32>>, // dim x dim
    proj_b: Vec<f32>,
    dim: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl TextEmbedder {
    pub fn new(seed: u64, dim: usize) -> TextEmbedder {
        let mut rng = SplitMix64::new(seed ^ 0x7e47_e47e);
        let std = (1.0 / dim as f32).sqrt();
        let table = (0..VOCAB_SIZE)
            .map(|_| (0..dim).map(|_| rng.normal() * std).collect())
            .collect();
        let proj_w = (0..dim)
            .map(|_| (0..dim).map(|_| rng.normal() * std).collect())
            .collect();
        let proj_b = vec![0.0; dim];
        TextEmbedder {
            table,
            proj_w,
            proj_b,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn project(&self, v: &[f32]) -> Vec<f32> {
        (0..self.dim)
            .map(|o| {
                self.proj_b[o]
                    + (0..self.dim)
                        .map(|i| self.proj_w[o][i] * v[i])
                        .sum::<f32>()
            })
            .collect()
    }

    /// Per-token projected embeddings, `[T, dim]`. Empty text maps to a
    /// single zero token row.
    pub fn token_embeddings(&self, text: &str) -> Tensor {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Tensor::zeros(&[1, self.dim]);
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            let row = &self.table[(fnv1a(t) % VOCAB_SIZE as u64) as usize];
            data.extend(self.project(row));
        }
        Tensor::from_vec(&[tokens.len(), self.dim], data)
    }

    /// Pooled text embedding: mean over token rows, then the frozen linear
    /// projection (equal to the mean of projected tokens).
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return vec![0.0; self.dim];
        }
        let mut mean = vec![0.0f32; self.dim];
        for t in &tokens {
            let row = &self.table[(fnv1a(t) % VOCAB_SIZE as u64) as usize];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= tokens.len() as f32;
        }
        self.project(&mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct_per_description() {
        let a = TextEmbedder::new(0, 64);
        let b = TextEmbedder::new(0, 64);
        let e1 = a.embed(&style_prompt("A bold crimson lip."));
        let e2 = b.embed(&style_prompt("A bold crimson lip."));
        assert_eq!(e1, e2);
        let e3 = a.embed(&style_prompt("A sheer teal eye shadow."));
        assert_ne!(e1, e3);
    }

    #[test]
    fn pooling_and_projection_commute() {
        let t = TextEmbedder::new(3, 32);
        let text = "soft plum lip at 60% depth";
        let tokens = t.token_embeddings(text);
        let pooled = t.embed(text);
        let n = tokens.rows();
        for d in 0..32 {
            let mean: f32 = (0..n).map(|r| tokens.at2(r, d)).sum::<f32>() / n as f32;
            assert!((mean - pooled[d]).abs() < 1e-5);
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Dewy minimalist, 40% depth!"),
            vec!["dewy", "minimalist", "40", "depth"]
        );
    }
}
