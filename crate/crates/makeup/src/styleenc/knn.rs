//! Leave-one-out KNN style classification over cosine distance.

use crate::error::{Error, Result};

/// Majority vote over the `k` nearest neighbours by cosine similarity; ties
/// are broken in favour of the class of the single nearest neighbour among
/// the tied classes.
pub fn knn_accuracy(embeddings: &[Vec<f32>], labels: &[u32], k: usize) -> Result<f32> {
    let n = embeddings.len();
    if n != labels.len() {
        return Err(Error::ShapeMismatch("embeddings vs labels length".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be in [1, {})",
            n
        )));
    }
    let norms: Vec<f32> = embeddings
        .iter()
        .map(|e| e.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12))
        .collect();

    let mut correct = 0usize;
    for i in 0..n {
        let mut sims: Vec<(f32, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dot: f32 = embeddings[i]
                    .iter()
                    .zip(&embeddings[j])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j]), j)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let mut counts: std::collections::BTreeMap<u32, usize> = Default::default();
        for &(_, j) in top {
            *counts.entry(labels[j]).or_insert(0) += 1;
        }
        let best = counts.values().copied().max().unwrap();
        let tied: Vec<u32> = counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(&l, _)| l)
            .collect();
        let predicted = if tied.len() == 1 {
            tied[0]
        } else {
            // nearest neighbour whose label is among the tied classes
            top.iter()
                .map(|&(_, j)| labels[j])
                .find(|l| tied.contains(l))
                .unwrap()
        };
        if predicted == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f32 / n as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_clustered_embeddings_score_one() {
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3u32 {
            for _ in 0..4 {
                let mut e = vec![0.0f32; 3];
                e[class as usize] = 1.0;
                embeddings.push(e);
                labels.push(class);
            }
        }
        assert_eq!(knn_accuracy(&embeddings, &labels, 1).unwrap(), 1.0);
        assert_eq!(knn_accuracy(&embeddings, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        let mut rng = gradtape::nn::SplitMix64::new(0);
        let classes = 5u32;
        let per = 40usize;
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for class in 0..classes {
            for _ in 0..per {
                embeddings.push((0..16).map(|_| rng.normal()).collect());
                labels.push(class);
            }
        }
        let acc = knn_accuracy(&embeddings, &labels, 5).unwrap();
        let chance = 1.0 / classes as f32;
        assert!(
            (acc - chance).abs() < 0.12,
            "expected near-chance accuracy, got {acc} (chance {chance})"
        );
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let e = vec![vec![1.0f32], vec![0.5]];
        assert!(knn_accuracy(&e, &[0, 1], 2).is_err());
        assert!(knn_accuracy(&e, &[0, 1], 0).is_err());
    }
}
