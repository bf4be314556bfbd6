//! Retrieval-style classification and ranking metrics.

use crate::error::{Error, Result};
use crate::eval::embed::TextEmbedder;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Classify each text by its nearest label description under cosine
/// similarity. Ties resolve to the lowest label index.
pub fn retrieval_classify<E: TextEmbedder>(
    embedder: &E,
    texts: &[String],
    label_texts: &[String],
) -> Result<Vec<usize>> {
    if label_texts.is_empty() {
        return Err(Error::validation("no candidate labels"));
    }
    let labels: Vec<Vec<f64>> = label_texts.iter().map(|t| embedder.embed(t)).collect();
    Ok(texts
        .iter()
        .map(|t| {
            let e = embedder.embed(t);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, l) in labels.iter().enumerate() {
                let s = cosine(&e, l);
                if s > best.1 {
                    best = (i, s);
                }
            }
            best.0
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() || predicted.is_empty() {
        return Err(Error::validation("prediction/gold length mismatch or empty"));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Micro-averaged F1 over single-label multi-class predictions: pooled true
/// positives, false positives and false negatives across classes.
pub fn micro_f1(predicted: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    if predicted.len() != gold.len() || predicted.is_empty() {
        return Err(Error::validation("prediction/gold length mismatch or empty"));
    }
    let (mut tp, mut fp, mut fnb) = (0usize, 0usize, 0usize);
    for c in 0..n_classes {
        for (p, g) in predicted.iter().zip(gold) {
            match (*p == c, *g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnb += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fnb;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Average precision for one ranked list: items sorted by score descending
/// (ties keep input order), AP = mean over relevant items of precision at
/// their rank. None when nothing is relevant.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<Option<f64>> {
    if scores.len() != relevant.len() {
        return Err(Error::validation("scores/relevance length mismatch"));
    }
    if !relevant.iter().any(|&r| r) {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / hits as f64))
}

/// Mean of per-label average precisions over the item ranking; labels with
/// no positive item are skipped.
pub fn mean_average_precision(
    label_scores: &[Vec<f64>],
    label_relevance: &[Vec<bool>],
) -> Result<f64> {
    if label_scores.len() != label_relevance.len() || label_scores.is_empty() {
        return Err(Error::validation("label score/relevance mismatch or empty"));
    }
    let mut aps = Vec::new();
    for (scores, rel) in label_scores.iter().zip(label_relevance) {
        if let Some(ap) = average_precision(scores, rel)? {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::validation("no label has a relevant item"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::embed::HashedBowEmbedder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn retrieval_picks_lexically_nearest_label() {
        let e = HashedBowEmbedder::default();
        let labels = vec!["dog barking".to_string(), "piano music".to_string()];
        let texts = vec![
            "a dog is barking outside".to_string(),
            "gentle piano music plays".to_string(),
        ];
        assert_eq!(retrieval_classify(&e, &texts, &labels).unwrap(), vec![0, 1]);
    }

    #[test]
    fn retrieval_tie_breaks_to_lowest_index() {
        let e = HashedBowEmbedder::default();
        // zero-vector text is equidistant (cosine 0) from every label
        let labels = vec!["aaa".to_string(), "bbb".to_string()];
        let texts = vec!["???".to_string()];
        assert_eq!(retrieval_classify(&e, &texts, &labels).unwrap(), vec![0]);
    }

    #[test]
    fn accuracy_closed_forms() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn micro_f1_equals_accuracy_for_single_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(2..6);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let f1 = micro_f1(&pred, &gold, k).unwrap();
            let acc = accuracy(&pred, &gold).unwrap();
            assert!((f1 - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn average_precision_known_cases() {
        // perfect ranking
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, true, false])
            .unwrap()
            .unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
        // relevant at ranks 1 and 3: (1/1 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true])
            .unwrap()
            .unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // nothing relevant
        assert_eq!(average_precision(&[0.5], &[false]).unwrap(), None);
    }

    #[test]
    fn average_precision_ties_keep_input_order() {
        // equal scores: index 0 outranks index 1
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap().unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    /// Literal precision@k re-computation over every cutoff.
    fn ap_oracle(scores: &[f64], relevant: &[bool]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let total_rel = relevant.iter().filter(|&&r| r).count();
        let mut sum = 0.0;
        for k in 1..=order.len() {
            if relevant[order[k - 1]] {
                let rel_at_k = order[..k].iter().filter(|&&i| relevant[i]).count();
                sum += rel_at_k as f64 / k as f64;
            }
        }
        sum / total_rel as f64
    }

    #[test]
    fn average_precision_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let relevant: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            if !relevant.iter().any(|&r| r) {
                continue;
            }
            let ap = average_precision(&scores, &relevant).unwrap().unwrap();
            assert!((ap - ap_oracle(&scores, &relevant)).abs() < 1e-12);
        }
    }

    #[test]
    fn map_averages_over_labels_with_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]];
        let rel = vec![
            vec![true, false],  // AP 1.0
            vec![true, false],  // AP 0.5 (relevant ranked second)
            vec![false, false], // skipped
        ];
        let map = mean_average_precision(&scores, &rel).unwrap();
        assert!((map - 0.75).abs() < 1e-12);
    }

    #[test]
    fn map_with_no_positives_anywhere_is_error() {
        assert!(mean_average_precision(&[vec![0.5]], &[vec![false]]).is_err());
    }
}
