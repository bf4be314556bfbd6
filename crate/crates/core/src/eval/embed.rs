//! Text embeddings for retrieval-style evaluation. The default embedder is
//! a hashed bag-of-words: cheap, deterministic, and good enough to rank
//! lexically related texts.

/// Maps text to a fixed-dimension vector. Implementations must be pure.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag of lowercased alphanumeric words, each hashed into one of `dim`
/// buckets, L2-normalized. Text with no words embeds to the zero vector.
pub struct HashedBowEmbedder {
    pub dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 256 }
    }
}

fn bucket(word: &str, dim: usize) -> usize {
    let mut h = 0xcbf29ce484222325u64;
    for b in word.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    (h % dim as u64) as usize
}

impl TextEmbedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for word in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            v[bucket(word, self.dim)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        v
    }
}
