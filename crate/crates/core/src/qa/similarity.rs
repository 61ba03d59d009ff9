//! Title similarity used to rank multiple-choice distractors.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use crate::normalize::normalize;

/// Symmetric similarity in `[0, 1]` with `score(a, a) == 1`.
pub trait SimilarityProvider: Send + Sync {
    fn score(&self, a: &str, b: &str) -> f64;
}

/// Cosine similarity over character-bigram counts of the normalized strings.
/// Strings shorter than two characters fall back to a single unigram.
#[derive(Debug, Clone, Copy, Default)]
pub struct BigramCosine;

// Ordered so the dot product sums in the same order whichever side leads.
fn bigrams(s: &str) -> BTreeMap<(char, char), u32> {
    let chars: Vec<char> = normalize(s).chars().collect();
    let mut out = BTreeMap::new();
    match chars.len() {
        0 => {}
        1 => *out.entry((chars[0], '\0')).or_insert(0) += 1,
        _ => {
            for w in chars.windows(2) {
                *out.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
    }
    out
}

impl SimilarityProvider for BigramCosine {
    fn score(&self, a: &str, b: &str) -> f64 {
        if normalize(a) == normalize(b) {
            return 1.0;
        }
        let (va, vb) = (bigrams(a), bigrams(b));
        let dot: f64 = va.iter().filter_map(|(k, &x)| vb.get(k).map(|&y| (x * y) as f64)).sum();
        let norm = |v: &BTreeMap<(char, char), u32>| v.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
        let denom = norm(&va) * norm(&vb);
        if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(0.0, 1.0)
        }
    }
}

/// Something that turns text into a dense vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String>;
}

/// Cosine similarity over embeddings from an [`Embedder`], cached per text.
/// Embedding failures score as 0.
pub struct EmbeddingSimilarity<E> {
    embedder: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> EmbeddingSimilarity<E> {
    pub fn new(embedder: E) -> Self {
        EmbeddingSimilarity { embedder, cache: Mutex::new(HashMap::new()) }
    }

    fn vector(&self, text: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Some(v.clone());
        }
        match self.embedder.embed(text) {
            Ok(v) => {
                self.cache.lock().unwrap().insert(text.to_string(), v.clone());
                Some(v)
            }
            Err(e) => {
                log::warn!("embedding failed for {text:?}: {e}");
                None
            }
        }
    }
}

impl<E: Embedder> SimilarityProvider for EmbeddingSimilarity<E> {
    fn score(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let (Some(va), Some(vb)) = (self.vector(a), self.vector(b)) else {
            return 0.0;
        };
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(0.0, 1.0)
        }
    }
}

/// Posts `{"model", "input"}` and reads `{"embedding": [...]}`.
pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut req = ureq::post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let resp: serde_json::Value = req
            .send_json(&body)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        serde_json::from_value(resp["embedding"].clone()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anemia_titles_rank_together() {
        let s = BigramCosine;
        assert_eq!(s.score("Mild Anemia", "Mild Anemia"), 1.0);
        assert!(s.score("Mild Anemia", "Moderate Anemia") > s.score("Mild Anemia", "Thrombosis Formation"));
    }

    struct Fixed;
    impl Embedder for Fixed {
        fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
            Ok(vec![text.len() as f64, 1.0])
        }
    }

    #[test]
    fn embedding_similarity_is_cosine() {
        let s = EmbeddingSimilarity::new(Fixed);
        assert_eq!(s.score("ab", "ab"), 1.0);
        let expected = (2.0 * 1.0 + 1.0) / (5f64.sqrt() * 2f64.sqrt());
        assert!((s.score("ab", "a") - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bigram_cosine_contract(a in "\\PC{0,12}", b in "\\PC{0,12}") {
            let s = BigramCosine;
            prop_assert!((s.score(&a, &a) - 1.0).abs() < 1e-9);
            let ab = s.score(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - s.score(&b, &a)).abs() < 1e-12);
        }
    }
}
