use std::collections::BTreeMap;

use crate::config::LoopConfig;
use crate::frontend::BinaryDescriptor;
use crate::mapping::KeyframeId;

use super::vocabulary::{build_vocabulary, Vocabulary};

/// Inverted-index keyframe database over the bag-of-words vocabulary.
///
/// The vocabulary is trained per run on the first few keyframes'
/// descriptors; keyframes arriving before that are queued and indexed once
/// the tree exists. Scores are normalized L1 similarities in [0, 1].
#[derive(Debug, Default)]
pub struct KeyframeDatabase {
    vocab: Option<Vocabulary>,
    inverted: Vec<Vec<(KeyframeId, f64)>>,
    vectors: BTreeMap<KeyframeId, Vec<(usize, f64)>>,
    pending: Vec<(KeyframeId, Vec<BinaryDescriptor>)>,
    train_corpus: Vec<BinaryDescriptor>,
    train_keyframes: usize,
}

impl KeyframeDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }

    pub fn len(&self) -> usize {
        self.vectors.len() + self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, kf: KeyframeId) -> bool {
        self.vectors.contains_key(&kf) || self.pending.iter().any(|(id, _)| *id == kf)
    }

    /// Feeds training descriptors (called for every new keyframe until the
    /// vocabulary exists).
    pub fn observe_training(&mut self, descriptors: &[BinaryDescriptor], cfg: &LoopConfig) {
        if self.vocab.is_some() || self.train_keyframes >= cfg.vocab_train_keyframes {
            return;
        }
        self.train_corpus.extend_from_slice(descriptors);
        self.train_keyframes += 1;
        let needed = cfg.vocab_branching.pow(cfg.vocab_depth as u32);
        if self.train_keyframes >= cfg.vocab_train_keyframes && self.train_corpus.len() >= needed {
            match build_vocabulary(
                &self.train_corpus,
                cfg.vocab_branching,
                cfg.vocab_depth,
                cfg.vocab_seed,
            ) {
                Ok(vocab) => {
                    log::info!(
                        "vocabulary trained: {} words from {} descriptors",
                        vocab.n_words(),
                        self.train_corpus.len()
                    );
                    self.inverted = vec![Vec::new(); vocab.n_words()];
                    self.vocab = Some(vocab);
                    let pending = std::mem::take(&mut self.pending);
                    for (id, descs) in pending {
                        self.index(id, &descs);
                    }
                    self.train_corpus = Vec::new();
                }
                Err(e) => log::warn!("vocabulary training failed: {e}"),
            }
        }
    }

    /// Adds a keyframe to the database (typically at marginalization).
    pub fn add_keyframe(&mut self, id: KeyframeId, descriptors: &[BinaryDescriptor]) {
        if self.vocab.is_some() {
            self.index(id, descriptors);
        } else {
            self.pending.push((id, descriptors.to_vec()));
        }
    }

    fn index(&mut self, id: KeyframeId, descriptors: &[BinaryDescriptor]) {
        let Some(vocab) = self.vocab.as_ref() else { return };
        let vector = vocab.vector(descriptors);
        for (word, weight) in &vector {
            self.inverted[*word].push((id, *weight));
        }
        self.vectors.insert(id, vector);
    }

    /// Word vector of an un-indexed descriptor set (the query keyframe).
    pub fn query_vector(&self, descriptors: &[BinaryDescriptor]) -> Option<Vec<(usize, f64)>> {
        self.vocab.as_ref().map(|v| v.vector(descriptors))
    }

    /// Scores every indexed keyframe sharing at least one word with the
    /// query vector: `s = sum_w min(v_w, w_w)` over shared words, which is
    /// the normalized L1 similarity in [0, 1]. Sorted best first.
    pub fn query(&self, vector: &[(usize, f64)]) -> Vec<(KeyframeId, f64)> {
        let mut scores: BTreeMap<KeyframeId, f64> = BTreeMap::new();
        for (word, q) in vector {
            if *word >= self.inverted.len() {
                continue;
            }
            for (kf, w) in &self.inverted[*word] {
                *scores.entry(*kf).or_default() += q.min(*w);
            }
        }
        let mut out: Vec<(KeyframeId, f64)> = scores.into_iter().collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn descriptors(n: usize, seed: u64) -> Vec<BinaryDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| BinaryDescriptor([rng.random(), rng.random(), rng.random(), rng.random()]))
            .collect()
    }

    fn perturbed(base: &[BinaryDescriptor], flips: u32, seed: u64) -> Vec<BinaryDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        base.iter()
            .map(|d| {
                let mut out = *d;
                for _ in 0..flips {
                    let bit = rng.random_range(0..256usize);
                    out.0[bit / 64] ^= 1u64 << (bit % 64);
                }
                out
            })
            .collect()
    }

    #[test]
    fn self_query_scores_highest() {
        let cfg = LoopConfig {
            vocab_train_keyframes: 1,
            ..LoopConfig::default()
        };
        let mut db = KeyframeDatabase::new();
        let train = descriptors(900, 1);
        db.observe_training(&train, &cfg);
        assert!(db.vocabulary().is_some());

        let sets: Vec<Vec<BinaryDescriptor>> =
            (0..5).map(|i| descriptors(300, 100 + i)).collect();
        for (i, s) in sets.iter().enumerate() {
            db.add_keyframe(KeyframeId(i as u64), s);
        }
        // A mildly corrupted copy of set 2 must retrieve keyframe 2.
        let noisy = perturbed(&sets[2], 8, 55);
        let v = db.query_vector(&noisy).unwrap();
        let results = db.query(&v);
        assert_eq!(results[0].0, KeyframeId(2));
        assert!(results[0].1 > results[1].1);
        assert!(results.iter().all(|(_, s)| (0.0..=1.0 + 1e-9).contains(s)));
    }

    #[test]
    fn pending_keyframes_are_indexed_after_training() {
        let cfg = LoopConfig {
            vocab_train_keyframes: 2,
            ..LoopConfig::default()
        };
        let mut db = KeyframeDatabase::new();
        let s0 = descriptors(600, 7);
        db.add_keyframe(KeyframeId(0), &s0);
        db.observe_training(&s0, &cfg);
        assert!(db.vocabulary().is_none());
        let s1 = descriptors(600, 8);
        db.observe_training(&s1, &cfg);
        assert!(db.vocabulary().is_some());
        let v = db.query_vector(&s0).unwrap();
        assert_eq!(db.query(&v)[0].0, KeyframeId(0));
    }
}
