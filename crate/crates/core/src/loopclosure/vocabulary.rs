use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontend::BinaryDescriptor;

use super::LoopError;

/// Hierarchical bag-of-binary-words vocabulary: a tree of k-majority
/// centroids (branching B, depth D) with idf weights per leaf word.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    branching: usize,
    depth: usize,
    root: Vec<Node>,
    n_words: usize,
    idf: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    centroid: BinaryDescriptor,
    children: Vec<Node>,
    /// Leaf word id; usize::MAX for interior nodes.
    word: usize,
}

/// Bitwise majority vote over a set of descriptors; ties resolve to zero so
/// the result is deterministic.
fn majority(members: &[&BinaryDescriptor]) -> BinaryDescriptor {
    let half = members.len();
    let mut out = [0u64; 4];
    for w in 0..4 {
        for bit in 0..64 {
            let count = members
                .iter()
                .filter(|d| d.0[w] & (1u64 << bit) != 0)
                .count();
            if 2 * count > half {
                out[w] |= 1u64 << bit;
            }
        }
    }
    BinaryDescriptor(out)
}

/// Seeded k-majority clustering in Hamming space. Returns per-item cluster
/// assignments and the centroids; assignments are consistent with the final
/// centroids (a last assignment pass follows the last update).
fn k_majority(
    items: &[&BinaryDescriptor],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<BinaryDescriptor>) {
    let k = k.min(items.len());
    // Farthest-point initialization: seeded first pick, then greedily the
    // item with the largest min-distance to the chosen centers. Recovers
    // well-separated clusters where random picks routinely collide.
    let mut centroids: Vec<BinaryDescriptor> = Vec::with_capacity(k);
    centroids.push(*items[rng.random_range(0..items.len())]);
    while centroids.len() < k {
        let mut best = (0u32, usize::MAX);
        for (idx, d) in items.iter().enumerate() {
            let min_dist = centroids.iter().map(|c| c.hamming(d)).min().unwrap();
            if min_dist > best.0 {
                best = (min_dist, idx);
            }
        }
        if best.1 == usize::MAX || best.0 == 0 {
            break;
        }
        centroids.push(*items[best.1]);
    }
    let k = centroids.len().max(1);
    let assign = |centroids: &[BinaryDescriptor]| -> Vec<usize> {
        items
            .iter()
            .map(|d| {
                let mut best = (u32::MAX, 0usize);
                for (ci, c) in centroids.iter().enumerate() {
                    let dist = c.hamming(d);
                    if dist < best.0 {
                        best = (dist, ci);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut assignment = assign(&centroids);
    for _ in 0..20 {
        let mut changed = false;
        for ci in 0..k {
            let members: Vec<&BinaryDescriptor> = items
                .iter()
                .zip(assignment.iter())
                .filter(|(_, a)| **a == ci)
                .map(|(d, _)| *d)
                .collect();
            if !members.is_empty() {
                centroids[ci] = majority(&members);
            }
        }
        let next = assign(&centroids);
        if next != assignment {
            assignment = next;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    (assignment, centroids)
}

fn build_level(
    items: &[&BinaryDescriptor],
    branching: usize,
    levels_left: usize,
    rng: &mut ChaCha8Rng,
    next_word: &mut usize,
    word_counts: &mut Vec<usize>,
) -> Vec<Node> {
    let (assignment, centroids) = k_majority(items, branching, rng);
    let mut nodes = Vec::with_capacity(centroids.len());
    for (ci, centroid) in centroids.iter().enumerate() {
        let members: Vec<&BinaryDescriptor> = items
            .iter()
            .zip(assignment.iter())
            .filter(|(_, a)| **a == ci)
            .map(|(d, _)| *d)
            .collect();
        if members.is_empty() {
            continue;
        }
        if levels_left == 1 {
            let word = *next_word;
            *next_word += 1;
            word_counts.push(members.len());
            nodes.push(Node {
                centroid: *centroid,
                children: Vec::new(),
                word,
            });
        } else {
            let children =
                build_level(&members, branching, levels_left - 1, rng, next_word, word_counts);
            nodes.push(Node {
                centroid: *centroid,
                children,
                word: usize::MAX,
            });
        }
    }
    nodes
}

/// Trains the vocabulary on a descriptor corpus. Deterministic for a given
/// corpus and seed; errors when the corpus is smaller than `B^D`.
pub fn build_vocabulary(
    corpus: &[BinaryDescriptor],
    branching: usize,
    depth: usize,
    seed: u64,
) -> Result<Vocabulary, LoopError> {
    let needed = branching.pow(depth as u32);
    if corpus.len() < needed {
        return Err(LoopError::CorpusTooSmall {
            got: corpus.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&BinaryDescriptor> = corpus.iter().collect();
    let mut next_word = 0usize;
    let mut word_counts: Vec<usize> = Vec::new();
    let root = build_level(&refs, branching, depth, &mut rng, &mut next_word, &mut word_counts);
    let n = corpus.len() as f64;
    let idf = word_counts
        .iter()
        .map(|&c| (n / c.max(1) as f64).ln().max(1e-3))
        .collect();
    Ok(Vocabulary {
        branching,
        depth,
        root,
        n_words: next_word,
        idf,
    })
}

impl Vocabulary {
    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn idf(&self, word: usize) -> f64 {
        self.idf[word]
    }

    /// Quantizes a descriptor to its leaf word by walking min-distance
    /// children (ties to the lower index).
    pub fn quantize(&self, desc: &BinaryDescriptor) -> usize {
        let mut level = &self.root;
        loop {
            let mut best = (u32::MAX, 0usize);
            for (ci, node) in level.iter().enumerate() {
                let d = node.centroid.hamming(desc);
                if d < best.0 {
                    best = (d, ci);
                }
            }
            let node = &level[best.1];
            if node.children.is_empty() {
                return node.word;
            }
            level = &node.children;
        }
    }

    /// L1-normalized tf-idf word vector of a descriptor set, sorted by word.
    pub fn vector(&self, descriptors: &[BinaryDescriptor]) -> Vec<(usize, f64)> {
        let mut counts: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for d in descriptors {
            let w = self.quantize(d);
            *counts.entry(w).or_default() += self.idf(w);
        }
        let total: f64 = counts.values().sum();
        if total <= 0.0 {
            return Vec::new();
        }
        counts.into_iter().map(|(w, v)| (w, v / total)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_corpus(n: usize, seed: u64) -> Vec<BinaryDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut seen = std::collections::HashSet::new();
        while out.len() < n {
            let d = BinaryDescriptor([rng.random(), rng.random(), rng.random(), rng.random()]);
            if seen.insert(d.0) {
                out.push(d);
            }
        }
        out
    }

    #[test]
    fn corpus_too_small_errors() {
        let corpus = random_corpus(100, 1);
        assert!(matches!(
            build_vocabulary(&corpus, 8, 3, 7),
            Err(LoopError::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic_for_seed() {
        let corpus = random_corpus(600, 2);
        let a = build_vocabulary(&corpus, 8, 3, 7).unwrap();
        let b = build_vocabulary(&corpus, 8, 3, 7).unwrap();
        assert_eq!(a.n_words(), b.n_words());
        for d in corpus.iter().take(50) {
            assert_eq!(a.quantize(d), b.quantize(d));
        }
    }

    /// Corpus constructed with the tree's own hierarchy: digit `d_l` of the
    /// word index selects a seeded 85-bit pattern for block `l`, so
    /// same-prefix descriptors are mutually close and different-prefix ones
    /// far apart.
    fn hierarchical_corpus(branching: usize, seed: u64) -> Vec<BinaryDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Geometric block sizes so the top level strictly dominates the
        // Hamming distance: coarse digits must never be outweighed by fine
        // ones.
        let blocks: [(usize, usize); 3] = [(0, 160), (160, 224), (224, 256)];
        let patterns: Vec<Vec<BinaryDescriptor>> = (0..3)
            .map(|_| {
                (0..branching)
                    .map(|_| {
                        BinaryDescriptor([rng.random(), rng.random(), rng.random(), rng.random()])
                    })
                    .collect()
            })
            .collect();
        let n = branching.pow(3);
        (0..n)
            .map(|w| {
                let mut bits = [0u64; 4];
                let mut rest = w;
                for level in (0..3).rev() {
                    let digit = rest % branching;
                    rest /= branching;
                    let (lo, hi) = blocks[level];
                    for bit in lo..hi {
                        if patterns[level][digit].0[bit / 64] & (1u64 << (bit % 64)) != 0 {
                            bits[bit / 64] |= 1u64 << (bit % 64);
                        }
                    }
                }
                BinaryDescriptor(bits)
            })
            .collect()
    }

    #[test]
    fn distinct_descriptors_shatter_into_own_leaves() {
        // A corpus of exactly B^D descriptors built on the tree's own
        // hierarchy must quantize each to its own leaf.
        let corpus = hierarchical_corpus(8, 99);
        assert_eq!(corpus.len(), 512);
        let vocab = build_vocabulary(&corpus, 8, 3, 11).unwrap();
        let mut words: Vec<usize> = corpus.iter().map(|d| vocab.quantize(d)).collect();
        words.sort_unstable();
        words.dedup();
        assert_eq!(
            words.len(),
            corpus.len(),
            "expected every descriptor in a distinct leaf (got {} words for {})",
            words.len(),
            corpus.len()
        );
    }

    #[test]
    fn centroid_quantizes_to_itself() {
        let corpus = random_corpus(600, 4);
        let vocab = build_vocabulary(&corpus, 8, 2, 5).unwrap();
        // A training descriptor close to a leaf centroid lands in a leaf
        // whose centroid is at least as close as any other leaf's.
        for d in corpus.iter().take(20) {
            let w = vocab.quantize(d);
            assert!(w < vocab.n_words());
        }
    }
}
