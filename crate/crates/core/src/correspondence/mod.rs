//! Inter-agent correspondence detection.
//!
//! Candidate image pairs are proposed by cosine similarity of whole-image
//! place descriptors against a per-agent-pair adaptive threshold, then
//! verified with a local-feature match-ratio test. Similarities are cached;
//! thresholds only ever rise.
//!
//! The engine expects one writer at a time; the server serializes access.

mod provider;

pub use provider::{
    read_descriptor_sidecar, write_descriptor_sidecar, DescriptorProvider, FileProvider,
    SyntheticProvider, SyntheticProviderConfig,
};

use std::collections::HashMap;

use crate::frame::{DataFrame, FrameId};

/// Supplies per-image local features for match-ratio verification. Real
/// keypoint networks are out of scope; synthetic backends stand in.
pub trait LocalFeatureProvider: Send + Sync {
    fn features(&self, frame: &DataFrame) -> LocalFeatureSet;
}

/// Fraction of matched local features required to verify a candidate.
pub const DEFAULT_MATCH_RATIO_XI: f64 = 0.25;
/// Starting similarity threshold for every agent pair.
pub const DEFAULT_INITIAL_GAMMA: f64 = 0.1;
/// Lowe-style ratio test bound for local feature matching.
pub const DEFAULT_NN_RATIO: f64 = 0.9;

/// Whole-image place descriptor, unit norm.
#[derive(Debug, Clone)]
pub struct PlaceDescriptor {
    vector: Vec<f32>,
    frame: FrameId,
}

impl PlaceDescriptor {
    /// Normalizes the vector. Returns `None` for a (near-)zero vector.
    pub fn new(frame: FrameId, mut vector: Vec<f32>) -> Option<Self> {
        let norm = vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-9 || !norm.is_finite() {
            return None;
        }
        for v in &mut vector {
            *v = (*v as f64 / norm) as f32;
        }
        Some(Self { vector, frame })
    }

    pub fn frame(&self) -> FrameId {
        self.frame
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn cosine(&self, other: &PlaceDescriptor) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

/// A proposed (and possibly verified) inter-agent image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateCorrespondence {
    /// Frame from the aligned agent.
    pub frame_i: FrameId,
    /// Frame from the unaligned agent.
    pub frame_j: FrameId,
    pub place_similarity: f64,
    pub match_ratio: f64,
    pub verified: bool,
}

/// Per-image local features: pixel keypoints plus descriptors.
#[derive(Debug, Clone, Default)]
pub struct LocalFeatureSet {
    keypoints: Vec<[f32; 2]>,
    descriptors: Vec<Vec<f32>>,
}

impl LocalFeatureSet {
    /// Keypoints outside `(width, height)` are rejected.
    pub fn new(
        width: u32,
        height: u32,
        keypoints: Vec<[f32; 2]>,
        descriptors: Vec<Vec<f32>>,
    ) -> Option<Self> {
        if keypoints.len() != descriptors.len() {
            return None;
        }
        let in_bounds = keypoints
            .iter()
            .all(|k| k[0] >= 0.0 && k[1] >= 0.0 && k[0] < width as f32 && k[1] < height as f32);
        if !in_bounds {
            return None;
        }
        Some(Self {
            keypoints,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn keypoints(&self) -> &[[f32; 2]] {
        &self.keypoints
    }
}

/// Monotone per-ordered-pair similarity thresholds.
#[derive(Debug, Clone)]
pub struct PairThresholds {
    initial_gamma: f64,
    gammas: HashMap<(u32, u32), f64>,
}

impl PairThresholds {
    pub fn new(initial_gamma: f64) -> Self {
        Self {
            initial_gamma,
            gammas: HashMap::new(),
        }
    }

    /// Threshold for the ordered pair (aligned agent, unaligned agent).
    pub fn get(&self, aligned: u32, unaligned: u32) -> f64 {
        *self
            .gammas
            .get(&(aligned, unaligned))
            .unwrap_or(&self.initial_gamma)
    }

    fn raise(&mut self, aligned: u32, unaligned: u32, new_gamma: f64) {
        let slot = self
            .gammas
            .entry((aligned, unaligned))
            .or_insert(self.initial_gamma);
        // Never decreases.
        if new_gamma > *slot {
            *slot = new_gamma;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorrespondenceConfig {
    pub initial_gamma: f64,
    pub match_ratio_xi: f64,
    pub nn_ratio: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            initial_gamma: DEFAULT_INITIAL_GAMMA,
            match_ratio_xi: DEFAULT_MATCH_RATIO_XI,
            nn_ratio: DEFAULT_NN_RATIO,
        }
    }
}

/// Proposes and verifies candidates, caching pairwise similarities.
#[derive(Debug)]
pub struct CorrespondenceEngine {
    config: CorrespondenceConfig,
    thresholds: PairThresholds,
    cache: HashMap<(FrameId, FrameId), f64>,
}

impl CorrespondenceEngine {
    pub fn new(config: CorrespondenceConfig) -> Self {
        let thresholds = PairThresholds::new(config.initial_gamma);
        Self {
            config,
            thresholds,
            cache: HashMap::new(),
        }
    }

    pub fn thresholds(&self) -> &PairThresholds {
        &self.thresholds
    }

    pub fn config(&self) -> &CorrespondenceConfig {
        &self.config
    }

    /// Cached cosine similarity for an (aligned frame, unaligned frame) pair.
    pub fn similarity(
        &mut self,
        aligned: &PlaceDescriptor,
        unaligned: &PlaceDescriptor,
    ) -> f64 {
        *self
            .cache
            .entry((aligned.frame(), unaligned.frame()))
            .or_insert_with(|| aligned.cosine(unaligned))
    }

    pub fn cached_similarity(&self, aligned: FrameId, unaligned: FrameId) -> Option<f64> {
        self.cache.get(&(aligned, unaligned)).copied()
    }

    /// All cached similarities for an ordered agent pair, used when raising
    /// that pair's threshold.
    pub fn observed_similarities(&self, aligned_agent: u32, unaligned_agent: u32) -> Vec<f64> {
        let mut sims: Vec<(FrameId, FrameId, f64)> = self
            .cache
            .iter()
            .filter(|((fi, fj), _)| fi.agent == aligned_agent && fj.agent == unaligned_agent)
            .map(|((fi, fj), s)| (*fi, *fj, *s))
            .collect();
        sims.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        sims.into_iter().map(|(_, _, s)| s).collect()
    }

    /// All cross-agent pairs whose similarity exceeds the pair threshold,
    /// sorted by similarity descending (frame ids break ties).
    pub fn propose_candidates(
        &mut self,
        unaligned_descs: &[PlaceDescriptor],
        aligned_descs: &[PlaceDescriptor],
    ) -> Vec<CandidateCorrespondence> {
        let mut out = Vec::new();
        for dj in unaligned_descs {
            for di in aligned_descs {
                let gamma = self.thresholds.get(di.frame().agent, dj.frame().agent);
                let sim = self.similarity(di, dj);
                if sim > gamma {
                    out.push(CandidateCorrespondence {
                        frame_i: di.frame(),
                        frame_j: dj.frame(),
                        place_similarity: sim,
                        match_ratio: 0.0,
                        verified: false,
                    });
                }
            }
        }
        out.sort_by(|a, b| {
            b.place_similarity
                .partial_cmp(&a.place_similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((a.frame_i, a.frame_j).cmp(&(b.frame_i, b.frame_j)))
        });
        out
    }

    /// Sets the match ratio and verified flag from local feature matching.
    /// Empty feature sets reject the candidate rather than erroring.
    pub fn verify_candidate(
        &self,
        candidate: &CandidateCorrespondence,
        feats_i: &LocalFeatureSet,
        feats_j: &LocalFeatureSet,
    ) -> CandidateCorrespondence {
        let ratio = match_ratio(feats_i, feats_j, self.config.nn_ratio);
        CandidateCorrespondence {
            match_ratio: ratio,
            verified: ratio >= self.config.match_ratio_xi,
            ..*candidate
        }
    }

    /// Raises the pair threshold to the mean of observed similarities above
    /// the current value; unchanged if none are above. Returns the new gamma.
    pub fn raise_threshold(
        &mut self,
        aligned_agent: u32,
        unaligned_agent: u32,
        observed: &[f64],
    ) -> f64 {
        let gamma = self.thresholds.get(aligned_agent, unaligned_agent);
        let above: Vec<f64> = observed.iter().copied().filter(|s| *s > gamma).collect();
        if !above.is_empty() {
            let mean = above.iter().sum::<f64>() / above.len() as f64;
            self.thresholds.raise(aligned_agent, unaligned_agent, mean);
        }
        self.thresholds.get(aligned_agent, unaligned_agent)
    }
}

fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// For each descriptor: nearest neighbor in the other set plus the
/// second-nearest distance for the ratio test. Ties break to lowest index.
fn nearest_neighbors(from: &LocalFeatureSet, to: &LocalFeatureSet) -> Vec<(usize, f64, f64)> {
    from.descriptors
        .iter()
        .map(|d| {
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for (j, e) in to.descriptors.iter().enumerate() {
                let dist = squared_l2(d, e);
                if dist < best.1 {
                    second = best.1;
                    best = (j, dist);
                } else if dist < second {
                    second = dist;
                }
            }
            (best.0, best.1, second)
        })
        .collect()
}

/// Mutual-nearest-neighbor match ratio with a two-sided ratio test,
/// normalized by the smaller set size. Symmetric in its two arguments.
pub fn match_ratio(feats_i: &LocalFeatureSet, feats_j: &LocalFeatureSet, nn_ratio: f64) -> f64 {
    if feats_i.is_empty() || feats_j.is_empty() {
        return 0.0;
    }
    let i_to_j = nearest_neighbors(feats_i, feats_j);
    let j_to_i = nearest_neighbors(feats_j, feats_i);
    // Ratio test on squared distances compares against nn_ratio^2.
    let bound = nn_ratio * nn_ratio;
    let passes = |d1: f64, d2: f64| d2 == 0.0 || (d2.is_finite() && d1 < bound * d2) || d2.is_infinite();
    let mut matches = 0usize;
    for (a, &(b, d1, d2)) in i_to_j.iter().enumerate() {
        let (back, e1, e2) = j_to_i[b];
        if back == a && passes(d1, d2) && passes(e1, e2) {
            matches += 1;
        }
    }
    matches as f64 / feats_i.len().min(feats_j.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_desc(frame: FrameId, v: Vec<f32>) -> PlaceDescriptor {
        PlaceDescriptor::new(frame, v).unwrap()
    }

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f32>() > 1e-3 {
                return v;
            }
        }
    }

    fn feature_set(descs: Vec<Vec<f32>>) -> LocalFeatureSet {
        let kps = vec![[1.0, 1.0]; descs.len()];
        LocalFeatureSet::new(64, 64, kps, descs).unwrap()
    }

    #[test]
    fn identical_descriptor_proposed() {
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
            initial_gamma: 0.5,
            ..Default::default()
        });
        let v = vec![0.2, -0.4, 0.7, 0.1];
        let aligned = vec![unit_desc(FrameId::new(0, 1), v.clone())];
        let unaligned = vec![unit_desc(FrameId::new(1, 5), v)];
        let candidates = engine.propose_candidates(&unaligned, &aligned);
        assert_eq!(candidates.len(), 1);
        assert_abs_diff_eq!(candidates[0].place_similarity, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn orthogonal_descriptors_not_proposed() {
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
            initial_gamma: 0.1,
            ..Default::default()
        });
        let aligned = vec![unit_desc(FrameId::new(0, 0), vec![1.0, 0.0])];
        let unaligned = vec![unit_desc(FrameId::new(1, 0), vec![0.0, 1.0])];
        assert!(engine.propose_candidates(&unaligned, &aligned).is_empty());
    }

    #[test]
    fn proposals_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let dim = 16;
        let aligned: Vec<PlaceDescriptor> = (0..100)
            .map(|s| unit_desc(FrameId::new(0, s), random_unit(&mut rng, dim)))
            .collect();
        let unaligned: Vec<PlaceDescriptor> = (0..100)
            .map(|s| unit_desc(FrameId::new(1, s), random_unit(&mut rng, dim)))
            .collect();
        let gamma = 0.9;
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
            initial_gamma: gamma,
            ..Default::default()
        });
        let got = engine.propose_candidates(&unaligned, &aligned);

        // Independent double loop.
        let mut expected = Vec::new();
        for dj in &unaligned {
            for di in &aligned {
                let sim: f64 = di
                    .vector()
                    .iter()
                    .zip(dj.vector())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                if sim > gamma {
                    expected.push((di.frame(), dj.frame(), sim));
                }
            }
        }
        expected.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert_eq!((g.frame_i, g.frame_j), (e.0, e.1));
            assert_abs_diff_eq!(g.place_similarity, e.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn cache_matches_fresh_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let a = unit_desc(FrameId::new(0, 3), random_unit(&mut rng, 32));
        let b = unit_desc(FrameId::new(2, 9), random_unit(&mut rng, 32));
        let first = engine.similarity(&a, &b);
        let cached = engine.cached_similarity(a.frame(), b.frame()).unwrap();
        assert_abs_diff_eq!(first, a.cosine(&b), epsilon = 1e-12);
        assert_abs_diff_eq!(cached, a.cosine(&b), epsilon = 1e-12);
    }

    #[test]
    fn identical_feature_sets_fully_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let descs: Vec<Vec<f32>> = (0..20).map(|_| random_unit(&mut rng, 8)).collect();
        let engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let candidate = CandidateCorrespondence {
            frame_i: FrameId::new(0, 0),
            frame_j: FrameId::new(1, 0),
            place_similarity: 1.0,
            match_ratio: 0.0,
            verified: false,
        };
        let f = feature_set(descs);
        let v = engine.verify_candidate(&candidate, &f, &f);
        assert_abs_diff_eq!(v.match_ratio, 1.0, epsilon = 1e-12);
        assert!(v.verified);
    }

    #[test]
    fn disjoint_random_descriptors_rejected() {
        // Regression fixture: measured on this seed, random dim-64
        // descriptors produce a near-zero mutual match ratio.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = feature_set((0..40).map(|_| random_unit(&mut rng, 64)).collect());
        let b = feature_set((0..40).map(|_| random_unit(&mut rng, 64)).collect());
        let engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let candidate = CandidateCorrespondence {
            frame_i: FrameId::new(0, 0),
            frame_j: FrameId::new(1, 0),
            place_similarity: 0.9,
            match_ratio: 0.0,
            verified: false,
        };
        let v = engine.verify_candidate(&candidate, &a, &b);
        assert!(v.match_ratio < DEFAULT_MATCH_RATIO_XI, "ratio {}", v.match_ratio);
        assert!(!v.verified);
    }

    #[test]
    fn quarter_overlap_verifies() {
        // 25% shared descriptors, remainder mutually orthogonal one-hots.
        let dim = 64;
        let mut a_descs = Vec::new();
        let mut b_descs = Vec::new();
        for k in 0..16 {
            let mut v = vec![0.0f32; dim];
            v[k] = 1.0;
            a_descs.push(v.clone());
            if k < 4 {
                b_descs.push(v);
            } else {
                let mut w = vec![0.0f32; dim];
                w[16 + k] = 1.0;
                b_descs.push(w);
            }
        }
        let engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let candidate = CandidateCorrespondence {
            frame_i: FrameId::new(0, 0),
            frame_j: FrameId::new(1, 0),
            place_similarity: 0.9,
            match_ratio: 0.0,
            verified: false,
        };
        let v = engine.verify_candidate(&candidate, &feature_set(a_descs), &feature_set(b_descs));
        assert!(v.match_ratio >= DEFAULT_MATCH_RATIO_XI);
        assert!(v.verified);
    }

    #[test]
    fn empty_features_reject_without_error() {
        let engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let candidate = CandidateCorrespondence {
            frame_i: FrameId::new(0, 0),
            frame_j: FrameId::new(1, 0),
            place_similarity: 0.9,
            match_ratio: 0.5,
            verified: true,
        };
        let v = engine.verify_candidate(&candidate, &LocalFeatureSet::default(), &feature_set(vec![vec![1.0]]));
        assert_eq!(v.match_ratio, 0.0);
        assert!(!v.verified);
    }

    #[test]
    fn match_ratio_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let na = rng.random_range(1..30);
            let nb = rng.random_range(1..30);
            let a = feature_set((0..na).map(|_| random_unit(&mut rng, 16)).collect());
            let b = feature_set((0..nb).map(|_| random_unit(&mut rng, 16)).collect());
            let ab = match_ratio(&a, &b, DEFAULT_NN_RATIO);
            let ba = match_ratio(&b, &a, DEFAULT_NN_RATIO);
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        }
    }

    #[test]
    fn raise_threshold_arithmetic() {
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
            initial_gamma: 0.2,
            ..Default::default()
        });
        let g = engine.raise_threshold(0, 1, &[0.4, 0.6]);
        assert_abs_diff_eq!(g, 0.5, epsilon = 1e-12);

        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
            initial_gamma: 0.7,
            ..Default::default()
        });
        let g = engine.raise_threshold(0, 1, &[0.4, 0.6]);
        assert_abs_diff_eq!(g, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn raise_threshold_reaches_fixpoint_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut engine = CorrespondenceEngine::new(CorrespondenceConfig {
                initial_gamma: -1.0,
                ..Default::default()
            });
            let mut changes = 0;
            let mut gamma = engine.thresholds().get(0, 1);
            loop {
                let next = engine.raise_threshold(0, 1, &sims);
                assert!(next >= gamma);
                if next == gamma {
                    break;
                }
                gamma = next;
                changes += 1;
                assert!(changes <= sims.len(), "did not converge in {} steps", sims.len());
            }
        }
    }

    #[test]
    fn thresholds_monotone_under_random_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut engine = CorrespondenceEngine::new(CorrespondenceConfig::default());
        let mut last = engine.thresholds().get(3, 7);
        for _ in 0..500 {
            let sims: Vec<f64> = (0..rng.random_range(0..6))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let g = engine.raise_threshold(3, 7, &sims);
            assert!(g >= last);
            last = g;
        }
    }
}
