//! Gram-matrix textural losses over pseudo-RGB channel triplets.
//!
//! A 3-channel loss compares per-tap Gram matrices of two RGB images. An
//! n-channel stack is compared through triplet views: the exact loss averages
//! the 3-channel loss over all `n³` ordered triplets (with repetition), and
//! the stochastic estimator evaluates it on `k` uniformly drawn triplets. The
//! same triplet always indexes both stacks.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use ndarray::{Array3, Axis, Ix3};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, GramStatistics};
use crate::graph::{Graph, Var};
use crate::material::{apply_triplet, MaterialStack};

pub const DEFAULT_ENUMERATION_CAP: usize = 6;
pub const DEFAULT_CACHE_ENTRIES: usize = 1024;

/// Ordered triple of channel indices selecting a pseudo-RGB view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletIndex([usize; 3]);

impl TripletIndex {
    pub const fn new(channels: [usize; 3]) -> Self {
        Self(channels)
    }

    pub fn checked(channels: [usize; 3], n: usize) -> Result<Self> {
        match channels.iter().find(|&&c| c >= n) {
            Some(&index) => Err(Error::ChannelIndex { index, channels: n }),
            None => Ok(Self(channels)),
        }
    }

    pub fn channels(self) -> [usize; 3] {
        self.0
    }

    /// Position in lexicographic order among the `n³` triplets.
    pub fn rank(self, n: usize) -> usize {
        (self.0[0] * n + self.0[1]) * n + self.0[2]
    }

    pub fn from_rank(rank: usize, n: usize) -> Self {
        Self([rank / (n * n), (rank / n) % n, rank % n])
    }

    /// All `n³` triplets in lexicographic order.
    pub fn all(n: usize) -> impl Iterator<Item = TripletIndex> {
        (0..n * n * n).map(move |r| Self::from_rank(r, n))
    }
}

impl fmt::Display for TripletIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Uniform draw over `{0..n-1}³`.
///
/// Consumes exactly one `u64` from `rng`: the triplet rank is
/// `floor(x · n³ / 2⁶⁴)`, then split into base-`n` digits.
pub fn sample_triplet<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Result<TripletIndex> {
    if n == 0 {
        return Err(Error::ChannelCount(0, 1));
    }
    let space = (n as u128).pow(3);
    let rank = ((u128::from(rng.next_u64()) * space) >> 64) as usize;
    Ok(TripletIndex::from_rank(rank, n))
}

/// Anything that can hand out triplets for an `n`-channel stack.
pub trait TripletSource {
    fn next_triplet(&mut self, n: usize) -> Result<TripletIndex>;
}

impl<R: RngCore> TripletSource for R {
    fn next_triplet(&mut self, n: usize) -> Result<TripletIndex> {
        sample_triplet(n, self)
    }
}

/// Deterministic source cycling through every triplet in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct EnumeratedTriplets {
    next: usize,
}

impl EnumeratedTriplets {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TripletSource for EnumeratedTriplets {
    fn next_triplet(&mut self, n: usize) -> Result<TripletIndex> {
        if n == 0 {
            return Err(Error::ChannelCount(0, 1));
        }
        let t = TripletIndex::from_rank(self.next % (n * n * n), n);
        self.next += 1;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    /// Triplets evaluated; empty for a plain 3-channel evaluation.
    pub triplets: Vec<TripletIndex>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    Stochastic { k: usize },
    Exact,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Stochastic { k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(flatten)]
    pub mode: LossMode,
    pub enumeration_cap: usize,
    pub cache_entries: usize,
    /// Draw a fresh triplet per batch element instead of one per batch.
    pub per_element_triplets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::default(),
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            cache_entries: DEFAULT_CACHE_ENTRIES,
            per_element_triplets: false,
        }
    }
}

type CacheKey = (u64, u64, TripletIndex);

/// Reference-side Gram statistics keyed by (extractor, exemplar, triplet),
/// with least-recently-used eviction. Safe to share between threads.
pub struct GramCache {
    entries: Mutex<LruCache<CacheKey, Arc<GramStatistics>>>,
}

impl GramCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        Self {
            entries: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<GramStatistics>,
    ) -> Result<Arc<GramStatistics>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let stats = Arc::new(compute()?);
        self.entries.lock().expect("cache lock").put(key, stats.clone());
        Ok(stats)
    }
}

impl Default for GramCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_ENTRIES)
    }
}

fn hash_str(s: &str) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Content hash identifying an exemplar stack in the Gram cache.
pub fn stack_id(data: &Array3<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    data.dim().hash(&mut h);
    for v in data.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Records the 3-channel loss of `image` (a `(3, H, W)` graph value) against
/// precomputed reference Grams. Returns the total and the per-layer terms.
pub(crate) fn record_view_loss(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    image: Var,
    reference: &GramStatistics,
) -> Result<(Var, Vec<Var>)> {
    extractor.check_reference(reference)?;
    let grams = extractor.forward_grams(g, image)?;
    let terms: Vec<Var> = grams
        .into_iter()
        .enumerate()
        .map(|(l, gram)| {
            let n = reference.feature_counts()[l] as f64;
            g.sq_dist(gram, reference.shared(l), 1.0 / (n * n))
        })
        .collect();
    let total = g.sum(&terms);
    Ok((total, terms))
}

fn view_loss(
    extractor: &FeatureExtractor,
    image: &Array3<f64>,
    reference: &GramStatistics,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Option<Array3<f64>>)> {
    let mut g = Graph::new();
    let x = if with_grad {
        g.variable(image.clone().into_dyn())
    } else {
        g.constant(Arc::new(image.clone().into_dyn()))
    };
    let (total, terms) = record_view_loss(&mut g, extractor, x, reference)?;
    let per_layer: Vec<f64> = terms.iter().map(|t| g.scalar(*t)).collect();
    let value = g.scalar(total);
    let grad = if with_grad {
        let mut grads = g.backward(total);
        let dx = grads.take(x).expect("input gradient");
        Some(dx.into_dimensionality::<Ix3>().expect("3-D gradient"))
    } else {
        None
    };
    Ok((value, per_layer, grad))
}

/// `Σ_l ‖G^l − G̃^l‖² / N_l²` between `image` and the reference statistics.
pub fn loss_3channel(
    image: &Array3<f64>,
    reference: &GramStatistics,
    extractor: &FeatureExtractor,
) -> Result<LossReport> {
    let (total, per_layer, _) = view_loss(extractor, image, reference, false)?;
    Ok(LossReport {
        total,
        per_layer,
        triplets: Vec::new(),
    })
}

/// [`loss_3channel`] plus its gradient with respect to `image`.
pub fn loss_3channel_with_grad(
    image: &Array3<f64>,
    reference: &GramStatistics,
    extractor: &FeatureExtractor,
) -> Result<(LossReport, Array3<f64>)> {
    let (total, per_layer, grad) = view_loss(extractor, image, reference, true)?;
    Ok((
        LossReport {
            total,
            per_layer,
            triplets: Vec::new(),
        },
        grad.expect("requested gradient"),
    ))
}

/// Loss evaluator bound to an extractor and an optional reference cache.
#[derive(Clone, Copy)]
pub struct TexturalLoss<'a> {
    extractor: &'a FeatureExtractor,
    cache: Option<&'a GramCache>,
    extractor_key: u64,
}

impl<'a> TexturalLoss<'a> {
    pub fn new(extractor: &'a FeatureExtractor) -> Self {
        Self {
            extractor,
            cache: None,
            extractor_key: hash_str(&extractor.config().fingerprint()),
        }
    }

    pub fn with_cache(extractor: &'a FeatureExtractor, cache: &'a GramCache) -> Self {
        Self {
            cache: Some(cache),
            ..Self::new(extractor)
        }
    }

    pub fn extractor(&self) -> &'a FeatureExtractor {
        self.extractor
    }

    /// Gram statistics of the `t`-view of `reference`, memoized when a cache is attached.
    pub fn reference_grams(&self, reference: &MaterialStack, t: TripletIndex) -> Result<Arc<GramStatistics>> {
        let compute = || self.extractor.gram_statistics(&reference.apply_triplet(t)?);
        match self.cache {
            Some(cache) => cache.get_or_compute((self.extractor_key, stack_id(reference.data()), t), compute),
            None => compute().map(Arc::new),
        }
    }

    /// Weighted sum of 3-channel losses over `(triplet, weight)` pairs, with
    /// the gradient scattered back onto the candidate's channels.
    fn weighted(
        &self,
        candidate: &MaterialStack,
        reference: &MaterialStack,
        terms: &[(TripletIndex, f64)],
        with_grad: bool,
    ) -> Result<(LossReport, Option<Array3<f64>>)> {
        if candidate.channels() != reference.channels() {
            return Err(Error::ChannelCount(candidate.channels(), reference.channels()));
        }
        let mut total = 0.0;
        let mut per_layer = vec![0.0; self.extractor.num_taps()];
        let mut grad = with_grad.then(|| Array3::<f64>::zeros(candidate.data().raw_dim()));
        for &(t, weight) in terms {
            let reference_grams = self.reference_grams(reference, t)?;
            let view = apply_triplet(candidate.data(), t)?;
            let (value, layers, view_grad) = view_loss(self.extractor, &view, &reference_grams, with_grad)?;
            total += weight * value;
            for (acc, v) in per_layer.iter_mut().zip(layers) {
                *acc += weight * v;
            }
            if let (Some(grad), Some(vg)) = (grad.as_mut(), view_grad) {
                for (k, &c) in t.channels().iter().enumerate() {
                    let mut dst = grad.index_axis_mut(Axis(0), c);
                    dst.scaled_add(weight, &vg.index_axis(Axis(0), k));
                }
            }
        }
        let report = LossReport {
            total,
            per_layer,
            triplets: terms.iter().map(|(t, _)| *t).collect(),
        };
        Ok((report, grad))
    }

    fn exact_terms(&self, n: usize, cap: usize) -> Result<Vec<(TripletIndex, f64)>> {
        if n > cap {
            return Err(Error::EnumerationCap { channels: n, cap });
        }
        let weight = 1.0 / (n * n * n) as f64;
        Ok(TripletIndex::all(n).map(|t| (t, weight)).collect())
    }

    pub fn exact(&self, a: &MaterialStack, b: &MaterialStack, cap: usize) -> Result<LossReport> {
        let terms = self.exact_terms(a.channels(), cap)?;
        Ok(self.weighted(a, b, &terms, false)?.0)
    }

    pub fn exact_with_grad(
        &self,
        a: &MaterialStack,
        b: &MaterialStack,
        cap: usize,
    ) -> Result<(LossReport, Array3<f64>)> {
        let terms = self.exact_terms(a.channels(), cap)?;
        let (report, grad) = self.weighted(a, b, &terms, true)?;
        Ok((report, grad.expect("requested gradient")))
    }

    fn sampled_terms(&self, n: usize, source: &mut dyn TripletSource, k: usize) -> Result<Vec<(TripletIndex, f64)>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let weight = 1.0 / k as f64;
        (0..k).map(|_| Ok((source.next_triplet(n)?, weight))).collect()
    }

    pub fn stochastic(
        &self,
        a: &MaterialStack,
        b: &MaterialStack,
        source: &mut dyn TripletSource,
        k: usize,
    ) -> Result<LossReport> {
        if a.channels() != b.channels() {
            return Err(Error::ChannelCount(a.channels(), b.channels()));
        }
        let terms = self.sampled_terms(a.channels(), source, k)?;
        Ok(self.weighted(a, b, &terms, false)?.0)
    }

    pub fn stochastic_with_grad(
        &self,
        a: &MaterialStack,
        b: &MaterialStack,
        source: &mut dyn TripletSource,
        k: usize,
    ) -> Result<(LossReport, Array3<f64>)> {
        if a.channels() != b.channels() {
            return Err(Error::ChannelCount(a.channels(), b.channels()));
        }
        let terms = self.sampled_terms(a.channels(), source, k)?;
        let (report, grad) = self.weighted(a, b, &terms, true)?;
        Ok((report, grad.expect("requested gradient")))
    }

    pub fn baseline(&self, a: &MaterialStack, b: &MaterialStack, groups: &[Vec<usize>]) -> Result<LossReport> {
        let terms = group_terms(groups, a.channels())?;
        Ok(self.weighted(a, b, &terms, false)?.0)
    }

    pub fn baseline_with_grad(
        &self,
        a: &MaterialStack,
        b: &MaterialStack,
        groups: &[Vec<usize>],
    ) -> Result<(LossReport, Array3<f64>)> {
        let terms = group_terms(groups, a.channels())?;
        let (report, grad) = self.weighted(a, b, &terms, true)?;
        Ok((report, grad.expect("requested gradient")))
    }
}

/// Fixed groups for the separate-losses baseline: each group is one channel
/// (replicated to three planes) or three channels; groups must be disjoint.
pub fn group_terms(groups: &[Vec<usize>], n: usize) -> Result<Vec<(TripletIndex, f64)>> {
    let mut seen = vec![false; n];
    let mut terms = Vec::with_capacity(groups.len());
    for group in groups {
        for &c in group {
            if c >= n {
                return Err(Error::ChannelIndex { index: c, channels: n });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::OverlappingGroups(c));
            }
        }
        let t = match group.as_slice() {
            [c] => TripletIndex::new([*c, *c, *c]),
            [a, b, c] => TripletIndex::new([*a, *b, *c]),
            other => {
                return Err(Error::Config(format!(
                    "baseline group {other:?} must have 1 or 3 channels"
                )))
            }
        };
        terms.push((t, 1.0));
    }
    if terms.is_empty() {
        return Err(Error::Config("baseline needs at least one group".into()));
    }
    Ok(terms)
}

/// Mean 3-channel loss over all `n³` triplets, `n ≤ DEFAULT_ENUMERATION_CAP`.
pub fn loss_nchannel_exact(a: &MaterialStack, b: &MaterialStack, extractor: &FeatureExtractor) -> Result<LossReport> {
    TexturalLoss::new(extractor).exact(a, b, DEFAULT_ENUMERATION_CAP)
}

/// Mean 3-channel loss over `k` triplets drawn from `source`.
pub fn loss_nchannel_stochastic(
    a: &MaterialStack,
    b: &MaterialStack,
    extractor: &FeatureExtractor,
    source: &mut dyn TripletSource,
    k: usize,
) -> Result<LossReport> {
    TexturalLoss::new(extractor).stochastic(a, b, source, k)
}

/// Sum of 3-channel losses over fixed disjoint channel groups.
pub fn loss_separate_baseline(
    a: &MaterialStack,
    b: &MaterialStack,
    extractor: &FeatureExtractor,
    groups: &[Vec<usize>],
) -> Result<LossReport> {
    TexturalLoss::new(extractor).baseline(a, b, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(n: usize, size: usize, seed: u64) -> MaterialStack {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MaterialStack::from_planes(Array3::from_shape_simple_fn((n, size, size), || rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn rank_round_trip() {
        for n in 1..5 {
            let all: Vec<_> = TripletIndex::all(n).collect();
            assert_eq!(all.len(), n * n * n);
            for (r, t) in all.iter().enumerate() {
                assert_eq!(t.rank(n), r);
            }
        }
        assert_eq!(TripletIndex::new([1, 0, 2]).to_string(), "1-0-2");
        assert!(TripletIndex::checked([0, 3, 1], 3).is_err());
    }

    #[test]
    fn sampler_consumes_one_draw() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        sample_triplet(5, &mut a).unwrap();
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_triplet(1, &mut rng).unwrap(), TripletIndex::new([0, 0, 0]));
        }
        assert!(sample_triplet(0, &mut rng).is_err());
    }

    #[test]
    fn enumerated_source_cycles() {
        let mut src = EnumeratedTriplets::new();
        let first: Vec<_> = (0..8).map(|_| src.next_triplet(2).unwrap()).collect();
        assert_eq!(first, TripletIndex::all(2).collect::<Vec<_>>());
        assert_eq!(src.next_triplet(2).unwrap(), TripletIndex::new([0, 0, 0]));
    }

    #[test]
    fn baseline_group_validation() {
        assert!(matches!(
            group_terms(&[vec![0, 1, 2], vec![2]], 4),
            Err(Error::OverlappingGroups(2))
        ));
        assert!(matches!(
            group_terms(&[vec![5]], 4),
            Err(Error::ChannelIndex { index: 5, .. })
        ));
        assert!(group_terms(&[vec![0, 1]], 4).is_err());
        let terms = group_terms(&[vec![0, 1, 2], vec![3]], 4).unwrap();
        assert_eq!(terms[1].0, TripletIndex::new([3, 3, 3]));
    }

    #[test]
    fn identity_and_mismatch() {
        let ex = FeatureExtractor::mock();
        let a = random_stack(3, 8, 1);
        assert_eq!(loss_nchannel_exact(&a, &a, &ex).unwrap().total, 0.0);
        let b = random_stack(2, 8, 2);
        assert!(matches!(
            loss_nchannel_exact(&a, &b, &ex),
            Err(Error::ChannelCount(3, 2))
        ));
        let seven = random_stack(7, 4, 3);
        assert!(matches!(
            loss_nchannel_exact(&seven, &seven, &ex),
            Err(Error::EnumerationCap { channels: 7, cap: 6 })
        ));
    }

    #[test]
    fn cache_hits_and_eviction() {
        let ex = FeatureExtractor::mock();
        let cache = GramCache::new(2);
        let loss = TexturalLoss::with_cache(&ex, &cache);
        let b = random_stack(3, 8, 5);
        let first = loss.reference_grams(&b, TripletIndex::new([0, 1, 2])).unwrap();
        let again = loss.reference_grams(&b, TripletIndex::new([0, 1, 2])).unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        loss.reference_grams(&b, TripletIndex::new([1, 1, 1])).unwrap();
        loss.reference_grams(&b, TripletIndex::new([2, 2, 2])).unwrap();
        assert_eq!(cache.len(), 2);
        let recomputed = loss.reference_grams(&b, TripletIndex::new([0, 1, 2])).unwrap();
        assert!(!Arc::ptr_eq(&first, &recomputed));
        assert_eq!(*first, *recomputed);
    }

    #[test]
    fn report_total_is_sum_of_layers() {
        let ex = FeatureExtractor::mock();
        let a = random_stack(2, 8, 7);
        let b = random_stack(2, 8, 8);
        let r = loss_nchannel_exact(&a, &b, &ex).unwrap();
        let sum: f64 = r.per_layer.iter().sum();
        assert!((r.total - sum).abs() <= 1e-12 * r.total);
        assert!(r.per_layer.iter().all(|&v| v >= 0.0));
        assert_eq!(r.triplets.len(), 8);
    }
}
