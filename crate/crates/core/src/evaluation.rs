//! Checks for the estimator and a proxy measure of cross-channel alignment.
//!
//! The alignment statistic is a proxy: two stacks agree when the Pearson
//! correlations between their channels' edge-magnitude maps agree.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, GramStatistics};
use crate::loss::{loss_3channel_with_grad, EnumeratedTriplets, TexturalLoss, TripletIndex};
use crate::material::{ChannelLayout, MaterialStack};
use crate::seed;

/// Edge magnitude from central differences in a 3×3 neighbourhood,
/// replicating border pixels.
pub fn edge_magnitude(plane: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let up = plane[[i.saturating_sub(1), j]];
        let down = plane[[(i + 1).min(h - 1), j]];
        let left = plane[[i, j.saturating_sub(1)]];
        let right = plane[[i, (j + 1).min(w - 1)]];
        let gy = 0.5 * (down - up);
        let gx = 0.5 * (right - left);
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = saa.sqrt() * sbb.sqrt();
    if saa <= 1e-24 * n || sbb <= 1e-24 * n || scale == 0.0 {
        return None;
    }
    Some((sab / scale).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub i: usize,
    pub j: usize,
    pub exemplar: f64,
    pub synthesis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationSummary {
    pub pairs: Vec<PairCorrelation>,
    /// Pairs where a channel is constant in either stack.
    pub skipped: Vec<(usize, usize)>,
    /// Mean of |ρ_synthesis − ρ_exemplar| over the scored pairs.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// Edge-magnitude correlations, the primary statistic.
    pub edges: CorrelationSummary,
    /// Raw-value correlations, reported alongside.
    pub values: CorrelationSummary,
}

impl AlignmentReport {
    pub fn error(&self) -> f64 {
        self.edges.error
    }

    /// Comma-separated table: `statistic,i,j,rho_exemplar,rho_synthesis`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,i,j,rho_exemplar,rho_synthesis\n");
        for (name, summary) in [("edge", &self.edges), ("value", &self.values)] {
            for p in &summary.pairs {
                out.push_str(&format!("{name},{},{},{},{}\n", p.i, p.j, p.exemplar, p.synthesis));
            }
        }
        out
    }
}

fn correlations(maps_a: &[Array2<f64>], maps_b: &[Array2<f64>]) -> CorrelationSummary {
    let n = maps_a.len();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            match (
                pearson(maps_a[i].view(), maps_a[j].view()),
                pearson(maps_b[i].view(), maps_b[j].view()),
            ) {
                (Some(exemplar), Some(synthesis)) => pairs.push(PairCorrelation {
                    i,
                    j,
                    exemplar,
                    synthesis,
                }),
                _ => skipped.push((i, j)),
            }
        }
    }
    let error = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| (p.synthesis - p.exemplar).abs()).sum::<f64>() / pairs.len() as f64
    };
    CorrelationSummary { pairs, skipped, error }
}

/// Compares per-pair channel correlations of `exemplar` and `synthesis`.
/// The stacks may differ in size; each statistic is computed per stack.
pub fn alignment_metric(exemplar: &MaterialStack, synthesis: &MaterialStack) -> Result<AlignmentReport> {
    if exemplar.channels() != synthesis.channels() {
        return Err(Error::ChannelCount(exemplar.channels(), synthesis.channels()));
    }
    let edges =
        |s: &MaterialStack| -> Vec<Array2<f64>> { (0..s.channels()).map(|c| edge_magnitude(s.plane(c))).collect() };
    let raw = |s: &MaterialStack| -> Vec<Array2<f64>> { (0..s.channels()).map(|c| s.plane(c).to_owned()).collect() };
    let report = AlignmentReport {
        edges: correlations(&edges(exemplar), &edges(synthesis)),
        values: correlations(&raw(exemplar), &raw(synthesis)),
    };
    for (i, j) in &report.edges.skipped {
        log::warn!("alignment: pair ({i}, {j}) skipped, constant edge map");
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasednessReport {
    pub channels: usize,
    pub exact: f64,
    pub stochastic_mean: f64,
    pub relative_gap: f64,
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Exact loss versus the single-triplet estimator forced through every
/// triplet once.
pub fn unbiasedness_check(
    a: &MaterialStack,
    b: &MaterialStack,
    extractor: &FeatureExtractor,
    cap: usize,
) -> Result<UnbiasednessReport> {
    let n = a.channels();
    let loss = TexturalLoss::new(extractor);
    let exact = loss.exact(a, b, cap)?.total;
    let mut source = EnumeratedTriplets::new();
    let count = n * n * n;
    let mut sum = 0.0;
    for _ in 0..count {
        sum += loss.stochastic(a, b, &mut source, 1)?.total;
    }
    let stochastic_mean = sum / count as f64;
    Ok(UnbiasednessReport {
        channels: n,
        exact,
        stochastic_mean,
        relative_gap: relative_gap(exact, stochastic_mean),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub coordinates: usize,
    /// Worst per-coordinate error, each coordinate taking the better of the
    /// `step` and `step / 10` central differences.
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    /// Worst per-coordinate error using the `step` difference alone.
    pub max_relative_error_at_step: f64,
    /// Coordinates where only the refined difference met `step`'s accuracy,
    /// i.e. the `step` stencil straddled a ReLU kink.
    pub refined_coordinates: usize,
}

pub const FD_STEP: f64 = 1e-4;

/// Objective returning its value and gradient at a point.
pub type ValueAndGradient<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// Central finite differences against the analytic gradient on
/// `coordinates` randomly chosen entries of `point`.
///
/// Per-coordinate error is `|a − d| / max(|a|, |d|)`, or the absolute
/// difference when both are below `1e-12`. A piecewise-linear network has
/// kinks, and a `±step` stencil that straddles one measures a blend of two
/// slopes; every coordinate is therefore also differenced at `step / 10` and
/// scored by the better of the two. A wrong analytic gradient disagrees with
/// both estimates, so this cannot hide a genuine error.
pub fn gradcheck(
    f: &mut ValueAndGradient<'_>,
    point: &[f64],
    coordinates: usize,
    step: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let (_, analytic) = f(point)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, point.len(), coordinates.min(point.len()));
    let mut x = point.to_vec();
    let mut worst = (0.0, 0);
    let mut worst_at_step = 0.0f64;
    let mut refined = 0;
    for idx in chosen.iter() {
        let a = analytic[idx];
        let mut central = |h: f64| -> Result<f64> {
            let orig = x[idx];
            x[idx] = orig + h;
            let (up, _) = f(&x)?;
            x[idx] = orig - h;
            let (down, _) = f(&x)?;
            x[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            Ok(if scale < 1e-12 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            })
        };
        let coarse = central(step)?;
        let fine = central(step / 10.0)?;
        worst_at_step = worst_at_step.max(coarse);
        if fine < coarse && coarse >= 1e-6 {
            refined += 1;
        }
        let err = coarse.min(fine);
        if err > worst.0 || worst == (0.0, 0) {
            worst = (err, idx);
        }
    }
    Ok(GradcheckReport {
        coordinates: chosen.len(),
        max_relative_error: worst.0,
        worst_coordinate: worst.1,
        max_relative_error_at_step: worst_at_step,
        refined_coordinates: refined,
    })
}

/// Gradcheck of the 3-channel loss at `image` against `reference`.
pub fn gradcheck_loss_3channel(
    extractor: &FeatureExtractor,
    image: &ndarray::Array3<f64>,
    reference: &GramStatistics,
    coordinates: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let shape = image.raw_dim();
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let img = ndarray::Array3::from_shape_vec(shape, x.to_vec()).expect("shape");
        let (r, g) = loss_3channel_with_grad(&img, reference, extractor)?;
        Ok((r.total, g.iter().copied().collect()))
    };
    let point: Vec<f64> = image.iter().copied().collect();
    gradcheck(&mut f, &point, coordinates, FD_STEP, seed)
}

/// Gradcheck of the `k`-triplet estimator with its triplet stream pinned to `triplet_seed`.
pub fn gradcheck_stochastic(
    extractor: &FeatureExtractor,
    a: &MaterialStack,
    b: &MaterialStack,
    k: usize,
    triplet_seed: u64,
    coordinates: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let shape = a.data().raw_dim();
    let layout = a.layout().clone();
    let loss = TexturalLoss::new(extractor);
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let stack = MaterialStack::new(
            ndarray::Array3::from_shape_vec(shape, x.to_vec()).expect("shape"),
            layout.clone(),
        )?;
        let mut rng = seed::stream(triplet_seed, "triplets");
        let (r, g) = loss.stochastic_with_grad(&stack, b, &mut rng, k)?;
        Ok((r.total, g.iter().copied().collect()))
    };
    let point: Vec<f64> = a.data().iter().copied().collect();
    gradcheck(&mut f, &point, coordinates, FD_STEP, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub critical_value: f64,
    pub p_value: f64,
    pub significance: f64,
    pub passes: bool,
}

/// Pearson chi-square test of `counts` against the uniform distribution.
pub fn chi_square_uniform(counts: &[u64], significance: f64) -> ChiSquareReport {
    let cells = counts.len();
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / cells as f64;
    let statistic: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = cells - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    let critical_value = dist.inverse_cdf(1.0 - significance);
    let p_value = 1.0 - dist.cdf(statistic);
    ChiSquareReport {
        statistic,
        degrees_of_freedom: dof,
        critical_value,
        p_value,
        significance,
        passes: statistic <= critical_value,
    }
}

/// Histogram of triplets over the `n³` ranks.
pub fn triplet_histogram(triplets: &[TripletIndex], n: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n * n * n];
    for t in triplets {
        counts[t.rank(n)] += 1;
    }
    counts
}

/// Two-channel synthetic exemplar whose channels share placed features:
/// channel 0 holds sparse bright blobs on a dark field and channel 1 is a
/// blurred, inverted copy.
pub fn colocated_exemplar(size: usize, seed_value: u64) -> MaterialStack {
    use rand::Rng;
    let mut rng = seed::stream(seed_value, "exemplar");
    let mut base = Array2::<f64>::from_elem((size, size), 0.15);
    let blobs = (size * size) / 48;
    for _ in 0..blobs {
        let (ci, cj) = (rng.gen_range(0..size) as f64, rng.gen_range(0..size) as f64);
        let r: f64 = rng.gen_range(1.5..3.5);
        let ri = r.ceil() as i64 + 1;
        for di in -ri..=ri {
            for dj in -ri..=ri {
                let (i, j) = (
                    (ci as i64 + di).rem_euclid(size as i64) as usize,
                    (cj as i64 + dj).rem_euclid(size as i64) as usize,
                );
                if ((di * di + dj * dj) as f64).sqrt() <= r {
                    base[[i, j]] = 0.85;
                }
            }
        }
    }
    let blurred = Array2::from_shape_fn((size, size), |(i, j)| {
        let mut acc = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ii = (i as i64 + di).rem_euclid(size as i64) as usize;
                let jj = (j as i64 + dj).rem_euclid(size as i64) as usize;
                acc += base[[ii, jj]];
            }
        }
        1.0 - acc / 9.0
    });
    let data = ndarray::stack(ndarray::Axis(0), &[base.view(), blurred.view()]).expect("same shape");
    MaterialStack::new(data, ChannelLayout::anonymous(2).expect("two channels")).expect("values in range")
}
