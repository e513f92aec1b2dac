//! Threshold-free metrics with bootstrap intervals, cohort Wasserstein
//! distance, and gradient-based saliency overlays.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{patch_matrix, saliency_grad, ModelConfig, ModelParams};
use crate::raster::RasterImage;
use crate::util::{mix_seed, pairwise_sum, par_map, rng_from};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0}")]
    Argument(String),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("metric needs at least one positive")]
    NoPositives,
    #[error("bootstrap redraw cap exceeded after {0} draws")]
    RedrawCap(usize),
    #[error("saliency error: {0}")]
    Saliency(String),
}

/// Scores and labels for one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub record_ids: Vec<String>,
    /// Positive-class probability (or any monotone score).
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(record_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if record_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(MetricError::Argument("length mismatch".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MetricError::Argument("labels must be binary".into()));
        }
        Ok(ScoredSet {
            record_ids,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.n_positive() as f64 / self.len() as f64
    }
}

/// Mann-Whitney AUROC via average ranks; ties get half credit. O(n log n).
pub fn auroc(set: &ScoredSet) -> Result<f64, MetricError> {
    let n = set.len();
    let n_pos = set.n_positive();
    if n_pos == 0 || n_pos == n {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Average ranks over tie blocks, 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_neg = n - n_pos;
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision with descending-score tie blocks: each block that admits
/// positives contributes (new positives) x (precision after the block).
pub fn auprc(set: &ScoredSet) -> Result<f64, MetricError> {
    let n = set.len();
    let n_pos = set.n_positive();
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut sum = 0.0f64;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let new_pos = order[i..=j]
            .iter()
            .filter(|&&idx| set.labels[idx] == 1)
            .count();
        seen += j - i + 1;
        tp += new_pos;
        if new_pos > 0 {
            sum += new_pos as f64 * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(sum / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Auroc,
    Auprc,
}

pub fn compute_metric(metric: Metric, set: &ScoredSet) -> Result<f64, MetricError> {
    match metric {
        Metric::Auroc => auroc(set),
        Metric::Auprc => auprc(set),
    }
}

/// Percentile bootstrap over records: resamples with replacement, recomputes
/// the metric, and reads the 2.5th/97.5th percentiles. Resamples violating
/// the metric's preconditions are redrawn, capped at 10x `iters` total draws.
pub fn bootstrap_ci(
    set: &ScoredSet,
    metric: Metric,
    iters: usize,
    seed: u64,
) -> Result<(f64, f64), MetricError> {
    if set.is_empty() {
        return Err(MetricError::Argument("empty scored set".into()));
    }
    let n = set.len();
    let mut rng = rng_from(mix_seed(seed, "bootstrap"));
    let mut values = Vec::with_capacity(iters);
    let mut draws = 0usize;
    let cap = iters.saturating_mul(10);
    while values.len() < iters {
        if draws >= cap {
            return Err(MetricError::RedrawCap(draws));
        }
        draws += 1;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..n);
            scores.push(set.scores[k]);
            labels.push(set.labels[k]);
        }
        let resample = ScoredSet {
            record_ids: Vec::new(),
            scores,
            labels,
        };
        match compute_metric(metric, &resample) {
            Ok(v) => values.push(v),
            Err(MetricError::SingleClass | MetricError::NoPositives) => continue,
            Err(e) => return Err(e),
        }
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// Linear-interpolation percentile over a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Point estimates plus 95% percentile-bootstrap intervals for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc: f64,
    pub auprc_ci: (f64, f64),
    pub n_bootstrap: usize,
    pub prevalence: f64,
    pub fraction: f64,
    pub split_tag: String,
}

pub fn evaluate(
    set: &ScoredSet,
    n_bootstrap: usize,
    seed: u64,
    fraction: f64,
    split_tag: &str,
) -> Result<EvalReport, MetricError> {
    Ok(EvalReport {
        auroc: auroc(set)?,
        auroc_ci: bootstrap_ci(set, Metric::Auroc, n_bootstrap, seed)?,
        auprc: auprc(set)?,
        auprc_ci: bootstrap_ci(set, Metric::Auprc, n_bootstrap, seed)?,
        n_bootstrap,
        prevalence: set.prevalence(),
        fraction,
        split_tag: split_tag.to_string(),
    })
}

/// 1-D W1 between empirical distributions: the integral of |CDF_a - CDF_b|.
/// With equal sizes this equals the mean absolute difference of the sorted
/// sequences.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Argument("empty distribution".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    Ok(w1_sorted(&sa, &sb))
}

/// W1 over already-sorted samples; shared by the cohort path so per-image
/// sorting happens once.
pub fn w1_sorted(sa: &[f64], sb: &[f64]) -> f64 {
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        let diffs: Vec<f64> = sa.iter().zip(sb).map(|(x, y)| (x - y).abs()).collect();
        return pairwise_sum(&diffs) / n;
    }
    // Merge walk over both CDFs.
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut total = 0.0f64;
    let mut prev = f64::NAN;
    loop {
        let next = match (sa.get(ia), sb.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        if !prev.is_nan() && next > prev {
            let cdf_a = ia as f64 / na;
            let cdf_b = ib as f64 / nb;
            total += (cdf_a - cdf_b).abs() * (next - prev);
        }
        while ia < sa.len() && sa[ia] == next {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == next {
            ib += 1;
        }
        prev = next;
    }
    total
}

fn sorted_pixels(img: &RasterImage) -> Vec<f64> {
    let mut v: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    v.sort_by(|x, y| x.total_cmp(y));
    v
}

fn seeded_sample<'a>(
    images: &'a [RasterImage],
    sample_n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<&'a RasterImage> {
    if images.len() <= sample_n {
        images.iter().collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, images.len(), sample_n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &images[i]).collect()
    }
}

/// Mean pairwise W1 over flattened pixel intensities across all cross pairs
/// of two seeded cohort samples.
pub fn cohort_distance(
    cohort_a: &[RasterImage],
    cohort_b: &[RasterImage],
    sample_n: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if cohort_a.is_empty() || cohort_b.is_empty() {
        return Err(MetricError::Argument("empty cohort".into()));
    }
    let mut rng = rng_from(mix_seed(seed, "cohort-a"));
    let sample_a = seeded_sample(cohort_a, sample_n, &mut rng);
    let mut rng = rng_from(mix_seed(seed, "cohort-b"));
    let sample_b = seeded_sample(cohort_b, sample_n, &mut rng);

    let sorted_a: Vec<Vec<f64>> = par_map(&sample_a, |_, img| sorted_pixels(img));
    let sorted_b: Vec<Vec<f64>> = par_map(&sample_b, |_, img| sorted_pixels(img));

    let pairs: Vec<(usize, usize)> = (0..sorted_a.len())
        .flat_map(|i| (0..sorted_b.len()).map(move |j| (i, j)))
        .collect();
    let distances: Vec<f64> = par_map(&pairs, |_, &(i, j)| w1_sorted(&sorted_a[i], &sorted_b[j]));
    Ok(pairwise_sum(&distances) / distances.len() as f64)
}

/// Mean pairwise W1 across all unordered within-cohort pairs of one seeded
/// cohort sample (self-distance).
pub fn cohort_self_distance(
    cohort: &[RasterImage],
    sample_n: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if cohort.is_empty() {
        return Err(MetricError::Argument("empty cohort".into()));
    }
    let mut rng = rng_from(mix_seed(seed, "cohort-a"));
    let sample = seeded_sample(cohort, sample_n, &mut rng);
    if sample.len() < 2 {
        return Ok(0.0);
    }
    let sorted: Vec<Vec<f64>> = par_map(&sample, |_, img| sorted_pixels(img));
    let pairs: Vec<(usize, usize)> = (0..sorted.len())
        .flat_map(|i| (i + 1..sorted.len()).map(move |j| (i, j)))
        .collect();
    let distances: Vec<f64> = par_map(&pairs, |_, &(i, j)| w1_sorted(&sorted[i], &sorted[j]));
    Ok(pairwise_sum(&distances) / distances.len() as f64)
}

/// Patch-grid attribution map, normalized to [0,1], with its bilinear
/// upsampling to image resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f64>,
    /// Upsampled overlay, image_side x image_side row-major.
    pub overlay: Vec<f64>,
    pub overlay_side: usize,
    pub target_class: usize,
    pub logits: Vec<f64>,
}

/// Grad-CAM over the final encoder block's patch-token representations:
/// per-token weight = mean over hidden dims of d(logit)/d(representation);
/// map = relu(weight x summed activation) per token, min-max normalized and
/// bilinearly upsampled.
pub fn saliency(
    params: &ModelParams,
    config: &ModelConfig,
    image: &RasterImage,
    target_class: usize,
) -> Result<SaliencyMap, MetricError> {
    let patches = patch_matrix(image, config).map_err(|e| MetricError::Saliency(e.to_string()))?;
    let (acts, grads, logits) = saliency_grad(params, config, &patches, target_class)
        .map_err(|e| MetricError::Saliency(e.to_string()))?;

    let hidden = config.hidden as f64;
    let mut grid: Vec<f64> = (0..config.n_patches())
        .map(|t| {
            let weight = grads.row(t).iter().sum::<f64>() / hidden;
            let act_sum = acts.row(t).iter().sum::<f64>();
            (weight * act_sum).max(0.0)
        })
        .collect();

    let max = grid.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let range = max - min;
        if range > 0.0 {
            for v in grid.iter_mut() {
                *v = (*v - min) / range;
            }
        } else {
            for v in grid.iter_mut() {
                *v = 1.0;
            }
        }
    }

    let side = config.grid_side();
    let overlay = bilinear_upsample(&grid, side, side, image.width, image.height);
    Ok(SaliencyMap {
        rows: side,
        cols: side,
        grid,
        overlay,
        overlay_side: image.width,
        target_class,
        logits,
    })
}

fn bilinear_upsample(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(dst_w * dst_h);
    let fx = src_w as f64 / dst_w as f64;
    let fy = src_h as f64 / dst_h as f64;
    for y in 0..dst_h {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = sy - y0 as f64;
        for x in 0..dst_w {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = sx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bottom = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Writes the heat overlay alpha-blended over the grayscale image as RGB PNG.
pub fn save_saliency_png(
    map: &SaliencyMap,
    image: &RasterImage,
    path: &std::path::Path,
    alpha: f64,
) -> Result<(), MetricError> {
    if image.width * image.height != map.overlay.len() {
        return Err(MetricError::Saliency(
            "overlay does not match image size".into(),
        ));
    }
    let mut buf = Vec::with_capacity(image.width * image.height * 3);
    for (i, &p) in image.pixels.iter().enumerate() {
        let gray = p.clamp(0.0, 1.0) as f64;
        let heat = map.overlay[i].clamp(0.0, 1.0);
        let a = alpha * heat;
        // Heat color ramps blue -> red through the map value.
        let heat_rgb = [heat, 0.15 * heat, 1.0 - heat];
        let px = [
            (1.0 - a) * gray + a * heat_rgb[0],
            (1.0 - a) * gray + a * heat_rgb[1],
            (1.0 - a) * gray + a * heat_rgb[2],
        ];
        for c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let rgb = image::RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .ok_or_else(|| MetricError::Saliency("buffer mismatch".into()))?;
    rgb.save(path)
        .map_err(|e| MetricError::Saliency(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(scores: Vec<f64>, labels: Vec<u8>) -> ScoredSet {
        let ids = (0..scores.len()).map(|i| format!("r{i}")).collect();
        ScoredSet::new(ids, scores, labels).unwrap()
    }

    /// Brute-force pair counting with half credit for ties.
    fn auroc_oracle(set: &ScoredSet) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in set.labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in set.labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if set.scores[i] > set.scores[j] {
                    wins += 1.0;
                } else if set.scores[i] == set.scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Exhaustive prefix enumeration over descending distinct thresholds.
    fn auprc_oracle(set: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = set.scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_pos = set.n_positive();
        let mut sum = 0.0f64;
        let mut prev_tp = 0usize;
        for &t in &thresholds {
            let prefix: Vec<usize> = (0..set.len()).filter(|&i| set.scores[i] >= t).collect();
            let tp = prefix.iter().filter(|&&i| set.labels[i] == 1).count();
            let new_pos = tp - prev_tp;
            if new_pos > 0 {
                sum += new_pos as f64 * (tp as f64 / prefix.len() as f64);
            }
            prev_tp = tp;
        }
        sum / n_pos as f64
    }

    #[test]
    fn auroc_worked_example() {
        let s = set(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]);
        assert_eq!(auroc(&s).unwrap(), 0.75);
        assert_eq!(auroc_oracle(&s), 0.75);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let s = set(vec![0.3; 6], vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn auroc_perfect_separation_is_one() {
        let s = set(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn auroc_rejects_single_class() {
        let s = set(vec![0.1, 0.2], vec![1, 1]);
        assert!(matches!(auroc(&s), Err(MetricError::SingleClass)));
    }

    #[test]
    fn auroc_label_flip_complements_for_tie_free_scores() {
        let s = set(vec![0.1, 0.7, 0.3, 0.9, 0.2], vec![0, 1, 1, 0, 0]);
        let flipped = set(s.scores.clone(), s.labels.iter().map(|&l| 1 - l).collect());
        assert!((auroc(&s).unwrap() + auroc(&flipped).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let s = set(vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5], vec![0, 1, 1, 0, 0, 1]);
        let transformed = set(
            s.scores.iter().map(|&v| (5.0 * v).exp()).collect(),
            s.labels.clone(),
        );
        assert_eq!(auroc(&s).unwrap(), auroc(&transformed).unwrap());
    }

    #[test]
    fn auprc_worked_examples() {
        assert_eq!(auprc(&set(vec![0.9, 0.1], vec![1, 0])).unwrap(), 1.0);
        assert_eq!(auprc(&set(vec![0.9, 0.1], vec![0, 1])).unwrap(), 0.5);
        assert!(matches!(
            auprc(&set(vec![0.9, 0.1], vec![0, 0])),
            Err(MetricError::NoPositives)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn metrics_match_bruteforce_oracles(
            n in 2usize..=12,
            seed in 0u64..5000,
        ) {
            let mut rng = crate::util::rng_from(seed);
            // Coarse score grid provokes plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let s = set(scores, labels);
            let n_pos = s.n_positive();
            if n_pos > 0 && n_pos < n {
                prop_assert_eq!(auroc(&s).unwrap(), auroc_oracle(&s));
            }
            if n_pos > 0 {
                prop_assert_eq!(auprc(&s).unwrap(), auprc_oracle(&s));
            }
        }
    }

    #[test]
    fn bootstrap_degenerate_ties_give_point_interval() {
        let s = set(vec![0.5; 10], vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let (lo, hi) = bootstrap_ci(&s, Metric::Auroc, 50, 3).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));
    }

    #[test]
    fn bootstrap_is_deterministic_under_seed() {
        let mut rng = crate::util::rng_from(4);
        let scores: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let s = set(scores, labels);
        let a = bootstrap_ci(&s, Metric::Auroc, 100, 7).unwrap();
        let b = bootstrap_ci(&s, Metric::Auroc, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&s, Metric::Auroc, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_separated_set_is_tight_and_covers_point() {
        let mut scores = vec![0.0; 2000];
        let mut labels = vec![0u8; 2000];
        let mut rng = crate::util::rng_from(9);
        for i in 0..2000 {
            let positive = i % 2 == 0;
            labels[i] = positive as u8;
            scores[i] = if positive {
                rng.random_range(0.7..1.0)
            } else {
                rng.random_range(0.0..0.3)
            };
        }
        let s = set(scores, labels);
        let point = auroc(&s).unwrap();
        let (lo, hi) = bootstrap_ci(&s, Metric::Auroc, 200, 1).unwrap();
        assert!(hi - lo < 0.05);
        assert!(lo <= point && point <= hi);
    }

    #[test]
    fn bootstrap_redraw_cap_errors() {
        // One record: every resample is single-class.
        let s = set(vec![0.5, 0.4], vec![1, 1]);
        assert!(matches!(
            bootstrap_ci(&s, Metric::Auroc, 10, 0),
            Err(MetricError::RedrawCap(_))
        ));
    }

    #[test]
    fn wasserstein_worked_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0, 0.0], &[5.0, 5.0]).unwrap(), 5.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(
            wasserstein_1d(&[], &[1.0]),
            Err(MetricError::Argument(_))
        ));
    }

    #[test]
    fn wasserstein_unequal_sizes_match_equal_size_limit() {
        // {0, 1} vs {0, 0, 1, 1} are the same empirical distribution.
        let d = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(d.abs() < 1e-15);
        // Point mass vs two-point distribution: integral of |CDF diff|.
        let d = wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn wasserstein_metric_properties(
            a in prop::collection::vec(-50.0f64..50.0, 1..12),
            b in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in prop::collection::vec(-50.0f64..50.0, 1..12),
        ) {
            let dab = wasserstein_1d(&a, &b).unwrap();
            let dba = wasserstein_1d(&b, &a).unwrap();
            prop_assert!((dab - dba).abs() < 1e-9, "symmetry");
            prop_assert!(dab >= 0.0, "non-negativity");
            let daa = wasserstein_1d(&a, &a).unwrap();
            prop_assert!(daa.abs() < 1e-12, "identity");
            let dac = wasserstein_1d(&a, &c).unwrap();
            let dcb = wasserstein_1d(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-9, "triangle: {dab} > {dac} + {dcb}");
        }

        #[test]
        fn wasserstein_equal_sizes_match_sorted_difference_oracle(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            seed in 0u64..100,
        ) {
            let mut rng = crate::util::rng_from(seed);
            let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let got = wasserstein_1d(&a, &b).unwrap();
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let oracle: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>()
                / a.len() as f64;
            prop_assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cohort_self_distance_of_identical_images_is_zero() {
        let img = RasterImage {
            width: 8,
            height: 8,
            pixels: (0..64).map(|i| i as f32 / 64.0).collect(),
            source_record_id: "a".into(),
        };
        let cohort: Vec<RasterImage> = (0..5).map(|_| img.clone()).collect();
        assert_eq!(cohort_self_distance(&cohort, 5, 1).unwrap(), 0.0);
    }

    #[test]
    fn cohort_distance_is_deterministic() {
        let make = |seed: u64| {
            let mut rng = crate::util::rng_from(seed);
            (0..6)
                .map(|i| RasterImage {
                    width: 8,
                    height: 8,
                    pixels: (0..64).map(|_| rng.random_range(0.0..1.0f32)).collect(),
                    source_record_id: format!("r{i}"),
                })
                .collect::<Vec<_>>()
        };
        let a = make(1);
        let b = make(2);
        let d1 = cohort_distance(&a, &b, 4, 9).unwrap();
        let d2 = cohort_distance(&a, &b, 4, 9).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn saliency_map_is_normalized() {
        use crate::model::ModelParams;
        let config = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_size: 4,
            image_side: 16,
            channels: 1,
            vocab_size: 4,
            n_classes: 2,
            dropout: 0.0,
        };
        let mut saw_nondegenerate = false;
        for seed in 0..20u64 {
            let params = ModelParams::init(&config, seed);
            let mut rng = crate::util::rng_from(seed + 100);
            let image = RasterImage {
                width: 16,
                height: 16,
                pixels: (0..256).map(|_| rng.random_range(0.0..1.0f32)).collect(),
                source_record_id: "s".into(),
            };
            for target in 0..2 {
                let map = saliency(&params, &config, &image, target).unwrap();
                assert_eq!(map.grid.len(), 16);
                assert!(map.grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(map
                    .overlay
                    .iter()
                    .all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
                let max = map.grid.iter().copied().fold(0.0f64, f64::max);
                if map.grid.iter().any(|&v| v > 0.0) {
                    assert_eq!(max, 1.0, "non-degenerate map must peak at 1");
                    saw_nondegenerate = true;
                }
            }
        }
        assert!(saw_nondegenerate, "no seed produced a non-zero map");
    }

    #[test]
    fn saliency_zero_gradients_give_zero_map() {
        use crate::model::{ModelParams, Tensor};
        let config = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_size: 4,
            image_side: 16,
            channels: 1,
            vocab_size: 4,
            n_classes: 2,
            dropout: 0.0,
        };
        let mut params = ModelParams::init(&config, 3);
        let head = params.get_mut("cls_head.weight");
        *head = Tensor::zeros(head.rows, head.cols);
        let image = RasterImage::blank(16, 16, "z");
        let map = saliency(&params, &config, &image, 0).unwrap();
        assert!(map.grid.iter().all(|&v| v == 0.0));
        assert!(map.overlay.iter().all(|&v| v == 0.0));
    }
}
