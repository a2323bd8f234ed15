//! Relative L2 errors, error densities, per-sample error summaries and attention entropy.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::encoding::CoordinateNormalizer;
use crate::error::{Result, RetoError};
use crate::model::{AttentionObserver, Model};

pub const DEFAULT_BINS: usize = 64;
pub const ENTROPY_EPS: f64 = 1e-12;

fn check_pair(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(RetoError::Shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if !(den > 0.0) {
        return Err(RetoError::UndefinedMetric("ground truth has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// `‖pred - truth‖₂ / ‖truth‖₂` over the flattened field.
pub fn relative_l2(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth.iter()) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    ratio(num, den)
}

/// Relative L2 of each column separately.
pub fn relative_l2_per_channel(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_pair(&pred, &truth)?;
    pred.columns()
        .into_iter()
        .zip(truth.columns())
        .map(|(p, t)| {
            let num: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            ratio(num, t.dot(&t))
        })
        .collect()
}

/// Density-normalized histogram: `Σ density · width = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Bins `values` over `[lo, hi]`; the last bin is closed on the right.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(RetoError::EmptyInput("histogram of no values".into()));
        }
        if bins == 0 || !(hi > lo) {
            return Err(RetoError::Parameter(format!("invalid histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            if !v.is_finite() || v < lo || v > hi {
                return Err(RetoError::Domain(format!("value {v} outside [{lo}, {hi}]")));
            }
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let norm = 1.0 / (values.len() as f64 * width);
        Ok(Self {
            edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
            densities: counts.iter().map(|&c| c as f64 * norm).collect(),
        })
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn integral(&self) -> f64 {
        self.edges.windows(2).zip(&self.densities).map(|(w, d)| d * (w[1] - w[0])).sum()
    }

    /// Center of the densest bin.
    pub fn peak(&self) -> f64 {
        let (i, _) = self
            .densities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        self.centers()[i]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,density\n");
        for (c, d) in self.centers().iter().zip(&self.densities) {
            let _ = writeln!(s, "{c:e},{d:e}");
        }
        s
    }
}

/// Histogram of absolute errors over `[0, max]` (or `[0, 1]` when every error is zero).
pub fn abs_error_pdf(errors: &[f64], bins: usize) -> Result<Histogram> {
    if errors.is_empty() {
        return Err(RetoError::EmptyInput("no errors to bin".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(RetoError::Domain(format!("absolute error {e} is negative or non-finite")));
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    Histogram::new(errors, 0.0, if max > 0.0 { max } else { 1.0 }, bins)
}

/// Shannon entropy `H = -Σ a ln a` and `Ĥ = H / ln N` for one attention row.
///
/// `eps` floors the logarithm's argument, `ln(max(a, ε))`, so zero weights contribute nothing
/// and weights at or above `ε` are taken exactly.
pub fn attention_entropy(row: &[f64], eps: f64) -> Result<(f64, f64)> {
    let n = row.len();
    if n < 2 {
        return Err(RetoError::Domain(format!("entropy normalization needs N >= 2, got {n}")));
    }
    let mut sum = 0.0;
    let mut h = 0.0;
    for &a in row {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(RetoError::Domain(format!("attention weight {a} is not a probability")));
        }
        sum += a;
        h -= a * a.max(eps).ln();
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(RetoError::Domain(format!("attention row sums to {sum}")));
    }
    Ok((h, h / (n as f64).ln()))
}

/// Which attention maps contribute to an entropy profile.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySelector {
    /// `None` selects the final block.
    pub blocks: Option<Vec<usize>>,
    /// `None` selects every head.
    pub heads: Option<Vec<usize>>,
    /// Pool the selected heads of a block into one table.
    pub average_heads: bool,
}

impl Default for EntropySelector {
    fn default() -> Self {
        Self {
            blocks: None,
            heads: None,
            average_heads: true,
        }
    }
}

impl EntropySelector {
    fn block_list(&self, num_blocks: usize) -> Vec<usize> {
        self.blocks.clone().unwrap_or_else(|| vec![num_blocks - 1])
    }

    fn wants(&self, blocks: &[usize], block: usize, head: usize) -> bool {
        blocks.contains(&block) && self.heads.as_ref().is_none_or(|h| h.contains(&head))
    }
}

/// Normalized entropies of every query row for one (block, head) pair, or a head-pooled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTable {
    pub block: usize,
    /// `None` when the heads were pooled.
    pub head: Option<usize>,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl EntropyTable {
    pub fn histogram(&self, bins: usize) -> Result<Histogram> {
        // ε can push Ĥ a hair outside [0, 1]
        let clamped: Vec<f64> = self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Histogram::new(&clamped, 0.0, 1.0, bins)
    }

    pub fn median(&self) -> f64 {
        quantile(&sorted(&self.values), 0.5)
    }

    pub fn label(&self) -> String {
        match self.head {
            Some(h) => format!("block{}_head{}_n{}", self.block, h, self.resolution),
            None => format!("block{}_heads_mean_n{}", self.block, self.resolution),
        }
    }
}

/// Streams entropies out of a forward pass without materializing weight matrices.
#[derive(Debug)]
struct EntropyCollector {
    blocks: Vec<usize>,
    selector: EntropySelector,
    eps: f64,
    /// `(block, head) -> values`, in first-seen order.
    tables: Vec<((usize, usize), Vec<f64>)>,
    error: Option<RetoError>,
}

impl AttentionObserver for EntropyCollector {
    fn wants(&self, block: usize, head: usize) -> bool {
        self.selector.wants(&self.blocks, block, head)
    }

    fn observe(&mut self, block: usize, head: usize, _row: usize, weights: &[f64]) {
        match attention_entropy(weights, self.eps) {
            Ok((_, hn)) => {
                let key = (block, head);
                match self.tables.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(hn),
                    None => self.tables.push((key, vec![hn])),
                }
            }
            Err(e) => {
                self.error.get_or_insert(e);
            }
        }
    }
}

fn assemble(mut tables: Vec<((usize, usize), Vec<f64>)>, average: bool, resolution: usize) -> Vec<EntropyTable> {
    tables.sort_by_key(|(k, _)| *k);
    if !average {
        return tables
            .into_iter()
            .map(|((block, head), values)| EntropyTable {
                block,
                head: Some(head),
                resolution,
                values,
            })
            .collect();
    }
    let mut out: Vec<EntropyTable> = Vec::new();
    for ((block, _), values) in tables {
        match out.last_mut() {
            Some(t) if t.block == block => t.values.extend(values),
            _ => out.push(EntropyTable {
                block,
                head: None,
                resolution,
                values,
            }),
        }
    }
    out
}

/// Entropy tables for raw coordinates, computed row by row during the forward pass.
pub fn entropy_profile(
    model: &Model,
    coords: ArrayView2<f64>,
    normalizer: &CoordinateNormalizer,
    selector: &EntropySelector,
) -> Result<Vec<EntropyTable>> {
    let blocks = selector.block_list(model.config().num_blocks);
    if let Some(b) = blocks.iter().find(|b| **b >= model.config().num_blocks) {
        return Err(RetoError::Bounds(format!("block {b} out of range")));
    }
    let mut collector = EntropyCollector {
        blocks,
        selector: selector.clone(),
        eps: ENTROPY_EPS,
        tables: Vec::new(),
        error: None,
    };
    let normalized = normalizer.apply_rows(coords);
    model.forward_normalized(normalized.view(), Some(&mut collector))?;
    if let Some(e) = collector.error {
        return Err(e);
    }
    Ok(assemble(collector.tables, selector.average_heads, coords.nrows()))
}

/// Entropy tables from weights retained by [`Model::forward`].
pub fn entropy_profile_from_weights(
    weights: Option<&Vec<Vec<Array2<f64>>>>,
    selector: &EntropySelector,
) -> Result<Vec<EntropyTable>> {
    let weights = weights.ok_or_else(|| RetoError::Usage("attention weights were not retained".into()))?;
    if weights.is_empty() {
        return Err(RetoError::Usage("no attention weights recorded".into()));
    }
    let blocks = selector.block_list(weights.len());
    let mut tables = Vec::new();
    let mut resolution = 0;
    for (b, heads) in weights.iter().enumerate() {
        for (h, w) in heads.iter().enumerate() {
            if !selector.wants(&blocks, b, h) {
                continue;
            }
            resolution = w.nrows();
            let values = w
                .rows()
                .into_iter()
                .map(|r| attention_entropy(r.as_slice().expect("standard layout"), ENTROPY_EPS).map(|(_, hn)| hn))
                .collect::<Result<Vec<_>>>()?;
            tables.push(((b, h), values));
        }
    }
    Ok(assemble(tables, selector.average_heads, resolution))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of already-sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary of per-sample errors with the best and worst samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDistribution {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Highest errors first.
    pub worst: Vec<(String, f64)>,
    /// Lowest errors first.
    pub best: Vec<(String, f64)>,
}

/// Summarizes `(sample_id, error)` pairs. Ties are ranked by sample id.
pub fn per_sample_error_distribution(errors: &[(String, f64)], k: usize) -> Result<ErrorDistribution> {
    if errors.is_empty() {
        return Err(RetoError::EmptyDataset);
    }
    let values = sorted(&errors.iter().map(|(_, e)| *e).collect::<Vec<_>>());
    let mut ranked = errors.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let best = ranked.iter().take(k).cloned().collect();
    let worst = ranked.iter().rev().take(k).cloned().collect();
    Ok(ErrorDistribution {
        min: values[0],
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q3: quantile(&values, 0.75),
        max: values[values.len() - 1],
        worst,
        best,
    })
}

/// Evaluation results for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub channels: Vec<String>,
    /// `(sample_id, per-channel relative L2)`.
    pub per_sample: Vec<(String, Vec<f64>)>,
    pub mean_per_channel: Vec<f64>,
    /// Distribution of each sample's mean-over-channels error.
    pub distribution: ErrorDistribution,
    /// Absolute errors of Z-scored predictions, all channels pooled.
    pub error_pdf: Histogram,
}

impl MetricsReport {
    /// Builds a report from per-sample channel errors and pooled absolute errors.
    pub fn new(channels: Vec<String>, per_sample: Vec<(String, Vec<f64>)>, abs_errors: &[f64], bins: usize, k: usize) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(RetoError::EmptyDataset);
        }
        let c = channels.len();
        let mut mean = vec![0.0; c];
        for (_, v) in &per_sample {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / per_sample.len() as f64;
            }
        }
        let scores: Vec<(String, f64)> = per_sample
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().sum::<f64>() / v.len().max(1) as f64))
            .collect();
        Ok(Self {
            distribution: per_sample_error_distribution(&scores, k)?,
            error_pdf: abs_error_pdf(abs_errors, bins)?,
            channels,
            per_sample,
            mean_per_channel: mean,
        })
    }

    /// Structured text: one titled table per statistic.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[relative_l2_mean]");
        let _ = writeln!(s, "channel\trel_l2");
        for (c, m) in self.channels.iter().zip(&self.mean_per_channel) {
            let _ = writeln!(s, "{c}\t{m:e}");
        }
        let d = &self.distribution;
        let _ = writeln!(s, "\n[per_sample_distribution]");
        let _ = writeln!(s, "min\tq1\tmedian\tq3\tmax");
        let _ = writeln!(s, "{:e}\t{:e}\t{:e}\t{:e}\t{:e}", d.min, d.q1, d.median, d.q3, d.max);
        let _ = writeln!(s, "\n[worst_samples]");
        for (id, e) in &d.worst {
            let _ = writeln!(s, "{id}\t{e:e}");
        }
        let _ = writeln!(s, "\n[best_samples]");
        for (id, e) in &d.best {
            let _ = writeln!(s, "{id}\t{e:e}");
        }
        let _ = writeln!(s, "\n[abs_error_pdf]");
        s.push_str(&self.error_pdf.to_csv().replace(',', "\t"));
        s
    }

    /// `sample_id,<channel>...` table of per-sample relative L2.
    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("sample_id");
        for c in &self.channels {
            let _ = write!(s, ",rel_l2_{c}");
        }
        s.push('\n');
        for (id, v) in &self.per_sample {
            s.push_str(id);
            for x in v {
                let _ = write!(s, ",{x:e}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_anchors() {
        let t = array![[3.0], [4.0]];
        assert_eq!(relative_l2(t.view(), t.view()).unwrap(), 0.0);
        assert_eq!(relative_l2(Array2::zeros((2, 1)).view(), t.view()).unwrap(), 1.0);
        assert_eq!(relative_l2(array![[3.0], [0.0]].view(), t.view()).unwrap(), 0.8);
        assert!(matches!(
            relative_l2(t.view(), Array2::zeros((2, 1)).view()),
            Err(RetoError::UndefinedMetric(_))
        ));
        let two = array![[3.0, 1.0], [4.0, 0.0]];
        let pred = array![[3.0, 0.0], [0.0, 0.0]];
        assert_eq!(relative_l2_per_channel(pred.view(), two.view()).unwrap(), vec![0.8, 1.0]);
    }

    #[test]
    fn pdf_of_constant_errors() {
        let h = abs_error_pdf(&[0.3; 10], 8).unwrap();
        let occupied: Vec<&f64> = h.densities.iter().filter(|d| **d > 0.0).collect();
        assert_eq!(occupied.len(), 1);
        let width = h.edges[1] - h.edges[0];
        assert!((occupied[0] - 1.0 / width).abs() < 1e-9);
        assert!(abs_error_pdf(&[], 4).is_err());
        assert!(abs_error_pdf(&[-1.0], 4).is_err());
        assert!((abs_error_pdf(&[0.0, 0.0], 4).unwrap().integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pdf_of_uniform_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        v.push(1.0); // pin the range to [0, 1]
        let h = abs_error_pdf(&v, 10).unwrap();
        for d in &h.densities {
            assert!((d - 1.0).abs() < 0.05, "{d}");
        }
    }

    #[test]
    fn entropy_anchors() {
        let (_, u) = attention_entropy(&[0.01; 100], ENTROPY_EPS).unwrap();
        assert!((u - 1.0).abs() < 1e-9);
        let mut one_hot = vec![0.0; 100];
        one_hot[17] = 1.0;
        let (_, z) = attention_entropy(&one_hot, ENTROPY_EPS).unwrap();
        assert!(z.abs() < 1e-9);
        let (h, hn) = attention_entropy(&[0.5, 0.5], ENTROPY_EPS).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-12);
        assert!((hn - 1.0).abs() < 1e-12);
        assert!(matches!(attention_entropy(&[1.0], ENTROPY_EPS), Err(RetoError::Domain(_))));
        assert!(attention_entropy(&[0.7, 0.7], ENTROPY_EPS).is_err());
    }

    #[test]
    fn retained_weights_three_points() {
        let rows = array![[1.0, 0.0, 0.0], [0.5, 0.25, 0.25], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let direct: Vec<f64> = rows
            .rows()
            .into_iter()
            .map(|r| -r.iter().map(|&a: &f64| if a > 0.0 { a * a.ln() } else { 0.0 }).sum::<f64>() / 3f64.ln())
            .collect();
        let w = vec![vec![rows.clone()]];
        let t = entropy_profile_from_weights(Some(&w), &EntropySelector::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].resolution, 3);
        for (a, b) in t[0].values.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        let hist = t[0].histogram(4).unwrap();
        let want = Histogram::new(&direct.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(), 0.0, 1.0, 4).unwrap();
        assert_eq!(hist, want);
        assert!(matches!(
            entropy_profile_from_weights(None, &EntropySelector::default()),
            Err(RetoError::Usage(_))
        ));
    }

    #[test]
    fn quartiles_and_ranking() {
        let e: Vec<(String, f64)> = [0.3, 0.1, 0.5, 0.2, 0.4]
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("s{i}"), *v))
            .collect();
        let d = per_sample_error_distribution(&e, 2).unwrap();
        assert_eq!(d.median, 0.3);
        assert_eq!((d.min, d.max), (0.1, 0.5));
        assert!((d.q1 - 0.2).abs() < 1e-15 && (d.q3 - 0.4).abs() < 1e-15);
        assert_eq!(d.worst[0].0, "s2");
        assert_eq!(d.best[0].0, "s1");
        assert_eq!(d, per_sample_error_distribution(&e, 2).unwrap());
        let same: Vec<(String, f64)> = (0..4).map(|i| (format!("s{i}"), 0.25)).collect();
        let d = per_sample_error_distribution(&same, 1).unwrap();
        assert!([d.min, d.q1, d.median, d.q3, d.max].iter().all(|v| *v == 0.25));
    }

    fn random_row(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(4)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(seed in any::<u64>(), n in 2usize..200) {
            let (_, hn) = attention_entropy(&random_row(seed, n), ENTROPY_EPS).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&hn));
        }

        #[test]
        fn mixing_toward_uniform_never_lowers_entropy(seed in any::<u64>(), n in 2usize..60) {
            let a = random_row(seed, n);
            let u = 1.0 / n as f64;
            let mut last = f64::NEG_INFINITY;
            for step in 0..=20 {
                let t = step as f64 / 20.0;
                let row: Vec<f64> = a.iter().map(|x| (1.0 - t) * x + t * u).collect();
                let (h, _) = attention_entropy(&row, ENTROPY_EPS).unwrap();
                prop_assert!(h >= last - 1e-12);
                last = h;
            }
        }

        #[test]
        fn l2_is_scale_covariant(vals in proptest::collection::vec(-10.0f64..10.0, 8), alpha in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let p = Array2::from_shape_vec((4, 1), vals[..4].to_vec()).unwrap();
            let t = Array2::from_shape_vec((4, 1), vals[4..].to_vec()).unwrap();
            prop_assume!(t.iter().any(|v| v.abs() > 1e-3));
            let a = relative_l2(p.view(), t.view()).unwrap();
            let b = relative_l2((&p * alpha).view(), (&t * alpha).view()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn pdf_integrates_to_one(vals in proptest::collection::vec(0.0f64..5.0, 1..300), bins in 1usize..80) {
            let h = abs_error_pdf(&vals, bins).unwrap();
            prop_assert!((h.integral() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooled_heads_concatenate_in_head_order() {
        let a = Array1::from(vec![0.5, 0.5]).insert_axis(ndarray::Axis(0));
        let w = vec![vec![a.clone(), a]];
        let sel = EntropySelector::default();
        let pooled = entropy_profile_from_weights(Some(&w), &sel).unwrap();
        assert_eq!(pooled[0].values.len(), 2);
        let split = entropy_profile_from_weights(Some(&w), &EntropySelector { average_heads: false, ..sel }).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split[1].label(), "block0_head1_n1");
    }
}
