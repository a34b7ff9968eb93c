//! Map agreement, image quality and binary classification metrics.
//!
//! NCC is the zero-normalized cross-correlation with population standard
//! deviations. PSNR and SSIM use a peak of 2, the width of `[-1, 1]`. SSIM
//! averages the local index over every valid position of a uniform cubic
//! window (7³, or the largest odd size that fits).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{Classifier, Generator, Params};
use crate::phantom::{derive_seed, PhantomSample};
use crate::train::{train_classifier, ClassifierTraining};
use crate::volume::{ClassLabel, Grid3, Volume};

pub const DEFAULT_PEAK: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn ncc(pred: &Grid3, truth: &Grid3) -> Result<f64> {
    pred.check_same_shape(truth)?;
    let (ma, sa) = mean_std(pred.data());
    let (mb, sb) = mean_std(truth.data());
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::ConstantInput);
    }
    let n = pred.len() as f64;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - ma) * (b - mb)).sum();
    Ok((s / (n * (sa * sb))).clamp(-1.0, 1.0))
}

/// `10 log10(peak² / MSE)`; `+inf` for identical inputs.
pub fn psnr(pred: &Grid3, truth: &Grid3, peak: f64) -> Result<f64> {
    pred.check_same_shape(truth)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("PSNR peak {peak}")));
    }
    let mse = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// Window edge used by [`ssim`] for a given shape.
pub fn ssim_window(shape: [usize; 3]) -> Result<usize> {
    let m = shape.iter().copied().min().unwrap_or(0).min(SSIM_WINDOW);
    let w = if m % 2 == 1 { m } else { m.saturating_sub(1) };
    if w < 3 {
        return Err(Error::VolumeTooSmall(shape, "SSIM needs every extent >= 3".into()));
    }
    Ok(w)
}

/// Sums over every valid `w`-window along one axis.
fn box_sum_axis(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - w + 1;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut out = vec![0.0; out_dims.iter().product()];
    let mut o = 0;
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let base = (d * dims[1] + h) * dims[2] + x;
                out[o] = (0..w).map(|i| data[base + i * stride]).sum();
                o += 1;
            }
        }
    }
    (out, out_dims)
}

fn box_sum(data: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let (a, da) = box_sum_axis(data, dims, 2, w);
    let (b, db) = box_sum_axis(&a, da, 1, w);
    box_sum_axis(&b, db, 0, w).0
}

pub fn ssim(a: &Grid3, b: &Grid3) -> Result<f64> {
    ssim_with_peak(a, b, DEFAULT_PEAK)
}

pub fn ssim_with_peak(a: &Grid3, b: &Grid3, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let dims = a.shape();
    let w = ssim_window(dims)?;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (w * w * w) as f64;
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect() };
    let sa = box_sum(a.data(), dims, w);
    let sb = box_sum(b.data(), dims, w);
    let saa = box_sum(&prod(|x, _| x * x), dims, w);
    let sbb = box_sum(&prod(|_, y| y * y), dims, w);
    let sab = box_sum(&prod(|x, y| x * y), dims, w);
    let mut total = 0.0;
    for i in 0..sa.len() {
        let (ma, mb) = (sa[i] / n, sb[i] / n);
        let va = saa[i] / n - ma * ma;
        let vb = sbb[i] / n - mb * mb;
        let cov = sab[i] / n - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / sa.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// AUC by the rank statistic (ties count one half); the rates use
/// `score >= 0.5` as the positive call.
pub fn classification_metrics(scores: &[f64], labels: &[bool]) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    // Mann–Whitney U with average ranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    let auc = u / (pos * neg) as f64;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let call = s >= DECISION_THRESHOLD;
        if call && l {
            tp += 1;
        } else if !call && !l {
            tn += 1;
        }
    }
    Ok(ClassificationMetrics {
        auc,
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
    })
}

/// Box-plot summary; quartiles by linear interpolation between order
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<BoxStats> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("box statistics of an empty list".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(BoxStats {
            n: v.len(),
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    Ok(BoxStats::of(values)?.median)
}

/// Per-sample map metrics, their summaries, the validation SSIM trace and
/// an optional classification block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub peak: f64,
    pub ncc: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim_trace: Vec<(u64, f64)>,
    pub classification: Option<ClassificationMetrics>,
}

pub const SAMPLE_CSV_HEADER: &str = "sample,ncc,psnr";
pub const SUMMARY_CSV_HEADER: &str = "metric,n,min,q1,median,q3,max,peak";
pub const CLASSIFICATION_CSV_HEADER: &str = "arm,auc,accuracy,sensitivity,specificity";

impl MetricReport {
    pub fn new(peak: f64) -> Self {
        MetricReport {
            peak,
            ..Default::default()
        }
    }

    /// Adds NCC and PSNR of one predicted map against its truth.
    pub fn push_map(&mut self, pred: &Grid3, truth: &Grid3) -> Result<()> {
        let n = ncc(pred, truth)?;
        let p = psnr(pred, truth, self.peak)?;
        self.ncc.push(n);
        self.psnr.push(p);
        Ok(())
    }

    pub fn samples_csv(&self) -> String {
        let mut out = format!("{SAMPLE_CSV_HEADER}\n");
        for (i, (n, p)) in self.ncc.iter().zip(&self.psnr).enumerate() {
            let _ = writeln!(out, "{i},{n:?},{p:?}");
        }
        out
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for (name, values) in [("ncc", &self.ncc), ("psnr", &self.psnr)] {
            if values.is_empty() {
                continue;
            }
            let s = BoxStats::of(values)?;
            let _ = writeln!(
                out,
                "{name},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                s.n, s.min, s.q1, s.median, s.q3, s.max, self.peak
            );
        }
        Ok(out)
    }
}

pub fn classification_csv_row(arm: &str, m: &ClassificationMetrics) -> String {
    format!("{arm},{:?},{:?},{:?},{:?}", m.auc, m.accuracy, m.sensitivity, m.specificity)
}

/// Agreement of predicted maps with phantom ground truth, and the same
/// predictions scored against another subject's truth map.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub report: MetricReport,
    pub baseline_ncc: Vec<f64>,
}

impl RecoveryReport {
    pub fn median_ncc(&self) -> Result<f64> {
        median(&self.report.ncc)
    }

    pub fn median_baseline(&self) -> Result<f64> {
        median(&self.baseline_ncc)
    }
}

/// One volume to map, with the true map toward its evaluation target.
#[derive(Debug, Clone)]
pub struct RecoveryCase<'a> {
    pub volume: &'a Volume,
    pub label: ClassLabel,
    pub subject_id: usize,
    pub truth: Grid3,
}

/// Evaluation target of a volume of stage `label`: the next stage,
/// cyclically, so every stage pair direction is exercised for K = 2.
pub fn recovery_target(label: ClassLabel) -> Result<ClassLabel> {
    ClassLabel::new((label.index() + 1) % label.k(), label.k())
}

/// Maps every case toward [`recovery_target`] and scores the map against
/// its truth. The baseline pairs each prediction with the truth of a
/// different subject for the same stage pair, drawn by a seeded shuffle.
pub fn score_recovery(generator: &Generator, params: &Params, cases: &[RecoveryCase<'_>], seed: u64) -> Result<RecoveryReport> {
    let mut report = MetricReport::new(DEFAULT_PEAK);
    let mut preds = Vec::with_capacity(cases.len());
    for c in cases {
        let pred = generator.map(params, c.volume, recovery_target(c.label)?)?.into_grid();
        report.push_map(&pred, &c.truth)?;
        preds.push(pred);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline_ncc = Vec::new();
    for (i, ci) in cases.iter().enumerate() {
        let mut pool: Vec<usize> = (0..cases.len())
            .filter(|&j| cases[j].label == ci.label && cases[j].subject_id != ci.subject_id)
            .collect();
        pool.shuffle(&mut rng);
        if let Some(&j) = pool.first() {
            baseline_ncc.push(ncc(&preds[i], &cases[j].truth)?);
        }
    }
    Ok(RecoveryReport { report, baseline_ncc })
}

/// [`score_recovery`] on phantom samples, with truth in each sample's
/// normalized units.
pub fn map_recovery(generator: &Generator, params: &Params, samples: &[&PhantomSample], seed: u64) -> Result<RecoveryReport> {
    let cases = samples
        .iter()
        .map(|s| {
            Ok(RecoveryCase {
                volume: &s.volume,
                label: s.label,
                subject_id: s.subject_id,
                truth: s.gt_map_normalized(recovery_target(s.label)?.index()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    score_recovery(generator, params, &cases, seed)
}

/// Binary view of a stage prediction: positive means "past stage 0", scored
/// by `1 - P(stage 0)`. For K = 2 this is the probability of stage 1.
pub fn binary_score(probs: &[f64]) -> f64 {
    1.0 - probs[0]
}

/// Scores `classifier` on labelled volumes with [`binary_score`].
pub fn evaluate_classifier(
    classifier: &Classifier,
    state: &crate::nets::NetState,
    volumes: &[&Volume],
    labels: &[ClassLabel],
) -> Result<ClassificationMetrics> {
    let mut scores = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(8) {
        for p in classifier.probabilities_batch(state, chunk)? {
            scores.push(binary_score(p.probs()));
        }
    }
    let positive: Vec<bool> = labels.iter().map(|l| l.index() > 0).collect();
    classification_metrics(&scores, &positive)
}

/// Labelled volumes borrowed from a dataset split.
#[derive(Debug, Clone, Copy)]
pub struct LabelledSet<'a> {
    pub volumes: &'a [&'a Volume],
    pub labels: &'a [ClassLabel],
}

/// Baseline and augmented arms of [`augmentation_experiment`]; each report
/// carries only its classification block.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationOutcome {
    pub synthesized_per_class: usize,
    pub baseline: MetricReport,
    pub augmented: MetricReport,
}

impl AugmentationOutcome {
    fn arm(report: &MetricReport) -> ClassificationMetrics {
        report.classification.expect("augmentation arms always carry classification metrics")
    }

    pub fn baseline_metrics(&self) -> ClassificationMetrics {
        Self::arm(&self.baseline)
    }

    pub fn augmented_metrics(&self) -> ClassificationMetrics {
        Self::arm(&self.augmented)
    }

    /// Augmented minus baseline accuracy.
    pub fn accuracy_gain(&self) -> f64 {
        self.augmented_metrics().accuracy - self.baseline_metrics().accuracy
    }

    pub fn csv(&self) -> String {
        format!(
            "{CLASSIFICATION_CSV_HEADER}\n{}\n{}\n",
            classification_csv_row("baseline", &self.baseline_metrics()),
            classification_csv_row("augmented", &self.augmented_metrics())
        )
    }
}

/// Synthesizes `per_class` volumes of every class from training volumes of
/// other classes. Sources are drawn without replacement from a seeded
/// shuffle, cycling when a class has fewer sources than requested.
pub fn synthesize_per_class(
    generator: &Generator,
    params: &Params,
    train: LabelledSet<'_>,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<Volume>, Vec<ClassLabel>)> {
    let k = generator.spec().k;
    let mut volumes = Vec::with_capacity(per_class * k);
    let mut labels = Vec::with_capacity(per_class * k);
    if per_class == 0 {
        return Ok((volumes, labels));
    }
    for c in 0..k {
        let target = ClassLabel::new(c, k)?;
        let mut pool: Vec<usize> = (0..train.labels.len()).filter(|&i| train.labels[i].index() != c).collect();
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!("no training volumes outside class {c} to synthesize from")));
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64])));
        for i in 0..per_class {
            let source = train.volumes[pool[i % pool.len()]];
            volumes.push(generator.synthesize(params, source, target)?.volume);
            labels.push(target);
        }
    }
    Ok((volumes, labels))
}

/// Trains the classifier once on `train` and once on `train` plus
/// `per_class` synthesized volumes per class, with the same schedule and
/// seed, and scores both on `test`.
pub fn augmentation_experiment(
    generator: &Generator,
    params: &Params,
    train: LabelledSet<'_>,
    per_class: usize,
    classifier: &Classifier,
    schedule: &ClassifierTraining,
    test: LabelledSet<'_>,
) -> Result<AugmentationOutcome> {
    let arm = |volumes: &[&Volume], labels: &[ClassLabel]| -> Result<MetricReport> {
        let state = train_classifier(classifier, volumes, labels, schedule)?;
        let mut report = MetricReport::new(DEFAULT_PEAK);
        report.classification = Some(evaluate_classifier(classifier, &state, test.volumes, test.labels)?);
        Ok(report)
    };
    let baseline = arm(train.volumes, train.labels)?;
    let (synth, synth_labels) = synthesize_per_class(generator, params, train, per_class, schedule.seed)?;
    let volumes: Vec<&Volume> = train.volumes.iter().copied().chain(&synth).collect();
    let labels: Vec<ClassLabel> = train.labels.iter().copied().chain(synth_labels).collect();
    let augmented = arm(&volumes, &labels)?;
    Ok(AugmentationOutcome {
        synthesized_per_class: per_class,
        baseline,
        augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(shape: [usize; 3], v: Vec<f64>) -> Grid3 {
        Grid3::new(shape, v).unwrap()
    }

    /// Direct pairwise count, independent of the rank formula.
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    n += 1.0;
                    s += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn ncc_examples() {
        let a = grid([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = grid([1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]);
        assert!((ncc(&a, &b).unwrap() - 0.9827).abs() < 5e-5);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &a.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        let c = grid([1, 2, 2], vec![3.0; 4]);
        assert!(matches!(ncc(&a, &c), Err(Error::ConstantInput)));
    }

    #[test]
    fn psnr_examples() {
        let a = grid([2, 2, 2], vec![0.1; 8]);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
        let b = grid([2, 2, 2], vec![0.3; 8]);
        assert!((psnr(&a, &b, 2.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let shape = [8, 8, 8];
        let a = Grid3::from_fn(shape, |d, h, w| ((d * 7 + h * 3 + w) % 11) as f64 / 5.5 - 1.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (m, _) = mean_std(a.data());
        let centered = Grid3::from_fn(shape, |d, h, w| a.get(d, h, w) - m);
        assert!(ssim(&centered, &centered.scaled(-1.0)).unwrap() < 0.0);
        assert_eq!(ssim_window(shape).unwrap(), 7);
        assert_eq!(ssim_window([6, 9, 9]).unwrap(), 5);
        assert!(matches!(ssim_window([2, 9, 9]), Err(Error::VolumeTooSmall(..))));
    }

    #[test]
    fn ssim_matches_brute_force_windows() {
        let shape = [5, 6, 7];
        let a = Grid3::from_fn(shape, |d, h, w| ((d * 13 + h * 5 + w * 3) % 17) as f64 / 8.5 - 1.0);
        let b = Grid3::from_fn(shape, |d, h, w| ((d * 3 + h * 11 + w * 7) % 19) as f64 / 9.5 - 1.0);
        let w = 5;
        let mut total = 0.0;
        let mut count = 0.0;
        for d0 in 0..=shape[0] - w {
            for h0 in 0..=shape[1] - w {
                for w0 in 0..=shape[2] - w {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for d in d0..d0 + w {
                        for h in h0..h0 + w {
                            for x in w0..w0 + w {
                                xs.push(a.get(d, h, x));
                                ys.push(b.get(d, h, x));
                            }
                        }
                    }
                    let (mx, sx) = mean_std(&xs);
                    let (my, sy) = mean_std(&ys);
                    let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.len() as f64;
                    let (c1, c2) = (0.0004, 0.0036);
                    total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (sx * sx + sy * sy + c2));
                    count += 1.0;
                }
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count).abs() < 1e-10);
    }

    #[test]
    fn classification_example() {
        let m = classification_metrics(&[0.9, 0.8, 0.4, 0.3], &[true, true, false, true]).unwrap();
        assert!((m.auc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.sensitivity - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.specificity, 1.0);
        let flat = classification_metrics(&[0.3; 4], &[true, false, true, false]).unwrap();
        assert_eq!(flat.auc, 0.5);
        let sep = classification_metrics(&[0.1, 0.2, 0.7, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(sep.auc, 1.0);
        assert!(matches!(classification_metrics(&[0.2], &[true]), Err(Error::SingleClass)));
    }

    #[test]
    fn box_stats() {
        let s = BoxStats::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]).unwrap(), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn report_csv_has_headers() {
        let mut r = MetricReport::new(2.0);
        let a = grid([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = grid([1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]);
        r.push_map(&a, &b).unwrap();
        assert!(r.samples_csv().starts_with(SAMPLE_CSV_HEADER));
        let summary = r.summary_csv().unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    fn micro_augmentation(per_class: usize) -> (AugmentationOutcome, usize) {
        use crate::nets::{ClassifierSpec, GeneratorSpec};
        use crate::phantom::{generate_dataset, LesionSite, PhantomSpec};
        use rand::SeedableRng;
        let spec = PhantomSpec {
            shape: [8, 8, 8],
            lesion_sites: vec![LesionSite {
                center: [4.0, 4.0, 4.0],
                radius: 1.5,
                deltas: vec![-0.1, -0.5],
            }],
            subject_count: 6,
            site_jitter: 1,
            ..PhantomSpec::desk_default()
        };
        let samples = generate_dataset(&spec).unwrap();
        let (train, test) = samples.split_at(8);
        let tv: Vec<&Volume> = train.iter().map(|s| &s.volume).collect();
        let tl: Vec<ClassLabel> = train.iter().map(|s| s.label).collect();
        let ev: Vec<&Volume> = test.iter().map(|s| &s.volume).collect();
        let el: Vec<ClassLabel> = test.iter().map(|s| s.label).collect();
        let generator = Generator::new(GeneratorSpec { base_channels: 2, n_res_blocks: 1, k: 2, ..Default::default() }).unwrap();
        let params = generator.init(&mut ChaCha8Rng::seed_from_u64(3));
        let classifier = Classifier::new(ClassifierSpec { growth_rate: 2, ..ClassifierSpec::desk_scale(2) }).unwrap();
        let schedule = ClassifierTraining { steps: 3, batch_size: 2, ..Default::default() };
        let set = |volumes, labels| LabelledSet { volumes, labels };
        let outcome = augmentation_experiment(&generator, &params, set(&tv, &tl), per_class, &classifier, &schedule, set(&ev, &el)).unwrap();
        let (synth, labels) = synthesize_per_class(&generator, &params, set(&tv, &tl), per_class, 0).unwrap();
        assert_eq!(labels.iter().filter(|l| l.index() == 1).count(), per_class);
        (outcome, synth.len())
    }

    #[test]
    fn augmentation_without_synthesis_reproduces_baseline() {
        let (outcome, n) = micro_augmentation(0);
        assert_eq!(n, 0);
        assert_eq!(outcome.baseline, outcome.augmented);
        assert_eq!(outcome.accuracy_gain(), 0.0);
        assert_eq!(outcome.csv().lines().count(), 3);
    }

    #[test]
    fn augmentation_is_reproducible() {
        let (a, n) = micro_augmentation(3);
        assert_eq!(n, 6);
        assert_eq!(a, micro_augmentation(3).0);
    }

    proptest! {
        #[test]
        fn auc_rank_statistic_equals_pair_count(
            scores in proptest::collection::vec(0u8..10, 2..30),
            flips in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 10.0).collect();
            let mut labels: Vec<bool> = flips[..s.len()].to_vec();
            labels[0] = true;
            labels[1] = false;
            let m = classification_metrics(&s, &labels).unwrap();
            prop_assert!((m.auc - auc_pairs(&s, &labels)).abs() < 1e-12);
        }

        #[test]
        fn ncc_is_symmetric(v in proptest::collection::vec(-1.0f64..1.0, 16), u in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let a = grid([2, 2, 4], v);
            let b = grid([2, 2, 4], u);
            prop_assert_eq!(ncc(&a, &b).unwrap(), ncc(&b, &a).unwrap());
        }
    }
}
