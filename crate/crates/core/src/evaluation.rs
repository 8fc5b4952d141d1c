//! Confusion counts, accuracy/precision/recall/F1, rank AUC, grouped k-fold
//! cross-validation and report tables. Male is the positive class.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::classifier::{sigmoid, train_classifier_with, ClassifierConfig, ClassifierSample, EpochRecord};
use crate::dataset::{CropKind, FoldPlan, Gender};
use crate::parallel::Execution;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

pub fn confusion(preds: &[Gender], labels: &[Gender]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: preds.len() });
    }
    let mut cm = ConfusionMatrix::default();
    for (p, l) in preds.iter().zip(labels) {
        match (l, p) {
            (Gender::Female, Gender::Female) => cm.tn += 1,
            (Gender::Female, Gender::Male) => cm.fp += 1,
            (Gender::Male, Gender::Female) => cm.fn_ += 1,
            (Gender::Male, Gender::Male) => cm.tp += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when some denominator was zero and the value was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let mut degenerate = false;
    let (tp, tn, fp, fn_) = (cm.tp, cm.tn, cm.fp, cm.fn_);
    let accuracy = ratio(tp + tn, cm.total() as f64, &mut degenerate);
    let precision = ratio(tp, (tp + fp) as f64, &mut degenerate);
    let recall = ratio(tp, (tp + fn_) as f64, &mut degenerate);
    let f1 = ratio(tp, tp as f64 + 0.5 * (fp + fn_) as f64, &mut degenerate);
    Metrics { accuracy, precision, recall, f1, degenerate }
}

/// Precision, recall and F1 averaged over both classes taken as positive.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Metrics {
    let male = metrics(cm);
    let female = metrics(&ConfusionMatrix { tn: cm.tp, fp: cm.fn_, fn_: cm.fp, tp: cm.tn });
    Metrics {
        accuracy: male.accuracy,
        precision: 0.5 * (male.precision + female.precision),
        recall: 0.5 * (male.recall + female.recall),
        f1: 0.5 * (male.f1 + female.f1),
        degenerate: male.degenerate || female.degenerate,
    }
}

/// Probability that a random male outscores a random female, ties counting
/// one half (Mann-Whitney U with mid-ranks).
pub fn auc(scores: &[f64], labels: &[Gender]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("AUC scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&g| g == Gender::Male).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!("{n_pos} male and {n_neg} female samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == Gender::Male).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Row-normalizes each matrix (rows: actual female, actual male; columns:
/// predicted female, predicted male) and takes the element-wise mean.
pub fn average_confusion(cms: &[ConfusionMatrix]) -> Result<[[f64; 2]; 2]> {
    if cms.is_empty() {
        return Err(Error::invalid("no confusion matrices to average"));
    }
    let mut out = [[0.0; 2]; 2];
    for cm in cms {
        let rows = [[cm.tn, cm.fp], [cm.fn_, cm.tp]];
        for (r, row) in rows.iter().enumerate() {
            let total = (row[0] + row[1]) as f64;
            if total == 0.0 {
                return Err(Error::invalid(format!("confusion matrix {cm:?} has an empty row")));
            }
            for c in 0..2 {
                out[r][c] += row[c] as f64 / total;
            }
        }
    }
    let k = cms.len() as f64;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Scores {
    fn fields(&self) -> [f64; 8] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.auc,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ]
    }

    fn from_fields(f: [f64; 8]) -> Self {
        Scores {
            accuracy: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
            auc: f[4],
            macro_precision: f[5],
            macro_recall: f[6],
            macro_f1: f[7],
        }
    }

    pub fn mean(all: &[Scores]) -> Scores {
        let mut acc = [0.0; 8];
        for s in all {
            for (a, v) in acc.iter_mut().zip(s.fields()) {
                *a += v;
            }
        }
        Scores::from_fields(acc.map(|a| a / all.len().max(1) as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub best_epoch: usize,
    #[serde(flatten)]
    pub scores: Scores,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub averages: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub config: ClassifierConfig,
    pub crop: CropKind,
    pub fold_plan: FoldPlan,
    pub report: MetricsReport,
    pub confusions: Vec<ConfusionMatrix>,
    pub averaged_cm: [[f64; 2]; 2],
    pub histories: Vec<Vec<EpochRecord>>,
}

impl CVResult {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Scores of one validation fold from its logits.
pub fn score_fold(logits: &[f64], labels: &[Gender], threshold: f64) -> Result<(ConfusionMatrix, Scores, bool)> {
    let preds: Vec<Gender> = logits.iter().map(|&l| crate::classifier::decide_gender(sigmoid(l), threshold)).collect();
    let cm = confusion(&preds, labels)?;
    let m = metrics(&cm);
    let mm = macro_metrics(&cm);
    let auc = auc(logits, labels)?;
    let scores = Scores {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc,
        macro_precision: mm.precision,
        macro_recall: mm.recall,
        macro_f1: mm.f1,
    };
    Ok((cm, scores, m.degenerate || mm.degenerate))
}

struct FoldOutcome {
    cm: ConfusionMatrix,
    metrics: FoldMetrics,
    history: Vec<EpochRecord>,
}

fn run_fold(samples: &[ClassifierSample], plan: &FoldPlan, cfg: &ClassifierConfig, fold: usize, exec: Execution) -> Result<FoldOutcome> {
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| plan.fold_of(&s.chick_id) == Some(fold));
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.chick_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.chick_id.as_str())) {
        return Err(Error::Protocol(format!("chick `{}` is in both training and validation", s.chick_id)));
    }
    let fold_cfg = ClassifierConfig { seed: cfg.seed.wrapping_add(fold as u64), ..cfg.clone() };
    let out = train_classifier_with(&train, &val, &fold_cfg, exec)?;
    let labels: Vec<Gender> = val.iter().map(|s| s.gender).collect();
    let (cm, scores, degenerate) = score_fold(&out.best.val_logits, &labels, cfg.threshold)?;
    Ok(FoldOutcome {
        cm,
        metrics: FoldMetrics { fold, best_epoch: out.best.epoch, scores, degenerate },
        history: out.history,
    })
}

/// For every fold: train on the others, pick the best-accuracy epoch on this
/// fold, and score this fold with that model. Folds run through `exec`.
pub fn run_cross_validation(
    samples: &[ClassifierSample],
    plan: &FoldPlan,
    cfg: &ClassifierConfig,
    crop: CropKind,
    exec: Execution,
) -> Result<CVResult> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| plan.fold_of(&s.chick_id).is_none()) {
        return Err(Error::Planning(format!("chick `{}` has no fold", s.chick_id)));
    }
    let outcomes = exec.map_range(plan.k, |fold| run_fold(samples, plan, cfg, fold, exec).map_err(|e| e.in_fold(fold)));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let confusions: Vec<ConfusionMatrix> = outcomes.iter().map(|o| o.cm).collect();
    let per_fold: Vec<FoldMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    let averages = Scores::mean(&per_fold.iter().map(|f| f.scores).collect::<Vec<_>>());
    Ok(CVResult {
        config: cfg.clone(),
        crop,
        fold_plan: plan.clone(),
        averaged_cm: average_confusion(&confusions)?,
        report: MetricsReport { per_fold, averages },
        confusions,
        histories: outcomes.into_iter().map(|o| o.history).collect(),
    })
}

/// CSV (full precision) and text (percent, two decimals) renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportDocuments {
    pub per_fold_csv: String,
    pub averaged_csv: String,
    pub text: String,
}

const CSV_SCORES: &str = "accuracy,precision,recall,f1,auc,macro_precision,macro_recall,macro_f1";
const TEXT_METRICS: [&str; 5] = ["Accuracy", "Precision", "Recall", "F1-Score", "AUC"];

fn display_name(b: Backbone) -> &'static str {
    match b {
        Backbone::Alexnet => "AlexNet",
        Backbone::EfficientnetB0 => "EfficientNet-B0",
        Backbone::InceptionV3 => "Inception-V3",
        Backbone::Resnet50 => "ResNet-50",
        Backbone::Resnet101 => "ResNet-101",
        Backbone::Vgg16 => "VGG-16",
        Backbone::TinyTest => "tiny_test",
    }
}

fn crop_title(c: CropKind) -> &'static str {
    match c {
        CropKind::Full => "Cropped Full Face",
        CropKind::Middle => "Cropped Middle Face",
    }
}

fn csv_row(s: &Scores) -> String {
    s.fields().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn five(s: &Scores) -> [f64; 5] {
    [s.accuracy, s.precision, s.recall, s.f1, s.auc]
}

fn text_table(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = vec![0; cols];
    for row in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = format!("{title}\n{}\n", line(header));
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Per-fold and averaged tables, one row per backbone and one column group
/// per crop kind. Rows are ordered by averaged accuracy, highest first, using
/// the first crop kind present (full before middle).
pub fn render_report(results: &[CVResult]) -> ReportDocuments {
    let mut crops: Vec<CropKind> = Vec::new();
    for c in [CropKind::Full, CropKind::Middle] {
        if results.iter().any(|r| r.crop == c) {
            crops.push(c);
        }
    }
    let mut backbones: Vec<Backbone> = Vec::new();
    for r in results {
        if !backbones.contains(&r.config.backbone) {
            backbones.push(r.config.backbone);
        }
    }
    let find = |b: Backbone, c: CropKind| results.iter().find(|r| r.config.backbone == b && r.crop == c);
    let key = |b: Backbone| crops.iter().find_map(|&c| find(b, c)).map_or(f64::NEG_INFINITY, |r| r.report.averages.accuracy);
    backbones.sort_by(|&a, &b| key(b).total_cmp(&key(a)));

    let mut ordered: Vec<&CVResult> = results.iter().collect();
    ordered.sort_by(|a, b| b.report.averages.accuracy.total_cmp(&a.report.averages.accuracy));
    let mut averaged_csv = format!("backbone,crop,{CSV_SCORES}\n");
    let mut per_fold_csv = format!("backbone,crop,fold,best_epoch,{CSV_SCORES}\n");
    for r in &ordered {
        let _ = writeln!(averaged_csv, "{},{},{}", r.config.backbone, r.crop.as_str(), csv_row(&r.report.averages));
        for f in &r.report.per_fold {
            let _ = writeln!(per_fold_csv, "{},{},{},{},{}", r.config.backbone, r.crop.as_str(), f.fold, f.best_epoch, csv_row(&f.scores));
        }
    }

    let groups: String = crops.iter().map(|c| crop_title(*c)).collect::<Vec<_>>().join(" | ");
    let metric_header = |lead: &[&str]| -> Vec<String> {
        let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
        for _ in &crops {
            h.extend(TEXT_METRICS.iter().map(|s| s.to_string()));
        }
        h
    };
    let k = results.iter().map(|r| r.report.per_fold.len()).max().unwrap_or(0);
    let mut fold_rows = Vec::new();
    let mut avg_rows = Vec::new();
    let mut macro_rows = Vec::new();
    for &b in &backbones {
        for fold in 0..k {
            let mut row = vec![if fold == 0 { display_name(b).to_string() } else { String::new() }, fold.to_string()];
            for &c in &crops {
                let f = find(b, c).and_then(|r| r.report.per_fold.get(fold));
                row.extend(match f {
                    Some(f) => five(&f.scores).map(pct).to_vec(),
                    None => vec!["-".to_string(); 5],
                });
            }
            fold_rows.push(row);
        }
        let mut row = vec![display_name(b).to_string()];
        let mut mrow = vec![display_name(b).to_string()];
        for &c in &crops {
            match find(b, c) {
                Some(r) => {
                    let a = &r.report.averages;
                    row.extend(five(a).map(pct));
                    mrow.extend([a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1, a.auc].map(pct));
                }
                None => {
                    row.extend(vec!["-".to_string(); 5]);
                    mrow.extend(vec!["-".to_string(); 5]);
                }
            }
        }
        avg_rows.push(row);
        macro_rows.push(mrow);
    }
    let mut text = text_table(
        &format!("Performance per fold (%) [{groups}]"),
        &metric_header(&["Backbone", "Fold"]),
        &fold_rows,
    );
    text.push('\n');
    text.push_str(&text_table(&format!("Average performance (%) [{groups}]"), &metric_header(&["Backbone"]), &avg_rows));
    text.push('\n');
    text.push_str(&text_table(
        &format!("Average performance, macro-averaged precision/recall/F1 (%) [{groups}]"),
        &metric_header(&["Backbone"]),
        &macro_rows,
    ));
    ReportDocuments { per_fold_csv, averaged_csv, text }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Gender::{Female as F, Male as M};

    #[test]
    fn confusion_counts() {
        let labels = [M, M, M, M, M, F, F, F, F, F];
        assert_eq!(confusion(&labels, &labels).unwrap(), ConfusionMatrix { tn: 5, fp: 0, fn_: 0, tp: 5 });
        let labels = [M, M, M, F, F, F, F, F, F, F];
        let cm = confusion(&[M; 10], &labels).unwrap();
        assert_eq!(cm, ConfusionMatrix { tn: 0, fp: 7, fn_: 0, tp: 3 });
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionMatrix::default());
        assert!(confusion(&[M], &[]).is_err());
    }

    #[test]
    fn metric_values() {
        let m = metrics(&ConfusionMatrix { tn: 5, fp: 0, fn_: 0, tp: 5 });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1, m.degenerate), (1.0, 1.0, 1.0, 1.0, false));
        let m = metrics(&ConfusionMatrix { tn: 4, fp: 1, fn_: 2, tp: 3 });
        assert_eq!(m.accuracy, 0.7);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 3.0 / 4.5).abs() < 1e-15);
        let m = metrics(&ConfusionMatrix { tn: 4, fp: 0, fn_: 2, tp: 0 });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate);
    }

    #[test]
    fn auc_extremes() {
        let labels = [F, F, M, M];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[M, M]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn confusion_averaging() {
        let a = ConfusionMatrix { tn: 1, fp: 1, fn_: 1, tp: 1 };
        let b = ConfusionMatrix { tn: 3, fp: 1, fn_: 1, tp: 3 };
        assert_eq!(average_confusion(&[a, b]).unwrap(), [[0.625, 0.375], [0.375, 0.625]]);
        let p = ConfusionMatrix { tn: 4, fp: 0, fn_: 0, tp: 9 };
        assert_eq!(average_confusion(&[p; 5]).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
        let c = ConfusionMatrix { tn: 3, fp: 1, fn_: 2, tp: 6 };
        let avg = average_confusion(&[c; 5]).unwrap();
        assert!((avg[0][0] - 0.75).abs() < 1e-12 && (avg[1][1] - 0.75).abs() < 1e-12);
        for row in avg {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
    }
}
