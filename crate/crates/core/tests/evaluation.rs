use chickface::backbones::Backbone;
use chickface::classifier::{ClassifierConfig, ClassifierSample, FineTune};
use chickface::dataset::{assign_folds, ChickRecord, CropKind, Gender};
use chickface::evaluation::*;
use chickface::parallel::Execution;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn gender(b: bool) -> Gender {
    if b {
        Gender::Male
    } else {
        Gender::Female
    }
}

/// Pairwise definition: P(male > female) + 0.5 P(tie).
fn auc_oracle(scores: &[f64], labels: &[Gender]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Gender::Male && *lj == Gender::Female {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_recount(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..60)) {
        let preds: Vec<Gender> = pairs.iter().map(|p| gender(p.0)).collect();
        let labels: Vec<Gender> = pairs.iter().map(|p| gender(p.1)).collect();
        let cm = confusion(&preds, &labels).unwrap();
        let count = |p: bool, l: bool| pairs.iter().filter(|x| **x == (p, l)).count() as u64;
        let (tp, tn, fp, fn_) = (count(true, true), count(false, false), count(true, false), count(false, true));
        prop_assert_eq!(cm, ConfusionMatrix { tn, fp, fn_, tp });
        let m = metrics(&cm);
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        prop_assert!((m.accuracy - div(tp + tn, tp + tn + fp + fn_)).abs() <= 1e-12);
        prop_assert!((m.precision - div(tp, tp + fp)).abs() <= 1e-12);
        prop_assert!((m.recall - div(tp, tp + fn_)).abs() <= 1e-12);
        prop_assert!((m.f1 - div(2.0 * tp, 2.0 * tp + fp + fn_)).abs() <= 1e-12);
        prop_assert_eq!(m.degenerate, tp + fp == 0.0 || tp + fn_ == 0.0 || pairs.is_empty());
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..80)
    ) {
        // coarse scores force many ties
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
        let labels: Vec<Gender> = data.iter().map(|d| gender(d.1)).collect();
        let both = labels.contains(&Gender::Male) && labels.contains(&Gender::Female);
        match auc(&scores, &labels) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((a - auc_oracle(&scores, &labels)).abs() <= 1e-9);
            }
            Err(_) => prop_assert!(!both),
        }
    }
}

fn sample(id: &str, g: Gender, view: usize) -> ClassifierSample {
    let shade = 60 + (view as u8) * 10;
    let mut image = RgbImage::from_pixel(32, 32, Rgb([shade, shade, shade]));
    if g == Gender::Male {
        for y in 0..10 {
            for x in 0..32 {
                image.put_pixel(x, y, Rgb([230, 20, 20]));
            }
        }
    }
    ClassifierSample { chick_id: id.into(), image_id: format!("{id}_{view}"), gender: g, image }
}

fn cfg() -> ClassifierConfig {
    ClassifierConfig {
        backbone: Backbone::TinyTest,
        head_dims: [16, 8, 1],
        lr: 1e-2,
        epochs: 3,
        batch_size: 4,
        fine_tune: FineTune::HeadOnly,
        ..Default::default()
    }
}

#[test]
fn two_chicks_two_folds_keep_chicks_whole() {
    let chicks = vec![
        ChickRecord { chick_id: "a".into(), gender: Gender::Female },
        ChickRecord { chick_id: "b".into(), gender: Gender::Male },
    ];
    // both genders need a member in every fold, so use two of each
    let mut all = chicks.clone();
    all.push(ChickRecord { chick_id: "c".into(), gender: Gender::Female });
    all.push(ChickRecord { chick_id: "d".into(), gender: Gender::Male });
    let plan = assign_folds(&all, 2, 3).unwrap();
    let samples: Vec<ClassifierSample> = all.iter().flat_map(|c| (0..3).map(move |v| sample(&c.chick_id, c.gender, v))).collect();
    let res = run_cross_validation(&samples, &plan, &cfg(), CropKind::Full, Execution::Sequential).unwrap();
    assert_eq!(res.report.per_fold.len(), 2);
    for (fold, cm) in res.confusions.iter().enumerate() {
        // each validation fold holds one female and one male chick, three views each
        assert_eq!(cm.total(), 6, "fold {fold}");
        assert_eq!(cm.tn + cm.fp, 3);
    }
    let again = run_cross_validation(&samples, &plan, &cfg(), CropKind::Full, Execution::Parallel).unwrap();
    assert_eq!(res, again);
    for i in 0..5 {
        let mean: f64 = res.report.per_fold.iter().map(|f| [f.scores.accuracy, f.scores.precision, f.scores.recall, f.scores.f1, f.scores.auc][i]).sum::<f64>() / 2.0;
        let avg = [res.report.averages.accuracy, res.report.averages.precision, res.report.averages.recall, res.report.averages.f1, res.report.averages.auc][i];
        assert!((mean - avg).abs() <= 1e-12);
    }
    for row in res.averaged_cm {
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-9);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cv.json");
    res.save_json(&path).unwrap();
    assert_eq!(CVResult::load_json(&path).unwrap(), res);
}

#[test]
fn unknown_chick_is_a_planning_error() {
    let all: Vec<ChickRecord> = ["a", "b", "c", "d"]
        .iter()
        .enumerate()
        .map(|(i, id)| ChickRecord { chick_id: id.to_string(), gender: gender(i % 2 == 1) })
        .collect();
    let plan = assign_folds(&all, 2, 0).unwrap();
    let samples = vec![sample("zz", Gender::Male, 0)];
    assert!(matches!(
        run_cross_validation(&samples, &plan, &cfg(), CropKind::Full, Execution::Sequential),
        Err(chickface::Error::Planning(_))
    ));
}

fn fake_result(backbone: Backbone, crop: CropKind, accs: &[f64]) -> CVResult {
    let per_fold: Vec<FoldMetrics> = accs
        .iter()
        .enumerate()
        .map(|(fold, &a)| FoldMetrics {
            fold,
            best_epoch: 1,
            scores: Scores { accuracy: a, precision: a / 3.0, recall: 0.1 + a / 7.0, f1: a * 0.9, auc: 0.123456789, macro_precision: 0.5, macro_recall: 0.5, macro_f1: 0.5 },
            degenerate: false,
        })
        .collect();
    let averages = Scores::mean(&per_fold.iter().map(|f| f.scores).collect::<Vec<_>>());
    let chicks: Vec<ChickRecord> = (0..4).map(|i| ChickRecord { chick_id: format!("c{i}"), gender: gender(i % 2 == 0) }).collect();
    CVResult {
        config: ClassifierConfig { backbone, ..Default::default() },
        crop,
        fold_plan: assign_folds(&chicks, 2, 0).unwrap(),
        report: MetricsReport { per_fold, averages },
        confusions: vec![],
        averaged_cm: [[1.0, 0.0], [0.0, 1.0]],
        histories: vec![],
    }
}

#[test]
fn report_layout_sorting_and_csv_precision() {
    let one = render_report(&[fake_result(Backbone::Alexnet, CropKind::Full, &[0.7, 0.8])]);
    assert_eq!(one.averaged_csv.lines().count(), 2);
    assert!(one.text.contains("AlexNet"));

    let results = vec![
        fake_result(Backbone::Alexnet, CropKind::Full, &[0.7, 0.8]),
        fake_result(Backbone::Resnet50, CropKind::Full, &[0.81, 0.8298]),
        fake_result(Backbone::Resnet50, CropKind::Middle, &[0.6, 0.61]),
        fake_result(Backbone::Alexnet, CropKind::Middle, &[0.5, 0.52]),
    ];
    let docs = render_report(&results);
    let avg = docs.text.split("Average performance (%)").nth(1).unwrap();
    assert!(avg.find("ResNet-50").unwrap() < avg.find("AlexNet").unwrap());
    assert!(docs.text.contains("Cropped Full Face | Cropped Middle Face"));
    assert!(avg.contains("81.99"));

    let mut rdr = csv::Reader::from_reader(docs.per_fold_csv.as_bytes());
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let bb: Backbone = rec[0].parse().unwrap();
        let crop = if &rec[1] == "full" { CropKind::Full } else { CropKind::Middle };
        let fold: usize = rec[2].parse().unwrap();
        let src = results.iter().find(|r| r.config.backbone == bb && r.crop == crop).unwrap();
        let s = &src.report.per_fold[fold].scores;
        let parsed: Vec<f64> = (4..12).map(|i| rec[i].parse().unwrap()).collect();
        assert_eq!(parsed, vec![s.accuracy, s.precision, s.recall, s.f1, s.auc, s.macro_precision, s.macro_recall, s.macro_f1]);
        n += 1;
    }
    assert_eq!(n, 8);
    let accs: Vec<f64> = docs.averaged_csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] >= w[1]));
}
