use super::*;
use crate::rng::RngHandle;

fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
    ScoredSet::from_u8(scores.to_vec(), labels).unwrap()
}

#[test]
fn auroc_closed_forms() {
    assert_eq!(auroc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
    assert_eq!(auroc(&set(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1])).unwrap(), 0.0);
    assert_eq!(auroc(&set(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
    assert!(auroc(&set(&[0.1, 0.2], &[1, 1])).is_err());
    assert!(roc_curve(&set(&[0.1, 0.2], &[0, 0])).is_err());
}

#[test]
fn auroc_invariant_under_monotone_transform() {
    let mut rng = RngHandle::new(3);
    for _ in 0..20 {
        let scores: Vec<f64> = (0..30).map(|_| rng.index(0, 8) as f64 / 7.0).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let a = auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let b = auroc(&ScoredSet::new(t, labels).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn average_precision_closed_forms() {
    assert_eq!(average_precision(&set(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0])).unwrap(), 1.0);
    let n = 7;
    let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
    let mut labels = vec![0u8; n];
    labels[n - 1] = 1;
    assert!((average_precision(&set(&scores, &labels)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    let labels = [1, 0, 0, 1, 0];
    assert!((average_precision(&set(&[0.3; 5], &labels)).unwrap() - 0.4).abs() < 1e-15);
    assert!(average_precision(&set(&[0.3, 0.2], &[0, 0])).is_err());
}

#[test]
fn roc_curve_shape() {
    let s = set(&[0.9, 0.8, 0.8, 0.3, 0.1], &[1, 1, 0, 0, 0]);
    let c = roc_curve(&s).unwrap();
    assert_eq!(c.len(), 5);
    assert_eq!((c[0].fpr, c[0].tpr), (0.0, 0.0));
    assert_eq!((c[4].fpr, c[4].tpr), (1.0, 1.0));
    for w in c.windows(2) {
        assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
    }
    let perfect = roc_curve(&set(&[0.9, 0.8, 0.2], &[1, 1, 0])).unwrap();
    assert!(perfect.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
    let area = trapezoid(c.iter().map(|p| (p.fpr, p.tpr)));
    assert!((area - auroc(&s).unwrap()).abs() < 1e-12);
}

#[test]
fn confusion_edges() {
    let s = set(&[0.2, 0.7, 0.5, 0.1], &[0, 1, 1, 0]);
    let c = confusion_at(&s, 0.0);
    assert_eq!((c.true_neg, c.false_neg), (0, 0));
    let c = confusion_at(&s, 0.71);
    assert_eq!((c.true_pos, c.false_pos), (0, 0));
    let c = confusion_at(&s, 0.5);
    assert_eq!(c, Confusion { true_pos: 2, false_pos: 0, true_neg: 2, false_neg: 0 });
    assert_eq!(c.total(), 4);
    assert_eq!(c.f1(), 1.0);
}

#[test]
fn f1_closed_forms() {
    assert_eq!(f1_macro(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
    assert_eq!(f1_macro(&[0, 0, 0], &[0, 0, 0], 2).unwrap(), 0.5);
    assert!(f1_macro(&[0, 3], &[0, 1], 2).is_err());
    assert!(f1_macro(&[0], &[0, 1], 2).is_err());
}

#[test]
fn regions_use_eight_connectivity() {
    #[rustfmt::skip]
    let mask = [
        true,  false, false, true,
        false, true,  false, true,
        false, false, false, false,
        true,  true,  false, true,
    ];
    let (labels, count) = label_regions(&mask, 4).unwrap();
    assert_eq!(count, 4);
    assert_eq!(labels[0], labels[5]);
    assert_eq!(labels[3], labels[7]);
    assert_ne!(labels[0], labels[3]);
    assert_eq!(labels[12], labels[13]);
    assert_ne!(labels[13], labels[15]);
    assert!(label_regions(&mask, 3).is_err());
}

#[test]
fn aupro_perfect_and_constant() {
    let mut mask = vec![false; 64];
    for i in [9, 10, 17, 18, 45, 46, 47] {
        mask[i] = true;
    }
    let perfect: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
    let a = aupro(&[&perfect], &[&mask], 8, DEFAULT_FPR_LIMIT).unwrap();
    assert!((a - 1.0).abs() < 1e-6);
    let constant = vec![0.4; 64];
    let a = aupro(&[&constant], &[&mask], 8, DEFAULT_FPR_LIMIT).unwrap();
    assert!((a - DEFAULT_FPR_LIMIT / 2.0).abs() < 1e-12, "{a}");
    let a = aupro(&[&constant], &[&mask], 8, 1.0).unwrap();
    assert!((a - 0.5).abs() < 1e-12);
    let empty = vec![false; 64];
    assert!(aupro(&[&constant], &[&empty], 8, 0.3).is_err());
    assert!(aupro(&[&constant], &[&mask], 8, 0.0).is_err());
}

#[test]
fn aupro_drops_when_region_scores_are_shuffled() {
    let mut rng = RngHandle::new(11);
    let mut drops = 0.0;
    for _ in 0..10 {
        let mut mask = vec![false; 100];
        let (x0, y0) = (rng.index(0, 6), rng.index(0, 6));
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                mask[y * 10 + x] = true;
            }
        }
        let map: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 0.6 + 0.4 * rng.uniform() } else { 0.7 * rng.uniform() })
            .collect();
        let before = aupro(&[&map], &[&mask], 10, 0.3).unwrap();
        let mut shuffled = map.clone();
        let perm = rng.permutation(100);
        for (i, &j) in perm.iter().enumerate() {
            shuffled[i] = map[j];
        }
        let after = aupro(&[&shuffled], &[&mask], 10, 0.3).unwrap();
        drops += before - after;
    }
    assert!(drops > 0.0);
}

#[test]
fn report_round_trips_and_validates() {
    let objects = vec![
        ObjectMetrics {
            object: "disc".into(),
            image_auroc: Some(0.8),
            image_ap: Some(0.7),
            image_f1: Some(0.6),
            pixel_auroc: Some(0.9),
            aupro: Some(0.5),
        },
        ObjectMetrics {
            object: "ring".into(),
            image_auroc: Some(0.6),
            ..Default::default()
        },
    ];
    let report = MetricsReport::new("binary_ad", 0.3, objects).with_classes(vec![
        ClassMetrics { class: "normal".into(), auroc: Some(0.9), ap: Some(0.9), f1: 0.8, support: 10 },
        ClassMetrics { class: "crack".into(), auroc: None, ap: None, f1: 0.0, support: 0 },
    ]);
    assert!((report.mean.image_auroc.unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(report.mean.aupro, Some(0.5));
    assert_eq!(report.macro_f1, Some(0.4));
    report.validate().unwrap();
    let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + report.rows().len());
    assert!(csv.contains("class:crack,f1,0"));
    let mut bad = report.clone();
    bad.objects[0].aupro = Some(1.5);
    bad.mean = ObjectMetrics::mean("mean", &bad.objects);
    assert!(bad.validate().is_err());
}
