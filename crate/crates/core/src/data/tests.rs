use super::*;
use crate::encoders::Vocabulary;

fn small_spec() -> CorpusSpec {
    CorpusSpec {
        train_count: 48,
        target_count: 30,
        caption_count: 12,
        ..CorpusSpec::default()
    }
}

fn render(domain: &Domain, shape: Shape, seed: u64) -> RenderedObject {
    let mut rng = RngHandle::new(seed);
    render_object(&sample_object(domain, shape, 64, &mut rng), 64)
}

fn bbox_span(sil: &[bool], size: usize) -> usize {
    let (mut x0, mut x1, mut y0, mut y1) = (size, 0, size, 0);
    for (i, _) in sil.iter().enumerate().filter(|(_, s)| **s) {
        let (x, y) = (i % size, i / size);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    (x1 - x0 + 1).max(y1 - y0 + 1)
}

#[test]
fn object_render_is_deterministic_and_sized() {
    for domain in [Domain::train(), Domain::target()] {
        for (k, shape) in Shape::ALL.into_iter().enumerate() {
            for seed in 0..10 {
                let a = render(&domain, shape, seed * 7 + k as u64);
                let b = render(&domain, shape, seed * 7 + k as u64);
                assert_eq!(a, b);
                assert!(a.silhouette.iter().any(|s| *s));
                let span = bbox_span(&a.silhouette, 64) as f64 / 64.0;
                assert!((0.3..=0.8).contains(&span), "{shape} span {span}");
            }
        }
    }
}

#[test]
fn palettes_have_disjoint_histograms() {
    let mut hists = Vec::new();
    for domain in [Domain::train(), Domain::target()] {
        let mut acc = vec![0.0; 64];
        for i in 0..100u64 {
            let obj = render(&domain, Shape::ALL[i as usize % 6], 500 + i);
            for (a, h) in acc.iter_mut().zip(color_histogram(&obj.image, 4)) {
                *a += h / 100.0;
            }
        }
        hists.push(acc);
    }
    let inter = histogram_intersection(&hists[0], &hists[1]);
    assert!(inter < 0.1, "histogram intersection {inter}");
}

#[test]
fn defects_stay_near_the_object() {
    let domain = Domain::train();
    for (k, kind) in DefectKind::ALL.into_iter().enumerate() {
        for seed in 0..12u64 {
            let obj = render(&domain, Shape::ALL[(seed as usize + k) % 6], 40 * seed + k as u64);
            let mut rng = RngHandle::new(seed);
            let (img, set) = render_defect(&obj, &obj.image, kind, &mut rng).unwrap();
            let near = dilate(&obj.silhouette, 64, 2);
            for i in 0..64 * 64 {
                if set[i] {
                    assert!(near[i], "{kind} pixel {i} outside the dilated silhouette");
                }
                let differs = img.data()[3 * i..3 * i + 3] != obj.image.data()[3 * i..3 * i + 3];
                assert_eq!(differs, set[i]);
            }
            assert!(set.iter().filter(|s| **s).count() >= render::min_defect_pixels(64));
        }
    }
}

#[test]
fn unknown_defect_has_no_renderer() {
    assert!("smudge".parse::<DefectKind>().is_err());
    assert_eq!("crack".parse::<DefectKind>().unwrap(), DefectKind::Crack);
}

#[test]
fn missing_region_looks_like_background() {
    let domain = Domain::train();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let obj = render(&domain, Shape::ALL[seed as usize % 6], 900 + seed);
        let mut rng = RngHandle::new(seed);
        let (img, set) = render_defect(&obj, &obj.image, DefectKind::Missing, &mut rng).unwrap();
        for i in 0..64 * 64 {
            let v = img.data()[3 * i..3 * i + 3].iter().sum::<f64>() / 3.0;
            if set[i] {
                inside.push(v);
            } else if !dilate(&obj.silhouette, 64, 2)[i] {
                outside.push(v);
            }
        }
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    let (mi, vi) = stats(&inside);
    let (mo, vo) = stats(&outside);
    assert!((mi - mo).abs() < 0.02, "means {mi} vs {mo}");
    assert!((vi.sqrt() - vo.sqrt()).abs() < 0.02, "stds {} vs {}", vi.sqrt(), vo.sqrt());
}

#[test]
fn corpus_counts_and_invariants() {
    let spec = small_spec();
    let c = generate_corpus(&spec).unwrap();
    for split in [&c.train, &c.target] {
        let n = split.samples.len();
        let anomalous = split.samples.iter().filter(|s| s.label == 1).count() as f64;
        assert!((anomalous - n as f64 * spec.anomaly_ratio).abs() <= 1.0);
        for s in &split.samples {
            s.validate(split.channels()).unwrap();
            let oh = s.one_hot(split.channels()).unwrap();
            for p in 0..s.mask.len() {
                let sum: f64 = (0..split.channels()).map(|ch| oh.data()[ch * s.mask.len() + p]).sum();
                assert_eq!(sum, 1.0);
            }
            if s.label == 0 {
                assert!(s.mask.iter().all(|&m| m == 0));
            }
        }
    }
    assert_eq!(c.train.defects, vec!["scratch", "hole", "stain", "missing"]);
    assert_eq!(c.target.defects, vec!["scratch", "hole", "stain", "missing", "crack", "bent"]);
    for s in &c.train.samples {
        assert!(s.defects.iter().all(|d| d != "crack" && d != "bent"));
    }
    let unseen: usize = c
        .target
        .samples
        .iter()
        .filter(|s| s.defects.iter().any(|d| d == "crack" || d == "bent"))
        .count();
    assert!(unseen > 0);
}

#[test]
fn defect_prevalence_is_learnable() {
    let c = generate_corpus(&small_spec()).unwrap();
    for split in [&c.train, &c.target] {
        for s in split.samples.iter().filter(|s| s.label == 1) {
            for (k, name) in split.defects.iter().enumerate() {
                if name == "missing" || !s.defects.contains(name) {
                    continue;
                }
                let count = s.mask.iter().filter(|&&m| m as usize == k + 1).count();
                assert!(count as f64 >= 0.005 * s.mask.len() as f64, "{} {name}: {count} pixels", s.name);
            }
        }
    }
}

#[test]
fn corpus_is_a_pure_function_of_the_spec() {
    let spec = CorpusSpec {
        train_count: 8,
        target_count: 6,
        caption_count: 4,
        ..CorpusSpec::default()
    };
    assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    let other = CorpusSpec { seed: 1, ..spec.clone() };
    assert_ne!(generate_corpus(&spec).unwrap().train, generate_corpus(&other).unwrap().train);
}

#[test]
fn spec_validation() {
    let mut s = CorpusSpec::default();
    s.unseen_defects.push(DefectKind::Hole);
    assert!(s.validate().is_err());
    let mut s = CorpusSpec::default();
    s.target_domain.palette[0].name = "red".into();
    assert!(s.validate().is_err());
}

#[test]
fn anomalous_index_rule() {
    let n = 37;
    for r in [0.0, 0.25, 0.5, 1.0 / 3.0, 1.0] {
        let count = (0..n).filter(|&i| is_anomalous_index(i, r)).count();
        assert!((count as f64 - n as f64 * r).abs() <= 1.0);
    }
}

#[test]
fn shift_witness_separates_splits() {
    let c = generate_corpus(&small_spec()).unwrap();
    let a: Vec<&Image> = c.train.samples.iter().map(|s| &s.image).collect();
    let b: Vec<&Image> = c.target.samples.iter().map(|s| &s.image).collect();
    assert!(shift_witness(&a, &b).unwrap() > 0.9);
}

#[test]
fn captions_round_trip_through_the_vocabulary() {
    let vocab = Vocabulary::builtin();
    let c = generate_corpus(&CorpusSpec {
        caption_count: 200,
        train_count: 0,
        target_count: 0,
        ..CorpusSpec::default()
    })
    .unwrap();
    for cap in &c.captions {
        let ids = vocab.tokenize(&cap.caption).unwrap();
        assert_eq!(vocab.detokenize(&ids), cap.caption);
    }
    for domain in [Domain::train(), Domain::target()] {
        for sw in &domain.palette {
            for shape in Shape::ALL {
                for d in DefectKind::ALL.iter().map(|d| Some(d.name())).chain([None]) {
                    let text = caption_for(&sw.name, shape.name(), d);
                    assert_eq!(vocab.detokenize(&vocab.tokenize(&text).unwrap()), text);
                }
            }
        }
    }
}

#[test]
fn sample_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&CorpusSpec {
        train_count: 6,
        target_count: 4,
        caption_count: 3,
        ..CorpusSpec::default()
    })
    .unwrap();
    save_corpus(&c, dir.path()).unwrap();
    let back = io::load_corpus(dir.path()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.target.samples.len(), 4);
    let names: Vec<&str> = back.train.samples.iter().map(|s| s.name.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn label_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&CorpusSpec {
        train_count: 2,
        target_count: 0,
        caption_count: 0,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mut bad = c.train.samples[1].clone();
    assert_eq!(bad.label, 1);
    bad.mask.fill(0);
    save_sample(&bad, dir.path(), 5).unwrap();
    let file = list_split_images(dir.path()).unwrap().remove(0);
    let err = load_sample(dir.path(), &file, 5).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err:?}");
}

#[test]
fn missing_file_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_split(&dir.path().join("nowhere")).unwrap_err();
    assert!(err.to_string().contains("nowhere"), "{err}");
}

#[test]
fn every_object_gets_both_labels() {
    let c = generate_corpus(&small_spec()).unwrap();
    for split in [&c.train, &c.target] {
        for obj in split.objects() {
            let labels: Vec<u8> = split.samples.iter().filter(|s| s.object == obj).map(|s| s.label).collect();
            assert!(labels.contains(&0) && labels.contains(&1), "{} {obj}", split.name);
        }
    }
}
