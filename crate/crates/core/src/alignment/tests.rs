use super::*;
use crate::rng::RngHandle;

fn focal_oracle(pred: &[f64], target: &[f64], c: usize, gamma: f64, w: Option<&[f64]>) -> f64 {
    let n = pred.len() / c;
    let mut total = 0.0;
    for i in 0..n {
        let mut cls = 0;
        for ch in 0..c {
            if target[ch * n + i] == 1.0 {
                cls = ch;
            }
        }
        let p = pred[cls * n + i].max(1e-12);
        let weight = w.map_or(1.0, |w| w[cls]);
        total += -weight * (1.0 - p).max(0.0).powf(gamma) * p.ln();
    }
    total / n as f64
}

fn dice_oracle(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for i in 0..pred.len() {
        inter += pred[i] * target[i];
        sp += pred[i];
        st += target[i];
    }
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

/// Random softmax maps and one-hot targets, channel-major.
fn random_case(rng: &mut RngHandle, c: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pred = vec![0.0; c * n];
    let mut target = vec![0.0; c * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..c).map(|_| rng.normal(0.0, 2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for ch in 0..c {
            pred[ch * n + i] = logits[ch].exp() / z;
        }
        target[rng.index(0, c) * n + i] = 1.0;
    }
    (pred, target)
}

#[test]
fn focal_matches_scalar_oracle() {
    let mut rng = RngHandle::new(100);
    for case in 0..50 {
        let c = 2 + case % 3;
        let (pred, target) = random_case(&mut rng, c, 16);
        let weights: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        for (gamma, w) in [(2.0, None), (0.0, None), (1.5, Some(&weights[..]))] {
            let g = Graph::new();
            let p = g.constant(Tensor::matrix(c, 16, pred.clone()).unwrap());
            let t = Tensor::matrix(c, 16, target.clone()).unwrap();
            let got = g.item(focal_loss(&g, p, &t, gamma, w).unwrap()).unwrap();
            let want = focal_oracle(&pred, &target, c, gamma, w);
            assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
        }
    }
}

#[test]
fn focal_perfect_prediction_is_zero() {
    let g = Graph::new();
    let t = Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let p = g.constant(t.clone());
    assert_eq!(g.item(focal_loss(&g, p, &t, 2.0, None).unwrap()).unwrap(), 0.0);
}

#[test]
fn focal_gamma_zero_is_cross_entropy() {
    let mut rng = RngHandle::new(4);
    let (pred, target) = random_case(&mut rng, 3, 8);
    let g = Graph::new();
    let p = g.constant(Tensor::matrix(3, 8, pred.clone()).unwrap());
    let t = Tensor::matrix(3, 8, target.clone()).unwrap();
    let got = g.item(focal_loss(&g, p, &t, 0.0, None).unwrap()).unwrap();
    let ce: f64 = (0..8)
        .map(|i| -(0..3).map(|c| target[c * 8 + i] * pred[c * 8 + i].ln()).sum::<f64>())
        .sum::<f64>()
        / 8.0;
    assert!((got - ce).abs() < 1e-12);
}

#[test]
fn focal_clamps_zero_probability() {
    let g = Graph::new();
    let t = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
    let p = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    let v = g.item(focal_loss(&g, p, &t, 2.0, None).unwrap()).unwrap();
    assert!((v - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn dice_matches_scalar_oracle() {
    let mut rng = RngHandle::new(200);
    for _ in 0..50 {
        let pred: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let target: Vec<f64> = (0..16).map(|_| f64::from(rng.bernoulli(0.4))).collect();
        let g = Graph::new();
        let p = g.constant(Tensor::vector(pred.clone()));
        let t = g.constant(Tensor::vector(target.clone()));
        let got = g.item(dice_loss(&g, p, t, 1.0).unwrap()).unwrap();
        assert!((got - dice_oracle(&pred, &target, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn dice_cases() {
    let n = 32 * 32;
    let mask: Vec<f64> = (0..n).map(|i| f64::from((i % 32) < 12)).collect();
    let g = Graph::new();
    let m = g.constant(Tensor::vector(mask.clone()));
    assert!(g.item(dice_loss(&g, m, m, 1.0).unwrap()).unwrap() < 1e-3);

    let inv = g.constant(Tensor::vector(mask.iter().map(|v| 1.0 - v).collect()));
    let disjoint = g.item(dice_loss(&g, m, inv, 0.0).unwrap()).unwrap();
    assert_eq!(disjoint, 1.0);

    let half: Vec<f64> = (0..n).map(|i| f64::from(i < n / 2)).collect();
    let flat = g.constant(Tensor::full(&[n], 0.5));
    let got = g.item(dice_loss(&g, flat, g.constant(Tensor::vector(half)), 1.0).unwrap()).unwrap();
    let nf = n as f64;
    let want = 1.0 - (2.0 * 0.25 * nf + 1.0) / (0.5 * nf + 0.5 * nf + 1.0);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn local_loss_matches_hand_assembly() {
    let mut rng = RngHandle::new(7);
    let (c, n) = (3, 16);
    let (s1, target) = random_case(&mut rng, c, n);
    let (s2, _) = random_case(&mut rng, c, n);
    let g = Graph::new();
    let t = Tensor::matrix(c, n, target.clone()).unwrap();
    let v1 = g.constant(Tensor::matrix(c, n, s1.clone()).unwrap());
    let v2 = g.constant(Tensor::matrix(c, n, s2.clone()).unwrap());
    let cfg = LocalLossConfig::default();
    let got = g.item(local_loss(&g, &[v1, v2], &t, &cfg).unwrap()).unwrap();
    let y0 = &target[..n];
    let y0_inv: Vec<f64> = y0.iter().map(|v| 1.0 - v).collect();
    let stage = |s: &[f64]| {
        let s0_inv: Vec<f64> = s[..n].iter().map(|v| 1.0 - v).collect();
        focal_oracle(s, &target, c, 2.0, None) + dice_oracle(&s[..n], y0, 1.0) + dice_oracle(&s0_inv, &y0_inv, 1.0)
    };
    let want = (stage(&s1) + stage(&s2)) / 2.0;
    assert!((got - want).abs() < 1e-12);

    let dup = g.item(local_loss(&g, &[v1, v1, v1], &t, &cfg).unwrap()).unwrap();
    let single = g.item(local_loss(&g, &[v1], &t, &cfg).unwrap()).unwrap();
    assert!((dup - single).abs() < 1e-12);
}

#[test]
fn local_loss_of_perfect_maps_is_small() {
    let n = 32 * 32;
    let mut y = vec![0.0; 2 * n];
    for i in 0..n {
        y[usize::from(i % 32 < 10) * n + i] = 1.0;
    }
    let t = Tensor::matrix(2, n, y).unwrap();
    let g = Graph::new();
    let s = g.constant(t.clone());
    let v = g.item(local_loss(&g, &[s], &t, &LocalLossConfig::default()).unwrap()).unwrap();
    assert!((0.0..2e-3).contains(&v));
}

#[test]
fn total_loss_cases() {
    let g = Graph::new();
    let gl = g.constant(Tensor::scalar(0.7));
    let lo = g.constant(Tensor::scalar(0.3));
    assert_eq!(g.item(total_loss(&g, gl, lo, 0.0).unwrap()).unwrap(), 0.7);
    let t1 = g.item(total_loss(&g, gl, lo, 4.0).unwrap()).unwrap();
    let t2 = g.item(total_loss(&g, gl, lo, 8.0).unwrap()).unwrap();
    assert!((t2 - t1 - 4.0 * 0.3).abs() < 1e-15);
    assert!(total_loss(&g, gl, lo, -1.0).is_err());
}

#[test]
fn upsample_hand_case() {
    let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let up = upsample(&m, 4, 4).unwrap();
    let want = [
        1.0, 1.25, 1.75, 2.0, //
        1.5, 1.75, 2.25, 2.5, //
        2.5, 2.75, 3.25, 3.5, //
        3.0, 3.25, 3.75, 4.0,
    ];
    for (a, b) in up.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn upsample_degenerate_cases() {
    let c = upsample(&Tensor::full(&[3, 3], 0.4), 9, 12).unwrap();
    assert!(c.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    let one = upsample(&Tensor::full(&[1, 1], 0.9), 5, 5).unwrap();
    assert!(one.data().iter().all(|&v| v == 0.9));
    assert!(upsample(&Tensor::zeros(&[4, 4]), 2, 2).is_err());
    let mut rng = RngHandle::new(3);
    let r = Tensor::randn(&[8, 8], 0.0, 1.0, &mut rng);
    let (lo, hi) = r.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let u = upsample(&r, 64, 64).unwrap();
    assert!(u.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
}

fn unit(g: &Graph, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    g.l2_normalize(g.constant(Tensor::matrix(rows, cols, data).unwrap())).unwrap()
}

#[test]
fn similarity_limit_and_symmetry() {
    let g = Graph::new();
    let protos = unit(&g, 3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let patch = unit(&g, 1, 3, vec![0.0, 1.0, 0.0]);
    let s = g.value(similarity_maps(&g, patch, protos, 0.001).unwrap());
    assert!((s.data()[1] - 1.0).abs() < 1e-12);

    let same = unit(&g, 3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
    let patches = unit(&g, 4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.3, 0.3]);
    let s = g.value(similarity_maps(&g, patches, same, 0.07).unwrap());
    assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn similarity_rows_sum_to_one_and_argmax_is_scale_free() {
    let mut rng = RngHandle::new(12);
    let g = Graph::new();
    let protos = g.l2_normalize(g.constant(Tensor::randn(&[4, 6], 0.0, 1.0, &mut rng))).unwrap();
    let patches = g.l2_normalize(g.constant(Tensor::randn(&[20, 6], 0.0, 1.0, &mut rng))).unwrap();
    let a = g.value(similarity_maps(&g, patches, protos, 0.07).unwrap());
    let b = g.value(similarity_maps(&g, patches, protos, 0.5).unwrap());
    for i in 0..20 {
        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(argmax_low(a.row(i).iter().copied()), argmax_low(b.row(i).iter().copied()));
    }
}

#[test]
fn global_score_cases() {
    let g = Graph::new();
    let zx = unit(&g, 1, 3, vec![1.0, 0.0, 0.0]);
    let zn = unit(&g, 1, 3, vec![1.0, 0.0, 0.0]);
    let za = unit(&g, 1, 3, vec![0.0, 1.0, 0.0]);
    let s = g.value(global_score(&g, zx, zn, za, 0.07).unwrap());
    let want = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
    assert!(s.data()[0] > 0.99 && (s.data()[0] - want).abs() < 1e-12);

    let swapped = g.value(global_score(&g, zx, za, zn, 0.07).unwrap());
    assert_eq!(swapped.data()[0], s.data()[1]);
    assert_eq!(swapped.data()[1], s.data()[0]);

    let tie = g.value(global_score(&g, zx, za, za, 0.07).unwrap());
    assert_eq!(tie.data(), &[0.5, 0.5]);
}

#[test]
fn global_score_with_per_image_aggregate() {
    let g = Graph::new();
    let mut rng = RngHandle::new(2);
    let zx = g.l2_normalize(g.constant(Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng))).unwrap();
    let zn = g.l2_normalize(g.constant(Tensor::randn(&[1, 4], 0.0, 1.0, &mut rng))).unwrap();
    let za = g.l2_normalize(g.constant(Tensor::randn(&[1, 4], 0.0, 1.0, &mut rng))).unwrap();
    let shared = g.value(global_score(&g, zx, zn, za, 0.07).unwrap());
    let tiled = g.gather_rows(za, &[0, 0, 0]).unwrap();
    let per = g.value(global_score(&g, zx, zn, tiled, 0.07).unwrap());
    assert!(shared.max_abs_diff(&per) < 1e-15);
}

#[test]
fn global_loss_is_cross_entropy() {
    let g = Graph::new();
    let logits = g.constant(Tensor::matrix(2, 2, vec![2.0, -1.0, 0.5, 0.25]).unwrap());
    let v = g.item(global_loss(&g, logits, &[0, 1]).unwrap()).unwrap();
    let ce0 = -(2.0f64.exp() / (2.0f64.exp() + (-1.0f64).exp())).ln();
    let ce1 = -(0.25f64.exp() / (0.5f64.exp() + 0.25f64.exp())).ln();
    assert!((v - (ce0 + ce1) / 2.0).abs() < 1e-12);
}

fn map_set(rng: &mut RngHandle, stages: usize, c: usize, grid: usize) -> SimilarityMapSet {
    let maps = (0..stages).map(|_| Tensor::matrix(c, grid * grid, random_case(rng, c, grid * grid).0).unwrap());
    SimilarityMapSet::new(maps.collect(), grid).unwrap()
}

#[test]
fn binary_map_cases() {
    let mut normal = Tensor::zeros(&[3, 4]);
    normal.data_mut()[..4].fill(1.0);
    let set = SimilarityMapSet::new(vec![normal.clone(), normal], 2).unwrap();
    let m = binary_anomaly_map(&set, 8, 8).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));

    let mut rng = RngHandle::new(5);
    let set = map_set(&mut rng, 2, 2, 4);
    let got = binary_anomaly_map(&set, 16, 16).unwrap();
    let mut mean = vec![0.0; 16];
    for m in &set.maps {
        for i in 0..16 {
            mean[i] += m.data()[16 + i] / 2.0;
        }
    }
    let want = upsample(&Tensor::matrix(4, 4, mean).unwrap(), 16, 16).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn binary_map_is_monotone_in_normal_probability() {
    let mut rng = RngHandle::new(6);
    let set = map_set(&mut rng, 1, 3, 4);
    let before = binary_anomaly_map(&set, 4, 4).unwrap();
    let mut raised = set.clone();
    let d = raised.maps[0].data_mut();
    d[5] = (d[5] + 0.2).min(1.0);
    let after = binary_anomaly_map(&raised, 4, 4).unwrap();
    assert!(after.data()[5] <= before.data()[5]);
}

#[test]
fn multitype_mask_cases() {
    let grid = 2;
    let dominant = Tensor::matrix(3, 4, vec![0.8, 0.1, 0.1, 0.2, 0.1, 0.8, 0.1, 0.2, 0.1, 0.1, 0.8, 0.6]).unwrap();
    let set = SimilarityMapSet::new(vec![dominant.clone()], grid).unwrap();
    assert_eq!(multitype_mask(&set).unwrap().0, vec![0, 1, 2, 2]);

    let tie = Tensor::matrix(4, 1, vec![0.4, 0.1, 0.1, 0.4]).unwrap();
    let set = SimilarityMapSet::new(vec![tie], 1).unwrap();
    assert_eq!(multitype_mask(&set).unwrap().0, vec![0]);

    let triple = SimilarityMapSet::new(vec![dominant.clone(); 3], grid).unwrap();
    let (labels, agg) = multitype_mask(&triple).unwrap();
    assert_eq!(labels, vec![0, 1, 2, 2]);
    for (a, d) in agg.data().iter().zip(dominant.data()) {
        assert!((a - 3.0 * d).abs() < 1e-15);
    }
}

#[test]
fn multitype_argmax_scale_invariant() {
    let mut rng = RngHandle::new(9);
    let set = map_set(&mut rng, 3, 4, 4);
    let (labels, agg) = multitype_mask(&set).unwrap();
    for c in [0.01, 7.5] {
        let scaled = Tensor::new(agg.shape().to_vec(), agg.data().iter().map(|v| v * c).collect()).unwrap();
        assert_eq!(label_argmax(&scaled).unwrap(), labels);
    }
    let up = multitype_mask_upsampled(&set, 16, 16).unwrap();
    assert_eq!(up.len(), 256);
    assert!(up.iter().all(|&l| l < 4));
}

#[test]
fn image_score_cases() {
    let map = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
    assert_eq!(image_score([0.3, 0.7], &map, 1.0).unwrap(), 0.7);
    assert_eq!(image_score([0.3, 0.7], &map, 0.0).unwrap(), 0.9);
    assert!((image_score([0.3, 0.7], &map, 0.5).unwrap() - 0.8).abs() < 1e-15);
    assert!(image_score([0.3, 0.7], &map, 1.5).is_err());
    let mut rng = RngHandle::new(1);
    for _ in 0..100 {
        let p = rng.uniform();
        let m = Tensor::vector((0..5).map(|_| rng.uniform()).collect());
        let s = image_score([1.0 - p, p], &m, rng.uniform()).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn multilabel_cases() {
    let zn = [1.0, 0.0, 0.0];
    let zd = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let p = multilabel_probs(&zn, &zn, &zd, 0.07).unwrap();
    assert!(p.iter().all(|&v| v < 0.5));

    let zx = [0.6, 0.8, 0.0];
    let zn2 = [0.0, 1.0, 0.0];
    let zd2 = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(multilabel_probs(&zx, &zn2, &zd2, 0.07).unwrap(), vec![0.5]);

    let mut rng = RngHandle::new(3);
    let zd3 = Tensor::randn(&[4, 3], 0.0, 1.0, &mut rng);
    let a = multilabel_probs(&zx, &zn, &zd3, 0.07).unwrap();
    let b = multilabel_probs(&zx, &zn, &zd3, 3.0).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(*x > 0.5, *y > 0.5);
    }
}

#[test]
fn identity_adapter_only_normalizes() {
    let mut rng = RngHandle::new(2);
    let z = Tensor::randn(&[5, 4], 0.0, 1.0, &mut rng);
    let g = Graph::new();
    let stack = AdapterStack::identity(2, 4);
    let ad = stack.bind(&g, false);
    let zv = g.constant(z);
    let a = g.value(adapt_patches(&g, zv, ad[1]).unwrap());
    let b = g.value(g.l2_normalize(zv).unwrap());
    assert_eq!(a, b);
    for i in 0..5 {
        assert!((a.row(i).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(adapt_patches(&g, g.constant(Tensor::zeros(&[2, 3])), ad[0]).is_err());
}

#[test]
fn adapter_receives_gradient() {
    let mut rng = RngHandle::new(2);
    let g = Graph::new();
    let stack = AdapterStack::from_map(1, &Tensor::randn(&[4, 4], 0.0, 0.5, &mut rng)).unwrap();
    let ad = stack.bind(&g, true);
    let z = g.constant(Tensor::randn(&[6, 4], 0.0, 1.0, &mut rng));
    let protos = g.l2_normalize(g.constant(Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng))).unwrap();
    let s = similarity_maps(&g, adapt_patches(&g, z, ad[0]).unwrap(), protos, 0.07).unwrap();
    let target = Tensor::matrix(3, 6, random_case(&mut rng, 3, 6).1).unwrap();
    let loss = focal_loss(&g, g.transpose(s).unwrap(), &target, 2.0, None).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(ad[0].0).unwrap().data().iter().any(|v| v.abs() > 0.0));
    assert!(g.grad(ad[0].1).unwrap().data().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn local_loss_gradient_matches_finite_differences() {
    use crate::numerics::finite_diff_check;
    let mut rng = RngHandle::new(31);
    let target = Tensor::matrix(3, 16, random_case(&mut rng, 3, 16).1).unwrap();
    let up = upsample_matrix(2, 2, 4, 4).unwrap();
    let x = Tensor::randn(&[4, 5], 0.0, 1.0, &mut rng);
    let protos = Tensor::randn(&[3, 5], 0.0, 1.0, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let p = g.l2_normalize(g.constant(protos.clone()))?;
            let s = similarity_maps(g, g.l2_normalize(v)?, p, 0.5)?;
            let s = upsample_channels(g, g.transpose(s)?, g.constant(up.clone()))?;
            local_loss(g, &[s], &target, &LocalLossConfig::default())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}
