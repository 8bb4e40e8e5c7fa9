//! Loss contracts: analytic values, brute-force oracles, the weighted
//! combination, and gradient flow through each differentiable term.

use asmd::engine::gradcheck::{check_gradients, GradCheckSettings};
use asmd::engine::{Graph, ParameterStore, Rng, Tensor};
use asmd::losses::{
    self, combine_on_graph, l_adv, l_aot, l_dif, l_dom, l_track, log_row, total_loss, LossError,
    LossReport, LossWeights, Phase, TrackLosses,
};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

// ------------------------------------------------------------------ track --

#[test]
fn track_loss_of_all_negative_batch_is_zero() {
    let scores = vec![0.2, 0.9, 0.5, 0.01];
    let labels = vec![false; 4];
    assert_eq!(l_track(&scores, &labels, 2, 2).unwrap(), 0.0);
}

#[test]
fn track_loss_single_positive_at_half_is_ln2() {
    let v = l_track(&[0.5], &[true], 1, 1).unwrap();
    assert!((v - 2.0f64.ln()).abs() < 1e-15);
}

#[test]
fn track_loss_matches_direct_summation() {
    let mut rng = Rng::new(11);
    let (n, t) = (7, 5);
    let scores: Vec<f64> = (0..n * t).map(|_| rng.range(1e-6, 1.0 - 1e-6)).collect();
    let labels: Vec<bool> = (0..n * t).map(|_| rng.uniform() < 0.4).collect();

    let mut oracle = 0.0;
    for ti in 0..t {
        for j in 0..n {
            if labels[ti * n + j] {
                oracle -= scores[ti * n + j].ln();
            }
        }
    }
    oracle /= (n * t) as f64;

    let v = l_track(&scores, &labels, n, t).unwrap();
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn track_loss_rejects_scores_outside_open_interval() {
    for bad in [0.0, 1.0, -0.1, 1.7, f64::NAN] {
        let err = l_track(&[bad], &[true], 1, 1).unwrap_err();
        assert!(matches!(err, LossError::ScoreOutOfRange { index: 0, .. }));
    }
    assert!(l_track(&[0.5, 0.5], &[true], 1, 1).is_err());
}

// -------------------------------------------------------------- domain mix --

#[test]
fn domain_loss_weights_and_degenerate_cases() {
    assert!((l_dom(&[0.4, 0.8], &[0.5, 0.5]).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(l_dom(&[0.3, 0.9, 0.1], &[0.0, 1.0, 0.0]).unwrap(), 0.9);

    let mut rng = Rng::new(3);
    let track: Vec<f64> = (0..5).map(|_| rng.range(0.0, 2.0)).collect();
    let alpha = vec![0.2; 5];
    let oracle: f64 = track.iter().map(|l| 0.2 * l).sum();
    assert!((l_dom(&track, &alpha).unwrap() - oracle).abs() < 1e-12);

    assert!(matches!(l_dom(&[1.0], &[0.5, 0.5]), Err(LossError::LengthMismatch(_))));
}

// ------------------------------------------------------------ adversarial --

fn one_hot(rows: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; rows.len() * k];
    for (i, &r) in rows.iter().enumerate() {
        data[i * k + r] = 1.0;
    }
    Tensor::new(vec![rows.len(), k], data).unwrap()
}

#[test]
fn adversarial_loss_of_uniform_logits_is_log_k() {
    let logits = Tensor::full(vec![3, 4], 0.7);
    let v = l_adv(&logits, &one_hot(&[0, 2, 3], 4)).unwrap();
    assert!((v - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn adversarial_loss_with_one_domain_is_zero() {
    let logits = Tensor::new(vec![2, 1], vec![1.3, -0.4]).unwrap();
    let v = l_adv(&logits, &one_hot(&[0, 0], 1)).unwrap();
    assert!(v.abs() < 1e-15);
}

#[test]
fn adversarial_loss_matches_brute_force_softmax() {
    let mut rng = Rng::new(17);
    let (b, k) = (6, 3);
    let logits = rand_tensor(&[b, k], &mut rng);
    let domains: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();

    let mut oracle = 0.0;
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        oracle -= (row[domains[i]].exp() / denom).ln();
    }
    oracle /= b as f64;

    let v = l_adv(&logits, &one_hot(&domains, k)).unwrap();
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn adversarial_loss_rejects_malformed_indicators() {
    let logits = Tensor::full(vec![2, 3], 0.0);
    for bad in [
        Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        Tensor::zeros(vec![2, 3]),
    ] {
        assert!(matches!(l_adv(&logits, &bad), Err(LossError::NotOneHot { .. })));
    }
    let wrong_shape = one_hot(&[0, 1, 2], 3);
    assert!(matches!(l_adv(&logits, &wrong_shape), Err(LossError::LengthMismatch(_))));
}

// ------------------------------------------------------------- difference --

#[test]
fn difference_loss_zero_for_orthogonal_features() {
    // disjoint batch support: every cross-correlation entry sums to 0
    let fs = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    let fk = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(l_dif(&fs, &[&fk], false).unwrap(), 0.0);
}

#[test]
fn difference_loss_single_unit_features() {
    let f = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    assert_eq!(l_dif(&f, &[&f], false).unwrap(), 1.0);
    assert_eq!(l_dif(&f, &[&f], true).unwrap(), 1.0);
}

#[test]
fn difference_loss_matches_double_sum_oracle() {
    let mut rng = Rng::new(23);
    let fs = rand_tensor(&[4, 3], &mut rng);
    let fk = rand_tensor(&[4, 2], &mut rng);

    let mut batch = 0.0;
    for p in 0..3 {
        for q in 0..2 {
            let mut m = 0.0;
            for i in 0..4 {
                m += fs.at2(i, p) * fk.at2(i, q);
            }
            batch += m * m;
        }
    }
    let mut per_sample = 0.0;
    for i in 0..4 {
        let ns: f64 = (0..3).map(|p| fs.at2(i, p).powi(2)).sum();
        let nk: f64 = (0..2).map(|q| fk.at2(i, q).powi(2)).sum();
        per_sample += ns * nk;
    }

    assert!((l_dif(&fs, &[&fk], false).unwrap() - batch).abs() < 1e-12);
    assert!((l_dif(&fs, &[&fk], true).unwrap() - per_sample).abs() < 1e-12);
    assert!((batch - per_sample).abs() > 1e-6, "modes should differ on random input");

    let short = rand_tensor(&[3, 2], &mut rng);
    assert!(l_dif(&fs, &[&short], false).is_err());
}

#[test]
fn difference_loss_sums_over_domains() {
    let mut rng = Rng::new(29);
    let fs = rand_tensor(&[3, 4], &mut rng);
    let f1 = rand_tensor(&[3, 2], &mut rng);
    let f2 = rand_tensor(&[3, 5], &mut rng);
    let total = l_dif(&fs, &[&f1, &f2], false).unwrap();
    let parts = l_dif(&fs, &[&f1], false).unwrap() + l_dif(&fs, &[&f2], false).unwrap();
    assert!((total - parts).abs() < 1e-12);
}

#[test]
fn difference_loss_batch_rotation_invariance_and_quadratic_scale() {
    let mut rng = Rng::new(31);
    let fs = rand_tensor(&[4, 3], &mut rng);
    let fk = rand_tensor(&[4, 2], &mut rng);
    let base = l_dif(&fs, &[&fk], false).unwrap();

    // batch-index permutation applied to both arguments
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor| {
        let d = t.shape()[1];
        let mut out = vec![0.0; t.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * d..(dst + 1) * d].copy_from_slice(&t.data()[src * d..(src + 1) * d]);
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    let v = l_dif(&permute(&fs), &[&permute(&fk)], false).unwrap();
    assert!((v - base).abs() < 1e-12);

    // Givens rotation of rows 0 and 1 of both arguments
    let (c, s) = (0.6, 0.8);
    let rotate = |t: &Tensor| {
        let d = t.shape()[1];
        let mut out = t.data().to_vec();
        for j in 0..d {
            let (a, b) = (t.at2(0, j), t.at2(1, j));
            out[j] = c * a - s * b;
            out[d + j] = s * a + c * b;
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    let v = l_dif(&rotate(&fs), &[&rotate(&fk)], false).unwrap();
    assert!((v - base).abs() < 1e-10);

    // quadratic in each argument's magnitude
    let scale = |t: &Tensor, c: f64| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect()).unwrap()
    };
    let v = l_dif(&scale(&fs, 3.0), &[&fk], false).unwrap();
    assert!((v - 9.0 * base).abs() < 1e-9 * base.max(1.0));
    let v = l_dif(&fs, &[&scale(&fk, -2.0)], false).unwrap();
    assert!((v - 4.0 * base).abs() < 1e-9 * base.max(1.0));
}

// -------------------------------------------------------------- direction --

#[test]
fn direction_loss_analytic_points() {
    let v = l_aot(&[0.0, 0.0], &[true, false]).unwrap();
    assert!((v - 2.0f64.ln()).abs() < 1e-15);

    let v = l_aot(&[20.0, -20.0], &[true, false]).unwrap();
    assert!(v < 1e-8);
}

#[test]
fn direction_loss_matches_brute_force() {
    let mut rng = Rng::new(37);
    let logits: Vec<f64> = (0..9).map(|_| rng.range(-4.0, 4.0)).collect();
    let forward: Vec<bool> = (0..9).map(|_| rng.coin()).collect();

    let mut oracle = 0.0;
    for (&z, &f) in logits.iter().zip(&forward) {
        let p = 1.0 / (1.0 + (-z).exp());
        let t = if f { 1.0 } else { 0.0 };
        oracle -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    oracle /= 9.0;

    assert!((l_aot(&logits, &forward).unwrap() - oracle).abs() < 1e-12);
    assert!(l_aot(&[0.0], &[true, false]).is_err());
}

// ------------------------------------------------------------ combination --

#[test]
fn total_with_tuned_weights_and_unit_parts() {
    let w = LossWeights::new(0.08, 0.01, 0.6, vec![1.0]).unwrap();
    let r = total_loss(&[TrackLosses { literal: 1.0, trained: 1.0 }], 1.0, 1.0, 1.0, &w).unwrap();
    assert!((r.total - 1.69).abs() < 1e-12);
    assert_eq!(r.l_dom, 1.0);
}

#[test]
fn total_reduces_to_domain_loss_when_lambdas_vanish() {
    let w = LossWeights::equal_alpha(2, 0.0, 0.0, 0.0).unwrap();
    let pd = [
        TrackLosses { literal: 0.4, trained: 0.5 },
        TrackLosses { literal: 0.8, trained: 0.9 },
    ];
    let r = total_loss(&pd, 5.0, 7.0, 9.0, &w).unwrap();
    assert_eq!(r.total, r.l_dom);
    assert!((r.l_dom - 0.6).abs() < 1e-15);
    assert!((r.l_dom_trained - 0.7).abs() < 1e-15);
}

#[test]
fn total_matches_direct_arithmetic_and_identity_invariant() {
    let mut rng = Rng::new(41);
    let w = LossWeights::equal_alpha(3, 0.08, 0.01, 0.6).unwrap();
    for _ in 0..20 {
        let pd: Vec<TrackLosses> = (0..3)
            .map(|_| TrackLosses { literal: rng.range(0.0, 2.0), trained: rng.range(0.0, 2.0) })
            .collect();
        let (a, d, t) = (rng.range(0.0, 2.0), rng.range(0.0, 2.0), rng.range(0.0, 2.0));
        let r = total_loss(&pd, a, d, t, &w).unwrap();
        let direct = r.l_dom + 0.08 * a + 0.01 * d + 0.6 * t;
        assert!((r.total - direct).abs() < 1e-12);
    }
}

#[test]
fn total_names_the_non_finite_term() {
    let w = LossWeights::equal_alpha(1, 0.08, 0.01, 0.6).unwrap();
    let pd = [TrackLosses { literal: 0.1, trained: 0.1 }];
    let err = total_loss(&pd, 1.0, f64::NAN, 1.0, &w).unwrap_err();
    assert!(format!("{err}").contains("l_dif"), "{err}");
    let err = total_loss(&pd, f64::INFINITY, 0.0, 1.0, &w).unwrap_err();
    assert!(format!("{err}").contains("l_adv"), "{err}");
}

#[test]
fn weights_reject_bad_lambdas_and_alpha() {
    assert!(LossWeights::new(-0.1, 0.0, 0.0, vec![1.0]).is_err());
    assert!(LossWeights::new(0.1, f64::NAN, 0.0, vec![1.0]).is_err());
    assert!(LossWeights::new(0.1, 0.0, 0.0, vec![0.7, 0.7]).is_err());
    assert!(LossWeights::new(0.1, 0.0, 0.0, vec![1.5, -0.5]).is_err());
    assert!(LossWeights::new(0.1, 0.0, 0.0, vec![]).is_err());

    let w = LossWeights::equal_alpha(4, 0.0, 0.0, 0.0).unwrap();
    assert_eq!(w.alpha, vec![0.25; 4]);
    assert!(LossWeights::equal_alpha(0, 0.0, 0.0, 0.0).is_err());
}

#[test]
fn unsupervised_report_has_no_domain_term() {
    let w = LossWeights::equal_alpha(3, 0.08, 0.01, 0.6).unwrap();
    let r = total_loss(&[], 0.9, 0.0, 0.7, &w).unwrap();
    assert_eq!(r.l_dom, 0.0);
    assert!((r.total - (0.08 * 0.9 + 0.6 * 0.7)).abs() < 1e-15);
}

#[test]
fn log_rows_roundtrip_through_display() {
    assert_eq!(losses::LOG_HEADER, "iteration,phase,l_dom,l_adv,l_dif,l_aot,total");
    let r = LossReport {
        l_dom: 0.5,
        l_dom_trained: 0.55,
        l_adv: 0.25,
        l_dif: 0.125,
        l_aot: 1.0,
        total: 1.12125,
        per_domain: vec![],
    };
    let row = log_row(120, Phase::Supervised, &r);
    assert_eq!(row, "120,supervised,0.5,0.25,0.125,1,1.12125");
    let row = log_row(7, Phase::Unsupervised, &r);
    assert!(row.starts_with("7,unsupervised,"));

    // shortest-roundtrip formatting parses back exactly
    let ugly: f64 = 1.0 / 3.0;
    assert_eq!(format!("{ugly}").parse::<f64>().unwrap().to_bits(), ugly.to_bits());
}

// ------------------------------------------------------------- graph side --

#[test]
fn graph_combination_weights_each_term_gradient() {
    let w = LossWeights::equal_alpha(2, 0.08, 0.01, 0.6).unwrap();
    let mut g = Graph::new();
    let dom = g.input(Tensor::scalar(0.5));
    let adv = g.input(Tensor::scalar(0.25));
    let dif = g.input(Tensor::scalar(2.0));
    let aot = g.input(Tensor::scalar(1.5));
    let total = combine_on_graph(&mut g, Some(dom), Some(adv), Some(dif), Some(aot), &w).unwrap();

    let expect = 0.5 + 0.08 * 0.25 + 0.01 * 2.0 + 0.6 * 1.5;
    assert!((g.value(total).item() - expect).abs() < 1e-15);

    let grads = g.backward(total).unwrap();
    for (node, lambda) in [(dom, 1.0), (adv, 0.08), (dif, 0.01), (aot, 0.6)] {
        assert!((grads.node(node).unwrap().item() - lambda).abs() < 1e-15);
    }
}

#[test]
fn graph_combination_skips_absent_and_zero_weight_terms() {
    let w = LossWeights::equal_alpha(2, 0.08, 0.0, 0.6).unwrap();
    let mut g = Graph::new();
    let adv = g.input(Tensor::scalar(0.25));
    let dif = g.input(Tensor::scalar(2.0));
    let aot = g.input(Tensor::scalar(1.5));
    let total = combine_on_graph(&mut g, None, Some(adv), Some(dif), Some(aot), &w).unwrap();

    assert!((g.value(total).item() - (0.08 * 0.25 + 0.6 * 1.5)).abs() < 1e-15);
    let grads = g.backward(total).unwrap();
    // lambda2 = 0: the dif node must receive no gradient at all
    assert!(grads.node(dif).is_none());

    let w0 = LossWeights::equal_alpha(2, 0.0, 0.0, 0.0).unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        combine_on_graph(&mut g, None, None, None, None, &w0),
        Err(LossError::Empty)
    ));
}

#[test]
fn every_differentiable_term_passes_finite_difference() {
    let mut rng = Rng::new(43);
    let mut store = ParameterStore::new();
    store
        .add_partition(
            "feat",
            vec![rand_tensor(&[4, 3], &mut rng), rand_tensor(&[4, 2], &mut rng)],
        )
        .unwrap();
    store
        .add_partition(
            "disc",
            vec![rand_tensor(&[3, 3], &mut rng), rand_tensor(&[3], &mut rng)],
        )
        .unwrap();
    store
        .add_partition(
            "dir",
            vec![rand_tensor(&[1, 3], &mut rng), rand_tensor(&[1], &mut rng)],
        )
        .unwrap();

    let w = LossWeights::equal_alpha(2, 0.08, 0.01, 0.6).unwrap();
    let build = |s: &ParameterStore| -> Result<_, LossError> {
        let mut g = Graph::new();
        let fs = g.param("feat", 0, s.tensor("feat", 0)?.clone());
        let fk = g.param("feat", 1, s.tensor("feat", 1)?.clone());

        // trained domain term: two-class CE over a linear head of fs
        let hw = g.param("dir", 0, s.tensor("dir", 0)?.clone());
        let hb = g.param("dir", 1, s.tensor("dir", 1)?.clone());
        let track_logit = g.linear(fs, hw, hb)?;
        let aot = g.sigmoid_cross_entropy(track_logit, vec![1.0, 0.0, 1.0, 1.0], None)?;

        // discriminator CE over fs, no reversal here: the reversed layer's
        // backward is deliberately not the forward's derivative, so it has
        // no place in a finite-difference check
        let dw = g.param("disc", 0, s.tensor("disc", 0)?.clone());
        let db = g.param("disc", 1, s.tensor("disc", 1)?.clone());
        let dlogits = g.linear(fs, dw, db)?;
        let adv = g.softmax_cross_entropy(dlogits, vec![0, 2, 1, 0], None)?;

        let dif = g.frobenius_sq_of_product(fs, fk, false)?;

        let total = combine_on_graph(&mut g, None, Some(adv), Some(dif), Some(aot), &w)?;
        Ok((g, total))
    };
    let report = check_gradients(&store, &GradCheckSettings::default(), build).unwrap();
    assert!(report.passed(), "{}", report.summary());
}

#[test]
fn reversal_flips_feature_gradient_of_discriminator_loss() {
    let mut rng = Rng::new(47);
    let feat = rand_tensor(&[3, 4], &mut rng);
    let dw = rand_tensor(&[2, 4], &mut rng);
    let db = rand_tensor(&[2], &mut rng);
    let domains = vec![0usize, 1, 0];
    let strength = 0.8;

    let run = |reversed: bool| {
        let mut g = Graph::new();
        let x = g.input(feat.clone());
        let h = if reversed { g.grad_reverse(x, strength).unwrap() } else { x };
        let w = g.param("d", 0, dw.clone());
        let b = g.param("d", 1, db.clone());
        let logits = g.linear(h, w, b).unwrap();
        let loss = g.softmax_cross_entropy(logits, domains.clone(), None).unwrap();
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let dx = grads.node(x).unwrap().clone();
        let dw = grads.param("d", 0).unwrap().clone();
        (loss_value, dx, dw)
    };

    let (plain_loss, plain_dx, plain_dw) = run(false);
    let (rev_loss, rev_dx, rev_dw) = run(true);

    // same forward value, same discriminator gradient, negated (and
    // scaled) feature gradient: one backward serves both sides of the
    // min-max
    assert_eq!(plain_loss.to_bits(), rev_loss.to_bits());
    assert_eq!(plain_dw.data(), rev_dw.data());
    for (p, r) in plain_dx.iter().zip(rev_dx.iter()) {
        assert!((r + strength * p).abs() < 1e-12);
    }
}

// ------------------------------------------------------------- properties --

proptest! {
    #[test]
    fn track_loss_nonnegative_and_finite(
        scores in prop::collection::vec(1e-9..1.0f64, 12),
        labels in prop::collection::vec(any::<bool>(), 12),
    ) {
        let scores: Vec<f64> = scores.iter().map(|s| s.min(1.0 - 1e-9)).collect();
        let v = l_track(&scores, &labels, 4, 3).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn adversarial_loss_nonnegative_and_finite(
        logits in prop::collection::vec(-30.0..30.0f64, 8),
        hot in prop::collection::vec(0usize..4, 2),
    ) {
        let t = Tensor::new(vec![2, 4], logits).unwrap();
        let v = l_adv(&t, &one_hot(&hot, 4)).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn difference_loss_nonnegative_both_modes(
        fs in prop::collection::vec(-5.0..5.0f64, 6),
        fk in prop::collection::vec(-5.0..5.0f64, 4),
        per_sample in any::<bool>(),
    ) {
        let fs = Tensor::new(vec![2, 3], fs).unwrap();
        let fk = Tensor::new(vec![2, 2], fk).unwrap();
        let v = l_dif(&fs, &[&fk], per_sample).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn direction_loss_nonnegative_and_finite(
        logits in prop::collection::vec(-50.0..50.0f64, 5),
        forward in prop::collection::vec(any::<bool>(), 5),
    ) {
        let v = l_aot(&logits, &forward).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn report_total_identity_holds(
        parts in prop::collection::vec(0.0..3.0f64, 5),
        l1 in 0.0..1.0f64, l2 in 0.0..1.0f64, l3 in 0.0..1.0f64,
    ) {
        let w = LossWeights::equal_alpha(2, l1, l2, l3).unwrap();
        let pd = [
            TrackLosses { literal: parts[0], trained: parts[1] },
            TrackLosses { literal: parts[2], trained: parts[3] },
        ];
        let r = total_loss(&pd, parts[4], parts[0], parts[1], &w).unwrap();
        let direct = r.l_dom + w.lambda1 * r.l_adv + w.lambda2 * r.l_dif + w.lambda3 * r.l_aot;
        prop_assert!((r.total - direct).abs() < 1e-12);
    }
}
