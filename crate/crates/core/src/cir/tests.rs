use super::*;
use crate::baselines::erm_loss;
use crate::model::Block;
use crate::ndmath::GradCheck;
use crate::testutil::{normal, random_batch, rng, toy_config, toy_model};
use proptest::prelude::*;

/// Masked softmax of one score matrix, row by row with explicit loops.
fn oracle_weights(scores: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let b = scores.rows();
    let mut w = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut m = f64::NEG_INFINITY;
        for j in 0..b {
            if allowed(i, j) && scores.at(i, j) > m {
                m = scores.at(i, j);
            }
        }
        let mut z = 0.0;
        for j in 0..b {
            if allowed(i, j) {
                w[i][j] = (scores.at(i, j) - m).exp();
                z += w[i][j];
            }
        }
        for j in 0..b {
            w[i][j] /= z;
        }
    }
    w
}

fn weights_of(f_v: &Tensor, policy: &MaskPolicy, domains: Option<&[Domain]>) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let f = tape.constant(f_v.clone());
    let scores = attention_scores_crossprod(&mut tape, f).unwrap();
    let (r, w) = reconstruct(&mut tape, scores, f, policy, domains).unwrap();
    (tape.value(scores).clone(), tape.value(w).clone(), tape.value(r).clone())
}

#[test]
fn learned_scores_are_symmetric_when_query_equals_key() {
    let mut model = toy_model(1);
    for (q, k) in [
        (Block::QWeight, Block::KWeight),
        (Block::QBias, Block::KBias),
        (Block::QLnGamma, Block::KLnGamma),
        (Block::QLnBeta, Block::KLnBeta),
    ] {
        *model.param_mut(k) = model.param(q).clone();
    }
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let f = tape.constant(normal(&mut rng(2), 5, 8));
    let s = attention_scores_learned(&model, &mut tape, &vars, f).unwrap();
    let s = tape.value(s);
    for i in 0..5 {
        for j in 0..5 {
            assert!((s.at(i, j) - s.at(j, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn crossprod_scores_of_orthonormal_rows_are_identity() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::eye(3));
    let s = attention_scores_crossprod(&mut tape, f).unwrap();
    assert_eq!(tape.value(s), &Tensor::eye(3));
}

#[test]
fn crossprod_scores_scale_quadratically() {
    let x = normal(&mut rng(3), 4, 6);
    let scaled = Tensor::matrix(4, 6, x.data().iter().map(|v| 3.0 * v).collect()).unwrap();
    let (a, _, _) = weights_of(&x, &MaskPolicy::PERMISSIVE, None);
    let (b, _, _) = weights_of(&scaled, &MaskPolicy::PERMISSIVE, None);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((9.0 * p - q).abs() <= 1e-12 * q.abs().max(1.0));
    }
}

#[test]
fn crossprod_matches_double_loop() {
    let x = normal(&mut rng(4), 7, 5);
    let (s, _, _) = weights_of(&x, &MaskPolicy::PERMISSIVE, None);
    for i in 0..7 {
        for j in 0..7 {
            let dot: f64 = (0..5).map(|k| x.at(i, k) * x.at(j, k)).sum();
            assert!((s.at(i, j) - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_rows_reconstruct_themselves() {
    let row = [0.3, -1.2, 2.5, 0.0];
    let x = Tensor::from_rows(&[&row[..], &row[..], &row[..], &row[..]]).unwrap();
    let (_, _, r) = weights_of(&x, &MaskPolicy::PERMISSIVE, None);
    for i in 0..4 {
        for k in 0..4 {
            assert!((r.at(i, k) - row[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn two_samples_swap_exactly() {
    let x = Tensor::from_rows(&[&[1.0, 2.0][..], &[-3.0, 0.5][..]]).unwrap();
    let (_, w, r) = weights_of(&x, &MaskPolicy::PERMISSIVE, None);
    assert_eq!(w.data(), &[0.0, 1.0, 1.0, 0.0]);
    assert_eq!(r.row(0), x.row(1));
    assert_eq!(r.row(1), x.row(0));
}

#[test]
fn four_sample_masked_weights_match_oracle() {
    let x = normal(&mut rng(5), 4, 3);
    let d = |s, l| Domain { scenario: s, location: l };
    let domains = [d(0, 0), d(0, 1), d(1, 0), d(1, 1)];
    let policy: MaskPolicy = "no-same-scenario".parse().unwrap();
    let (s, w, r) = weights_of(&x, &policy, Some(&domains));
    let oracle = oracle_weights(&s, |i, j| i != j && domains[i].scenario != domains[j].scenario);
    for i in 0..4 {
        assert_eq!(w.at(i, i), 0.0);
        for j in 0..4 {
            assert!((w.at(i, j) - oracle[i][j]).abs() < 1e-12);
            if domains[i].scenario == domains[j].scenario {
                assert_eq!(w.at(i, j), 0.0);
            }
        }
        for k in 0..3 {
            let expect: f64 = (0..4).map(|j| oracle[i][j] * x.at(j, k)).sum();
            assert!((r.at(i, k) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_support_names_the_sample() {
    let d = |s, l| Domain { scenario: s, location: l };
    let domains = [d(0, 0), d(1, 0), d(1, 1)];
    let policy: MaskPolicy = "no-other-scenario".parse().unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(normal(&mut rng(6), 3, 2));
    let s = attention_scores_crossprod(&mut tape, f).unwrap();
    let err = reconstruct(&mut tape, s, f, &policy, Some(&domains)).unwrap_err();
    match err {
        CirError::EmptySupport { sample, policy } => {
            assert_eq!(sample, 0);
            assert!(policy.contains("no-other-scenario"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn single_sample_cannot_be_reconstructed() {
    let mut tape = Tape::new();
    let f = tape.constant(normal(&mut rng(6), 1, 2));
    let s = attention_scores_crossprod(&mut tape, f).unwrap();
    assert!(matches!(
        reconstruct(&mut tape, s, f, &MaskPolicy::PERMISSIVE, None),
        Err(CirError::DegenerateBatch(_))
    ));
}

fn nce_value(recon: Tensor, text: Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(recon);
    let t = tape.constant(text);
    let out = nce_loss_with_tau(&mut tape, r, t, tau)?;
    Ok(tape.scalar_value(out.loss))
}

#[test]
fn nce_of_single_pair_is_zero() {
    let x = normal(&mut rng(7), 1, 4);
    let y = normal(&mut rng(8), 1, 4);
    assert!(nce_value(x, y, 0.07).unwrap().abs() < 1e-15);
}

#[test]
fn nce_with_equal_similarities_is_two_ln_two() {
    let row = [1.0, 2.0, -0.5];
    let x = Tensor::from_rows(&[&row[..], &row[..]]).unwrap();
    let v = nce_value(x.clone(), x, 0.07).unwrap();
    assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn nce_on_identity_similarity() {
    let v = nce_value(Tensor::eye(2), Tensor::eye(2), 1.0).unwrap();
    let expect = 2.0 * (1.0 + (-1f64).exp()).ln();
    assert!((v - expect).abs() < 1e-12, "{v}");
    assert!((v - 0.626523).abs() < 1e-6);
}

#[test]
fn nce_rejects_nonpositive_temperature() {
    for tau in [0.0, -0.1, f64::NAN] {
        assert!(matches!(nce_value(Tensor::eye(2), Tensor::eye(2), tau), Err(CirError::Param(_))));
    }
}

#[test]
fn nce_is_invariant_to_joint_permutation() {
    let mut g = rng(9);
    let x = normal(&mut g, 6, 4);
    let y = normal(&mut g, 6, 4);
    let perm = [3, 0, 5, 1, 4, 2];
    let v = nce_value(x.clone(), y.clone(), 0.5).unwrap();
    let w = nce_value(x.select_rows(&perm), y.select_rows(&perm), 0.5).unwrap();
    assert!((v - w).abs() < 1e-12);
}

#[test]
fn zero_weights_reduce_to_erm_bit_for_bit() {
    let model = toy_model(10);
    let cfg = CirLossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..CirLossConfig::default()
    };
    let mut g = rng(11);
    for _ in 0..10 {
        let batch = random_batch(&mut g, &model.config, 6, 3, 3);
        let mut t1 = Tape::new();
        let v1 = model.bind(&mut t1);
        let out = cir_total_loss(&model, &mut t1, &v1, &batch, &cfg).unwrap();
        t1.backward(out.total).unwrap();
        let mut t2 = Tape::new();
        let v2 = model.bind(&mut t2);
        let (l, _, _) = erm_loss(&model, &mut t2, &v2, &batch).unwrap();
        t2.backward(l).unwrap();
        assert_eq!(t1.scalar_value(out.total).to_bits(), t2.scalar_value(l).to_bits());
        for (a, b) in v1.all().iter().zip(v2.all()) {
            assert_eq!(t1.grad_tensor(*a), t2.grad_tensor(*b));
        }
    }
}

#[test]
fn total_is_weighted_sum_of_parts() {
    let model = toy_model(12);
    let batch = random_batch(&mut rng(13), &model.config, 6, 2, 2);
    let cfg = CirLossConfig {
        lambda1: 0.7,
        lambda2: 1.3,
        ..CirLossConfig::default()
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = cir_total_loss(&model, &mut tape, &vars, &batch, &cfg).unwrap();
    let p = out.parts;
    assert!(p.l_rt > 0.0 && p.l_rc > 0.0);
    assert!((p.total - (p.l_c + 0.7 * p.l_rt + 1.3 * p.l_rc)).abs() < 1e-12);
    assert!((p.tau - 0.07).abs() < 1e-12);
}

#[test]
fn full_loss_passes_gradcheck() {
    let model = toy_model(14);
    let batch = random_batch(&mut rng(15), &model.config, 6, 2, 3);
    let report = check_gradients(&model, &batch, &CirLossConfig::default(), &GradCheck::default()).unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn text_branch_gets_no_gradient_without_text_loss() {
    let model = toy_model(16);
    let batch = random_batch(&mut rng(17), &model.config, 6, 2, 2);
    let cfg = CirLossConfig {
        lambda1: 0.0,
        ..CirLossConfig::default()
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = cir_total_loss(&model, &mut tape, &vars, &batch, &cfg).unwrap();
    tape.backward(out.total).unwrap();
    for b in Block::ALL {
        let g = tape.grad_tensor(vars.get(b));
        if b.text_branch_only() {
            assert!(g.data().iter().all(|&x| x == 0.0), "{}", b.name());
        }
    }
    assert!(tape.grad_tensor(vars.get(Block::HWeight)).data().iter().any(|&x| x != 0.0));
}

#[test]
fn mask_policy_text_round_trip() {
    for s in [
        "permissive",
        "no-same-scenario",
        "no-other-location",
        "no-same-scenario,no-same-location",
    ] {
        let p: MaskPolicy = s.parse().unwrap();
        assert_eq!(p.to_string(), s);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, format!("\"{s}\""));
        assert_eq!(serde_json::from_str::<MaskPolicy>(&json).unwrap(), p);
    }
    assert!("no-such-flag".parse::<MaskPolicy>().is_err());
    assert!("no-same-scenario,no-other-scenario".parse::<MaskPolicy>().is_err());
}

#[test]
fn restrictive_policy_requires_domains() {
    let p: MaskPolicy = "no-same-location".parse().unwrap();
    assert!(p.support_mask(3, None).is_err());
    assert!(MaskPolicy::PERMISSIVE.support_mask(3, None).is_ok());
}

fn policy_strategy() -> impl Strategy<Value = MaskPolicy> {
    (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>())
        .prop_map(|(a, b, c, d)| MaskPolicy {
            allow_same_scenario: a,
            allow_same_location: b,
            allow_other_scenario: c,
            allow_other_location: d,
        })
        .prop_filter("must admit something", |p| p.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forbidden_entries_are_exactly_zero(
        policy in policy_strategy(),
        seed in any::<u64>(),
        b in 2usize..12,
    ) {
        let mut g = rng(seed);
        let cfg = toy_config(0);
        let batch = random_batch(&mut g, &cfg, b, 2, 2);
        let x = normal(&mut g, b, 4);
        let mut tape = Tape::new();
        let f = tape.constant(x);
        let s = attention_scores_crossprod(&mut tape, f).unwrap();
        match reconstruct(&mut tape, s, f, &policy, Some(&batch.domains)) {
            Ok((_, w)) => {
                let w = tape.value(w);
                for i in 0..b {
                    let mut row = 0.0;
                    for j in 0..b {
                        if i == j || !policy.allows(batch.domains[i], batch.domains[j]) {
                            prop_assert_eq!(w.at(i, j), 0.0);
                        }
                        row += w.at(i, j);
                    }
                    prop_assert!((row - 1.0).abs() < 1e-12);
                }
            }
            Err(CirError::EmptySupport { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn reconstructions_lie_in_the_hull_of_other_rows(seed in any::<u64>(), b in 2usize..10) {
        let x = normal(&mut rng(seed), b, 3);
        let (_, _, r) = weights_of(&x, &MaskPolicy::PERMISSIVE, None);
        for i in 0..b {
            for k in 0..3 {
                let others = (0..b).filter(|&j| j != i).map(|j| x.at(j, k));
                let lo = others.clone().fold(f64::INFINITY, f64::min);
                let hi = others.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.at(i, k) >= lo - 1e-12 && r.at(i, k) <= hi + 1e-12);
            }
        }
    }
}
