use super::*;
use crate::error::CirError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = gradcheck(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn relu_clamps() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[1.0, 1.0, 1.0]]).unwrap());
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn batch_norm_train_two_samples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[2.0], [4.0]]).unwrap());
    let g = t.constant(Tensor::full(&[1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let (y, stats) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
    // (x − 3) / √(1 + 1e-5)
    let d = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_close(t.value(y).data(), &[-d, d], 1e-15);
    assert_eq!(stats.mean, vec![3.0]);
    assert_eq!(stats.unbiased_var, vec![2.0]);
}

#[test]
fn batch_norm_train_rejects_single_sample() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[2.0, 1.0]]).unwrap());
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        t.batch_norm_train(x, g, b, 1e-5),
        Err(CirError::DegenerateBatch(_))
    ));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
    let y = t.softmax_rows(x, None).unwrap();
    assert_close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

    let x = t.constant(Tensor::from_rows(&[[5.0, 0.0]]).unwrap());
    let y = t.softmax_rows(x, Some(&[false, true])).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 1.0]);

    let x = t.constant(Tensor::from_rows(&[[0.0, 2f64.ln(), 6f64.ln()]]).unwrap());
    let y = t.softmax_rows(x, Some(&[false, true, true])).unwrap();
    assert_close(t.value(y).data(), &[0.0, 0.25, 0.75], 1e-15);
    assert_eq!(t.value(y).data()[0], 0.0);
}

#[test]
fn softmax_fully_masked_row_is_degenerate() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let err = t.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
    assert!(matches!(err, CirError::EmptySupport { sample: 1, .. }), "{err}");
}

#[test]
fn cosine_examples() {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 0.0], &[1.0, 0.0], 1.0),
        (&[1.0, 0.0], &[0.0, 1.0], 0.0),
        (&[1.0, 1.0], &[1.0, 0.0], 1.0 / 2f64.sqrt()),
    ];
    for (a, b, want) in cases {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[a]).unwrap());
        let b = t.constant(Tensor::from_rows(&[b]).unwrap());
        let s = t.cosine_similarity_matrix(a, b).unwrap();
        assert!((t.scalar_value(s) - want).abs() < 1e-15);
    }
}

#[test]
fn cosine_of_zero_row_is_finite() {
    let mut t = Tape::new();
    let a = t.param(Tensor::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap());
    let s = t.cosine_similarity_matrix(a, a).unwrap();
    assert!(t.value(s).is_finite());
    let l = t.sum(s);
    t.backward(l).unwrap();
    assert!(t.grad_tensor(a).is_finite());
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let l = t.cross_entropy(z, &Targets::Hard(vec![0])).unwrap();
    assert!((t.scalar_value(l) - 2f64.ln()).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = rand_tensor(&mut rng, &[4, 3]);
    let labels = vec![2, 0, 1, 1];
    let z = t.constant(logits.clone());
    let hard = t.cross_entropy(z, &Targets::Hard(labels.clone())).unwrap();
    let mut onehot = Tensor::zeros(&[4, 3]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * 3 + y] = 1.0;
    }
    let soft = t.cross_entropy(z, &Targets::Soft(onehot)).unwrap();
    assert_eq!(t.scalar_value(hard), t.scalar_value(soft));

    // direct log-sum-exp evaluation
    let mut want = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    want /= 4.0;
    assert!((t.scalar_value(hard) - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        t.cross_entropy(z, &Targets::Hard(vec![3])),
        Err(CirError::Label { label: 3, classes: 3 })
    ));
}

/// Every primitive's backward rule against central differences.
#[test]
fn every_primitive_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let y = rand_tensor(&mut rng, &[5, 4]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let s = Tensor::scalar(0.7);
    // weights make each check sensitive to every output element
    let probe = rand_tensor(&mut rng, &[5, 4]);

    type Check = Box<dyn Fn(&mut Tape, &[Var], Var) -> crate::Result<Var>>;
    let checks: Vec<(&str, Vec<Tensor>, Check)> = vec![
        ("add", vec![x.clone(), y.clone()], Box::new(|t, v, _| t.add(v[0], v[1]))),
        ("sub", vec![x.clone(), y.clone()], Box::new(|t, v, _| t.sub(v[0], v[1]))),
        ("mul", vec![x.clone(), y.clone()], Box::new(|t, v, _| t.mul(v[0], v[1]))),
        ("add_bias", vec![x.clone(), b.clone()], Box::new(|t, v, _| t.add_bias(v[0], v[1]))),
        ("sub_row", vec![x.clone(), b.clone()], Box::new(|t, v, _| t.sub_row(v[0], v[1]))),
        ("scale", vec![x.clone()], Box::new(|t, v, _| Ok(t.scale(v[0], -1.7)))),
        ("scale_by", vec![x.clone(), s.clone()], Box::new(|t, v, _| t.scale_by(v[0], v[1]))),
        ("exp", vec![x.clone()], Box::new(|t, v, _| Ok(t.exp(v[0])))),
        ("relu", vec![x.clone()], Box::new(|t, v, _| Ok(t.relu(v[0])))),
        ("transpose", vec![x.clone()], Box::new(|t, v, _| {
            let tr = t.transpose(v[0])?;
            t.transpose(tr)
        })),
        ("matmul", vec![x.clone(), w.clone()], Box::new(|t, v, _| {
            let m = t.matmul(v[0], v[1])?;
            let c = t.constant(Tensor::full(&[5, 3], 0.3));
            let m = t.mul(m, m)?;
            t.add(m, c)
        })),
        ("layer_norm", vec![x.clone(), b.clone(), b.clone()], Box::new(|t, v, _| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        })),
        ("batch_norm_train", vec![x.clone(), b.clone(), b.clone()], Box::new(|t, v, _| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })),
        ("batch_norm_eval", vec![x.clone(), b.clone(), b.clone()], Box::new(|t, v, _| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.0, 2.0, 0.5, 1.5], 1e-5)
        })),
        ("softmax_rows", vec![x.clone()], Box::new(|t, v, _| t.softmax_rows(v[0], None))),
        ("softmax_rows_masked", vec![x.clone()], Box::new(|t, v, _| {
            let mask: Vec<bool> = (0..20).map(|k| k % 4 != k / 4 % 4).collect();
            t.softmax_rows(v[0], Some(&mask))
        })),
        ("normalize_rows", vec![x.clone()], Box::new(|t, v, _| t.normalize_rows(v[0], 1e-12))),
        ("cosine", vec![x.clone(), y.clone()], Box::new(|t, v, _| {
            let c = t.cosine_similarity_matrix(v[0], v[1])?;
            let c = t.gather_rows(c, &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4])?;
            t.gather_rows(c, &[0, 1, 2, 3, 4])
        })),
        ("mean_rows", vec![x.clone()], Box::new(|t, v, _| {
            let m = t.mean_rows(v[0])?;
            let z = t.constant(Tensor::zeros(&[5, 4]));
            t.sub_row(z, m)
        })),
        ("gather_rows", vec![x.clone()], Box::new(|t, v, _| t.gather_rows(v[0], &[4, 0, 0, 2, 1]))),
        ("pairwise_sq_dist", vec![x.clone(), y.clone()], Box::new(|t, v, _| {
            let d = t.pairwise_sq_dist(v[0], v[1])?;
            let d = t.gather_rows(d, &[0, 1, 2, 3, 4])?;
            let d4 = t.transpose(d)?;
            let d4 = t.gather_rows(d4, &[0, 1, 2, 3])?;
            t.transpose(d4)
        })),
    ];
    for (name, inputs, f) in checks {
        let probe = probe.clone();
        let r = gradcheck(&inputs, |t, v| {
            let out = f(t, v, v[0])?;
            let shape = t.shape(out).to_vec();
            let n: usize = shape.iter().product();
            let p = t.constant(
                Tensor::new(shape, probe.data().iter().cycle().take(n).cloned().collect()).unwrap(),
            );
            let weighted = t.mul(out, p)?;
            Ok(t.sum(weighted))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        assert!(r.checked > 0, "{name}");
    }

    // scalar reductions
    for (name, f) in [
        ("sum", Box::new(|t: &mut Tape, v: Var| t.sum(v)) as Box<dyn Fn(&mut Tape, Var) -> Var>),
        ("mean", Box::new(|t: &mut Tape, v: Var| t.mean(v))),
        ("sum_squares", Box::new(|t: &mut Tape, v: Var| t.sum_squares(v))),
    ] {
        let r = gradcheck(std::slice::from_ref(&x), |t, v| Ok(f(t, v[0]))).unwrap();
        assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
    }

    let soft = Tensor::from_rows(&[
        [0.2, 0.5, 0.3],
        [1.0, 0.0, 0.0],
        [0.0, 0.4, 0.6],
        [0.5, 0.5, 0.0],
        [0.1, 0.1, 0.8],
    ])
    .unwrap();
    let z = rand_tensor(&mut rng, &[5, 3]);
    let r = gradcheck(std::slice::from_ref(&z), |t, v| t.cross_entropy(v[0], &Targets::Soft(soft.clone()))).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    let r = gradcheck(&[z], |t, v| t.cross_entropy(v[0], &Targets::Hard(vec![0, 2, 1, 1, 0]))).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn shared_leaf_accumulates_both_uses() {
    let mut t = Tape::new();
    let w = t.param(Tensor::from_rows(&[[2.0]]).unwrap());
    let a = t.constant(Tensor::from_rows(&[[3.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[[5.0]]).unwrap());
    let ya = t.matmul(a, w).unwrap();
    let yb = t.matmul(b, w).unwrap();
    let s = t.add(ya, yb).unwrap();
    let l = t.sum(s);
    t.backward(l).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[8.0]);
}

#[test]
fn backward_twice_accumulates_and_reset_reproduces() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let x = t.param(rand_tensor(&mut rng, &[3, 3]));
    let s = t.softmax_rows(x, None).unwrap();
    let q = t.sum_squares(s);
    t.backward(q).unwrap();
    let g1 = t.grad(x).unwrap().to_vec();
    t.backward(q).unwrap();
    let g2 = t.grad(x).unwrap().to_vec();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(*b, a + a);
    }
    t.zero_grad();
    assert!(t.grad(x).is_none());
    t.backward(q).unwrap();
    assert_eq!(t.grad(x).unwrap(), g1.as_slice());
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2, 2]));
    assert!(t.backward(x).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_masked_entries_zero(
        vals in proptest::collection::vec(-1e3f64..1e3, 12),
        mask_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask_bits.clone();
        for i in 0..3 {
            mask[i * 4 + i] = true;
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        let v = t.value(y);
        for i in 0..3 {
            let s: f64 = v.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                if !mask[i * 4 + j] {
                    prop_assert_eq!(v.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn batch_norm_train_standardizes_each_feature(
        vals in proptest::collection::vec(-50f64..50.0, 6..30),
    ) {
        let m = vals.len() / 3;
        prop_assume!(m >= 2);
        let data = vals[..m * 3].to_vec();
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(m, 3, data).unwrap());
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let (y, stats) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
        let out = t.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..m).map(|i| out.at(i, j)).collect();
            let mu = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / m as f64;
            let biased = stats.unbiased_var[j] * (m - 1) as f64 / m as f64;
            prop_assert!(mu.abs() < 1e-10);
            prop_assert!((var - biased / (biased + 1e-5)).abs() < 1e-6);
        }
    }
}
