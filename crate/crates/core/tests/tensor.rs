use ctrl_cnn::seed;
use ctrl_cnn::tensor::{conv1d_same, dropout, softmax_cross_entropy, softmax_rows, Mode, Tensor};
use proptest::prelude::*;

/// Direct zero-padded correlation, indexed the slow way.
fn naive_conv(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let len = x[0].len();
    let k = w[0][0].len();
    let pad = (k - 1) / 2;
    w.iter()
        .zip(b)
        .map(|(wo, &bo)| {
            (0..len)
                .map(|t| {
                    let mut s = bo;
                    for (xi, wi) in x.iter().zip(wo) {
                        for (j, &wij) in wi.iter().enumerate() {
                            let pos = t as isize + j as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                s += wij * xi[pos as usize];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn conv_matches_direct_sum(
        cin in 1usize..4, cout in 1usize..4, half in 0usize..3, len in 1usize..9, seed in any::<u64>()
    ) {
        let k = 2 * half + 1;
        let mut rng = seed::rng(seed);
        let x = Tensor::uniform(&[cin, len], 1.0, &mut rng);
        let w = Tensor::uniform(&[cout, cin, k], 1.0, &mut rng);
        let b = Tensor::uniform(&[cout], 1.0, &mut rng);
        let y = conv1d_same(&x, &w, &b).unwrap();
        prop_assert_eq!(y.shape(), &[cout, len][..]);
        let xs: Vec<Vec<f64>> = x.data().chunks(len).map(<[f64]>::to_vec).collect();
        let ws: Vec<Vec<Vec<f64>>> = w.data().chunks(cin * k).map(|o| o.chunks(k).map(<[f64]>::to_vec).collect()).collect();
        let expect = naive_conv(&xs, &ws, b.data());
        for (got, want) in y.data().iter().zip(expect.concat()) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, seed in any::<u64>(), shift in -500.0f64..500.0) {
        let mut rng = seed::rng(seed);
        let mut t = Tensor::uniform(&[rows, 3], 20.0, &mut rng);
        for v in t.data_mut() {
            *v += shift;
        }
        let p = softmax_rows(&t).unwrap();
        for r in p.data().chunks(3) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

#[test]
fn cross_entropy_against_closed_form() {
    let logits = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[2, 1], &[1, 1]).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expect = ((z.ln() - 3.0) + 3f64.ln()) / 2.0;
    assert!((loss - expect).abs() < 1e-14);
    // gradient of the mean: (p - onehot) / n_tokens
    assert!((grad.data()[2] - (3f64.exp() / z - 1.0) / 2.0).abs() < 1e-14);
    assert!((grad.data()[3] - (1.0 / 3.0) / 2.0).abs() < 1e-14);
}

#[test]
fn masked_positions_get_no_gradient() {
    let logits = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1], &[1, 0]).unwrap();
    let (alone, _) = softmax_cross_entropy(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), &[0], &[1]).unwrap();
    assert_eq!(loss, alone);
    assert!(grad.data()[3..].iter().all(|&g| g == 0.0));
}

#[test]
fn dropout_preserves_expectation() {
    let x = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut rng = seed::rng(31);
    let trials = 10_000;
    let mut sum = [0.0; 4];
    for _ in 0..trials {
        let (y, _) = dropout(&x, 0.55, Mode::Train, &mut rng).unwrap();
        for (s, v) in sum.iter_mut().zip(y.data()) {
            *s += v;
        }
    }
    for (s, v) in sum.iter().zip(x.data()) {
        let mean = s / trials as f64;
        assert!((mean - v).abs() <= 0.02 * v.abs(), "mean {mean} vs {v}");
    }
}

#[test]
fn dropout_is_identity_in_eval() {
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, _) = dropout(&x, 0.55, Mode::Eval, &mut seed::rng(0)).unwrap();
    assert_eq!(y.data(), x.data());
}
