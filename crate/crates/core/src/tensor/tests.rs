use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Mode};
use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference gradient of `f` with respect to every input element,
/// compared against autodiff. `f` builds a scalar from leaf vars.
fn check_grads(
    inputs: &[Tensor<f64>],
    f: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
    tol: f64,
) {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |perturbed: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).item()
    };
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient");
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < tol, "input {i} elem {j}: autodiff {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn conv1d_identity_kernel() {
    let tape = Tape::new();
    let x = tape.constant(t64(&[1, 3, 1], &[1.0, 0.0, 0.0]));
    let w = tape.constant(t64(&[1, 1, 1], &[1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = ops::conv1d(x, w, b, 1).unwrap();
    assert_eq!(y.value().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn conv1d_ones_kernel_matches_sliding_window() {
    // Zero-padded window sums of [1,2,3,4]: [0+1+2, 1+2+3, 2+3+4, 3+4+0].
    let tape = Tape::new();
    let x = tape.constant(t64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(Tensor::ones(&[3, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = ops::conv1d(x, w, b, 1).unwrap();
    assert_eq!(y.value().data(), &[3.0, 6.0, 9.0, 7.0]);
}

#[test]
fn conv1d_stride_two_halves_time() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::zeros(&[2, 100, 40]));
    let w = tape.constant(Tensor::zeros(&[3, 40, 64]));
    let b = tape.constant(Tensor::zeros(&[64]));
    let y = ops::conv1d(x, w, b, 2).unwrap();
    assert_eq!(y.shape(), vec![2, 50, 64]);
    assert_eq!(ops::conv_out_len(101, 2), 51);
}

#[test]
fn conv1d_rejects_channel_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 5, 3]));
    let w = tape.constant(Tensor::zeros(&[3, 4, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(ops::conv1d(x, w, b, 1), Err(crate::Error::Contract(_))));
    let w_even = tape.constant(Tensor::zeros(&[2, 3, 2]));
    assert!(ops::conv1d(x, w_even, b, 1).is_err());
}

#[test]
fn conv1d_strided_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (bsz, len, cin, cout, k, stride) = (2, 7, 3, 4, 3, 2);
    let xt = random(&[bsz, len, cin], &mut rng);
    let wt = random(&[k, cin, cout], &mut rng);
    let bt = random(&[cout], &mut rng);
    let tape = Tape::new();
    let y = ops::conv1d(tape.constant(xt.clone()), tape.constant(wt.clone()), tape.constant(bt.clone()), stride)
        .unwrap()
        .value();
    let out_len = len.div_ceil(2);
    assert_eq!(y.shape(), &[bsz, out_len, cout]);
    for b in 0..bsz {
        for t in 0..out_len {
            for o in 0..cout {
                let mut acc = bt.data()[o];
                for kk in 0..k {
                    let src = (t * stride + kk) as isize - 1;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    for c in 0..cin {
                        acc += xt.data()[(b * len + src as usize) * cin + c]
                            * wt.data()[(kk * cin + c) * cout + o];
                    }
                }
                let got = y.data()[(b * out_len + t) * cout + o];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn separable_identity_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 6, 4], &mut rng);
    let mut dw = Tensor::<f64>::zeros(&[3, 4]);
    for c in 0..4 {
        dw.data_mut()[4 + c] = 1.0;
    }
    let mut pw = Tensor::<f64>::zeros(&[4, 4]);
    for c in 0..4 {
        pw.data_mut()[c * 4 + c] = 1.0;
    }
    let tape = Tape::new();
    let y = ops::separable_conv1d(
        tape.constant(x.clone()),
        tape.constant(dw),
        tape.constant(Tensor::zeros(&[4])),
        tape.constant(pw),
        tape.constant(Tensor::zeros(&[4])),
    )
    .unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn separable_matches_per_channel_conv_then_pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 5, 2], &mut rng);
    let dw = random(&[3, 2], &mut rng);
    let dwb = random(&[2], &mut rng);
    let pw = random(&[2, 3], &mut rng);
    let pwb = random(&[3], &mut rng);
    let tape = Tape::new();
    let y = ops::separable_conv1d(
        tape.constant(x.clone()),
        tape.constant(dw.clone()),
        tape.constant(dwb.clone()),
        tape.constant(pw.clone()),
        tape.constant(pwb.clone()),
    )
    .unwrap()
    .value();

    // Oracle: each channel through a single-channel conv1d, then a K=1 conv1d.
    let mut filtered = vec![0.0; 5 * 2];
    for c in 0..2 {
        let xc: Vec<f64> = (0..5).map(|t| x.data()[t * 2 + c]).collect();
        let wc: Vec<f64> = (0..3).map(|k| dw.data()[k * 2 + c]).collect();
        let tape = Tape::new();
        let yc = ops::conv1d(
            tape.constant(t64(&[1, 5, 1], &xc)),
            tape.constant(t64(&[3, 1, 1], &wc)),
            tape.constant(t64(&[1], &[dwb.data()[c]])),
            1,
        )
        .unwrap()
        .value();
        for t in 0..5 {
            filtered[t * 2 + c] = yc.data()[t];
        }
    }
    let tape = Tape::new();
    let oracle = ops::conv1d(
        tape.constant(t64(&[1, 5, 2], &filtered)),
        tape.constant(pw.clone().reshape(&[1, 2, 3]).unwrap()),
        tape.constant(pwb),
        1,
    )
    .unwrap()
    .value();
    assert!(y.max_abs_diff(&oracle) < 1e-6);
}

#[test]
fn separable_parameter_count() {
    let (k, c, cout) = (9, 64, 64);
    assert_eq!(k * c + c * cout, 4672);
}

fn bn_apply(x: Tensor<f64>, gamma: f64, beta: f64, mode: Mode) -> Tensor<f64> {
    let ch = x.shape()[2];
    let mut rm = Tensor::zeros(&[ch]);
    let mut rv = Tensor::ones(&[ch]);
    let tape = Tape::new();
    let y = ops::batch_norm(
        tape.constant(x),
        tape.constant(Tensor::full(&[ch], gamma)),
        tape.constant(Tensor::full(&[ch], beta)),
        &mut rm,
        &mut rv,
        mode,
    )
    .unwrap();
    (*ops::relu(y).unwrap().value()).clone()
}

#[test]
fn batch_norm_relu_constant_input_is_zero() {
    let y = bn_apply(Tensor::full(&[2, 3, 2], 4.0), 1.0, 0.0, Mode::Train);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_relu_two_values() {
    // {1,3}: mean 2, biased var 1, so normalised to {−1, 1}; ReLU clips −1.
    let y = bn_apply(t64(&[1, 2, 1], &[1.0, 3.0]), 1.0, 0.0, Mode::Train);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn batch_norm_relu_beta_shift_passes() {
    let y = bn_apply(Tensor::full(&[2, 2, 3], -7.0), 1.0, 5.0, Mode::Train);
    assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
}

#[test]
fn batch_norm_eval_before_training_uses_unit_stats() {
    let x = t64(&[1, 2, 1], &[0.5, -2.0]);
    let y = bn_apply(x, 1.0, 0.0, Mode::Eval);
    let expect = 0.5 / (1.0 + ops::BN_EPS).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-12);
    assert_eq!(y.data()[1], 0.0);
}

#[test]
fn batch_norm_train_needs_two_positions() {
    let tape = Tape::new();
    let mut rm = Tensor::<f64>::zeros(&[1]);
    let mut rv = Tensor::ones(&[1]);
    let r = ops::batch_norm(
        tape.constant(Tensor::zeros(&[1, 1, 1])),
        tape.constant(Tensor::ones(&[1])),
        tape.constant(Tensor::zeros(&[1])),
        &mut rm,
        &mut rv,
        Mode::Train,
    );
    assert!(r.is_err());
}

#[test]
fn batch_norm_updates_running_stats() {
    let tape = Tape::new();
    let mut rm = Tensor::<f64>::zeros(&[1]);
    let mut rv = Tensor::ones(&[1]);
    ops::batch_norm(
        tape.constant(t64(&[1, 2, 1], &[1.0, 3.0])),
        tape.constant(Tensor::ones(&[1])),
        tape.constant(Tensor::zeros(&[1])),
        &mut rm,
        &mut rv,
        Mode::Train,
    )
    .unwrap();
    assert!((rm.data()[0] - 0.2).abs() < 1e-12);
    // unbiased variance of {1,3} is 2
    assert!((rv.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_norm_train_output_is_standardised(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 20, 4], &mut rng).map(|v| v * scale + shift);
        let mut rm = Tensor::zeros(&[4]);
        let mut rv = Tensor::ones(&[4]);
        let tape = Tape::new();
        let y = ops::batch_norm(
            tape.constant(x),
            tape.constant(Tensor::ones(&[4])),
            tape.constant(Tensor::zeros(&[4])),
            &mut rm, &mut rv, Mode::Train,
        ).unwrap().value();
        for c in 0..4 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv1d_identity_kernel_is_identity(len in 1usize..20, ch in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, len, ch], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, ch, ch]);
        for c in 0..ch {
            w.data_mut()[(ch + c) * ch + c] = 1.0;
        }
        let tape = Tape::new();
        let y = ops::conv1d(tape.constant(x.clone()), tape.constant(w), tape.constant(Tensor::zeros(&[ch])), 1).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }

    #[test]
    fn separable_equals_explicit_composition(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 9, 3], &mut rng);
        let dw = random(&[5, 3], &mut rng);
        let pw = random(&[3, 2], &mut rng);
        let tape = Tape::new();
        let y = ops::separable_conv1d(
            tape.constant(x.clone()), tape.constant(dw.clone()), tape.constant(Tensor::zeros(&[3])),
            tape.constant(pw.clone()), tape.constant(Tensor::zeros(&[2])),
        ).unwrap().value();
        for b in 0..2 {
            for t in 0..9 {
                for o in 0..2 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        let mut f = 0.0;
                        for k in 0..5 {
                            let src = t as isize + k as isize - 2;
                            if (0..9).contains(&src) {
                                f += x.data()[(b * 9 + src as usize) * 3 + c] * dw.data()[k * 3 + c];
                            }
                        }
                        acc += f * pw.data()[c * 2 + o];
                    }
                    prop_assert!((y.data()[(b * 9 + t) * 2 + o] - acc).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sgd_with_zero_lr_is_bit_identical(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("w", random(&[4, 3], &mut rng).cast::<f32>());
        store.get_mut(0).grad = random(&[4, 3], &mut rng).cast();
        let before = store.get(0).value.clone();
        let mut opt = Sgd::new(OptimizerState { lr: 0.0, momentum: 0.9, weight_decay: 1e-4, velocity: Default::default() });
        opt.step(&mut store, |_| true).unwrap();
        prop_assert_eq!(&store.get(0).value, &before);
    }
}

#[test]
fn backward_of_dot_product_is_the_constant() {
    let tape = Tape::new();
    let w = tape.leaf(t64(&[3], &[0.5, -1.0, 2.0]));
    let x = tape.constant(t64(&[3], &[4.0, 5.0, 6.0]));
    let loss = ops::sum(ops::mul(w, x).unwrap());
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::<f64>::ones(&[2]));
    assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_until_cleared() {
    let mut store = ParamStore::new();
    store.add("w", t64(&[2], &[1.0, 2.0]));
    let run = |store: &mut ParamStore<f64>| {
        let tape = Tape::new();
        let w = tape.param(store, 0);
        let x = tape.constant(t64(&[2], &[3.0, -1.0]));
        let loss = ops::sum(ops::mul(w, x).unwrap());
        tape.backward_into(loss, store).unwrap();
    };
    run(&mut store);
    let once = store.get(0).grad.clone();
    run(&mut store);
    assert_eq!(store.get(0).grad.data(), &[2.0 * once.data()[0], 2.0 * once.data()[1]]);
    store.zero_grad();
    assert!(store.get(0).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn sgd_reference_steps() {
    let mk = |lr, momentum, wd| Sgd::<f64>::new(OptimizerState::new(lr, momentum, wd).unwrap());
    let mut store = ParamStore::new();
    store.add("p", t64(&[1], &[1.0]));

    // zero grad, zero buffer, no decay
    let mut opt = mk(0.1, 0.9, 0.0);
    opt.step(&mut store, |_| true).unwrap();
    assert_eq!(store.get(0).value.data(), &[1.0]);

    // plain step
    store.get_mut(0).grad = t64(&[1], &[1.0]);
    let mut opt = mk(0.1, 0.0, 0.0);
    opt.step(&mut store, |_| true).unwrap();
    assert!((store.get(0).value.data()[0] - 0.9).abs() < 1e-12);

    // momentum: v1 = 1, p = -0.1; v2 = 0.9 + 1 = 1.9, p = -0.29
    store.get_mut(0).value = t64(&[1], &[0.0]);
    let mut opt = mk(0.1, 0.9, 0.0);
    opt.step(&mut store, |_| true).unwrap();
    assert!((store.get(0).value.data()[0] + 0.1).abs() < 1e-12);
    opt.step(&mut store, |_| true).unwrap();
    assert!((store.get(0).value.data()[0] + 0.29).abs() < 1e-12);
}

#[test]
fn sgd_aborts_on_nan_gradient() {
    let mut store = ParamStore::new();
    store.add("a", t64(&[1], &[1.0]));
    store.add("b", t64(&[1], &[1.0]));
    store.get_mut(0).grad = t64(&[1], &[1.0]);
    store.get_mut(1).grad = t64(&[1], &[f64::NAN]);
    let mut opt = Sgd::new(OptimizerState::new(0.1, 0.9, 0.0).unwrap());
    let err = opt.step(&mut store, |_| true).unwrap_err();
    assert!(matches!(err, crate::Error::NonFiniteGradient(ref n) if n == "b"));
    assert_eq!(store.get(0).value.data(), &[1.0]);
    // frozen parameters are not inspected or updated
    opt.step(&mut store, |n| n == "a").unwrap();
    assert_eq!(store.get(1).value.data(), &[1.0]);
}

#[test]
fn optimizer_rejects_non_positive_lr() {
    assert!(OptimizerState::<f32>::new(0.0, 0.9, 0.0).is_err());
}

#[test]
fn attention_zero_query_key_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&[2, 5, 8], &mut rng);
    let zeros = Tensor::zeros(&[2, 5, 8]);
    let tape = Tape::new();
    let out = ops::attention(tape.constant(zeros.clone()), tape.constant(zeros), tape.constant(v.clone()), 2, 4.0)
        .unwrap()
        .value();
    for b in 0..2 {
        for c in 0..8 {
            let mean: f64 = (0..5).map(|t| v.data()[(b * 5 + t) * 8 + c]).sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((out.data()[(b * 5 + t) * 8 + c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_matches_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (q, k, v) = (random(&[1, 3, 4], &mut rng), random(&[1, 3, 4], &mut rng), random(&[1, 3, 4], &mut rng));
    let divisor = 2.0;
    let tape = Tape::new();
    let out = ops::attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), 2, divisor)
        .unwrap()
        .value();
    let weights = ops::attention_weights(&q, &k, 2, divisor).unwrap();
    for h in 0..2 {
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|d| q.data()[i * 4 + h * 2 + d] * k.data()[j * 4 + h * 2 + d]).sum::<f64>() / divisor)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let row_sum: f64 = (0..3).map(|j| weights.data()[(h * 3 + i) * 3 + j]).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for d in 0..2 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * v.data()[j * 4 + h * 2 + d]).sum();
                assert!((out.data()[i * 4 + h * 2 + d] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let q = Tensor::<f64>::zeros(&[1, 2, 6]);
    assert!(matches!(ops::attention_weights(&q, &q, 4, 1.0), Err(crate::Error::Config(_))));
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tol = 1e-6;

    check_grads(
        &[random(&[2, 5, 3], &mut rng), random(&[3, 3, 2], &mut rng), random(&[2], &mut rng)],
        &|v| ops::sum(ops::mul(ops::conv1d(v[0], v[1], v[2], 2).unwrap(), ops::conv1d(v[0], v[1], v[2], 2).unwrap()).unwrap()),
        tol,
    );
    check_grads(
        &[random(&[2, 6, 3], &mut rng), random(&[5, 3], &mut rng), random(&[3], &mut rng), random(&[3, 2], &mut rng), random(&[2], &mut rng)],
        &|v| {
            let y = ops::separable_conv1d(v[0], v[1], v[2], v[3], v[4]).unwrap();
            ops::sum(ops::mul(y, y).unwrap())
        },
        tol,
    );
    let probe = random(&[2, 4, 3], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let probe = probe.clone();
        check_grads(
            &[random(&[2, 4, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)],
            &move |v| {
                let mut rm = Tensor::full(&[3], 0.1);
                let mut rv = Tensor::full(&[3], 0.7);
                let y = ops::batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, mode).unwrap();
                let p = v[0].tape().constant(probe.clone());
                ops::sum(ops::mul(y, p).unwrap())
            },
            tol,
        );
    }
    let probe = random(&[2, 4, 6], &mut rng);
    check_grads(
        &[random(&[2, 4, 6], &mut rng), random(&[2, 4, 6], &mut rng), random(&[2, 4, 6], &mut rng)],
        &move |v| {
            let y = ops::attention(v[0], v[1], v[2], 3, 2.0).unwrap();
            let p = v[0].tape().constant(probe.clone());
            ops::sum(ops::mul(y, p).unwrap())
        },
        tol,
    );
    let probe = random(&[2, 5], &mut rng);
    check_grads(
        &[random(&[2, 3, 5], &mut rng)],
        &move |v| {
            let y = ops::softmax(ops::mean_time(v[0]).unwrap()).unwrap();
            let p = v[0].tape().constant(probe.clone());
            ops::sum(ops::mul(y, p).unwrap())
        },
        tol,
    );
    let targets = t64(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    check_grads(
        &[random(&[2, 3], &mut rng)],
        &move |v| ops::cross_entropy(ops::softmax(v[0]).unwrap(), &targets).unwrap(),
        tol,
    );
    check_grads(
        &[random(&[2, 4, 3], &mut rng), random(&[2, 3, 3], &mut rng)],
        &|v| ops::mse(ops::narrow_time(v[0], 3).unwrap(), v[1]).unwrap(),
        tol,
    );
    check_grads(
        &[random(&[3, 2, 2], &mut rng), random(&[3, 2, 2], &mut rng)],
        &|v| ops::mse(ops::select_rows(v[0], &[2, 0, 2]).unwrap(), v[1]).unwrap(),
        tol,
    );
    check_grads(
        &[random(&[2, 4, 3], &mut rng), random(&[2, 4, 3], &mut rng)],
        &|v| ops::batch_mean_sq_norm(ops::sub(ops::mean_time(v[0]).unwrap(), ops::mean_time(v[1]).unwrap()).unwrap()).unwrap(),
        tol,
    );
    check_grads(
        &[random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng)],
        &|v| ops::local_contrastive(v[0], v[1], 0.5).unwrap(),
        tol,
    );
    check_grads(
        &[random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)],
        &|v| {
            let y = ops::relu(ops::add_bias(ops::linear(v[0], v[1]).unwrap(), v[2]).unwrap()).unwrap();
            let s = ops::sum(ops::mul(y, y).unwrap());
            let d = ops::sum(ops::scale(ops::add(v[0], v[0]).unwrap(), 0.3));
            ops::weighted_sum(&[(s, 0.7), (d, -1.5)]).unwrap()
        },
        tol,
    );
}

#[test]
fn local_contrastive_blocks_cover_many_rows() {
    // More rows than one block exercises the blocked accumulation path.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n_items = 3;
    let frames = 100;
    let a = random(&[n_items, frames, 4], &mut rng);
    let b = random(&[n_items, frames, 4], &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let loss = ops::local_contrastive(va, vb, 0.5).unwrap();
    let grads = tape.backward(loss).unwrap();

    let n = n_items * frames;
    let unit = |t: &Tensor<f64>, i: usize| {
        let r = &t.data()[i * 4..(i + 1) * 4];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt() + ops::NORM_EPS;
        r.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let mut expect = 0.0;
    for i in 0..n {
        let ai = unit(&a, i);
        let sims: Vec<f64> = (0..n)
            .map(|j| unit(&b, j).iter().zip(&ai).map(|(x, y)| x * y).sum::<f64>() / 0.5)
            .collect();
        let z: f64 = sims.iter().map(|s| s.exp()).sum();
        expect += -(sims[i].exp() / z).ln();
    }
    expect /= n as f64;
    assert!((loss.item() - expect).abs() < 1e-10);
    assert!(grads.get(va).unwrap().is_finite() && grads.get(vb).unwrap().is_finite());
}

#[test]
fn replayed_relu_gates_override_input_signs() {
    let rec = Tape::<f64>::recording_gates();
    let x = rec.leaf(Tensor::from_f64(&[4], &[1.0, -1.0, 2.0, -2.0]).unwrap());
    ops::relu(x).unwrap();
    let gates = rec.take_gates();
    assert_eq!(gates.len(), 1);

    let tape = Tape::<f64>::replaying_gates(gates.clone());
    let x = tape.leaf(Tensor::from_f64(&[4], &[-1.0, 1.0, 3.0, -3.0]).unwrap());
    let y = ops::relu(x).unwrap();
    assert_eq!(y.value().data(), &[-1.0, 0.0, 3.0, 0.0]);
    let grads = tape.backward(ops::sum(y)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

    let tape = Tape::<f64>::replaying_gates(gates);
    assert!(ops::relu(tape.leaf(Tensor::zeros(&[3]))).is_err());
}
