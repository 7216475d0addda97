//! Finite-difference verification of every differentiable op.
//!
//! Each check compares analytic gradients against central differences of the
//! recorded forward computation. f32 forward math limits the achievable
//! agreement; tolerances are set accordingly (the high-precision checks for
//! the four model losses live in the downstream crate's acceptance suite,
//! against f64 reference formulas).

use gradtape::nn::SplitMix64;
use gradtape::{Tape, Tensor, Var};

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}

/// Check d(scalar f)/d(inputs[i]) for every element of every input.
fn check_grads(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var, tol: f32) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars);
    assert_eq!(out.shape(), vec![1], "check_grads needs a scalar output");
    let grads = tape.backward(&out);

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[k])
            .unwrap_or_else(|| panic!("no gradient for input {k}"))
            .clone();
        for i in 0..input.numel() {
            let h = 1e-2 * input.data()[i].abs().max(0.5);
            let eval = |delta: f32| -> f32 {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            let mut t2 = t.clone();
                            t2.data_mut()[i] += delta;
                            tape.input(t2)
                        } else {
                            tape.input(t.clone())
                        }
                    })
                    .collect();
                f(&tape, &vars).scalar_value()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs();
            let scale = 1.0f32.max(fd.abs()).max(an.abs());
            assert!(
                err <= tol * scale,
                "input {k} elem {i}: analytic {an} vs fd {fd} (err {err})"
            );
        }
    }
}

fn weights_for(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = SplitMix64::new(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], 0.5, 1.5);
    let w = weights_for(&mut rng, &[3, 4]);
    for op in ["add", "sub", "mul", "div"] {
        let w = w.clone();
        let op = op.to_string();
        check_grads(
            &[a.clone(), b.clone()],
            move |_t, v| {
                let y = match op.as_str() {
                    "add" => v[0].add(&v[1]),
                    "sub" => v[0].sub(&v[1]),
                    "mul" => v[0].mul(&v[1]),
                    _ => v[0].div(&v[1]),
                };
                y.weighted_sum(&w)
            },
            1e-2,
        );
    }
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = SplitMix64::new(2);
    let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
    let w = weights_for(&mut rng, &[2, 5]);
    for op in ["neg", "scale", "square", "silu", "gelu", "relu"] {
        let w = w.clone();
        let op = op.to_string();
        check_grads(
            &[a.clone()],
            move |_t, v| {
                let y = match op.as_str() {
                    "neg" => v[0].neg(),
                    "scale" => v[0].scale(1.7),
                    "square" => v[0].square(),
                    "silu" => v[0].silu(),
                    "gelu" => v[0].gelu(),
                    _ => v[0].relu(),
                };
                y.weighted_sum(&w)
            },
            2e-2, // relu kinks near zero make FD noisy
        );
    }
}

#[test]
fn matmul_all_transpose_flags() {
    let mut rng = SplitMix64::new(3);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let a = rand_tensor(&mut rng, &a_shape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &b_shape, -1.0, 1.0);
        let w = weights_for(&mut rng, &[3, 5]);
        check_grads(
            &[a, b],
            move |_t, v| v[0].matmul(&v[1], ta, tb).weighted_sum(&w),
            1e-2,
        );
    }
}

#[test]
fn matmul_matches_naive() {
    let mut rng = SplitMix64::new(4);
    let a = rand_tensor(&mut rng, &[7, 9], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[9, 5], -1.0, 1.0);
    let tape = Tape::new();
    let out = tape
        .constant(a.clone())
        .matmul(&tape.constant(b.clone()), false, false)
        .value();
    for i in 0..7 {
        for j in 0..5 {
            let mut s = 0.0f32;
            for k in 0..9 {
                s += a.at2(i, k) * b.at2(k, j);
            }
            assert!((out.at2(i, j) - s).abs() < 1e-4);
        }
    }
}

#[test]
fn shape_ops() {
    let mut rng = SplitMix64::new(5);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w_t = weights_for(&mut rng, &[4, 3]);
    check_grads(
        &[a.clone()],
        move |_t, v| v[0].transpose2d().weighted_sum(&w_t),
        1e-2,
    );
    let w_r = weights_for(&mut rng, &[2, 6]);
    check_grads(
        &[a.clone()],
        move |_t, v| v[0].reshape(&[2, 6]).weighted_sum(&w_r),
        1e-2,
    );
    let w_s = weights_for(&mut rng, &[3, 2]);
    check_grads(
        &[a.clone()],
        move |_t, v| v[0].slice_cols(1, 2).weighted_sum(&w_s),
        1e-2,
    );
    let b = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let w_c = weights_for(&mut rng, &[3, 6]);
    check_grads(
        &[a.clone(), b],
        move |_t, v| Var::concat_cols(&[&v[0], &v[1]]).weighted_sum(&w_c),
        1e-2,
    );
    let c = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let d = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let w_k = weights_for(&mut rng, &[2, 4]);
    check_grads(
        &[c, d],
        move |_t, v| Var::stack_rows(&[&v[0], &v[1]]).weighted_sum(&w_k),
        1e-2,
    );
}

#[test]
fn bias_and_reductions() {
    let mut rng = SplitMix64::new(6);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let w = weights_for(&mut rng, &[3, 4]);
    check_grads(
        &[a.clone(), b],
        move |_t, v| v[0].add_row(&v[1]).weighted_sum(&w),
        1e-2,
    );
    check_grads(&[a.clone()], |_t, v| v[0].sum_all(), 1e-2);
    check_grads(&[a.clone()], |_t, v| v[0].mean_all(), 1e-2);
}

#[test]
fn softmax_and_norms() {
    let mut rng = SplitMix64::new(7);
    let a = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let w = weights_for(&mut rng, &[3, 5]);
    {
        let w = w.clone();
        check_grads(
            &[a.clone()],
            move |_t, v| v[0].softmax_rows().weighted_sum(&w),
            1e-2,
        );
    }
    {
        let w = w.clone();
        check_grads(
            &[a.clone()],
            move |_t, v| v[0].log_softmax_rows().weighted_sum(&w),
            1e-2,
        );
    }
    {
        let w = w.clone();
        check_grads(
            &[a.clone()],
            move |_t, v| v[0].l2_normalize_rows().weighted_sum(&w),
            1e-2,
        );
    }
    let gamma = rand_tensor(&mut rng, &[5], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[5], -0.5, 0.5);
    check_grads(
        &[a, gamma, beta],
        move |_t, v| v[0].layer_norm(&v[1], &v[2], 1e-5).weighted_sum(&w),
        1e-2,
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = SplitMix64::new(8);
    let a = rand_tensor(&mut rng, &[4, 7], -3.0, 3.0);
    let tape = Tape::new();
    let p = tape.constant(a).softmax_rows().value();
    for r in 0..4 {
        let s: f32 = (0..7).map(|c| p.at2(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn conv2d_grad_and_value() {
    let mut rng = SplitMix64::new(9);
    let x = rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = rand_tensor(&mut rng, &[3], -0.2, 0.2);
    let w = weights_for(&mut rng, &[3, 5, 5]);
    check_grads(
        &[x.clone(), wt.clone(), bias.clone()],
        move |_t, v| v[0].conv2d(&v[1], &v[2], 1, 1).weighted_sum(&w),
        1e-2,
    );

    // Value vs naive loop.
    let tape = Tape::new();
    let out = tape
        .constant(x.clone())
        .conv2d(&tape.constant(wt.clone()), &tape.constant(bias.clone()), 1, 1)
        .value();
    for co in 0..3 {
        for oy in 0..5 {
            for ox in 0..5 {
                let mut s = bias.data()[co];
                for ci in 0..2 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let iy = oy as isize + dy - 1;
                            let ix = ox as isize + dx - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                * wt.data()[((co * 2 + ci) * 3 + dy as usize) * 3 + dx as usize];
                        }
                    }
                }
                let got = out.data()[(co * 5 + oy) * 5 + ox];
                assert!((got - s).abs() < 1e-4, "conv value mismatch at {co},{oy},{ox}");
            }
        }
    }

    // Strided variant.
    let w2 = weights_for(&mut rng, &[3, 3, 3]);
    check_grads(
        &[x, wt, bias],
        move |_t, v| v[0].conv2d(&v[1], &v[2], 2, 1).weighted_sum(&w2),
        1e-2,
    );
}

#[test]
fn spatial_ops() {
    let mut rng = SplitMix64::new(10);
    let x = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let w = weights_for(&mut rng, &[2, 6, 6]);
    check_grads(
        &[x.clone()],
        move |_t, v| v[0].upsample_nearest_2x().weighted_sum(&w),
        1e-2,
    );
    let y = rand_tensor(&mut rng, &[1, 3, 3], -1.0, 1.0);
    let w2 = weights_for(&mut rng, &[3, 3, 3]);
    check_grads(
        &[x.clone(), y],
        move |_t, v| v[0].concat_channels(&v[1]).weighted_sum(&w2),
        1e-2,
    );
    let w3 = weights_for(&mut rng, &[9, 2]);
    check_grads(
        &[x.clone()],
        move |_t, v| v[0].chw_to_tokens().weighted_sum(&w3),
        1e-2,
    );
    let t = rand_tensor(&mut rng, &[9, 2], -1.0, 1.0);
    let w4 = weights_for(&mut rng, &[2, 3, 3]);
    check_grads(
        &[t],
        move |_t, v| v[0].tokens_to_chw(3, 3).weighted_sum(&w4),
        1e-2,
    );
    let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let w5 = weights_for(&mut rng, &[2, 3, 3]);
    check_grads(
        &[x, gamma, beta],
        move |_t, v| v[0].group_norm(2, &v[1], &v[2], 1e-5).weighted_sum(&w5),
        1e-2,
    );
}

#[test]
fn fused_losses_grad() {
    let mut rng = SplitMix64::new(11);
    let z = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    check_grads(
        &[z.clone()],
        |_t, v| v[0].infonce_pairs(0.3, true),
        1e-2,
    );
    check_grads(&[z], |_t, v| v[0].infonce_pairs(0.5, false), 1e-2);

    let anchors = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let texts = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let pos = Tensor::from_vec(&[2, 4], vec![1., 1., 0., 0., 0., 0., 1., 1.]);
    check_grads(
        &[anchors, texts],
        move |_t, v| v[0].text_nce(&v[1], &pos, 0.4),
        1e-2,
    );

    let maps = Tensor::from_fn(&[2, 9], |_| rng.range(0.1, 0.9));
    let masks = Tensor::from_fn(&[2, 9], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    for per_pixel in [false, true] {
        let masks = masks.clone();
        check_grads(
            &[maps.clone()],
            move |_t, v| v[0].focal_dice(&masks, 0.25, 2.0, per_pixel, &[true, true]),
            1e-2,
        );
    }

    let pred = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check_grads(&[pred], move |_t, v| v[0].mse_to(&target), 1e-2);
}

#[test]
fn frozen_params_receive_no_grad() {
    use gradtape::nn::{Linear, ParamStore};
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(12);
    let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
    lin.weight.set_trainable(false);

    let tape = Tape::new();
    let x = tape.input(rand_tensor(&mut rng, &[2, 3], -1.0, 1.0));
    let y = lin.forward(&tape, &x);
    let loss = y.square().mean_all();
    let grads = tape.backward(&loss);
    assert!(grads.param(&lin.weight).is_none(), "frozen weight got a gradient");
    assert!(grads.param(&lin.bias).is_some(), "trainable bias missing gradient");
    assert!(grads.wrt(&x).is_some());
}

#[test]
fn backward_accumulates_shared_nodes() {
    let tape = Tape::new();
    let x = tape.input(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    // y = x + x => dy/dx = 2
    let y = x.add(&x).sum_all();
    let grads = tape.backward(&y);
    assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn add_channels_grad() {
    let mut rng = SplitMix64::new(13);
    let x = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let w = weights_for(&mut rng, &[3, 2, 2]);
    check_grads(
        &[x, b],
        move |_t, v| v[0].add_channels(&v[1]).weighted_sum(&w),
        1e-2,
    );
}
