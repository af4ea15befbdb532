//! Independent oracles for the tensor engine: naive loop references for
//! matmul / reduce / conv2d and central finite differences for gradients.

use gradtape::{grad_check, Graph, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Triple-loop matrix product reference.
fn matmul_loops(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Quadruple-loop cross-correlation reference.
fn conv2d_loops(
    input: &[f64],
    kernels: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iv = input[ci * h * w + (oy * stride + ky) * w + ox * stride + kx];
                            let kv = kernels[co * c_in * kh * kw + ci * kh * kw + ky * kw + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(m, k, n) in &[(3, 4, 2), (1, 1, 1), (5, 7, 3), (8, 8, 8)] {
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let got = Tensor::constant(&[m, k], a.clone())
            .unwrap()
            .matmul(&Tensor::constant(&[k, n], b.clone()).unwrap())
            .unwrap();
        let want = matmul_loops(&a, &b, m, k, n);
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-12, "matmul {m}x{k}x{n}: {g} vs {w}");
        }
    }
}

#[test]
fn reduce_sum_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = rand_vec(&mut rng, 12);
    let t = Tensor::constant(&[4, 3], data.clone()).unwrap();
    let s0 = t.sum_axis(0).unwrap();
    for j in 0..3 {
        let want: f64 = (0..4).map(|i| data[i * 3 + j]).sum();
        assert!((s0.data()[j] - want).abs() <= 1e-12);
    }
    let s1 = t.sum_axis(1).unwrap();
    for i in 0..4 {
        let want: f64 = (0..3).map(|j| data[i * 3 + j]).sum();
        assert!((s1.data()[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn conv2d_matches_quadruple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(c_in, h, w, c_out, kh, kw, stride) in &[
        (1usize, 5usize, 5usize, 1usize, 3usize, 3usize, 1usize),
        (2, 6, 7, 3, 3, 2, 2),
        (3, 8, 8, 2, 3, 3, 2),
    ] {
        let input = rand_vec(&mut rng, c_in * h * w);
        let kernels = rand_vec(&mut rng, c_out * c_in * kh * kw);
        let got = Tensor::constant(&[c_in, h, w], input.clone())
            .unwrap()
            .conv2d(
                &Tensor::constant(&[c_out, c_in, kh, kw], kernels.clone()).unwrap(),
                stride,
            )
            .unwrap();
        let want = conv2d_loops(&input, &kernels, c_in, h, w, c_out, kh, kw, stride);
        assert_eq!(got.shape(), &[c_out, (h - kh) / stride + 1, (w - kw) / stride + 1]);
        for (g, v) in got.data().iter().zip(want.iter()) {
            assert!((g - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_vec(&mut rng, 24);
    let b = rand_vec(&mut rng, 24);
    let run = || {
        let x = Tensor::constant(&[4, 6], a.clone()).unwrap();
        let y = Tensor::constant(&[4, 6], b.clone()).unwrap();
        x.mul(&y)
            .unwrap()
            .exp()
            .unwrap()
            .sum_axis(1)
            .unwrap()
            .sqrt()
            .unwrap()
            .data()
            .to_vec()
    };
    let first = run();
    for _ in 0..3 {
        assert_eq!(first, run());
    }
}

/// Composite MLP loss: two dense layers with leaky-relu, squared output sum.
#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let input = Tensor::constant(&[4, 3], rand_vec(&mut rng, 12)).unwrap();
    let params = vec![
        (vec![3, 5], rand_vec(&mut rng, 15)),
        (vec![5], rand_vec(&mut rng, 5)),
        (vec![5, 2], rand_vec(&mut rng, 10)),
        (vec![2], rand_vec(&mut rng, 2)),
    ];
    let report = grad_check(
        move |_, ps| {
            let h = input
                .matmul(&ps[0])?
                .add(&ps[1])?
                .leaky_relu(0.01)?
                .matmul(&ps[2])?
                .add(&ps[3])?;
            h.mul(&h)?.sum_axis(1)?.sum_axis(0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-6,
        "mlp grad check err {}",
        report.max_rel_err
    );
}

#[test]
fn conv_path_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let img = Tensor::constant(&[2, 6, 6], rand_vec(&mut rng, 72)).unwrap();
    let params = vec![
        (vec![3, 2, 3, 3], rand_vec(&mut rng, 54)),
        (vec![3, 1, 1], rand_vec(&mut rng, 3)),
    ];
    let report = grad_check(
        move |_, ps| {
            let y = img.conv2d(&ps[0], 2)?.add(&ps[1])?.leaky_relu(0.01)?;
            y.mul(&y)?.reshape(&[12])?.sum_axis(0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-6,
        "conv grad check err {}",
        report.max_rel_err
    );
}

#[test]
fn max_and_concat_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = vec![
        (vec![3, 4], rand_vec(&mut rng, 12)),
        (vec![2, 4], rand_vec(&mut rng, 8)),
    ];
    let report = grad_check(
        |_, ps| {
            let joined = ps[0].concat(&ps[1], 0)?;
            let pooled = joined.max_axis(0)?;
            pooled.mul(&pooled)?.sum_axis(0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-6,
        "max/concat grad check err {}",
        report.max_rel_err
    );
}

#[test]
fn division_and_sqrt_gradients_match_finite_differences() {
    let params = vec![
        (vec![3], vec![0.7, 1.3, 2.1]),
        (vec![3], vec![1.9, 0.6, 1.1]),
    ];
    let report = grad_check(
        |_, ps| {
            let ratio = ps[0].mul(&ps[0])?.add_scalar(0.5)?.div(&ps[1].mul(&ps[1])?.add_scalar(0.5)?)?;
            ratio.sqrt()?.sum_axis(0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (1usize..=3)
            .prop_flat_map(|rank| proptest::collection::vec(1usize..=8, rank))
            .prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (
                    Just(shape),
                    proptest::collection::vec(-1.0f64..1.0, n..=n),
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sum_reduce_matches_loop_oracle_on_random_shapes((shape, data) in shape_and_data(), axis_pick in 0usize..3) {
            let axis = axis_pick % shape.len();
            let t = Tensor::constant(&shape, data.clone()).unwrap();
            let got = t.sum_axis(axis).unwrap();
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let want: f64 = (0..len).map(|s| data[o * len * inner + s * inner + i]).sum();
                    prop_assert!((got.data()[o * inner + i] - want).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn broadcast_add_grads_sum_to_output_grad((shape, data) in shape_and_data()) {
            // d(sum(a + b))/da == 1 everywhere, and the broadcast operand's
            // gradient accumulates once per replicated slot
            let g = Graph::new();
            let a = g.param(&shape, data.clone()).unwrap();
            let bias = g.param(&[*shape.last().unwrap()], vec![0.25; *shape.last().unwrap()]).unwrap();
            let mut out = a.add(&bias).unwrap();
            for ax in (0..shape.len()).rev() {
                out = out.sum_axis(ax).unwrap();
            }
            out.backward().unwrap();
            let ga = a.grad().unwrap();
            prop_assert!(ga.iter().all(|&v| v == 1.0));
            let gb = bias.grad().unwrap();
            let rows: usize = data.len() / shape.last().unwrap();
            prop_assert!(gb.iter().all(|&v| v == rows as f64));
        }

        #[test]
        fn matmul_matches_loops_on_random_shapes(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let got = Tensor::constant(&[m, k], a.clone()).unwrap()
                .matmul(&Tensor::constant(&[k, n], b.clone()).unwrap()).unwrap();
            let want = matmul_loops(&a, &b, m, k, n);
            for (gv, wv) in got.data().iter().zip(want.iter()) {
                prop_assert!((gv - wv).abs() <= 1e-12);
            }
        }
    }
}
