use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central differences of a scalar function of one flat input.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn assert_grad_close(auto: &[f64], fd: &[f64], tol: f64) {
    assert_eq!(auto.len(), fd.len());
    let scale = fd.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    for (a, f) in auto.iter().zip(fd) {
        assert!(
            (a - f).abs() / scale < tol,
            "autodiff {a} vs finite difference {f} (scale {scale})"
        );
    }
}

#[test]
fn elementwise_examples() {
    let a = t(&[1.0, 2.0], &[2]);
    let b = t(&[3.0, 4.0], &[2]);
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    let x = t(&[0.5, -2.0, 3.0], &[3]);
    assert_eq!(x.mul(&x.ones_like()).unwrap().data(), x.data());
    assert_eq!(x.div(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, -2.0]);
    assert_eq!(a.neg().unwrap().data(), &[-1.0, -2.0]);
}

#[test]
fn broadcasting_trailing_dims() {
    let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let row = t(&[10.0, 20.0, 30.0], &[3]);
    let out = a.add(&row).unwrap();
    assert_eq!(out.shape(), &[2, 3]);
    assert_eq!(out.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = t(&[1.0, 2.0], &[2, 1]);
    assert_eq!(a.mul(&col).unwrap().data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
    assert_eq!(a.mul(&Tensor::scalar(2.0)).unwrap().shape(), &[2, 3]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0, 3.0], &[3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
}

#[test]
fn matmul_examples() {
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    let v = t(&[1.0, 1.0], &[2, 1]);
    let out = a.matmul(&v).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
    assert!(a.matmul(&t(&[1.0, 2.0, 3.0], &[3, 1])).is_err());
}

#[test]
fn matmul_sum_grad_is_ones_times_b_transpose() {
    let (ad, bd) = (random(&[3, 4], 1), random(&[4, 2], 2));
    let a = Tensor::parameter(ad.clone(), &[3, 4]).unwrap();
    let b = t(&bd, &[4, 2]);
    a.matmul(&b).unwrap().sum_all().unwrap().backward().unwrap();
    let f = |x: &[f64]| {
        t(x, &[3, 4])
            .matmul(&b)
            .unwrap()
            .sum_all()
            .unwrap()
            .item()
            .unwrap()
    };
    let fd = fd_grad(&f, &ad, 1e-5);
    assert_grad_close(&a.grad().unwrap(), &fd, 1e-5);
    // ones(3x2) . B^T: each row equals the row sums of B.
    for i in 0..3 {
        for k in 0..4 {
            assert_relative_eq!(a.grad().unwrap()[i * 4 + k], bd[k * 2] + bd[k * 2 + 1], epsilon = 1e-12);
        }
    }
}

#[test]
fn reductions() {
    let x = t(&[1.0, 2.0, 3.0], &[3]);
    assert_eq!(x.sum_all().unwrap().item().unwrap(), 6.0);
    let c = Tensor::full(&[2, 5], 0.7);
    assert_relative_eq!(c.mean_all().unwrap().item().unwrap(), 0.7, epsilon = 1e-15);
    let m = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    assert_eq!(m.reduce_sum(&[0]).unwrap().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(m.reduce_sum(&[1]).unwrap().data(), &[6.0, 15.0]);
    assert_eq!(m.reduce_mean(&[1]).unwrap().data(), &[2.0, 5.0]);
    assert!(matches!(
        m.reduce_sum(&[2]),
        Err(TensorError::InvalidAxis { axis: 2, .. })
    ));

    let p = Tensor::parameter(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    p.sum_all().unwrap().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_examples() {
    let theta = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    theta.square().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(theta.grad().unwrap(), vec![2.0, 4.0]);

    // Constant loss: nothing flows back.
    let p = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    let loss = p.scale(0.0).unwrap().sum_all().unwrap().add_scalar(3.0).unwrap();
    loss.backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![0.0, 0.0]);

    let err = theta.square().unwrap().backward().unwrap_err();
    assert!(matches!(err, TensorError::NonScalarBackward(_)));
}

#[test]
fn grads_accumulate_until_zero_grad() {
    let p = Tensor::parameter(vec![1.0, -1.0], &[2]).unwrap();
    for _ in 0..3 {
        p.sum_all().unwrap().backward().unwrap();
    }
    assert_eq!(p.grad().unwrap(), vec![3.0, 3.0]);
    p.zero_grad();
    assert!(p.grad().is_none());
    p.scale(2.0).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::parameter(vec![0.5, -1.5, 2.0], &[3]).unwrap();
    let d = x.detach();
    assert_eq!(d.data(), x.data());
    assert!(!d.requires_grad());
    d.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), x.to_vec());

    let y = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    let through = y.detach().square().unwrap().sum_all().unwrap();
    assert!(!through.requires_grad());
    through.backward().unwrap();
    assert!(y.grad().is_none());
}

#[test]
fn no_grad_records_nothing() {
    let p = Tensor::parameter(vec![1.0], &[1]).unwrap();
    let out = no_grad(|| p.scale(2.0).unwrap());
    assert!(!out.requires_grad());
    assert!(out.is_leaf());
}

#[test]
fn non_finite_forward_names_the_op() {
    let x = t(&[1.0, 0.0], &[2]);
    let err = x.div(&t(&[0.0, 0.0], &[2])).unwrap_err();
    assert_eq!(
        err,
        TensorError::NonFinite {
            op: "div",
            phase: "forward"
        }
    );
}

#[test]
fn diamond_graph_visits_each_node_once() {
    // loss = sum((x*2) * (x*2)) -> d/dx = 8x, with the shared node reached twice.
    let x = Tensor::parameter(vec![1.0, -0.5], &[2]).unwrap();
    let y = x.scale(2.0).unwrap();
    y.mul(&y).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![8.0, -4.0]);
}

#[test]
fn linearity_of_backward() {
    let xd = random(&[6], 7);
    let grad_of = |alpha: f64, beta: f64| {
        let x = Tensor::parameter(xd.clone(), &[6]).unwrap();
        let l1 = x.sigmoid().unwrap().sum_all().unwrap();
        let l2 = x.square().unwrap().mean_all().unwrap();
        let l = l1.scale(alpha).unwrap().add(&l2.scale(beta).unwrap()).unwrap();
        l.backward().unwrap();
        x.grad().unwrap()
    };
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    let g = grad_of(0.3, -2.5);
    for i in 0..6 {
        assert_relative_eq!(g[i], 0.3 * g1[i] - 2.5 * g2[i], epsilon = 1e-12);
    }
}

#[test]
fn conv_shapes() {
    let x = Tensor::zeros(&[2, 1, 28, 28]);
    let w = Tensor::zeros(&[32, 1, 3, 3]);
    let y = x.conv2d(&w, None, Conv2dGeometry::new(2, 1)).unwrap();
    assert_eq!(y.shape(), &[2, 32, 14, 14]);
    let wt = Tensor::zeros(&[32, 16, 3, 3]);
    let geom = Conv2dGeometry {
        stride: 2,
        padding: 1,
        output_padding: 1,
    };
    assert_eq!(y.conv_transpose2d(&wt, None, geom).unwrap().shape(), &[2, 16, 28, 28]);
    assert!(x.conv2d(&Tensor::zeros(&[4, 2, 3, 3]), None, Conv2dGeometry::new(1, 1)).is_err());
}

#[test]
fn conv_matches_direct_summation() {
    let (xd, wd) = (random(&[1, 2, 5, 5], 3), random(&[3, 2, 3, 3], 4));
    let x = t(&xd, &[1, 2, 5, 5]);
    let w = t(&wd, &[3, 2, 3, 3]);
    let b = t(&[0.1, -0.2, 0.3], &[3]);
    let y = x.conv2d(&w, Some(&b), Conv2dGeometry::new(2, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for co in 0..3 {
        for oi in 0..3 {
            for oj in 0..3 {
                let mut s = b.data()[co];
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let ii = (oi * 2 + ki) as isize - 1;
                            let jj = (oj * 2 + kj) as isize - 1;
                            if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                s += xd[(ci * 5 + ii as usize) * 5 + jj as usize]
                                    * wd[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                assert_relative_eq!(y.data()[(co * 3 + oi) * 3 + oj], s, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> for shared weights.
    let geom = Conv2dGeometry {
        stride: 2,
        padding: 1,
        output_padding: 1,
    };
    let x = t(&random(&[1, 2, 8, 8], 5), &[1, 2, 8, 8]);
    let w = t(&random(&[3, 2, 3, 3], 6), &[3, 2, 3, 3]);
    let cx = x.conv2d(&w, None, geom).unwrap();
    let y = t(&random(cx.shape(), 9), cx.shape());
    let ty = y.conv_transpose2d(&w, None, geom).unwrap();
    assert_eq!(ty.shape(), x.shape());
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
}

type Builder = dyn Fn(&[Tensor]) -> Tensor;

/// Checks every input's autodiff gradient of `sum(f(..) * probe)` against
/// central differences.
fn check_op(shapes: &[&[usize]], f: &Builder, seed: u64) {
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random(s, seed + i as u64))
        .collect();
    let params: Vec<Tensor> = datas
        .iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::parameter(d.clone(), s).unwrap())
        .collect();
    let out = f(&params);
    let probe = t(&random(out.shape(), seed + 100), out.shape());
    out.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
    for (k, shape) in shapes.iter().enumerate() {
        let eval = |x: &[f64]| {
            let inputs: Vec<Tensor> = datas
                .iter()
                .zip(shapes)
                .enumerate()
                .map(|(j, (d, s))| if j == k { t(x, s) } else { t(d, s) })
                .collect();
            let o = f(&inputs);
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let fd = fd_grad(&eval, &datas[k], 1e-5);
        let _ = shape;
        assert_grad_close(&params[k].grad().unwrap(), &fd, 1e-6);
    }
}

#[test]
fn finite_difference_every_op() {
    check_op(&[&[3, 4], &[3, 4]], &|v| v[0].add(&v[1]).unwrap(), 1);
    check_op(&[&[3, 4], &[4]], &|v| v[0].sub(&v[1]).unwrap(), 2);
    check_op(&[&[2, 3, 4], &[3, 1]], &|v| v[0].mul(&v[1]).unwrap(), 3);
    check_op(
        &[&[3, 4], &[3, 4]],
        &|v| v[0].div(&v[1].square().unwrap().add_scalar(0.5).unwrap()).unwrap(),
        4,
    );
    check_op(&[&[5]], &|v| v[0].neg().unwrap().scale(1.7).unwrap(), 5);
    check_op(&[&[3, 4], &[4, 2]], &|v| v[0].matmul(&v[1]).unwrap(), 6);
    check_op(&[&[2, 3, 4]], &|v| v[0].reduce_sum(&[0, 2]).unwrap(), 7);
    check_op(&[&[2, 3, 4]], &|v| v[0].reduce_mean(&[1]).unwrap(), 8);
    check_op(&[&[4, 4]], &|v| v[0].sigmoid().unwrap(), 9);
    check_op(&[&[4, 4]], &|v| v[0].relu().unwrap(), 10);
    check_op(&[&[2, 6]], &|v| v[0].reshape(&[3, 4]).unwrap(), 11);
    check_op(
        &[&[2, 2, 7, 6], &[3, 2, 3, 3], &[3]],
        &|v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dGeometry::new(2, 1)).unwrap(),
        12,
    );
    check_op(
        &[&[1, 2, 6, 6], &[2, 3, 3, 3], &[3]],
        &|v| {
            let g = Conv2dGeometry {
                stride: 2,
                padding: 1,
                output_padding: 1,
            };
            v[0].conv_transpose2d(&v[1], Some(&v[2]), g).unwrap()
        },
        13,
    );
    check_op(
        &[&[3, 2, 4, 4], &[2], &[2]],
        &|v| v[0].batch_norm(&v[1], &v[2], None, 1e-5).unwrap().0,
        14,
    );
    check_op(
        &[&[2, 2, 3, 3], &[2], &[2]],
        &|v| {
            v[0].batch_norm(&v[1], &v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5)
                .unwrap()
                .0
        },
        15,
    );
}

#[test]
fn batch_norm_train_normalizes_to_shift() {
    let x = t(&random(&[4, 3, 5, 5], 21), &[4, 3, 5, 5]);
    let gamma = t(&[2.0, 0.5, 1.0], &[3]);
    let beta = t(&[0.3, -1.0, 0.0], &[3]);
    let (y, _, _) = x.batch_norm(&gamma, &beta, None, 1e-5).unwrap();
    let mean = y.reduce_mean(&[0, 2, 3]).unwrap();
    for (m, b) in mean.data().iter().zip(beta.data()) {
        assert!((m - b).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn add_sub_roundtrip(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
        let n = v.len();
        let a = t(&v, &[n]);
        let b = t(&v.iter().map(|x| x * 0.5 - 1.0).collect::<Vec<_>>(), &[n]);
        let back = a.add(&b).unwrap().sub(&b).unwrap();
        for (x, y) in back.data().iter().zip(&v) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn sum_grad_is_ones(rows in 1usize..5, cols in 1usize..5) {
        let p = Tensor::parameter(vec![0.25; rows * cols], &[rows, cols]).unwrap();
        p.sum_all().unwrap().backward().unwrap();
        prop_assert_eq!(p.grad().unwrap(), vec![1.0; rows * cols]);
    }
}
