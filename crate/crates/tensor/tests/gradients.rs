//! Every differentiable primitive against central finite differences.

use anomaly_tensor::gradcheck::check_gradients;
use anomaly_tensor::{Result, Rng, Tape, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-6;
const TRIALS: u64 = 20;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.standard_normal(shape)
}

/// Values bounded away from zero, for log and division.
fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.5, 2.0))
}

fn random_shape(rng: &mut Rng, max_rank: usize) -> Vec<usize> {
    let rank = 1 + rng.below(max_rank);
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

fn image_shape(rng: &mut Rng) -> Vec<usize> {
    vec![
        1 + rng.below(2),
        1 + rng.below(3),
        2 + rng.below(4),
        2 + rng.below(4),
    ]
}

/// Weighted sum with fixed random coefficients, so every output element
/// carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = Rng::new(seed);
    let w = tape.constant(r.standard_normal(&shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn run<F>(name: &str, mut make: F)
where
    F: FnMut(
        &mut Rng,
    ) -> (
        Vec<Tensor<f64>>,
        Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    ),
{
    let mut rng = Rng::new(0xC0FFEE);
    for trial in 0..TRIALS {
        let (inputs, f) = make(&mut rng);
        let report = check_gradients(&inputs, EPS, |tape, vars| {
            let y = f(tape, vars)?;
            project(tape, y, 1000 + trial)
        })
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} trial {trial}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

macro_rules! unary {
    ($test:ident, $method:ident, $gen:ident) => {
        #[test]
        fn $test() {
            run(stringify!($method), |rng| {
                let shape = random_shape(rng, 4);
                (vec![$gen(rng, &shape)], Box::new(|t, v| t.$method(v[0])))
            });
        }
    };
}

macro_rules! binary {
    ($test:ident, $method:ident, $gen_b:ident) => {
        #[test]
        fn $test() {
            run(stringify!($method), |rng| {
                let shape = random_shape(rng, 4);
                (
                    vec![randn(rng, &shape), $gen_b(rng, &shape)],
                    Box::new(|t, v| t.$method(v[0], v[1])),
                )
            });
        }
    };
}

unary!(relu_grad, relu, randn);
unary!(sigmoid_grad, sigmoid, randn);
unary!(log_grad, log, positive);
unary!(exp_grad, exp, randn);
unary!(square_grad, square, randn);
binary!(add_grad, add, randn);
binary!(sub_grad, sub, randn);
binary!(mul_grad, mul, randn);
binary!(div_grad, div, positive);

#[test]
fn scalar_ops_grad() {
    run("scalar ops", |rng| {
        let shape = random_shape(rng, 4);
        let (a, m) = (rng.normal(), rng.normal());
        (
            vec![randn(rng, &shape)],
            Box::new(move |t, v| {
                let x = t.add_scalar(v[0], a)?;
                t.mul_scalar(x, m)
            }),
        )
    });
}

#[test]
fn matmul_grad() {
    run("matmul", |rng| {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        (
            vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        )
    });
}

#[test]
fn conv2d_grad() {
    run("conv2d", |rng| {
        let s = image_shape(rng);
        let o = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        (
            vec![
                randn(rng, &s),
                randn(rng, &[o, s[1], 3, 3]),
                randn(rng, &[o]),
            ],
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride)),
        )
    });
}

#[test]
fn linear_grad() {
    run("linear", |rng| {
        let mut s = image_shape(rng);
        if rng.below(2) == 0 {
            s.truncate(2);
        }
        let o = 1 + rng.below(3);
        (
            vec![randn(rng, &s), randn(rng, &[o, s[1]]), randn(rng, &[o])],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        )
    });
}

#[test]
fn add_channel_bias_grad() {
    run("add_channel_bias", |rng| {
        let s = image_shape(rng);
        (
            vec![randn(rng, &s), randn(rng, &[s[0], s[1]])],
            Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
        )
    });
}

#[test]
fn resize_grads() {
    run("resize", |rng| {
        let s = image_shape(rng);
        let (oh, ow) = (1 + rng.below(7), 1 + rng.below(7));
        let bilinear = rng.below(2) == 0;
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| {
                if bilinear {
                    t.resize_bilinear(v[0], oh, ow)
                } else {
                    t.resize_nearest(v[0], oh, ow)
                }
            }),
        )
    });
}

#[test]
fn concat_slice_gather_grads() {
    run("channel plumbing", |rng| {
        let s = image_shape(rng);
        let mut s2 = s.clone();
        s2[1] = 1 + rng.below(3);
        let total = s[1] + s2[1];
        let picks: Vec<Vec<usize>> = (0..s[0])
            .map(|_| (0..3).map(|_| rng.below(total)).collect())
            .collect();
        (
            vec![randn(rng, &s), randn(rng, &s2)],
            Box::new(move |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                let sl = t.slice_channels(c, 1.min(total - 1), 1)?;
                let g = t.gather_channels(c, picks.clone())?;
                let sq = t.square(sl)?;
                let gs = t.sum(g)?;
                let ss = t.sum(sq)?;
                t.add(gs, ss)
            }),
        )
    });
}

#[test]
fn reductions_grad() {
    run("reductions", |rng| {
        let s = image_shape(rng);
        (
            vec![randn(rng, &s)],
            Box::new(|t, v| {
                let mx = t.global_max_pool(v[0])?;
                let av = t.global_avg_pool(v[0])?;
                let r = t.reshape(v[0], &[t.value(v[0]).len()])?;
                let sm = t.sum(r)?;
                let mn = t.mean(v[0])?;
                let a = t.add(mx, av)?;
                let s1 = t.sum(a)?;
                let s2 = t.add(sm, mn)?;
                t.add(s1, s2)
            }),
        )
    });
}

#[test]
fn batch_norm_grad() {
    run("batch_norm", |rng| {
        let mut s = image_shape(rng);
        s[0] = 2;
        (
            vec![randn(rng, &s)],
            Box::new(|t, v| Ok(t.batch_norm(v[0], 1e-5)?.0)),
        )
    });
}

#[test]
fn channel_affine_grad() {
    run("channel_affine", |rng| {
        let s = image_shape(rng);
        let scale: Vec<f64> = (0..s[1]).map(|_| rng.normal()).collect();
        let shift: Vec<f64> = (0..s[1]).map(|_| rng.normal()).collect();
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| t.channel_affine(v[0], &scale, &shift)),
        )
    });
}

#[test]
fn bce_with_logits_grad() {
    run("bce_with_logits", |rng| {
        let s = image_shape(rng);
        let target = Tensor::from_fn(&s, |_| if rng.below(2) == 0 { 0.0 } else { 1.0 });
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| t.bce_with_logits(v[0], target.clone())),
        )
    });
}

#[test]
fn stop_gradient_is_exactly_zero() {
    let mut rng = Rng::new(5);
    for _ in 0..TRIALS {
        let shape = random_shape(&mut rng, 4);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&mut rng, &shape), true);
        let s = tape.stop_gradient(x).unwrap();
        let e = tape.exp(s).unwrap();
        let y = tape.sum(e).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }
}

#[test]
fn forward_backward_are_bit_reproducible() {
    let build = || {
        let mut rng = Rng::new(11);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(rng.standard_normal(&[2, 3, 8, 8]), true);
        let w = tape.leaf(rng.standard_normal(&[4, 3, 3, 3]), true);
        let y = tape.conv2d(x, w, None, 2).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let l = tape.mean(y).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(build(), build());
}
