//! Central-difference gradient verification for every tape op.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Compare tape gradients of `scalar = f(inputs)` against central differences.
fn check(
    inputs: &[ArrayD<f32>],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    step: f32,
    tol: f32,
) {
    // analytic
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "gradcheck root must be scalar");
    let grads = tape.backward(out);

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for (idx, _) in input.indexed_iter() {
            let eval = |delta: f32| -> f64 {
                let mut tape = Tape::no_grad();
                let mut mod_inputs = inputs.to_vec();
                mod_inputs[k][&idx] += delta;
                let vars: Vec<Var> = mod_inputs.iter().map(|a| tape.leaf(a.clone())).collect();
                let out = f(&mut tape, &vars);
                tape.scalar(out) as f64
            };
            let fd = ((eval(step) - eval(-step)) / (2.0 * step as f64)) as f32;
            let a = analytic[&idx];
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < tol,
                "input {k} idx {idx:?}: analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2, 3]).mapv(|v| v + 3.0); // keep away from 0 for div
    check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let s = t.mul(s, v[0]);
        let s = t.div(s, v[1]);
        let s = t.sub(s, v[0]);
        t.sum_all(s)
    }, 1e-3, 1e-2);
    check(&[a], |t, v| {
        let s = t.mul_scalar(v[0], 1.7);
        let s = t.add_scalar(s, 0.3);
        let s = t.neg(s);
        t.mean_all(s)
    }, 1e-3, 1e-2);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[2, 4]).mapv(|v| v * 0.5);
    for op in ["exp", "tanh", "sigmoid", "lrelu", "square", "gelu"] {
        let op = op.to_string();
        check(&[a.clone()], move |t, v| {
            let y = match op.as_str() {
                "exp" => t.exp(v[0]),
                "tanh" => t.tanh(v[0]),
                "sigmoid" => t.sigmoid(v[0]),
                "lrelu" => t.leaky_relu(v[0], 0.2),
                "square" => t.square(v[0]),
                _ => t.gelu(v[0]),
            };
            t.sum_all(y)
        }, 1e-3, 1e-2);
    }
    // abs / ln_abs / recip away from the origin
    let b = randn(&mut rng, &[6]).mapv(|v| v + 4.0);
    check(&[b.clone()], |t, v| { let y = t.abs(v[0]); t.sum_all(y) }, 1e-3, 1e-2);
    check(&[b.clone()], |t, v| { let y = t.ln_abs(v[0]); t.sum_all(y) }, 1e-3, 1e-2);
    check(&[b], |t, v| { let y = t.recip(v[0]); t.sum_all(y) }, 1e-3, 1e-2);
}

#[test]
fn reductions_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    let s = randn(&mut rng, &[3]).mapv(|v| v + 2.0);
    let b = randn(&mut rng, &[3]);
    check(&[x.clone(), s, b], |t, v| {
        let y = t.mul_axis1(v[0], v[1]);
        let y = t.add_axis1(y, v[2]);
        let per = t.sum_per_sample(y);
        t.sum_all(per)
    }, 1e-3, 1e-2);
    // 2-D variant of axis-1 broadcast
    let x2 = randn(&mut rng, &[3, 4]);
    let s2 = randn(&mut rng, &[4]).mapv(|v| v + 2.0);
    check(&[x2, s2], |t, v| {
        let y = t.mul_axis1(v[0], v[1]);
        t.mean_all(y)
    }, 1e-3, 1e-2);
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 4]);
    let w = randn(&mut rng, &[4, 2]);
    check(&[x, w], |t, v| {
        let y = t.matmul(v[0], v[1]);
        t.sum_all(y)
    }, 1e-2, 1e-2);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[2, 4, 2]);
    check(&[a.clone(), b], |t, v| {
        let y = t.bmm(v[0], v[1]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-2, 1e-2);
    let c = randn(&mut rng, &[2, 5, 4]);
    check(&[a, c], |t, v| {
        let y = t.bmm_nt(v[0], v[1]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-2, 1e-2);
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 4, 2, 2]);
    check(&[x.clone()], |t, v| {
        let y = t.reshape(v[0], &[2, 16]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
    let a = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2, 2]);
    check(&[a, b], |t, v| {
        let y = t.concat_axis1(&[v[0], v[1]]);
        let y = t.square(y);
        let n = t.narrow_axis1(y, 1, 3);
        t.sum_all(n)
    }, 1e-3, 1e-2);
    check(&[x], |t, v| {
        let r = t.reshape(v[0], &[2, 16]);
        let y = t.transpose2(r);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[2, 3, 5, 4]);
    let w = randn(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.3);
    let b = randn(&mut rng, &[4]);
    check(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1);
        let y = t.square(y);
        t.mean_all(y)
    }, 1e-2, 1e-2);
    // strided, no padding
    check(&[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 0);
        let y = t.square(y);
        t.mean_all(y)
    }, 1e-2, 1e-2);
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[1, 2, 4, 4]);
    for op in ["squeeze", "unsq", "up", "avg", "resize", "pad", "crop", "roll"] {
        let op = op.to_string();
        check(&[x.clone()], move |t, v| {
            let y = match op.as_str() {
                "squeeze" => t.squeeze2(v[0]),
                "unsq" => { let s = t.squeeze2(v[0]); t.unsqueeze2(s) }
                "up" => t.upsample_nearest2(v[0]),
                "avg" => t.avgpool2(v[0]),
                "resize" => t.resize_bilinear(v[0], 7, 3),
                "pad" => t.pad_br(v[0], 2, 1),
                "crop" => t.crop_tl(v[0], 3, 2),
                _ => t.roll2d(v[0], 1, -2),
            };
            let y = t.square(y);
            t.sum_all(y)
        }, 1e-3, 1e-2);
    }
    check(&[x.clone()], |t, v| {
        let y = t.permute_axis1(v[0], &[1, 0]);
        let z = t.square(y);
        t.sum_all(z)
    }, 1e-3, 1e-2);
    check(&[x.clone()], |t, v| {
        let y = t.gather_cells(v[0], &[(0, 1, 2), (0, 3, 0), (0, 1, 2)]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
    let rows = randn(&mut rng, &[12, 3]);
    check(&[rows], |t, v| {
        let y = t.rows_to_image(v[0], 3, 4);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
    check(&[x], |t, v| {
        let y = t.win_partition(v[0], 2);
        let y = t.square(y);
        let z = t.win_reverse(y, 1, 2, 4, 4, 2);
        t.sum_all(z)
    }, 1e-3, 1e-2);
}

#[test]
fn norm_attention_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 5]);
    check(&[x.clone()], |t, v| {
        let y = t.softmax_lastdim(v[0]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
    let gamma = randn(&mut rng, &[5]).mapv(|v| v + 2.0);
    let beta = randn(&mut rng, &[5]);
    check(&[x.clone(), gamma, beta], |t, v| {
        let y = t.layer_norm_lastdim(v[0], v[1], v[2], 1e-5);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 2e-2);
    let bias = randn(&mut rng, &[3, 5]);
    let stacked = randn(&mut rng, &[6, 5]);
    check(&[stacked, bias], |t, v| {
        let y = t.add_tile0(v[0], v[1]);
        let y = t.square(y);
        t.sum_all(y)
    }, 1e-3, 1e-2);
}

#[test]
fn backward_accumulates_shared_nodes() {
    // y = x + x should give dy/dx = 2
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.5f32));
    let y = tape.add(x, x);
    let s = tape.sum_all(y);
    let grads = tape.backward(s);
    let gx = grads.get(x).unwrap();
    assert!(gx.iter().all(|&v| (v - 2.0).abs() < 1e-6));
}

#[test]
fn no_grad_tape_skips_backward() {
    let mut tape = Tape::no_grad();
    let x = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f32));
    let y = tape.mul(x, x);
    let s = tape.sum_all(y);
    let grads = tape.backward(s);
    assert!(grads.get(x).is_none());
}
