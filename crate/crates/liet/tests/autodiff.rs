//! Finite-difference verification of every tape operation.
//!
//! Each op gets its analytic backward compared element-wise against central
//! differences in `f64` (step `1e-5`). Outputs are contracted to a scalar
//! through a fixed random projection so transposed or misrouted gradients
//! cannot cancel out.

use liet::autodiff::check::central_difference;
use liet::autodiff::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const ATOL: f64 = 1e-7;
const RTOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

/// Builds the graph twice (analytic + per-perturbation) and compares
/// gradients for every input.
fn gradcheck(
    name: &str,
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) {
    // Project the op output to a scalar with fixed random weights.
    let shape_probe: Vec<usize> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let projection = random_array(&mut rng(0xC0FFEE), &shape_probe, -1.0, 1.0);

    let scalar_loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Var {
        let out = build(tape, vars);
        let proj = tape.constant(projection.clone());
        let prod = tape.mul(out, proj);
        tape.sum_all(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = scalar_loss(&mut tape, &vars);
    let grads = tape.backward(loss);

    let numeric = central_difference(
        |xs: &[ArrayD<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = scalar_loss(&mut t, &vs);
            t.scalar_value(l)
        },
        inputs,
        STEP,
    );

    for (i, (var, num)) in vars.iter().zip(numeric.iter()).enumerate() {
        let zero = ArrayD::zeros(inputs[i].raw_dim());
        let ana = grads.wrt(*var).unwrap_or(&zero);
        for (idx, (&a, &n)) in ana.iter().zip(num.iter()).enumerate() {
            let tol = ATOL + RTOL * a.abs().max(n.abs());
            assert!(
                (a - n).abs() <= tol,
                "{name}: input {i} element {idx}: analytic {a} vs numeric {n}"
            );
        }
    }
}

#[test]
fn grad_add_sub() {
    let mut r = rng(1);
    let a = random_array(&mut r, &[2, 3, 3], -1.0, 1.0);
    let b = random_array(&mut r, &[2, 3, 3], -1.0, 1.0);
    gradcheck("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    gradcheck("sub", &[a, b], |t, v| t.sub(v[0], v[1]));
}

#[test]
fn grad_mul_div() {
    let mut r = rng(2);
    let a = random_array(&mut r, &[2, 4], -1.0, 1.0);
    let b = random_array(&mut r, &[2, 4], 0.5, 1.5);
    gradcheck("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    gradcheck("div", &[a, b], |t, v| t.div(v[0], v[1]));
}

#[test]
fn grad_scale_add_scalar() {
    let mut r = rng(3);
    let a = random_array(&mut r, &[5], -1.0, 1.0);
    gradcheck("scale", &[a.clone()], |t, v| t.scale(v[0], -2.5));
    gradcheck("add_scalar", &[a], |t, v| t.add_scalar(v[0], 0.3));
}

#[test]
fn grad_pointwise_nonlinearities() {
    let mut r = rng(4);
    // Keep inputs away from the relu/abs kinks and the ln singularity.
    let pos = random_array(&mut r, &[3, 3], 0.2, 1.2);
    let signed = random_array(&mut r, &[3, 3], -1.0, 1.0)
        .mapv(|v: f64| if v.abs() < 0.05 { v + 0.1 } else { v });
    gradcheck("ln", &[pos.clone()], |t, v| t.ln(v[0]));
    gradcheck("abs", &[signed.clone()], |t, v| t.abs(v[0]));
    gradcheck("sigmoid", &[signed.clone()], |t, v| t.sigmoid(v[0]));
    gradcheck("relu", &[signed.clone()], |t, v| t.relu(v[0]));
    gradcheck("leaky_relu", &[signed.clone()], |t, v| {
        t.leaky_relu(v[0], 0.2)
    });
    gradcheck("softplus", &[signed.clone()], |t, v| t.softplus(v[0]));
    gradcheck("clamp_min", &[pos], |t, v| t.clamp_min(v[0], 0.1));
}

#[test]
fn grad_reductions() {
    let mut r = rng(5);
    let a = random_array(&mut r, &[2, 3, 4], -1.0, 1.0);
    gradcheck("mean_all", &[a.clone()], |t, v| t.mean_all(v[0]));
    gradcheck("sum_all", &[a], |t, v| t.sum_all(v[0]));
}

#[test]
fn grad_linear() {
    let mut r = rng(6);
    let x = random_array(&mut r, &[4], -1.0, 1.0);
    let w = random_array(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_array(&mut r, &[3], -1.0, 1.0);
    gradcheck("linear", &[x, w, b], |t, v| t.linear(v[0], v[1], v[2]));
}

#[test]
fn grad_conv2d_unit_stride() {
    let mut r = rng(7);
    let x = random_array(&mut r, &[2, 4, 4], -1.0, 1.0);
    let w = random_array(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = random_array(&mut r, &[3], -0.5, 0.5);
    gradcheck("conv3x3 pad1", &[x, w, b], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    });
}

#[test]
fn grad_conv2d_strided() {
    let mut r = rng(8);
    let x = random_array(&mut r, &[2, 6, 6], -1.0, 1.0);
    let w = random_array(&mut r, &[4, 2, 4, 4], -0.5, 0.5);
    let b = random_array(&mut r, &[4], -0.5, 0.5);
    gradcheck("conv4x4 stride2 pad1", &[x, w, b], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 1)
    });
}

#[test]
fn grad_conv2d_seven_by_seven() {
    let mut r = rng(9);
    let x = random_array(&mut r, &[1, 8, 8], -1.0, 1.0);
    let w = random_array(&mut r, &[2, 1, 7, 7], -0.3, 0.3);
    let b = random_array(&mut r, &[2], -0.3, 0.3);
    gradcheck("conv7x7 pad3", &[x, w, b], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 3)
    });
}

#[test]
fn grad_resampling() {
    let mut r = rng(10);
    let a = random_array(&mut r, &[2, 4, 4], -1.0, 1.0);
    gradcheck("upsample_nearest2", &[a.clone()], |t, v| {
        t.upsample_nearest2(v[0])
    });
    gradcheck("avg_pool2", &[a.clone()], |t, v| t.avg_pool2(v[0]));
    gradcheck("global_avg_pool", &[a], |t, v| t.global_avg_pool(v[0]));
}

#[test]
fn grad_instance_norm() {
    let mut r = rng(11);
    let a = random_array(&mut r, &[3, 4, 4], -1.0, 1.0);
    gradcheck("instance_norm", &[a], |t, v| t.instance_norm(v[0], 1e-5));
}

#[test]
fn grad_masked_instance_norm() {
    let mut r = rng(12);
    let a = random_array(&mut r, &[2, 4, 4], -1.0, 1.0);
    let mut mask = Array2::<f64>::zeros((4, 4));
    for y in 0..4 {
        for x in 0..4 {
            if (x + y) % 2 == 0 {
                mask[[y, x]] = 1.0;
            }
        }
    }
    gradcheck("masked_instance_norm", &[a], |t, v| {
        t.masked_instance_norm(v[0], &mask, 1e-5)
    });
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(13);
    let a = random_array(&mut r, &[2, 3, 3], -1.0, 1.0);
    gradcheck("layer_norm", &[a], |t, v| t.layer_norm(v[0], 1e-5));
}

#[test]
fn grad_channel_affine() {
    let mut r = rng(14);
    let x = random_array(&mut r, &[3, 4, 4], -1.0, 1.0);
    let s = random_array(&mut r, &[3], 0.5, 2.0);
    let b = random_array(&mut r, &[3], -1.0, 1.0);
    gradcheck("mul_channel", &[x.clone(), s], |t, v| t.mul_channel(v[0], v[1]));
    gradcheck("add_channel", &[x.clone(), b], |t, v| t.add_channel(v[0], v[1]));
    gradcheck("weighted_channel_sum", &[x], |t, v| {
        t.weighted_channel_sum(v[0], vec![0.299, 0.587, 0.114])
    });
}

#[test]
fn grad_shape_surgery() {
    let mut r = rng(15);
    let a = random_array(&mut r, &[2, 3, 3], -1.0, 1.0);
    let b = random_array(&mut r, &[1, 3, 3], -1.0, 1.0);
    gradcheck("concat0", &[a.clone(), b], |t, v| t.concat0(v[0], v[1]));
    gradcheck("narrow axis0", &[a.clone()], |t, v| t.narrow(v[0], 0, 1, 1));
    gradcheck("narrow axis2", &[a], |t, v| t.narrow(v[0], 2, 0, 2));
}

#[test]
fn grad_composite_network_block() {
    // conv → instance norm → relu → pool → conv, the signature encoder
    // block, differentiated end to end.
    let mut r = rng(16);
    let x = random_array(&mut r, &[2, 4, 4], -1.0, 1.0);
    let w1 = random_array(&mut r, &[3, 2, 3, 3], -0.4, 0.4);
    let b1 = random_array(&mut r, &[3], -0.2, 0.2);
    let w2 = random_array(&mut r, &[2, 3, 3, 3], -0.4, 0.4);
    let b2 = random_array(&mut r, &[2], -0.2, 0.2);
    gradcheck("composite block", &[x, w1, b1, w2, b2], |t, v| {
        let c1 = t.conv2d(v[0], v[1], v[2], 1, 1);
        let n1 = t.instance_norm(c1, 1e-5);
        let a1 = t.relu(n1);
        let p1 = t.avg_pool2(a1);
        t.conv2d(p1, v[3], v[4], 1, 1)
    });
}

#[test]
fn detach_stops_exactly_the_detached_branch() {
    // loss = sum(x * detach(x)): gradient must be detach(x) = x, not 2x.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let d = tape.detach(x);
    let p = tape.mul(x, d);
    let s = tape.sum_all(p);
    let g = tape.backward(s);
    assert_eq!(g.wrt(x).unwrap(), &ArrayD::from_elem(IxDyn(&[3]), 2.0));
}
