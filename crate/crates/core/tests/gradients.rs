mod common;

use common::{gradient_error, loss_gradient_errors, probe, random_tensor, rng};
use geoseg::tensor::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> geoseg::Result<Var>) {
    let err = gradient_error(inputs, H, FLOOR, build);
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, &mut rng(seed), 0.1, 1.0).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v })
}

#[test]
fn elementwise_ops() {
    let a = random_tensor(&[2, 3], &mut rng(1), -1.0, 1.0);
    let b = random_tensor(&[2, 3], &mut rng(2), 0.5, 1.5);
    let s = Tensor::new(vec![1], vec![0.7]).unwrap();
    check("add", &[a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; probe(t, y, 9) });
    check("sub", &[a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y, 9) });
    check("mul", &[a.clone(), b.clone()], |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y, 9) });
    check("div", &[a.clone(), b.clone()], |t, v| { let y = t.div(v[0], v[1])?; probe(t, y, 9) });
    check("scalar * tensor", &[s.clone(), a.clone()], |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y, 9) });
    check("tensor / scalar", &[a.clone(), s.clone()], |t, v| { let y = t.div(v[0], v[1])?; probe(t, y, 9) });
    check("scalar - tensor", &[s.clone(), a.clone()], |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y, 9) });
    check("add_scalar", &[a.clone()], |t, v| { let y = t.add_scalar(v[0], 2.5)?; probe(t, y, 9) });
    check("mul_scalar", &[a.clone()], |t, v| { let y = t.mul_scalar(v[0], -1.5)?; probe(t, y, 9) });
    check("square", &[a.clone()], |t, v| { let y = t.square(v[0])?; probe(t, y, 9) });
    check("abs", &[away_from_zero(&[2, 3], 3)], |t, v| { let y = t.abs(v[0])?; probe(t, y, 9) });
    check("exp", &[a.clone()], |t, v| { let y = t.exp(v[0])?; probe(t, y, 9) });
    check("ln_clamped", &[b.clone()], |t, v| { let y = t.ln_clamped(v[0], 1e-12)?; probe(t, y, 9) });
    check("relu", &[away_from_zero(&[2, 3], 4)], |t, v| { let y = t.relu(v[0])?; probe(t, y, 9) });
    check("tanh", &[a.clone()], |t, v| { let y = t.tanh(v[0])?; probe(t, y, 9) });
    check("sigmoid", &[a.clone()], |t, v| { let y = t.sigmoid(v[0])?; probe(t, y, 9) });
    check("sum", &[a.clone()], |t, v| { let y = t.sum(v[0])?; t.square(y) });
    check("mean", &[a.clone()], |t, v| { let y = t.mean(v[0])?; t.square(y) });
}

#[test]
fn structural_ops() {
    let x = random_tensor(&[2, 3, 4, 4], &mut rng(5), -1.0, 1.0);
    check("softmax_channel", &[x.clone()], |t, v| { let y = t.softmax_channel(v[0])?; probe(t, y, 9) });
    check("instance_norm", &[x.clone()], |t, v| { let y = t.instance_norm(v[0])?; probe(t, y, 9) });
    check("narrow batch", &[x.clone()], |t, v| { let y = t.narrow(v[0], 0, 1, 1)?; probe(t, y, 9) });
    check("narrow channel", &[x.clone()], |t, v| { let y = t.narrow(v[0], 1, 1, 2)?; probe(t, y, 9) });
    check("upsample 2d", &[x.clone()], |t, v| { let y = t.upsample2x(v[0])?; probe(t, y, 9) });
    let x3 = random_tensor(&[1, 2, 3, 2, 4], &mut rng(6), -1.0, 1.0);
    check("upsample 3d", &[x3], |t, v| { let y = t.upsample2x(v[0])?; probe(t, y, 9) });
    let target = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| f64::from(i % 3)).collect()).unwrap();
    check("cross_entropy_logits", &[x], |t, v| t.cross_entropy_logits(v[0], &target));
}

#[test]
fn convolutions() {
    let mut r = rng(7);
    let x = random_tensor(&[2, 2, 5, 6], &mut r, -1.0, 1.0);
    let w = random_tensor(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
    let b = random_tensor(&[3], &mut r, -1.0, 1.0);
    check("conv 2d pad 1", &[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.conv(v[0], v[1], Some(v[2]), &[1, 1], &[1, 1])?;
        probe(t, y, 9)
    });
    check("conv 2d stride 2", &[x.clone(), w.clone()], |t, v| {
        let y = t.conv(v[0], v[1], None, &[2, 2], &[0, 0])?;
        probe(t, y, 9)
    });
    let w1 = random_tensor(&[3, 2, 1, 1], &mut r, -1.0, 1.0);
    check("conv 2d pointwise", &[x.clone(), w1, b.clone()], |t, v| {
        let y = t.conv(v[0], v[1], Some(v[2]), &[1, 1], &[0, 0])?;
        probe(t, y, 9)
    });
    let x3 = random_tensor(&[1, 2, 4, 4, 3], &mut r, -1.0, 1.0);
    let w3 = random_tensor(&[2, 2, 3, 3, 3], &mut r, -1.0, 1.0);
    check("conv 3d", &[x3.clone(), w3], |t, v| {
        let y = t.conv(v[0], v[1], None, &[1, 1, 1], &[1, 1, 1])?;
        probe(t, y, 9)
    });
    let wt = random_tensor(&[2, 3, 2, 2], &mut r, -1.0, 1.0);
    check("conv_transpose 2d", &[x.clone(), wt, b.clone()], |t, v| {
        let y = t.conv_transpose(v[0], v[1], Some(v[2]), &[2, 2])?;
        probe(t, y, 9)
    });
    let wt3 = random_tensor(&[2, 1, 2, 2, 2], &mut r, -1.0, 1.0);
    check("conv_transpose 3d", &[x3, wt3], |t, v| {
        let y = t.conv_transpose(v[0], v[1], None, &[2, 2, 2])?;
        probe(t, y, 9)
    });
}

#[test]
fn every_loss() {
    for (name, err) in loss_gradient_errors() {
        assert!(err < TOL, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn unreachable_parameter_gets_exact_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
    let unused = t.param(Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
    let sq = t.square(x).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
}
