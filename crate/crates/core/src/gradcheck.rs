//! Central-difference gradient checks for tape ops and the full model loss.

use std::collections::BTreeMap;

use crate::autodiff::{forward, Expr, Grads};
use crate::error::Result;
use crate::model::{CtrInstance, Model};
use crate::numerics::{finite_diff_grad, Rng, Tensor, FD_STEP};

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8)`.
pub fn scaled_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Scalar probe `Σ e ⊙ R` with a fixed random `R`.
fn probe(e: Expr, out_shape: &[usize], rng: &mut Rng) -> Expr {
    let r = rng.normal_tensor(out_shape, 1.0);
    Expr::op("sum", vec![Expr::op("mul", vec![e, Expr::Const(r)])])
}

/// Entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    rng.normal_tensor(shape, 1.0)
        .map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

fn positive(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.log_uniform(lo, hi)).collect()).expect("shape matches")
}

fn named(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// A random scalar expression exercising `tag`, with inputs kept off kinks.
pub fn op_instance(tag: &str, rng: &mut Rng) -> (Expr, BTreeMap<String, Tensor>) {
    let m = 1 + rng.below(4);
    let k = 1 + rng.below(4);
    let n = 1 + rng.below(4);
    let x = || Expr::input("x");
    let y = || Expr::input("y");
    let unary = |rng: &mut Rng, t: Tensor, out: &[usize], e: Expr| (probe(e, out, rng), named(vec![("x", t)]));
    match tag {
        "identity" | "exp" | "sigmoid" | "softplus" | "softmax_rows" => {
            let t = rng.normal_tensor(&[m, n], 2.0);
            unary(rng, t, &[m, n], Expr::op(tag, vec![x()]))
        }
        "transpose" => {
            let t = rng.normal_tensor(&[m, n], 1.0);
            unary(rng, t, &[n, m], Expr::op(tag, vec![x()]))
        }
        "log" => {
            let t = positive(rng, &[m, n], 0.2, 5.0);
            unary(rng, t, &[m, n], Expr::op(tag, vec![x()]))
        }
        "relu" => {
            let t = away_from_zero(rng, &[m, n], 1e-3);
            unary(rng, t, &[m, n], Expr::op(tag, vec![x()]))
        }
        "clamp" => {
            let t = away_from_zero(rng, &[m, n], 1e-3).map(|v| if (v.abs() - 1.0).abs() < 1e-3 { v + 2e-3 * v.signum() } else { v });
            unary(rng, t, &[m, n], Expr::op_with(tag, vec![x()], vec![-1.0, 1.0]))
        }
        "scale" => {
            let c = rng.uniform_range(-3.0, 3.0);
            let t = rng.normal_tensor(&[m, n], 1.0);
            unary(rng, t, &[m, n], Expr::op_with(tag, vec![x()], vec![c]))
        }
        "mean" | "sum" => {
            let t = rng.normal_tensor(&[m, n], 1.0);
            unary(rng, t, &[1, 1], Expr::op(tag, vec![x()]))
        }
        "gather" => {
            // Repeated rows exercise the scatter-add.
            let rows: Vec<f64> = (0..k + 2).map(|_| rng.below(m) as f64).collect();
            let t = rng.normal_tensor(&[m, n], 1.0);
            unary(rng, t, &[rows.len(), n], Expr::op_with(tag, vec![x()], rows))
        }
        "bce_logits" => {
            let label = rng.below(2) as f64;
            let e = Expr::op_with(tag, vec![x()], vec![label]);
            (e, named(vec![("x", Tensor::scalar(3.0 * rng.normal()))]))
        }
        "matmul" | "matmul_bt" | "add" | "sub" | "mul" | "add_row" | "concat_cols" | "concat_rows" => {
            let (xs, ys, out): (Vec<usize>, Vec<usize>, Vec<usize>) = match tag {
                "matmul" => (vec![m, k], vec![k, n], vec![m, n]),
                "matmul_bt" => (vec![m, k], vec![n, k], vec![m, n]),
                "add_row" => (vec![m, n], vec![1, n], vec![m, n]),
                "concat_cols" => (vec![m, k], vec![m, n], vec![m, k + n]),
                "concat_rows" => (vec![m, n], vec![k, n], vec![m + k, n]),
                _ => (vec![m, n], vec![m, n], vec![m, n]),
            };
            let inputs = named(vec![("x", rng.normal_tensor(&xs, 1.0)), ("y", rng.normal_tensor(&ys, 1.0))]);
            (probe(Expr::op(tag, vec![x(), y()]), &out, rng), inputs)
        }
        "kf_fusion" => {
            let t = 1 + rng.below(5);
            let e = Expr::op(
                tag,
                vec![Expr::input("mean"), Expr::input("pi"), Expr::input("values"), Expr::input("precs")],
            );
            let inputs = named(vec![
                ("mean", rng.normal_tensor(&[1, n], 1.0)),
                ("pi", positive(rng, &[1, 1], 0.1, 10.0)),
                ("values", rng.normal_tensor(&[t, n], 1.0)),
                ("precs", positive(rng, &[1, t], 0.1, 10.0)),
            ]);
            (probe(e, &[1, n], rng), inputs)
        }
        "freq_weights" => {
            let sys = positive(rng, &[1, m], 0.1, 10.0);
            let sig = positive(rng, &[1, m], 0.1, 3.0);
            let counts: Vec<f64> = (0..m).map(|_| (1 + rng.below(20)) as f64).collect();
            let e = Expr::op_with(tag, vec![x(), y()], counts);
            (probe(e, &[1, m], rng), named(vec![("x", sys), ("y", sig)]))
        }
        other => panic!("no gradient instance for `{other}`"),
    }
}

/// Worst scaled error between tape gradients and central differences over
/// every input of `expr`.
pub fn check_expr(expr: &Expr, inputs: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut fwd = forward(expr, inputs)?;
    let out = fwd.output;
    let grads = fwd.tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (id, key) in fwd.param_names.iter().enumerate() {
        let x = &inputs[key];
        let numeric = finite_diff_grad(
            |p| {
                let mut moved = inputs.clone();
                moved.insert(key.clone(), p.clone());
                forward(expr, &moved).map_or(f64::NAN, |f| f.value().data()[0])
            },
            x,
            FD_STEP,
        )?;
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        worst = worst.max(scaled_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// Central difference of the loss in one parameter coordinate. When the
/// one-sided slopes disagree the probe straddles a ReLU or clamp kink, and
/// the step shrinks until they agree.
pub fn loss_derivative(model: &mut Model, inst: &CtrInstance, id: usize, c: usize) -> Result<f64> {
    let f0 = model.loss(inst)?;
    let orig = model.params().get(id).data()[c];
    let mut h = FD_STEP;
    loop {
        model.params_mut().get_mut(id).data_mut()[c] = orig + h;
        let up = model.loss(inst);
        model.params_mut().get_mut(id).data_mut()[c] = orig - h;
        let down = model.loss(inst);
        model.params_mut().get_mut(id).data_mut()[c] = orig;
        let (up, down) = (up?, down?);
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        if (fwd - bwd).abs() <= 1e-2 * fwd.abs().max(bwd.abs()).max(1e-4) || h < 1e-7 {
            return Ok((up - down) / (2.0 * h));
        }
        h /= 10.0;
    }
}

/// Scaled error of the model's loss gradient on one instance. Small tensors
/// are checked in full, larger ones at `samples` random coordinates, and
/// every embedding row the instance reads is checked in full.
pub fn check_model_loss(model: &mut Model, inst: &CtrInstance, samples: usize, rng: &mut Rng) -> Result<f64> {
    let mut grads = Grads::new(model.params().len());
    model.accumulate_grads(inst, &mut grads)?;
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for id in 0..model.params().len() {
        let len = model.params().get(id).len();
        if len <= 64 {
            coords.extend((0..len).map(|c| (id, c)));
        } else {
            coords.extend((0..samples).map(|_| (id, rng.below(len))));
        }
    }
    let queries: Vec<usize> = inst.history.iter().map(|e| e.query).chain([inst.query]).collect();
    let items: Vec<usize> = inst.history.iter().map(|e| e.item).chain([inst.item]).collect();
    for (name, rows) in [("query_emb", queries), ("item_emb", items)] {
        let id = model.params().id(name).expect("embedding table present");
        let cols = model.params().get(id).cols();
        coords.extend(rows.iter().flat_map(|&r| (0..cols).map(move |j| (id, r * cols + j))));
    }
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for (id, c) in coords {
        numeric.push(loss_derivative(model, inst, id, c)?);
        analytic.push(grads.get(id).map_or(0.0, |g| g.data()[c]));
    }
    Ok(scaled_error(&analytic, &numeric))
}
