use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Fixed random weights `[x.cols, 1]` so a tensor output collapses to a
/// scalar with a generic upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = tape.value(out).clone();
    let w = random(&mut rng, t.shape());
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0]));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![3.3, 3.3]));
    let y = tape.softmax_last(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_small_product() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1e308]));
    assert!(matches!(
        tape.scale(a, 10.0),
        Err(crate::Error::NonFinite { op: "scale" })
    ));
}

#[test]
fn ops_without_gradient_inputs_are_not_recorded() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0]));
    let b = tape.sigmoid(a).unwrap();
    assert_eq!(tape.recorded(), 0);
    assert!(!tape.requires_grad(b));
    let x = tape.leaf(Tensor::vector(vec![1.0]), true);
    let _ = tape.add(x, b).unwrap();
    assert_eq!(tape.recorded(), 1);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0]), true);
    let y = tape.sigmoid(x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(crate::Error::NotScalar(_))));
}

#[test]
fn sum_of_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&mut rng, &[4, 3]);
    let point = random(&mut rng, &[2, 4]);
    let report = grad_check(
        |tape, x| {
            let w = tape.constant(w.clone());
            let y = tape.matmul(x, w)?;
            tape.sum(y)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn grad_check_of_sum_is_all_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = random(&mut rng, &[3, 2]);
    let report = grad_check(|tape, x| tape.sum(x), &point, 1e-5).unwrap();
    assert!(report.passed);
    assert!(report.analytic.iter().all(|&g| g == 1.0));
}

#[test]
fn grad_check_detects_corrupted_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let point = random(&mut rng, &[5]);
    let report = grad_check(
        |tape, x| {
            // forward is x^2, backward wrongly claims 3x
            let v = tape.value(x).map(|a| a * a);
            let y = tape.custom(
                x,
                v,
                Box::new(|input, _, g| {
                    let data = input.data().iter().zip(g.data()).map(|(a, gv)| 3.0 * a * gv).collect();
                    Tensor::new(input.shape().to_vec(), data).unwrap()
                }),
            )?;
            tape.sum(y)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
}

fn inputs_for(kind: Primitive, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let r = rng.gen_range(1..4);
    let c = rng.gen_range(1..5);
    match kind {
        Primitive::MatMul => {
            let k = rng.gen_range(1..4);
            vec![random(rng, &[r, k]), random(rng, &[k, c])]
        }
        Primitive::ConcatLast => {
            let c2 = rng.gen_range(1..4);
            vec![random(rng, &[r, c]), random(rng, &[r, c2])]
        }
        Primitive::Add | Primitive::Subtract | Primitive::Multiply => {
            vec![random(rng, &[r, c]), random(rng, &[r, c])]
        }
        Primitive::Relu => {
            // keep away from the kink
            let mut t = random(rng, &[r, c]);
            t.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.05 {
                    *v += 0.1
                }
            });
            vec![t]
        }
        _ => vec![random(rng, &[r, c])],
    }
}

/// Every primitive's gradient agrees with central differences on 100
/// random instances, for each of its inputs.
#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in Primitive::ALL {
        for trial in 0..100u64 {
            let inputs = inputs_for(kind, &mut rng);
            for wrt in 0..inputs.len() {
                let seed = trial * 31 + wrt as u64;
                let fixed = inputs.clone();
                let f = |tape: &mut Tape, x: Var| -> Result<Var, crate::Error> {
                    let vars: Vec<Var> = fixed
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == wrt { x } else { tape.constant(t.clone()) })
                        .collect();
                    // dropout is checked in training mode through its mask below
                    let out = tape.apply(kind, &vars)?;
                    project(tape, out, seed)
                };
                let report = grad_check(f, &inputs[wrt], 1e-4).unwrap();
                assert!(
                    report.passed,
                    "{kind:?} input {wrt} trial {trial}: rel err {}",
                    report.max_rel_error
                );
            }
        }
    }
}

#[test]
fn dropout_gradient_in_training_mode_follows_mask() {
    let mut tape = Tape::training(9);
    let x = tape.leaf(Tensor::filled(&[200], 1.0), true);
    let y = tape.dropout(x, 0.3).unwrap();
    let out = tape.value(y).data().to_vec();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), out.as_slice());
    let dropped = out.iter().filter(|&&v| v == 0.0).count();
    assert!(dropped > 30 && dropped < 90, "dropped {dropped}");
    assert!(out.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn dropout_is_identity_in_eval_or_at_zero() {
    let mut eval = Tape::new();
    let x = eval.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert_eq!(eval.dropout(x, 0.9).unwrap(), x);
    let mut train = Tape::training(1);
    let x = train.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert_eq!(train.dropout(x, 0.0).unwrap(), x);
}

#[test]
fn backward_runs_one_rule_per_recorded_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[3, 3]), true);
    let c = tape.constant(random(&mut rng, &[3, 3]));
    let a = tape.matmul(x, c).unwrap();
    let _unused = tape.sigmoid(c).unwrap();
    let b = tape.tanh(a).unwrap();
    let d = tape.mul(b, x).unwrap();
    let s = tape.softmax_last(d).unwrap();
    let loss = tape.mean(s).unwrap();
    let recorded = tape.recorded();
    assert_eq!(recorded, 5);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.rules_applied(), recorded);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[20, 7]).map(|v| v * 30.0));
    let y = tape.softmax_last(x).unwrap();
    let t = tape.value(y);
    for r in 0..t.rows() {
        let row = t.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn auxiliary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let bias = random(&mut rng, &[3]);
    let scale = random(&mut rng, &[4]);
    let other = random(&mut rng, &[2, 3]);
    let a = Arc::new(CsrMatrix::from_triplets(
        4,
        4,
        &[(0, 0, 0.5), (0, 2, 0.25), (1, 1, 1.0), (3, 0, -0.7), (2, 3, 0.1)],
    ));
    let point = random(&mut rng, &[4, 3]);
    type Case<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var, crate::Error> + 'a>;
    let cases: Vec<(&str, Case<'_>)> = vec![
        (
            "add_row",
            Box::new(|t, x| {
                let b = t.constant(bias.clone());
                let y = t.add_row(x, b)?;
                project(t, y, 1)
            }),
        ),
        (
            "mul_col",
            Box::new(|t, x| {
                let s = t.constant(scale.clone());
                let y = t.mul_col(x, s)?;
                project(t, y, 2)
            }),
        ),
        (
            "concat_rows",
            Box::new(|t, x| {
                let o = t.constant(other.clone());
                let y = t.concat_rows(&[o, x, x])?;
                project(t, y, 3)
            }),
        ),
        (
            "gather_rows",
            Box::new(|t, x| {
                let y = t.gather_rows(x, &[3, 0, 3, 1])?;
                project(t, y, 4)
            }),
        ),
        (
            "transpose",
            Box::new(|t, x| {
                let y = t.transpose(x)?;
                let y = t.mul(y, y)?;
                project(t, y, 7)
            }),
        ),
        (
            "log_sigmoid",
            Box::new(|t, x| {
                let y = t.log_sigmoid(x)?;
                project(t, y, 5)
            }),
        ),
        (
            "sum_last",
            Box::new(|t, x| {
                let y = t.sum_last(x)?;
                project(t, y, 6)
            }),
        ),
        (
            "spmm",
            Box::new(|t, x| {
                let y = t.spmm(a.clone(), x)?;
                project(t, y, 7)
            }),
        ),
    ];
    for (name, f) in cases {
        let report = grad_check(&f, &point, 1e-4).unwrap();
        assert!(report.passed, "{name}: {}", report.max_rel_error);
    }
    // the per-row factor of mul_col is itself differentiable
    let x_fixed = point.clone();
    let report = grad_check(
        |t, s| {
            let x = t.constant(x_fixed.clone());
            let y = t.mul_col(x, s)?;
            project(t, y, 8)
        },
        &scale,
        1e-4,
    )
    .unwrap();
    assert!(report.passed);
}

#[test]
fn time_encoding_frequency_gradient() {
    let omega = Tensor::vector(vec![1.0, 0.3, 0.01]);
    let times = [0.0, 0.7, 2.5, 40.0];
    let report = grad_check(
        |t, w| {
            let y = t.time_encode(w, &times)?;
            project(t, y, 21)
        },
        &omega,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
}

#[test]
fn attention_gradient_for_every_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let q = random(&mut rng, &[3, 4]);
    let k = random(&mut rng, &[9, 4]);
    let v = random(&mut rng, &[9, 2]);
    // second query fully masked, third partially
    let mask = vec![true, true, true, false, false, false, true, false, true];
    let scale = 0.5;
    let parts = [q.clone(), k.clone(), v.clone()];
    for wrt in 0..3 {
        let fixed = parts.clone();
        let mask = mask.clone();
        let report = grad_check(
            move |t, x| {
                let vars: Vec<Var> = fixed
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == wrt { x } else { t.constant(p.clone()) })
                    .collect();
                let y = t.attention(vars[0], vars[1], vars[2], &mask, scale)?;
                project(t, y, 40 + wrt as u64)
            },
            &parts[wrt],
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "input {wrt}: {}", report.max_rel_error);
    }
}

#[test]
fn fully_masked_query_gives_zero_row() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::filled(&[1, 2], 1.0));
    let k = tape.constant(Tensor::filled(&[2, 2], 1.0));
    let v = tape.constant(Tensor::filled(&[2, 3], 5.0));
    let y = tape.attention(q, k, v, &[false, false], 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
}
