//! Gradient checking against central finite differences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with an absolute floor, so near-zero gradients compare
/// absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

fn eval_loss<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = build(&tape, &vars)?;
    loss.scalar_value()
}

fn analytic_grads<F>(params: &[Tensor], build: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    Ok(vars.iter().map(|v| grads.get(v)).collect())
}

/// Compare reverse-mode gradients of a scalar function against central finite
/// differences over **every** parameter entry; returns the worst relative
/// error. `eps` must lie in (0, 1e-2].
pub fn grad_check<F>(params: &[Tensor], build: F, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |j| (pi, j)))
        .collect();
    grad_check_entries(params, build, eps, &entries)
}

/// Same check over a seeded random subset of parameter entries, for models
/// too large to sweep exhaustively.
pub fn grad_check_sampled<F>(
    params: &[Tensor],
    build: F,
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |j| (pi, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries.shuffle(&mut rng);
    entries.truncate(max_entries);
    grad_check_entries(params, build, eps, &entries)
}

fn grad_check_entries<F>(
    params: &[Tensor],
    build: F,
    eps: f64,
    entries: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps must be in (0, 1e-2], got {eps}")));
    }
    let analytic = analytic_grads(params, &build)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for &(pi, j) in entries {
        let orig = work[pi].data()[j];
        work[pi].data_mut()[j] = orig + eps;
        let lp = eval_loss(&work, &build)?;
        work[pi].data_mut()[j] = orig - eps;
        let lm = eval_loss(&work, &build)?;
        work[pi].data_mut()[j] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[pi].data()[j], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{
        batch_norm_eval, batch_norm_train, dilated_conv, lstm_seq, mix_experts, stack_rows,
        stack_time,
    };
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;

    #[test]
    fn quadratic_gradient_is_nearly_exact() {
        let p = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.1]).unwrap();
        let err =
            grad_check(&[p], |_t, vs| vs[0].square()?.sum(), EPS).unwrap();
        assert!(err <= 1e-6, "quadratic err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            &[p],
            |t, vs| {
                let c = t.constant(&Tensor::scalar(7.0));
                vs[0].sum()?.scale(0.0)?.add(&c)
            },
            EPS,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(&[p.clone()], |_t, vs| vs[0].sum(), 0.0).is_err());
        assert!(grad_check(&[p], |_t, vs| vs[0].sum(), 0.5).is_err());
    }

    #[test]
    fn injected_fault_is_detected() {
        let p = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let err = grad_check(
            &[p],
            |t, vs| {
                t.inject_backward_fault("sigmoid", 0.05);
                vs[0].sigmoid()?.sum()
            },
            EPS,
        )
        .unwrap();
        assert!(err > 1e-3, "fault should surface, err {err}");
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(rng, shape, -1.0, 1.0)
    }

    /// Composite exercising every pointwise primitive plus reductions.
    #[test]
    fn pointwise_chain_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[3, 4]);
            let s = Tensor::scalar(0.7);
            let err = grad_check(
                &[a, b, s],
                |_t, vs| {
                    let x = vs[0].mul(&vs[1])?.sigmoid()?;
                    let y = vs[0].sub(&vs[1])?.tanh()?;
                    let z = vs[0].add(&vs[2])?.relu()?;
                    let w = vs[1].mul(&vs[2])?.exp()?;
                    x.add(&y)?.add(&z)?.add(&w)?.mean()
                },
                EPS,
            )
            .unwrap();
            assert!(err <= TOL, "pointwise chain err {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn matmul_gradients_match_fd(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let err = grad_check(&[a, b], |_t, vs| vs[0].matmul(&vs[1])?.square()?.sum(), EPS).unwrap();
            prop_assert!(err <= TOL, "matmul err {}", err);
        }

        #[test]
        fn matvec_and_transpose_gradients_match_fd(m in 1usize..6, k in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[m, k]);
            let x = rand_tensor(&mut rng, &[m]);
            let err = grad_check(
                &[a, x],
                |_t, vs| vs[0].transpose()?.matvec(&vs[1])?.tanh()?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "matvec err {}", err);
        }

        #[test]
        fn softmax_gradients_match_fd(rows in 1usize..5, cols in 2usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[rows, cols]);
            let w = rand_tensor(&mut rng, &[rows, cols]);
            let err = grad_check(
                &[a, w.clone()],
                |_t, vs| vs[0].softmax_lastdim()?.mul(&vs[1])?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "softmax err {}", err);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let a = rand_tensor(&mut rng, &[rows, cols]);
            let err = grad_check(
                &[a, w],
                |_t, vs| vs[0].log_softmax_lastdim()?.mul(&vs[1])?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "log_softmax err {}", err);
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, scale in -100.0f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = rand_tensor(&mut rng, &[rows, cols]);
            for v in a.data_mut() {
                *v *= scale.abs() + 1.0;
            }
            let tape = Tape::new();
            let y = tape.watch(&a).softmax_lastdim().unwrap().value();
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {}", s);
            }
        }

        #[test]
        fn structural_op_gradients_match_fd(b in 1usize..4, t in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[b, t, c]);
            let v = rand_tensor(&mut rng, &[c]);
            let err = grad_check(
                &[x, v],
                |_t, vs| {
                    let sliced = vs[0].slice_time(0)?;
                    let with_rows = vs[0].add_rows(&vs[1])?;
                    let restacked = stack_time(&(0..t).map(|i| with_rows.slice_time(i)).collect::<Result<Vec<_>>>()?)?;
                    sliced.sum()?.add(&restacked.square()?.mean()?)
                },
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "structural err {}", err);
        }

        #[test]
        fn conv_gradients_match_fd(
            bsz in 1usize..3, t in 1usize..7, cin in 1usize..4, cout in 1usize..4,
            k in 1usize..3, d in 1usize..3, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[bsz, t, cin]);
            let w = rand_tensor(&mut rng, &[k, cin, cout]);
            let b = rand_tensor(&mut rng, &[cout]);
            let err = grad_check(
                &[x, w, b],
                |_t, vs| dilated_conv(&vs[0], &vs[1], &vs[2], d)?.square()?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "conv err {}", err);
        }

        #[test]
        fn batch_norm_gradients_match_fd(rows in 2usize..6, c in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[rows, c]);
            let gamma = rand_tensor(&mut rng, &[c]);
            let beta = rand_tensor(&mut rng, &[c]);
            let err = grad_check(
                &[x.clone(), gamma.clone(), beta.clone()],
                |_t, vs| batch_norm_train(&vs[0], &vs[1], &vs[2])?.0.square()?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "bn train err {}", err);
            let mean = rand_tensor(&mut rng, &[c]);
            let var = Tensor::uniform(&mut rng, &[c], 0.3, 2.0);
            let err = grad_check(
                &[x, gamma, beta],
                |_t, vs| batch_norm_eval(&vs[0], &vs[1], &vs[2], &mean, &var)?.square()?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "bn eval err {}", err);
        }

        #[test]
        fn mix_and_stack_gradients_match_fd(bsz in 1usize..4, n in 1usize..4, he in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let experts: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, &[bsz, he])).collect();
            let logits = rand_tensor(&mut rng, &[bsz, n]);
            let mut params = experts.clone();
            params.push(logits);
            let err = grad_check(
                &params,
                |_t, vs| {
                    let w = vs[n].softmax_lastdim()?;
                    mix_experts(&vs[..n], &w)?.square()?.sum()
                },
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "mix err {}", err);
            let rows: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, &[he])).collect();
            let err = grad_check(
                &rows,
                |_t, vs| stack_rows(vs)?.tanh()?.sum(),
                EPS,
            ).unwrap();
            prop_assert!(err <= TOL, "stack_rows err {}", err);
        }
    }

    /// Three-step unrolled LSTM gradient check.
    #[test]
    fn lstm_three_step_unroll_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (d, h) = (3, 4);
        let p = crate::lstm::LstmParams::init(d, h, &mut rng);
        let xs = rand_tensor(&mut rng, &[2, 3, d]);
        let params = vec![
            xs,
            p.w_i.clone(),
            p.w_f.clone(),
            p.w_o.clone(),
            p.w_c.clone(),
            p.u_i.clone(),
            p.u_f.clone(),
            p.u_o.clone(),
            p.u_c.clone(),
            p.b_i.clone(),
            p.b_f.clone(),
            p.b_o.clone(),
            p.b_c.clone(),
        ];
        let err = grad_check(
            &params,
            |_t, vs| {
                let vars = crate::lstm::LstmVars {
                    w_i: vs[1].clone(),
                    w_f: vs[2].clone(),
                    w_o: vs[3].clone(),
                    w_c: vs[4].clone(),
                    u_i: vs[5].clone(),
                    u_f: vs[6].clone(),
                    u_o: vs[7].clone(),
                    u_c: vs[8].clone(),
                    b_i: vs[9].clone(),
                    b_f: vs[10].clone(),
                    b_o: vs[11].clone(),
                    b_c: vs[12].clone(),
                };
                lstm_seq(&vs[0], &vars)?.square()?.sum()
            },
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "lstm unroll err {err}");
    }
}
