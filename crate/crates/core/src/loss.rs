//! Task losses and the homoscedastic-uncertainty joint loss.
//!
//! Each task noise is learned as s = log σ², which keeps σ² positive with no
//! constraint. The joint loss is
//!
//! ```text
//! exp(-s_c)·L_c + ½·exp(-s_r1)·L_r1 + ½·exp(-s_r2)·L_r2 + ½(s_c + s_r1 + s_r2)
//! ```
//!
//! i.e. 1/σ² on the classification term, 1/2σ² on the regression terms, and
//! the log σ regularizers written as s/2.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learnable log-variances for the three tasks, initialized to 0 (σ = 1).
#[derive(Debug, Clone)]
pub struct UncertaintyParams {
    pub s_c: Tensor,
    pub s_r1: Tensor,
    pub s_r2: Tensor,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self::new()
    }
}

impl UncertaintyParams {
    pub fn new() -> Self {
        UncertaintyParams {
            s_c: Tensor::scalar(0.0),
            s_r1: Tensor::scalar(0.0),
            s_r2: Tensor::scalar(0.0),
        }
    }

    pub fn watch(&self, tape: &Tape) -> UncertaintyVars {
        UncertaintyVars {
            s_c: tape.watch(&self.s_c),
            s_r1: tape.watch(&self.s_r1),
            s_r2: tape.watch(&self.s_r2),
        }
    }
}

pub struct UncertaintyVars {
    pub s_c: Var,
    pub s_r1: Var,
    pub s_r2: Var,
}

/// Every label row must be exactly one-hot.
pub fn validate_one_hot(labels: &Tensor, classes: usize) -> Result<()> {
    if labels.rank() != 2 || labels.shape()[1] != classes {
        return Err(Error::shape(
            "cross_entropy",
            format!("labels {:?} against {} classes", labels.shape(), classes),
        ));
    }
    for (r, row) in labels.data().chunks_exact(classes).enumerate() {
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::Data(format!("label row {r} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy from raw logits, via log-sum-exp.
pub fn cross_entropy_loss(logits: &Var, labels: &Tensor) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape("cross_entropy", format!("logits {:?}", shape)));
    }
    let classes = shape[1];
    let batch = shape[0];
    validate_one_hot(labels, classes)?;
    if labels.shape()[0] != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} label rows against {} logit rows", labels.shape()[0], batch),
        ));
    }
    let onehot = logits.tape().constant(labels);
    logits.log_softmax_lastdim()?.mul(&onehot)?.sum()?.scale(-1.0 / batch as f64)
}

/// Mean squared error over every entry.
pub fn mse_loss(pred: &Var, target: &Tensor) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let t = pred.tape().constant(target);
    pred.sub(&t)?.square()?.mean()
}

/// Uncertainty-weighted combination of the three task losses.
pub fn joint_loss(l_c: &Var, l_r1: &Var, l_r2: &Var, u: &UncertaintyVars) -> Result<Var> {
    let c_term = u.s_c.scale(-1.0)?.exp()?.mul(l_c)?;
    let r1_term = u.s_r1.scale(-1.0)?.exp()?.mul(l_r1)?.scale(0.5)?;
    let r2_term = u.s_r2.scale(-1.0)?.exp()?.mul(l_r2)?.scale(0.5)?;
    let reg = u.s_c.add(&u.s_r1)?.add(&u.s_r2)?.scale(0.5)?;
    c_term.add(&r1_term)?.add(&r2_term)?.add(&reg)
}

/// Value-level stable cross-entropy for evaluation passes.
pub fn cross_entropy_value(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let classes = logits.shape()[1];
    let batch = logits.shape()[0];
    validate_one_hot(labels, classes)?;
    let mut total = 0.0;
    for r in 0..batch {
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (c, y) in labels.data()[r * classes..(r + 1) * classes].iter().enumerate() {
            if *y == 1.0 {
                total += lse - row[c];
            }
        }
    }
    Ok(total / batch as f64)
}

/// Value-level mean squared error.
pub fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.numel() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Value-level joint loss given the current log-variances.
pub fn joint_value(l_c: f64, l_r1: f64, l_r2: f64, u: &UncertaintyParams) -> f64 {
    let (s_c, s_r1, s_r2) = (u.s_c.data()[0], u.s_r1.data()[0], u.s_r2.data()[0]);
    (-s_c).exp() * l_c
        + 0.5 * (-s_r1).exp() * l_r1
        + 0.5 * (-s_r2).exp() * l_r2
        + 0.5 * (s_c + s_r1 + s_r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_hot(rows: &[usize], classes: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * classes];
        for (r, c) in rows.iter().enumerate() {
            data[r * classes + c] = 1.0;
        }
        Tensor::new(vec![rows.len(), classes], data).unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let tape = Tape::new();
        let logits = tape.watch(&Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        let loss = cross_entropy_loss(&logits, &one_hot(&[0], 3)).unwrap();
        assert!(loss.scalar_value().unwrap() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln_3() {
        let tape = Tape::new();
        let logits = tape.watch(&Tensor::zeros(&[4, 3]));
        let loss = cross_entropy_loss(&logits, &one_hot(&[0, 1, 2, 0], 3)).unwrap();
        assert_relative_eq!(loss.scalar_value().unwrap(), 3f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn hand_two_sample_case() {
        // Two rows with the same gap between the true logit and the rest.
        let tape = Tape::new();
        let logits =
            tape.watch(&Tensor::new(vec![2, 3], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap());
        let loss = cross_entropy_loss(&logits, &one_hot(&[0, 1], 3)).unwrap();
        let single = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert_relative_eq!(loss.scalar_value().unwrap(), single, max_relative = 1e-12);
    }

    #[test]
    fn non_one_hot_labels_rejected() {
        let tape = Tape::new();
        let logits = tape.watch(&Tensor::zeros(&[1, 3]));
        let bad = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &bad).is_err());
        let two_hot = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &two_hot).is_err());
    }

    #[test]
    fn mse_trivial_cases() {
        let tape = Tape::new();
        let pred = tape.watch(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = pred.value();
        assert_eq!(mse_loss(&pred, &same).unwrap().scalar_value().unwrap(), 0.0);

        let off2 = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(mse_loss(&pred, &off2).unwrap().scalar_value().unwrap(), 4.0);
    }

    #[test]
    fn mse_hand_case() {
        let tape = Tape::new();
        let pred = tape.watch(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let target = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(
            mse_loss(&pred, &target).unwrap().scalar_value().unwrap(),
            14.0 / 3.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::new();
        let pred = tape.watch(&Tensor::zeros(&[2, 3]));
        assert!(mse_loss(&pred, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn neutral_sigmas_reduce_to_fixed_weights() {
        let tape = Tape::new();
        let u = UncertaintyParams::new().watch(&tape);
        let l_c = tape.watch(&Tensor::scalar(1.2));
        let l_r1 = tape.watch(&Tensor::scalar(0.8));
        let l_r2 = tape.watch(&Tensor::scalar(2.0));
        let j = joint_loss(&l_c, &l_r1, &l_r2, &u).unwrap().scalar_value().unwrap();
        assert_relative_eq!(j, 1.2 + 0.4 + 1.0, max_relative = 1e-15);
    }

    #[test]
    fn all_zero_losses_and_sigmas_give_zero() {
        let tape = Tape::new();
        let u = UncertaintyParams::new().watch(&tape);
        let zero = tape.watch(&Tensor::scalar(0.0));
        let j = joint_loss(&zero, &zero, &zero, &u).unwrap().scalar_value().unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn regression_stationary_point_is_ln_l() {
        // d/ds [ 1/2 e^{-s} L + s/2 ] = 0  at  s = ln L; check the gradient
        // sign flips around ln 2 for L = 2.
        let eval_grad = |s: f64| -> f64 {
            let tape = Tape::new();
            let mut u = UncertaintyParams::new();
            u.s_r1 = Tensor::scalar(s);
            let uv = u.watch(&tape);
            let l_c = tape.watch(&Tensor::scalar(0.0));
            let l_r1 = tape.watch(&Tensor::scalar(2.0));
            let l_r2 = tape.watch(&Tensor::scalar(0.0));
            let j = joint_loss(&l_c, &l_r1, &l_r2, &uv).unwrap();
            let grads = tape.backward(&j).unwrap();
            grads.get(&uv.s_r1).data()[0]
        };
        let at_opt = eval_grad(2f64.ln());
        assert!(at_opt.abs() < 1e-12, "gradient at ln 2 should vanish, got {at_opt}");
        assert!(eval_grad(0.0) < 0.0);
        assert!(eval_grad(2.0) > 0.0);
    }

    #[test]
    fn joint_loss_gradcheck() {
        let err = crate::check::grad_check(
            &[
                Tensor::scalar(0.3),
                Tensor::scalar(-0.2),
                Tensor::scalar(0.1),
                Tensor::scalar(1.5),
                Tensor::scalar(0.7),
                Tensor::scalar(2.2),
            ],
            |_t, vs| {
                let u = UncertaintyVars { s_c: vs[0].clone(), s_r1: vs[1].clone(), s_r2: vs[2].clone() };
                joint_loss(&vs[3], &vs[4], &vs[5], &u)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "joint loss gradcheck err {err}");
    }
}
