//! Per-task fully connected heads: linear -> ReLU -> linear.
//!
//! The intention tower emits raw logits (softmax happens inside the loss or
//! at prediction time); the two regression towers emit one displacement per
//! horizon step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TowerParams {
    /// `[hidden, in_dim]`
    pub l1_w: Tensor,
    /// `[hidden]`
    pub l1_b: Tensor,
    /// `[out_dim, hidden]`
    pub l2_w: Tensor,
    /// `[out_dim]`
    pub l2_b: Tensor,
}

impl TowerParams {
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let b1 = (1.0 / in_dim as f64).sqrt();
        let b2 = (1.0 / hidden as f64).sqrt();
        TowerParams {
            l1_w: Tensor::uniform(rng, &[hidden, in_dim], -b1, b1),
            l1_b: Tensor::zeros(&[hidden]),
            l2_w: Tensor::uniform(rng, &[out_dim, hidden], -b2, b2),
            l2_b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.l2_w.shape()[0]
    }
}

/// The three task heads, disjoint parameters.
#[derive(Debug, Clone)]
pub struct Towers {
    pub intention: TowerParams,
    pub longitudinal: TowerParams,
    pub lateral: TowerParams,
}

impl Towers {
    pub fn init<R: Rng>(
        in_dim: usize,
        hidden: usize,
        n_classes: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        Towers {
            intention: TowerParams::init(in_dim, hidden, n_classes, rng),
            longitudinal: TowerParams::init(in_dim, hidden, horizon, rng),
            lateral: TowerParams::init(in_dim, hidden, horizon, rng),
        }
    }

    /// Tasks are 1-based: 1 intention, 2 longitudinal, 3 lateral.
    pub fn by_index(&self, k: usize) -> Result<&TowerParams> {
        match k {
            1 => Ok(&self.intention),
            2 => Ok(&self.longitudinal),
            3 => Ok(&self.lateral),
            _ => Err(Error::Config(format!("task index {k} out of 1..=3"))),
        }
    }

    pub fn watch(&self, tape: &Tape) -> [TowerVars; 3] {
        [self.intention.watch(tape), self.longitudinal.watch(tape), self.lateral.watch(tape)]
    }
}

pub struct TowerVars {
    pub l1_w: Var,
    pub l1_b: Var,
    pub l2_w: Var,
    pub l2_b: Var,
}

impl TowerParams {
    pub fn watch(&self, tape: &Tape) -> TowerVars {
        TowerVars {
            l1_w: tape.watch(&self.l1_w),
            l1_b: tape.watch(&self.l1_b),
            l2_w: tape.watch(&self.l2_w),
            l2_b: tape.watch(&self.l2_b),
        }
    }
}

/// Batched tower: `[B, in] -> [B, out]`.
pub fn tower_forward_var(mixed: &Var, vars: &TowerVars) -> Result<Var> {
    let h = mixed.matmul(&vars.l1_w.transpose()?)?.add_rows(&vars.l1_b)?.relu()?;
    h.matmul(&vars.l2_w.transpose()?)?.add_rows(&vars.l2_b)
}

/// Per-sample tower: `[in] -> [out]`.
pub fn tower_forward(mixed: &Tensor, tower: &TowerParams) -> Result<Tensor> {
    if mixed.rank() != 1 || mixed.shape()[0] != tower.l1_w.shape()[1] {
        return Err(Error::shape(
            "tower_forward",
            format!("input {:?} against weights {:?}", mixed.shape(), tower.l1_w.shape()),
        ));
    }
    let tape = Tape::new();
    let x = tape.watch(&mixed.reshaped(&[1, mixed.shape()[0]])?);
    let vars = tower.watch(&tape);
    let out = tower_forward_var(&x, &vars)?.value();
    out.reshaped(&[tower.out_dim()])
}

/// Class prediction is the logit argmax.
pub fn predict_intention(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, v) in logits.data().iter().enumerate() {
        if *v > logits.data()[best] {
            best = i;
        }
    }
    best
}
