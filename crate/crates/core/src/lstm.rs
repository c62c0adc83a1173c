//! LSTM cell and sequence runner used by both the experts and the gates.
//!
//! The cell follows the standard formulation: input/forget/output gates from
//! sigmoid pre-activations, candidate memory from tanh, then
//! `c_t = f ⊙ c_{t-1} + i ⊙ c̃_t` and `h_t = o ⊙ tanh(c_t)`.
//!
//! On a tape, a whole sequence records as one fused node whose backward pass
//! is ordinary truncation-free BPTT; the per-step gate activations are saved
//! on the node. Gate matmuls run packed as `[D,4H]`/`[H,4H]` products.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::{gemm, sigmoid_scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_c: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl LstmParams {
    /// Uniform ±sqrt(1/H) init, except the forget-gate bias which starts at
    /// 1.0 to keep early memory alive.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let w = |rng: &mut R| Tensor::uniform(rng, &[hidden, input_dim], -bound, bound);
        let u = |rng: &mut R| Tensor::uniform(rng, &[hidden, hidden], -bound, bound);
        let b = |rng: &mut R| Tensor::uniform(rng, &[hidden], -bound, bound);
        LstmParams {
            w_i: w(rng),
            w_f: w(rng),
            w_o: w(rng),
            w_c: w(rng),
            u_i: u(rng),
            u_f: u(rng),
            u_o: u(rng),
            u_c: u(rng),
            b_i: b(rng),
            b_f: Tensor::ones(&[hidden]),
            b_o: b(rng),
            b_c: b(rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_i: Tensor::zeros(&[hidden, input_dim]),
            w_f: Tensor::zeros(&[hidden, input_dim]),
            w_o: Tensor::zeros(&[hidden, input_dim]),
            w_c: Tensor::zeros(&[hidden, input_dim]),
            u_i: Tensor::zeros(&[hidden, hidden]),
            u_f: Tensor::zeros(&[hidden, hidden]),
            u_o: Tensor::zeros(&[hidden, hidden]),
            u_c: Tensor::zeros(&[hidden, hidden]),
            b_i: Tensor::zeros(&[hidden]),
            b_f: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
            b_c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let d = self.input_dim();
        for (name, t, want) in [
            ("w_i", &self.w_i, [h, d]),
            ("w_f", &self.w_f, [h, d]),
            ("w_o", &self.w_o, [h, d]),
            ("w_c", &self.w_c, [h, d]),
            ("u_i", &self.u_i, [h, h]),
            ("u_f", &self.u_f, [h, h]),
            ("u_o", &self.u_o, [h, h]),
            ("u_c", &self.u_c, [h, h]),
        ] {
            if t.shape() != want {
                return Err(Error::shape(
                    "lstm_params",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), want),
                ));
            }
        }
        for (name, t) in
            [("b_i", &self.b_i), ("b_f", &self.b_f), ("b_o", &self.b_o), ("b_c", &self.b_c)]
        {
            if t.shape() != [h] {
                return Err(Error::shape(
                    "lstm_params",
                    format!("{name} has shape {:?}, expected [{h}]", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn watch(&self, tape: &Tape) -> LstmVars {
        LstmVars {
            w_i: tape.watch(&self.w_i),
            w_f: tape.watch(&self.w_f),
            w_o: tape.watch(&self.w_o),
            w_c: tape.watch(&self.w_c),
            u_i: tape.watch(&self.u_i),
            u_f: tape.watch(&self.u_f),
            u_o: tape.watch(&self.u_o),
            u_c: tape.watch(&self.u_c),
            b_i: tape.watch(&self.b_i),
            b_f: tape.watch(&self.b_f),
            b_o: tape.watch(&self.b_o),
            b_c: tape.watch(&self.b_c),
        }
    }
}

/// Hidden state and memory cell carried between steps.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: Tensor::zeros(&[hidden]), c: Tensor::zeros(&[hidden]) }
    }
}

/// Watched parameter handles on a tape, in the fused op's parent order.
pub struct LstmVars {
    pub w_i: Var,
    pub w_f: Var,
    pub w_o: Var,
    pub w_c: Var,
    pub u_i: Var,
    pub u_f: Var,
    pub u_o: Var,
    pub u_c: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_c: Var,
}

impl LstmVars {
    fn ids(&self, xs: usize) -> [usize; 13] {
        [
            xs,
            self.w_i.id(),
            self.w_f.id(),
            self.w_o.id(),
            self.w_c.id(),
            self.u_i.id(),
            self.u_f.id(),
            self.u_o.id(),
            self.u_c.id(),
            self.b_i.id(),
            self.b_f.id(),
            self.b_o.id(),
            self.b_c.id(),
        ]
    }

    fn values(&self) -> LstmParams {
        LstmParams {
            w_i: self.w_i.value(),
            w_f: self.w_f.value(),
            w_o: self.w_o.value(),
            w_c: self.w_c.value(),
            u_i: self.u_i.value(),
            u_f: self.u_f.value(),
            u_o: self.u_o.value(),
            u_c: self.u_c.value(),
            b_i: self.b_i.value(),
            b_f: self.b_f.value(),
            b_o: self.b_o.value(),
            b_c: self.b_c.value(),
        }
    }
}

// Gate order inside packed buffers.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_O: usize = 2;
const GATE_G: usize = 3;

/// Parameters repacked for batched gate products: wx `[D,4H]`, uh `[H,4H]`,
/// bias `[4H]`.
struct Packed {
    wx: Vec<f64>,
    uh: Vec<f64>,
    bias: Vec<f64>,
    d: usize,
    h: usize,
}

fn pack(p: &LstmParams) -> Packed {
    let d = p.input_dim();
    let h = p.hidden();
    let mut wx = vec![0.0; d * 4 * h];
    let mut uh = vec![0.0; h * 4 * h];
    let mut bias = vec![0.0; 4 * h];
    let ws = [&p.w_i, &p.w_f, &p.w_o, &p.w_c];
    let us = [&p.u_i, &p.u_f, &p.u_o, &p.u_c];
    let bs = [&p.b_i, &p.b_f, &p.b_o, &p.b_c];
    for (g, w) in ws.iter().enumerate() {
        for row in 0..h {
            for col in 0..d {
                wx[col * 4 * h + g * h + row] = w.data()[row * d + col];
            }
        }
    }
    for (g, u) in us.iter().enumerate() {
        for row in 0..h {
            for col in 0..h {
                uh[col * 4 * h + g * h + row] = u.data()[row * h + col];
            }
        }
    }
    for (g, b) in bs.iter().enumerate() {
        bias[g * h..(g + 1) * h].copy_from_slice(b.data());
    }
    Packed { wx, uh, bias, d, h }
}

/// One batched step over pre-gathered `x_t`. Gates land in `gates` (`[B,4H]`,
/// already activated), `c`/`h` are updated in place.
fn step(packed: &Packed, bsz: usize, x_t: &[f64], h: &mut [f64], c: &mut [f64], gates: &mut [f64]) {
    let hs = packed.h;
    let four = 4 * hs;
    for b in 0..bsz {
        gates[b * four..(b + 1) * four].copy_from_slice(&packed.bias);
    }
    gemm(false, false, bsz, packed.d, four, 1.0, x_t, &packed.wx, 1.0, gates);
    gemm(false, false, bsz, hs, four, 1.0, h, &packed.uh, 1.0, gates);
    for b in 0..bsz {
        let row = &mut gates[b * four..(b + 1) * four];
        for v in row[..3 * hs].iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        for v in row[3 * hs..].iter_mut() {
            *v = v.tanh();
        }
        for j in 0..hs {
            let i = row[GATE_I * hs + j];
            let f = row[GATE_F * hs + j];
            let o = row[GATE_O * hs + j];
            let g = row[GATE_G * hs + j];
            let cn = f * c[b * hs + j] + i * g;
            c[b * hs + j] = cn;
            h[b * hs + j] = o * cn.tanh();
        }
    }
}

/// Single cell step: `(x_t, state) -> (h_t, new state)`.
pub fn lstm_cell_step(x_t: &Tensor, state: &LstmState, p: &LstmParams) -> Result<(Tensor, LstmState)> {
    p.validate()?;
    let d = p.input_dim();
    let h = p.hidden();
    if x_t.shape() != [d] || state.h.shape() != [h] || state.c.shape() != [h] {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x {:?}, h {:?}, c {:?} against D={d}, H={h}",
                x_t.shape(),
                state.h.shape(),
                state.c.shape()
            ),
        ));
    }
    let packed = pack(p);
    let mut hb = state.h.data().to_vec();
    let mut cb = state.c.data().to_vec();
    let mut gates = vec![0.0; 4 * h];
    step(&packed, 1, x_t.data(), &mut hb, &mut cb, &mut gates);
    let h_t = Tensor::new(vec![h], hb)?;
    let c_t = Tensor::new(vec![h], cb)?;
    Ok((h_t.clone(), LstmState { h: h_t, c: c_t }))
}

/// Iterated cell over `[T, D]`; returns all hidden states `[T, H]`.
pub fn lstm_run(xs: &Tensor, p: &LstmParams, init: &LstmState) -> Result<Tensor> {
    p.validate()?;
    let d = p.input_dim();
    let h = p.hidden();
    if xs.rank() != 2 || xs.shape()[1] != d {
        return Err(Error::shape("lstm_run", format!("input {:?} against D={d}", xs.shape())));
    }
    let t = xs.shape()[0];
    if t < 1 {
        return Err(Error::shape("lstm_run", "sequence must have at least one step"));
    }
    let packed = pack(p);
    let mut hb = init.h.data().to_vec();
    let mut cb = init.c.data().to_vec();
    let mut gates = vec![0.0; 4 * h];
    let mut out = Vec::with_capacity(t * h);
    for step_idx in 0..t {
        let x_t = &xs.data()[step_idx * d..(step_idx + 1) * d];
        step(&packed, 1, x_t, &mut hb, &mut cb, &mut gates);
        out.extend_from_slice(&hb);
    }
    Tensor::new(vec![t, h], out)
}

/// Fused tape op: LSTM over `[B,T,D]` (or `[T,D]`) with zero initial state,
/// producing the hidden sequence and saving per-step gates for BPTT.
pub(crate) fn lstm_seq_op(xs: &Var, p: &LstmVars) -> Result<Var> {
    let params = p.values();
    params.validate()?;
    let xv = xs.value();
    let d = params.input_dim();
    let h = params.hidden();
    let (bsz, t, squeeze) = match xv.rank() {
        3 => (xv.shape()[0], xv.shape()[1], false),
        2 => (1, xv.shape()[0], true),
        _ => {
            return Err(Error::shape(
                "lstm_seq",
                format!("input must be rank 2 or 3, got {:?}", xv.shape()),
            ))
        }
    };
    if xv.shape()[xv.rank() - 1] != d {
        return Err(Error::shape(
            "lstm_seq",
            format!("input {:?} does not match D={d}", xv.shape()),
        ));
    }
    if t < 1 {
        return Err(Error::shape("lstm_seq", "sequence must have at least one step"));
    }

    let packed = pack(&params);
    let mut hb = vec![0.0; bsz * h];
    let mut cb = vec![0.0; bsz * h];
    let mut gates = vec![0.0; bsz * 4 * h];
    let mut xbuf = vec![0.0; bsz * d];
    let mut out = vec![0.0; bsz * t * h];
    // Saved per step: activated gates [T,B,4H] and cells [T,B,H].
    let mut gates_all = vec![0.0; t * bsz * 4 * h];
    let mut c_all = vec![0.0; t * bsz * h];
    for ti in 0..t {
        for b in 0..bsz {
            let src = (b * t + ti) * d;
            xbuf[b * d..(b + 1) * d].copy_from_slice(&xv.data()[src..src + d]);
        }
        step(&packed, bsz, &xbuf, &mut hb, &mut cb, &mut gates);
        gates_all[ti * bsz * 4 * h..(ti + 1) * bsz * 4 * h].copy_from_slice(&gates);
        c_all[ti * bsz * h..(ti + 1) * bsz * h].copy_from_slice(&cb);
        for b in 0..bsz {
            let dst = (b * t + ti) * h;
            out[dst..dst + h].copy_from_slice(&hb[b * h..(b + 1) * h]);
        }
    }
    let shape = if squeeze { vec![t, h] } else { vec![bsz, t, h] };
    let value = Tensor::from_raw(shape, out);
    let saved = vec![
        Tensor::from_raw(vec![t, bsz, 4 * h], gates_all),
        Tensor::from_raw(vec![t, bsz, h], c_all),
    ];
    xs.tape().push(Op::LstmSeq { parents: p.ids(xs.id()) }, value, saved)
}

/// BPTT over one fused LSTM node. Returns gradients in parent order.
pub(crate) fn lstm_seq_backward(
    node: &Node,
    gy: &Tensor,
    parents: &[usize; 13],
    nodes: &[Node],
) -> Result<Vec<Tensor>> {
    let xv = &nodes[parents[0]].value;
    let params = LstmParams {
        w_i: nodes[parents[1]].value.clone(),
        w_f: nodes[parents[2]].value.clone(),
        w_o: nodes[parents[3]].value.clone(),
        w_c: nodes[parents[4]].value.clone(),
        u_i: nodes[parents[5]].value.clone(),
        u_f: nodes[parents[6]].value.clone(),
        u_o: nodes[parents[7]].value.clone(),
        u_c: nodes[parents[8]].value.clone(),
        b_i: nodes[parents[9]].value.clone(),
        b_f: nodes[parents[10]].value.clone(),
        b_o: nodes[parents[11]].value.clone(),
        b_c: nodes[parents[12]].value.clone(),
    };
    let d = params.input_dim();
    let h = params.hidden();
    let (bsz, t) = match xv.rank() {
        3 => (xv.shape()[0], xv.shape()[1]),
        _ => (1, xv.shape()[0]),
    };
    let packed = pack(&params);
    let gates_all = node.saved[0].data();
    let c_all = node.saved[1].data();
    let hseq = node.value.data();

    let four = 4 * h;
    let mut dh_next = vec![0.0; bsz * h];
    let mut dc_next = vec![0.0; bsz * h];
    let mut da = vec![0.0; bsz * four];
    let mut dwx = vec![0.0; d * four];
    let mut duh = vec![0.0; h * four];
    let mut dbias = vec![0.0; four];
    let mut dxs = vec![0.0; xv.numel()];
    let mut xbuf = vec![0.0; bsz * d];
    let mut hprev = vec![0.0; bsz * h];
    let mut dxt = vec![0.0; bsz * d];

    for ti in (0..t).rev() {
        let gates = &gates_all[ti * bsz * four..(ti + 1) * bsz * four];
        let cs = &c_all[ti * bsz * h..(ti + 1) * bsz * h];
        for b in 0..bsz {
            for j in 0..h {
                let idx = b * h + j;
                let i = gates[b * four + GATE_I * h + j];
                let f = gates[b * four + GATE_F * h + j];
                let o = gates[b * four + GATE_O * h + j];
                let g = gates[b * four + GATE_G * h + j];
                let tanh_c = cs[idx].tanh();
                let dh = gy.data()[(b * t + ti) * h + j] + dh_next[idx];
                let do_ = dh * tanh_c;
                let dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_next[idx];
                let c_prev = if ti > 0 { c_all[(ti - 1) * bsz * h + idx] } else { 0.0 };
                let di = dc * g;
                let df = dc * c_prev;
                let dg = dc * i;
                dc_next[idx] = dc * f;
                da[b * four + GATE_I * h + j] = di * i * (1.0 - i);
                da[b * four + GATE_F * h + j] = df * f * (1.0 - f);
                da[b * four + GATE_O * h + j] = do_ * o * (1.0 - o);
                da[b * four + GATE_G * h + j] = dg * (1.0 - g * g);
            }
        }
        for b in 0..bsz {
            let src = (b * t + ti) * d;
            xbuf[b * d..(b + 1) * d].copy_from_slice(&xv.data()[src..src + d]);
            if ti > 0 {
                let hsrc = (b * t + ti - 1) * h;
                hprev[b * h..(b + 1) * h].copy_from_slice(&hseq[hsrc..hsrc + h]);
            } else {
                hprev[b * h..(b + 1) * h].fill(0.0);
            }
        }
        for b in 0..bsz {
            for j in 0..four {
                dbias[j] += da[b * four + j];
            }
        }
        gemm(true, false, d, bsz, four, 1.0, &xbuf, &da, 1.0, &mut dwx);
        gemm(true, false, h, bsz, four, 1.0, &hprev, &da, 1.0, &mut duh);
        gemm(false, true, bsz, four, d, 1.0, &da, &packed.wx, 0.0, &mut dxt);
        for b in 0..bsz {
            let dst = (b * t + ti) * d;
            dxs[dst..dst + d].copy_from_slice(&dxt[b * d..(b + 1) * d]);
        }
        gemm(false, true, bsz, four, h, 1.0, &da, &packed.uh, 0.0, &mut dh_next);
    }

    // Unpack the packed-layout gradients back into the parameter shapes.
    let unpack_w = |gate: usize| -> Tensor {
        let mut out = vec![0.0; h * d];
        for row in 0..h {
            for col in 0..d {
                out[row * d + col] = dwx[col * four + gate * h + row];
            }
        }
        Tensor::from_raw(vec![h, d], out)
    };
    let unpack_u = |gate: usize| -> Tensor {
        let mut out = vec![0.0; h * h];
        for row in 0..h {
            for col in 0..h {
                out[row * h + col] = duh[col * four + gate * h + row];
            }
        }
        Tensor::from_raw(vec![h, h], out)
    };
    let unpack_b =
        |gate: usize| Tensor::from_raw(vec![h], dbias[gate * h..(gate + 1) * h].to_vec());

    Ok(vec![
        Tensor::from_raw(xv.shape().to_vec(), dxs),
        unpack_w(GATE_I),
        unpack_w(GATE_F),
        unpack_w(GATE_O),
        unpack_w(GATE_G),
        unpack_u(GATE_I),
        unpack_u(GATE_F),
        unpack_u(GATE_O),
        unpack_u(GATE_G),
        unpack_b(GATE_I),
        unpack_b(GATE_F),
        unpack_b(GATE_O),
        unpack_b(GATE_G),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::zeros(2, 3);
        let state = LstmState::zeros(3);
        let x = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let (h, new) = lstm_cell_step(&x, &state, &p).unwrap();
        // i = f = o = 0.5, candidate 0 -> c = 0, h = 0.
        assert_eq!(h.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(new.c.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_preserves_memory() {
        let mut p = LstmParams::zeros(2, 3);
        p.b_f = Tensor::filled(&[3], 100.0);
        let state = LstmState {
            h: Tensor::zeros(&[3]),
            c: Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap(),
        };
        let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let (_, new) = lstm_cell_step(&x, &state, &p).unwrap();
        for (c, c0) in new.c.data().iter().zip(state.c.data()) {
            assert_relative_eq!(c, c0, max_relative = 1e-12);
        }
    }

    /// Independent scalar reference: plain loops straight from the update
    /// equations, no packing, no gemm.
    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, h) = (2, 3);
        let p = LstmParams::init(d, h, &mut rng);
        let x = Tensor::uniform(&mut rng, &[d], -1.0, 1.0);
        let h0 = Tensor::uniform(&mut rng, &[h], -0.5, 0.5);
        let c0 = Tensor::uniform(&mut rng, &[h], -0.5, 0.5);
        let state = LstmState { h: h0.clone(), c: c0.clone() };

        let gate = |w: &Tensor, u: &Tensor, b: &Tensor, j: usize| -> f64 {
            let mut a = b.data()[j];
            for k in 0..d {
                a += w.data()[j * d + k] * x.data()[k];
            }
            for k in 0..h {
                a += u.data()[j * h + k] * h0.data()[k];
            }
            a
        };
        let mut expect_h = vec![0.0; h];
        let mut expect_c = vec![0.0; h];
        for j in 0..h {
            let i = sigmoid_scalar(gate(&p.w_i, &p.u_i, &p.b_i, j));
            let f = sigmoid_scalar(gate(&p.w_f, &p.u_f, &p.b_f, j));
            let o = sigmoid_scalar(gate(&p.w_o, &p.u_o, &p.b_o, j));
            let g = gate(&p.w_c, &p.u_c, &p.b_c, j).tanh();
            expect_c[j] = f * c0.data()[j] + i * g;
            expect_h[j] = o * expect_c[j].tanh();
        }

        let (h_t, new) = lstm_cell_step(&x, &state, &p).unwrap();
        for j in 0..h {
            assert_relative_eq!(h_t.data()[j], expect_h[j], max_relative = 1e-13);
            assert_relative_eq!(new.c.data()[j], expect_c[j], max_relative = 1e-13);
        }
    }

    #[test]
    fn run_of_length_one_is_the_cell_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = LstmParams::init(3, 4, &mut rng);
        let xs = Tensor::uniform(&mut rng, &[1, 3], -1.0, 1.0);
        let init = LstmState::zeros(4);
        let seq = lstm_run(&xs, &p, &init).unwrap();
        let x0 = Tensor::new(vec![3], xs.data().to_vec()).unwrap();
        let (h, _) = lstm_cell_step(&x0, &init, &p).unwrap();
        assert_eq!(&seq.data()[..4], h.data());
    }

    #[test]
    fn constant_input_without_recurrence_or_memory_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = LstmParams::init(2, 3, &mut rng);
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_o, &mut p.u_c] {
            *u = Tensor::zeros(&[3, 3]);
        }
        // Saturate the forget gate closed so the cell is memoryless.
        p.b_f = Tensor::filled(&[3], -100.0);
        let row = [0.4, -0.9];
        let mut xs = Vec::new();
        for _ in 0..6 {
            xs.extend_from_slice(&row);
        }
        let seq = lstm_run(&Tensor::new(vec![6, 2], xs).unwrap(), &p, &LstmState::zeros(3)).unwrap();
        for t in 1..6 {
            for j in 0..3 {
                assert_relative_eq!(seq.data()[t * 3 + j], seq.data()[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hidden_states_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = LstmParams::init(2, 3, &mut rng);
        let xs = Tensor::uniform(&mut rng, &[5, 2], -1.0, 1.0);
        let y0 = lstm_run(&xs, &p, &LstmState::zeros(3)).unwrap();
        let mut xs2 = xs.clone();
        xs2.data_mut()[4 * 2] += 3.0; // touch only the last step
        let y1 = lstm_run(&xs2, &p, &LstmState::zeros(3)).unwrap();
        assert_eq!(&y0.data()[..4 * 3], &y1.data()[..4 * 3]);
        assert_ne!(&y0.data()[4 * 3..], &y1.data()[4 * 3..]);
    }

    #[test]
    fn gate_outputs_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let p = LstmParams::init(3, 4, &mut rng);
            let xs = Tensor::uniform(&mut rng, &[8, 3], -2.0, 2.0);
            let seq = lstm_run(&xs, &p, &LstmState::zeros(4)).unwrap();
            for v in seq.data() {
                assert!(*v > -1.0 && *v < 1.0, "h out of (-1,1): {v}");
            }
        }
    }

    #[test]
    fn memory_growth_is_at_most_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = LstmParams::init(2, 3, &mut rng);
        let t = 40;
        let xs = Tensor::uniform(&mut rng, &[t, 2], -3.0, 3.0);
        let mut state = LstmState::zeros(3);
        for ti in 0..t {
            let x = Tensor::new(vec![2], xs.data()[ti * 2..(ti + 1) * 2].to_vec()).unwrap();
            let (_, s) = lstm_cell_step(&x, &state, &p).unwrap();
            state = s;
            for c in state.c.data() {
                assert!(c.abs() <= (ti + 1) as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn fused_op_matches_value_runner() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = LstmParams::init(3, 5, &mut rng);
        let xs = Tensor::uniform(&mut rng, &[2, 7, 3], -1.0, 1.0);
        let tape = Tape::new();
        let xv = tape.watch(&xs);
        let vars = p.watch(&tape);
        let fused = lstm_seq_op(&xv, &vars).unwrap().value();
        for b in 0..2 {
            let sample =
                Tensor::new(vec![7, 3], xs.data()[b * 21..(b + 1) * 21].to_vec()).unwrap();
            let expect = lstm_run(&sample, &p, &LstmState::zeros(5)).unwrap();
            assert_eq!(&fused.data()[b * 35..(b + 1) * 35], expect.data());
        }
    }
}
