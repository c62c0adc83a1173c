//! Expert layer: n LSTM experts shared across tasks, one LSTM+softmax gate
//! per task, and the per-task convex mixture of expert outputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lstm::{lstm_run, LstmParams, LstmState, LstmVars};
use crate::tape::{lstm_seq, mix_experts, Tape, Var};
use crate::tensor::Tensor;

/// Shared experts. Every expert reads the same shared features and keeps its
/// own parameters.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub experts: Vec<LstmParams>,
    pub hidden: usize,
}

impl ExpertBank {
    pub fn init<R: Rng>(n: usize, input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config("expert bank needs at least one expert".into()));
        }
        let experts = (0..n).map(|_| LstmParams::init(input_dim, hidden, rng)).collect();
        Ok(ExpertBank { experts, hidden })
    }

    pub fn watch(&self, tape: &Tape) -> Vec<LstmVars> {
        self.experts.iter().map(|e| e.watch(tape)).collect()
    }
}

/// Linear head mapping a gate LSTM's final hidden state to expert logits.
#[derive(Debug, Clone)]
pub struct GateHead {
    /// `[n_experts, gate_hidden]`
    pub w: Tensor,
    /// `[n_experts]`
    pub b: Tensor,
}

/// One gate per task: an LSTM over the shared sequence plus a softmax head.
#[derive(Debug, Clone)]
pub struct GateBank {
    pub gates: Vec<LstmParams>,
    pub heads: Vec<GateHead>,
}

impl GateBank {
    pub fn init<R: Rng>(
        tasks: usize,
        n_experts: usize,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if tasks < 1 {
            return Err(Error::Config("gate bank needs at least one task".into()));
        }
        let bound = (1.0 / hidden as f64).sqrt();
        let gates = (0..tasks).map(|_| LstmParams::init(input_dim, hidden, rng)).collect();
        let heads = (0..tasks)
            .map(|_| GateHead {
                w: Tensor::uniform(rng, &[n_experts, hidden], -bound, bound),
                b: Tensor::zeros(&[n_experts]),
            })
            .collect();
        Ok(GateBank { gates, heads })
    }

    pub fn n_tasks(&self) -> usize {
        self.gates.len()
    }

    pub fn watch(&self, tape: &Tape) -> Vec<GateVars> {
        self.gates
            .iter()
            .zip(&self.heads)
            .map(|(g, h)| GateVars {
                lstm: g.watch(tape),
                head_w: tape.watch(&h.w),
                head_b: tape.watch(&h.b),
            })
            .collect()
    }
}

pub struct GateVars {
    pub lstm: LstmVars,
    pub head_w: Var,
    pub head_b: Var,
}

/// Batched gate weights: shared `[B,T,H]` -> softmax weights `[B,n]`.
pub fn gate_forward_var(shared: &Var, gate: &GateVars) -> Result<Var> {
    let shape = shared.shape();
    if shape.len() != 3 {
        return Err(Error::shape("gate_forward", format!("expected [B,T,H], got {:?}", shape)));
    }
    let t = shape[1];
    let hidden = lstm_seq(shared, &gate.lstm)?.slice_time(t - 1)?;
    hidden.matmul(&gate.head_w.transpose()?)?.add_rows(&gate.head_b)?.softmax_lastdim()
}

/// Batched expert outputs: shared `[B,T,H]` -> one `[B,H_e]` per expert
/// (final hidden states).
pub fn expert_forward_var(shared: &Var, experts: &[LstmVars]) -> Result<Vec<Var>> {
    let shape = shared.shape();
    if shape.len() != 3 {
        return Err(Error::shape("expert_forward", format!("expected [B,T,H], got {:?}", shape)));
    }
    let t = shape[1];
    experts.iter().map(|e| lstm_seq(shared, e)?.slice_time(t - 1)).collect()
}

/// Batched mixture with the gate-weight contract enforced.
pub fn mmoe_mix_var(experts: &[Var], weights: &Var) -> Result<Var> {
    let wv = weights.value();
    let n = wv.shape()[wv.rank() - 1];
    for row in wv.data().chunks_exact(n) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "mmoe_mix: gate weights sum to {sum}, expected 1"
            )));
        }
    }
    mix_experts(experts, weights)
}

/// Per-sample gate weights: shared `[T,H]` -> `[n]` summing to 1.
pub fn gate_forward(shared: &Tensor, gate: &LstmParams, head: &GateHead) -> Result<Tensor> {
    let t = check_shared(shared, gate)?;
    let hidden = lstm_run(shared, gate, &LstmState::zeros(gate.hidden()))?;
    let h_final = Tensor::new(vec![gate.hidden()], hidden.data()[(t - 1) * gate.hidden()..].to_vec())?;
    let n = head.w.shape()[0];
    let mut logits = head.b.data().to_vec();
    for (i, logit) in logits.iter_mut().enumerate() {
        for j in 0..gate.hidden() {
            *logit += head.w.data()[i * gate.hidden() + j] * h_final.data()[j];
        }
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    for e in exps.iter_mut() {
        *e /= denom;
    }
    Tensor::new(vec![n], exps)
}

/// Per-sample expert outputs: shared `[T,H]` -> stacked final states `[n,H_e]`.
pub fn expert_forward(shared: &Tensor, bank: &ExpertBank) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(bank.experts.len() * bank.hidden);
    for e in &bank.experts {
        let t = check_shared(shared, e)?;
        let hidden = lstm_run(shared, e, &LstmState::zeros(e.hidden()))?;
        rows.extend_from_slice(&hidden.data()[(t - 1) * e.hidden()..]);
    }
    Tensor::new(vec![bank.experts.len(), bank.hidden], rows)
}

/// Per-sample convex combination of expert rows by gate weights.
pub fn mmoe_mix(expert_outs: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if expert_outs.rank() != 2 || weights.rank() != 1
        || expert_outs.shape()[0] != weights.shape()[0]
    {
        return Err(Error::shape(
            "mmoe_mix",
            format!("experts {:?} with weights {:?}", expert_outs.shape(), weights.shape()),
        ));
    }
    let sum: f64 = weights.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!("mmoe_mix: gate weights sum to {sum}, expected 1")));
    }
    let (n, he) = (expert_outs.shape()[0], expert_outs.shape()[1]);
    let mut out = vec![0.0; he];
    for i in 0..n {
        let w = weights.data()[i];
        for j in 0..he {
            out[j] += w * expert_outs.data()[i * he + j];
        }
    }
    Tensor::new(vec![he], out)
}

fn check_shared(shared: &Tensor, p: &LstmParams) -> Result<usize> {
    if shared.rank() != 2 || shared.shape()[1] != p.input_dim() {
        return Err(Error::shape(
            "mmoe",
            format!("shared features {:?} against input dim {}", shared.shape(), p.input_dim()),
        ));
    }
    Ok(shared.shape()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gate = LstmParams::init(4, 5, &mut rng);
        let head = GateHead { w: Tensor::zeros(&[6, 5]), b: Tensor::zeros(&[6]) };
        let shared = Tensor::uniform(&mut rng, &[7, 4], -1.0, 1.0);
        let w = gate_forward(&shared, &gate, &head).unwrap();
        for v in w.data() {
            assert_relative_eq!(*v, 1.0 / 6.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn gate_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let gate = LstmParams::init(3, 4, &mut rng);
            let head = GateHead {
                w: Tensor::uniform(&mut rng, &[5, 4], -2.0, 2.0),
                b: Tensor::uniform(&mut rng, &[5], -1.0, 1.0),
            };
            let shared = Tensor::uniform(&mut rng, &[6, 3], -1.0, 1.0);
            let w = gate_forward(&shared, &gate, &head).unwrap();
            let sum: f64 = w.data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(w.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn saturated_logit_takes_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let gate = LstmParams::zeros(3, 4);
        let mut b = Tensor::zeros(&[5]);
        b.data_mut()[2] = 100.0;
        let head = GateHead { w: Tensor::zeros(&[5, 4]), b };
        let shared = Tensor::uniform(&mut rng, &[6, 3], -1.0, 1.0);
        let w = gate_forward(&shared, &gate, &head).unwrap();
        assert!(w.data()[2] > 1.0 - 1e-12);
    }

    #[test]
    fn single_expert_is_its_final_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let bank = ExpertBank::init(1, 3, 4, &mut rng).unwrap();
        let shared = Tensor::uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let out = expert_forward(&shared, &bank).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        let run = lstm_run(&shared, &bank.experts[0], &LstmState::zeros(4)).unwrap();
        assert_eq!(out.data(), &run.data()[4 * 4..]);
    }

    #[test]
    fn identical_experts_produce_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut bank = ExpertBank::init(2, 3, 4, &mut rng).unwrap();
        bank.experts[1] = bank.experts[0].clone();
        let shared = Tensor::uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let out = expert_forward(&shared, &bank).unwrap();
        assert_eq!(&out.data()[..4], &out.data()[4..]);
    }

    #[test]
    fn default_config_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let bank = ExpertBank::init(12, 8, 64, &mut rng).unwrap();
        let shared = Tensor::uniform(&mut rng, &[10, 8], -1.0, 1.0);
        let out = expert_forward(&shared, &bank).unwrap();
        assert_eq!(out.shape(), &[12, 64]);
    }

    #[test]
    fn one_hot_weights_select_a_row() {
        let e = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let out = mmoe_mix(&e, &w).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn hand_mix_case() {
        let e = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 4.0, 4.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2], vec![0.25, 0.75]).unwrap();
        let out = mmoe_mix(&e, &w).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn uniform_weights_over_identical_experts() {
        let e = Tensor::new(vec![2, 2], vec![1.5, -2.0, 1.5, -2.0]).unwrap();
        let w = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let out = mmoe_mix(&e, &w).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0]);
    }

    #[test]
    fn broken_weight_sum_is_rejected() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2], vec![0.6, 0.6]).unwrap();
        assert!(mmoe_mix(&e, &w).is_err());
    }

    #[test]
    fn mixture_stays_in_expert_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..100 {
            let n = 4;
            let e = Tensor::uniform(&mut rng, &[n, 3], -2.0, 2.0);
            let mut raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for r in raw.iter_mut() {
                *r /= sum;
            }
            let w = Tensor::new(vec![n], raw).unwrap();
            let out = mmoe_mix(&e, &w).unwrap();
            for j in 0..3 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..n {
                    lo = lo.min(e.data()[i * 3 + j]);
                    hi = hi.max(e.data()[i * 3 + j]);
                }
                assert!(out.data()[j] >= lo - 1e-12 && out.data()[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn batched_path_matches_per_sample_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let bank = ExpertBank::init(3, 2, 4, &mut rng).unwrap();
        let gates = GateBank::init(2, 3, 2, 4, &mut rng).unwrap();
        let bsz = 3;
        let t = 5;
        let x = Tensor::uniform(&mut rng, &[bsz, t, 2], -1.0, 1.0);

        let tape = Tape::new();
        let xv = tape.watch(&x);
        let evars = bank.watch(&tape);
        let gvars = gates.watch(&tape);
        let eouts = expert_forward_var(&xv, &evars).unwrap();
        let w0 = gate_forward_var(&xv, &gvars[0]).unwrap();
        let mixed = mmoe_mix_var(&eouts, &w0).unwrap().value();

        for b in 0..bsz {
            let sample = Tensor::new(vec![t, 2], x.data()[b * t * 2..(b + 1) * t * 2].to_vec()).unwrap();
            let eo = expert_forward(&sample, &bank).unwrap();
            let w = gate_forward(&sample, &gates.gates[0], &gates.heads[0]).unwrap();
            let m = mmoe_mix(&eo, &w).unwrap();
            for j in 0..4 {
                assert_relative_eq!(mixed.data()[b * 4 + j], m.data()[j], max_relative = 1e-12);
            }
        }
    }
}
