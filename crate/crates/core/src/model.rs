//! The full model: TCN shared layer -> expert/gate mixture -> per-task towers,
//! plus the learnable loss log-variances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy_loss, cross_entropy_value, joint_loss, joint_value, mse_loss, mse_value,
    UncertaintyParams, UncertaintyVars,
};
use crate::lstm::LstmVars;
use crate::mmoe::{expert_forward_var, gate_forward_var, mmoe_mix_var, ExpertBank, GateBank, GateVars};
use crate::tape::{Tape, Var};
use crate::tcn::{BlockVars, Mode, TcnStack};
use crate::towers::{tower_forward_var, TowerVars, Towers};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 3;
pub const N_TASKS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TmmoeConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub horizon_steps: usize,
    pub tcn_channels: usize,
    pub kernel: usize,
    pub n_experts: usize,
    pub expert_units: usize,
    pub gate_units: usize,
    pub tower_units: usize,
}

impl TmmoeConfig {
    /// Published defaults: 64 TCN filters, kernel 2, 12 experts with 64-unit
    /// LSTMs, 64-unit towers.
    pub fn new(input_dim: usize, seq_len: usize, horizon_steps: usize) -> Self {
        TmmoeConfig {
            input_dim,
            seq_len,
            horizon_steps,
            tcn_channels: 64,
            kernel: 2,
            n_experts: 12,
            expert_units: 64,
            gate_units: 64,
            tower_units: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1
            || self.seq_len < 1
            || self.horizon_steps < 1
            || self.tcn_channels < 1
            || self.n_experts < 1
            || self.expert_units < 1
            || self.gate_units < 1
            || self.tower_units < 1
        {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

pub struct TmmoeModel {
    pub cfg: TmmoeConfig,
    pub tcn: TcnStack,
    pub experts: ExpertBank,
    pub gates: GateBank,
    pub towers: Towers,
    pub uncertainty: UncertaintyParams,
}

pub struct ModelVars {
    pub tcn: Vec<BlockVars>,
    pub experts: Vec<LstmVars>,
    pub gates: Vec<GateVars>,
    pub towers: [TowerVars; 3],
    pub uncertainty: UncertaintyVars,
}

/// Raw task outputs for one batch.
pub struct ModelOutputs {
    /// `[B, 3]` intention logits
    pub intent_logits: Var,
    /// `[B, P]` longitudinal displacements
    pub lon: Var,
    /// `[B, P]` lateral displacements
    pub lat: Var,
}

impl TmmoeModel {
    pub fn init(cfg: TmmoeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcn = TcnStack::init(cfg.input_dim, cfg.tcn_channels, cfg.kernel, cfg.seq_len, &mut rng)?;
        let experts = ExpertBank::init(cfg.n_experts, cfg.tcn_channels, cfg.expert_units, &mut rng)?;
        let gates = GateBank::init(N_TASKS, cfg.n_experts, cfg.tcn_channels, cfg.gate_units, &mut rng)?;
        let towers = Towers::init(
            cfg.expert_units,
            cfg.tower_units,
            N_CLASSES,
            cfg.horizon_steps,
            &mut rng,
        );
        Ok(TmmoeModel { cfg, tcn, experts, gates, towers, uncertainty: UncertaintyParams::new() })
    }

    pub fn watch(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            tcn: self.tcn.watch(tape),
            experts: self.experts.watch(tape),
            gates: self.gates.watch(tape),
            towers: self.towers.watch(tape),
            uncertainty: self.uncertainty.watch(tape),
        }
    }

    /// Batched forward over `[B, T, F]`. Train mode updates the batch-norm
    /// running statistics; eval mode leaves the model untouched.
    pub fn forward(&mut self, x: &Var, vars: &ModelVars, mode: Mode) -> Result<ModelOutputs> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim {
            return Err(Error::shape(
                "tmmoe_forward",
                format!("expected [B, T, {}], got {:?}", self.cfg.input_dim, shape),
            ));
        }
        let shared = self.tcn.forward_var(x, &vars.tcn, mode)?;
        let expert_outs = expert_forward_var(&shared, &vars.experts)?;
        let mut mixed = Vec::with_capacity(N_TASKS);
        for gate in &vars.gates {
            let weights = gate_forward_var(&shared, gate)?;
            mixed.push(mmoe_mix_var(&expert_outs, &weights)?);
        }
        Ok(ModelOutputs {
            intent_logits: tower_forward_var(&mixed[0], &vars.towers[0])?,
            lon: tower_forward_var(&mixed[1], &vars.towers[1])?,
            lat: tower_forward_var(&mixed[2], &vars.towers[2])?,
        })
    }

    /// Task losses plus the uncertainty-weighted joint loss.
    pub fn losses(
        &self,
        outputs: &ModelOutputs,
        vars: &ModelVars,
        labels: &Tensor,
        lon_targets: &Tensor,
        lat_targets: &Tensor,
    ) -> Result<TaskLosses> {
        let l_c = cross_entropy_loss(&outputs.intent_logits, labels)?;
        let l_r1 = mse_loss(&outputs.lon, lon_targets)?;
        let l_r2 = mse_loss(&outputs.lat, lat_targets)?;
        let joint = joint_loss(&l_c, &l_r1, &l_r2, &vars.uncertainty)?;
        Ok(TaskLosses { l_c, l_r1, l_r2, joint })
    }

    /// Value-only forward for evaluation; eval mode, no tape kept afterwards.
    pub fn forward_values(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let xv = tape.watch(x);
        let vars = self.watch(&tape);
        let out = self.forward(&xv, &vars, mode)?;
        Ok((out.intent_logits.value(), out.lon.value(), out.lat.value()))
    }

    /// Evaluation losses on a labeled batch without recording gradients.
    pub fn eval_losses(
        &mut self,
        x: &Tensor,
        labels: &Tensor,
        lon_targets: &Tensor,
        lat_targets: &Tensor,
    ) -> Result<LossValues> {
        let (logits, lon, lat) = self.forward_values(x, Mode::Eval)?;
        let l_c = cross_entropy_value(&logits, labels)?;
        let l_r1 = mse_value(&lon, lon_targets)?;
        let l_r2 = mse_value(&lat, lat_targets)?;
        let joint = joint_value(l_c, l_r1, l_r2, &self.uncertainty);
        Ok(LossValues { joint, l_c, l_r1, l_r2 })
    }

    /// Borrow every trainable parameter with its stable name. The single
    /// source of truth for parameter naming; the watched-var walk mirrors it
    /// and a test keeps them aligned.
    pub fn param_table(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in self.tcn.blocks.iter_mut().enumerate() {
            let p = format!("tcn.b{i:02}");
            out.push((format!("{p}.conv1.w"), &mut block.conv1.w));
            out.push((format!("{p}.conv1.b"), &mut block.conv1.b));
            out.push((format!("{p}.bn1.gamma"), &mut block.bn1.gamma));
            out.push((format!("{p}.bn1.beta"), &mut block.bn1.beta));
            out.push((format!("{p}.conv2.w"), &mut block.conv2.w));
            out.push((format!("{p}.conv2.b"), &mut block.conv2.b));
            out.push((format!("{p}.bn2.gamma"), &mut block.bn2.gamma));
            out.push((format!("{p}.bn2.beta"), &mut block.bn2.beta));
            if let Some(proj) = &mut block.projection {
                out.push((format!("{p}.proj.w"), &mut proj.w));
                out.push((format!("{p}.proj.b"), &mut proj.b));
            }
        }
        for (i, e) in self.experts.experts.iter_mut().enumerate() {
            push_lstm_params(&mut out, &format!("experts.{i:02}"), "", e);
        }
        for (k, (g, h)) in
            self.gates.gates.iter_mut().zip(self.gates.heads.iter_mut()).enumerate()
        {
            let p = format!("gates.{k}");
            push_lstm_params(&mut out, &p, ".lstm", g);
            out.push((format!("{p}.head.w"), &mut h.w));
            out.push((format!("{p}.head.b"), &mut h.b));
        }
        for (name, tower) in [
            ("intent", &mut self.towers.intention),
            ("lon", &mut self.towers.longitudinal),
            ("lat", &mut self.towers.lateral),
        ] {
            let p = format!("towers.{name}");
            out.push((format!("{p}.l1.w"), &mut tower.l1_w));
            out.push((format!("{p}.l1.b"), &mut tower.l1_b));
            out.push((format!("{p}.l2.w"), &mut tower.l2_w));
            out.push((format!("{p}.l2.b"), &mut tower.l2_b));
        }
        out.push(("loss.s_c".to_string(), &mut self.uncertainty.s_c));
        out.push(("loss.s_r1".to_string(), &mut self.uncertainty.s_r1));
        out.push(("loss.s_r2".to_string(), &mut self.uncertainty.s_r2));
        out
    }

    /// Borrow the non-trainable buffers (batch-norm running statistics).
    pub fn buffer_table(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in self.tcn.blocks.iter_mut().enumerate() {
            let p = format!("tcn.b{i:02}");
            out.push((format!("{p}.bn1.running_mean"), &mut block.bn1.running_mean));
            out.push((format!("{p}.bn1.running_var"), &mut block.bn1.running_var));
            out.push((format!("{p}.bn2.running_mean"), &mut block.bn2.running_mean));
            out.push((format!("{p}.bn2.running_var"), &mut block.bn2.running_var));
        }
        out
    }

    /// Snapshot of parameters and buffers, keyed by name.
    pub fn state_map(&mut self) -> std::collections::BTreeMap<String, Tensor> {
        let mut map = std::collections::BTreeMap::new();
        for (name, t) in self.param_table() {
            map.insert(name, t.clone());
        }
        for (name, t) in self.buffer_table() {
            map.insert(name, t.clone());
        }
        map
    }

    /// Restore parameters and buffers from a snapshot. Every entry must be
    /// present with a matching shape, and no extras are allowed.
    pub fn load_state_map(
        &mut self,
        map: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let mut used = 0usize;
        for (name, t) in self.param_table().into_iter().chain(self.buffer_table()) {
            let src = map.get(&name).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing parameter {name}"))
            })?;
            if src.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
            used += 1;
        }
        if used != map.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} entries, model consumes {used}",
                map.len()
            )));
        }
        Ok(())
    }

    /// Matching watched vars for the parameter walk, by name.
    pub fn var_entries(&self, vars: &ModelVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, bv) in vars.tcn.iter().enumerate() {
            let p = format!("tcn.b{i:02}");
            out.push((format!("{p}.conv1.w"), bv.c1_w.clone()));
            out.push((format!("{p}.conv1.b"), bv.c1_b.clone()));
            out.push((format!("{p}.bn1.gamma"), bv.bn1_gamma.clone()));
            out.push((format!("{p}.bn1.beta"), bv.bn1_beta.clone()));
            out.push((format!("{p}.conv2.w"), bv.c2_w.clone()));
            out.push((format!("{p}.conv2.b"), bv.c2_b.clone()));
            out.push((format!("{p}.bn2.gamma"), bv.bn2_gamma.clone()));
            out.push((format!("{p}.bn2.beta"), bv.bn2_beta.clone()));
            if let Some((w, b)) = &bv.proj {
                out.push((format!("{p}.proj.w"), w.clone()));
                out.push((format!("{p}.proj.b"), b.clone()));
            }
        }
        for (i, e) in vars.experts.iter().enumerate() {
            let p = format!("experts.{i:02}");
            push_lstm_vars(&mut out, &p, "", e);
        }
        for (k, g) in vars.gates.iter().enumerate() {
            let p = format!("gates.{k}");
            push_lstm_vars(&mut out, &p, ".lstm", &g.lstm);
            out.push((format!("{p}.head.w"), g.head_w.clone()));
            out.push((format!("{p}.head.b"), g.head_b.clone()));
        }
        for (name, tv) in ["intent", "lon", "lat"].iter().zip(&vars.towers) {
            let p = format!("towers.{name}");
            out.push((format!("{p}.l1.w"), tv.l1_w.clone()));
            out.push((format!("{p}.l1.b"), tv.l1_b.clone()));
            out.push((format!("{p}.l2.w"), tv.l2_w.clone()));
            out.push((format!("{p}.l2.b"), tv.l2_b.clone()));
        }
        out.push(("loss.s_c".to_string(), vars.uncertainty.s_c.clone()));
        out.push(("loss.s_r1".to_string(), vars.uncertainty.s_r1.clone()));
        out.push(("loss.s_r2".to_string(), vars.uncertainty.s_r2.clone()));
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.param_table().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn push_lstm_params<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    infix: &str,
    e: &'a mut crate::lstm::LstmParams,
) {
    for (suffix, t) in [
        ("w_i", &mut e.w_i),
        ("w_f", &mut e.w_f),
        ("w_o", &mut e.w_o),
        ("w_c", &mut e.w_c),
        ("u_i", &mut e.u_i),
        ("u_f", &mut e.u_f),
        ("u_o", &mut e.u_o),
        ("u_c", &mut e.u_c),
        ("b_i", &mut e.b_i),
        ("b_f", &mut e.b_f),
        ("b_o", &mut e.b_o),
        ("b_c", &mut e.b_c),
    ] {
        out.push((format!("{prefix}{infix}.{suffix}"), t));
    }
}

fn push_lstm_vars(out: &mut Vec<(String, Var)>, prefix: &str, infix: &str, v: &LstmVars) {
    for (suffix, var) in [
        ("w_i", &v.w_i),
        ("w_f", &v.w_f),
        ("w_o", &v.w_o),
        ("w_c", &v.w_c),
        ("u_i", &v.u_i),
        ("u_f", &v.u_f),
        ("u_o", &v.u_o),
        ("u_c", &v.u_c),
        ("b_i", &v.b_i),
        ("b_f", &v.b_f),
        ("b_o", &v.b_o),
        ("b_c", &v.b_c),
    ] {
        out.push((format!("{prefix}{infix}.{suffix}"), var.clone()));
    }
}

pub struct TaskLosses {
    pub l_c: Var,
    pub l_r1: Var,
    pub l_r2: Var,
    pub joint: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub joint: f64,
    pub l_c: f64,
    pub l_r1: f64,
    pub l_r2: f64,
}
