//! Shared temporal layer: dilated causal convolutions composed into residual
//! blocks with batch normalization.
//!
//! The stack maps a `[T, F]` input sequence to a same-length `[T, H]` feature
//! sequence. Causality is structural: every convolution left-pads by
//! `(k-1)*dilation`, so output step `t` reads inputs `<= t` only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{batch_norm_eval, batch_norm_train, dilated_conv, Tape, Var};
use crate::tensor::{gemm, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// Train mode updates batch-norm running statistics; eval mode consumes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of one dilated causal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.dilation < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config(format!("invalid conv spec {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[k, in_channels, out_channels]`
    pub w: Tensor,
    /// `[out_channels]`
    pub b: Tensor,
}

impl ConvParams {
    pub fn init<R: Rng>(spec: &ConvSpec, rng: &mut R) -> Self {
        let bound = (1.0 / (spec.kernel * spec.in_channels) as f64).sqrt();
        ConvParams {
            w: Tensor::uniform(rng, &[spec.kernel, spec.in_channels, spec.out_channels], -bound, bound),
            b: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    fn fold_stats(&mut self, mean: &Tensor, var: &Tensor) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Two dilated convolutions with batch norm, a skip connection, and a 1x1
/// projection when the channel counts differ.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub spec: ConvSpec,
    pub conv1: ConvParams,
    pub bn1: BatchNormLayer,
    pub conv2: ConvParams,
    pub bn2: BatchNormLayer,
    pub projection: Option<ConvParams>,
}

impl ResidualBlock {
    pub fn init<R: Rng>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let inner = ConvSpec { in_channels: spec.out_channels, ..spec };
        let projection = if spec.in_channels != spec.out_channels {
            let pspec = ConvSpec { kernel: 1, dilation: 1, ..spec };
            Some(ConvParams::init(&pspec, rng))
        } else {
            None
        };
        Ok(ResidualBlock {
            spec,
            conv1: ConvParams::init(&spec, rng),
            bn1: BatchNormLayer::new(spec.out_channels),
            conv2: ConvParams::init(&inner, rng),
            bn2: BatchNormLayer::new(spec.out_channels),
            projection,
        })
    }
}

/// Watched parameter handles for one block on a given tape.
pub struct BlockVars {
    pub c1_w: Var,
    pub c1_b: Var,
    pub bn1_gamma: Var,
    pub bn1_beta: Var,
    pub c2_w: Var,
    pub c2_b: Var,
    pub bn2_gamma: Var,
    pub bn2_beta: Var,
    pub proj: Option<(Var, Var)>,
}

impl ResidualBlock {
    pub fn watch(&self, tape: &Tape) -> BlockVars {
        BlockVars {
            c1_w: tape.watch(&self.conv1.w),
            c1_b: tape.watch(&self.conv1.b),
            bn1_gamma: tape.watch(&self.bn1.gamma),
            bn1_beta: tape.watch(&self.bn1.beta),
            c2_w: tape.watch(&self.conv2.w),
            c2_b: tape.watch(&self.conv2.b),
            bn2_gamma: tape.watch(&self.bn2.gamma),
            bn2_beta: tape.watch(&self.bn2.beta),
            proj: self.projection.as_ref().map(|p| (tape.watch(&p.w), tape.watch(&p.b))),
        }
    }

    /// conv -> BN -> ReLU -> conv -> BN, plus the (projected) skip, then ReLU.
    /// Train mode folds the batch statistics into the running buffers.
    pub fn forward_var(&mut self, x: &Var, vars: &BlockVars, mode: Mode) -> Result<Var> {
        let h = dilated_conv(x, &vars.c1_w, &vars.c1_b, self.spec.dilation)?;
        let h = self.apply_bn(h, &vars.bn1_gamma, &vars.bn1_beta, mode, 1)?;
        let h = h.relu()?;
        let h = dilated_conv(&h, &vars.c2_w, &vars.c2_b, self.spec.dilation)?;
        let h = self.apply_bn(h, &vars.bn2_gamma, &vars.bn2_beta, mode, 2)?;
        let skip = match &vars.proj {
            Some((w, b)) => dilated_conv(x, w, b, 1)?,
            None => x.clone(),
        };
        h.add(&skip)?.relu()
    }

    fn apply_bn(&mut self, x: Var, gamma: &Var, beta: &Var, mode: Mode, which: u8) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(&x, gamma, beta)?;
                let bn = if which == 1 { &mut self.bn1 } else { &mut self.bn2 };
                bn.fold_stats(&stats.mean, &stats.var);
                Ok(y)
            }
            Mode::Eval => {
                let bn = if which == 1 { &self.bn1 } else { &self.bn2 };
                batch_norm_eval(&x, gamma, beta, &bn.running_mean, &bn.running_var)
            }
        }
    }
}

/// Residual blocks with dilations 1, 2, 4, ... sized so the receptive field
/// covers the configured sequence length.
#[derive(Debug, Clone)]
pub struct TcnStack {
    pub blocks: Vec<ResidualBlock>,
    pub seq_len: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl TcnStack {
    /// Depth is the smallest L with `1 + 2*(k-1)*(2^L - 1) >= seq_len`.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden: usize,
        kernel: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel < 2 {
            return Err(Error::Config("tcn kernel must be >= 2".into()));
        }
        let mut depth = 1usize;
        while receptive_field(kernel, depth) < seq_len {
            depth += 1;
        }
        let mut blocks = Vec::with_capacity(depth);
        for l in 0..depth {
            let spec = ConvSpec {
                kernel,
                dilation: 1 << l,
                in_channels: if l == 0 { input_dim } else { hidden },
                out_channels: hidden,
            };
            blocks.push(ResidualBlock::init(spec, rng)?);
        }
        Ok(TcnStack { blocks, seq_len, input_dim, hidden, kernel })
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel, self.blocks.len())
    }

    pub fn forward_var(&mut self, x: &Var, vars: &[BlockVars], mode: Mode) -> Result<Var> {
        let shape = x.shape();
        let t = if shape.len() == 3 { shape[1] } else { shape[0] };
        if t != self.seq_len {
            return Err(Error::shape(
                "tcn_forward",
                format!("sequence length {} does not match configured {}", t, self.seq_len),
            ));
        }
        let mut h = x.clone();
        for (block, bv) in self.blocks.iter_mut().zip(vars) {
            h = block.forward_var(&h, bv, mode)?;
        }
        Ok(h)
    }

    pub fn watch(&self, tape: &Tape) -> Vec<BlockVars> {
        self.blocks.iter().map(|b| b.watch(tape)).collect()
    }
}

/// Receptive field of a stack of L residual blocks (two convs per block).
pub fn receptive_field(kernel: usize, depth: usize) -> usize {
    1 + 2 * (kernel - 1) * ((1usize << depth) - 1)
}

/// Value-level dilated causal convolution over a single `[T, C_in]` sequence.
pub fn dilated_causal_conv(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    spec.validate()?;
    if x.rank() != 2 || x.shape()[1] != spec.in_channels {
        return Err(Error::shape(
            "dilated_causal_conv",
            format!("input {:?} does not match spec {:?}", x.shape(), spec),
        ));
    }
    if w.shape() != [spec.kernel, spec.in_channels, spec.out_channels] {
        return Err(Error::shape(
            "dilated_causal_conv",
            format!("weights {:?} do not match spec {:?}", w.shape(), spec),
        ));
    }
    let t = x.shape()[0];
    let data = conv_forward(
        x.data(),
        1,
        t,
        spec.in_channels,
        w.data(),
        spec.kernel,
        spec.out_channels,
        b.data(),
        spec.dilation,
    );
    Tensor::new(vec![t, spec.out_channels], data)
}

/// Value-level residual block over `[T, C_in]`.
pub fn residual_block_forward(x: &Tensor, block: &mut ResidualBlock, mode: Mode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.watch(x);
    let vars = block.watch(&tape);
    Ok(block.forward_var(&xv, &vars, mode)?.value())
}

/// Value-level full stack over `[T, F]`.
pub fn tcn_forward(x: &Tensor, stack: &mut TcnStack, mode: Mode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.watch(x);
    let vars = stack.watch(&tape);
    Ok(stack.forward_var(&xv, &vars, mode)?.value())
}

// ── Raw kernels used by the tape ops ─────────────────────────────────

/// out[b,t,o] = bias[o] + sum_{i,c} w[i,c,o] * x[b, t - d*i, c], zero-padded
/// on the left. One gemm per kernel tap per batch row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    bsz: usize,
    t: usize,
    cin: usize,
    w: &[f64],
    k: usize,
    cout: usize,
    bias: &[f64],
    d: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(bsz * t * cout);
    for _ in 0..bsz * t {
        out.extend_from_slice(bias);
    }
    for i in 0..k {
        let shift = i * d;
        if shift >= t {
            continue;
        }
        let rows = t - shift;
        let wi = &w[i * cin * cout..(i + 1) * cin * cout];
        for b in 0..bsz {
            let xs = &x[b * t * cin..(b * t + rows) * cin];
            let os = &mut out[(b * t + shift) * cout..(b * t + t) * cout];
            gemm(false, false, rows, cin, cout, 1.0, xs, wi, 1.0, os);
        }
    }
    out
}

/// Gradients of `conv_forward` w.r.t. input, weights, and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    bsz: usize,
    t: usize,
    cin: usize,
    k: usize,
    cout: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; bsz * t * cin];
    let mut dw = vec![0.0; k * cin * cout];
    let mut db = vec![0.0; cout];
    for chunk in dy.chunks_exact(cout) {
        for (o, g) in db.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    for i in 0..k {
        let shift = i * d;
        if shift >= t {
            continue;
        }
        let rows = t - shift;
        let wi = &w[i * cin * cout..(i + 1) * cin * cout];
        let dwi = &mut dw[i * cin * cout..(i + 1) * cin * cout];
        for b in 0..bsz {
            let xs = &x[b * t * cin..(b * t + rows) * cin];
            let dys = &dy[(b * t + shift) * cout..(b * t + t) * cout];
            gemm(true, false, cin, rows, cout, 1.0, xs, dys, 1.0, dwi);
            let dxs = &mut dx[b * t * cin..(b * t + rows) * cin];
            gemm(false, true, rows, cout, cin, 1.0, dys, wi, 1.0, dxs);
        }
    }
    (dx, dw, db)
}

/// Backward through train-mode batch norm, including the batch statistics.
pub(crate) fn bn_backward_train(
    dy: &[f64],
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = mean.len();
    let rows = x.len() / c;
    let n = rows as f64;
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            let g = dy[r * c + j];
            let xhat = (x[r * c + j] - mean[j]) * invstd[j];
            dbeta[j] += g;
            dgamma[j] += g * xhat;
        }
    }
    let mut dx = vec![0.0; x.len()];
    for r in 0..rows {
        for j in 0..c {
            let xhat = (x[r * c + j] - mean[j]) * invstd[j];
            dx[r * c + j] =
                gamma[j] * invstd[j] * (dy[r * c + j] - dbeta[j] / n - xhat * dgamma[j] / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch norm; running statistics are constants.
pub(crate) fn bn_backward_eval(
    dy: &[f64],
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = mean.len();
    let rows = x.len() / c;
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    let mut dx = vec![0.0; x.len()];
    for r in 0..rows {
        for j in 0..c {
            let g = dy[r * c + j];
            let xhat = (x[r * c + j] - mean[j]) * invstd[j];
            dbeta[j] += g;
            dgamma[j] += g * xhat;
            dx[r * c + j] = g * gamma[j] * invstd[j];
        }
    }
    (dx, dgamma, dbeta)
}
