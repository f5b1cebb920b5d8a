//! Graph convolutional layers, batch norm, and MLP blocks. These compose the
//! base-matrix network, the Gaussian-bank network, and the CVAE
//! encoder/decoder trunks.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore, StatUpdates};
use crate::rng::{uniform_in, Prng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct FwdCtx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub binding: &'a mut Binding,
    pub updates: &'a mut StatUpdates,
    pub mode: Mode,
    /// When set, trainable parameters are bound without gradients (frozen
    /// CVAE during sampler training).
    pub freeze: bool,
}

impl<'a> FwdCtx<'a> {
    fn bind(&mut self, id: ParamId) -> Var {
        self.binding.bind(self.tape, self.store, id, self.freeze)
    }
}

fn glorot_uniform(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| uniform_in(rng, -s, s))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("glorot shape")
}

// ---------------------------------------------------------------------------
// Graph convolutional layer: H' = A H W with a fully learnable adjacency.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Gcl {
    pub adjacency: ParamId,
    pub weight: ParamId,
    pub joints: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl Gcl {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        joints: usize,
        f_in: usize,
        f_out: usize,
        rng: &mut Prng,
    ) -> Self {
        // Adjacency starts near the identity so early training is close to
        // per-joint processing.
        let mut adj = Tensor::eye(joints);
        for v in adj.data_mut() {
            *v += uniform_in(rng, -0.01, 0.01);
        }
        let adjacency = store.add(format!("{prefix}.adj"), adj, true);
        let weight = store.add(
            format!("{prefix}.weight"),
            glorot_uniform(rng, f_in, f_out),
            true,
        );
        Gcl {
            adjacency,
            weight,
            joints,
            f_in,
            f_out,
        }
    }

    /// x: [B, J, F_in] -> [B, J, F_out]
    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let shape = ctx.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.joints || shape[2] != self.f_in {
            return Err(Error::shape(
                "gcl_forward",
                &shape,
                &[0, self.joints, self.f_in],
            ));
        }
        let adj = self.bind_adj(ctx);
        let w = ctx.bind(self.weight);
        let ah = ctx.tape.matmul(adj, x)?;
        ctx.tape.matmul(ah, w)
    }

    fn bind_adj(&self, ctx: &mut FwdCtx) -> Var {
        ctx.bind(self.adjacency)
    }
}

// ---------------------------------------------------------------------------
// Batch norm over axis 0, features = flattened trailing dims.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        BatchNorm {
            scale: store.add(format!("{prefix}.bn.scale"), Tensor::full(&[dim], 1.0), true),
            shift: store.add(format!("{prefix}.bn.shift"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{prefix}.bn.running_var"), Tensor::full(&[dim], 1.0), false),
            dim,
        }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let shape = ctx.tape.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("batch_norm", "input must be batched"));
        }
        let b = shape[0];
        let d: usize = shape[1..].iter().product();
        if d != self.dim {
            return Err(Error::shape("batch_norm", &shape, &[b, self.dim]));
        }
        let x2 = if shape.len() == 2 {
            x
        } else {
            ctx.tape.reshape(x, &[b, d])?
        };

        let y2 = match ctx.mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batch_norm",
                        batch: b,
                    });
                }
                let mean = ctx.tape.mean_axis0(x2)?;
                let centered = ctx.tape.sub(x2, mean)?;
                let sq = ctx.tape.mul(centered, centered)?;
                let var = ctx.tape.mean_axis0(sq)?;
                self.queue_stat_updates(ctx, mean, var);
                let var_eps = ctx.tape.add_scalar(var, BN_EPS);
                let std = ctx.tape.sqrt(var_eps);
                let normalized = ctx.tape.div(centered, std)?;
                self.affine(ctx, normalized)?
            }
            Mode::Eval => {
                let m = ctx.store.get(self.running_mean).clone();
                let v = ctx.store.get(self.running_var);
                let inv: Vec<f64> = v.data().iter().map(|x| 1.0 / (x + BN_EPS).sqrt()).collect();
                let m_c = ctx.tape.constant(m);
                let inv_c = ctx
                    .tape
                    .constant(Tensor::new(&[d], inv).expect("bn inv shape"));
                let centered = ctx.tape.sub(x2, m_c)?;
                let normalized = ctx.tape.mul(centered, inv_c)?;
                self.affine(ctx, normalized)?
            }
        };
        if shape.len() == 2 {
            Ok(y2)
        } else {
            ctx.tape.reshape(y2, &shape)
        }
    }

    fn affine(&self, ctx: &mut FwdCtx, normalized: Var) -> Result<Var> {
        let scale = ctx.bind(self.scale);
        let shift = ctx.bind(self.shift);
        let scaled = ctx.tape.mul(normalized, scale)?;
        ctx.tape.add(scaled, shift)
    }

    fn queue_stat_updates(&self, ctx: &mut FwdCtx, mean: Var, var: Var) {
        let bm = ctx.tape.value(mean).data();
        let bv = ctx.tape.value(var).data();
        let rm = ctx.store.get(self.running_mean).data();
        let rv = ctx.store.get(self.running_var).data();
        let new_m: Vec<f64> = rm
            .iter()
            .zip(bm)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
            .collect();
        let new_v: Vec<f64> = rv
            .iter()
            .zip(bv)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
            .collect();
        ctx.updates.push(
            self.running_mean,
            Tensor::new(&[self.dim], new_m).expect("bn stat shape"),
        );
        ctx.updates.push(
            self.running_var,
            Tensor::new(&[self.dim], new_v).expect("bn stat shape"),
        );
    }
}

// ---------------------------------------------------------------------------
// Linear layer with bias.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub f_in: usize,
    pub f_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        f_in: usize,
        f_out: usize,
        rng: &mut Prng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{prefix}.weight"),
                glorot_uniform(rng, f_in, f_out),
                true,
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[f_out]), true),
            f_in,
            f_out,
        }
    }

    /// x: [N, F_in] -> [N, F_out]
    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let shape = ctx.tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.f_in {
            return Err(Error::shape("mlp_forward", &shape, &[0, self.f_in]));
        }
        let w = ctx.bind(self.weight);
        let b = ctx.bind(self.bias);
        let xw = ctx.tape.matmul(x, w)?;
        ctx.tape.add(xw, b)
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// A stack of GCL-BN-Tanh layers operating on [B, J, F] activations.
#[derive(Debug, Clone)]
pub struct GcnBlock {
    pub layers: Vec<(Gcl, BatchNorm)>,
}

impl GcnBlock {
    /// `widths` chains layer feature sizes: `widths[0]` is the input width.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        joints: usize,
        widths: &[usize],
        rng: &mut Prng,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let lp = format!("{prefix}.{i}");
            let gcl = Gcl::new(store, &lp, joints, widths[i], widths[i + 1], rng);
            let bn = BatchNorm::new(store, &lp, joints * widths[i + 1]);
            layers.push((gcl, bn));
        }
        GcnBlock { layers }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let mut h = x;
        for (gcl, bn) in &self.layers {
            h = gcl.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.tanh(h);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub tanh: bool,
}

/// Sequential Linear(-BN-Tanh) stack on [N, F] activations.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub layers: Vec<MlpLayer>,
}

impl MlpBlock {
    /// layout entries: (f_out, batch_norm, tanh)
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        f_in: usize,
        layout: &[(usize, bool, bool)],
        rng: &mut Prng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cur = f_in;
        for (i, (f_out, with_bn, tanh)) in layout.iter().enumerate() {
            let lp = format!("{prefix}.{i}");
            let linear = Linear::new(store, &lp, cur, *f_out, rng);
            let bn = with_bn.then(|| BatchNorm::new(store, &lp, *f_out));
            layers.push(MlpLayer {
                linear,
                bn,
                tanh: *tanh,
            });
            cur = *f_out;
        }
        MlpBlock { layers }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.linear.forward(ctx, h)?;
            if let Some(bn) = &layer.bn {
                h = bn.forward(ctx, h)?;
            }
            if layer.tanh {
                h = ctx.tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.f_out)
    }
}
