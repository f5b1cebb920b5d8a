//! The pretrained conditional VAE over DCT-encoded pose sequences: a
//! posterior encoder, a decoder with a residual connection in frequency
//! space, ELBO training, and the random-sampling baseline.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint;
use crate::config::HyperParams;
use crate::dct;
use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Gcl, GcnBlock, Linear, Mode};
use crate::optim::{lr_schedule, AdamState};
use crate::params::{Binding, ParamStore, StatUpdates};
use crate::rng::{self, Prng};
use crate::synth::{Dataset, MotionSample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SIGMA_FLOOR: f64 = 1e-4;
const ENCODER_GCN_LAYERS: usize = 9;
const DECODER_GCN_LAYERS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvaeDims {
    pub joints: usize,
    pub coords: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    pub n_dct: usize,
    pub n_z: usize,
    pub feat_dim: usize,
}

impl CvaeDims {
    pub fn from_hyper(h: &HyperParams) -> Self {
        CvaeDims {
            joints: h.joints,
            coords: h.coords,
            history_frames: h.history_frames,
            future_frames: h.future_frames,
            n_dct: h.n_dct,
            n_z: h.n_z,
            feat_dim: h.feat_dim,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.history_frames + self.future_frames
    }

    pub fn pose_rows(&self) -> usize {
        self.joints * self.coords
    }

    /// Per-joint coefficient width C * n_dct.
    pub fn coeff_width(&self) -> usize {
        self.coords * self.n_dct
    }
}

#[derive(Debug)]
pub struct CvaeModel {
    pub dims: CvaeDims,
    pub store: ParamStore,
    pub encoder_gcn: GcnBlock,
    pub mu_head: Linear,
    pub sigma_head: Linear,
    pub decoder_gcn: GcnBlock,
    pub decoder_out: Gcl,
}

impl CvaeModel {
    pub fn new(dims: CvaeDims, rng: &mut Prng) -> Self {
        let mut store = ParamStore::new();
        let f = dims.feat_dim;
        let cn = dims.coeff_width();

        let mut enc_widths = vec![2 * cn];
        enc_widths.extend(std::iter::repeat_n(f, ENCODER_GCN_LAYERS));
        let encoder_gcn = GcnBlock::new(&mut store, "cvae.enc.gcn", dims.joints, &enc_widths, rng);
        let mu_head = Linear::new(&mut store, "cvae.enc.mu", dims.joints * f, dims.n_z, rng);
        let sigma_head = Linear::new(&mut store, "cvae.enc.sigma", dims.joints * f, dims.n_z, rng);

        let mut dec_widths = vec![cn + dims.n_z];
        dec_widths.extend(std::iter::repeat_n(f, DECODER_GCN_LAYERS));
        let decoder_gcn = GcnBlock::new(&mut store, "cvae.dec.gcn", dims.joints, &dec_widths, rng);
        let decoder_out = Gcl::new(&mut store, "cvae.dec.out", dims.joints, f, cn, rng);

        CvaeModel {
            dims,
            store,
            encoder_gcn,
            mu_head,
            sigma_head,
            decoder_gcn,
            decoder_out,
        }
    }

    /// DCT coefficients of an observed sequence: pad the last frame out to
    /// H+T, transform, keep n_dct, reshape to [J, C*n_dct].
    pub fn x_to_coeffs(&self, x: &Tensor) -> Result<Tensor> {
        let d = &self.dims;
        if x.shape() != [d.pose_rows(), d.history_frames] {
            return Err(Error::shape(
                "x_to_coeffs",
                x.shape(),
                &[d.pose_rows(), d.history_frames],
            ));
        }
        let padded = dct::pad_last_frame(x, d.future_frames)?;
        let cfg = dct::DctConfig::new(d.seq_len(), d.n_dct)?;
        let coeffs = dct::dct_truncate(&padded, &cfg)?;
        coeffs.reshaped(&[d.joints, d.coeff_width()])
    }

    /// DCT coefficients of a future sequence over its own T frames.
    pub fn y_to_coeffs(&self, y: &Tensor) -> Result<Tensor> {
        let d = &self.dims;
        if y.shape() != [d.pose_rows(), d.future_frames] {
            return Err(Error::shape(
                "y_to_coeffs",
                y.shape(),
                &[d.pose_rows(), d.future_frames],
            ));
        }
        let cfg = dct::DctConfig::new(d.future_frames, d.n_dct)?;
        let coeffs = dct::dct_truncate(y, &cfg)?;
        coeffs.reshaped(&[d.joints, d.coeff_width()])
    }

    /// Posterior parameters from a batch of coefficient pairs.
    /// x_dct, y_dct: [B, J, C*n_dct] -> (mu, sigma): [B, n_z] each,
    /// sigma strictly positive via softplus + floor.
    pub fn encode(&self, ctx: &mut FwdCtx, x_dct: Var, y_dct: Var) -> Result<(Var, Var)> {
        let enc_in = ctx.tape.concat(&[x_dct, y_dct], 2)?;
        let h = self.encoder_gcn.forward(ctx, enc_in)?;
        let b = ctx.tape.value(h).shape()[0];
        let flat = ctx
            .tape
            .reshape(h, &[b, self.dims.joints * self.dims.feat_dim])?;
        let mu = self.mu_head.forward(ctx, flat)?;
        let sigma_raw = self.sigma_head.forward(ctx, flat)?;
        let sp = ctx.tape.softplus(sigma_raw);
        let sigma = ctx.tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// Decode latent codes against observed coefficients.
    /// x_dct: [B, J, C*n_dct], z: [B, n_z] -> predictions [B, J*C, T].
    pub fn decode(&self, ctx: &mut FwdCtx, x_dct: Var, z: Var) -> Result<Var> {
        let d = &self.dims;
        let b = ctx.tape.value(z).shape()[0];
        if ctx.tape.value(x_dct).shape() != [b, d.joints, d.coeff_width()] {
            return Err(Error::shape(
                "decode",
                ctx.tape.value(x_dct).shape(),
                &[b, d.joints, d.coeff_width()],
            ));
        }
        let z_tiled = ctx.tape.broadcast(z, 1, d.joints)?; // [B, J, n_z]
        let dec_in = ctx.tape.concat(&[x_dct, z_tiled], 2)?;
        let h = self.decoder_gcn.forward(ctx, dec_in)?;
        let out = self.decoder_out.forward(ctx, h)?; // [B, J, C*n_dct]
        let res = ctx.tape.add(out, x_dct)?;
        let coeffs = ctx.tape.reshape(res, &[b, d.pose_rows(), d.n_dct])?;
        let idct = ctx.tape.constant(dct::idct_matrix(d.seq_len(), d.n_dct));
        let seq = ctx.tape.matmul(coeffs, idct)?; // [B, J*C, H+T]
        ctx.tape.slice(seq, 2, d.history_frames, d.future_frames)
    }

    /// Single-sample ELBO estimate: closed-form KL to the unit Gaussian plus
    /// per-element squared reconstruction error, averaged over the batch.
    pub fn elbo_loss(
        &self,
        ctx: &mut FwdCtx,
        x_dct: Var,
        y_dct: Var,
        y_true: Var,
        eps: Var,
        kl_weight: f64,
    ) -> Result<(Var, LossParts)> {
        let b = ctx.tape.value(eps).shape()[0];
        let (mu, sigma) = self.encode(ctx, x_dct, y_dct)?;
        let z = reparameterize(ctx.tape, mu, sigma, eps)?;
        let pred = self.decode(ctx, x_dct, z)?;

        let diff = ctx.tape.sub(pred, y_true)?;
        let sq = ctx.tape.mul(diff, diff)?;
        let recon = ctx.tape.mean(sq);

        let kl = gaussian_kl_to_unit(ctx.tape, mu, sigma)?;
        let kl_mean = ctx.tape.scale(kl, 1.0 / b as f64);

        let kl_w = ctx.tape.scale(kl_mean, kl_weight);
        let total = ctx.tape.add(kl_w, recon)?;
        let parts = LossParts {
            kl: ctx.tape.value(kl_mean).item(),
            recon: ctx.tape.value(recon).item(),
        };
        Ok((total, parts))
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let d = &self.dims;
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "cvae".into());
        m.insert("joints".into(), d.joints.to_string());
        m.insert("coords".into(), d.coords.to_string());
        m.insert("history_frames".into(), d.history_frames.to_string());
        m.insert("future_frames".into(), d.future_frames.to_string());
        m.insert("n_dct".into(), d.n_dct.to_string());
        m.insert("n_z".into(), d.n_z.to_string());
        m.insert("feat_dim".into(), d.feat_dim.to_string());
        m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.store, &self.meta(), dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded = checkpoint::load(dir)?;
        if loaded.meta.get("kind").map(String::as_str) != Some("cvae") {
            return Err(Error::Checkpoint(format!(
                "{} is not a cvae checkpoint",
                dir.display()
            )));
        }
        let dims = dims_from_meta(&loaded.meta)?;
        let mut rng = rng::stream(0, "load");
        let mut model = CvaeModel::new(dims, &mut rng);
        checkpoint::apply(&loaded, &mut model.store)?;
        Ok(model)
    }

    /// Zero every decoder parameter so the decoder GCN emits zeros and the
    /// residual path alone drives the output. Diagnostic hook.
    pub fn zero_decoder(&mut self) {
        let mut ids = vec![self.decoder_out.adjacency, self.decoder_out.weight];
        for (gcl, bn) in &self.decoder_gcn.layers {
            ids.push(gcl.adjacency);
            ids.push(gcl.weight);
            ids.push(bn.scale);
            ids.push(bn.shift);
        }
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

pub fn dims_from_meta(meta: &BTreeMap<String, String>) -> Result<CvaeDims> {
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad meta value for {k}")))
    };
    Ok(CvaeDims {
        joints: get("joints")?,
        coords: get("coords")?,
        history_frames: get("history_frames")?,
        future_frames: get("future_frames")?,
        n_dct: get("n_dct")?,
        n_z: get("n_z")?,
        feat_dim: get("feat_dim")?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub kl: f64,
    pub recon: f64,
}

/// z = mu + sigma (.) eps
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("reparameterize", "sigma must be positive"));
    }
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

/// Sum over all entries of KL(N(mu, sigma^2) || N(0, I)) in closed form:
/// 0.5 * sum(sigma^2 + mu^2 - 1 - log sigma^2).
pub fn gaussian_kl_to_unit(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let sigma2 = tape.mul(sigma, sigma)?;
    let mu2 = tape.mul(mu, mu)?;
    let log_s2 = tape.log(sigma2);
    let a = tape.add(sigma2, mu2)?;
    let b = tape.sub(a, log_s2)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

/// Decode K independent prior draws z ~ N(0, I) for one observed sequence.
pub fn random_sample(
    model: &CvaeModel,
    x: &Tensor,
    k: usize,
    rng: &mut Prng,
) -> Result<Vec<Tensor>> {
    if k < 1 {
        return Err(Error::invalid("random_sample", "K must be >= 1"));
    }
    let x_dct = model.x_to_coeffs(x)?;
    let z = Tensor::new(&[k, model.dims.n_z], rng::normal_vec(rng, k * model.dims.n_z))?;
    decode_batch(model, &x_dct, &z)
}

/// Decode a [K, n_z] batch of latents against a single observed sequence's
/// coefficients, in eval mode with frozen parameters.
pub fn decode_batch(model: &CvaeModel, x_dct: &Tensor, z: &Tensor) -> Result<Vec<Tensor>> {
    let k = z.shape()[0];
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut updates = StatUpdates::new();
    let mut ctx = FwdCtx {
        tape: &mut tape,
        store: &model.store,
        binding: &mut binding,
        updates: &mut updates,
        mode: Mode::Eval,
        freeze: true,
    };
    let xv0 = ctx.tape.constant(x_dct.clone());
    let xv = ctx.tape.broadcast(xv0, 0, k)?;
    let zv = ctx.tape.constant(z.clone());
    let pred = model.decode(&mut ctx, xv, zv)?;
    split_rows0(tape.value(pred))
}

/// Split [K, R, T] into K tensors [R, T].
pub fn split_rows0(t: &Tensor) -> Result<Vec<Tensor>> {
    let k = t.shape()[0];
    let rest: Vec<usize> = t.shape()[1..].to_vec();
    let n: usize = rest.iter().product();
    (0..k)
        .map(|i| Tensor::new(&rest, t.data()[i * n..(i + 1) * n].to_vec()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,mean_loss,lr"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.12e},{:.12e}", self.epoch, self.mean_loss, self.lr)
    }
}

/// Precomputed per-sample training inputs.
pub struct PreparedSample {
    pub x_dct: Tensor,
    pub y_dct: Tensor,
    pub y: Tensor,
}

pub fn prepare(model: &CvaeModel, samples: &[MotionSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                x_dct: model.x_to_coeffs(&s.observed)?,
                y_dct: model.y_to_coeffs(&s.future)?,
                y: s.future.clone(),
            })
        })
        .collect()
}

pub fn train_cvae(
    dataset: &Dataset,
    hyper: &HyperParams,
    seed: u64,
) -> Result<(CvaeModel, Vec<EpochLog>)> {
    if dataset.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let mut init_rng = rng::stream(seed, "init");
    let mut model = CvaeModel::new(CvaeDims::from_hyper(hyper), &mut init_rng);
    let mut train_rng = rng::stream(seed, "training");
    let prepared = prepare(&model, &dataset.train)?;
    let trainable = model.store.trainable_ids();
    let mut adam = AdamState::new(&model.store, trainable, hyper.lr);
    let mut logs = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        let lr = lr_schedule(
            epoch,
            hyper.lr,
            hyper.lr_final,
            hyper.lr_flat_epochs,
            hyper.epochs,
        );
        adam.lr = lr;
        let n = hyper.epoch_samples.min(prepared.len());
        let subset = crate::synth::epoch_subset(prepared.len(), n, false, &mut train_rng)?;
        let mut losses = Vec::new();
        for chunk in subset.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue; // batch norm needs at least two rows
            }
            let loss = cvae_step(&mut model, &prepared, chunk, hyper, &mut train_rng, &mut adam)?;
            losses.push(loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            mean_loss,
            lr,
        });
    }
    Ok((model, logs))
}

fn cvae_step(
    model: &mut CvaeModel,
    prepared: &[PreparedSample],
    chunk: &[usize],
    hyper: &HyperParams,
    rng: &mut Prng,
    adam: &mut AdamState,
) -> Result<f64> {
    let b = chunk.len();
    let x_refs: Vec<&Tensor> = chunk.iter().map(|i| &prepared[*i].x_dct).collect();
    let y_refs: Vec<&Tensor> = chunk.iter().map(|i| &prepared[*i].y_dct).collect();
    let yt_refs: Vec<&Tensor> = chunk.iter().map(|i| &prepared[*i].y).collect();
    let x_batch = Tensor::stack(&x_refs)?;
    let y_batch = Tensor::stack(&y_refs)?;
    let yt_batch = Tensor::stack(&yt_refs)?;
    let eps = Tensor::new(&[b, model.dims.n_z], rng::normal_vec(rng, b * model.dims.n_z))?;

    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut updates = StatUpdates::new();
    let loss_val;
    {
        let mut ctx = FwdCtx {
            tape: &mut tape,
            store: &model.store,
            binding: &mut binding,
            updates: &mut updates,
            mode: Mode::Train,
            freeze: false,
        };
        let xv = ctx.tape.constant(x_batch);
        let yv = ctx.tape.constant(y_batch);
        let ytv = ctx.tape.constant(yt_batch);
        let ev = ctx.tape.constant(eps);
        let (loss, _) = model.elbo_loss(&mut ctx, xv, yv, ytv, ev, hyper.cvae_kl_weight)?;
        loss_val = ctx.tape.value(loss).item();
        let grads = ctx.tape.backward(loss)?;
        let by_param = collect_grads(&tape, &binding, &grads, adam.param_ids());
        adam.step(&mut model.store, &by_param)?;
    }
    updates.apply(&mut model.store)?;
    Ok(loss_val)
}

/// Route tape gradients back to optimizer slots via the binding table.
pub fn collect_grads(
    tape: &Tape,
    binding: &Binding,
    grads: &crate::tape::Gradients,
    param_ids: &[crate::params::ParamId],
) -> Vec<Option<Tensor>> {
    param_ids
        .iter()
        .map(|pid| {
            binding
                .bound()
                .iter()
                .find(|(id, _)| id == pid)
                .map(|(_, var)| grads.tensor(tape, *var))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synth::{generate, GenConfig};

    fn micro_dims() -> CvaeDims {
        CvaeDims {
            joints: 3,
            coords: 2,
            history_frames: 4,
            future_frames: 5,
            n_dct: 3,
            n_z: 4,
            feat_dim: 6,
        }
    }

    fn eval_ctx<'a>(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        binding: &'a mut Binding,
        updates: &'a mut StatUpdates,
    ) -> FwdCtx<'a> {
        FwdCtx {
            tape,
            store,
            binding,
            updates,
            mode: Mode::Eval,
            freeze: true,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = rng::stream(seed, "cvae-test");
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn encoder_outputs_positive_sigma() {
        let mut r = rng::stream(1, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut updates = StatUpdates::new();
        let mut ctx = eval_ctx(&mut tape, &model.store, &mut binding, &mut updates);
        let cn = model.dims.coeff_width();
        let x = ctx.tape.constant(rand_tensor(&[2, 3, cn], 2));
        let y = ctx.tape.constant(rand_tensor(&[2, 3, cn], 3));
        let (mu, sigma) = model.encode(&mut ctx, x, y).unwrap();
        assert_eq!(tape.value(mu).shape(), &[2, 4]);
        for v in tape.value(sigma).data() {
            assert!(*v > 0.0);
        }
    }

    #[test]
    fn encoder_heads_have_paper_width() {
        let h = HyperParams::h36m();
        let mut r = rng::stream(2, "init");
        let model = CvaeModel::new(CvaeDims::from_hyper(&h), &mut r);
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut updates = StatUpdates::new();
        let mut ctx = eval_ctx(&mut tape, &model.store, &mut binding, &mut updates);
        let cn = model.dims.coeff_width();
        let x = ctx.tape.constant(Tensor::zeros(&[1, 17, cn]));
        let y = ctx.tape.constant(Tensor::zeros(&[1, 17, cn]));
        let (mu, sigma) = model.encode(&mut ctx, x, y).unwrap();
        assert_eq!(tape.value(mu).shape(), &[1, 64]);
        assert_eq!(tape.value(sigma).shape(), &[1, 64]);
    }

    #[test]
    fn reparameterize_cases() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sigma = tape.constant(Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[3]));
        let z = reparameterize(&mut tape, mu, sigma, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, -2.0, 0.5]);

        let mu0 = tape.constant(Tensor::zeros(&[3]));
        let one = tape.constant(Tensor::full(&[3], 1.0));
        let eps = tape.constant(Tensor::new(&[3], vec![0.3, -0.7, 2.2]).unwrap());
        let z2 = reparameterize(&mut tape, mu0, one, eps).unwrap();
        assert_eq!(tape.value(z2).data(), &[0.3, -0.7, 2.2]);

        let bad = tape.constant(Tensor::new(&[3], vec![0.5, 0.0, 1.0]).unwrap());
        assert!(reparameterize(&mut tape, mu0, bad, eps).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let mut r = rng::stream(5, "eval");
        let n = 100_000usize;
        let (mu, sigma) = (0.7, 1.3);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += mu + sigma * rng::normal(&mut r);
        }
        let mean = sum / n as f64;
        let tol = 3.0 * sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < tol, "{mean} vs {mu} (tol {tol})");
    }

    #[test]
    fn kl_closed_form_values() {
        let mut tape = Tape::new();
        // mu = 0, sigma = 1 -> 0
        let mu = tape.constant(Tensor::zeros(&[4]));
        let sigma = tape.constant(Tensor::full(&[4], 1.0));
        let kl = gaussian_kl_to_unit(&mut tape, mu, sigma).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
        // n_z = 1, mu = 1, sigma = 1 -> 0.5
        let mu1 = tape.constant(Tensor::full(&[1], 1.0));
        let s1 = tape.constant(Tensor::full(&[1], 1.0));
        let kl1 = gaussian_kl_to_unit(&mut tape, mu1, s1).unwrap();
        assert!((tape.value(kl1).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_leaves_only_kl() {
        let mut r = rng::stream(6, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        let d = model.dims;
        let x_dct = rand_tensor(&[2, d.joints, d.coeff_width()], 7);
        let y_dct = rand_tensor(&[2, d.joints, d.coeff_width()], 8);
        let eps = rand_tensor(&[2, d.n_z], 9);

        // run encode+decode once to capture the model's own prediction
        let pred = {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut updates = StatUpdates::new();
            let mut ctx = eval_ctx(&mut tape, &model.store, &mut binding, &mut updates);
            let xv = ctx.tape.constant(x_dct.clone());
            let yv = ctx.tape.constant(y_dct.clone());
            let ev = ctx.tape.constant(eps.clone());
            let (mu, sigma) = model.encode(&mut ctx, xv, yv).unwrap();
            let z = reparameterize(ctx.tape, mu, sigma, ev).unwrap();
            let p = model.decode(&mut ctx, xv, z).unwrap();
            tape.value(p).clone()
        };

        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut updates = StatUpdates::new();
        let mut ctx = eval_ctx(&mut tape, &model.store, &mut binding, &mut updates);
        let xv = ctx.tape.constant(x_dct);
        let yv = ctx.tape.constant(y_dct);
        let ytv = ctx.tape.constant(pred);
        let ev = ctx.tape.constant(eps);
        let (total, parts) = model.elbo_loss(&mut ctx, xv, yv, ytv, ev, 1.0).unwrap();
        assert!(parts.recon.abs() < 1e-18);
        assert!((tape.value(total).item() - parts.kl).abs() < 1e-12);
    }

    #[test]
    fn decode_depends_on_z_and_is_deterministic() {
        let mut r = rng::stream(10, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        let d = model.dims;
        let x = rand_tensor(&[d.pose_rows(), d.history_frames], 11);
        let x_dct = model.x_to_coeffs(&x).unwrap();
        let z1 = rand_tensor(&[1, d.n_z], 12);
        let z2 = rand_tensor(&[1, d.n_z], 13);
        let p1 = decode_batch(&model, &x_dct, &z1).unwrap();
        let p1b = decode_batch(&model, &x_dct, &z1).unwrap();
        let p2 = decode_batch(&model, &x_dct, &z2).unwrap();
        assert_eq!(p1[0].data(), p1b[0].data());
        assert!(p1[0].max_abs_diff(&p2[0]) > 1e-8);
        assert_eq!(p1[0].shape(), &[d.pose_rows(), d.future_frames]);
    }

    #[test]
    fn decode_output_shape_at_h36m_defaults() {
        let h = HyperParams::h36m();
        let mut r = rng::stream(14, "init");
        let model = CvaeModel::new(CvaeDims::from_hyper(&h), &mut r);
        let x = rand_tensor(&[51, 25], 15);
        let x_dct = model.x_to_coeffs(&x).unwrap();
        let z = rand_tensor(&[1, 64], 16);
        let preds = decode_batch(&model, &x_dct, &z).unwrap();
        assert_eq!(preds[0].shape(), &[51, 100]);
    }

    #[test]
    fn residual_path_reproduces_future_slice_at_full_rank() {
        // full-rank DCT and a zeroed decoder: output must equal the padded
        // input's future slice exactly
        let mut dims = micro_dims();
        dims.n_dct = dims.seq_len();
        let mut r = rng::stream(17, "init");
        let mut model = CvaeModel::new(dims, &mut r);
        model.zero_decoder();
        let x = rand_tensor(&[dims.pose_rows(), dims.history_frames], 18);
        let x_dct = model.x_to_coeffs(&x).unwrap();
        let z = Tensor::zeros(&[1, dims.n_z]);
        let preds = decode_batch(&model, &x_dct, &z).unwrap();
        let padded = dct::pad_last_frame(&x, dims.future_frames).unwrap();
        let mut expect = Vec::new();
        for rr in 0..dims.pose_rows() {
            expect.extend_from_slice(&padded.row(rr)[dims.history_frames..]);
        }
        let expect = Tensor::new(&[dims.pose_rows(), dims.future_frames], expect).unwrap();
        assert!(preds[0].max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn kl_gradient_through_encoder_matches_finite_differences() {
        let mut r = rng::stream(19, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        let d = model.dims;
        let x_dct = rand_tensor(&[2, d.joints, d.coeff_width()], 20);
        let y_dct = rand_tensor(&[2, d.joints, d.coeff_width()], 21);

        let run = |store: &ParamStore| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut updates = StatUpdates::new();
            let mut ctx = FwdCtx {
                tape: &mut tape,
                store,
                binding: &mut binding,
                updates: &mut updates,
                mode: Mode::Train,
                freeze: false,
            };
            let xv = ctx.tape.constant(x_dct.clone());
            let yv = ctx.tape.constant(y_dct.clone());
            let (mu, sigma) = model.encode(&mut ctx, xv, yv).unwrap();
            let kl = gaussian_kl_to_unit(ctx.tape, mu, sigma).unwrap();
            let grads = tape.backward(kl).unwrap();
            let wvar = binding
                .bound()
                .iter()
                .find(|(id, _)| *id == model.mu_head.weight)
                .map(|(_, v)| *v);
            (
                tape.value(kl).item(),
                wvar.and_then(|v| grads.get(v).map(|g| g.to_vec())),
            )
        };
        let (_, ad) = run(&model.store);
        let ad = ad.unwrap();
        let base = model.store.get(model.mu_head.weight).clone();
        let fd = gradcheck::central_diff(
            |vals| {
                let mut s = model.store.clone();
                s.set(
                    model.mu_head.weight,
                    Tensor::new(base.shape(), vals.to_vec()).unwrap(),
                )
                .unwrap();
                run(&s).0
            },
            base.data(),
            1e-5,
        );
        let err = gradcheck::max_rel_err(&ad, &fd);
        assert!(err < 1e-4, "max rel err {err}");
    }

    fn toy_hyper() -> HyperParams {
        let mut h = HyperParams::desk();
        h.joints = 4;
        h.history_frames = 5;
        h.future_frames = 8;
        h.n_modes = 2;
        h.n_train = 50;
        h.n_test = 4;
        h.feat_dim = 8;
        h.n_dct = 4;
        h.n_b = 8;
        h.n_h = 6;
        h.n_z = 4;
        h.m_basis = 4;
        h.k_train = 3;
        h.epochs = 5;
        h.epoch_samples = 50;
        h.batch_size = 10;
        h
    }

    #[test]
    fn training_is_deterministic_and_loss_improves() {
        let h = toy_hyper();
        let ds = generate(&GenConfig::from_hyper(&h), 33).unwrap();
        let (m1, logs1) = train_cvae(&ds, &h, 99).unwrap();
        let (m2, logs2) = train_cvae(&ds, &h, 99).unwrap();
        for (a, b) in m1.store.entries().iter().zip(m2.store.entries()) {
            assert_eq!(a.value.data(), b.value.data(), "param {} differs", a.name);
        }
        assert_eq!(logs1.len(), logs2.len());
        assert!(
            logs1.last().unwrap().mean_loss < logs1[0].mean_loss,
            "loss did not improve: {} -> {}",
            logs1[0].mean_loss,
            logs1.last().unwrap().mean_loss
        );
    }

    #[test]
    fn training_loss_windows_are_monotone() {
        let mut h = toy_hyper();
        h.epochs = 30;
        let ds = generate(&GenConfig::from_hyper(&h), 35).unwrap();
        let (_, logs) = train_cvae(&ds, &h, 101).unwrap();
        let window = 10;
        let means: Vec<f64> = logs
            .chunks(window)
            .map(|w| w.iter().map(|l| l.mean_loss).sum::<f64>() / w.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "window means increased: {means:?}");
        }
    }

    #[test]
    fn lr_schedule_hits_paper_endpoints() {
        assert_eq!(lr_schedule(1, 1e-3, 7e-4, 100, 500), 1e-3);
        assert_eq!(lr_schedule(100, 1e-3, 7e-4, 100, 500), 1e-3);
        let at_500 = lr_schedule(500, 1e-3, 7e-4, 100, 500);
        assert!((at_500 - 7e-4).abs() < 1e-18);
        let mid = lr_schedule(300, 1e-3, 7e-4, 100, 500);
        assert!(mid < 1e-3 && mid > 7e-4);
    }

    #[test]
    fn random_sample_shapes_and_reproducibility() {
        let mut r = rng::stream(50, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        let d = model.dims;
        let x = rand_tensor(&[d.pose_rows(), d.history_frames], 51);
        let mut rng1 = rng::stream(52, "eval");
        let one = random_sample(&model, &x, 1, &mut rng1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].shape(), &[d.pose_rows(), d.future_frames]);

        let mut rng2 = rng::stream(53, "eval");
        let mut rng3 = rng::stream(53, "eval");
        let a = random_sample(&model, &x, 5, &mut rng2).unwrap();
        let b = random_sample(&model, &x, 5, &mut rng3).unwrap();
        for (x1, x2) in a.iter().zip(&b) {
            assert_eq!(x1.data(), x2.data());
        }
        assert!(random_sample(&model, &x, 0, &mut rng2).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::stream(60, "init");
        let model = CvaeModel::new(micro_dims(), &mut r);
        model.save(dir.path()).unwrap();
        let back = CvaeModel::load(dir.path()).unwrap();
        assert_eq!(back.dims, model.dims);
        for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}
