//! Sampler training objectives: the hinge diversity loss, the exponential
//! diversity baseline, best-of-K accuracy, the Gaussian-bank KL regularizer,
//! their weighted total, and the training loop that optimizes a bank network
//! against a frozen CVAE decoder.

use crate::config::{DivLossKind, HyperParams, Method};
use crate::cvae::{collect_grads, gaussian_kl_to_unit, prepare, CvaeModel, PreparedSample};
use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Mode};
use crate::optim::{lr_schedule, AdamState};
use crate::params::{Binding, StatUpdates};
use crate::rng::{self, Prng};
use crate::sampler::{BankNet, DlowModel, SamplerModel};
use crate::synth::{epoch_subset, Dataset};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights and thresholds of the sampler objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_hdiv: f64,
    pub lambda_acc: f64,
    pub lambda_kl: f64,
    pub eta: f64,
    pub sigma_div: f64,
}

impl LossWeights {
    pub fn from_hyper(h: &HyperParams) -> Self {
        LossWeights {
            lambda_hdiv: h.lambda_hdiv,
            lambda_acc: h.lambda_acc,
            lambda_kl: h.lambda_kl,
            eta: h.eta,
            sigma_div: h.sigma_div,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub hdiv: f64,
    pub acc: f64,
    pub kl: f64,
}

fn l2_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.sqrt(s))
}

fn sq_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(acc)
}

/// Mean over the K(K-1) ordered pairs of max(0, eta - ||y_i - y_j||).
/// Distances are symmetric, so unordered pairs are computed once and the
/// ordered normalization follows by doubling.
pub fn hinge_diversity(tape: &mut Tape, preds: &[Var], eta: f64) -> Result<Var> {
    let k = preds.len();
    if k < 2 {
        return Err(Error::invalid("hinge_diversity", "needs K >= 2 predictions"));
    }
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let d = l2_distance(tape, preds[i], preds[j])?;
            let neg = tape.scale(d, -1.0);
            let margin = tape.add_scalar(neg, eta);
            terms.push(tape.relu(margin));
        }
    }
    let total = sum_vars(tape, &terms)?;
    Ok(tape.scale(total, 2.0 / (k * (k - 1)) as f64))
}

/// Mean over ordered pairs of exp(-D^2(y_i, y_j) / sigma).
pub fn energy_diversity(tape: &mut Tape, preds: &[Var], sigma_div: f64) -> Result<Var> {
    let k = preds.len();
    if k < 2 {
        return Err(Error::invalid("energy_diversity", "needs K >= 2 predictions"));
    }
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let d2 = sq_distance(tape, preds[i], preds[j])?;
            let scaled = tape.scale(d2, -1.0 / sigma_div);
            terms.push(tape.exp(scaled));
        }
    }
    let total = sum_vars(tape, &terms)?;
    Ok(tape.scale(total, 2.0 / (k * (k - 1)) as f64))
}

/// min_k ||y - y_k||_2 over flattened sequences. The argmin is selected at
/// graph-construction time, so the gradient flows through that branch only.
pub fn accuracy_loss(tape: &mut Tape, preds: &[Var], gt: Var) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::invalid("accuracy_loss", "needs K >= 1 predictions"));
    }
    let mut best: Option<Var> = None;
    for p in preds {
        let d = l2_distance(tape, *p, gt)?;
        best = match best {
            None => Some(d),
            Some(cur) => {
                if tape.value(d).item() < tape.value(cur).item() {
                    Some(d)
                } else {
                    Some(cur)
                }
            }
        };
    }
    Ok(best.expect("non-empty preds"))
}

/// Mean over bank rows of KL(N(b_k, diag(A_k^2)) || N(0, I)).
pub fn kl_regularizer(tape: &mut Tape, means: Var, scales: Var) -> Result<Var> {
    let shape = tape.value(scales).shape().to_vec();
    if shape.len() != 2 || tape.value(means).shape() != shape {
        return Err(Error::shape(
            "kl_regularizer",
            tape.value(means).shape(),
            &shape,
        ));
    }
    if tape.value(scales).data().iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("kl_regularizer", "scales must be positive"));
    }
    let k = shape[0];
    let kl = gaussian_kl_to_unit(tape, means, scales)?;
    Ok(tape.scale(kl, 1.0 / k as f64))
}

/// Weighted total with a per-term breakdown for logging.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[Var],
    gt: Var,
    means: Var,
    scales: Var,
    weights: &LossWeights,
    div_kind: DivLossKind,
) -> Result<(Var, LossBreakdown)> {
    let div = match div_kind {
        DivLossKind::Hinge => hinge_diversity(tape, preds, weights.eta)?,
        DivLossKind::Energy => energy_diversity(tape, preds, weights.sigma_div)?,
    };
    let acc = accuracy_loss(tape, preds, gt)?;
    let kl = kl_regularizer(tape, means, scales)?;
    let div_w = tape.scale(div, weights.lambda_hdiv);
    let acc_w = tape.scale(acc, weights.lambda_acc);
    let kl_w = tape.scale(kl, weights.lambda_kl);
    let partial = tape.add(div_w, acc_w)?;
    let total = tape.add(partial, kl_w)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        hdiv: tape.value(div).item(),
        acc: tape.value(acc).item(),
        kl: tape.value(kl).item(),
    };
    Ok((total, breakdown))
}

/// Slice a [N, R, T] prediction batch into N flattened [R*T] vars.
pub fn flatten_rows(tape: &mut Tape, preds: Var) -> Result<Vec<Var>> {
    let shape = tape.value(preds).shape().to_vec();
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    (0..n)
        .map(|i| {
            let row = tape.slice(preds, 0, i, 1)?;
            tape.reshape(row, &[d])
        })
        .collect()
}

/// Shared tail of every sampler training step: reparameterize the banks with
/// one eps per input, decode through the frozen CVAE, and average the
/// weighted objective over the batch.
#[allow(clippy::too_many_arguments)]
fn banks_to_loss(
    tape: &mut Tape,
    net_binding: &mut Binding,
    net_updates: &mut StatUpdates,
    cvae: &CvaeModel,
    means: Var,
    scales: Var,
    x_dct_var: Var,
    y: &Tensor,
    eps: &Tensor,
    k: usize,
    weights: &LossWeights,
    div_kind: DivLossKind,
) -> Result<(Var, LossBreakdown)> {
    let _ = (net_binding, net_updates);
    let b = eps.shape()[0];
    let n_z = eps.shape()[1];

    let eps_var = tape.constant(eps.clone());
    let eps_bk0 = tape.broadcast(eps_var, 1, k)?; // [B, K, n_z]
    let eps_bk = tape.reshape(eps_bk0, &[b * k, n_z])?;
    let scaled = tape.mul(scales, eps_bk)?;
    let z = tape.add(scaled, means)?; // [B*K, n_z]

    // frozen decode
    let preds = {
        let mut cvae_binding = Binding::new();
        let mut cvae_updates = StatUpdates::new();
        let mut ctx = FwdCtx {
            tape,
            store: &cvae.store,
            binding: &mut cvae_binding,
            updates: &mut cvae_updates,
            mode: Mode::Eval,
            freeze: true,
        };
        let x_tiled0 = ctx.tape.broadcast(x_dct_var, 1, k)?; // [B, K, J, CN]
        let d = &cvae.dims;
        let x_tiled = ctx
            .tape
            .reshape(x_tiled0, &[b * k, d.joints, d.coeff_width()])?;
        cvae.decode(&mut ctx, x_tiled, z)? // [B*K, J*C, T]
    };

    let y_var = tape.constant(y.clone());
    let mut totals = Vec::with_capacity(b);
    let mut breakdown = LossBreakdown::default();
    for bi in 0..b {
        let sample_preds = tape.slice(preds, 0, bi * k, k)?; // [K, R, T]
        let pred_vars = flatten_rows(tape, sample_preds)?;
        let gt_row = tape.slice(y_var, 0, bi, 1)?;
        let d: usize = tape.value(gt_row).len();
        let gt = tape.reshape(gt_row, &[d])?;
        let s_means = tape.slice(means, 0, bi * k, k)?;
        let s_scales = tape.slice(scales, 0, bi * k, k)?;
        let (t, parts) = total_loss(tape, &pred_vars, gt, s_means, s_scales, weights, div_kind)?;
        breakdown.total += parts.total;
        breakdown.hdiv += parts.hdiv;
        breakdown.acc += parts.acc;
        breakdown.kl += parts.kl;
        totals.push(t);
    }
    let sum = sum_vars(tape, &totals)?;
    let mean = tape.scale(sum, 1.0 / b as f64);
    breakdown.total /= b as f64;
    breakdown.hdiv /= b as f64;
    breakdown.acc /= b as f64;
    breakdown.kl /= b as f64;
    Ok((mean, breakdown))
}

/// One full auxiliary-sampler objective with explicit coefficient draws and
/// eps, exposed so gradient checks can hold the randomness fixed.
pub struct StackEval {
    pub tape: Tape,
    pub binding: Binding,
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
pub fn aux_stack_loss(
    net: &SamplerModel,
    cvae: &CvaeModel,
    x_dct: &Tensor, // [B, J, C*n_dct]
    y: &Tensor,     // [B, J*C, T]
    w: &Tensor,     // [B, K, M] row-stochastic draws
    eps: &Tensor,   // [B, n_z]
    weights: &LossWeights,
    div_kind: DivLossKind,
    mode: Mode,
) -> Result<StackEval> {
    let b = x_dct.shape()[0];
    let k = w.shape()[1];
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut updates = StatUpdates::new();
    let (means, scales, xv) = {
        let mut ctx = FwdCtx {
            tape: &mut tape,
            store: &net.store,
            binding: &mut binding,
            updates: &mut updates,
            mode,
            freeze: false,
        };
        let xv = ctx.tape.constant(x_dct.clone());
        let base = net.generate_base(&mut ctx, xv)?; // [B, M, n_b]
        let wv = ctx.tape.constant(w.clone());
        let points = ctx.tape.matmul(wv, base)?; // [B, K, n_b]
        let flat = ctx.tape.reshape(points, &[b * k, net.dims.n_b])?;
        let (means, scales) = net.banks_from_points(&mut ctx, flat)?;
        (means, scales, xv)
    };
    let mut net_updates = StatUpdates::new();
    let (loss, breakdown) = banks_to_loss(
        &mut tape,
        &mut binding,
        &mut net_updates,
        cvae,
        means,
        scales,
        xv,
        y,
        eps,
        k,
        weights,
        div_kind,
    )?;
    Ok(StackEval {
        tape,
        binding,
        loss,
        breakdown,
    })
}

#[derive(Debug, Clone)]
pub struct SamplerEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub hdiv: f64,
    pub acc: f64,
    pub kl: f64,
    pub lr: f64,
}

impl SamplerEpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,total,hdiv,acc,kl,lr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.epoch, self.total, self.hdiv, self.acc, self.kl, self.lr
        )
    }
}

/// Optimize a bank network against the frozen CVAE. The CVAE parameters are
/// bound without gradients and its batch norm runs in eval mode, so they are
/// bit-identical before and after.
pub fn train_sampler<N: BankNet>(
    net: &mut N,
    cvae: &CvaeModel,
    dataset: &Dataset,
    hyper: &HyperParams,
    seed: u64,
) -> Result<Vec<SamplerEpochLog>> {
    if dataset.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let prepared = prepare(cvae, &dataset.train)?;
    let weights = LossWeights::from_hyper(hyper);
    let mut train_rng = rng::stream(seed, "training");
    let trainable = net.store().trainable_ids();
    let mut adam = AdamState::new(net.store(), trainable, hyper.lr);
    let mut logs = Vec::with_capacity(hyper.epochs);
    let k = hyper.k_train;

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
        let subset = epoch_subset(prepared.len(), n, false, &mut train_rng)?;
        let mut epoch_parts = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in subset.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let parts = sampler_step(
                net,
                cvae,
                &prepared,
                chunk,
                k,
                &weights,
                hyper.div_loss,
                &mut train_rng,
                &mut adam,
            )?;
            epoch_parts.total += parts.total;
            epoch_parts.hdiv += parts.hdiv;
            epoch_parts.acc += parts.acc;
            epoch_parts.kl += parts.kl;
            steps += 1;
        }
        let d = steps.max(1) as f64;
        logs.push(SamplerEpochLog {
            epoch,
            total: epoch_parts.total / d,
            hdiv: epoch_parts.hdiv / d,
            acc: epoch_parts.acc / d,
            kl: epoch_parts.kl / d,
            lr,
        });
    }
    Ok(logs)
}

#[allow(clippy::too_many_arguments)]
fn sampler_step<N: BankNet>(
    net: &mut N,
    cvae: &CvaeModel,
    prepared: &[PreparedSample],
    chunk: &[usize],
    k: usize,
    weights: &LossWeights,
    div_kind: DivLossKind,
    rng: &mut Prng,
    adam: &mut AdamState,
) -> Result<LossBreakdown> {
    let b = chunk.len();
    let x_refs: Vec<&Tensor> = chunk.iter().map(|i| &prepared[*i].x_dct).collect();
    let y_refs: Vec<&Tensor> = chunk.iter().map(|i| &prepared[*i].y).collect();
    let x_batch = Tensor::stack(&x_refs)?;
    let y_batch = Tensor::stack(&y_refs)?;
    let n_z = cvae.dims.n_z;
    let eps = Tensor::new(&[b, n_z], rng::normal_vec(rng, b * n_z))?;

    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut updates = StatUpdates::new();
    let breakdown;
    {
        let (means, scales, xv) = {
            let mut ctx = FwdCtx {
                tape: &mut tape,
                store: net.store(),
                binding: &mut binding,
                updates: &mut updates,
                mode: Mode::Train,
                freeze: false,
            };
            let xv = ctx.tape.constant(x_batch);
            let (means, scales) = net.forward_banks(&mut ctx, xv, k, rng)?;
            (means, scales, xv)
        };
        let mut net_updates = StatUpdates::new();
        let (loss, parts) = banks_to_loss(
            &mut tape,
            &mut binding,
            &mut net_updates,
            cvae,
            means,
            scales,
            xv,
            &y_batch,
            &eps,
            k,
            weights,
            div_kind,
        )?;
        breakdown = parts;
        let grads = tape.backward(loss)?;
        let by_param = collect_grads(&tape, &binding, &grads, adam.param_ids());
        adam.step(net.store_mut(), &by_param)?;
    }
    updates.apply(net.store_mut())?;
    Ok(breakdown)
}

/// Train the auxiliary-space sampler from scratch.
pub fn train_aux_sampler(
    dataset: &Dataset,
    cvae: &CvaeModel,
    hyper: &HyperParams,
    seed: u64,
) -> Result<(SamplerModel, Vec<SamplerEpochLog>)> {
    let mut init_rng = rng::stream(seed, "init");
    let mut net = SamplerModel::new(hyper, &mut init_rng)?;
    let logs = train_sampler(&mut net, cvae, dataset, hyper, seed)?;
    Ok((net, logs))
}

/// Train the direct Gaussian-bank baseline from scratch. Its diversity term
/// is the exponential loss unless the config overrides it.
pub fn train_dlow(
    dataset: &Dataset,
    cvae: &CvaeModel,
    hyper: &HyperParams,
    seed: u64,
) -> Result<(DlowModel, Vec<SamplerEpochLog>)> {
    let mut h = hyper.clone();
    h.div_loss = DivLossKind::Energy;
    let mut init_rng = rng::stream(seed, "init");
    let mut net = DlowModel::new(&h, &mut init_rng);
    let logs = train_sampler(&mut net, cvae, dataset, &h, seed)?;
    Ok((net, logs))
}

/// Train a bank network for the given baseline selector.
pub fn train_method(
    method: Method,
    dataset: &Dataset,
    cvae: &CvaeModel,
    hyper: &HyperParams,
    seed: u64,
) -> Result<(Box<dyn BankNet>, Vec<SamplerEpochLog>)> {
    match method {
        Method::Auxiliary => {
            let (net, logs) = train_aux_sampler(dataset, cvae, hyper, seed)?;
            Ok((Box::new(net), logs))
        }
        Method::Dlow => {
            let (net, logs) = train_dlow(dataset, cvae, hyper, seed)?;
            Ok((Box::new(net), logs))
        }
        Method::Random => Err(Error::invalid(
            "train_sampler",
            "the random baseline has no trainable sampler",
        )),
    }
}


/// Outcome of a finite-difference check of the full sampler stack.
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

/// Build a micro sampler + CVAE (J=3, M=4, K=3, n_z=4) from `seed`, evaluate
/// total_loss with fixed coefficient draws and eps, and compare every
/// trainable sampler gradient against central finite differences.
pub fn stack_gradcheck(seed: u64, h_step: f64) -> Result<GradcheckReport> {
    use crate::cvae::CvaeDims;
    use crate::gradcheck as gc;
    use rand::Rng;

    let mut h = HyperParams::desk();
    h.joints = 3;
    h.coords = 2;
    h.history_frames = 4;
    h.future_frames = 4;
    h.n_dct = 3;
    h.n_z = 4;
    h.n_b = 8;
    h.n_h = 5;
    h.m_basis = 4;
    h.feat_dim = 6;
    h.k_train = 3;
    // every hinge margin stays active and far from the kink, so central
    // differences never straddle the non-smooth point
    h.eta = 50.0;
    h.sigma_div = 4.0;

    let mut init = rng::stream(seed, "init");
    let sampler = SamplerModel::new(&h, &mut init)?;
    let cvae = CvaeModel::new(CvaeDims::from_hyper(&h), &mut init);
    let weights = LossWeights::from_hyper(&h);

    // batch of 4: the two-point batch-norm case is numerically hostile to
    // finite differences (curvature scale ~ eps)
    let b = 4usize;
    let k = h.k_train;
    let mut data_rng = rng::stream(seed, "gradcheck-data");
    let cn = h.coords * h.n_dct;
    let rows = h.pose_rows();
    let x_dct = Tensor::new(
        &[b, h.joints, cn],
        (0..b * h.joints * cn)
            .map(|_| data_rng.gen::<f64>() - 0.5)
            .collect(),
    )?;
    let y = Tensor::new(
        &[b, rows, h.future_frames],
        (0..b * rows * h.future_frames)
            .map(|_| data_rng.gen::<f64>() - 0.5)
            .collect(),
    )?;
    let mut w_data = Vec::new();
    for _ in 0..b {
        let w = crate::sampler::gumbel_coefficients(k, h.m_basis, h.pi_value(), h.tau, &mut data_rng)?;
        w_data.extend_from_slice(w.0.data());
    }
    let w = Tensor::new(&[b, k, h.m_basis], w_data)?;
    let eps = Tensor::new(&[b, h.n_z], rng::normal_vec(&mut data_rng, b * h.n_z))?;

    let eval = aux_stack_loss(
        &sampler,
        &cvae,
        &x_dct,
        &y,
        &w,
        &eps,
        &weights,
        h.div_loss,
        Mode::Train,
    )?;
    let grads = eval.tape.backward(eval.loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    for pid in sampler.store.trainable_ids() {
        let var = eval
            .binding
            .bound()
            .iter()
            .find(|(id, _)| *id == pid)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid("stack_gradcheck", "unbound parameter"))?;
        let ad = grads.tensor(&eval.tape, var);
        let base = sampler.store.get(pid).clone();
        let fd = gc::central_diff(
            |vals| {
                let mut perturbed = sampler.store.clone();
                perturbed
                    .set(pid, Tensor::new(base.shape(), vals.to_vec()).unwrap())
                    .unwrap();
                let net = SamplerModel {
                    store: perturbed,
                    dims: sampler.dims,
                    n_beta_gcn: sampler.n_beta_gcn.clone(),
                    n_beta_mlp: sampler.n_beta_mlp.clone(),
                    n_gamma_mean: sampler.n_gamma_mean.clone(),
                    n_gamma_scale: sampler.n_gamma_scale.clone(),
                    coefficient_kind: sampler.coefficient_kind,
                    bypass_gamma: sampler.bypass_gamma,
                    pi: sampler.pi,
                    tau: sampler.tau,
                };
                let e = aux_stack_loss(
                    &net,
                    &cvae,
                    &x_dct,
                    &y,
                    &w,
                    &eps,
                    &weights,
                    h.div_loss,
                    Mode::Train,
                )
                .unwrap();
                e.tape.value(e.loss).item()
            },
            base.data(),
            h_step,
        );
        let err = gc::max_rel_err(ad.data(), &fd);
        checked += ad.len();
        if err > max_rel_err {
            max_rel_err = err;
            worst_param = sampler.store.name(pid).to_string();
        }
    }
    Ok(GradcheckReport {
        max_rel_err,
        worst_param,
        params_checked: checked,
    })
}

#[cfg(test)]
mod dead_subgraph {
    use super::*;
    use crate::cvae::CvaeDims;
    use crate::cvae::CvaeModel;
    use crate::nn::Mode;
    use crate::sampler::SamplerModel;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Every trainable sampler parameter must receive a nonzero gradient
    /// from the full objective on random input.
    #[test]
    fn every_parameter_receives_gradient() {
        let mut h = HyperParams::desk();
        h.joints = 3;
        h.coords = 2;
        h.history_frames = 4;
        h.future_frames = 4;
        h.n_dct = 3;
        h.n_z = 4;
        h.n_b = 8;
        h.n_h = 5;
        h.m_basis = 4;
        h.feat_dim = 6;
        h.k_train = 3;
        h.eta = 5.0;
        h.sigma_div = 4.0;
        let mut init = rng::stream(8, "init");
        let net = SamplerModel::new(&h, &mut init).unwrap();
        let cvae = CvaeModel::new(CvaeDims::from_hyper(&h), &mut init);
        let weights = LossWeights::from_hyper(&h);

        // batch of 8: two-point batch norm saturates and numerically
        // starves upstream gradients
        let (b, k) = (8usize, h.k_train);
        let mut data_rng = rng::stream(9, "data");
        let cn = h.coords * h.n_dct;
        let x_dct = Tensor::new(
            &[b, h.joints, cn],
            (0..b * h.joints * cn).map(|_| data_rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let y = Tensor::new(
            &[b, h.pose_rows(), h.future_frames],
            (0..b * h.pose_rows() * h.future_frames)
                .map(|_| data_rng.gen::<f64>() - 0.5)
                .collect(),
        )
        .unwrap();
        let mut w_data = Vec::new();
        for _ in 0..b {
            let w = crate::sampler::gumbel_coefficients(k, h.m_basis, h.pi_value(), h.tau, &mut data_rng)
                .unwrap();
            w_data.extend_from_slice(w.0.data());
        }
        let w = Tensor::new(&[b, k, h.m_basis], w_data).unwrap();
        let eps = Tensor::new(&[b, h.n_z], rng::normal_vec(&mut data_rng, b * h.n_z)).unwrap();

        let eval = aux_stack_loss(
            &net,
            &cvae,
            &x_dct,
            &y,
            &w,
            &eps,
            &weights,
            DivLossKind::Hinge,
            Mode::Train,
        )
        .unwrap();
        let grads = eval.tape.backward(eval.loss).unwrap();
        // a linear bias feeding straight into batch norm is cancelled
        // exactly by the mean subtraction: analytically zero gradient
        let exempt: Vec<_> = [&net.n_beta_mlp, &net.n_gamma_mean, &net.n_gamma_scale]
            .iter()
            .flat_map(|mlp| mlp.layers.iter())
            .filter(|l| l.bn.is_some())
            .map(|l| l.linear.bias)
            .collect();
        for pid in net.store.trainable_ids() {
            let var = eval
                .binding
                .bound()
                .iter()
                .find(|(id, _)| *id == pid)
                .map(|(_, v)| *v)
                .unwrap();
            let g = grads.tensor(&eval.tape, var);
            if exempt.contains(&pid) {
                assert!(
                    g.data().iter().all(|v| v.abs() < 1e-12),
                    "bias before batch norm should have zero gradient: {}",
                    net.store.name(pid)
                );
                continue;
            }
            assert!(
                g.data().iter().any(|v| v.abs() > 1e-14),
                "dead parameter: {}",
                net.store.name(pid)
            );
        }
    }
}
