//! Auxiliary-space sampling: a network maps the observed sequence to a base
//! matrix whose rows span a learned space; random row-stochastic coefficient
//! matrices (Gumbel-, Uniform-, or Gaussian-Softmax) mix the basis vectors
//! into points; a second network turns points into a bank of latent
//! Gaussians. One shared draw reparameterizes every bank row and the frozen
//! CVAE decoder maps the latents to futures. The number of sampled rows is a
//! free test-time parameter. A direct Gaussian-bank head (fixed K) serves as
//! the baseline.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint;
use crate::config::{CoefficientKind, HyperParams, PiMode};
use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::nn::{FwdCtx, GcnBlock, Linear, MlpBlock, Mode};
use crate::params::{Binding, ParamStore, StatUpdates};
use crate::rng::{self, Prng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SCALE_FLOOR: f64 = 1e-4;
const BETA_GCN_LAYERS: usize = 5;

// ---------------------------------------------------------------------------
// Coefficient matrices
// ---------------------------------------------------------------------------

/// Rows are basis vectors of the auxiliary space, in (-1, 1).
#[derive(Debug, Clone)]
pub struct AuxiliarySpace(pub Tensor);

/// Row-stochastic [K, M] mixing matrix.
#[derive(Debug, Clone)]
pub struct CoefficientMatrix(pub Tensor);

impl CoefficientMatrix {
    pub fn k(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.0.shape()[1]
    }

    /// Every entry non-negative, every row summing to one.
    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        for row in self.0.data().chunks(m) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid(
                    "CoefficientMatrix",
                    format!("row is not on the simplex (sum {s})"),
                ));
            }
        }
        Ok(())
    }
}

/// Diagonal latent Gaussians: means b_k and positive scales A_k, [K, n_z].
#[derive(Debug, Clone)]
pub struct GaussianBank {
    pub means: Tensor,
    pub scales: Tensor,
}

impl GaussianBank {
    pub fn k(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn n_z(&self) -> usize {
        self.means.shape()[1]
    }
}

/// The double-log transform turning a uniform draw into a Gumbel draw.
pub fn gumbel_transform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

fn softmax_rows(data: &mut [f64], m: usize) {
    for row in data.chunks_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gumbel-Softmax rows: per entry g = -log(-log u), shifted by pi, scaled by
/// 1/tau, then row-softmax.
pub fn gumbel_coefficients(
    k: usize,
    m: usize,
    pi: f64,
    tau: f64,
    rng: &mut Prng,
) -> Result<CoefficientMatrix> {
    if k < 1 || m < 1 {
        return Err(Error::invalid("gumbel_coefficients", "K and M must be >= 1"));
    }
    if tau <= 0.0 {
        return Err(Error::invalid(
            "gumbel_coefficients",
            format!("tau must be > 0, got {tau}"),
        ));
    }
    let mut data = Vec::with_capacity(k * m);
    for _ in 0..k * m {
        let u = rng::uniform_unit_open(rng);
        data.push((pi + gumbel_transform(u)) / tau);
    }
    softmax_rows(&mut data, m);
    Ok(CoefficientMatrix(Tensor::new(&[k, m], data)?))
}

/// Uniform- or Gaussian-Softmax rows: i.i.d. pre-softmax entries, then
/// row-softmax.
pub fn alt_coefficients(
    kind: CoefficientKind,
    k: usize,
    m: usize,
    rng: &mut Prng,
) -> Result<CoefficientMatrix> {
    if k < 1 || m < 1 {
        return Err(Error::invalid("alt_coefficients", "K and M must be >= 1"));
    }
    let mut data = Vec::with_capacity(k * m);
    match kind {
        CoefficientKind::Uniform => {
            use rand::Rng;
            for _ in 0..k * m {
                data.push(rng.gen::<f64>());
            }
        }
        CoefficientKind::Gaussian => {
            for _ in 0..k * m {
                data.push(rng::normal(rng));
            }
        }
        CoefficientKind::Gumbel => {
            return Err(Error::invalid(
                "alt_coefficients",
                "use gumbel_coefficients for the gumbel kind",
            ))
        }
    }
    softmax_rows(&mut data, m);
    Ok(CoefficientMatrix(Tensor::new(&[k, m], data)?))
}

pub fn sample_coefficients(
    kind: CoefficientKind,
    k: usize,
    m: usize,
    pi: f64,
    tau: f64,
    rng: &mut Prng,
) -> Result<CoefficientMatrix> {
    match kind {
        CoefficientKind::Gumbel => gumbel_coefficients(k, m, pi, tau, rng),
        _ => alt_coefficients(kind, k, m, rng),
    }
}

/// P = W B; each point is a convex combination of basis rows.
pub fn points_from_space(w: &CoefficientMatrix, b: &AuxiliarySpace) -> Result<Tensor> {
    let (k, m) = (w.k(), w.m());
    let (mb, nb) = (b.0.shape()[0], b.0.shape()[1]);
    if m != mb {
        return Err(Error::shape("points_from_space", w.0.shape(), b.0.shape()));
    }
    let mut out = vec![0.0; k * nb];
    for i in 0..k {
        for j in 0..m {
            let wij = w.0.data()[i * m + j];
            if wij == 0.0 {
                continue;
            }
            for d in 0..nb {
                out[i * nb + d] += wij * b.0.data()[j * nb + d];
            }
        }
    }
    Tensor::new(&[k, nb], out)
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerDims {
    pub joints: usize,
    pub coords: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    pub n_dct: usize,
    pub n_z: usize,
    pub n_b: usize,
    pub n_h: usize,
    pub m_basis: usize,
    pub feat_dim: usize,
    pub k_train: usize,
}

impl SamplerDims {
    pub fn from_hyper(h: &HyperParams) -> Self {
        SamplerDims {
            joints: h.joints,
            coords: h.coords,
            history_frames: h.history_frames,
            future_frames: h.future_frames,
            n_dct: h.n_dct,
            n_z: h.n_z,
            n_b: h.n_b,
            n_h: h.n_h,
            m_basis: h.m_basis,
            feat_dim: h.feat_dim,
            k_train: h.k_train,
        }
    }

    pub fn coeff_width(&self) -> usize {
        self.coords * self.n_dct
    }
}

/// Networks that produce a Gaussian bank from observed coefficients; the
/// auxiliary-space model and the direct-bank baseline both implement this so
/// training and sampling share one path.
pub trait BankNet {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn dims(&self) -> &SamplerDims;
    /// `Some(k)` when the architecture fixes the sample count.
    fn fixed_k(&self) -> Option<usize>;
    /// x_dct: [B, J, C*n_dct] -> (means, scales): [B*K, n_z] flattened
    /// banks, K rows per batch element.
    fn forward_banks(
        &self,
        ctx: &mut FwdCtx,
        x_dct: Var,
        k: usize,
        rng: &mut Prng,
    ) -> Result<(Var, Var)>;
    fn meta(&self) -> BTreeMap<String, String>;
}

#[derive(Debug)]
pub struct SamplerModel {
    pub dims: SamplerDims,
    pub store: ParamStore,
    pub n_beta_gcn: GcnBlock,
    pub n_beta_mlp: MlpBlock,
    pub n_gamma_mean: MlpBlock,
    pub n_gamma_scale: MlpBlock,
    pub coefficient_kind: CoefficientKind,
    pub bypass_gamma: bool,
    pub pi: f64,
    pub tau: f64,
}

impl SamplerModel {
    pub fn new(hyper: &HyperParams, rng: &mut Prng) -> Result<Self> {
        if hyper.pi_mode != PiMode::Constant {
            return Err(Error::Config(format!(
                "pi_mode {} is an experiment hook and is not implemented; use constant",
                hyper.pi_mode.as_str()
            )));
        }
        if hyper.bypass_gamma && hyper.n_b < 2 * hyper.n_z {
            return Err(Error::Config(format!(
                "bypass_gamma needs n_b >= 2*n_z ({} < {})",
                hyper.n_b,
                2 * hyper.n_z
            )));
        }
        let dims = SamplerDims::from_hyper(hyper);
        let mut store = ParamStore::new();
        let f = dims.feat_dim;
        let cn = dims.coeff_width();
        let mut widths = vec![cn];
        widths.extend(std::iter::repeat_n(f, BETA_GCN_LAYERS));
        let n_beta_gcn = GcnBlock::new(&mut store, "n_beta.gcn", dims.joints, &widths, rng);
        let n_beta_mlp = MlpBlock::new(
            &mut store,
            "n_beta.mlp",
            dims.joints * f,
            &[(dims.m_basis * dims.n_b, true, true)],
            rng,
        );
        let n_gamma_mean = MlpBlock::new(
            &mut store,
            "n_gamma.mean",
            dims.n_b,
            &[(dims.n_h, true, true), (dims.n_z, false, false)],
            rng,
        );
        let n_gamma_scale = MlpBlock::new(
            &mut store,
            "n_gamma.scale",
            dims.n_b,
            &[(dims.n_h, true, true), (dims.n_z, false, false)],
            rng,
        );
        Ok(SamplerModel {
            dims,
            store,
            n_beta_gcn,
            n_beta_mlp,
            n_gamma_mean,
            n_gamma_scale,
            coefficient_kind: hyper.coeff,
            bypass_gamma: hyper.bypass_gamma,
            pi: hyper.pi_value(),
            tau: hyper.tau,
        })
    }

    /// Base matrices for a batch: x_dct [B, J, C*n_dct] -> [B, M, n_b].
    pub fn generate_base(&self, ctx: &mut FwdCtx, x_dct: Var) -> Result<Var> {
        let d = &self.dims;
        let h = self.n_beta_gcn.forward(ctx, x_dct)?;
        let b = ctx.tape.value(h).shape()[0];
        let flat = ctx.tape.reshape(h, &[b, d.joints * d.feat_dim])?;
        let out = self.n_beta_mlp.forward(ctx, flat)?;
        ctx.tape.reshape(out, &[b, d.m_basis, d.n_b])
    }

    /// Map points [N, n_b] to bank rows (means, scales), scales positive.
    /// With bypass_gamma the gamma networks are skipped and each point row is
    /// split directly into a mean and a raw scale.
    pub fn banks_from_points(&self, ctx: &mut FwdCtx, points: Var) -> Result<(Var, Var)> {
        let d = &self.dims;
        if self.bypass_gamma {
            let means = ctx.tape.slice(points, 1, 0, d.n_z)?;
            let raw = ctx.tape.slice(points, 1, d.n_z, d.n_z)?;
            let sp = ctx.tape.softplus(raw);
            let scales = ctx.tape.add_scalar(sp, SCALE_FLOOR);
            Ok((means, scales))
        } else {
            let means = self.n_gamma_mean.forward(ctx, points)?;
            let raw = self.n_gamma_scale.forward(ctx, points)?;
            let sp = ctx.tape.softplus(raw);
            let scales = ctx.tape.add_scalar(sp, SCALE_FLOOR);
            Ok((means, scales))
        }
    }
}

impl BankNet for SamplerModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dims(&self) -> &SamplerDims {
        &self.dims
    }

    fn fixed_k(&self) -> Option<usize> {
        None
    }

    fn forward_banks(
        &self,
        ctx: &mut FwdCtx,
        x_dct: Var,
        k: usize,
        rng: &mut Prng,
    ) -> Result<(Var, Var)> {
        let d = &self.dims;
        let b = ctx.tape.value(x_dct).shape()[0];
        let base = self.generate_base(ctx, x_dct)?; // [B, M, n_b]
        let mut w_data = Vec::with_capacity(b * k * d.m_basis);
        for _ in 0..b {
            let w = sample_coefficients(self.coefficient_kind, k, d.m_basis, self.pi, self.tau, rng)?;
            w_data.extend_from_slice(w.0.data());
        }
        let w = ctx
            .tape
            .constant(Tensor::new(&[b, k, d.m_basis], w_data)?);
        let points = ctx.tape.matmul(w, base)?; // [B, K, n_b]
        let flat = ctx.tape.reshape(points, &[b * k, d.n_b])?;
        self.banks_from_points(ctx, flat)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let d = &self.dims;
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "sampler".into());
        m.insert("coefficient_kind".into(), self.coefficient_kind.as_str().into());
        m.insert("bypass_gamma".into(), self.bypass_gamma.to_string());
        m.insert("pi".into(), format!("{:.17e}", self.pi));
        m.insert("tau".into(), format!("{:.17e}", self.tau));
        m.insert("joints".into(), d.joints.to_string());
        m.insert("coords".into(), d.coords.to_string());
        m.insert("history_frames".into(), d.history_frames.to_string());
        m.insert("future_frames".into(), d.future_frames.to_string());
        m.insert("n_dct".into(), d.n_dct.to_string());
        m.insert("n_z".into(), d.n_z.to_string());
        m.insert("n_b".into(), d.n_b.to_string());
        m.insert("n_h".into(), d.n_h.to_string());
        m.insert("m_basis".into(), d.m_basis.to_string());
        m.insert("feat_dim".into(), d.feat_dim.to_string());
        m.insert("k_train".into(), d.k_train.to_string());
        m
    }
}

impl SamplerModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.store, &self.meta(), dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded = checkpoint::load(dir)?;
        if loaded.meta.get("kind").map(String::as_str) != Some("sampler") {
            return Err(Error::Checkpoint(format!(
                "{} is not a sampler checkpoint",
                dir.display()
            )));
        }
        let mut hyper = hyper_from_meta(&loaded.meta)?;
        hyper.coeff = CoefficientKind::parse(
            loaded
                .meta
                .get("coefficient_kind")
                .ok_or_else(|| Error::Checkpoint("missing coefficient_kind".into()))?,
        )?;
        hyper.bypass_gamma = loaded.meta.get("bypass_gamma").map(String::as_str) == Some("true");
        hyper.pi = Some(parse_meta_f64(&loaded.meta, "pi")?);
        hyper.tau = parse_meta_f64(&loaded.meta, "tau")?;
        let mut rng = rng::stream(0, "load");
        let mut model = SamplerModel::new(&hyper, &mut rng)?;
        checkpoint::apply(&loaded, &mut model.store)?;
        Ok(model)
    }
}

#[derive(Debug)]
pub struct DlowModel {
    pub dims: SamplerDims,
    pub store: ParamStore,
    pub gcn: GcnBlock,
    pub mean_head: Linear,
    pub scale_head: Linear,
    pub k_fixed: usize,
}

impl DlowModel {
    pub fn new(hyper: &HyperParams, rng: &mut Prng) -> Self {
        let dims = SamplerDims::from_hyper(hyper);
        let mut store = ParamStore::new();
        let f = dims.feat_dim;
        let cn = dims.coeff_width();
        let mut widths = vec![cn];
        widths.extend(std::iter::repeat_n(f, BETA_GCN_LAYERS));
        let gcn = GcnBlock::new(&mut store, "dlow.gcn", dims.joints, &widths, rng);
        // K parallel head pairs packed as one wide linear per bank half
        let mean_head = Linear::new(
            &mut store,
            "dlow.mean",
            dims.joints * f,
            hyper.k_train * dims.n_z,
            rng,
        );
        let scale_head = Linear::new(
            &mut store,
            "dlow.scale",
            dims.joints * f,
            hyper.k_train * dims.n_z,
            rng,
        );
        DlowModel {
            dims,
            store,
            gcn,
            mean_head,
            scale_head,
            k_fixed: hyper.k_train,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.store, &self.meta(), dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded = checkpoint::load(dir)?;
        if loaded.meta.get("kind").map(String::as_str) != Some("dlow") {
            return Err(Error::Checkpoint(format!(
                "{} is not a dlow checkpoint",
                dir.display()
            )));
        }
        let hyper = hyper_from_meta(&loaded.meta)?;
        let mut rng = rng::stream(0, "load");
        let mut model = DlowModel::new(&hyper, &mut rng);
        checkpoint::apply(&loaded, &mut model.store)?;
        Ok(model)
    }
}

impl BankNet for DlowModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dims(&self) -> &SamplerDims {
        &self.dims
    }

    fn fixed_k(&self) -> Option<usize> {
        Some(self.k_fixed)
    }

    fn forward_banks(
        &self,
        ctx: &mut FwdCtx,
        x_dct: Var,
        k: usize,
        _rng: &mut Prng,
    ) -> Result<(Var, Var)> {
        if k != self.k_fixed {
            return Err(Error::invalid(
                "dlow_bank",
                format!(
                    "this head generates exactly K={} banks per input, requested {k}",
                    self.k_fixed
                ),
            ));
        }
        let d = &self.dims;
        let h = self.gcn.forward(ctx, x_dct)?;
        let b = ctx.tape.value(h).shape()[0];
        let flat = ctx.tape.reshape(h, &[b, d.joints * d.feat_dim])?;
        let means = self.mean_head.forward(ctx, flat)?; // [B, K*n_z]
        let raw = self.scale_head.forward(ctx, flat)?;
        let sp = ctx.tape.softplus(raw);
        let scales = ctx.tape.add_scalar(sp, SCALE_FLOOR);
        let means = ctx.tape.reshape(means, &[b * k, d.n_z])?;
        let scales = ctx.tape.reshape(scales, &[b * k, d.n_z])?;
        Ok((means, scales))
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let d = &self.dims;
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "dlow".into());
        m.insert("joints".into(), d.joints.to_string());
        m.insert("coords".into(), d.coords.to_string());
        m.insert("history_frames".into(), d.history_frames.to_string());
        m.insert("future_frames".into(), d.future_frames.to_string());
        m.insert("n_dct".into(), d.n_dct.to_string());
        m.insert("n_z".into(), d.n_z.to_string());
        m.insert("n_b".into(), d.n_b.to_string());
        m.insert("n_h".into(), d.n_h.to_string());
        m.insert("m_basis".into(), d.m_basis.to_string());
        m.insert("feat_dim".into(), d.feat_dim.to_string());
        m.insert("k_train".into(), d.k_train.to_string());
        m
    }
}

fn parse_meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad meta value for {key}")))
}

/// Rebuild the dimension-bearing hyper fields stored in checkpoint metadata.
pub fn hyper_from_meta(meta: &BTreeMap<String, String>) -> Result<HyperParams> {
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad meta value for {k}")))
    };
    let mut h = HyperParams::desk();
    h.joints = get("joints")?;
    h.coords = get("coords")?;
    h.history_frames = get("history_frames")?;
    h.future_frames = get("future_frames")?;
    h.n_dct = get("n_dct")?;
    h.n_z = get("n_z")?;
    h.n_b = get("n_b")?;
    h.n_h = get("n_h")?;
    h.m_basis = get("m_basis")?;
    h.feat_dim = get("feat_dim")?;
    h.k_train = get("k_train")?;
    Ok(h)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Decode a bank with one shared draw: z_k = A_k (.) eps + b_k for every k,
/// then the frozen decoder maps each z_k against the same input.
#[allow(clippy::needless_range_loop)]
pub fn decode_bank(
    cvae: &CvaeModel,
    x_dct: &Tensor,
    bank: &GaussianBank,
    eps: &[f64],
) -> Result<Vec<Tensor>> {
    let k = bank.k();
    let n_z = bank.n_z();
    if eps.len() != n_z {
        return Err(Error::invalid(
            "decode_bank",
            format!("eps has {} entries, bank rows have {n_z}", eps.len()),
        ));
    }
    let mut z = Vec::with_capacity(k * n_z);
    for r in 0..k {
        for i in 0..n_z {
            z.push(bank.scales.data()[r * n_z + i] * eps[i] + bank.means.data()[r * n_z + i]);
        }
    }
    crate::cvae::decode_batch(cvae, x_dct, &Tensor::new(&[k, n_z], z)?)
}

/// Produce a bank of size `k` for one observed sequence (eval mode).
pub fn bank_for_input(
    net: &dyn BankNet,
    cvae: &CvaeModel,
    x: &Tensor,
    k: usize,
    rng: &mut Prng,
) -> Result<GaussianBank> {
    if k < 1 {
        return Err(Error::invalid("sample_diverse", "K must be >= 1"));
    }
    if let Some(fixed) = net.fixed_k() {
        if k != fixed {
            return Err(Error::invalid(
                "dlow_bank",
                format!("this head generates exactly K={fixed} banks per input, requested {k}"),
            ));
        }
    }
    let x_dct = cvae.x_to_coeffs(x)?;
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut updates = StatUpdates::new();
    let mut ctx = FwdCtx {
        tape: &mut tape,
        store: net.store(),
        binding: &mut binding,
        updates: &mut updates,
        mode: Mode::Eval,
        freeze: true,
    };
    let xv0 = ctx.tape.constant(x_dct.clone());
    let xv = ctx.tape.reshape(xv0, &[1, cvae.dims.joints, cvae.dims.coeff_width()])?;
    let (means, scales) = net.forward_banks(&mut ctx, xv, k, rng)?;
    Ok(GaussianBank {
        means: tape.value(means).clone(),
        scales: tape.value(scales).clone(),
    })
}

/// Full diverse sampling for one input: bank of size `k`, one shared
/// eps ~ N(0, I), decode every reparameterized latent.
pub fn sample_diverse(
    net: &dyn BankNet,
    cvae: &CvaeModel,
    x: &Tensor,
    k: usize,
    rng: &mut Prng,
) -> Result<Vec<Tensor>> {
    let bank = bank_for_input(net, cvae, x, k, rng)?;
    let eps = rng::normal_vec(rng, cvae.dims.n_z);
    let x_dct = cvae.x_to_coeffs(x)?;
    decode_bank(cvae, &x_dct, &bank, &eps)
}
