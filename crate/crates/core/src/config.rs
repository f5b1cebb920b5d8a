//! Run configuration: every tunable in one flat struct, loadable from a
//! `key = value` file whose keys mirror the field names one-to-one. Unknown
//! keys are rejected and every field is validated before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    Gumbel,
    Uniform,
    Gaussian,
}

impl CoefficientKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CoefficientKind::Gumbel => "gumbel",
            CoefficientKind::Uniform => "uniform",
            CoefficientKind::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(CoefficientKind::Gumbel),
            "uniform" => Ok(CoefficientKind::Uniform),
            "gaussian" => Ok(CoefficientKind::Gaussian),
            _ => Err(Error::Config(format!("unknown coefficient kind: {s}"))),
        }
    }
}

/// How the Gumbel shift parameter is obtained. Only `Constant` is
/// implemented; the learned variants are accepted by the parser as a hook
/// but rejected at model construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMode {
    Constant,
    SharedLearned,
    PerSampleLearned,
}

impl PiMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PiMode::Constant => "constant",
            PiMode::SharedLearned => "shared-learned",
            PiMode::PerSampleLearned => "per-sample-learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(PiMode::Constant),
            "shared-learned" => Ok(PiMode::SharedLearned),
            "per-sample-learned" => Ok(PiMode::PerSampleLearned),
            _ => Err(Error::Config(format!("unknown pi mode: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivLossKind {
    Hinge,
    Energy,
}

impl DivLossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DivLossKind::Hinge => "hinge",
            DivLossKind::Energy => "energy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(DivLossKind::Hinge),
            "energy" => Ok(DivLossKind::Energy),
            _ => Err(Error::Config(format!("unknown diversity loss: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Random,
    Dlow,
    Auxiliary,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Dlow => "dlow",
            Method::Auxiliary => "auxiliary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Method::Random),
            "dlow" => Ok(Method::Dlow),
            "auxiliary" => Ok(Method::Auxiliary),
            _ => Err(Error::Config(format!("unknown method: {s}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    // data dimensions
    pub joints: usize,
    pub coords: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    // dataset generation
    pub n_modes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub v_max: f64,
    pub mode0_prob: f64,
    // network dimensions
    pub feat_dim: usize,
    pub n_dct: usize,
    pub n_b: usize,
    pub n_h: usize,
    pub n_z: usize,
    pub m_basis: usize,
    pub k_train: usize,
    // training schedule
    pub epochs: usize,
    pub epoch_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub lr_flat_epochs: usize,
    pub cvae_kl_weight: f64,
    // sampler
    pub coeff: CoefficientKind,
    pub pi: Option<f64>,
    pub pi_mode: PiMode,
    pub tau: f64,
    pub bypass_gamma: bool,
    pub div_loss: DivLossKind,
    // loss weights
    pub lambda_hdiv: f64,
    pub lambda_acc: f64,
    pub lambda_kl: f64,
    pub eta: f64,
    pub sigma_div: f64,
}

impl HyperParams {
    /// Desk-scale defaults: a synthetic five-mode dataset small enough to
    /// train both stages in minutes on one CPU core.
    pub fn desk() -> Self {
        HyperParams {
            joints: 8,
            coords: 3,
            history_frames: 12,
            future_frames: 24,
            n_modes: 8,
            n_train: 2000,
            n_test: 200,
            noise_sd: 0.02,
            v_max: 0.5,
            mode0_prob: 0.65,
            feat_dim: 64,
            n_dct: 10,
            n_b: 32,
            n_h: 32,
            n_z: 16,
            m_basis: 16,
            k_train: 10,
            epochs: 80,
            epoch_samples: 512,
            batch_size: 16,
            lr: 1e-3,
            lr_final: 7e-4,
            lr_flat_epochs: 20,
            cvae_kl_weight: 0.02,
            coeff: CoefficientKind::Gumbel,
            pi: None,
            pi_mode: PiMode::Constant,
            tau: 1.0,
            bypass_gamma: false,
            div_loss: DivLossKind::Hinge,
            lambda_hdiv: 25.0,
            lambda_acc: 25.0,
            lambda_kl: 0.5,
            eta: 25.0,
            sigma_div: 20.0,
        }
    }

    /// Published Human3.6M configuration (17 joints, 25 observed frames,
    /// 100 predicted; lambda_hdiv 20, lambda_acc 40, lambda_kl 0.5, eta 25).
    pub fn h36m() -> Self {
        HyperParams {
            joints: 17,
            coords: 3,
            history_frames: 25,
            future_frames: 100,
            n_modes: 5,
            n_train: 5000,
            n_test: 500,
            noise_sd: 0.02,
            v_max: 0.5,
            mode0_prob: 0.6,
            feat_dim: 256,
            n_dct: 10,
            n_b: 128,
            n_h: 64,
            n_z: 64,
            m_basis: 40,
            k_train: 50,
            epochs: 500,
            epoch_samples: 5000,
            batch_size: 16,
            lr: 1e-3,
            lr_final: 7e-4,
            lr_flat_epochs: 100,
            cvae_kl_weight: 1.0,
            coeff: CoefficientKind::Gumbel,
            pi: None,
            pi_mode: PiMode::Constant,
            tau: 1.0,
            bypass_gamma: false,
            div_loss: DivLossKind::Hinge,
            lambda_hdiv: 20.0,
            lambda_acc: 40.0,
            lambda_kl: 0.5,
            eta: 25.0,
            sigma_div: 100.0,
        }
    }

    /// Published HumanEva-I configuration (15 joints, 15 observed frames,
    /// 60 predicted; lambda_hdiv 100, lambda_acc 25, lambda_kl 0.1, eta 20).
    pub fn humaneva() -> Self {
        HyperParams {
            joints: 15,
            history_frames: 15,
            future_frames: 60,
            epoch_samples: 2000,
            lambda_hdiv: 100.0,
            lambda_acc: 25.0,
            lambda_kl: 0.1,
            eta: 20.0,
            ..Self::h36m()
        }
    }

    /// Gumbel shift: explicit value or the 1/M default.
    pub fn pi_value(&self) -> f64 {
        self.pi.unwrap_or(1.0 / self.m_basis as f64)
    }

    /// Padded sequence length H + T.
    pub fn seq_len(&self) -> usize {
        self.history_frames + self.future_frames
    }

    /// Rows of a pose sequence matrix: J * C.
    pub fn pose_rows(&self) -> usize {
        self.joints * self.coords
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.joints < 2 {
            return fail(format!("joints must be >= 2, got {}", self.joints));
        }
        if !(2..=3).contains(&self.coords) {
            return fail(format!("coords must be 2 or 3, got {}", self.coords));
        }
        if self.history_frames == 0 || self.future_frames == 0 {
            return fail("history_frames and future_frames must be positive".into());
        }
        if self.n_modes < 2 {
            return fail(format!("n_modes must be >= 2, got {}", self.n_modes));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return fail("n_train and n_test must be positive".into());
        }
        if self.noise_sd < 0.0 {
            return fail(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if self.v_max <= 0.0 {
            return fail(format!("v_max must be > 0, got {}", self.v_max));
        }
        if !(self.mode0_prob > 0.0 && self.mode0_prob < 1.0) {
            return fail(format!(
                "mode0_prob must be in (0,1), got {}",
                self.mode0_prob
            ));
        }
        if self.n_dct == 0 || self.n_dct > self.seq_len() || self.n_dct > self.future_frames {
            return fail(format!(
                "n_dct must be in 1..=min(H+T, T) = 1..={}, got {}",
                self.seq_len().min(self.future_frames),
                self.n_dct
            ));
        }
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("n_b", self.n_b),
            ("n_h", self.n_h),
            ("n_z", self.n_z),
            ("m_basis", self.m_basis),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.k_train < 2 {
            return fail(format!("k_train must be >= 2, got {}", self.k_train));
        }
        if self.bypass_gamma && self.n_b < 2 * self.n_z {
            return fail(format!(
                "bypass_gamma needs n_b >= 2*n_z ({} < {})",
                self.n_b,
                2 * self.n_z
            ));
        }
        if self.epochs == 0 || self.epoch_samples == 0 {
            return fail("epochs and epoch_samples must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.lr <= 0.0 || self.lr_final <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.cvae_kl_weight < 0.0 {
            return fail("cvae_kl_weight must be >= 0".into());
        }
        if self.tau <= 0.0 {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if let Some(pi) = self.pi {
            if !pi.is_finite() {
                return fail(format!("pi must be finite, got {pi}"));
            }
        }
        if self.lambda_hdiv < 0.0 || self.lambda_acc < 0.0 || self.lambda_kl < 0.0 {
            return fail("lambda weights must be >= 0".into());
        }
        if self.eta <= 0.0 {
            return fail(format!("eta must be > 0, got {}", self.eta));
        }
        if self.sigma_div <= 0.0 {
            return fail(format!("sigma_div must be > 0, got {}", self.sigma_div));
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub method: Method,
    pub k_eval: usize,
    /// Pseudo-ground-truth mining threshold; `None` selects the automatic
    /// 0.1 x mean inter-sample final-pose distance.
    pub mm_threshold: Option<f64>,
    pub project_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: HyperParams::desk(),
            seed: 7,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            method: Method::Auxiliary,
            k_eval: 50,
            mm_threshold: None,
            project_n: 1000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.k_eval == 0 {
            return Err(Error::Config("k_eval must be >= 1".into()));
        }
        if self.project_n < 3 {
            return Err(Error::Config(format!(
                "project_n must be >= 3, got {}",
                self.project_n
            )));
        }
        if let Some(t) = self.mm_threshold {
            if t <= 0.0 {
                return Err(Error::Config(format!("mm_threshold must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got `{raw}`",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn as_usize(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got `{v}`")))
        }
        fn as_u64(key: &str, v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got `{v}`")))
        }
        fn as_f64(key: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected number, got `{v}`")))
        }
        fn as_bool(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{key}: expected true/false, got `{v}`"
                ))),
            }
        }
        let h = &mut self.hyper;
        match key {
            "seed" => self.seed = as_u64(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "method" => self.method = Method::parse(value)?,
            "k_eval" => self.k_eval = as_usize(key, value)?,
            "mm_threshold" => {
                self.mm_threshold = if value == "auto" {
                    None
                } else {
                    Some(as_f64(key, value)?)
                }
            }
            "project_n" => self.project_n = as_usize(key, value)?,
            "joints" => h.joints = as_usize(key, value)?,
            "coords" => h.coords = as_usize(key, value)?,
            "history_frames" => h.history_frames = as_usize(key, value)?,
            "future_frames" => h.future_frames = as_usize(key, value)?,
            "n_modes" => h.n_modes = as_usize(key, value)?,
            "n_train" => h.n_train = as_usize(key, value)?,
            "n_test" => h.n_test = as_usize(key, value)?,
            "noise_sd" => h.noise_sd = as_f64(key, value)?,
            "v_max" => h.v_max = as_f64(key, value)?,
            "mode0_prob" => h.mode0_prob = as_f64(key, value)?,
            "feat_dim" => h.feat_dim = as_usize(key, value)?,
            "n_dct" => h.n_dct = as_usize(key, value)?,
            "n_b" => h.n_b = as_usize(key, value)?,
            "n_h" => h.n_h = as_usize(key, value)?,
            "n_z" => h.n_z = as_usize(key, value)?,
            "m_basis" => h.m_basis = as_usize(key, value)?,
            "k_train" => h.k_train = as_usize(key, value)?,
            "epochs" => h.epochs = as_usize(key, value)?,
            "epoch_samples" => h.epoch_samples = as_usize(key, value)?,
            "batch_size" => h.batch_size = as_usize(key, value)?,
            "lr" => h.lr = as_f64(key, value)?,
            "lr_final" => h.lr_final = as_f64(key, value)?,
            "lr_flat_epochs" => h.lr_flat_epochs = as_usize(key, value)?,
            "cvae_kl_weight" => h.cvae_kl_weight = as_f64(key, value)?,
            "coeff" => h.coeff = CoefficientKind::parse(value)?,
            "pi" => {
                h.pi = if value == "auto" {
                    None
                } else {
                    Some(as_f64(key, value)?)
                }
            }
            "pi_mode" => h.pi_mode = PiMode::parse(value)?,
            "tau" => h.tau = as_f64(key, value)?,
            "bypass_gamma" => h.bypass_gamma = as_bool(key, value)?,
            "div_loss" => h.div_loss = DivLossKind::parse(value)?,
            "lambda_hdiv" => h.lambda_hdiv = as_f64(key, value)?,
            "lambda_acc" => h.lambda_acc = as_f64(key, value)?,
            "lambda_kl" => h.lambda_kl = as_f64(key, value)?,
            "eta" => h.eta = as_f64(key, value)?,
            "sigma_div" => h.sigma_div = as_f64(key, value)?,
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        HyperParams::h36m().validate().unwrap();
        HyperParams::humaneva().validate().unwrap();
    }

    #[test]
    fn parses_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 42\nn_modes = 3  # comment\n\n# full-line comment\neta = 5.5\n")
            .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.hyper.n_modes, 3);
        assert_eq!(cfg.hyper.eta, 5.5);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("no_such_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn invalid_n_modes_rejected() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("n_modes = 1\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pi_defaults_to_one_over_m() {
        let mut h = HyperParams::desk();
        h.m_basis = 40;
        assert!((h.pi_value() - 0.025).abs() < 1e-15);
        h.pi = Some(0.5);
        assert_eq!(h.pi_value(), 0.5);
    }

    #[test]
    fn bypass_gamma_needs_wide_base() {
        let mut h = HyperParams::desk();
        h.bypass_gamma = true;
        h.n_b = 2 * h.n_z;
        h.validate().unwrap();
        h.n_b = 2 * h.n_z - 1;
        assert!(h.validate().is_err());
    }
}

#[cfg(test)]
mod published_constants {
    use super::*;

    #[test]
    fn h36m_constants() {
        let h = HyperParams::h36m();
        assert_eq!((h.joints, h.history_frames, h.future_frames), (17, 25, 100));
        assert_eq!((h.m_basis, h.k_train, h.n_b, h.n_z, h.n_h), (40, 50, 128, 64, 64));
        assert_eq!(h.n_dct, 10);
        assert_eq!(h.feat_dim, 256);
        assert_eq!(
            (h.lambda_hdiv, h.lambda_acc, h.lambda_kl, h.eta),
            (20.0, 40.0, 0.5, 25.0)
        );
        assert_eq!((h.lr, h.lr_final), (1e-3, 7e-4));
        assert_eq!((h.lr_flat_epochs, h.epochs), (100, 500));
        assert_eq!((h.epoch_samples, h.batch_size), (5000, 16));
        assert_eq!(h.tau, 1.0);
        assert!((h.pi_value() - 1.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn humaneva_constants() {
        let h = HyperParams::humaneva();
        assert_eq!((h.joints, h.history_frames, h.future_frames), (15, 15, 60));
        assert_eq!(
            (h.lambda_hdiv, h.lambda_acc, h.lambda_kl, h.eta),
            (100.0, 25.0, 0.1, 20.0)
        );
        assert_eq!(h.epoch_samples, 2000);
    }

    #[test]
    fn run_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.k_eval, 50);
        assert_eq!(cfg.project_n, 1000);
        assert!(cfg.mm_threshold.is_none());
    }
}
