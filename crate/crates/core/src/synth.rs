//! Procedural multimodal skeleton-motion dataset. Every sample shares a
//! smooth sinusoidal base gait over the observed window; at the branch frame
//! the trajectory continues into one of `n_modes` futures (distinct heading
//! turns and limb raises) drawn from an imbalanced categorical, so one
//! history genuinely has many plausible continuations. Poses come from
//! forward kinematics over a fixed bone tree, which keeps bone lengths
//! exactly constant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub joints: usize,
    pub coords: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    pub n_modes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub v_max: f64,
    pub mode0_prob: f64,
}

impl GenConfig {
    pub fn from_hyper(h: &crate::config::HyperParams) -> Self {
        GenConfig {
            joints: h.joints,
            coords: h.coords,
            history_frames: h.history_frames,
            future_frames: h.future_frames,
            n_modes: h.n_modes,
            n_train: h.n_train,
            n_test: h.n_test,
            noise_sd: h.noise_sd,
            v_max: h.v_max,
            mode0_prob: h.mode0_prob,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.history_frames + self.future_frames
    }

    pub fn pose_rows(&self) -> usize {
        self.joints * self.coords
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords != 3 {
            return Err(Error::Dataset(format!(
                "generator is 3-D forward kinematics, coords must be 3, got {}",
                self.coords
            )));
        }
        if self.n_modes < 2 {
            return Err(Error::Dataset(format!(
                "n_modes must be >= 2, got {}",
                self.n_modes
            )));
        }
        if self.joints < 2 || self.history_frames == 0 || self.future_frames == 0 {
            return Err(Error::Dataset("degenerate generator dimensions".into()));
        }
        if !(self.mode0_prob > 0.0 && self.mode0_prob < 1.0) {
            return Err(Error::Dataset(format!(
                "mode0_prob must be in (0,1), got {}",
                self.mode0_prob
            )));
        }
        Ok(())
    }

    /// Mode probabilities: mode 0 takes `mode0_prob`, the rest split evenly.
    pub fn mode_probs(&self) -> Vec<f64> {
        let rest = (1.0 - self.mode0_prob) / (self.n_modes - 1) as f64;
        let mut p = vec![rest; self.n_modes];
        p[0] = self.mode0_prob;
        p
    }
}

/// Bone tree rooted at joint 0.
#[derive(Debug, Clone)]
pub struct SkeletonSpec {
    pub joints: usize,
    /// parents[j] for j >= 1; joint 0 is the root.
    pub parents: Vec<usize>,
    pub lengths: Vec<f64>,
}

impl SkeletonSpec {
    pub fn standard(joints: usize) -> Self {
        let mut parents = vec![0usize; joints];
        let mut lengths = vec![0.0; joints];
        for j in 1..joints {
            parents[j] = (j - 1) / 2;
            lengths[j] = 0.5 + 0.15 * ((j * 7) % 3) as f64;
        }
        SkeletonSpec {
            joints,
            parents,
            lengths,
        }
    }

    /// Leaf joints, used as the limbs that modes raise differently.
    pub fn limbs(&self) -> Vec<usize> {
        (1..self.joints)
            .filter(|j| !self.parents[1..].contains(j))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MotionSample {
    /// [J*C, H]
    pub observed: Tensor,
    /// [J*C, T]
    pub future: Tensor,
    pub mode_id: usize,
    pub sample_id: u64,
}

impl MotionSample {
    /// Full [J*C, H+T] sequence, observed then future.
    pub fn full_sequence(&self) -> Tensor {
        let rows = self.observed.shape()[0];
        let h = self.observed.shape()[1];
        let t = self.future.shape()[1];
        let mut data = Vec::with_capacity(rows * (h + t));
        for r in 0..rows {
            data.extend_from_slice(self.observed.row(r));
            data.extend_from_slice(self.future.row(r));
        }
        Tensor::new(&[rows, h + t], data).expect("full sequence shape")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub train: Vec<MotionSample>,
    pub test: Vec<MotionSample>,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Deterministic per-joint constant in [0, 1).
fn jhash(j: usize, salt: u64) -> f64 {
    let mut x = (j as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15) ^ salt.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Heading turn of mode m, spread over +-120 degrees.
fn mode_turn(m: usize, n_modes: usize) -> f64 {
    let span = 4.0 * std::f64::consts::PI / 3.0;
    (m as f64 / (n_modes - 1) as f64 - 0.5) * span
}

/// Limb-raise offset of mode m, decorrelated from the turn ordering.
fn mode_raise(m: usize, n_modes: usize) -> f64 {
    let _ = n_modes;
    let frac = (m as f64 * 0.618_033_988_749_895).fract();
    frac * 1.2 - 0.6
}

struct GaitParams {
    speed: f64,
    bob_amp: f64,
    bob_omega: f64,
    swing_omega: f64,
}

impl GaitParams {
    fn standard() -> Self {
        GaitParams {
            speed: 0.16,
            bob_amp: 0.05,
            bob_omega: 0.7,
            swing_omega: 0.55,
        }
    }
}

/// Synthesize one full sequence for a mode with per-joint angle jitter.
/// Returns [J*C, H+T] with C = 3.
fn synth_sequence(
    skel: &SkeletonSpec,
    cfg: &GenConfig,
    mode: usize,
    theta_jitter: &[f64],
    phi_jitter: &[f64],
) -> Tensor {
    let gait = GaitParams::standard();
    let j = skel.joints;
    let l = cfg.seq_len();
    let h = cfg.history_frames;
    let t_len = cfg.future_frames as f64;
    let limbs = skel.limbs();
    let turn = mode_turn(mode, cfg.n_modes);
    let raise = mode_raise(mode, cfg.n_modes);

    let mut data = vec![0.0; j * 3 * l];
    let mut root = [0.0f64, 0.0, 1.0];
    let mut positions = vec![[0.0f64; 3]; j];

    for t in 0..l {
        let ramp = if t >= h {
            smoothstep((t - h) as f64 / t_len)
        } else {
            0.0
        };
        let heading = turn * ramp;
        if t > 0 {
            root[0] += gait.speed * heading.cos();
            root[1] += gait.speed * heading.sin();
        }
        root[2] = 1.0 + gait.bob_amp * (gait.bob_omega * t as f64).sin();

        positions[0] = root;
        for jj in 1..j {
            let parent = skel.parents[jj];
            let len = skel.lengths[jj];
            let theta0 = 0.5 + 1.6 * jhash(jj, 1);
            let phi0 = 2.0 * std::f64::consts::PI * jhash(jj, 2);
            let a_theta = 0.10 + 0.10 * jhash(jj, 3);
            let a_phi = 0.10 + 0.10 * jhash(jj, 4);
            let ph1 = 2.0 * std::f64::consts::PI * jhash(jj, 5);
            let ph2 = 2.0 * std::f64::consts::PI * jhash(jj, 6);
            let is_limb = limbs.contains(&jj);
            let raise_term = if is_limb {
                let sign = if (jj + mode).is_multiple_of(2) { 1.0 } else { -1.0 };
                sign * raise * ramp
            } else {
                0.0
            };
            let theta = theta0
                + a_theta * (gait.swing_omega * t as f64 + ph1).sin()
                + theta_jitter[jj]
                + raise_term;
            let phi = phi0
                + a_phi * (gait.swing_omega * t as f64 + ph2).sin()
                + phi_jitter[jj]
                + heading;
            let dir = [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ];
            let p = positions[parent];
            positions[jj] = [
                p[0] + len * dir[0],
                p[1] + len * dir[1],
                p[2] + len * dir[2],
            ];
        }
        for jj in 0..j {
            for c in 0..3 {
                data[(jj * 3 + c) * l + t] = positions[jj][c];
            }
        }
    }
    Tensor::new(&[j * 3, l], data).expect("synth shape")
}

fn max_frame_step(seq: &Tensor, joints: usize) -> f64 {
    let l = seq.shape()[1];
    let mut worst: f64 = 0.0;
    for t in 1..l {
        for jj in 0..joints {
            let mut d2 = 0.0;
            for c in 0..3 {
                let row = seq.row(jj * 3 + c);
                let step = row[t] - row[t - 1];
                d2 += step * step;
            }
            worst = worst.max(d2.sqrt());
        }
    }
    worst
}

pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let skel = SkeletonSpec::standard(config.joints);
    let probs = config.mode_probs();
    let mut rng = rng::stream(seed, "data");

    let make_split = |count: usize, first_id: u64, rng: &mut Prng| -> Result<Vec<MotionSample>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mode = sample_categorical(rng, &probs);
            let theta_jitter: Vec<f64> = (0..config.joints)
                .map(|_| config.noise_sd * rng::normal(rng))
                .collect();
            let phi_jitter: Vec<f64> = (0..config.joints)
                .map(|_| config.noise_sd * rng::normal(rng))
                .collect();
            let seq = synth_sequence(&skel, config, mode, &theta_jitter, &phi_jitter);
            let step = max_frame_step(&seq, config.joints);
            if step >= config.v_max {
                return Err(Error::Dataset(format!(
                    "generated per-frame joint step {step:.4} exceeds v_max {}; \
                     lower noise_sd or raise v_max",
                    config.v_max
                )));
            }
            let rows = config.pose_rows();
            let h = config.history_frames;
            let t = config.future_frames;
            let mut obs = Vec::with_capacity(rows * h);
            let mut fut = Vec::with_capacity(rows * t);
            for r in 0..rows {
                let row = seq.row(r);
                obs.extend_from_slice(&row[..h]);
                fut.extend_from_slice(&row[h..]);
            }
            out.push(MotionSample {
                observed: Tensor::new(&[rows, h], obs)?,
                future: Tensor::new(&[rows, t], fut)?,
                mode_id: mode,
                sample_id: first_id + i as u64,
            });
        }
        Ok(out)
    };

    let train = make_split(config.n_train, 0, &mut rng)?;
    let test = make_split(config.n_test, config.n_train as u64, &mut rng)?;
    Ok(Dataset {
        config: config.clone(),
        seed,
        train,
        test,
    })
}

fn sample_categorical(rng: &mut Prng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Mode classifier
// ---------------------------------------------------------------------------

/// Classifies a predicted final-frame pose to the nearest canonical mode
/// endpoint (noise-free generation per mode).
#[derive(Debug, Clone)]
pub struct ModeClassifier {
    /// endpoint poses, each [J*C]
    pub endpoints: Vec<Vec<f64>>,
}

impl ModeClassifier {
    pub fn from_config(config: &GenConfig) -> Self {
        let skel = SkeletonSpec::standard(config.joints);
        let zeros = vec![0.0; config.joints];
        let endpoints = (0..config.n_modes)
            .map(|m| {
                let seq = synth_sequence(&skel, config, m, &zeros, &zeros);
                let l = seq.shape()[1];
                (0..seq.shape()[0]).map(|r| seq.row(r)[l - 1]).collect()
            })
            .collect();
        ModeClassifier { endpoints }
    }

    pub fn n_modes(&self) -> usize {
        self.endpoints.len()
    }

    /// Classify a prediction [J*C, T] by its final frame.
    #[allow(clippy::needless_range_loop)]
    pub fn classify(&self, pred: &Tensor) -> usize {
        let t = pred.shape()[1];
        let rows = pred.shape()[0];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (m, ep) in self.endpoints.iter().enumerate() {
            let mut d = 0.0;
            for r in 0..rows {
                let diff = pred.row(r)[t - 1] - ep[r];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }

    /// Number of distinct modes hit by a set of predictions.
    pub fn coverage(&self, preds: &[Tensor]) -> usize {
        let mut seen = vec![false; self.endpoints.len()];
        for p in preds {
            seen[self.classify(p)] = true;
        }
        seen.iter().filter(|s| **s).count()
    }
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json + train.f64 + test.f64. Blobs are record-major:
// one [J*C * (H+T)] little-endian f64 record per sample, row-major within
// the record (observed frames then future frames per row); integrity is a
// SHA-256 per blob in the manifest.
// ---------------------------------------------------------------------------

pub const DATA_MANIFEST: &str = "manifest.json";
pub const TRAIN_BLOB: &str = "train.f64";
pub const TEST_BLOB: &str = "test.f64";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub train_modes: Vec<usize>,
    pub test_modes: Vec<usize>,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub train_sha256: String,
    pub test_sha256: String,
}

fn split_blob(samples: &[MotionSample]) -> Vec<u8> {
    let mut blob = Vec::new();
    for s in samples {
        let full = s.full_sequence();
        for v in full.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let train_blob = split_blob(&dataset.train);
    let test_blob = split_blob(&dataset.test);
    let manifest = DatasetManifest {
        config: dataset.config.clone(),
        seed: dataset.seed,
        train_count: dataset.train.len(),
        test_count: dataset.test.len(),
        train_modes: dataset.train.iter().map(|s| s.mode_id).collect(),
        test_modes: dataset.test.iter().map(|s| s.mode_id).collect(),
        train_ids: dataset.train.iter().map(|s| s.sample_id).collect(),
        test_ids: dataset.test.iter().map(|s| s.sample_id).collect(),
        train_sha256: hex_digest(&train_blob),
        test_sha256: hex_digest(&test_blob),
    };
    let mpath = dir.join(DATA_MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let tpath = dir.join(TRAIN_BLOB);
    fs::write(&tpath, train_blob).map_err(|e| Error::io(tpath.display().to_string(), e))?;
    let epath = dir.join(TEST_BLOB);
    fs::write(&epath, test_blob).map_err(|e| Error::io(epath.display().to_string(), e))?;
    Ok(())
}

fn parse_split(
    blob: &[u8],
    config: &GenConfig,
    modes: &[usize],
    ids: &[u64],
) -> Result<Vec<MotionSample>> {
    let rows = config.pose_rows();
    let l = config.seq_len();
    let rec = rows * l;
    if blob.len() != modes.len() * rec * 8 {
        return Err(Error::Dataset(format!(
            "blob holds {} bytes, expected {} for {} records",
            blob.len(),
            modes.len() * rec * 8,
            modes.len()
        )));
    }
    let mut out = Vec::with_capacity(modes.len());
    for (i, (&mode, &id)) in modes.iter().zip(ids).enumerate() {
        let start = i * rec * 8;
        let vals: Vec<f64> = blob[start..start + rec * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let h = config.history_frames;
        let t = config.future_frames;
        let mut obs = Vec::with_capacity(rows * h);
        let mut fut = Vec::with_capacity(rows * t);
        for r in 0..rows {
            let row = &vals[r * l..(r + 1) * l];
            obs.extend_from_slice(&row[..h]);
            fut.extend_from_slice(&row[h..]);
        }
        out.push(MotionSample {
            observed: Tensor::new(&[rows, h], obs)?,
            future: Tensor::new(&[rows, t], fut)?,
            mode_id: mode,
            sample_id: id,
        });
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(DATA_MANIFEST);
    let text =
        fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.train_modes.len() != manifest.train_count
        || manifest.test_modes.len() != manifest.test_count
        || manifest.train_ids.len() != manifest.train_count
        || manifest.test_ids.len() != manifest.test_count
    {
        return Err(Error::Dataset("manifest counts disagree with records".into()));
    }

    let tpath = dir.join(TRAIN_BLOB);
    let train_blob = fs::read(&tpath).map_err(|e| Error::io(tpath.display().to_string(), e))?;
    if hex_digest(&train_blob) != manifest.train_sha256 {
        return Err(Error::Dataset(format!(
            "train blob hash mismatch in {}",
            tpath.display()
        )));
    }
    let epath = dir.join(TEST_BLOB);
    let test_blob = fs::read(&epath).map_err(|e| Error::io(epath.display().to_string(), e))?;
    if hex_digest(&test_blob) != manifest.test_sha256 {
        return Err(Error::Dataset(format!(
            "test blob hash mismatch in {}",
            epath.display()
        )));
    }

    let train = parse_split(&train_blob, &manifest.config, &manifest.train_modes, &manifest.train_ids)?;
    let test = parse_split(&test_blob, &manifest.config, &manifest.test_modes, &manifest.test_ids)?;
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        train,
        test,
    })
}

/// Uniform random index subset for one training epoch.
pub fn epoch_subset(len: usize, n: usize, replace: bool, rng: &mut Prng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("epoch_subset", "n must be positive"));
    }
    if replace {
        return Ok((0..n).map(|_| rng.gen_range(0..len)).collect());
    }
    if n > len {
        return Err(Error::invalid(
            "epoch_subset",
            format!("n {n} exceeds dataset size {len} without replacement"),
        ));
    }
    // partial Fisher-Yates
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}


#[cfg(test)]
mod replacement_tests {
    use super::*;

    #[test]
    fn with_replacement_allows_oversampling() {
        let mut rng = rng::stream(9, "training");
        let idx = epoch_subset(5, 12, true, &mut rng).unwrap();
        assert_eq!(idx.len(), 12);
        assert!(idx.iter().all(|i| *i < 5));
        // without replacement the same request is refused
        assert!(epoch_subset(5, 12, false, &mut rng).is_err());
        assert!(epoch_subset(5, 0, false, &mut rng).is_err());
    }
}
