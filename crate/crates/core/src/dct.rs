//! Temporal padding and orthonormal DCT-II encoding of pose sequences.
//! The time axis is the last axis; truncation keeps the first `n_dct`
//! low-frequency coefficients, making it an orthogonal projection.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DctConfig {
    pub seq_len: usize,
    pub n_dct: usize,
}

impl DctConfig {
    pub fn new(seq_len: usize, n_dct: usize) -> Result<Self> {
        if n_dct == 0 || n_dct > seq_len {
            return Err(Error::invalid(
                "DctConfig",
                format!("n_dct {n_dct} must be in 1..={seq_len}"),
            ));
        }
        Ok(DctConfig { seq_len, n_dct })
    }
}

/// Repeat the final frame `t` times after the observed frames.
pub fn pad_last_frame(x: &Tensor, t: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::invalid("pad_last_frame", "input must be [rows, frames]"));
    }
    let (rows, h) = (x.shape()[0], x.shape()[1]);
    if h == 0 {
        return Err(Error::invalid("pad_last_frame", "empty sequence"));
    }
    let mut out = Vec::with_capacity(rows * (h + t));
    for r in 0..rows {
        let row = x.row(r);
        out.extend_from_slice(row);
        let last = row[h - 1];
        out.extend(std::iter::repeat_n(last, t));
    }
    Tensor::new(&[rows, h + t], out)
}

/// Orthonormal DCT-II analysis matrix with `keep` retained rows transposed
/// for right multiplication: `coeffs = seq [D,L] x matrix [L,keep]`.
pub fn dct_matrix(l: usize, keep: usize) -> Tensor {
    let mut data = vec![0.0; l * keep];
    for n in 0..l {
        for k in 0..keep {
            data[n * keep + k] = basis(l, k, n);
        }
    }
    Tensor::new(&[l, keep], data).expect("dct matrix shape")
}

/// Synthesis matrix for right multiplication:
/// `seq = coeffs [D,keep] x matrix [keep,L]`.
pub fn idct_matrix(l: usize, keep: usize) -> Tensor {
    let mut data = vec![0.0; keep * l];
    for k in 0..keep {
        for n in 0..l {
            data[k * l + n] = basis(l, k, n);
        }
    }
    Tensor::new(&[keep, l], data).expect("idct matrix shape")
}

fn basis(l: usize, k: usize, n: usize) -> f64 {
    let scale = if k == 0 {
        (1.0 / l as f64).sqrt()
    } else {
        (2.0 / l as f64).sqrt()
    };
    scale * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * l as f64)).cos()
}

/// DCT along the last axis keeping the first `cfg.n_dct` coefficients.
#[allow(clippy::needless_range_loop)]
pub fn dct_truncate(seq: &Tensor, cfg: &DctConfig) -> Result<Tensor> {
    if seq.ndim() != 2 || seq.shape()[1] != cfg.seq_len {
        return Err(Error::shape("dct_truncate", seq.shape(), &[0, cfg.seq_len]));
    }
    let (d, l, keep) = (seq.shape()[0], cfg.seq_len, cfg.n_dct);
    let m = dct_matrix(l, keep);
    let mut out = vec![0.0; d * keep];
    for r in 0..d {
        let row = seq.row(r);
        for k in 0..keep {
            let mut s = 0.0;
            for n in 0..l {
                s += row[n] * m.data()[n * keep + k];
            }
            out[r * keep + k] = s;
        }
    }
    Tensor::new(&[d, keep], out)
}

/// Zero-pad coefficients to length `l` and apply the inverse transform.
#[allow(clippy::needless_range_loop)]
pub fn idct_expand(coeffs: &Tensor, l: usize) -> Result<Tensor> {
    if coeffs.ndim() != 2 {
        return Err(Error::invalid("idct_expand", "input must be [rows, n_dct]"));
    }
    let (d, keep) = (coeffs.shape()[0], coeffs.shape()[1]);
    if keep > l {
        return Err(Error::invalid(
            "idct_expand",
            format!("n_dct {keep} exceeds target length {l}"),
        ));
    }
    let m = idct_matrix(l, keep);
    let mut out = vec![0.0; d * l];
    for r in 0..d {
        let row = coeffs.row(r);
        for n in 0..l {
            let mut s = 0.0;
            for k in 0..keep {
                s += row[k] * m.data()[k * l + n];
            }
            out[r * l + n] = s;
        }
    }
    Tensor::new(&[d, l], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_seq(d: usize, l: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "dct-test");
        let data: Vec<f64> = (0..d * l).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(&[d, l], data).unwrap()
    }

    #[test]
    fn pad_zero_t_is_identity() {
        let x = random_seq(3, 5, 1);
        let padded = pad_last_frame(&x, 0).unwrap();
        assert_eq!(padded, x);
    }

    #[test]
    fn pad_replicates_last_frame() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let padded = pad_last_frame(&x, 3).unwrap();
        assert_eq!(padded.data(), &[1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn pad_h36m_shape() {
        // 25 observed frames extended by 100 future frames
        let x = random_seq(51, 25, 2);
        let padded = pad_last_frame(&x, 100).unwrap();
        assert_eq!(padded.shape(), &[51, 125]);
    }

    #[test]
    fn constant_row_is_dc_only() {
        let c = 2.5;
        let l = 8;
        let x = Tensor::full(&[1, l], c);
        let cfg = DctConfig::new(l, l).unwrap();
        let coeffs = dct_truncate(&x, &cfg).unwrap();
        assert!((coeffs.data()[0] - c * (l as f64).sqrt()).abs() < 1e-12);
        for k in 1..l {
            assert!(coeffs.data()[k].abs() < 1e-12, "coeff {k} leaked");
        }
    }

    #[test]
    fn full_rank_round_trip() {
        let l = 13;
        let x = random_seq(4, l, 3);
        let cfg = DctConfig::new(l, l).unwrap();
        let coeffs = dct_truncate(&x, &cfg).unwrap();
        let back = idct_expand(&coeffs, l).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-9);
    }

    #[test]
    fn zero_coeffs_give_zero_sequence() {
        let coeffs = Tensor::zeros(&[2, 4]);
        let seq = idct_expand(&coeffs, 9).unwrap();
        assert!(seq.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dc_coefficient_reconstructs_constant() {
        let c = -1.75;
        let l = 11;
        let coeffs = Tensor::new(&[1, 1], vec![c * (l as f64).sqrt()]).unwrap();
        let seq = idct_expand(&coeffs, l).unwrap();
        for v in seq.data() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        // Naive DCT-II straight from the definition, no shared code path.
        let l = 16;
        let x = random_seq(1, l, 4);
        let cfg = DctConfig::new(l, l).unwrap();
        let coeffs = dct_truncate(&x, &cfg).unwrap();
        for k in 0..l {
            let scale = if k == 0 {
                (1.0 / l as f64).sqrt()
            } else {
                (2.0 / l as f64).sqrt()
            };
            let mut s = 0.0;
            for n in 0..l {
                s += x.data()[n]
                    * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2.0 * l as f64))
                        .cos();
            }
            assert!((coeffs.data()[k] - scale * s).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn truncation_never_gains_energy() {
        let l = 20;
        let x = random_seq(5, l, 5);
        for keep in [1, 3, 7, 20] {
            let cfg = DctConfig::new(l, keep).unwrap();
            let coeffs = dct_truncate(&x, &cfg).unwrap();
            let back = idct_expand(&coeffs, l).unwrap();
            let e_in: f64 = x.data().iter().map(|v| v * v).sum();
            let e_out: f64 = back.data().iter().map(|v| v * v).sum();
            assert!(e_out <= e_in + 1e-9, "keep={keep}: {e_out} > {e_in}");
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let x = random_seq(2, 6, 6);
        let cfg = DctConfig::new(8, 4).unwrap();
        assert!(dct_truncate(&x, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn linearity(seed_a in 0u64..500, seed_b in 500u64..1000, a in -3.0f64..3.0) {
            let l = 12;
            let s1 = random_seq(2, l, seed_a);
            let s2 = random_seq(2, l, seed_b);
            let cfg = DctConfig::new(l, 7).unwrap();
            let mixed_data: Vec<f64> = s1.data().iter().zip(s2.data()).map(|(x, y)| a * x + y).collect();
            let mixed = Tensor::new(&[2, l], mixed_data).unwrap();
            let lhs = dct_truncate(&mixed, &cfg).unwrap();
            let d1 = dct_truncate(&s1, &cfg).unwrap();
            let d2 = dct_truncate(&s2, &cfg).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * d1.data()[i] + d2.data()[i])).abs() < 1e-10);
            }
        }
    }
}
