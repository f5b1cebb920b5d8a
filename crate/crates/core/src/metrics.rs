//! Diversity/accuracy metric suite: APD, ADE, FDE, their multimodal and
//! median variants, pseudo-ground-truth mining, the 2-D PCA projection of
//! prediction sets, and the full per-test-set evaluation driver.
//!
//! Conventions: a prediction is a [J*C, T] tensor. APD uses the L2 distance
//! between whole flattened sequences. ADE-style metrics use the mean over
//! frames of the per-frame joint-vector L2 distance; FDE-style metrics use
//! the final frame only.

use crate::error::{Error, Result};
use crate::synth::{Dataset, ModeClassifier, MotionSample};
use crate::tensor::Tensor;

/// Flattened whole-sequence L2 distance.
pub fn seq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.l2_dist(b)
}

/// L2 distance between the frame-`t` columns of two [R, T] sequences.
fn frame_dist(a: &Tensor, b: &Tensor, t: usize) -> f64 {
    let rows = a.shape()[0];
    let ta = a.shape()[1];
    let tb = b.shape()[1];
    let mut d2 = 0.0;
    for r in 0..rows {
        let diff = a.data()[r * ta + t] - b.data()[r * tb + t];
        d2 += diff * diff;
    }
    d2.sqrt()
}

/// Mean over frames of the per-frame pose distance.
pub fn frame_mean_dist(a: &Tensor, b: &Tensor) -> f64 {
    let t = a.shape()[1];
    (0..t).map(|i| frame_dist(a, b, i)).sum::<f64>() / t as f64
}

/// Distance between final frames.
pub fn final_frame_dist(a: &Tensor, b: &Tensor) -> f64 {
    frame_dist(a, b, a.shape()[1] - 1)
}

fn check_same_shape(op: &'static str, preds: &[Tensor], gt: Option<&Tensor>) -> Result<()> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid(op, "no predictions"))?;
    for p in preds {
        if p.shape() != first.shape() {
            return Err(Error::shape(op, first.shape(), p.shape()));
        }
    }
    if let Some(g) = gt {
        if g.shape() != first.shape() {
            return Err(Error::shape(op, first.shape(), g.shape()));
        }
    }
    Ok(())
}

/// Average Pairwise Distance over the K(K-1) ordered pairs.
pub fn apd(preds: &[Tensor]) -> Result<f64> {
    check_same_shape("apd", preds, None)?;
    let k = preds.len();
    if k < 2 {
        return Err(Error::invalid("apd", "needs K >= 2 predictions"));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += seq_dist(&preds[i], &preds[j]);
        }
    }
    Ok(2.0 * total / (k * (k - 1)) as f64)
}

/// Average Displacement Error: best prediction by per-frame-mean distance.
pub fn ade(preds: &[Tensor], gt: &Tensor) -> Result<f64> {
    check_same_shape("ade", preds, Some(gt))?;
    Ok(preds
        .iter()
        .map(|p| frame_mean_dist(p, gt))
        .fold(f64::INFINITY, f64::min))
}

/// Final Displacement Error: best final-frame distance.
pub fn fde(preds: &[Tensor], gt: &Tensor) -> Result<f64> {
    check_same_shape("fde", preds, Some(gt))?;
    Ok(preds
        .iter()
        .map(|p| final_frame_dist(p, gt))
        .fold(f64::INFINITY, f64::min))
}

/// Multimodal ADE: mean over pseudo futures of the best prediction.
pub fn mmade(preds: &[Tensor], pseudo: &[&Tensor]) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::invalid("mmade", "empty pseudo ground-truth set"));
    }
    let mut total = 0.0;
    for y in pseudo {
        total += ade(preds, y)?;
    }
    Ok(total / pseudo.len() as f64)
}

/// Multimodal FDE.
pub fn mmfde(preds: &[Tensor], pseudo: &[&Tensor]) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::invalid("mmfde", "empty pseudo ground-truth set"));
    }
    let mut total = 0.0;
    for y in pseudo {
        total += fde(preds, y)?;
    }
    Ok(total / pseudo.len() as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// ADE/FDE with the median over predictions instead of the minimum.
pub fn median_metrics(preds: &[Tensor], gt: &Tensor) -> Result<(f64, f64)> {
    check_same_shape("median_metrics", preds, Some(gt))?;
    let mut ade_d: Vec<f64> = preds.iter().map(|p| frame_mean_dist(p, gt)).collect();
    let mut fde_d: Vec<f64> = preds.iter().map(|p| final_frame_dist(p, gt)).collect();
    Ok((median(&mut ade_d), median(&mut fde_d)))
}

// ---------------------------------------------------------------------------
// Pseudo ground truths
// ---------------------------------------------------------------------------

/// For each test sample, the indices (into the combined train+test futures
/// pool) of samples whose final observed pose is within the threshold.
#[derive(Debug, Clone)]
pub struct MultimodalGtSet {
    pub threshold: f64,
    pub per_sample: Vec<Vec<usize>>,
}

fn final_observed_pose(s: &MotionSample) -> Vec<f64> {
    let h = s.observed.shape()[1];
    (0..s.observed.shape()[0])
        .map(|r| s.observed.row(r)[h - 1])
        .collect()
}

fn pose_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean inter-sample final observed-pose distance over the combined splits,
/// the basis of the automatic mining threshold (0.1 x mean).
pub fn mean_final_pose_distance(dataset: &Dataset) -> f64 {
    let poses: Vec<Vec<f64>> = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(final_observed_pose)
        .collect();
    let n = poses.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += pose_l2(&poses[i], &poses[j]);
            count += 1;
        }
    }
    total / count as f64
}

pub fn auto_threshold(dataset: &Dataset) -> f64 {
    0.1 * mean_final_pose_distance(dataset)
}

/// Futures of all train+test samples whose final observed pose is within
/// `threshold` of the test sample's; the sample's own future is always
/// included.
pub fn mine_multimodal_gt(dataset: &Dataset, threshold: f64) -> MultimodalGtSet {
    let pool_poses: Vec<Vec<f64>> = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(final_observed_pose)
        .collect();
    let n_train = dataset.train.len();
    let per_sample = dataset
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let own = n_train + i;
            let query = final_observed_pose(s);
            let mut set: Vec<usize> = pool_poses
                .iter()
                .enumerate()
                .filter(|(j, p)| *j != own && pose_l2(&query, p) <= threshold)
                .map(|(j, _)| j)
                .collect();
            set.push(own);
            set.sort_unstable();
            set
        })
        .collect();
    MultimodalGtSet {
        threshold,
        per_sample,
    }
}

/// The combined futures pool the mined indices point into.
pub fn futures_pool(dataset: &Dataset) -> Vec<&Tensor> {
    dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(|s| &s.future)
        .collect()
}

// ---------------------------------------------------------------------------
// 2-D PCA projection
// ---------------------------------------------------------------------------

/// Project flattened predictions onto their top-2 principal components.
/// Degenerate (all-identical) input maps everything to the origin.
pub fn pca_project(preds: &[Tensor]) -> Result<Vec<(f64, f64)>> {
    let n = preds.len();
    if n < 3 {
        return Err(Error::invalid("pca_project", "needs at least 3 sequences"));
    }
    check_same_shape("pca_project", preds, None)?;
    let d = preds[0].len();
    // center
    let mut mean = vec![0.0; d];
    for p in preds {
        for (m, v) in mean.iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let x: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| p.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let v1 = top_component(&x, d, None);
    let v2 = top_component(&x, d, v1.as_deref());

    let project = |row: &[f64], v: &Option<Vec<f64>>| -> f64 {
        match v {
            Some(v) => row.iter().zip(v).map(|(a, b)| a * b).sum(),
            None => 0.0,
        }
    };
    Ok(x
        .iter()
        .map(|row| (project(row, &v1), project(row, &v2)))
        .collect())
}

/// Power iteration on the covariance operator v -> X^T (X v) / N, optionally
/// deflated against an earlier component. Fixed iteration count and a fixed
/// starting vector keep the result deterministic.
fn top_component(x: &[Vec<f64>], d: usize, deflate: Option<&[f64]>) -> Option<Vec<f64>> {
    let n = x.len();
    let mut v: Vec<f64> = (0..d)
        .map(|i| if (i * 2654435761) % 3 == 0 { 1.0 } else { -0.7 } / (d as f64).sqrt())
        .collect();
    orthogonalize(&mut v, deflate);
    normalize(&mut v)?;
    for _ in 0..300 {
        // w = X^T (X v) / n
        let mut xv = vec![0.0; n];
        for (i, row) in x.iter().enumerate() {
            xv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; d];
        for (i, row) in x.iter().enumerate() {
            let c = xv[i] / n as f64;
            if c == 0.0 {
                continue;
            }
            for (wj, rj) in w.iter_mut().zip(row) {
                *wj += c * rj;
            }
        }
        orthogonalize(&mut w, deflate);
        normalize(&mut w)?;
        v = w;
    }
    // deterministic sign: largest-magnitude entry positive
    let lead = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[lead] < 0.0 {
        for vi in v.iter_mut() {
            *vi = -*vi;
        }
    }
    Some(v)
}

fn orthogonalize(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= dot * ui;
        }
    }
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    for vi in v.iter_mut() {
        *vi /= norm;
    }
    Some(())
}

// ---------------------------------------------------------------------------
// Evaluation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub sample_id: u64,
    pub apd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
    pub ade_m: f64,
    pub fde_m: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub apd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
    pub ade_m: f64,
    pub fde_m: f64,
    pub coverage: Option<f64>,
    pub k_used: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "apd,ade,fde,mmade,mmfde,ade_m,fde_m,mode_coverage,k"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            self.apd,
            self.ade,
            self.fde,
            self.mmade,
            self.mmfde,
            self.ade_m,
            self.fde_m,
            self.coverage
                .map_or_else(|| "-".to_string(), |c| format!("{c:.9}")),
            self.k_used
        )
    }

    pub fn per_sample_csv_header() -> &'static str {
        "sample_id,apd,ade,fde,mmade,mmfde,ade_m,fde_m,mode_coverage"
    }

    pub fn per_sample_csv_rows(&self) -> Vec<String> {
        self.per_sample
            .iter()
            .map(|s| {
                format!(
                    "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                    s.sample_id,
                    s.apd,
                    s.ade,
                    s.fde,
                    s.mmade,
                    s.mmfde,
                    s.ade_m,
                    s.fde_m,
                    s.coverage
                        .map_or_else(|| "-".to_string(), |c| format!("{c:.9}")),
                )
            })
            .collect()
    }
}

/// Run the whole metric suite over the test split. `sample_fn` produces the
/// K predictions for one test sample and must seed itself from the sample so
/// the report is deterministic.
pub fn evaluate_suite<F>(
    mut sample_fn: F,
    dataset: &Dataset,
    k: usize,
    mm: &MultimodalGtSet,
    classifier: Option<&ModeClassifier>,
) -> Result<MetricsReport>
where
    F: FnMut(&MotionSample, usize) -> Result<Vec<Tensor>>,
{
    if dataset.test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    if k < 2 {
        return Err(Error::invalid("evaluate_suite", "K must be >= 2"));
    }
    let pool = futures_pool(dataset);
    let mut per_sample = Vec::with_capacity(dataset.test.len());
    for (i, sample) in dataset.test.iter().enumerate() {
        let preds = sample_fn(sample, k)?;
        if preds.len() != k {
            return Err(Error::invalid(
                "evaluate_suite",
                format!("sampler returned {} predictions, expected {k}", preds.len()),
            ));
        }
        let pseudo: Vec<&Tensor> = mm.per_sample[i].iter().map(|j| pool[*j]).collect();
        let (ade_m, fde_m) = median_metrics(&preds, &sample.future)?;
        let coverage = classifier.map(|c| c.coverage(&preds) as f64 / c.n_modes() as f64);
        per_sample.push(SampleMetrics {
            sample_id: sample.sample_id,
            apd: apd(&preds)?,
            ade: ade(&preds, &sample.future)?,
            fde: fde(&preds, &sample.future)?,
            mmade: mmade(&preds, &pseudo)?,
            mmfde: mmfde(&preds, &pseudo)?,
            ade_m,
            fde_m,
            coverage,
        });
    }
    let n = per_sample.len() as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let coverage = classifier.map(|_| mean(&|s| s.coverage.unwrap_or(0.0)));
    Ok(MetricsReport {
        apd: mean(&|s| s.apd),
        ade: mean(&|s| s.ade),
        fde: mean(&|s| s.fde),
        mmade: mean(&|s| s.mmade),
        mmfde: mean(&|s| s.mmfde),
        ade_m: mean(&|s| s.ade_m),
        fde_m: mean(&|s| s.fde_m),
        coverage,
        k_used: k,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq(rows: usize, t: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "metrics");
        Tensor::new(
            &[rows, t],
            (0..rows * t).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn apd_cases() {
        let a = seq(3, 4, 1);
        assert_eq!(apd(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);

        let mut b = a.clone();
        // distance exactly 2
        let n = b.len();
        b.data_mut()[0] += 2.0;
        let _ = n;
        assert!((apd(&[a.clone(), b]).unwrap() - 2.0).abs() < 1e-12);
        assert!(apd(&[a]).is_err());
    }

    #[test]
    fn apd_matches_brute_force() {
        let preds: Vec<Tensor> = (0..4).map(|i| seq(3, 4, 10 + i)).collect();
        let got = apd(&preds).unwrap();
        // independent double loop over ordered pairs
        let k = preds.len();
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let d: f64 = preds[i]
                        .data()
                        .iter()
                        .zip(preds[j].data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    total += d;
                }
            }
        }
        let brute = total / (k * (k - 1)) as f64;
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn apd_scales_linearly() {
        let preds: Vec<Tensor> = (0..3).map(|i| seq(2, 5, 20 + i)).collect();
        let base = apd(&preds).unwrap();
        let scaled: Vec<Tensor> = preds
            .iter()
            .map(|p| {
                Tensor::new(p.shape(), p.data().iter().map(|v| 3.0 * v).collect()).unwrap()
            })
            .collect();
        assert!((apd(&scaled).unwrap() - 3.0 * base).abs() < 1e-9);
    }

    #[test]
    fn ade_fde_cases() {
        let gt = seq(3, 4, 30);
        let exact = gt.clone();
        let other = seq(3, 4, 31);
        assert_eq!(ade(&[other.clone(), exact.clone()], &gt).unwrap(), 0.0);
        assert_eq!(fde(&[other.clone(), exact], &gt).unwrap(), 0.0);

        // constant offset: one joint coordinate shifted by c at every frame
        let c = 1.25;
        let mut off = gt.clone();
        for t in 0..4 {
            off.data_mut()[t] += c;
        }
        assert!((ade(&[off.clone()], &gt).unwrap() - c).abs() < 1e-12);
        assert!((fde(&[off], &gt).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn ade_matches_brute_force_and_is_monotone() {
        let gt = seq(3, 4, 40);
        let preds: Vec<Tensor> = (0..3).map(|i| seq(3, 4, 41 + i)).collect();
        let got = ade(&preds, &gt).unwrap();
        let mut brute = f64::INFINITY;
        for p in &preds {
            let mut acc = 0.0;
            for t in 0..4 {
                let mut d2 = 0.0;
                for r in 0..3 {
                    let diff = p.data()[r * 4 + t] - gt.data()[r * 4 + t];
                    d2 += diff * diff;
                }
                acc += d2.sqrt();
            }
            brute = brute.min(acc / 4.0);
        }
        assert!((got - brute).abs() < 1e-12);

        // adding predictions can only improve the min
        let more: Vec<Tensor> = preds.iter().cloned().chain([seq(3, 4, 50)]).collect();
        assert!(ade(&more, &gt).unwrap() <= got + 1e-15);
    }

    #[test]
    fn mmade_reduces_to_ade_for_own_future() {
        let gt = seq(3, 4, 60);
        let preds: Vec<Tensor> = (0..3).map(|i| seq(3, 4, 61 + i)).collect();
        let only_own = [&gt];
        assert!(
            (mmade(&preds, &only_own).unwrap() - ade(&preds, &gt).unwrap()).abs() < 1e-15
        );
        assert!(
            (mmfde(&preds, &only_own).unwrap() - fde(&preds, &gt).unwrap()).abs() < 1e-15
        );
    }

    #[test]
    fn mmade_zero_when_predictions_cover_all_pseudo() {
        let y1 = seq(3, 4, 70);
        let y2 = seq(3, 4, 71);
        let preds = vec![y1.clone(), y2.clone()];
        let pseudo = [&y1, &y2];
        assert_eq!(mmade(&preds, &pseudo).unwrap(), 0.0);
    }

    #[test]
    fn mmade_matches_brute_force() {
        let preds: Vec<Tensor> = (0..2).map(|i| seq(2, 3, 80 + i)).collect();
        let pool: Vec<Tensor> = (0..3).map(|i| seq(2, 3, 90 + i)).collect();
        let pseudo: Vec<&Tensor> = pool.iter().collect();
        let got = mmade(&preds, &pseudo).unwrap();
        let mut total = 0.0;
        for y in &pool {
            let mut best = f64::INFINITY;
            for p in &preds {
                let mut acc = 0.0;
                for t in 0..3 {
                    let mut d2 = 0.0;
                    for r in 0..2 {
                        let diff = p.data()[r * 3 + t] - y.data()[r * 3 + t];
                        d2 += diff * diff;
                    }
                    acc += d2.sqrt();
                }
                best = best.min(acc / 3.0);
            }
            total += best;
        }
        assert!((got - total / 3.0).abs() < 1e-12);
        assert!(mmade(&preds, &[]).is_err());
    }

    #[test]
    fn median_metric_cases() {
        let gt = seq(2, 3, 100);
        let p = seq(2, 3, 101);
        let (am, fm) = median_metrics(&[p.clone()], &gt).unwrap();
        assert_eq!(am, ade(&[p.clone()], &gt).unwrap());
        assert_eq!(fm, fde(&[p], &gt).unwrap());

        let mut vals = vec![3.0, 1.0, 2.0];
        assert_eq!(median(&mut vals), 2.0);
        let mut even = vec![4.0, 1.0, 2.0, 3.0];
        assert_eq!(median(&mut even), 2.5);
    }

    #[test]
    fn median_matches_sort_oracle_at_k50() {
        let gt = seq(2, 4, 110);
        let preds: Vec<Tensor> = (0..50).map(|i| seq(2, 4, 200 + i)).collect();
        let (am, _) = median_metrics(&preds, &gt).unwrap();
        let mut dists: Vec<f64> = preds.iter().map(|p| frame_mean_dist(p, &gt)).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = 0.5 * (dists[24] + dists[25]);
        assert!((am - oracle).abs() < 1e-12);
        // min <= median always
        assert!(ade(&preds, &gt).unwrap() <= am);
    }

    #[test]
    fn pca_degenerate_and_rank_one() {
        let a = seq(2, 3, 120);
        let pts = pca_project(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in pts {
            assert_eq!((x, y), (0.0, 0.0));
        }

        // points varying along a single direction project to a line
        let dir = seq(2, 3, 121);
        let base = seq(2, 3, 122);
        let line: Vec<Tensor> = (0..5)
            .map(|i| {
                let t = i as f64 - 2.0;
                Tensor::new(
                    base.shape(),
                    base.data()
                        .iter()
                        .zip(dir.data())
                        .map(|(b, d)| b + t * d)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let pts = pca_project(&line).unwrap();
        for (_, y) in &pts {
            assert!(y.abs() < 1e-9, "rank-1 data leaked into the second PC: {y}");
        }
        assert!(pca_project(&[a.clone(), a]).is_err());
    }

    #[test]
    fn pca_beats_random_projections() {
        let preds: Vec<Tensor> = (0..12).map(|i| seq(3, 3, 130 + i)).collect();
        let pts = pca_project(&preds).unwrap();
        let captured: f64 = pts.iter().map(|(x, y)| x * x + y * y).sum();

        let d = preds[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|i| preds.iter().map(|p| p.data()[i]).sum::<f64>() / preds.len() as f64)
            .collect();
        let mut r = rng::stream(777, "proj");
        for _ in 0..20 {
            let mut u = rng::normal_vec(&mut r, d);
            let mut v = rng::normal_vec(&mut r, d);
            normalize(&mut u).unwrap();
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(&u) {
                *vi -= dot * ui;
            }
            normalize(&mut v).unwrap();
            let mut var = 0.0;
            for p in &preds {
                let cx: f64 = p
                    .data()
                    .iter()
                    .zip(&mean)
                    .zip(&u)
                    .map(|((a, m), b)| (a - m) * b)
                    .sum();
                let cy: f64 = p
                    .data()
                    .iter()
                    .zip(&mean)
                    .zip(&v)
                    .map(|((a, m), b)| (a - m) * b)
                    .sum();
                var += cx * cx + cy * cy;
            }
            assert!(captured >= var - 1e-6, "random projection beat PCA");
        }
    }

    #[test]
    fn mining_threshold_extremes() {
        use crate::synth::{generate, GenConfig};
        let cfg = GenConfig {
            joints: 4,
            coords: 3,
            history_frames: 5,
            future_frames: 6,
            n_modes: 2,
            n_train: 10,
            n_test: 4,
            noise_sd: 0.05,
            v_max: 0.6,
            mode0_prob: 0.6,
        };
        let ds = generate(&cfg, 7).unwrap();
        // vanishing threshold: own future only
        let tiny = mine_multimodal_gt(&ds, 1e-12);
        for (i, set) in tiny.per_sample.iter().enumerate() {
            assert_eq!(set, &vec![ds.train.len() + i]);
        }
        // huge threshold: every future
        let all = mine_multimodal_gt(&ds, 1e12);
        for set in &all.per_sample {
            assert_eq!(set.len(), ds.train.len() + ds.test.len());
        }
    }

    #[test]
    fn mining_finds_planted_duplicate_histories() {
        use crate::synth::{generate, GenConfig};
        // noise-free generation plants identical histories across all modes
        let cfg = GenConfig {
            joints: 4,
            coords: 3,
            history_frames: 5,
            future_frames: 6,
            n_modes: 3,
            n_train: 12,
            n_test: 3,
            noise_sd: 0.0,
            v_max: 0.6,
            mode0_prob: 0.5,
        };
        let ds = generate(&cfg, 8).unwrap();
        let mm = mine_multimodal_gt(&ds, 1e-9);
        for set in &mm.per_sample {
            assert_eq!(
                set.len(),
                ds.train.len() + ds.test.len(),
                "identical histories must all be mined"
            );
        }
    }

    proptest! {
        #[test]
        fn apd_permutation_invariance(seed in 0u64..200) {
            let preds: Vec<Tensor> = (0..4).map(|i| seq(2, 3, seed * 10 + i)).collect();
            let base = apd(&preds).unwrap();
            let perm = vec![preds[2].clone(), preds[0].clone(), preds[3].clone(), preds[1].clone()];
            prop_assert!((apd(&perm).unwrap() - base).abs() < 1e-12);
        }
    }
}
