//! Command implementations behind the CLI: data generation, the two-stage
//! training workflow, evaluation, baseline comparison, and 2-D projection
//! export. Each command is deterministic given (config, seed).

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::checkpoint::write_csv;
use crate::config::{Method, RunConfig};
use crate::cvae::{random_sample, train_cvae, CvaeDims, CvaeModel, EpochLog};
use crate::error::{Error, Result};
use crate::metrics::{
    auto_threshold, evaluate_suite, mine_multimodal_gt, pca_project, MetricsReport,
};
use crate::objectives::{train_aux_sampler, train_dlow, SamplerEpochLog};
use crate::rng;
use crate::sampler::{sample_diverse, BankNet, DlowModel, SamplerModel};
use crate::synth::{self, Dataset, GenConfig, ModeClassifier};
use crate::tensor::Tensor;

pub fn cvae_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("cvae")
}

pub fn sampler_dir(cfg: &RunConfig, method: Method) -> PathBuf {
    match method {
        Method::Auxiliary => cfg.out_dir.join("sampler"),
        Method::Dlow => cfg.out_dir.join("dlow"),
        Method::Random => cfg.out_dir.join("cvae"),
    }
}

/// Generate the synthetic dataset and persist it under `data_dir`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let gen = GenConfig::from_hyper(&cfg.hyper);
    let dataset = synth::generate(&gen, cfg.seed)?;
    synth::save(&dataset, &cfg.data_dir)?;
    println!(
        "wrote {} train / {} test samples ({} joints, {}+{} frames, {} modes) to {}",
        dataset.train.len(),
        dataset.test.len(),
        gen.joints,
        gen.history_frames,
        gen.future_frames,
        gen.n_modes,
        cfg.data_dir.display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    synth::load(&cfg.data_dir).map_err(|e| {
        Error::Staging(format!(
            "cannot load dataset from {} (run gen-data first): {e}",
            cfg.data_dir.display()
        ))
    })
}

/// Pretrain the CVAE and write its checkpoint plus the loss log.
pub fn cmd_train_cvae(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    check_dataset_dims(cfg, &dataset)?;
    let (model, logs) = train_cvae(&dataset, &cfg.hyper, cfg.seed)?;
    let dir = cvae_dir(cfg);
    model.save(&dir)?;
    let rows: Vec<String> = logs.iter().map(EpochLog::csv_row).collect();
    write_csv(&cfg.out_dir.join("cvae_loss.csv"), EpochLog::csv_header(), &rows)?;
    println!(
        "trained cvae for {} epochs (final loss {:.6}); checkpoint at {}",
        logs.len(),
        logs.last().map_or(f64::NAN, |l| l.mean_loss),
        dir.display()
    );
    Ok(dir)
}

fn check_dataset_dims(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let h = &cfg.hyper;
    let d = &dataset.config;
    for (name, a, b) in [
        ("joints", h.joints, d.joints),
        ("coords", h.coords, d.coords),
        ("history_frames", h.history_frames, d.history_frames),
        ("future_frames", h.future_frames, d.future_frames),
    ] {
        if a != b {
            return Err(Error::Staging(format!(
                "config {name}={a} disagrees with dataset {name}={b}"
            )));
        }
    }
    Ok(())
}

fn load_cvae_checked(cfg: &RunConfig) -> Result<CvaeModel> {
    let dir = cvae_dir(cfg);
    let model = CvaeModel::load(&dir).map_err(|e| {
        Error::Staging(format!(
            "sampler training needs a cvae checkpoint at {} (run train-cvae first): {e}",
            dir.display()
        ))
    })?;
    let want = CvaeDims::from_hyper(&cfg.hyper);
    let got = model.dims;
    for (name, a, b) in [
        ("joints", want.joints, got.joints),
        ("coords", want.coords, got.coords),
        ("history_frames", want.history_frames, got.history_frames),
        ("future_frames", want.future_frames, got.future_frames),
        ("n_dct", want.n_dct, got.n_dct),
        ("n_z", want.n_z, got.n_z),
        ("feat_dim", want.feat_dim, got.feat_dim),
    ] {
        if a != b {
            return Err(Error::Staging(format!(
                "config {name}={a} disagrees with cvae checkpoint {name}={b}"
            )));
        }
    }
    Ok(model)
}

/// Train the sampling stage selected by `cfg.method` against the frozen
/// CVAE and write its checkpoint plus the loss log.
pub fn cmd_train_sampler(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    check_dataset_dims(cfg, &dataset)?;
    let cvae = load_cvae_checked(cfg)?;
    let (dir, logs) = match cfg.method {
        Method::Auxiliary => {
            let (model, logs) = train_aux_sampler(&dataset, &cvae, &cfg.hyper, cfg.seed)?;
            let dir = sampler_dir(cfg, Method::Auxiliary);
            model.save(&dir)?;
            (dir, logs)
        }
        Method::Dlow => {
            let (model, logs) = train_dlow(&dataset, &cvae, &cfg.hyper, cfg.seed)?;
            let dir = sampler_dir(cfg, Method::Dlow);
            model.save(&dir)?;
            (dir, logs)
        }
        Method::Random => {
            return Err(Error::Staging(
                "method=random has no sampler stage; train-cvae is sufficient".into(),
            ))
        }
    };
    let log_name = match cfg.method {
        Method::Dlow => "dlow_loss.csv",
        _ => "sampler_loss.csv",
    };
    let rows: Vec<String> = logs.iter().map(SamplerEpochLog::csv_row).collect();
    write_csv(&cfg.out_dir.join(log_name), SamplerEpochLog::csv_header(), &rows)?;
    println!(
        "trained {} sampler for {} epochs (final loss {:.6}); checkpoint at {}",
        cfg.method,
        logs.len(),
        logs.last().map_or(f64::NAN, |l| l.total),
        dir.display()
    );
    Ok(dir)
}

/// Per-sample prediction source for evaluation, seeded per sample so runs
/// and per-sample work orders are reproducible.
pub enum Predictor {
    Random(CvaeModel),
    Net(Box<dyn BankNet>, CvaeModel),
}

impl Predictor {
    pub fn sample(
        &self,
        seed: u64,
        stream_tag: &str,
        sample: &synth::MotionSample,
        k: usize,
    ) -> Result<Vec<Tensor>> {
        let label = format!("{stream_tag}-{}", sample.sample_id);
        let mut r = rng::stream(seed, &label);
        match self {
            Predictor::Random(cvae) => random_sample(cvae, &sample.observed, k, &mut r),
            Predictor::Net(net, cvae) => {
                sample_diverse(net.as_ref(), cvae, &sample.observed, k, &mut r)
            }
        }
    }

    /// Like `sample`, but a fixed-K head is run repeatedly (k must be a
    /// multiple of its trained K), mirroring how the original baseline is
    /// used to produce more samples than it was built for.
    pub fn sample_chunked(
        &self,
        seed: u64,
        stream_tag: &str,
        sample: &synth::MotionSample,
        k: usize,
    ) -> Result<Vec<Tensor>> {
        let fixed = match self {
            Predictor::Net(net, _) => net.fixed_k(),
            Predictor::Random(_) => None,
        };
        match fixed {
            Some(fk) if fk != k => {
                if !k.is_multiple_of(fk) {
                    return Err(Error::Staging(format!(
                        "K={k} is not a multiple of the trained K={fk}"
                    )));
                }
                let mut out = Vec::with_capacity(k);
                for batch in 0..k / fk {
                    let tag = format!("{stream_tag}-batch{batch}");
                    out.extend(self.sample(seed, &tag, sample, fk)?);
                }
                Ok(out)
            }
            _ => self.sample(seed, stream_tag, sample, k),
        }
    }
}

pub fn load_predictor(cfg: &RunConfig, method: Method) -> Result<Predictor> {
    let cvae = load_cvae_checked(cfg)?;
    match method {
        Method::Random => Ok(Predictor::Random(cvae)),
        Method::Auxiliary => {
            let dir = sampler_dir(cfg, method);
            let net = SamplerModel::load(&dir).map_err(|e| {
                Error::Staging(format!(
                    "evaluation needs a sampler checkpoint at {} (run train-sampler first): {e}",
                    dir.display()
                ))
            })?;
            Ok(Predictor::Net(Box::new(net), cvae))
        }
        Method::Dlow => {
            let dir = sampler_dir(cfg, method);
            let net = DlowModel::load(&dir).map_err(|e| {
                Error::Staging(format!(
                    "evaluation needs a dlow checkpoint at {} (run train-sampler with method=dlow first): {e}",
                    dir.display()
                ))
            })?;
            Ok(Predictor::Net(Box::new(net), cvae))
        }
    }
}

/// Evaluate one method at exactly `k` samples per input. A fixed-K head
/// refuses any other K here; `compare` relaxes that by batching.
pub fn evaluate_method(
    cfg: &RunConfig,
    dataset: &Dataset,
    method: Method,
    k: usize,
) -> Result<MetricsReport> {
    let predictor = load_predictor(cfg, method)?;
    if let Predictor::Net(net, _) = &predictor {
        if let Some(fixed) = net.fixed_k() {
            if k != fixed {
                return Err(Error::Staging(format!(
                    "method=dlow was trained with K={fixed} and cannot sample K={k}"
                )));
            }
        }
    }
    let threshold = cfg.mm_threshold.unwrap_or_else(|| auto_threshold(dataset));
    let mm = mine_multimodal_gt(dataset, threshold);
    let classifier = ModeClassifier::from_config(&dataset.config);
    let tag = format!("eval-{method}");
    evaluate_suite(
        |sample, kk| predictor.sample(cfg.seed, &tag, sample, kk),
        dataset,
        k,
        &mm,
        Some(&classifier),
    )
}

/// Evaluate one method at `k` samples per input, running a fixed-K head
/// repeatedly when `k` is a larger multiple of its trained K.
pub fn evaluate_method_chunked(
    cfg: &RunConfig,
    dataset: &Dataset,
    method: Method,
    k: usize,
) -> Result<MetricsReport> {
    let predictor = load_predictor(cfg, method)?;
    let threshold = cfg.mm_threshold.unwrap_or_else(|| auto_threshold(dataset));
    let mm = mine_multimodal_gt(dataset, threshold);
    let classifier = ModeClassifier::from_config(&dataset.config);
    let tag = format!("eval-{method}");
    evaluate_suite(
        |sample, kk| predictor.sample_chunked(cfg.seed, &tag, sample, kk),
        dataset,
        k,
        &mm,
        Some(&classifier),
    )
}

fn report_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "method", "APD", "ADE", "FDE", "MMADE", "MMFDE", "ADE-m", "FDE-m", "mode-cov"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            name,
            r.apd,
            r.ade,
            r.fde,
            r.mmade,
            r.mmfde,
            r.ade_m,
            r.fde_m,
            r.coverage
                .map_or_else(|| "-".to_string(), |c| format!("{c:.4}")),
        );
    }
    out
}

/// Evaluate one method over the test split; writes metrics.csv,
/// per_sample.csv, and report.txt under `out_dir/eval_<method>/`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    check_dataset_dims(cfg, &dataset)?;
    let report = evaluate_method(cfg, &dataset, cfg.method, cfg.k_eval)?;
    let dir = cfg.out_dir.join(format!("eval_{}", cfg.method));
    write_csv(
        &dir.join("metrics.csv"),
        MetricsReport::csv_header(),
        &[report.csv_row()],
    )?;
    write_csv(
        &dir.join("per_sample.csv"),
        MetricsReport::per_sample_csv_header(),
        &report.per_sample_csv_rows(),
    )?;
    let table = report_table(&[(cfg.method.to_string(), &report)]);
    std::fs::write(dir.join("report.txt"), &table)
        .map_err(|e| Error::io(dir.join("report.txt").display().to_string(), e))?;
    print!("{table}");
    Ok(report)
}

/// Side-by-side table over all three methods plus the synthetic
/// mode-coverage column; writes compare.csv and compare.txt.
pub fn cmd_compare(cfg: &RunConfig) -> Result<Vec<(Method, MetricsReport)>> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    check_dataset_dims(cfg, &dataset)?;
    let methods = [Method::Random, Method::Dlow, Method::Auxiliary];
    let mut results = Vec::new();
    for method in methods {
        let report = evaluate_method_chunked(cfg, &dataset, method, cfg.k_eval)?;
        results.push((method, report));
    }
    let mut rows = Vec::new();
    for (method, r) in &results {
        rows.push(format!("{},{}", method, r.csv_row()));
    }
    write_csv(
        &cfg.out_dir.join("compare.csv"),
        &format!("method,{}", MetricsReport::csv_header()),
        &rows,
    )?;
    let table_rows: Vec<(String, &MetricsReport)> = results
        .iter()
        .map(|(m, r)| (m.to_string(), r))
        .collect();
    let table = report_table(&table_rows);
    std::fs::write(cfg.out_dir.join("compare.txt"), &table)
        .map_err(|e| Error::io("compare.txt", e))?;
    print!("{table}");
    Ok(results)
}

/// Sample `project_n` predictions for the first test input and export their
/// 2-D PCA projection as CSV (sample_id, pc1, pc2).
pub fn cmd_project(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    check_dataset_dims(cfg, &dataset)?;
    let preds = project_predictions(cfg, &dataset, cfg.method, cfg.project_n)?;
    let points = pca_project(&preds)?;
    let rows: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, (x, y))| format!("{i},{x:.9},{y:.9}"))
        .collect();
    let path = cfg.out_dir.join(format!("project_{}.csv", cfg.method));
    write_csv(&path, "sample_id,pc1,pc2", &rows)?;
    println!("wrote {} projected points to {}", rows.len(), path.display());
    Ok(path)
}

/// Draw `n` predictions for the first test input. The fixed-K baseline is
/// run repeatedly and truncated, everything else samples n directly.
pub fn project_predictions(
    cfg: &RunConfig,
    dataset: &Dataset,
    method: Method,
    n: usize,
) -> Result<Vec<Tensor>> {
    let predictor = load_predictor(cfg, method)?;
    let sample = dataset
        .test
        .first()
        .ok_or_else(|| Error::Dataset("empty test split".into()))?;
    let fixed = match &predictor {
        Predictor::Net(net, _) => net.fixed_k(),
        Predictor::Random(_) => None,
    };
    match fixed {
        None => predictor.sample(cfg.seed, &format!("project-{method}"), sample, n),
        Some(k) => {
            let mut preds = Vec::with_capacity(n);
            let mut batch = 0usize;
            while preds.len() < n {
                let tag = format!("project-{method}-batch{batch}");
                preds.extend(predictor.sample(cfg.seed, &tag, sample, k)?);
                batch += 1;
            }
            preds.truncate(n);
            Ok(preds)
        }
    }
}
