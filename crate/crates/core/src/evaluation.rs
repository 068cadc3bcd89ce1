//! Metrics and batch experiment orchestration: denoising error, clustering
//! error, subspace-recovery scoring, and the trial loops that turn a config
//! into a flat table of result records.

use crate::config::{DatasetConfig, ExperimentConfig, Mode};
use crate::datagen::{
    add_noise, generate_masks, generate_points, generate_subspaces, load_labels_csv,
    load_matrix_csv, standard_normal_matrix,
};
use crate::error::{McuosError, Result};
use crate::kernel::{
    check_distance_bound, check_gaussian_kernel_bound, check_inner_bound,
    check_polynomial_kernel_bound, BoundOutcome,
};
use crate::kernel_learning::{mckusal, rmckusal, KernelModel, TrainingData};
use crate::linear::{amicusal, micusal, McUosModel};
use crate::missing::{rmicusal, ObservedSignal};
use crate::preimage::{preimage_complete, preimage_missing};
use crate::subspace::match_subspaces;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

/// One scalar outcome of one trial, with enough parameter echo to reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub method: String,
    pub metric: String,
    pub lambda: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub s: usize,
    pub missing_frac: f64,
    pub sigma_tr_sq: f64,
    pub sigma_te_sq: f64,
    pub seed: u64,
    pub trial: usize,
    pub value: f64,
}

/// Reconstructs a noisy signal with an ambient-space model and scores it
/// against the clean signal. Models trained on complete data carry a mean and
/// reconstruct around it; models trained on partially observed data are
/// mean-free and project the raw signal.
pub fn denoise_linear(
    model: &McUosModel,
    z: &DVector<f64>,
    x: &DVector<f64>,
    complete_training: bool,
) -> (DVector<f64>, f64) {
    let centered = if complete_training {
        z - &model.mean
    } else {
        z.clone()
    };
    let mut tau = 0;
    let mut best = f64::NEG_INFINITY;
    for ell in 0..model.subspaces.len() {
        let score = (model.subspaces.get(ell).basis().transpose() * &centered).norm_squared();
        if score > best {
            best = score;
            tau = ell;
        }
    }
    let basis = model.subspaces.get(tau).basis();
    let mut rec = basis * (basis.transpose() * &centered);
    if complete_training {
        rec += &model.mean;
    }
    let err = (x - &rec).norm_squared() / x.norm_squared();
    (rec, err)
}

/// Reconstructs a noisy signal through the feature-space model's pre-image
/// and scores it against the clean signal.
pub fn denoise_kernel(
    model: &KernelModel,
    z: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let rec = match &model.training {
        TrainingData::Complete(_) => preimage_complete(model, z)?,
        TrainingData::Observed(_) => preimage_missing(model, &ObservedSignal::full(z.clone()))?,
    };
    let err = (x - &rec).norm_squared() / x.norm_squared();
    Ok((rec, err))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    fn heap(n: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..n {
            heap(n - 1, items, out);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    heap(k, &mut items, &mut out);
    out
}

/// Fraction of misassigned signals, minimized over all relabelings of the
/// learned clusters, as a percentage. Exhaustive over permutations; intended
/// for small cluster counts (at most 8).
pub fn clustering_error(assignments: &[usize], labels: &[usize], l: usize) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(McuosError::ShapeMismatch(
            "assignments and labels must have equal length".into(),
        ));
    }
    if l == 0 || l > 8 {
        return Err(McuosError::ParseError(
            "clustering error supports 1..=8 clusters".into(),
        ));
    }
    let n = assignments.len();
    let mut best = usize::MAX;
    for perm in permutations(l) {
        let wrong = assignments
            .iter()
            .zip(labels)
            .filter(|(&a, &b)| a >= l || b >= l || perm[a] != b)
            .count();
        best = best.min(wrong);
    }
    Ok(100.0 * best as f64 / n as f64)
}

/// Writes records as CSV preceded by `#`-prefixed comment lines, sorted into
/// a deterministic order.
pub fn write_records<W: Write>(
    mut sink: W,
    comment_lines: &[String],
    records: &[ResultRecord],
) -> Result<()> {
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (
            &a.method,
            &a.metric,
            a.trial,
            a.sigma_te_sq.to_bits(),
            a.missing_frac.to_bits(),
            a.lambda.to_bits(),
        )
            .cmp(&(
                &b.method,
                &b.metric,
                b.trial,
                b.sigma_te_sq.to_bits(),
                b.missing_frac.to_bits(),
                b.lambda.to_bits(),
            ))
    });
    for line in comment_lines {
        writeln!(sink, "{line}").map_err(|e| McuosError::ParseError(e.to_string()))?;
    }
    let mut writer = csv::Writer::from_writer(sink);
    for rec in sorted {
        writer
            .serialize(rec)
            .map_err(|e| McuosError::ParseError(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| McuosError::ParseError(e.to_string()))?;
    Ok(())
}

struct LoadedData {
    data: DMatrix<f64>,
    labels: Option<Vec<usize>>,
}

fn load_dataset(ds: &DatasetConfig, spec_noise: bool, trial_seed: u64) -> Result<LoadedData> {
    if let Some(spec) = &ds.synthetic {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let truth = generate_subspaces(spec, &mut rng)?;
        let mut dataset = generate_points(&truth, spec, &mut rng)?;
        if spec_noise {
            dataset.noisy = add_noise(&dataset.clean, spec.sigma_tr_sq, &mut rng);
        }
        Ok(LoadedData {
            data: dataset.noisy,
            labels: Some(dataset.labels),
        })
    } else if let Some(path) = &ds.data_csv {
        let data = load_matrix_csv(path, ds.transpose)?;
        let labels = ds
            .labels_csv
            .as_ref()
            .map(|p| load_labels_csv(p))
            .transpose()?;
        Ok(LoadedData { data, labels })
    } else {
        Err(McuosError::ParseError(
            "dataset requires either synthetic or data_csv".into(),
        ))
    }
}

fn mask_signals(
    data: &DMatrix<f64>,
    missing_frac: f64,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ObservedSignal>> {
    let masks = generate_masks(data.nrows(), data.ncols(), missing_frac, s, rng)?;
    (0..data.ncols())
        .map(|j| ObservedSignal::from_mask(&data.column(j).into_owned(), &masks[j]))
        .collect()
}

fn failure_record(run_id: &str, method: &str, seed: u64, trial: usize, err: &McuosError) -> ResultRecord {
    eprintln!("trial {trial} ({method}): {err}");
    ResultRecord {
        run_id: run_id.to_string(),
        method: method.to_string(),
        metric: "failure".to_string(),
        lambda: 0.0,
        l: 0,
        s: 0,
        missing_frac: 0.0,
        sigma_tr_sq: 0.0,
        sigma_te_sq: 0.0,
        seed,
        trial,
        value: 1.0,
    }
}

fn record_base(run_id: &str, seed: u64, trial: usize) -> ResultRecord {
    ResultRecord {
        run_id: run_id.to_string(),
        method: String::new(),
        metric: String::new(),
        lambda: 0.0,
        l: 0,
        s: 0,
        missing_frac: 0.0,
        sigma_tr_sq: 0.0,
        sigma_te_sq: 0.0,
        seed,
        trial,
        value: 0.0,
    }
}

fn synth_mcuos_trial(
    config: &ExperimentConfig,
    run_id: &str,
    trial: usize,
) -> Result<Vec<ResultRecord>> {
    let spec = config
        .dataset
        .as_ref()
        .and_then(|d| d.synthetic.as_ref())
        .expect("validated");
    let trial_seed = config.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let truth = generate_subspaces(spec, &mut rng)?;
    let dataset = generate_points(&truth, spec, &mut rng)?;
    let noisy = add_noise(&dataset.clean, spec.sigma_tr_sq, &mut rng);
    let mut records = Vec::new();
    if let Some(params) = &config.micusal {
        let mut p = params.clone();
        p.rng_seed = trial_seed;
        let model = micusal(&noisy, &p)?;
        let matched = match_subspaces(&model.subspaces, &truth)?;
        let mut rec = record_base(run_id, config.seed, trial);
        rec.method = "micusal".into();
        rec.metric = "d_avg".into();
        rec.lambda = p.lambda;
        rec.l = p.l;
        rec.s = p.s;
        rec.sigma_tr_sq = spec.sigma_tr_sq;
        rec.value = matched.d_avg;
        records.push(rec);
    }
    if let Some(params) = &config.amicusal {
        let mut p = params.clone();
        p.rng_seed = trial_seed;
        let out = amicusal(&noisy, &p)?;
        let mut base = record_base(run_id, config.seed, trial);
        base.method = "amicusal".into();
        base.lambda = p.lambda;
        base.l = out.discovered_l;
        base.s = out.discovered_s;
        base.sigma_tr_sq = spec.sigma_tr_sq;
        let mut count = base.clone();
        count.metric = "discovered_L".into();
        count.value = out.discovered_l as f64;
        records.push(count);
        let mut dim = base.clone();
        dim.metric = "discovered_s".into();
        dim.value = out.discovered_s as f64;
        records.push(dim);
        if out.discovered_l == truth.len() && out.discovered_s == truth.dim() {
            let matched = match_subspaces(&out.model.subspaces, &truth)?;
            let mut rec = base;
            rec.metric = "d_avg".into();
            rec.value = matched.d_avg;
            records.push(rec);
        }
    }
    Ok(records)
}

fn synth_rmcuos_trial(
    config: &ExperimentConfig,
    run_id: &str,
    trial: usize,
) -> Result<Vec<ResultRecord>> {
    let spec = config
        .dataset
        .as_ref()
        .and_then(|d| d.synthetic.as_ref())
        .expect("validated");
    let params = config.rmicusal.as_ref().expect("validated");
    let missing_frac = config.missing_frac.expect("validated");
    let trial_seed = config.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let truth = generate_subspaces(spec, &mut rng)?;
    let dataset = generate_points(&truth, spec, &mut rng)?;
    let noisy = add_noise(&dataset.clean, spec.sigma_tr_sq, &mut rng);
    let signals = mask_signals(&noisy, missing_frac, params.s, &mut rng)?;
    let mut p = params.clone();
    p.rng_seed = trial_seed;
    let model = rmicusal(&signals, &p)?;
    let matched = match_subspaces(&model.subspaces, &truth)?;
    let mut rec = record_base(run_id, config.seed, trial);
    rec.method = "rmicusal".into();
    rec.metric = "d_avg".into();
    rec.lambda = p.lambda;
    rec.l = p.l;
    rec.s = p.s;
    rec.missing_frac = missing_frac;
    rec.sigma_tr_sq = spec.sigma_tr_sq;
    rec.value = matched.d_avg;
    Ok(vec![rec])
}

fn kernel_trial(
    config: &ExperimentConfig,
    run_id: &str,
    trial: usize,
    missing: bool,
) -> Result<Vec<ResultRecord>> {
    let ds = config.dataset.as_ref().expect("validated");
    let params = config.mckusal.as_ref().expect("validated");
    let spec = config.kernel.expect("validated");
    let trial_seed = config.seed.wrapping_add(trial as u64);
    let loaded = load_dataset(ds, true, trial_seed)?;
    let mut p = params.clone();
    p.rng_seed = trial_seed;
    let model = if missing {
        let missing_frac = config.missing_frac.expect("validated");
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed.wrapping_add(0x9e3779b9));
        let signals = mask_signals(&loaded.data, missing_frac, p.s, &mut rng)?;
        rmckusal(&signals, spec, &p, config.delta_min.unwrap_or(1e-6))?
    } else {
        mckusal(&loaded.data, spec, &p)?
    };
    let mut records = Vec::new();
    let method = if missing { "rmckusal" } else { "mckusal" };
    let mut base = record_base(run_id, config.seed, trial);
    base.method = method.into();
    base.lambda = p.lambda;
    base.l = p.l;
    base.s = p.s;
    base.missing_frac = config.missing_frac.unwrap_or(0.0);
    if let Some(spec_synth) = &ds.synthetic {
        base.sigma_tr_sq = spec_synth.sigma_tr_sq;
    }
    let mut obj = base.clone();
    obj.metric = "objective".into();
    obj.value = model.objective;
    records.push(obj);
    if let Some(labels) = &loaded.labels {
        let mut rec = base;
        rec.metric = "clustering_error_pct".into();
        rec.value = clustering_error(&model.assignments, labels, p.l)?;
        records.push(rec);
    }
    Ok(records)
}

fn denoise_trial(
    config: &ExperimentConfig,
    run_id: &str,
    trial: usize,
) -> Result<Vec<ResultRecord>> {
    let ds = config.dataset.as_ref().expect("validated");
    let sigma_te_grid = config.sigma_te_sq.as_ref().expect("validated");
    let trial_seed = config.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);

    // Training data plus clean test signals from the same source.
    let (train_noisy, test_clean, sigma_tr) = if let Some(spec) = &ds.synthetic {
        let truth = generate_subspaces(spec, &mut rng)?;
        let dataset = generate_points(&truth, spec, &mut rng)?;
        let noisy = add_noise(&dataset.clean, spec.sigma_tr_sq, &mut rng);
        let test = generate_points(&truth, spec, &mut rng)?.clean;
        (noisy, test, spec.sigma_tr_sq)
    } else {
        let loaded = load_dataset(ds, false, trial_seed)?;
        (loaded.data.clone(), loaded.data, 0.0)
    };

    let mut records = Vec::new();
    for &sigma_te in sigma_te_grid {
        let test_noisy = add_noise(&test_clean, sigma_te, &mut rng);
        if let Some(params) = &config.micusal {
            let mut p = params.clone();
            p.rng_seed = trial_seed;
            let model = micusal(&train_noisy, &p)?;
            let mut total = 0.0;
            for j in 0..test_noisy.ncols() {
                let (_, err) = denoise_linear(
                    &model,
                    &test_noisy.column(j).into_owned(),
                    &test_clean.column(j).into_owned(),
                    true,
                );
                total += err;
            }
            let mut rec = record_base(run_id, config.seed, trial);
            rec.method = "micusal".into();
            rec.metric = "mean_relative_error".into();
            rec.lambda = p.lambda;
            rec.l = p.l;
            rec.s = p.s;
            rec.sigma_tr_sq = sigma_tr;
            rec.sigma_te_sq = sigma_te;
            rec.value = total / test_noisy.ncols() as f64;
            records.push(rec);
        }
        if let Some(params) = &config.rmicusal {
            let missing_frac = config.missing_frac.unwrap_or(0.0);
            let mut p = params.clone();
            p.rng_seed = trial_seed;
            let signals = mask_signals(&train_noisy, missing_frac, p.s, &mut rng)?;
            let model = rmicusal(&signals, &p)?;
            let mut total = 0.0;
            for j in 0..test_noisy.ncols() {
                let (_, err) = denoise_linear(
                    &model,
                    &test_noisy.column(j).into_owned(),
                    &test_clean.column(j).into_owned(),
                    false,
                );
                total += err;
            }
            let mut rec = record_base(run_id, config.seed, trial);
            rec.method = "rmicusal".into();
            rec.metric = "mean_relative_error".into();
            rec.lambda = p.lambda;
            rec.l = p.l;
            rec.s = p.s;
            rec.missing_frac = missing_frac;
            rec.sigma_tr_sq = sigma_tr;
            rec.sigma_te_sq = sigma_te;
            rec.value = total / test_noisy.ncols() as f64;
            records.push(rec);
        }
        if let Some(params) = &config.mckusal {
            let spec = config.kernel.expect("validated");
            let mut p = params.clone();
            p.rng_seed = trial_seed;
            let missing_frac = config.missing_frac.unwrap_or(0.0);
            let model = if missing_frac > 0.0 {
                let signals = mask_signals(&train_noisy, missing_frac, p.s, &mut rng)?;
                rmckusal(&signals, spec, &p, config.delta_min.unwrap_or(1e-6))?
            } else {
                mckusal(&train_noisy, spec, &p)?
            };
            let mut total = 0.0;
            for j in 0..test_noisy.ncols() {
                let (_, err) = denoise_kernel(
                    &model,
                    &test_noisy.column(j).into_owned(),
                    &test_clean.column(j).into_owned(),
                )?;
                total += err;
            }
            let mut rec = record_base(run_id, config.seed, trial);
            rec.method = if missing_frac > 0.0 {
                "rmckusal".into()
            } else {
                "mckusal".into()
            };
            rec.metric = "mean_relative_error".into();
            rec.lambda = p.lambda;
            rec.l = p.l;
            rec.s = p.s;
            rec.missing_frac = missing_frac;
            rec.sigma_tr_sq = sigma_tr;
            rec.sigma_te_sq = sigma_te;
            rec.value = total / test_noisy.ncols() as f64;
            records.push(rec);
        }
    }
    Ok(records)
}

fn bounds_trial(config: &ExperimentConfig, run_id: &str, trial: usize) -> Result<Vec<ResultRecord>> {
    let bounds = config.bounds.as_ref().expect("validated");
    let trial_seed = config.seed.wrapping_add(trial as u64);
    let mut records = Vec::new();
    for &delta in &bounds.deltas {
        for &omega in &bounds.omega_sizes {
            let mut rng = ChaCha8Rng::seed_from_u64(
                trial_seed ^ (omega as u64) ^ ((delta * 1e6) as u64).rotate_left(17),
            );
            let checks: [(&str, Box<dyn Fn(&DVector<f64>, &DVector<f64>, &mut ChaCha8Rng) -> BoundOutcome>);
                4] = [
                (
                    "distance",
                    Box::new(move |a, b, r| check_distance_bound(a, b, omega, delta, r)),
                ),
                (
                    "inner_product",
                    Box::new(move |a, b, r| check_inner_bound(a, b, omega, delta, r)),
                ),
                {
                    let c = bounds.gaussian_c;
                    (
                        "gaussian_kernel",
                        Box::new(move |a, b, r| check_gaussian_kernel_bound(c, a, b, omega, delta, r)),
                    )
                },
                {
                    let c = bounds.poly_c;
                    let d = bounds.poly_d;
                    (
                        "polynomial_kernel",
                        Box::new(move |a, b, r| {
                            check_polynomial_kernel_bound(c, d, a, b, omega, delta, r)
                        }),
                    )
                },
            ];
            for (name, check) in checks {
                let mut violated = 0usize;
                let mut vacuous = 0usize;
                for _ in 0..config.trials {
                    let pair = standard_normal_matrix(bounds.m, 2, &mut rng);
                    let yi = pair.column(0) / pair.column(0).norm();
                    let yj = pair.column(1) / pair.column(1).norm();
                    match check(&yi.into_owned(), &yj.into_owned(), &mut rng) {
                        BoundOutcome::Violated => violated += 1,
                        BoundOutcome::Vacuous => vacuous += 1,
                        BoundOutcome::Held => {}
                    }
                }
                let mut rec = record_base(run_id, config.seed, trial);
                rec.method = format!("bound_{name}");
                rec.metric = "violation_rate".into();
                rec.missing_frac = 1.0 - omega as f64 / bounds.m as f64;
                rec.lambda = delta;
                rec.value = violated as f64 / config.trials as f64;
                records.push(rec.clone());
                rec.metric = "vacuous_rate".into();
                rec.value = vacuous as f64 / config.trials as f64;
                records.push(rec);
            }
        }
    }
    Ok(records)
}

/// Runs every trial of the configured experiment, in parallel, and returns
/// the flat record table. Trial failures become `failure` records; the run
/// continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    config.validate()?;
    let run_id = format!("{}-{}", config.mode.as_str(), config.seed);
    // Bound checking loops over its own Monte Carlo draws inside one trial.
    let trial_count = if config.mode == Mode::BoundsCheck {
        1
    } else {
        config.trials
    };
    let mut records: Vec<ResultRecord> = (0..trial_count)
        .into_par_iter()
        .flat_map(|trial| {
            let result = match config.mode {
                Mode::SynthMcuos => synth_mcuos_trial(config, &run_id, trial),
                Mode::SynthRmcuos => synth_rmcuos_trial(config, &run_id, trial),
                Mode::Mckuos | Mode::Cluster => kernel_trial(config, &run_id, trial, false),
                Mode::Rmckuos => kernel_trial(config, &run_id, trial, true),
                Mode::Denoise => denoise_trial(config, &run_id, trial),
                Mode::BoundsCheck => bounds_trial(config, &run_id, trial),
            };
            match result {
                Ok(recs) => recs,
                Err(e) => vec![failure_record(
                    &run_id,
                    config.mode.as_str(),
                    config.seed,
                    trial,
                    &e,
                )],
            }
        })
        .collect();
    records.sort_by(|a, b| (&a.method, &a.metric, a.trial).cmp(&(&b.method, &b.metric, b.trial)));
    Ok(records)
}

/// Arithmetic mean of the values of records matching a method and metric.
pub fn mean_value(records: &[ResultRecord], method: &str, metric: &str) -> Option<f64> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.method == method && r.metric == metric)
        .map(|r| r.value)
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
