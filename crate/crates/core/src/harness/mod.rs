//! Experiment orchestration: builds the model, dictionary and moment set,
//! solves for the optimal coefficients, runs the Monte-Carlo ensemble and
//! the theoretical recursions on identical inputs, and emits comparable
//! curve files.

pub mod config;
pub mod output;

use crate::batch::BatchProblem;
use crate::graph::{covariance_for_node, split_for_node, LinearModel, NonlinearModel};
use crate::kernel::{regressor_into, Dictionary, Features, GaussianKernel};
use crate::moments::{MomentContext, MomentSet};
use crate::online::{largest_gap_threshold, read_topology, Estimator, EstimatorParams};
use crate::theory::{msd, stability_bound, TheoryModel};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use std::path::Path;

pub use config::{
    linear_five_node, nonlinear_three_node, BoundSource, DictionaryConfig, ExperimentConfig,
    KernelConfig, ModelConfig, RunConfig,
};
pub use output::emit_outputs;

enum SignalModel {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

impl SignalModel {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        match self {
            SignalModel::Linear(m) => Ok(m.draw(rng)),
            SignalModel::Nonlinear(m) => m.draw(rng),
        }
    }
}

/// RNG stream layout under the master seed: stream 0 drives shared
/// presampling, stream `r + 1` drives Monte-Carlo run `r`. Runs are
/// therefore independent of each other and of the ensemble size.
fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Everything a validation run produces: per-iteration ensemble statistics,
/// the matching theoretical curves, and the topology readout.
pub struct RunArtifacts {
    pub k_s: usize,
    pub n_inputs: usize,
    pub step_size: f64,
    pub reg_weight: f64,
    pub optimal: DVector<f64>,
    pub moments: MomentSet,
    pub dict: Dictionary,
    /// ensemble mean of the coefficient vector, per iteration
    pub mean_emp: Vec<DVector<f64>>,
    /// standard error of that mean, per entry
    pub mean_se: Vec<DVector<f64>>,
    pub mean_theory: Vec<DVector<f64>>,
    pub msd_emp: Vec<f64>,
    pub msd_emp_se: Vec<f64>,
    pub msd_theory: Vec<f64>,
    /// steady-state deviation, unregularized runs only
    pub steady_state_msd: Option<f64>,
    /// why the steady state is missing, when it could not be computed
    pub steady_state_note: Option<String>,
    /// set when the predicted recursion left its stability range
    pub theory_note: Option<String>,
    /// ensemble-mean final edge strengths per input node
    pub edge_strengths: Vec<f64>,
    /// recovered incoming-edge indicators from the ensemble-mean strengths
    pub adjacency_row: Vec<bool>,
    /// per-run final strengths (divergent runs excluded)
    pub strengths_per_run: Vec<Vec<f64>>,
    /// per-run recovered rows with the largest-gap threshold
    pub rows_per_run: Vec<Vec<bool>>,
    pub diverged_runs: usize,
    pub runs: usize,
}

struct RunResult {
    traj: Vec<f64>,    // iteration-major coefficients, truncated on divergence
    traj_sq: Vec<f64>, // squared coefficients
    dev_sq: Vec<f64>,  // squared deviation from the optimal coefficients
    strengths: Option<Vec<f64>>,
    diverged_at: Option<usize>,
}

const DIVERGENCE_NORM_SQ: f64 = 1e12;

#[allow(clippy::too_many_arguments)]
fn simulate_run(
    model: &SignalModel,
    node: usize,
    kernel: &GaussianKernel,
    dict: &Dictionary,
    moments: &MomentSet,
    optimal: &DVector<f64>,
    params: &EstimatorParams,
    exact_cov: bool,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RunResult> {
    let n_inputs = dict.dim();
    let ks = (n_inputs + 1) * dict.len();
    let mut est = Estimator::new(n_inputs, dict.len(), params, None)?;
    let mut s = DVector::zeros(ks);
    let mut traj = Vec::with_capacity(horizon * ks);
    let mut traj_sq = Vec::with_capacity(horizon * ks);
    let mut dev_sq = Vec::with_capacity(horizon);
    let mut diverged_at = None;

    for i in 0..horizon {
        for &c in est.coeffs.iter() {
            traj.push(c);
            traj_sq.push(c * c);
        }
        dev_sq.push((&est.coeffs - optimal).norm_squared());

        let signal = model.draw(rng).map_err(Error::stage("sampling"))?;
        let (inputs, output) = split_for_node(&signal, node);
        regressor_into(kernel, dict, &inputs, &mut s);
        let step_result = if params.reg_weight > 0.0 && !exact_cov {
            let feats = Features::compute(kernel, dict, &inputs)?;
            let t: Vec<DVector<f64>> = (0..n_inputs).map(|m| feats.deriv_feature(m)).collect();
            est.update_cov_estimates(&t, params.forgetting)?;
            est.step_estimated(&s, output, params)
        } else {
            est.step_with_covs(&s, output, &moments.deriv_covs, params)
        };
        let blew_up = est.coeffs.norm_squared() > DIVERGENCE_NORM_SQ;
        match step_result {
            Err(Error::Diverged(_)) => {
                diverged_at = Some(i + 1);
                break;
            }
            Err(e) => return Err(e),
            Ok(()) if blew_up => {
                diverged_at = Some(i + 1);
                break;
            }
            Ok(()) => {}
        }
    }
    let strengths = if diverged_at.is_none() {
        let covs: &[DMatrix<f64>] = if exact_cov {
            &moments.deriv_covs
        } else {
            &est.cov_estimates
        };
        Some(covs.iter().map(|c| est.edge_strength(c)).collect())
    } else {
        None
    };
    Ok(RunResult {
        traj,
        traj_sq,
        dev_sq,
        strengths,
        diverged_at,
    })
}

/// Estimates the largest eigenvalue of the feature second moment from
/// sampled signals; basis for the empirical step-size bound.
fn empirical_feature_bound(
    model: &SignalModel,
    node: usize,
    kernel: &GaussianKernel,
    dict: &Dictionary,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Result<f64> {
    let ks = (dict.dim() + 1) * dict.len();
    let mut acc = DMatrix::zeros(ks, ks);
    let mut s = DVector::zeros(ks);
    for _ in 0..count {
        let signal = model.draw(rng)?;
        let (inputs, _) = split_for_node(&signal, node);
        regressor_into(kernel, dict, &inputs, &mut s);
        acc.syger(1.0 / count as f64, &s, &s, 1.0);
    }
    for i in 0..ks {
        for j in (i + 1)..ks {
            acc[(i, j)] = acc[(j, i)];
        }
    }
    stability_bound(&acc)
}

/// Chunk streams for the shared presample sit far above the per-run
/// streams so the two can never collide.
const PRESAMPLE_STREAM_BASE: u64 = 1 << 32;
const PRESAMPLE_CHUNK: usize = 20_000;

/// Second moment `E{y yᵀ}` of the nonlinear model from `count` draws,
/// chunk-parallel with fixed chunk streams (thread-count invariant) and
/// cached as text keyed by the model parameters, seed and count.
fn presampled_second_moment(
    model: &NonlinearModel,
    seed: u64,
    count: usize,
    cache_dir: Option<&Path>,
) -> Result<DMatrix<f64>> {
    use sha2::{Digest, Sha256};
    let (k1, k2) = model.couplings();
    let mut h = Sha256::new();
    h.update(format!("{k1:.16e}|{k2:.16e}|{seed}|{count}").as_bytes());
    let key: String = h
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    let path = cache_dir.map(|d| d.join(format!("presample-{key}.txt")));
    if let Some(p) = &path {
        if let Ok(text) = std::fs::read_to_string(p) {
            let vals: std::result::Result<Vec<f64>, _> =
                text.split_whitespace().map(str::parse).collect();
            if let Ok(vals) = vals {
                if vals.len() == 9 {
                    return Ok(DMatrix::from_row_slice(3, 3, &vals));
                }
            }
        }
    }
    let n_chunks = count.div_ceil(PRESAMPLE_CHUNK);
    let partials: Result<Vec<DMatrix<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, PRESAMPLE_STREAM_BASE + c as u64);
            let take = PRESAMPLE_CHUNK.min(count - c * PRESAMPLE_CHUNK);
            let mut acc = DMatrix::zeros(3, 3);
            for _ in 0..take {
                let y = model.draw(&mut rng)?;
                acc.syger(1.0, &y, &y, 1.0);
            }
            Ok(acc)
        })
        .collect();
    let mut acc = DMatrix::zeros(3, 3);
    for p in partials? {
        acc += p;
    }
    acc /= count as f64;
    for i in 0..3 {
        for j in (i + 1)..3 {
            acc[(i, j)] = acc[(j, i)];
        }
    }
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text: Vec<String> = acc
            .row_iter()
            .map(|r| {
                r.iter()
                    .map(|v| format!("{v:.16e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let tmp = p.with_extension(format!("{}.tmp", std::process::id()));
        std::fs::write(&tmp, text.join("\n") + "\n")?;
        std::fs::rename(&tmp, p)?;
    }
    Ok(acc)
}

/// Loads the moment set from `cache_dir` when a matching cache exists,
/// computing and storing it otherwise.
pub fn moment_set_cached(ctx: &MomentContext, cache_dir: Option<&Path>) -> Result<MomentSet> {
    let key = MomentSet::cache_key(ctx.input_cov(), ctx.bandwidth(), ctx.dict());
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("moments-{key}.bin"));
        if path.exists() {
            if let Ok(set) = MomentSet::load(&path) {
                if set.n_inputs == ctx.n_inputs() && set.dict_len == ctx.dict().len() {
                    return Ok(set);
                }
            }
        }
        let set = MomentSet::compute(ctx)?;
        std::fs::create_dir_all(dir)?;
        // write-then-rename keeps concurrent readers away from torn files
        let tmp = dir.join(format!("moments-{key}.{}.tmp", std::process::id()));
        set.save(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        return Ok(set);
    }
    MomentSet::compute(ctx)
}

/// Shared setup for every entry point: model, input covariance for the
/// node view, dictionary, moment set, optimal coefficients, step size.
pub struct Prepared {
    pub moments: MomentSet,
    pub optimal: DVector<f64>,
    pub step_size: f64,
    pub dict: Dictionary,
    pub kernel: GaussianKernel,
    pub input_cov: DMatrix<f64>,
    model: SignalModel,
    node: usize,
}

pub fn prepare(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Prepared> {
    cfg.validate()?;
    let kernel = GaussianKernel::new(cfg.kernel.bandwidth).map_err(Error::stage("kernel"))?;
    let node = cfg.run.node - 1;

    let (model, full_cov) = match &cfg.model {
        ModelConfig::Linear {
            adjacency,
            noise_std,
        } => {
            let n = adjacency.len();
            let mut w = DMatrix::zeros(n, n);
            for (i, row) in adjacency.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    w[(i, j)] = v;
                }
            }
            let m = LinearModel::new(&w, *noise_std).map_err(Error::stage("model"))?;
            let cov = m.covariance().clone();
            (SignalModel::Linear(m), cov)
        }
        ModelConfig::Nonlinear { k1, k2 } => {
            let m = NonlinearModel::new(*k1, *k2).map_err(Error::stage("model"))?;
            let acc = presampled_second_moment(&m, cfg.run.seed, cfg.run.presample, cache_dir)
                .map_err(Error::stage("presample"))?;
            (SignalModel::Nonlinear(m), acc)
        }
    };

    let n_nodes = full_cov.nrows();
    let dict = Dictionary::uniform_grid(
        n_nodes - 1,
        cfg.dictionary.count,
        cfg.dictionary.lo,
        cfg.dictionary.hi,
        cfg.dictionary.seed,
    )
    .map_err(Error::stage("dictionary"))?;

    let input_cov = covariance_for_node(&full_cov, node);
    let ctx = MomentContext::new(input_cov.clone(), cfg.kernel.bandwidth, dict.clone())
        .map_err(Error::stage("moment context"))?;
    let moments = moment_set_cached(&ctx, cache_dir).map_err(Error::stage("moments"))?;

    let problem =
        BatchProblem::new(&moments, cfg.run.reg_weight).map_err(Error::stage("batch problem"))?;
    let optimal = problem
        .solve(1e-6, 200_000)
        .map_err(Error::stage("optimal coefficients"))?
        .coeffs;

    let step_size = match (cfg.run.step_size, cfg.run.step_size_scale) {
        (Some(s), _) => s,
        (None, Some(scale)) => {
            let bound = match cfg.run.bound_source {
                BoundSource::Theory => stability_bound(&moments.feature_cov)
                    .map_err(Error::stage("stability bound"))?,
                BoundSource::Empirical => {
                    let mut rng = stream_rng(cfg.run.seed, 0);
                    let count = cfg.run.presample.clamp(1_000, 100_000);
                    empirical_feature_bound(&model, node, &kernel, &dict, &mut rng, count)
                        .map_err(Error::stage("stability bound"))?
                }
            };
            scale * bound
        }
        _ => unreachable!("validated"),
    };

    Ok(Prepared {
        moments,
        optimal,
        step_size,
        dict,
        kernel,
        input_cov,
        model,
        node,
    })
}

/// Runs the full validation experiment for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<RunArtifacts> {
    let prep = prepare(cfg, cache_dir)?;
    run_with(cfg, prep)
}

/// Runs the experiment on an already prepared setup.
pub fn run_with(cfg: &ExperimentConfig, prep: Prepared) -> Result<RunArtifacts> {
    let Prepared {
        moments,
        optimal,
        step_size,
        dict,
        kernel,
        model,
        node,
        ..
    } = prep;
    cfg.validate()?;
    let ks = moments.k_s();
    let n_inputs = moments.n_inputs;
    let horizon = cfg.run.horizon;
    let runs = cfg.run.runs;
    let params = EstimatorParams {
        step_size,
        reg_weight: cfg.run.reg_weight,
        forgetting: cfg.run.forgetting,
    };
    params.validate()?;

    // ensemble accumulators, reduced in run order for determinism
    let mut sum = vec![0.0f64; horizon * ks];
    let mut sum_sq = vec![0.0f64; horizon * ks];
    let mut dev_sum = vec![0.0f64; horizon];
    let mut dev_sum_sq = vec![0.0f64; horizon];
    let mut count = vec![0u32; horizon];
    let mut strengths_per_run = Vec::with_capacity(runs);
    let mut rows_per_run = Vec::with_capacity(runs);
    let mut diverged_runs = 0usize;

    const CHUNK: usize = 16;
    let mut start = 0usize;
    while start < runs {
        let end = (start + CHUNK).min(runs);
        let chunk: Result<Vec<RunResult>> = (start..end)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream_rng(cfg.run.seed, r as u64 + 1);
                simulate_run(
                    &model,
                    node,
                    &kernel,
                    &dict,
                    &moments,
                    &optimal,
                    &params,
                    cfg.run.exact_cov,
                    horizon,
                    &mut rng,
                )
            })
            .collect();
        for res in chunk.map_err(Error::stage("ensemble"))? {
            let valid_iters = res.dev_sq.len();
            for i in 0..valid_iters {
                for j in 0..ks {
                    sum[i * ks + j] += res.traj[i * ks + j];
                    sum_sq[i * ks + j] += res.traj_sq[i * ks + j];
                }
                dev_sum[i] += res.dev_sq[i];
                dev_sum_sq[i] += res.dev_sq[i] * res.dev_sq[i];
                count[i] += 1;
            }
            if res.diverged_at.is_some() {
                diverged_runs += 1;
            }
            if let Some(st) = res.strengths {
                let tau = largest_gap_threshold(&st);
                rows_per_run.push(read_topology(&st, &vec![tau; st.len()])?);
                strengths_per_run.push(st);
            }
        }
        start = end;
    }

    let mut mean_emp = Vec::with_capacity(horizon);
    let mut mean_se = Vec::with_capacity(horizon);
    let mut msd_emp = Vec::with_capacity(horizon);
    let mut msd_emp_se = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let n = count[i].max(1) as f64;
        let mean = DVector::from_fn(ks, |j, _| sum[i * ks + j] / n);
        let se = DVector::from_fn(ks, |j, _| {
            let m = sum[i * ks + j] / n;
            let var = (sum_sq[i * ks + j] / n - m * m).max(0.0);
            (var / n).sqrt()
        });
        mean_emp.push(mean);
        mean_se.push(se);
        let dm = dev_sum[i] / n;
        msd_emp.push(dm);
        msd_emp_se.push(((dev_sum_sq[i] / n - dm * dm).max(0.0) / n).sqrt());
    }

    // theoretical curves on the identical statistics; past its own
    // stability range the recursion blows up, which is recorded (the
    // remaining predicted deviation is unbounded) rather than fatal
    let theory = TheoryModel::new(&moments, optimal.clone(), step_size, cfg.run.reg_weight)
        .map_err(Error::stage("theory"))?;
    let mut state = theory.initial_state();
    let mut mean_theory = Vec::with_capacity(horizon);
    let mut msd_theory = Vec::with_capacity(horizon);
    let mut theory_note = None;
    for _ in 0..horizon {
        mean_theory.push(state.mean_coeffs(&optimal));
        msd_theory.push(msd(&state));
        if theory_note.is_none() {
            match theory.step(&state) {
                Ok(next) => state = next,
                Err(e) => theory_note = Some(e.to_string()),
            }
        }
    }
    if theory_note.is_some() {
        for v in msd_theory.iter_mut().skip(1) {
            if !v.is_finite() || *v > 1e300 {
                *v = f64::INFINITY;
            }
        }
    }
    // an unstable steady-state map is a property of the configuration
    // (over-large step size, or statistics far from the Gaussian model);
    // record it instead of failing the run
    let (steady_state_msd, steady_state_note) = if cfg.run.reg_weight == 0.0 {
        match theory.steady_state_msd() {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    // ensemble-mean strengths and the thresholded readout
    let valid = strengths_per_run.len().max(1) as f64;
    let mut edge_strengths = vec![0.0; n_inputs];
    for st in &strengths_per_run {
        for (acc, &v) in edge_strengths.iter_mut().zip(st) {
            *acc += v / valid;
        }
    }
    let tau = largest_gap_threshold(&edge_strengths);
    let adjacency_row = read_topology(&edge_strengths, &vec![tau; n_inputs])?;

    Ok(RunArtifacts {
        k_s: ks,
        n_inputs,
        step_size,
        reg_weight: cfg.run.reg_weight,
        optimal,
        moments,
        dict,
        mean_emp,
        mean_se,
        mean_theory,
        msd_emp,
        msd_emp_se,
        msd_theory,
        steady_state_msd,
        steady_state_note,
        theory_note,
        edge_strengths,
        adjacency_row,
        strengths_per_run,
        rows_per_run,
        diverged_runs,
        runs,
    })
}

/// Gap report between two positive curves on a log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveGap {
    pub burn_in: usize,
    /// max over `i >= burn_in` of `|10 log10(a_i) - 10 log10(b_i)|`
    pub max_db: f64,
    /// the same maximum over four consecutive segments of the compared span
    pub segment_max_db: Vec<f64>,
    /// points skipped because one side was not positive
    pub excluded: usize,
}

/// Compares curves pointwise in decibels from `burn_in` on (defaults to a
/// tenth of the length). Nonpositive values cannot be mapped to dB and are
/// excluded but counted.
pub fn compare_curves(a: &[f64], b: &[f64], burn_in: Option<usize>) -> Result<CurveGap> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidParam("empty curves".into()));
    }
    let burn_in = burn_in.unwrap_or(a.len() / 10).min(a.len() - 1);
    let span = a.len() - burn_in;
    let mut max_db = 0.0f64;
    let mut segment_max_db = vec![0.0f64; 4];
    let mut excluded = 0usize;
    for i in burn_in..a.len() {
        if a[i] <= 0.0 || b[i] <= 0.0 {
            excluded += 1;
            continue;
        }
        let gap = (10.0 * (a[i].log10() - b[i].log10())).abs();
        max_db = max_db.max(gap);
        let seg = ((i - burn_in) * 4 / span).min(3);
        segment_max_db[seg] = segment_max_db[seg].max(gap);
    }
    Ok(CurveGap {
        burn_in,
        max_db,
        segment_max_db,
        excluded,
    })
}

/// Draws `count` signals from the configured model on the shared stream;
/// used by diagnostics and tests.
pub fn presample_signals(cfg: &ExperimentConfig, count: usize) -> Result<Vec<DVector<f64>>> {
    let mut rng = stream_rng(cfg.run.seed, 0);
    match &cfg.model {
        ModelConfig::Linear {
            adjacency,
            noise_std,
        } => {
            let n = adjacency.len();
            let mut w = DMatrix::zeros(n, n);
            for (i, row) in adjacency.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    w[(i, j)] = v;
                }
            }
            let m = LinearModel::new(&w, *noise_std)?;
            Ok((0..count).map(|_| m.draw(&mut rng)).collect())
        }
        ModelConfig::Nonlinear { k1, k2 } => {
            let m = NonlinearModel::new(*k1, *k2)?;
            (0..count).map(|_| m.draw(&mut rng)).collect()
        }
    }
}
