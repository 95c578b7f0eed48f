use std::path::{Path, PathBuf};

use hierassim::diagnostics::{
    convergence_curve, field_posterior_stats, series_percentiles, uniform_edges, FieldStats, Snapshot,
};
use hierassim::forward::{add_noise, observe, simulate, DataVector};
use hierassim::geomodel::{sample_prior, FieldGenerator, FieldRealization, HyperParams, HyperPrior, Param};
use hierassim::inference::{
    esmda_run, hierarchical_run, modified_esmda_run, rejection_sampling, smc_abc, EnsembleState, FieldForward,
    Simulator, SmcOutcome, Termination,
};
use hierassim::rng::{derive_seed, stream, TAG_ESMDA, TAG_FIELD, TAG_PRIOR, TAG_TRUTH};
use rayon::prelude::*;

use crate::artifacts::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Rs,
    Smcabc,
    Esmda,
    Hierarchical,
    ModifiedEsmda,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rs => "rs",
            Method::Smcabc => "smcabc",
            Method::Esmda => "esmda",
            Method::Hierarchical => "hierarchical",
            Method::ModifiedEsmda => "modified-esmda",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenTruthArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunArgs {
    pub config: PathBuf,
    pub method: Method,
    pub truth: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct DiagArgs {
    pub reference: PathBuf,
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
}

/// The synthetic problem shared by every command.
pub struct Problem {
    pub prior: HyperPrior,
    pub sim: Simulator,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> CliResult<Self> {
        let prior = cfg.prior.build()?;
        let generator = FieldGenerator::new(cfg.simulation.grid, cfg.field)?;
        let sim = Simulator::new(
            generator,
            cfg.simulation.clone(),
            cfg.observation.schedule.clone(),
            cfg.observation.channels.clone(),
        )?;
        Ok(Problem { prior, sim })
    }

    pub fn generator(&self) -> &FieldGenerator {
        &self.sim.generator
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn resolve_out(out: &Option<PathBuf>, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
    ensure_dir(&dir)?;
    Ok(dir)
}

fn hyper_row(h: &HyperParams) -> Vec<String> {
    Param::ALL.iter().map(|&p| fmt(h.get(p))).collect()
}

fn with_params(lead: &[&'static str], tail: &[&'static str]) -> Vec<&'static str> {
    lead.iter()
        .copied()
        .chain(Param::ALL.iter().map(|p| p.name()))
        .chain(tail.iter().copied())
        .collect()
}

/// Samples the truth, simulates it and writes the truth bundle.
pub fn gen_truth(args: &GenTruthArgs) -> CliResult<TruthBundle> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = resolve_out(&args.out, &cfg)?;
    let problem = Problem::new(&cfg)?;
    let seed = cfg.seed;
    let (hyper, explicit) = match &cfg.truth {
        Some(t) => (t.resolve(&problem.prior), true),
        None => (sample_prior(&problem.prior, &mut stream(seed, &[TAG_TRUTH])), false),
    };
    let field_seed = derive_seed(seed, &[TAG_TRUTH, TAG_FIELD]);
    let field = problem.generator().generate(&hyper, field_seed)?;
    let run = simulate(&field, &cfg.simulation)?;
    let true_data = observe(&run, &cfg.observation.schedule, &cfg.observation.channels)?;
    let noise_path = [TAG_TRUTH, 1];
    let observed = add_noise(&true_data, &cfg.observation.noise, &mut stream(seed, &noise_path));
    let bundle = TruthBundle {
        seed,
        hyper,
        explicit,
        field_seed,
        noise_seed: derive_seed(seed, &noise_path),
        true_data,
        observed,
        series: TrueSeries {
            times: run.times.clone(),
            monitor_pressure: run.monitor_pressure.clone(),
            monitor_saturation: run.monitor_saturation.clone(),
        },
        simulate_calls: 1,
        config: cfg,
    };
    write_json(&out.join(TRUTH_FILE), &bundle)?;
    save_field(&out.join(TRUTH_FIELD_FILE), &field.grid, &field.log_k)?;
    write_field_csv_file(&out.join("truth_field.csv"), &field.grid, &field.log_k)?;
    write_csv(
        &out.join("monitor_series.csv"),
        &["time", "pressure", "saturation"],
        (0..run.times.len()).map(|t| {
            vec![fmt(run.times[t]), fmt(run.monitor_pressure[t]), fmt(run.monitor_saturation[t])]
        }),
    )?;
    for (t, (p, s)) in run.pressure.iter().zip(&run.saturation).enumerate() {
        save_field(&out.join(format!("pressure_{t:02}.bin")), &run.grid, p)?;
        save_field(&out.join(format!("saturation_{t:02}.bin")), &run.grid, s)?;
    }
    write_manifest(&out)?;
    Ok(bundle)
}

fn load_truth(dir: &Path) -> CliResult<(TruthBundle, String)> {
    let path = dir.join(TRUTH_FILE);
    if !path.is_file() {
        return Err(CliError::Usage(format!("no truth bundle at {}", dir.display())));
    }
    let bundle: TruthBundle = read_json(&path)?;
    Ok((bundle, sha256_file(&path)?))
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    problem: &'a Problem,
    truth: &'a TruthBundle,
    out: &'a Path,
    seed: u64,
}

/// Runs one sampler against a truth bundle and writes the run directory.
///
/// Results are written before a budget-exhaustion error is returned.
pub fn run(args: &RunArgs) -> CliResult<Ledger> {
    let cfg = load_config(&args.config, args.seed)?;
    let (truth, truth_sha256) = load_truth(&args.truth)?;
    if !cfg.same_problem(&truth.config) {
        return Err(CliError::TruthMismatch(
            "the run configuration describes a different problem than the truth bundle".into(),
        ));
    }
    let out = resolve_out(&args.out, &cfg)?;
    let problem = Problem::new(&cfg)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let ctx = RunContext {
        cfg: &cfg,
        problem: &problem,
        truth: &truth,
        out: &out,
        seed: cfg.seed,
    };
    let mut ledger = Ledger {
        method: args.method.name().into(),
        seed: cfg.seed,
        truth_sha256,
        ..Ledger::default()
    };
    let result = pool.install(|| match args.method {
        Method::Rs => run_rs(&ctx, &mut ledger),
        Method::Smcabc => run_smc(&ctx, &mut ledger).map(|_| ()),
        Method::Esmda => run_esmda(&ctx, &mut ledger),
        Method::Hierarchical => run_hierarchical(&ctx, &mut ledger),
        Method::ModifiedEsmda => run_modified(&ctx, &mut ledger),
    });
    ledger.simulate_calls = problem.sim.calls();
    ledger.status = match &result {
        Ok(()) if ledger.termination.as_deref() == Some("budget_exhausted") => "budget_exhausted".into(),
        Ok(()) => "complete".into(),
        Err(e) => {
            ledger.error = Some(e.to_string());
            "failed".into()
        }
    };
    if let Err(CliError::Core(hierassim::Error::EsmdaAborted { forward_runs, .. })) = &result {
        ledger.assimilation_runs = Some(*forward_runs);
    }
    write_json(&out.join(LEDGER_FILE), &ledger)?;
    write_manifest(&out)?;
    result?;
    if ledger.status == "budget_exhausted" {
        return Err(CliError::BudgetExhausted {
            runs: ledger.simulate_calls,
            out,
        });
    }
    Ok(ledger)
}

fn active_columns(prior: &HyperPrior, hypers: &[&HyperParams]) -> Vec<Vec<f64>> {
    prior
        .active_params()
        .iter()
        .map(|&p| hypers.iter().map(|h| h.get(p)).collect())
        .collect()
}

fn write_snapshots(ctx: &RunContext, snapshots: Vec<Snapshot>) -> CliResult<()> {
    let file = SnapshotFile {
        parameters: ctx.problem.prior.active_params(),
        snapshots,
    };
    write_json(&ctx.out.join(SNAPSHOT_FILE), &file)
}

fn run_rs(ctx: &RunContext, ledger: &mut Ledger) -> CliResult<()> {
    let nm = ctx.cfg.noise_model()?;
    let d = &ctx.truth.observed;
    let rs = ctx.cfg.rs.config();
    let o = rejection_sampling(&ctx.problem.prior, &ctx.problem.sim, d, &nm.variances(d), &rs, ctx.seed)?;
    write_csv(
        &ctx.out.join(POSTERIOR_FILE),
        &with_params(&["sample"], &["log_likelihood", "run", "seed"]),
        o.samples.iter().enumerate().map(|(i, s)| {
            let mut row = vec![i.to_string()];
            row.extend(hyper_row(&s.hyper));
            row.extend([fmt(s.log_likelihood), s.run.to_string(), s.seed.to_string()]);
            row
        }),
    )?;
    let mut budgets: Vec<u64> = ctx.cfg.rs.snapshots.iter().copied().filter(|&b| b < rs.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    budgets.push(rs.budget);
    let snapshots = budgets
        .into_iter()
        .filter_map(|b| {
            let hypers: Vec<&HyperParams> = o.prefix(b).iter().map(|s| &s.hyper).collect();
            (!hypers.is_empty()).then(|| Snapshot {
                runs: b,
                values: active_columns(&ctx.problem.prior, &hypers),
                weights: None,
            })
        })
        .collect();
    write_snapshots(ctx, snapshots)?;
    ledger.pilot_runs = Some(o.pilot_runs);
    ledger.accepted = Some(o.samples.len());
    ledger.bound_violations = Some(o.bound_violations);
    ledger.assimilation_runs = Some(o.forward_runs);
    Ok(())
}

fn run_smc(ctx: &RunContext, ledger: &mut Ledger) -> CliResult<SmcOutcome> {
    let nm = ctx.cfg.noise_model()?;
    let o = smc_abc(&ctx.problem.prior, &ctx.problem.sim, &ctx.truth.observed, &nm, &ctx.cfg.smc, ctx.seed)?;
    write_csv(
        &ctx.out.join(POSTERIOR_FILE),
        &with_params(&["iteration", "particle"], &["weight", "distance", "seed"]),
        o.populations.iter().flat_map(|pop| {
            pop.particles.iter().enumerate().map(move |(k, p)| {
                let mut row = vec![pop.iteration.to_string(), k.to_string()];
                row.extend(hyper_row(&p.hyper));
                row.extend([fmt(p.weight), fmt(p.distance), p.seed.to_string()]);
                row
            })
        }),
    )?;
    write_csv(
        &ctx.out.join("populations.csv"),
        &["iteration", "epsilon", "acceptance_rate", "runs", "cumulative_runs"],
        o.populations.iter().map(|p| {
            vec![
                p.iteration.to_string(),
                fmt(p.epsilon),
                fmt(p.acceptance_rate),
                p.runs.to_string(),
                p.cumulative_runs.to_string(),
            ]
        }),
    )?;
    let snapshots = o
        .populations
        .iter()
        .map(|pop| Snapshot {
            runs: pop.cumulative_runs,
            values: active_columns(&ctx.problem.prior, &pop.particles.iter().map(|p| &p.hyper).collect::<Vec<_>>()),
            weights: Some(pop.weights()),
        })
        .collect();
    write_snapshots(ctx, snapshots)?;
    ledger.termination = Some(
        match o.termination {
            Termination::AcceptanceRate => "acceptance_rate",
            Termination::MaxIterations => "max_iterations",
            Termination::BudgetExhausted => "budget_exhausted",
        }
        .into(),
    );
    ledger.iterations = Some(o.populations.len());
    ledger.smc_runs = Some(o.forward_runs);
    ledger.assimilation_runs = Some(o.forward_runs);
    Ok(o)
}

fn write_predictions(ctx: &RunContext, members: Vec<Vec<f64>>) -> CliResult<()> {
    let d = &ctx.truth.observed;
    write_json(
        &ctx.out.join(PREDICTION_FILE),
        &PredictionFile {
            channels: d.channels.clone(),
            times: d.times.clone(),
            observed: d.values.clone(),
            members,
        },
    )
}

fn write_field_stats(ctx: &RunContext, stats: &FieldStats) -> CliResult<()> {
    let grid = ctx.problem.generator().grid();
    save_field(&ctx.out.join(FIELD_MEAN_FILE), grid, &stats.mean)?;
    save_field(&ctx.out.join(FIELD_VARIANCE_FILE), grid, &stats.variance)?;
    save_field(&ctx.out.join(FIELD_REDUCTION_FILE), grid, &stats.variance_reduction)
}

/// One field file per member plus a manifest, in its own directory.
fn write_ensemble(ctx: &RunContext, name: &str, members: &[Vec<f64>]) -> CliResult<()> {
    let grid = ctx.problem.generator().grid();
    let dir = ctx.out.join(name);
    ensure_dir(&dir)?;
    for (i, m) in members.iter().enumerate() {
        save_field(&dir.join(format!("member_{i:04}.bin")), grid, &m[..grid.n_cells()])?;
    }
    write_manifest(&dir).map(|_| ())
}

fn write_misfit(ctx: &RunContext, rows: impl IntoIterator<Item = Vec<String>>, lead: &'static str) -> CliResult<()> {
    write_csv(&ctx.out.join("misfit.csv"), &[lead, "step", "mean_misfit"], rows)
}

fn predict(
    problem: &Problem,
    members: &[Vec<f64>],
    hyper: impl Fn(&[f64]) -> (Vec<f64>, HyperParams) + Sync,
) -> CliResult<Vec<Vec<f64>>> {
    let grid = *problem.generator().grid();
    members
        .par_iter()
        .map(|m| {
            let (log_k, h) = hyper(m);
            Ok(problem.sim.run_field(&FieldRealization { grid, log_k, hyper: h })?.values)
        })
        .collect()
}

fn run_esmda(ctx: &RunContext, ledger: &mut Ledger) -> CliResult<()> {
    let nm = ctx.cfg.noise_model()?;
    let d = &ctx.truth.observed;
    let block = &ctx.cfg.esmda;
    let hyper = block
        .hyper
        .as_ref()
        .map(|t| t.resolve(&ctx.problem.prior))
        .unwrap_or(*ctx.problem.prior.fixed());
    hyper.validate()?;
    let generator = ctx.problem.generator();
    let members: Vec<Vec<f64>> = (0..block.n_e)
        .into_par_iter()
        .map(|i| Ok(generator.generate(&hyper, derive_seed(ctx.seed, &[TAG_ESMDA, i as u64, TAG_FIELD]))?.log_k))
        .collect::<CliResult<_>>()?;
    let initial = EnsembleState::new(members, Some(hyper))?;
    let ecfg = ctx.cfg.esmda_config(block.n_e, &block.alphas, nm.variances(d));
    let grid = *generator.grid();
    let fwd = |state: &[f64]| -> hierassim::Result<Vec<f64>> {
        let m = FieldRealization {
            grid,
            log_k: state.to_vec(),
            hyper,
        };
        Ok(ctx.problem.sim.run_field(&m)?.values)
    };
    let o = esmda_run(initial.clone(), &fwd, &d.values, &ecfg, derive_seed(ctx.seed, &[TAG_ESMDA]))?;
    ledger.esmda_runs = Some(o.forward_runs);
    ledger.assimilation_runs = Some(o.forward_runs);
    write_csv(
        &ctx.out.join(POSTERIOR_FILE),
        &["member", "mean_logk", "std_logk"],
        o.ensemble.members.iter().enumerate().map(|(i, m)| {
            let f = FieldRealization {
                grid,
                log_k: m.clone(),
                hyper,
            };
            vec![i.to_string(), fmt(f.mean()), fmt(f.std())]
        }),
    )?;
    write_misfit(
        ctx,
        o.mean_misfit.iter().enumerate().map(|(j, v)| vec!["0".into(), j.to_string(), fmt(*v)]),
        "run",
    )?;
    write_ensemble(ctx, "ensemble", &o.ensemble.members)?;
    write_field_stats(ctx, &field_posterior_stats(&[&o.ensemble.members], &initial.members)?)?;
    let predicted = predict(ctx.problem, &o.ensemble.members, |m| (m.to_vec(), hyper))?;
    ledger.prediction_runs = Some(predicted.len() as u64);
    write_predictions(ctx, predicted)
}

fn prior_fields(ctx: &RunContext) -> CliResult<Vec<Vec<f64>>> {
    let generator = ctx.problem.generator();
    (0..ctx.cfg.diagnostics.prior_members as u64)
        .into_par_iter()
        .map(|i| {
            let h = sample_prior(&ctx.problem.prior, &mut stream(ctx.seed, &[TAG_PRIOR, i]));
            Ok(generator.generate(&h, derive_seed(ctx.seed, &[TAG_PRIOR, i, TAG_FIELD]))?.log_k)
        })
        .collect()
}

fn run_hierarchical(ctx: &RunContext, ledger: &mut Ledger) -> CliResult<()> {
    let smc = run_smc(ctx, ledger)?;
    let nm = ctx.cfg.noise_model()?;
    let d = &ctx.truth.observed;
    let p = ctx.problem;
    let o = hierarchical_run(
        &smc,
        &p.prior,
        &p.sim,
        p.generator(),
        d,
        &nm.variances(d),
        &ctx.cfg.hierarchical,
        ctx.seed,
    )?;
    ledger.esmda_runs = Some(o.esmda_runs);
    ledger.assimilation_runs = Some(o.total_runs());
    ledger.prediction_runs = Some(o.prediction_runs);
    let last = smc.last();
    write_csv(
        &ctx.out.join("representatives.csv"),
        &with_params(&["iteration", "particle"], &["weight", "distance", "seed", "representative", "forward_runs"]),
        o.representatives.iter().enumerate().map(|(r, rep)| {
            let p = &last.particles[rep.particle];
            let mut row = vec![last.iteration.to_string(), rep.particle.to_string()];
            row.extend(hyper_row(&rep.hyper));
            row.extend([
                fmt(p.weight),
                fmt(p.distance),
                p.seed.to_string(),
                r.to_string(),
                rep.forward_runs.to_string(),
            ]);
            row
        }),
    )?;
    write_misfit(
        ctx,
        o.representatives.iter().enumerate().flat_map(|(r, rep)| {
            rep.mean_misfit
                .iter()
                .enumerate()
                .map(move |(j, v)| vec![r.to_string(), j.to_string(), fmt(*v)])
        }),
        "representative",
    )?;
    for (r, rep) in o.representatives.iter().enumerate() {
        write_ensemble(ctx, &format!("ensemble_{r:02}"), &rep.ensemble.members)?;
    }
    let groups: Vec<&[Vec<f64>]> = o.representatives.iter().map(|r| r.ensemble.members.as_slice()).collect();
    write_field_stats(ctx, &field_posterior_stats(&groups, &prior_fields(ctx)?)?)?;
    if ctx.cfg.hierarchical.predict {
        write_predictions(ctx, o.predictions().map(|v| v.values.clone()).collect())?;
    }
    Ok(())
}

fn run_modified(ctx: &RunContext, ledger: &mut Ledger) -> CliResult<()> {
    let nm = ctx.cfg.noise_model()?;
    let d = &ctx.truth.observed;
    let block = &ctx.cfg.modified_esmda;
    let ecfg = ctx.cfg.esmda_config(block.n_e, &block.alphas, nm.variances(d));
    let p = ctx.problem;
    let o = modified_esmda_run(&p.prior, &p.sim, p.generator(), d, &ecfg, ctx.seed)?;
    ledger.esmda_runs = Some(o.forward_runs);
    ledger.assimilation_runs = Some(o.forward_runs);
    write_csv(
        &ctx.out.join(POSTERIOR_FILE),
        &with_params(&["member"], &[]),
        o.posterior.iter().enumerate().map(|(i, h)| {
            let mut row = vec![i.to_string()];
            row.extend(hyper_row(h));
            row
        }),
    )?;
    write_misfit(
        ctx,
        o.mean_misfit.iter().enumerate().map(|(j, v)| vec!["0".into(), j.to_string(), fmt(*v)]),
        "run",
    )?;
    write_ensemble(ctx, "ensemble", &o.ensemble.members)?;
    let hypers: Vec<&HyperParams> = o.posterior.iter().collect();
    write_snapshots(
        ctx,
        vec![Snapshot {
            runs: o.forward_runs,
            values: active_columns(&p.prior, &hypers),
            weights: None,
        }],
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsRow {
    pub run: String,
    pub parameter: Param,
    pub run_count: u64,
    pub js: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PercentileRow {
    pub run: String,
    pub channel: String,
    pub time: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub observed: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagReport {
    pub js: Vec<JsRow>,
    pub percentiles: Vec<PercentileRow>,
}

fn label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn need_dir(dir: &Path, what: &str) -> CliResult<()> {
    if dir.join(LEDGER_FILE).is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a run directory", dir.display())))
    }
}

fn percentile_rows(name: &str, pred: &PredictionFile) -> CliResult<Vec<PercentileRow>> {
    let mut rows = Vec::new();
    let mut channels = pred.channels.clone();
    channels.dedup();
    for ch in channels {
        let idx: Vec<usize> = (0..pred.channels.len()).filter(|&i| pred.channels[i] == ch).collect();
        let members: Vec<Vec<f64>> = pred.members.iter().map(|m| idx.iter().map(|&i| m[i]).collect()).collect();
        let pct = series_percentiles(&members, &[0.1, 0.5, 0.9])?;
        for (t, &i) in idx.iter().enumerate() {
            rows.push(PercentileRow {
                run: name.into(),
                channel: ch.name().into(),
                time: pred.times[i],
                p10: pct[0][t],
                p50: pct[1][t],
                p90: pct[2][t],
                observed: pred.observed[i],
            });
        }
    }
    Ok(rows)
}

/// Compares run directories against a reference run.
pub fn diag(args: &DiagArgs) -> CliResult<DiagReport> {
    need_dir(&args.reference, "reference")?;
    let ref_ledger: Ledger = read_json(&args.reference.join(LEDGER_FILE))?;
    let ref_cfg: ExperimentConfig = read_json(&args.reference.join(CONFIG_FILE))?;
    let snap_path = args.reference.join(SNAPSHOT_FILE);
    if !snap_path.is_file() {
        return Err(CliError::Usage(format!(
            "reference {} has no hyperparameter samples",
            args.reference.display()
        )));
    }
    let reference: SnapshotFile = read_json(&snap_path)?;
    let ref_last = reference
        .snapshots
        .last()
        .ok_or_else(|| CliError::Usage("reference has no accepted samples".into()))?;
    let prior = ref_cfg.prior.build()?;
    let edges: Vec<Vec<f64>> = reference
        .parameters
        .iter()
        .map(|&p| {
            let b = prior.bounds(p);
            uniform_edges(b.lower, b.upper, ref_cfg.diagnostics.bins)
        })
        .collect::<hierassim::Result<_>>()?;

    ensure_dir(&args.out)?;
    let mut report = DiagReport::default();
    let mut field_rows = Vec::new();
    for dir in &args.runs {
        need_dir(dir, "run")?;
        let ledger: Ledger = read_json(&dir.join(LEDGER_FILE))?;
        if ledger.truth_sha256 != ref_ledger.truth_sha256 {
            return Err(CliError::TruthMismatch(format!(
                "{} and the reference {} were run against different truths",
                dir.display(),
                args.reference.display()
            )));
        }
        let name = label(dir);
        let snaps = dir.join(SNAPSHOT_FILE);
        if snaps.is_file() {
            let s: SnapshotFile = read_json(&snaps)?;
            if s.parameters != reference.parameters {
                return Err(CliError::Usage(format!("{} infers different parameters", dir.display())));
            }
            for (runs, js) in convergence_curve(&s.snapshots, ref_last, &edges)? {
                for (&parameter, js) in reference.parameters.iter().zip(js) {
                    report.js.push(JsRow {
                        run: name.clone(),
                        parameter,
                        run_count: runs,
                        js,
                    });
                }
            }
        }
        let preds = dir.join(PREDICTION_FILE);
        if preds.is_file() {
            report.percentiles.extend(percentile_rows(&name, &read_json(&preds)?)?);
        }
        let mean = dir.join(FIELD_MEAN_FILE);
        if mean.is_file() {
            let (grid, m) = load_field(&mean)?;
            let (_, v) = load_field(&dir.join(FIELD_VARIANCE_FILE))?;
            let (_, r) = load_field(&dir.join(FIELD_REDUCTION_FILE))?;
            save_field(&args.out.join(format!("{name}_{FIELD_MEAN_FILE}")), &grid, &m)?;
            save_field(&args.out.join(format!("{name}_{FIELD_VARIANCE_FILE}")), &grid, &v)?;
            save_field(&args.out.join(format!("{name}_{FIELD_REDUCTION_FILE}")), &grid, &r)?;
            for c in 0..grid.n_cells() {
                let (i, j, k) = grid.coords(c);
                field_rows.push(vec![
                    name.clone(),
                    i.to_string(),
                    j.to_string(),
                    k.to_string(),
                    fmt(m[c]),
                    fmt(v[c]),
                    fmt(r[c]),
                ]);
            }
        }
    }
    write_csv(
        &args.out.join("js.csv"),
        &["run", "parameter", "run_count", "js"],
        report
            .js
            .iter()
            .map(|r| vec![r.run.clone(), r.parameter.name().into(), r.run_count.to_string(), fmt(r.js)]),
    )?;
    write_csv(
        &args.out.join("percentiles.csv"),
        &["run", "channel", "time", "p10", "p50", "p90", "observed"],
        report.percentiles.iter().map(|r| {
            vec![
                r.run.clone(),
                r.channel.clone(),
                fmt(r.time),
                fmt(r.p10),
                fmt(r.p50),
                fmt(r.p90),
                fmt(r.observed),
            ]
        }),
    )?;
    write_csv(
        &args.out.join("field_stats.csv"),
        &["run", "i", "j", "k", "mean", "variance", "variance_reduction"],
        field_rows,
    )?;
    write_manifest(&args.out)?;
    Ok(report)
}

/// Observed data of a truth bundle.
pub fn observed(truth_dir: &Path) -> CliResult<DataVector> {
    Ok(load_truth(truth_dir)?.0.observed)
}
