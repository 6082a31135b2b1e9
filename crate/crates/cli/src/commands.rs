//! The `simulate`, `fit`, `predict` and `evaluate` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mscos::evaluate::{gelman_rubin, rmse, waic, waic_columns, MetricReport, RhatEntry, RmseEntry, WaicEntry};
use mscos::model::{Arity, Dataset, ModelSpec};
use mscos::predict::{cos_predict, predictive_ll_matrix, PredictOptions, PredictQuantity, Target};
use mscos::sampler::{run_chains, McmcConfig, PosteriorDraws};
use mscos::simulate::{build_sim_supports, generate_dataset, rect_overlaps, run_scenario, ScenarioConfig, TruthParams};
use mscos::supports::{build_partition_matrix, ArealSupport, PartitionMatrix};
use serde::{Deserialize, Serialize};

use crate::config::{required, Metric, ModelConfig, RunConfig, SupportPaths, TargetPaths, VariablePaths, SCHEMA_VERSION};
use crate::io::{self, ChainMeta};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const FIT_MANIFEST: &str = "fit_manifest.json";

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn usage(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("config.{field}: {e}"))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", out.display())))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    io::write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct RunTiming {
    truth: String,
    dataset: usize,
    fit: String,
    seconds: f64,
}

#[derive(Serialize)]
struct SimulateManifest {
    schema_version: u32,
    command: &'static str,
    scenario: ScenarioConfig,
    failed_runs: usize,
    created_unix: u64,
    total_seconds: f64,
    runs: Vec<RunTiming>,
}

pub fn simulate(cfg: &RunConfig, ov: &Overrides) -> Result<()> {
    let mut sc = cfg.scenario.clone().unwrap_or_default();
    if let Some(seed) = ov.seed {
        sc.seed = seed;
    }
    sc.validate().map_err(|e| usage("scenario", e))?;
    create_out(&ov.out)?;
    let start = Instant::now();
    let result = run_scenario(&sc)?;
    let failed = result.runs.iter().filter(|r| r.outcome.is_err()).count();
    if failed == result.runs.len() {
        return Err(CliError::Numerical(format!("all {failed} chain runs failed")));
    }

    let mut runs = String::from(
        "truth,dataset,fit,status,rmse_partition_y1,rmse_partition_y2,rmse_original_y1,rmse_original_y2,message\n",
    );
    for r in &result.runs {
        match &r.outcome {
            Ok(m) => runs.push_str(&format!(
                "{},{},{},ok,{},{},{},{},\n",
                r.truth, r.dataset, r.fit, m.rmse_partition[0], m.rmse_partition[1], m.rmse_original[0], m.rmse_original[1]
            )),
            Err(msg) => runs.push_str(&format!(
                "{},{},{},failed,,,,,\"{}\"\n",
                r.truth,
                r.dataset,
                r.fit,
                msg.replace('"', "\"\"")
            )),
        }
    }
    io::write_text(&ov.out.join("runs.csv"), &runs)?;

    let mut table = String::from("truth,fit,variable,scale,mean,sd,completed\n");
    for c in &result.table {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.truth,
            c.fit,
            io::variable_name(c.variable),
            c.scale,
            c.mean,
            c.sd,
            c.completed
        ));
    }
    io::write_text(&ov.out.join("table.csv"), &table)?;

    if cfg.write_datasets {
        write_datasets(&sc, &ov.out)?;
    }
    let manifest = SimulateManifest {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        scenario: sc,
        failed_runs: failed,
        created_unix: unix_time(),
        total_seconds: start.elapsed().as_secs_f64(),
        runs: result
            .runs
            .iter()
            .map(|r| RunTiming { truth: r.truth.to_string(), dataset: r.dataset, fit: r.fit.to_string(), seconds: r.seconds })
            .collect(),
    };
    write_json(&ov.out.join("manifest.json"), &manifest)
}

/// Writes the simulation supports once, then one directory per generated
/// dataset holding data, partition-scale truth and a fit config.
fn write_datasets(sc: &ScenarioConfig, out: &Path) -> Result<()> {
    let sims = build_sim_supports()?;
    let sup = out.join("supports");
    create_out(&sup)?;
    io::write_support(&sup.join("d1.json"), &sims.d1)?;
    io::write_support(&sup.join("d2.json"), &sims.d2)?;
    io::write_support(&sup.join("partition.json"), &sims.da)?;
    let o1 = rect_overlaps(&sims.d1_rects, sims.d1.ids(), &sims.da_rects, sims.da.ids())?;
    let o2 = rect_overlaps(&sims.d2_rects, sims.d2.ids(), &sims.da_rects, sims.da.ids())?;
    io::write_overlaps(&sup.join("overlap1.csv"), o1.rows())?;
    io::write_overlaps(&sup.join("overlap2.csv"), o2.rows())?;

    for (ti, &truth) in sc.truths.iter().enumerate() {
        let spec = sims.model_spec(truth, Arity::Bivariate, sc.hyper, sc.r, sc.knot_seed)?;
        for d in 0..sc.n_datasets {
            let sim = generate_dataset(&spec, &TruthParams::for_kind(truth), sc.dataset_seed(ti, d))?;
            let dir = out.join("datasets").join(format!("{truth}_{d:03}"));
            create_out(&dir)?;
            io::write_values(&dir.join("y1.csv"), sims.d1.ids(), &sim.data.y1)?;
            io::write_values(&dir.join("y2.csv"), sims.d2.ids(), &sim.data.y2)?;
            for v in 0..2 {
                let name = io::variable_name(v);
                let wrap = |x: &[f64]| x.iter().map(|&y| Some(y)).collect::<Vec<_>>();
                io::write_values(&dir.join(format!("truth_{name}.csv")), sims.da.ids(), &wrap(&sim.y_a[v]))?;
                io::write_values(&dir.join(format!("mean_{name}.csv")), sims.da.ids(), &wrap(&sim.mean_a[v]))?;
            }
            let mut fit = RunConfig::minimal();
            fit.model = Some(ModelConfig {
                kind: truth,
                arity: Arity::Bivariate,
                r: sc.r,
                knot_seed: sc.knot_seed,
                hyperparams: sc.hyper,
            });
            let s = |f: &str| Some(PathBuf::from("../../supports").join(f));
            fit.supports = Some(SupportPaths {
                partition: PathBuf::from("../../supports/partition.json"),
                d1: s("d1.json"),
                d2: s("d2.json"),
                overlap1: s("overlap1.csv"),
                overlap2: s("overlap2.csv"),
            });
            fit.data = Some(VariablePaths { y1: Some("y1.csv".into()), y2: Some("y2.csv".into()) });
            fit.truth = Some(VariablePaths { y1: Some("truth_y1.csv".into()), y2: Some("truth_y2.csv".into()) });
            fit.mcmc = Some(sc.mcmc.clone());
            fit.draws_dir = Some("fit".into());
            fit.predictions = Some("predict/predictions.csv".into());
            write_json(&dir.join("config.json"), &fit)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- loading

/// A model built from files, with its supports.
pub struct Problem {
    pub spec: ModelSpec,
    pub partition: ArealSupport,
    pub observed: [Option<ArealSupport>; 2],
}

fn read_partition(coarse: &ArealSupport, fine: &ArealSupport, overlap: &Path, field: &str) -> Result<PartitionMatrix> {
    let table = io::read_overlaps(overlap)?;
    build_partition_matrix(coarse, fine, &table).map_err(|e| usage(field, format!("{}: {e}", overlap.display())))
}

pub fn load_problem(model: &ModelConfig, supports: &SupportPaths) -> Result<Problem> {
    let partition = io::read_support(&supports.partition)?;
    let mut observed = [None, None];
    let mut pms = [None, None];
    let paths = [(&supports.d1, &supports.overlap1, "d1", "overlap1"), (&supports.d2, &supports.overlap2, "d2", "overlap2")];
    for (v, (sup, ov, sname, oname)) in paths.into_iter().enumerate() {
        if !model.arity.is_active(v) {
            continue;
        }
        let sup = io::read_support(required(sup, &format!("supports.{sname}"))?)?;
        let p = read_partition(&sup, &partition, required(ov, &format!("supports.{oname}"))?, &format!("supports.{oname}"))?;
        pms[v] = Some(p);
        observed[v] = Some(sup);
    }
    let [p1, p2] = pms;
    let spec = ModelSpec::build(model.kind, model.arity, model.hyperparams, p1, p2, &partition, model.r, model.knot_seed)
        .map_err(|e| match e {
            mscos::Error::Numerical(_) => CliError::from(e),
            other => usage("model", other),
        })?;
    Ok(Problem { spec, partition, observed })
}

pub fn load_data(problem: &Problem, data: &VariablePaths) -> Result<Dataset> {
    let mut vals = [Vec::new(), Vec::new()];
    for (v, path) in [&data.y1, &data.y2].into_iter().enumerate() {
        if let Some(sup) = &problem.observed[v] {
            let name = io::variable_name(v);
            vals[v] = io::read_values(required(path, &format!("data.{name}"))?, sup.ids())?;
        }
    }
    let [y1, y2] = vals;
    let data = Dataset::new(y1, y2);
    problem.spec.check_dataset(&data).map_err(|e| usage("data", e))?;
    Ok(data)
}

// ---------------------------------------------------------------- fit

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub supports: SupportPaths,
    pub data: VariablePaths,
    pub mcmc: McmcConfig,
    pub chains: Vec<ChainMeta>,
    pub gelman_rubin: Vec<RhatEntry>,
    pub created_unix: u64,
    pub seconds: f64,
}

/// Application default: 10,000 iterations with the first 2,000 discarded.
pub fn fit_default_mcmc() -> McmcConfig {
    McmcConfig { n_iter: 10_000, burn_in: 2_000, ..McmcConfig::default() }
}

fn rhat_entries(draws: &[PosteriorDraws]) -> Vec<RhatEntry> {
    let mut out = Vec::new();
    if draws.len() < 2 {
        return out;
    }
    let mut report = MetricReport::default();
    for (k, p) in draws[0].params.iter().enumerate() {
        let cols: Vec<&[f64]> = draws.iter().map(|d| d.scalars[k].as_slice()).collect();
        match gelman_rubin(&cols) {
            Ok(gr) => report.push_rhat(p.name(), gr),
            Err(e) => log::warn!("no R-hat for {}: {e}", p.name()),
        }
    }
    out.append(&mut report.gelman_rubin);
    out
}

pub fn fit(cfg: &RunConfig, ov: &Overrides) -> Result<()> {
    let model = required(&cfg.model, "model")?;
    let supports = required(&cfg.supports, "supports")?;
    let data_paths = required(&cfg.data, "data")?;
    let problem = load_problem(model, supports)?;
    let data = load_data(&problem, data_paths)?;
    let mut mcmc = cfg.mcmc.clone().unwrap_or_else(fit_default_mcmc);
    if let Some(seed) = ov.seed {
        mcmc.seed = seed;
    }
    mcmc.validate().map_err(|e| usage("mcmc", e))?;
    if cfg.chains == 0 {
        return Err(usage("chains", "must be at least 1"));
    }
    create_out(&ov.out)?;
    let start = Instant::now();
    let draws = run_chains(&problem.spec, &data, &mcmc, cfg.chains)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut metas = Vec::new();
    for d in &draws {
        let file = format!("draws_chain{}.csv", d.chain);
        io::write_draws(&ov.out.join(&file), d)?;
        let named = |v: &[(mscos::model::Param, f64)]| -> BTreeMap<String, f64> {
            v.iter().map(|(p, x)| (p.name().to_string(), *x)).collect()
        };
        metas.push(ChainMeta {
            chain: d.chain,
            seed: d.seed,
            file,
            n_draws: d.len(),
            acceptance: named(&d.acceptance),
            final_steps: named(&d.final_steps),
        });
    }
    let gr = rhat_entries(&draws);

    let mut diag = String::from("param,rhat,degenerate");
    for m in &metas {
        diag.push_str(&format!(",acceptance_chain{}", m.chain));
    }
    diag.push('\n');
    for p in &draws[0].params {
        let entry = gr.iter().find(|e| e.param == p.name());
        let rhat = entry.map_or(String::new(), |e| e.rhat.map_or("inf".into(), |r| r.to_string()));
        let degenerate = entry.map_or(String::new(), |e| e.degenerate.to_string());
        diag.push_str(&format!("{},{rhat},{degenerate}", p.name()));
        for m in &metas {
            match m.acceptance.get(p.name()) {
                Some(a) => diag.push_str(&format!(",{a}")),
                None => diag.push(','),
            }
        }
        diag.push('\n');
    }
    io::write_text(&ov.out.join("diagnostics.csv"), &diag)?;

    let abs = |p: &Option<PathBuf>| p.as_deref().map(absolute);
    let manifest = FitManifest {
        schema_version: SCHEMA_VERSION,
        model: model.clone(),
        supports: SupportPaths {
            partition: absolute(&supports.partition),
            d1: abs(&supports.d1),
            d2: abs(&supports.d2),
            overlap1: abs(&supports.overlap1),
            overlap2: abs(&supports.overlap2),
        },
        data: VariablePaths { y1: abs(&data_paths.y1), y2: abs(&data_paths.y2) },
        mcmc,
        chains: metas,
        gelman_rubin: gr,
        created_unix: unix_time(),
        seconds,
    };
    write_json(&ov.out.join(FIT_MANIFEST), &manifest)
}

/// A stored fit: its manifest, rebuilt model and draws.
pub struct StoredFit {
    pub manifest: FitManifest,
    pub problem: Problem,
    pub draws: Vec<PosteriorDraws>,
}

pub fn load_fit(cfg: &RunConfig) -> Result<StoredFit> {
    let dir = required(&cfg.draws_dir, "draws_dir")?;
    let path = dir.join(FIT_MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("config.draws_dir: cannot read {}: {e}", path.display())))?;
    let manifest: FitManifest = io::parse_json(&text, &path)?;
    if let Some(m) = &cfg.model {
        if m != &manifest.model {
            return Err(usage("model", format!("does not match the model of the fit in {}", dir.display())));
        }
    }
    let problem = load_problem(&manifest.model, &manifest.supports)?;
    let draws = manifest
        .chains
        .iter()
        .map(|meta| io::read_draws(&dir.join(&meta.file), &problem.spec, meta, &manifest.mcmc))
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredFit { manifest, problem, draws })
}

// ---------------------------------------------------------------- predict

fn read_target(problem: &Problem, t: &TargetPaths) -> Result<Target> {
    let sup = io::read_support(&t.support)?;
    Ok(Target::Matrix(read_partition(&sup, &problem.partition, &t.overlap, "target.overlap")?))
}

pub fn predict(cfg: &RunConfig, ov: &Overrides) -> Result<()> {
    let fit = load_fit(cfg)?;
    let target = match &cfg.target {
        Some(t) => read_target(&fit.problem, t)?,
        None => Target::Partition,
    };
    let opts = PredictOptions {
        seed: ov.seed.unwrap_or(cfg.predict_seed),
        quantity: if cfg.latent_mean { PredictQuantity::LatentMean } else { PredictQuantity::Predictive },
        keep_draws: false,
    };
    let result = cos_predict(&fit.problem.spec, &fit.draws, &target, &opts)?;
    create_out(&ov.out)?;
    io::write_predictions(&ov.out.join("predictions.csv"), &result)
}

// ---------------------------------------------------------------- evaluate

fn rmse_entries(cfg: &RunConfig) -> Result<Vec<RmseEntry>> {
    let truth = cfg
        .truth
        .as_ref()
        .ok_or_else(|| usage("truth", "RMSE was requested but no truth file is configured"))?;
    if truth.y1.is_none() && truth.y2.is_none() {
        return Err(usage("truth", "RMSE was requested but no truth file is configured"));
    }
    let rows = io::read_predictions(required(&cfg.predictions, "predictions")?)?;
    let mut out = Vec::new();
    for (v, path) in [&truth.y1, &truth.y2].into_iter().enumerate() {
        let Some(path) = path else { continue };
        let name = io::variable_name(v);
        let (ids, means): (Vec<String>, Vec<f64>) =
            rows.iter().filter(|r| r.variable == name).map(|r| (r.unit_id.clone(), r.mean)).unzip();
        if ids.is_empty() {
            return Err(usage(&format!("truth.{name}"), "the predictions hold no rows for this variable"));
        }
        let t: Vec<f64> = io::read_values(path, &ids)?.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect();
        let value = rmse(&t, &means).map_err(|e| usage(&format!("truth.{name}"), e))?;
        out.push(RmseEntry { variable: name.into(), scale: cfg.truth_scale.clone(), value });
    }
    Ok(out)
}

fn waic_entries(fit: &StoredFit, data: &Dataset) -> Result<Vec<WaicEntry>> {
    let spec = &fit.problem.spec;
    let ll = predictive_ll_matrix(spec, &fit.draws, data)?;
    let obs = spec.observations(data);
    let entry = |scope: &str, w: mscos::evaluate::Waic| WaicEntry { scope: scope.into(), waic: w.waic, lppd: w.lppd, p_waic: w.p_waic };
    let mut out = Vec::new();
    for v in spec.active_vars() {
        let cols: Vec<usize> = obs.iter().enumerate().filter(|(_, o)| o.0 == v).map(|(j, _)| j).collect();
        out.push(entry(io::variable_name(v), waic_columns(&ll, &cols)?));
    }
    if spec.active_vars().len() == 2 {
        out.push(entry("combined", waic(&ll)?));
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, ov: &Overrides) -> Result<()> {
    let metrics = match &cfg.metrics {
        Some(m) => m.clone(),
        None => {
            let mut m = Vec::new();
            if cfg.truth.is_some() {
                m.push(Metric::Rmse);
            }
            if cfg.draws_dir.is_some() {
                m.extend([Metric::Waic, Metric::GelmanRubin]);
            }
            m
        }
    };
    if metrics.is_empty() {
        return Err(usage("metrics", "nothing to evaluate; configure truth and predictions, or draws_dir"));
    }
    let mut report = MetricReport { config: serde_json::to_value(cfg).expect("serializable"), ..Default::default() };
    if metrics.contains(&Metric::Rmse) {
        report.rmse = rmse_entries(cfg)?;
    }
    if metrics.contains(&Metric::Waic) || metrics.contains(&Metric::GelmanRubin) {
        let fit = load_fit(cfg)?;
        if metrics.contains(&Metric::Waic) {
            let data = load_data(&fit.problem, &fit.manifest.data)?;
            report.waic = waic_entries(&fit, &data)?;
        }
        if metrics.contains(&Metric::GelmanRubin) {
            if fit.draws.len() < 2 {
                log::warn!("Gelman-Rubin needs at least 2 chains; skipped");
            }
            report.gelman_rubin = rhat_entries(&fit.draws);
        }
    }
    create_out(&ov.out)?;
    io::write_text(&ov.out.join("metrics.json"), &(report.to_json()? + "\n"))?;
    io::write_text(&ov.out.join("metrics.csv"), &report.to_csv()?)
}
