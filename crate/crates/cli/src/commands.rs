use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use latsurr::archspace::{
    format_count, make_bins, sample_balanced, sample_random, space_size, ArchConfig, SupernetSpec,
};
use latsurr::dataset::{self, LatencyDataset};
use latsurr::encoding::{encoding_length, EncodingScheme};
use latsurr::lut::{build_lut, fit_bias, lut_predict_batch, save_lut, BiasCorrection};
use latsurr::measurement::{ExternalBackend, MeasurementBackend, OracleBackend};
use latsurr::par::Execution;
use latsurr::pipeline::{run_esm, EsmHooks, IterationRecord, Measurer, SamplingStrategy};
use latsurr::predictor::{
    self, evaluate, evaluate_predictions, load_model, save_model, EvalReport, MlpModel, ScatterPoint, TrainConfig,
};
use latsurr::seed;

use crate::config::{load_spec_arg, BackendKind, Config};

/// How a command that completed ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    /// Accuracy target missed or loop not converged.
    NotPassed,
}

pub struct Ctx {
    pub cfg: Config,
    pub spec: SupernetSpec,
    pub out: PathBuf,
    pub command: String,
    pub exec: Execution,
    started: u64,
    artifacts: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a Config,
    seeds: &'a BTreeMap<String, u64>,
    artifacts: &'a BTreeMap<String, String>,
    started_unix: u64,
    finished_unix: u64,
}

impl Ctx {
    pub fn new(cfg: Config, spec: SupernetSpec, out: PathBuf, command: &str) -> Ctx {
        let mut seeds = BTreeMap::new();
        seeds.insert("root".to_string(), cfg.seed);
        Ctx {
            cfg,
            spec,
            out,
            command: command.into(),
            exec: Execution::default(),
            started: unix_now(),
            artifacts: BTreeMap::new(),
            seeds,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&mut self, name: &str) -> u64 {
        let s = seed::derive(self.cfg.seed, name);
        self.seeds.insert(name.into(), s);
        s
    }

    fn record(&mut self, role: &str, path: &Path) {
        self.artifacts.insert(role.into(), path.display().to_string());
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }

    /// Writes the resolved config and the run manifest.
    pub fn finish(&mut self) -> Result<()> {
        self.prepare_out()?;
        let cfg_path = self.path("config.resolved.toml");
        fs::write(&cfg_path, self.cfg.to_toml()?)?;
        self.record("config", &cfg_path.clone());
        let manifest = RunManifest {
            tool: "latsurr",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            config: &self.cfg,
            seeds: &self.seeds,
            artifacts: &self.artifacts,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    fn backend(&self) -> Result<Box<dyn MeasurementBackend>> {
        Ok(match self.cfg.backend.kind {
            BackendKind::Oracle => Box::new(OracleBackend::new(self.spec.clone(), self.cfg.oracle)?),
            BackendKind::External => {
                let Some(cmd) = &self.cfg.backend.command else {
                    bail!(
                        "external backend needs a command: set [backend] command, --backend-cmd or LATSURR_BACKEND_CMD"
                    );
                };
                Box::new(ExternalBackend::new(cmd.clone(), Duration::from_secs(self.cfg.backend.timeout_secs)))
            }
        })
    }

    fn empty_dataset(&mut self, backend_id: String) -> Result<LatencyDataset> {
        let bins = make_bins(&self.spec, self.cfg.esm.n_bins)?;
        let refs_seed = self.seed("refs");
        let refs = sample_random(&self.spec, self.cfg.esm.n_refs, refs_seed)?;
        let mut ds = LatencyDataset::new(self.spec.clone(), self.cfg.esm.scheme, bins, refs, backend_id)?;
        ds.seeds.insert("root".into(), self.cfg.seed);
        Ok(ds)
    }

    fn load_dataset(&self, path: &Path) -> Result<LatencyDataset> {
        let ds = dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        if ds.spec != self.spec {
            log::info!("dataset {} carries spec '{}'; using it", path.display(), ds.spec.name);
        }
        Ok(ds)
    }
}

pub fn cmd_space(spec_arg: Option<&str>, ctx: &Ctx, n_bins: usize) -> Result<Outcome> {
    let spec = match spec_arg {
        Some(arg) => load_spec_arg(arg)?,
        None => ctx.spec.clone(),
    };
    let size = space_size(&spec);
    println!("spec: {}", spec.name);
    for (u, unit) in spec.units.iter().enumerate() {
        let width = unit.stage_width.map(|w| format!(", width {w}")).unwrap_or_default();
        println!("  unit {u}: depths {:?}{width}", unit.depth_options);
    }
    for f in &spec.features {
        println!("  feature {} ({:?}): {:?}", f.name, f.scope, f.options);
    }
    println!("architectures: {} ({size})", format_count(&size));
    println!("total depth: {}..{}", spec.min_total_depth(), spec.max_total_depth());
    let bins = make_bins(&spec, n_bins)?;
    let ranges: Vec<String> = (0..bins.n_bins)
        .map(|i| {
            let (lo, hi) = bins.range(i);
            format!("{i}:[{lo},{hi}]")
        })
        .collect();
    println!("depth bins ({}): {}", bins.n_bins, ranges.join(" "));
    let lens: Vec<String> = EncodingScheme::ALL.iter().map(|&s| format!("{s} {}", encoding_length(&spec, s))).collect();
    println!("encoding lengths: {}", lens.join(", "));
    Ok(Outcome::Pass)
}

pub fn cmd_sample(ctx: &mut Ctx, n: usize) -> Result<Outcome> {
    let seed = ctx.seed("sample");
    let archs = match ctx.cfg.esm.strategy {
        SamplingStrategy::Random => sample_random(&ctx.spec, n, seed)?,
        SamplingStrategy::Balanced => sample_balanced(&ctx.spec, n, &make_bins(&ctx.spec, ctx.cfg.esm.n_bins)?, seed)?,
    };
    ctx.prepare_out()?;
    let path = ctx.path("archs.json");
    fs::write(&path, serde_json::to_string_pretty(&archs)?)?;
    ctx.record("archs", &path);
    println!("sampled {} architectures ({:?}) -> {}", archs.len(), ctx.cfg.esm.strategy, path.display());
    Ok(Outcome::Pass)
}

pub fn cmd_measure(ctx: &mut Ctx, archs_path: Option<PathBuf>) -> Result<Outcome> {
    let archs_path = archs_path.unwrap_or_else(|| ctx.path("archs.json"));
    let text = fs::read_to_string(&archs_path).with_context(|| format!("reading {}", archs_path.display()))?;
    let archs: Vec<ArchConfig> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", archs_path.display()))?;
    for (i, a) in archs.iter().enumerate() {
        a.validate(&ctx.spec).with_context(|| format!("arch {i} of {}", archs_path.display()))?;
    }
    let mut backend = ctx.backend()?;
    let mut ds = ctx.empty_dataset(backend.id())?;
    let mut esm = ctx.cfg.esm.clone();
    esm.seed = ctx.seed("measure-root");
    let mut measurer = Measurer::new(backend.as_mut(), &esm);
    measurer.measure_into(&mut ds, &archs, "m")?;
    ds.encode_all(ctx.exec)?;
    ctx.prepare_out()?;
    let path = ctx.path("dataset.jsonl");
    dataset::save(&ds, &path)?;
    ctx.record("dataset", &path);
    println!(
        "measured {} architectures plus {} reference readings -> {}",
        ds.trainable_len(),
        ds.samples.len() - ds.trainable_len(),
        path.display()
    );
    Ok(Outcome::Pass)
}

pub fn cmd_encode(ctx: &mut Ctx, dataset_path: &Path) -> Result<Outcome> {
    let ds = ctx.load_dataset(dataset_path)?.with_scheme(ctx.cfg.esm.scheme, ctx.exec)?;
    ctx.prepare_out()?;
    let path = ctx.path(&format!("dataset.{}.jsonl", ds.scheme.tag()));
    dataset::save(&ds, &path)?;
    ctx.record("dataset", &path);
    println!("encoded {} samples with {} -> {}", ds.samples.len(), ds.scheme, path.display());
    Ok(Outcome::Pass)
}

pub fn cmd_train(ctx: &mut Ctx, dataset_path: &Path, scheme_override: bool) -> Result<Outcome> {
    let mut ds = ctx.load_dataset(dataset_path)?;
    if scheme_override && ds.scheme != ctx.cfg.esm.scheme {
        ds = ds.with_scheme(ctx.cfg.esm.scheme, ctx.exec)?;
    }
    let split_seed = ctx.seed("split");
    let (train_set, test_set) = dataset::split(&ds, ctx.cfg.test_fraction, split_seed)?;
    let tcfg = TrainConfig { seed: ctx.seed("train"), ..ctx.cfg.esm.train.clone() };
    let model = predictor::train(&train_set, &tcfg, ctx.exec)?;
    let report = evaluate(&model, &test_set, ctx.cfg.esm.eval, ctx.cfg.esm.acc_th, ctx.exec)?;
    ctx.prepare_out()?;
    for (role, name, d) in [("train", "train.jsonl", &train_set), ("test", "test.jsonl", &test_set)] {
        let p = ctx.path(name);
        dataset::save(d, &p)?;
        ctx.record(role, &p);
    }
    let mp = ctx.path("model.json");
    save_model(&model, &mp)?;
    ctx.record("model", &mp);
    println!("trained on {} samples ({}), held out {}", train_set.trainable_len(), ds.scheme, test_set.trainable_len());
    print_report(&report);
    Ok(Outcome::Pass)
}

pub fn cmd_eval(ctx: &mut Ctx, model_path: &Path, dataset_path: &Path) -> Result<Outcome> {
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let ds = ctx.load_dataset(dataset_path)?;
    let report = evaluate(&model, &ds, ctx.cfg.esm.eval, ctx.cfg.esm.acc_th, ctx.exec)?;
    ctx.prepare_out()?;
    let p = ctx.path("eval.json");
    fs::write(&p, serde_json::to_string_pretty(&report)?)?;
    ctx.record("eval", &p);
    print_report(&report);
    Ok(if report.pass { Outcome::Pass } else { Outcome::NotPassed })
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("actual_ms,predicted_ms,bin\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.actual_ms, p.predicted_ms, p.bin));
    }
    s
}

pub fn cmd_export_scatter(
    ctx: &mut Ctx,
    model_path: &Path,
    dataset_path: &Path,
    output: Option<PathBuf>,
) -> Result<Outcome> {
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let ds = ctx.load_dataset(dataset_path)?;
    let report = evaluate(&model, &ds, ctx.cfg.esm.eval, ctx.cfg.esm.acc_th, ctx.exec)?;
    let path = match output {
        Some(p) => p,
        None => {
            ctx.prepare_out()?;
            ctx.path("scatter.csv")
        }
    };
    fs::write(&path, scatter_csv(&report.points))?;
    ctx.record("scatter", &path);
    println!("wrote {} rows -> {}", report.points.len(), path.display());
    Ok(Outcome::Pass)
}

struct FileHooks {
    out: PathBuf,
    written: Vec<(String, PathBuf)>,
}

impl EsmHooks for FileHooks {
    fn on_test_set(&mut self, test: &LatencyDataset) -> latsurr::Result<()> {
        let p = self.out.join("test.jsonl");
        dataset::save(test, &p)?;
        self.written.push(("test".into(), p));
        Ok(())
    }

    fn on_dataset(&mut self, ds: &LatencyDataset) -> latsurr::Result<()> {
        let p = self.out.join(format!("dataset.v{}.jsonl", ds.version));
        dataset::save(ds, &p)?;
        self.written.push((format!("dataset.v{}", ds.version), p));
        Ok(())
    }

    fn on_iteration(
        &mut self,
        record: &IterationRecord,
        report: &EvalReport,
        _model: &MlpModel,
    ) -> latsurr::Result<()> {
        let dir = self.out.join("scatter");
        fs::create_dir_all(&dir).map_err(latsurr::error::PersistError::from)?;
        let p = dir.join(format!("iter{}.csv", record.iteration));
        fs::write(&p, scatter_csv(&report.points)).map_err(latsurr::error::PersistError::from)?;
        self.written.push((format!("scatter.iter{}", record.iteration), p));
        Ok(())
    }
}

pub fn cmd_esm(ctx: &mut Ctx) -> Result<Outcome> {
    ctx.prepare_out()?;
    let mut backend = ctx.backend()?;
    let mut hooks = FileHooks { out: ctx.out.clone(), written: vec![] };
    let esm_cfg = ctx.cfg.esm.clone();
    let result = run_esm(&ctx.spec, &esm_cfg, backend.as_mut(), ctx.exec, &mut hooks);
    for (role, p) in std::mem::take(&mut hooks.written) {
        ctx.record(&role, &p);
    }
    let outcome = result?;
    for name in ["refs", "test", "sample-initial", "measure"] {
        ctx.seed(name);
    }
    for r in &outcome.history.records {
        ctx.seeds.insert(format!("train.{}", r.iteration), r.train_seed);
    }
    let hp = ctx.path("history.json");
    fs::write(&hp, serde_json::to_string_pretty(&outcome.history)?)?;
    ctx.record("history", &hp);
    let dp = ctx.path("dataset.jsonl");
    dataset::save(&outcome.dataset, &dp)?;
    ctx.record("dataset", &dp);
    let mp = ctx.path("model.json");
    save_model(&outcome.model, &mp)?;
    ctx.record("model", &mp);

    for r in &outcome.history.records {
        let worst = r.per_bin.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        println!(
            "round {:>2}: {:>5} samples  overall {:.4}  worst bin {:.4}  {}",
            r.iteration,
            r.dataset_size,
            r.overall,
            worst,
            if r.pass { "pass" } else { "below target" }
        );
    }
    if outcome.history.converged {
        println!("converged with {} measured samples", outcome.history.final_size());
        Ok(Outcome::Pass)
    } else {
        println!("not converged after {} rounds", outcome.history.records.len());
        Ok(Outcome::NotPassed)
    }
}

pub fn cmd_lut(ctx: &mut Ctx, dataset_path: Option<&Path>) -> Result<Outcome> {
    let mut backend = ctx.backend()?;
    let lut = build_lut(&ctx.spec, backend.as_mut(), &ctx.cfg.lut)?;
    if !lut.clamped.is_empty() {
        println!("warning: {} entries were negative and clamped to 0", lut.clamped.len());
    }
    let bias = if ctx.cfg.calibration_size >= 2 {
        let mut cal = ctx.empty_dataset(backend.id())?;
        let cal_seed = ctx.seed("calibration");
        let archs = sample_balanced(&ctx.spec, ctx.cfg.calibration_size, &cal.bins.clone(), cal_seed)?;
        let mut esm = ctx.cfg.esm.clone();
        esm.seed = ctx.seed("calibration-measure");
        Measurer::new(backend.as_mut(), &esm).measure_into(&mut cal, &archs, "cal")?;
        let pairs: Vec<(ArchConfig, f64)> = cal.trainable().map(|s| (s.arch.clone(), s.latency_ms)).collect();
        Some(fit_bias(&lut, &ctx.spec, &pairs)?)
    } else {
        None
    };
    ctx.prepare_out()?;
    let p = ctx.path("lut.jsonl");
    save_lut(&lut, bias, &p)?;
    ctx.record("lut", &p);
    println!("lookup table: {} entries, c0 {:.4} ms -> {}", lut.entry_count(), lut.c0, p.display());
    if let Some(b) = bias {
        println!("bias correction: {:.5} * lut + {:.5} ms", b.slope, b.intercept);
    }
    if let Some(dp) = dataset_path {
        let ds = ctx.load_dataset(dp)?;
        let archs: Vec<ArchConfig> = ds.trainable().map(|s| s.arch.clone()).collect();
        let raw = lut_predict_batch(&lut, &ds.spec, &archs, ctx.exec)?;
        let corr: Vec<f64> = raw.iter().map(|&x| bias.unwrap_or(BiasCorrection::IDENTITY).apply(x)).collect();
        let r_raw = evaluate_predictions(&ds, &raw, ctx.cfg.esm.eval, ctx.cfg.esm.acc_th)?;
        let r_corr = evaluate_predictions(&ds, &corr, ctx.cfg.esm.eval, ctx.cfg.esm.acc_th)?;
        println!("raw lut accuracy {:.4}, corrected {:.4} on {}", r_raw.overall, r_corr.overall, dp.display());
    }
    Ok(Outcome::Pass)
}

fn print_report(r: &EvalReport) {
    println!("overall accuracy {:.4} ({:?} threshold {})", r.overall, r.strategy, r.acc_th);
    for (i, acc) in r.per_bin.iter().enumerate() {
        match acc {
            Some(a) => println!("  bin {i}: {a:.4} over {} samples", r.bin_counts[i]),
            None => println!("  bin {i}: empty"),
        }
    }
    println!("{}", if r.pass { "pass" } else { "below target" });
}
