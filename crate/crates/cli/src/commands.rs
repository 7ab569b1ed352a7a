use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use fslm_core::experiments::{fit_surrogate, simulate_data, HhProblem, LgmProblem};
use fslm_core::inference::{CalibrationModel, TrainingSet};
use fslm_core::io::{read_matrix, write_atomic, write_matrix, LabeledMatrix};
use fslm_core::mdn::{load_model, save_model, MdnModel, TrainReport};
use fslm_core::metrics::kl_estimate;
use fslm_core::rng::{derive_seed, stream};
use fslm_core::select::{
    brute_force_rank, greedy_select, leave_one_out_rank, random_order_trace, subset_seed, write_traces_csv, GreedyTrace,
    PosteriorSpec, RankOutcome, RetrainConfig,
};
use fslm_core::sim::BoxPrior;
use fslm_core::FslmError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Baseline, ConfigErrors, ModelKind, RunConfig};
use crate::manifest::{sha256_file, Recorder, RunManifest};
use crate::{
    Cli, Command, Common, GreedyArgs, KlArgs, Mode, ObserveArgs, PosteriorArgs, RankArgs, ReplayArgs, SamplerArgs,
    SimulateArgs, TrainArgs,
};

pub const SEED_ENV: &str = "FSLM_SEED";

/// How a command was invoked. A replay supplies the recorded config.
pub struct Ctx {
    pub base: Option<RunConfig>,
    pub argv: Vec<String>,
}

impl Ctx {
    pub fn resolve(&self, common: Option<&Common>, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut cfg = match (&self.base, common.and_then(|c| c.config.as_ref())) {
            (Some(base), _) => base.clone(),
            (None, Some(path)) => RunConfig::load(path)?,
            (None, None) => RunConfig::default(),
        };
        if self.base.is_none() {
            if let Ok(s) = std::env::var(SEED_ENV) {
                cfg.seed = s.trim().parse().map_err(|_| anyhow!(ConfigErrors(vec![format!("{SEED_ENV}: not an unsigned integer: {s:?}")])))?;
            }
        }
        if let Some(seed) = common.and_then(|c| c.seed) {
            cfg.seed = seed;
        }
        apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn report(e: anyhow::Error) -> ExitCode {
    let kind = if e.downcast_ref::<ConfigErrors>().is_some() || matches!(e.downcast_ref::<FslmError>(), Some(FslmError::Config(_))) {
        "config"
    } else if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
        "io"
    } else {
        "runtime"
    };
    let mut body = json!({
        "error": e.to_string(),
        "kind": kind,
        "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    if let Some(v) = e.downcast_ref::<ConfigErrors>() {
        body["violations"] = json!(v.0);
    }
    eprintln!("{body}");
    ExitCode::FAILURE
}

/// Runs one command; returns the manifest it wrote, if any.
pub fn run(command: Command, ctx: &Ctx) -> Result<Option<PathBuf>> {
    match command {
        Command::Simulate(a) => simulate(a, ctx).map(Some),
        Command::Observe(a) => observe(a, ctx).map(Some),
        Command::Train(a) => train(a, ctx).map(Some),
        Command::Posterior(a) => posterior(a, ctx).map(Some),
        Command::Rank(a) => rank(a, ctx).map(Some),
        Command::Greedy(a) => greedy(a, ctx).map(Some),
        Command::Kl(a) => kl(a, ctx),
        Command::Reproduce(a) => crate::reproduce::reproduce(a, ctx).map(Some),
        Command::Replay(a) => replay(a).map(|_| None),
    }
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Output bookkeeping for commands whose result is a single file.
struct FileRun {
    rec: Recorder,
    out: PathBuf,
}

impl FileRun {
    fn new(out: &Path, extra: &[PathBuf]) -> Result<Self> {
        let mut rec = Recorder::default();
        for p in std::iter::once(out.to_owned()).chain(extra.iter().cloned()) {
            rec.claim(&p, false)?;
        }
        rec.claim(&with_suffix(out, ".config.json"), false)?;
        let manifest = with_suffix(out, ".manifest.json");
        if manifest.exists() {
            bail!("refusing to overwrite existing {}", manifest.display());
        }
        Ok(FileRun { rec, out: out.to_owned() })
    }

    fn finish(self, command: &str, ctx: &Ctx, cfg: &RunConfig) -> Result<PathBuf> {
        write_atomic(&with_suffix(&self.out, ".config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
        let manifest = self.rec.finish(command, ctx.argv.clone(), cfg)?;
        let path = with_suffix(&self.out, ".manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

fn matrix_outputs(out: &Path) -> Vec<PathBuf> {
    vec![fslm_core::io::sidecar_path(out)]
}

fn apply_sampler(cfg: &mut RunConfig, s: &SamplerArgs) {
    if let Some(k) = s.sampler {
        cfg.sampler.kind = k;
    }
    if let Some(n) = s.n {
        cfg.sampler.n = n;
    }
    if let Some(c) = s.chains {
        cfg.sampler.chains = c;
    }
    if let Some(t) = s.thin {
        cfg.sampler.thin = t;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub kind: String,
    pub model: ModelKind,
    pub param_dim: usize,
    pub prior: BoxPrior,
    pub handle_invalid: bool,
    pub seed: u64,
    pub valid_fraction: f64,
    pub raw_valid_fraction: Option<f64>,
    pub classifier_holdout_accuracy: Option<f64>,
}

fn simulate(a: SimulateArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| {
        if let Some(m) = a.model {
            c.model = m;
        }
        if let Some(n) = a.n {
            c.pipeline.n_train = n;
        }
        if a.handle_invalid {
            c.pipeline.handle_invalid = true;
        }
    })?;
    let mut run = FileRun::new(&a.out, &matrix_outputs(&a.out))?;
    let sim = cfg.simulator()?;
    let prior = cfg.prior()?;
    run.rec.seed("run", cfg.seed);
    run.rec.seed("classifier_data", derive_seed(cfg.seed, stream::CLASSIFIER_DATA));
    run.rec.seed("training_data", derive_seed(cfg.seed, stream::TRAINING_DATA));
    let sd = simulate_data(sim.as_ref(), &prior, &cfg.pipeline, cfg.seed)?;
    run.rec.add_time("simulate", sd.timings.simulate_seconds);
    run.rec.add_time("classifier", sd.timings.classifier_seconds);
    let meta = DatasetMeta {
        kind: "dataset".into(),
        model: cfg.model,
        param_dim: prior.dim(),
        prior,
        handle_invalid: cfg.pipeline.handle_invalid,
        seed: cfg.seed,
        valid_fraction: sd.data.valid_fraction(),
        raw_valid_fraction: sd.classifier_data.as_ref().map(|d| d.valid_fraction()),
        classifier_holdout_accuracy: sd.classifier.as_ref().map(|c| c.holdout_accuracy),
    };
    let mut m = sd.data.to_matrix();
    m.meta = serde_json::to_value(&meta)?;
    write_matrix(&a.out, &m)?;
    log::info!("wrote {} rows, valid fraction {:.3}", sd.data.len(), meta.valid_fraction);
    run.finish("simulate", ctx, &cfg)
}

pub fn read_dataset(path: &Path) -> Result<(TrainingSet, DatasetMeta)> {
    let m = read_matrix(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let meta: DatasetMeta =
        serde_json::from_value(m.meta.clone()).with_context(|| format!("{} has no dataset metadata", path.display()))?;
    let prior = BoxPrior::new(meta.prior.lower().to_vec(), meta.prior.upper().to_vec())?;
    let data = TrainingSet::from_matrix(&m, meta.param_dim)?;
    Ok((data, DatasetMeta { prior, ..meta }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationMeta {
    pub kind: String,
    pub model: ModelKind,
    pub theta: Vec<f64>,
    pub param_names: Vec<String>,
}

fn observe(a: ObserveArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| {
        if let Some(m) = a.model {
            c.model = m;
        }
    })?;
    let mut run = FileRun::new(&a.out, &matrix_outputs(&a.out))?;
    let sim = cfg.simulator()?;
    let prior = cfg.prior()?;
    run.rec.seed("run", cfg.seed);
    let (theta, x) = match (&a.theta, cfg.model) {
        (Some(theta), _) => {
            if !prior.contains(theta) {
                bail!(ConfigErrors(vec![format!("theta {theta:?} lies outside the prior")]));
            }
            let fv = sim.simulate(theta, derive_seed(cfg.seed, stream::OBSERVATION));
            if !fv.all_valid() {
                bail!("observation at {theta:?} leaves features undefined");
            }
            (theta.clone(), fv.values)
        }
        (None, ModelKind::Lgm) => {
            let p = LgmProblem::new(cfg.lgm.clone(), cfg.seed)?;
            (p.theta_true, p.x_obs)
        }
        (None, ModelKind::Hh) => {
            let p = HhProblem::with_simulator(cfg.hh_simulator()?)?;
            (p.theta_obs, p.x_obs)
        }
    };
    let names = sim.feature_names();
    let mut m = LabeledMatrix::new(Array2::from_shape_vec((1, x.len()), x)?, names);
    m.meta = serde_json::to_value(ObservationMeta {
        kind: "observation".into(),
        model: cfg.model,
        theta,
        param_names: sim.param_names(),
    })?;
    write_matrix(&a.out, &m)?;
    run.finish("observe", ctx, &cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: String,
    pub model: ModelKind,
    pub prior: BoxPrior,
    pub calibration: Option<CalibrationModel>,
    pub retrain: RetrainConfig,
    pub seed: u64,
    pub dataset_sha256: String,
    pub report: TrainReport,
}

fn train(a: TrainArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| {
        if let Some(k) = a.components {
            c.pipeline.retrain.components = k;
        }
        if let Some(h) = &a.hidden {
            c.pipeline.retrain.hidden = h.clone();
        }
        if let Some(e) = a.max_epochs {
            c.pipeline.retrain.train.max_epochs = e;
        }
    })?;
    let mut run = FileRun::new(&a.out, &[])?;
    run.rec.input(&a.dataset)?;
    let (data, meta) = read_dataset(&a.dataset)?;
    run.rec.seed("run", cfg.seed);
    run.rec.seed("subset", subset_seed(cfg.seed, &fslm_core::select::all_features(data.feature_names.len())));
    let (mut model, report, calibration) =
        run.rec.time("train", || fit_surrogate(&data, &cfg.pipeline.retrain, meta.handle_invalid, cfg.seed))?;
    log::info!("trained {} epochs, best validation loss {:.4}", report.val_loss.len(), report.best_val_loss);
    model.meta = serde_json::to_value(ModelMeta {
        kind: "surrogate".into(),
        model: meta.model,
        prior: meta.prior,
        calibration,
        retrain: cfg.pipeline.retrain.clone(),
        seed: cfg.seed,
        dataset_sha256: sha256_file(&a.dataset)?,
        report,
    })?;
    save_model(&model, &a.out)?;
    run.finish("train", ctx, &cfg)
}

pub struct Loaded {
    pub model: MdnModel,
    pub meta: ModelMeta,
    pub x_obs: Vec<f64>,
}

impl Loaded {
    pub fn spec(&self) -> Result<PosteriorSpec<'_>> {
        Ok(PosteriorSpec::new(&self.model, self.meta.prior.clone(), self.meta.calibration.clone(), self.x_obs.clone())?)
    }
}

/// Loads a trained surrogate and aligns the observation to its features by name.
pub fn load_inputs(rec: &mut Recorder, model_path: &Path, obs_path: &Path) -> Result<Loaded> {
    rec.input(model_path)?;
    rec.input(obs_path)?;
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let meta: ModelMeta = serde_json::from_value(model.meta.clone())
        .with_context(|| format!("{} lacks surrogate metadata", model_path.display()))?;
    let prior = BoxPrior::new(meta.prior.lower().to_vec(), meta.prior.upper().to_vec())?;
    let obs = read_matrix(obs_path).with_context(|| format!("reading observation {}", obs_path.display()))?;
    if obs.data.nrows() != 1 {
        bail!("observation file must hold exactly one row, found {}", obs.data.nrows());
    }
    let x_obs = model
        .feature_names()
        .iter()
        .map(|name| {
            obs.column_index(name)
                .map(|j| obs.data[[0, j]])
                .ok_or_else(|| anyhow!("observation has no feature {name:?}"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Loaded { model, meta: ModelMeta { prior, ..meta }, x_obs })
}

pub fn parse_features(spec: &str, names: &[String]) -> Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((0..names.len()).collect());
    }
    let mut keep = Vec::new();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let idx = match names.iter().position(|n| n == token) {
            Some(i) => i,
            None => match token.parse::<usize>() {
                Ok(i) if i < names.len() => i,
                _ => bail!(ConfigErrors(vec![format!("unknown feature {token:?}; known: {}", names.join(","))])),
            },
        };
        if keep.contains(&idx) {
            bail!(ConfigErrors(vec![format!("feature {token:?} listed twice")]));
        }
        keep.push(idx);
    }
    if keep.is_empty() {
        bail!(ConfigErrors(vec!["no features selected".into()]));
    }
    keep.sort_unstable();
    Ok(keep)
}

fn posterior(a: PosteriorArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| apply_sampler(c, &a.sampler))?;
    let mut run = FileRun::new(&a.out, &matrix_outputs(&a.out))?;
    let loaded = load_inputs(&mut run.rec, &a.model, &a.obs)?;
    let keep = parse_features(&a.features, loaded.model.feature_names())?;
    let seed = subset_seed(cfg.seed, &keep);
    run.rec.seed("run", cfg.seed);
    run.rec.seed("sampler", seed);
    let spec = loaded.spec()?;
    let samples = run.rec.time("sample", || spec.sample(&keep, &cfg.sampler, seed))?;
    for w in &samples.diagnostics.warnings {
        log::warn!("{w}");
    }
    let mut m = LabeledMatrix::new(samples.samples.clone(), loaded.model.param_names().to_vec());
    m.meta = json!({
        "kind": "samples",
        "features": keep.iter().map(|&i| loaded.model.feature_names()[i].clone()).collect::<Vec<_>>(),
        "diagnostics": samples.diagnostics,
    });
    write_matrix(&a.out, &m)?;
    run.finish("posterior", ctx, &cfg)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> fslm_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn kl_csv(outcome: &RankOutcome) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["removed", "kl"])?;
    for r in &outcome.table.rows {
        w.write_record([r.removed.clone(), r.kl.map_or(String::new(), |v| v.to_string())])?;
    }
    Ok(w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

pub fn claim_plotdata(rec: &mut Recorder, dir: &Path, files: &[&str]) -> Result<Vec<PathBuf>> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        bail!("plot data directory {} is not empty", dir.display());
    }
    files
        .iter()
        .map(|f| {
            let p = dir.join(f);
            rec.claim(&p, false)?;
            Ok(p)
        })
        .collect()
}

fn rank(a: RankArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| apply_sampler(c, &a.sampler))?;
    if a.mode == Mode::Brute && a.dataset.is_none() {
        bail!(ConfigErrors(vec!["--mode brute needs --dataset to retrain on".into()]));
    }
    let mut run = FileRun::new(&a.out, &[])?;
    let plot = match &a.plotdata {
        Some(dir) => Some(claim_plotdata(&mut run.rec, dir, &["iqr_matrix.csv", "kl.csv"])?),
        None => None,
    };
    let loaded = load_inputs(&mut run.rec, &a.model, &a.obs)?;
    run.rec.seed("run", cfg.seed);
    let outcome = match a.mode {
        Mode::Fslm => leave_one_out_rank(&loaded.spec()?, &cfg.sampler, cfg.seed)?,
        Mode::Brute => {
            let path = a.dataset.as_ref().expect("checked above");
            run.rec.input(path)?;
            let (data, _) = read_dataset(path)?;
            if data.feature_names != loaded.model.feature_names() {
                bail!("dataset features {:?} differ from the model's", data.feature_names);
            }
            let m = &loaded.meta;
            brute_force_rank(&data, &m.prior, m.calibration.as_ref(), &loaded.x_obs, &m.retrain, &cfg.sampler, cfg.seed)?
        }
    };
    run.rec.add_time("train", outcome.table.timings.train_seconds);
    run.rec.add_time("sample", outcome.table.timings.sample_seconds);
    write_atomic(&a.out, &csv_bytes(|b| outcome.table.write_csv(b))?)?;
    if let Some(paths) = plot {
        std::fs::create_dir_all(a.plotdata.as_ref().unwrap())?;
        write_atomic(&paths[0], &csv_bytes(|b| outcome.table.iqr_matrix().write_csv(b))?)?;
        write_atomic(&paths[1], &kl_csv(&outcome)?)?;
    }
    run.finish("rank", ctx, &cfg)
}

/// Median KL per (method, step) across runs.
pub fn median_trajectories(traces: &[(usize, GreedyTrace)]) -> Vec<(String, usize, f64)> {
    let mut methods: Vec<String> = traces.iter().map(|(_, t)| t.method.clone()).collect();
    methods.dedup();
    methods.sort();
    methods.dedup();
    let mut out = Vec::new();
    for m in methods {
        let of: Vec<&GreedyTrace> = traces.iter().filter(|(_, t)| t.method == m).map(|(_, t)| t).collect();
        let steps = of.iter().map(|t| t.kl.len()).max().unwrap_or(0);
        for s in 0..steps {
            let mut v: Vec<f64> = of.iter().filter_map(|t| t.kl.get(s).copied()).collect();
            out.push((m.clone(), s + 1, median(&mut v)));
        }
    }
    out
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn greedy(a: GreedyArgs, ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.resolve(Some(&a.common), |c| {
        apply_sampler(c, &a.sampler);
        if let Some(k) = a.k {
            c.greedy.k = k;
        }
        if let Some(b) = a.beam {
            c.greedy.beam = b;
        }
        if let Some(b) = a.baseline {
            c.greedy.baseline = b;
        }
        if let Some(r) = a.runs {
            c.greedy.runs = r;
        }
    })?;
    let mut run = FileRun::new(&a.out, &[])?;
    let plot = match &a.plotdata {
        Some(dir) => Some(claim_plotdata(&mut run.rec, dir, &["median_kl.csv", "candidates.csv"])?),
        None => None,
    };
    let loaded = load_inputs(&mut run.rec, &a.model, &a.obs)?;
    let spec = loaded.spec()?;
    let g = &cfg.greedy;
    run.rec.seed("run", cfg.seed);
    let mut traces = Vec::new();
    for r in 0..g.runs {
        let run_seed = derive_seed(cfg.seed, r as u64);
        run.rec.seed(&format!("run{r}"), run_seed);
        let full = run.rec.time("sample", || spec.sample_full(&cfg.sampler, run_seed))?;
        let t = run.rec.time("sample", || greedy_select(&spec, &full, g.k, g.beam, &cfg.sampler, run_seed))?;
        traces.push((r, t));
        if g.baseline == Baseline::Random {
            let t = run.rec.time("sample", || random_order_trace(&spec, &full, g.k, &cfg.sampler, run_seed))?;
            traces.push((r, t));
        }
    }
    let refs: Vec<(usize, &GreedyTrace)> = traces.iter().map(|(r, t)| (*r, t)).collect();
    write_atomic(&a.out, &csv_bytes(|b| write_traces_csv(&refs, b))?)?;
    if let Some(paths) = plot {
        std::fs::create_dir_all(a.plotdata.as_ref().unwrap())?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "step", "median_kl"])?;
        for (m, s, v) in median_trajectories(&traces) {
            w.write_record([m, s.to_string(), v.to_string()])?;
        }
        write_atomic(&paths[0], &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "method", "step", "subset", "kl", "error"])?;
        for (r, t) in &traces {
            for (s, cands) in t.candidates.iter().enumerate() {
                for c in cands {
                    let names: Vec<&str> = c.subset.iter().map(|&i| t.feature_names[i].as_str()).collect();
                    w.write_record([
                        r.to_string(),
                        t.method.clone(),
                        (s + 1).to_string(),
                        names.join("+"),
                        c.kl.to_string(),
                        c.error.clone().unwrap_or_default(),
                    ])?;
                }
            }
        }
        write_atomic(&paths[1], &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    }
    run.finish("greedy", ctx, &cfg)
}

fn kl(a: KlArgs, ctx: &Ctx) -> Result<Option<PathBuf>> {
    let cfg = ctx.resolve(None, |_| {})?;
    let run = a.out.as_ref().map(|out| FileRun::new(out, &[])).transpose()?;
    let x = read_matrix(&a.x).with_context(|| format!("reading {}", a.x.display()))?;
    let y = read_matrix(&a.y).with_context(|| format!("reading {}", a.y.display()))?;
    let est = kl_estimate(x.data.view(), y.data.view())?;
    let text = serde_json::to_string_pretty(&est)?;
    println!("{text}");
    let Some(mut run) = run else { return Ok(None) };
    run.rec.input(&a.x)?;
    run.rec.input(&a.y)?;
    write_atomic(&run.out, text.as_bytes())?;
    Ok(Some(run.finish("kl", ctx, &cfg)?))
}

/// Rewrites the value of every `--out`/`--plotdata` flag to live in `dir`;
/// returns the new arguments and the (old, new) prefix pairs.
pub fn rebase_argv(argv: &[String], dir: &Path) -> Result<(Vec<String>, Vec<(String, String)>)> {
    const FLAGS: [&str; 2] = ["--out", "--plotdata"];
    let mut out = Vec::with_capacity(argv.len());
    let mut pairs = Vec::new();
    let mut rebase = |old: &str| -> Result<String> {
        let name = Path::new(old).file_name().ok_or_else(|| anyhow!("cannot rebase output path {old:?}"))?;
        let new = dir.join(name).to_string_lossy().into_owned();
        pairs.push((old.to_owned(), new.clone()));
        Ok(new)
    };
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        if FLAGS.contains(&a.as_str()) && i + 1 < argv.len() {
            out.push(a.clone());
            out.push(rebase(&argv[i + 1])?);
            i += 2;
            continue;
        }
        match a.split_once('=') {
            Some((flag, value)) if FLAGS.contains(&flag) => out.push(format!("{flag}={}", rebase(value)?)),
            _ => out.push(a.clone()),
        }
        i += 1;
    }
    Ok((out, pairs))
}

fn map_path(path: &Path, pairs: &[(String, String)]) -> Option<PathBuf> {
    let s = path.to_string_lossy();
    pairs.iter().find_map(|(old, new)| s.strip_prefix(old.as_str()).map(|rest| PathBuf::from(format!("{new}{rest}"))))
}

#[derive(Debug, Serialize)]
struct ReplaySummary {
    manifest: PathBuf,
    identical: usize,
    volatile_skipped: usize,
    mismatched: Vec<PathBuf>,
}

fn replay(a: ReplayArgs) -> Result<()> {
    use clap::Parser;
    let m = RunManifest::load(&a.manifest)?;
    if m.tool_version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, replaying with {}", m.tool_version, env!("CARGO_PKG_VERSION"));
    }
    for input in &m.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            bail!("input {} changed since the recorded run", input.path.display());
        }
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let (argv, pairs) = rebase_argv(&m.argv, &a.out_dir)?;
    let cli = Cli::try_parse_from(std::iter::once("fslm".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| anyhow!("manifest arguments no longer parse: {e}"))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!("cannot replay a replay");
    }
    let ctx = Ctx { base: Some(m.config.clone()), argv };
    let new_manifest = run(cli.command, &ctx)?.ok_or_else(|| anyhow!("replayed command wrote no manifest"))?;
    let fresh = RunManifest::load(&new_manifest)?;
    let mut summary = ReplaySummary { manifest: new_manifest, identical: 0, volatile_skipped: 0, mismatched: Vec::new() };
    for old in &m.outputs {
        if old.volatile {
            summary.volatile_skipped += 1;
            continue;
        }
        let target = map_path(&old.path, &pairs);
        match target.as_ref().and_then(|t| fresh.outputs.iter().find(|o| &o.path == t)) {
            Some(o) if o.sha256 == old.sha256 => summary.identical += 1,
            _ => summary.mismatched.push(old.path.clone()),
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !summary.mismatched.is_empty() {
        bail!("{} outputs differ from the recorded run", summary.mismatched.len());
    }
    Ok(())
}
