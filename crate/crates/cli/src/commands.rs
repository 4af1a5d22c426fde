//! The pipeline stages. Every command is a pure function of the resolved
//! configuration and the workspace contents: reruns write identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use aerorom::cnn::checkpoint;
use aerorom::cnn::train::{train as train_model, write_history_csv, SampleSet};
use aerorom::cnn::{CnnModel, Target};
use aerorom::dataset::{
    generate_dataset, r_squared, sample_designs, scaled_proportions, split_dataset, Campaign, CampaignManifest, Split,
    TensorSamples, LEVELSET_DIR,
};
use aerorom::exec::Exec;
use aerorom::geometry::{loft_design, DesignVector};
use aerorom::levelset::{distance_field, write_tensor};
use aerorom::optimizer::{fom_verify, multi_start, write_campaign_csv, MultiStartReport, Surrogates, VerificationReport, WingProblem};
use serde::Serialize;

use crate::config::{derive_seed, PipelineConfig, SeedStream};
use crate::CliError;

const LOCK_FILE: &str = ".aerorom.lock";

/// Exclusive claim on a workspace; released on drop.
pub struct WorkspaceLock(PathBuf);

impl WorkspaceLock {
    pub fn acquire(workspace: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(workspace)
            .map_err(|e| CliError::Data(format!("cannot create workspace {}: {e}", workspace.display())))?;
        let path = workspace.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkspaceLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "workspace is locked by another command ({}); remove the file if no command is running",
                path.display()
            ))),
            Err(e) => Err(CliError::Data(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_manifest(cfg: &PipelineConfig) -> Result<CampaignManifest, CliError> {
    let dir = cfg.dataset_dir();
    if !dir.join(aerorom::dataset::MANIFEST_FILE).exists() {
        return Err(CliError::Data(format!(
            "no dataset in {}; run `aerorom generate` first",
            dir.display()
        )));
    }
    let m = CampaignManifest::load(&dir)?;
    if m.grid != cfg.grid {
        return Err(CliError::Config(format!(
            "dataset grid {:?} differs from the configured grid {:?}",
            m.grid.dims, cfg.grid.dims
        )));
    }
    Ok(m)
}

fn load_model(cfg: &PipelineConfig, target: Target, path: Option<&Path>) -> Result<CnnModel, CliError> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path(target));
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no checkpoint at {}; run `aerorom train --target {target}` first",
            path.display()
        )));
    }
    let (model, _) = checkpoint::load(&path)?;
    if model.target != target {
        return Err(CliError::Data(format!("{} holds a {} model, not {target}", path.display(), model.target)));
    }
    Ok(model)
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub total: usize,
    pub failed: usize,
    pub split: (usize, usize, usize),
}

pub fn generate(cfg: &PipelineConfig, exec: Exec) -> Result<GenerateSummary, CliError> {
    let _lock = WorkspaceLock::acquire(cfg.workspace())?;
    let dir = cfg.dataset_dir();
    // stale tensors from an earlier campaign must not survive a rerun
    let tensors = dir.join(LEVELSET_DIR);
    if tensors.exists() {
        fs::remove_dir_all(&tensors)?;
    }
    fs::create_dir_all(&dir)?;
    write_json(&cfg.workspace().join("config.json"), cfg)?;

    let n = cfg.campaign.samples;
    let designs = sample_designs(n, &cfg.bounds, derive_seed(cfg.seed, SeedStream::Sampling))?;
    let campaign = Campaign {
        bounds: cfg.bounds.clone(),
        solver: cfg.solver,
        grid: cfg.grid,
        seed: cfg.seed,
    };
    let started = Instant::now();
    let step = (n / 20).max(1);
    let progress = |done: usize| {
        if done % step == 0 || done == n {
            eprintln!("labeled {done}/{n} designs ({:.0} s)", started.elapsed().as_secs_f64());
        }
    };
    let mut manifest = generate_dataset(&dir, &designs, &campaign, exec, &progress)?;
    let labeled = manifest.labeled().count();
    if labeled < 3 {
        return Err(CliError::Data(format!("only {labeled} of {n} designs could be labeled")));
    }
    let [tr, va, te] = cfg.campaign.split;
    let sizes = scaled_proportions((tr, va, te), labeled);
    split_dataset(&mut manifest, sizes, derive_seed(cfg.seed, SeedStream::Split))?;
    manifest.save(&dir)?;
    let mut csv = create(&dir.join("manifest.csv"))?;
    manifest.write_csv(&mut csv)?;
    csv.flush()?;

    println!("designs: {n}, labeled: {labeled}, failed: {}", manifest.counts.failed);
    println!("split      count  CL mean      CL var       CDi mean     CDi var");
    for s in &manifest.split_summary {
        println!(
            "{:<10} {:>5}  {:<11.5e}  {:<11.5e}  {:<11.5e}  {:<11.5e}",
            s.split.label(),
            s.count,
            s.cl.mean,
            s.cl.variance,
            s.cdi.mean,
            s.cdi.variance
        );
    }
    Ok(GenerateSummary {
        total: n,
        failed: manifest.counts.failed,
        split: sizes,
    })
}

#[derive(Debug, Serialize)]
pub struct FitMetrics {
    pub target: Target,
    pub epochs: usize,
    pub iterations: usize,
    pub final_val_loss: f64,
    pub r2_train: f64,
    pub r2_val: f64,
}

fn predictions(model: &CnnModel, set: &TensorSamples, exec: Exec) -> Result<Vec<f64>, CliError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let out: Vec<f64> = exec
        .map_slice(&idx, |&i| model.predict_field(&set.field(i)?))
        .into_iter()
        .collect::<aerorom::Result<_>>()?;
    Ok(out)
}

fn split_ids(m: &CampaignManifest, split: Split) -> Vec<usize> {
    m.in_split(split).map(|r| r.id).collect()
}

fn write_scatter(w: &mut impl Write, split: Split, ids: &[usize], truth: &[f64], pred: &[f64]) -> Result<(), CliError> {
    for i in 0..ids.len() {
        writeln!(w, "{},{},{:e},{:e}", split.label(), ids[i], truth[i], pred[i])?;
    }
    Ok(())
}

pub fn train(cfg: &PipelineConfig, args: &crate::TrainArgs, exec: Exec) -> Result<FitMetrics, CliError> {
    let _lock = WorkspaceLock::acquire(cfg.workspace())?;
    let manifest = load_manifest(cfg)?;
    let dir = cfg.dataset_dir();
    let target = args.target;
    let train_set = manifest.samples(&dir, Split::Train, target)?;
    let val_set = manifest.samples(&dir, Split::Val, target)?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(CliError::Data("training needs at least 2 training and 1 validation sample".into()));
    }

    let mut tcfg = cfg.training.clone();
    if let Some(lr) = args.lr {
        tcfg.initial_lr = lr;
    }
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    tcfg.validate()?;
    // the shuffle stream depends on the pipeline seed and the target
    let shuffle_seed = derive_seed(cfg.seed, SeedStream::Shuffle(target)) ^ tcfg.seed;
    let run_cfg = aerorom::cnn::TrainConfig {
        seed: shuffle_seed,
        ..tcfg.clone()
    };
    let mut model = CnnModel::new(
        &cfg.architecture,
        cfg.grid.dims,
        target,
        derive_seed(cfg.seed, SeedStream::Init(target)),
    )?;
    let per_epoch = run_cfg.batches_per_epoch(train_set.len());
    let started = Instant::now();
    let mut progress = |row: &aerorom::cnn::train::HistoryRow| {
        if let Some(v) = row.val_loss {
            eprintln!(
                "{target} epoch {}/{} iteration {} lr {:.3e} batch loss {:.4e} val loss {:.4e} ({:.0} s)",
                row.epoch,
                run_cfg.epochs,
                row.iteration,
                row.lr,
                row.minibatch_loss,
                v,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let report = train_model(&mut model, &train_set, &val_set, &run_cfg, exec, &mut progress)?;

    fs::create_dir_all(cfg.models_dir())?;
    checkpoint::save(&cfg.checkpoint_path(target), &model, Some(&run_cfg))?;
    let reports = cfg.reports_dir();
    let mut hist = create(&reports.join(format!("train_{target}_history.csv")))?;
    write_history_csv(&mut hist, &report.history)?;
    hist.flush()?;

    let pred_train = predictions(&model, &train_set, exec)?;
    let pred_val = predictions(&model, &val_set, exec)?;
    let r2_train = r_squared(&pred_train, &train_set.targets)?;
    let r2_val = r_squared(&pred_val, &val_set.targets)?;
    let mut scatter = create(&reports.join(format!("train_{target}_scatter.csv")))?;
    writeln!(scatter, "split,id,truth,prediction")?;
    write_scatter(&mut scatter, Split::Train, &split_ids(&manifest, Split::Train), &train_set.targets, &pred_train)?;
    write_scatter(&mut scatter, Split::Val, &split_ids(&manifest, Split::Val), &val_set.targets, &pred_val)?;
    scatter.flush()?;

    let metrics = FitMetrics {
        target,
        epochs: run_cfg.epochs,
        iterations: run_cfg.epochs * per_epoch,
        final_val_loss: report.final_val_loss,
        r2_train,
        r2_val,
    };
    write_json(&reports.join(format!("train_{target}_metrics.json")), &metrics)?;
    println!("{target}: R2 train {r2_train:.4}, R2 val {r2_val:.4}, final val loss {:.4e}", report.final_val_loss);
    Ok(metrics)
}

#[derive(Debug, Serialize)]
pub struct EvalMetrics {
    pub target: Target,
    pub split: Split,
    pub count: usize,
    pub r2: f64,
}

pub fn evaluate(cfg: &PipelineConfig, args: &crate::EvaluateArgs, exec: Exec) -> Result<EvalMetrics, CliError> {
    let manifest = load_manifest(cfg)?;
    let model = load_model(cfg, args.target, args.checkpoint.as_deref())?;
    let set = manifest.samples(&cfg.dataset_dir(), args.split, args.target)?;
    if set.is_empty() {
        return Err(CliError::Data(format!("split {} is empty", args.split.label())));
    }
    let pred = predictions(&model, &set, exec)?;
    let r2 = r_squared(&pred, &set.targets)?;
    let _lock = WorkspaceLock::acquire(cfg.workspace())?;
    let base = cfg
        .reports_dir()
        .join(format!("evaluate_{}_{}", args.target, args.split.label()));
    let mut w = create(&base.with_extension("csv"))?;
    writeln!(w, "split,id,truth,prediction")?;
    write_scatter(&mut w, args.split, &split_ids(&manifest, args.split), &set.targets, &pred)?;
    w.flush()?;
    let metrics = EvalMetrics {
        target: args.target,
        split: args.split,
        count: set.len(),
        r2,
    };
    write_json(&base.with_extension("json"), &metrics)?;
    println!("{} on {}: R2 {r2:.4} over {} samples", args.target, args.split.label(), set.len());
    Ok(metrics)
}

/// Deterministic pick of `k` test-split record ids.
fn pick_starts(manifest: &CampaignManifest, k: usize, seed: u64) -> Vec<usize> {
    let mut ids = split_ids(manifest, Split::Test);
    ids.sort_by_key(|&id| derive_seed(seed ^ id as u64, SeedStream::Starts));
    ids.truncate(k);
    ids
}

#[derive(Debug, Serialize)]
pub struct OptimizeSummary {
    pub starts: Vec<usize>,
    pub converged: usize,
    pub feasible: usize,
    /// Record id of the best converged start.
    pub best_start: Option<usize>,
    pub best_cdi_surrogate: Option<f64>,
    pub r2_cdi: Option<f64>,
    pub r2_cl: Option<f64>,
}

pub struct OptimizeOutcome {
    pub report: MultiStartReport,
    pub verification: VerificationReport,
    pub summary: OptimizeSummary,
}

pub fn optimize(cfg: &PipelineConfig, args: &crate::OptimizeArgs, exec: Exec) -> Result<OptimizeSummary, CliError> {
    optimize_full(cfg, args, exec).map(|o| o.summary)
}

pub fn optimize_full(cfg: &PipelineConfig, args: &crate::OptimizeArgs, exec: Exec) -> Result<OptimizeOutcome, CliError> {
    let manifest = load_manifest(cfg)?;
    let cl = load_model(cfg, Target::Cl, None)?;
    let cdi = load_model(cfg, Target::Cdi, None)?;
    let surrogates = Surrogates::new(cl, cdi, manifest.grid)?;
    let mut wing = cfg.optimizer.wing.clone();
    if let Some(m) = args.max_iter {
        wing.sqp.max_iter = m;
    }
    let k = args.starts.unwrap_or(cfg.optimizer.starts);
    let ids = pick_starts(&manifest, k, derive_seed(cfg.seed, SeedStream::Starts));
    if ids.is_empty() {
        return Err(CliError::Data("the test split holds no designs to start from".into()));
    }
    let starts: Vec<DesignVector> = ids
        .iter()
        .map(|&id| manifest.records[id].design_vector())
        .collect::<aerorom::Result<_>>()?;
    let _lock = WorkspaceLock::acquire(cfg.workspace())?;
    let problem = WingProblem::new(&surrogates, &manifest.bounds, wing.clone())?;
    let started = Instant::now();
    let progress = |run: &aerorom::optimizer::WingRun| {
        let status = match (&run.status, &run.error) {
            (Some(s), _) => format!("{s:?}"),
            (None, Some(e)) => format!("error: {e}"),
            _ => "unknown".into(),
        };
        eprintln!(
            "start {} (record {}): {status}, iterations {}, CDi {:?} ({:.0} s)",
            run.start,
            ids[run.start],
            run.result.as_ref().map_or(0, |r| r.iterations),
            run.cdi_surrogate,
            started.elapsed().as_secs_f64()
        );
    };
    let mut report = multi_start(&problem, &starts, exec, &progress);
    // report record ids rather than positions in the start list
    for run in &mut report.runs {
        run.start = ids[run.start];
    }
    let verification = fom_verify(&report, &manifest.solver, &wing, exec);

    let out = cfg.reports_dir().join("optimize");
    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    let mut csv = create(&out.join("summary.csv"))?;
    write_campaign_csv(&mut csv, &report, &verification)?;
    csv.flush()?;
    let mut hist = create(&out.join("history.csv"))?;
    writeln!(hist, "start,iteration,CDi,feasible,max_violation,kkt_residual,step_norm")?;
    for run in &report.runs {
        write_json(&out.join("runs").join(format!("start_{:06}.json", run.start)), run)?;
        if let Some(r) = &run.result {
            for h in &r.history {
                writeln!(
                    hist,
                    "{},{},{:e},{},{:e},{:e},{:e}",
                    run.start,
                    h.iteration,
                    h.objective / wing.objective_scale,
                    h.feasible,
                    h.max_violation,
                    h.kkt_residual,
                    h.step_norm
                )?;
            }
        }
    }
    hist.flush()?;
    for d in &verification.designs {
        for (tag, dist) in [("initial", &d.initial), ("final", &d.final_)] {
            let mut w = create(&out.join("lift").join(format!("start_{:06}_{tag}.csv", d.start)))?;
            dist.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    write_json(&out.join("verification.json"), &verification)?;

    let feasible = report
        .runs
        .iter()
        .filter(|r| r.constraints.is_some_and(|c| c.iter().all(|&v| v <= wing.sqp.feasibility_tol)))
        .count();
    let summary = OptimizeSummary {
        starts: ids.clone(),
        converged: report.converged.len(),
        feasible,
        best_start: report.best.map(|i| report.runs[i].start),
        best_cdi_surrogate: report.best.and_then(|i| report.runs[i].cdi_surrogate),
        r2_cdi: verification.r2_cdi,
        r2_cl: verification.r2_cl,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} starts: {} converged, {} feasible; best CDi {:?}; surrogate-vs-FOM R2 CDi {:?}",
        ids.len(),
        summary.converged,
        feasible,
        summary.best_cdi_surrogate,
        summary.r2_cdi
    );
    if feasible == 0 {
        return Err(CliError::Numerical(format!(
            "none of the {} starts reached a feasible design",
            ids.len()
        )));
    }
    Ok(OptimizeOutcome {
        report,
        verification,
        summary,
    })
}

pub fn features(cfg: &PipelineConfig, args: &crate::FeaturesArgs) -> Result<(), CliError> {
    let model = load_model(cfg, args.target, args.checkpoint.as_deref())?;
    let arch = model.architecture();
    if args.layer == 0 || args.layer > arch.channels.len() {
        return Err(CliError::Usage(format!("layer {} out of range 1..={}", args.layer, arch.channels.len())));
    }
    let n_k = arch.channels[args.layer - 1];
    if args.kernel == 0 || args.kernel > n_k {
        return Err(CliError::Usage(format!(
            "kernel {} out of range 1..={n_k} for layer {}",
            args.kernel, args.layer
        )));
    }
    let (design, tag) = match (&args.design_id, &args.design_json) {
        (Some(id), None) => {
            let m = load_manifest(cfg)?;
            let r = m
                .records
                .get(*id)
                .ok_or_else(|| CliError::Usage(format!("no dataset record {id}")))?;
            (r.design_vector()?, format!("record{id:06}"))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            (DesignVector::from_json(&text)?, "design".to_string())
        }
        _ => return Err(CliError::Usage("give exactly one of --design-id or --design-json".into())),
    };
    if cfg.grid.dims != model.input_dims {
        return Err(CliError::Config(format!(
            "grid {:?} does not match the model input {:?}",
            cfg.grid.dims, model.input_dims
        )));
    }
    let field = distance_field(&loft_design(&design)?, &cfg.grid)?;
    let map = model.feature_map(&field.phi, args.layer, args.kernel)?;
    let _lock = WorkspaceLock::acquire(cfg.workspace())?;
    let out = cfg.reports_dir().join("features");
    let base = format!("{}_{tag}_L{}_K{}", args.target, args.layer, args.kernel);
    let mut w = create(&out.join(format!("{base}.lsf")))?;
    write_tensor(&mut w, map.dims, &map.data)?;
    w.flush()?;
    let [nx, ny, nz] = map.dims;
    for iy in 0..ny {
        let mut w = create(&out.join(format!("{base}_y{iy:02}.csv")))?;
        let header: Vec<String> = (0..nz).map(|iz| format!("z{iz}")).collect();
        writeln!(w, "x_index,{}", header.join(","))?;
        for ix in 0..nx {
            let row: Vec<String> = (0..nz).map(|iz| format!("{:e}", map.data[(ix * ny + iy) * nz + iz])).collect();
            writeln!(w, "{ix},{}", row.join(","))?;
        }
        w.flush()?;
    }
    println!("wrote {}x{}x{} feature map to {}", nx, ny, nz, out.join(format!("{base}.lsf")).display());
    Ok(())
}
