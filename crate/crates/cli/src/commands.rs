//! The four subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deepssm::data::{load_csv_auto, save_csv, synthetic_splits, Normalization};
use deepssm::metrics::{evaluate_open_loop, mean_std, EvalReport};
use deepssm::model::{DeepSsm, Variant};
use deepssm::train::{train as train_model, RunRecord, StopReason};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{
    derive_seed, output_dir, resolve_datasets, tagged, Datasets, ErrorKind, ExperimentConfig, ModelSpec, TestSet,
    DATA_DIR,
};
use crate::plot;
use crate::{Common, EvaluateArgs};

const INIT_STREAM: u64 = 0x1417;
const EVAL_STREAM: u64 = 0xe7a1;
const CHECKPOINT: &str = "model.ckpt";

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = output_dir(&cfg, &c.config, c.out.as_deref());
    Ok((cfg, out))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(tagged(
            ErrorKind::Config,
            format!("{} already exists; pass --force to overwrite", path.display()),
        ));
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

pub fn simulate(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    if !cfg.benchmark.is_synthetic() {
        return Err(tagged(
            ErrorKind::Config,
            format!("{} is not a synthetic benchmark", cfg.benchmark.name()),
        ));
    }
    let dir = out.join(DATA_DIR);
    refuse_existing(&dir.join("train.csv"), c.force)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = c.seed.unwrap_or(cfg.data.seed);
    let splits = synthetic_splits(cfg.benchmark, cfg.sizes(), cfg.noise_reading(), seed, cfg.data.test_seed)
        .expect("synthetic benchmark");
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_csv(&dir.join(format!("{name}.csv")), ds)?;
    }
    eprintln!(
        "wrote {} (train {}, val {}, test {})",
        dir.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("runs").join(format!("seed-{seed}"))
}

/// Trains one model, saves its checkpoint and record, and scores it on the
/// first test set.
fn run_job(cfg: &ExperimentConfig, spec: &ModelSpec, data: &Datasets, seed: u64, dir: &Path) -> Result<RunRecord> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let norm = Normalization::fit(&data.train)?;
    let train_n = norm.normalize(&data.train)?;
    let val_n = norm.normalize(&data.val)?;
    let model_cfg = spec.to_config(data.train.u_dim(), data.train.y_dim());
    let mut model = DeepSsm::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)))?;
    model.normalization = Some(norm);
    let tcfg = cfg.train_config(seed)?;
    let mut record = train_model(&mut model, &[train_n], &[val_n], &tcfg)?;
    let ckpt = dir.join(CHECKPOINT);
    let file = fs::File::create(&ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    model.save(std::io::BufWriter::new(file))?;
    let reports = evaluate_tests(&model, &data.tests[..1.min(data.tests.len())], seed)?;
    if let Some((_, r)) = reports.first() {
        record.test_rmse = Some(r.rmse);
        record.test_nll = Some(r.nll);
    }
    write(&dir.join("record.csv"), record.to_csv())?;
    let snapshot = serde_json::json!({
        "experiment": cfg,
        "model": model.config(),
        "train": tcfg,
        "parameters": model.num_parameters(),
    });
    write(&dir.join("config.json"), serde_json::to_string_pretty(&snapshot)? + "\n")?;
    Ok(record)
}

fn evaluate_tests(model: &DeepSsm, tests: &[TestSet], seed: u64) -> Result<Vec<(String, EvalReport)>> {
    tests
        .iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_STREAM));
            let mut report = evaluate_open_loop(model, &t.data, &mut rng)?;
            report.seed = Some(seed);
            Ok((t.name.clone(), report))
        })
        .collect()
}

pub fn train(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    let seeds = c.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    for &s in &seeds {
        refuse_existing(&run_dir(&out, s), c.force)?;
    }
    let data = resolve_datasets(&cfg, &out, None)?;
    let results: Vec<Result<RunRecord>> = pool(c.jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let r = run_job(&cfg, &cfg.model, &data, s, &run_dir(&out, s));
                if let Ok(o) = &r {
                    eprintln!(
                        "seed {s}: {} after {} epochs, best val {:.4}, test rmse {:.4}",
                        o.stop_reason.as_str(),
                        o.epochs.len(),
                        o.best_val_loss,
                        o.test_rmse.unwrap_or(f64::NAN)
                    );
                }
                r
            })
            .collect()
    });
    let mut aborted = Vec::new();
    for (s, r) in seeds.iter().zip(results) {
        let o = r.with_context(|| format!("seed {s}"))?;
        if o.stop_reason == StopReason::NanAbort {
            aborted.push(format!("seed {s}: {}", o.abort_detail.unwrap_or_default()));
        }
    }
    if !aborted.is_empty() {
        return Err(tagged(ErrorKind::Numeric, format!("training aborted: {}", aborted.join("; "))));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<DeepSsm> {
    let file = fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    Ok(DeepSsm::load(BufReader::new(file)).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn write_report(dir: &Path, name: &str, report: &EvalReport, plot_svg: bool) -> Result<()> {
    write(&dir.join(format!("eval-{name}.csv")), report.to_csv())?;
    write(&dir.join(format!("steps-{name}.csv")), report.steps_csv())?;
    if plot_svg {
        let (lower, upper) = report.band(0, 3.0);
        let y: Vec<f64> = report.steps.iter().map(|s| s.y[0]).collect();
        let mean: Vec<f64> = report.steps.iter().map(|s| s.mu[0]).collect();
        let title = format!(
            "{} ({name}): rmse {:.4}, nll {:.4}, mean ± 3σ",
            report.variant, report.rmse, report.nll
        );
        let svg = plot::render(
            &title,
            &plot::Series {
                y: &y,
                mean: &mean,
                lower: &lower,
                upper: &upper,
            },
        );
        write(&dir.join(format!("plot-{name}.svg")), svg)?;
    }
    Ok(())
}

pub const SUMMARY_HEADER: &str = "row,seed,variant,h_dim,z_dim,n_layers,rmse,nll,nll_moment_matched";

/// One row per report followed by `mean` and `std` rows.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{SUMMARY_HEADER}").unwrap();
    for r in reports {
        writeln!(
            s,
            "run,{},{},{},{},{},{:?},{:?},{:?}",
            r.seed.map(|x| x.to_string()).unwrap_or_default(),
            r.variant,
            r.h_dim,
            r.z_dim,
            r.n_layers,
            r.rmse,
            r.nll,
            r.nll_moment_matched
        )
        .unwrap();
    }
    let stats = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (rm, rs) = stats(|r| r.rmse);
    let (nm, ns) = stats(|r| r.nll);
    let (mm, ms) = stats(|r| r.nll_moment_matched);
    let first = &reports[0];
    let arch = format!("{},{},{},{}", first.variant, first.h_dim, first.z_dim, first.n_layers);
    writeln!(s, "mean,,{arch},{rm:?},{nm:?},{mm:?}").unwrap();
    writeln!(s, "std,,{arch},{rs:?},{ns:?},{ms:?}").unwrap();
    s
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let c = &a.common;
    let (cfg, out) = load(c)?;
    let tests = match &a.data {
        Some(p) => vec![TestSet {
            name: p.file_stem().map_or("test".into(), |s| s.to_string_lossy().into_owned()),
            data: load_csv_auto(p)?,
        }],
        None => resolve_datasets(&cfg, &out, None)?.tests,
    };

    let runs: Vec<(u64, PathBuf)> = match &a.checkpoint {
        Some(p) => vec![(c.seed.unwrap_or(0), p.clone())],
        None => {
            let mut runs = Vec::new();
            let dir = out.join("runs");
            let entries = fs::read_dir(&dir).with_context(|| format!("no trained runs in {}", dir.display()))?;
            for e in entries {
                let e = e?;
                let name = e.file_name().to_string_lossy().into_owned();
                if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
                    if c.seed.is_none_or(|s| s == seed) && e.path().join(CHECKPOINT).exists() {
                        runs.push((seed, e.path().join(CHECKPOINT)));
                    }
                }
            }
            runs.sort();
            if runs.is_empty() {
                return Err(tagged(ErrorKind::Data, format!("no checkpoints under {}", dir.display())));
            }
            runs
        }
    };

    let evaluated: Vec<Result<Vec<(String, EvalReport)>>> = pool(c.jobs)?.install(|| {
        runs.par_iter()
            .map(|(seed, ckpt)| {
                let model = load_model(ckpt)?;
                let reports = evaluate_tests(&model, &tests, *seed)?;
                let dir = ckpt.parent().unwrap_or(Path::new("."));
                for (name, r) in &reports {
                    write_report(dir, name, r, !a.no_plot)?;
                    eprintln!("seed {seed} {name}: rmse {:.4} nll {:.4}", r.rmse, r.nll);
                }
                Ok(reports)
            })
            .collect()
    });
    let mut by_test: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    for r in evaluated {
        for (name, rep) in r? {
            by_test.entry(name).or_default().push(rep);
        }
    }
    let summary_dir = match &a.checkpoint {
        Some(p) => p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        None => out.clone(),
    };
    for (name, reports) in &by_test {
        write(&summary_dir.join(format!("summary-{name}.csv")), summary_csv(reports))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct GridPoint {
    spec: ModelSpec,
    n_train: Option<usize>,
}

fn expand_grid(cfg: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    let g = &cfg.grid;
    if !g.n_train.is_empty() && !cfg.benchmark.is_synthetic() {
        return Err(tagged(ErrorKind::Config, "grid.n_train needs a synthetic benchmark"));
    }
    fn or<T: Clone>(list: &[T], base: T) -> Vec<T> {
        if list.is_empty() {
            vec![base]
        } else {
            list.to_vec()
        }
    }
    let base = &cfg.model;
    let variants: Vec<Variant> = or(&g.variant, base.variant);
    let n_train: Vec<Option<usize>> = or(&g.n_train.iter().map(|&n| Some(n)).collect::<Vec<_>>(), None);
    let mut points = Vec::new();
    for &variant in &variants {
        for &h_dim in &or(&g.h_dim, base.h_dim) {
            for &z_dim in &or(&g.z_dim, base.z_dim) {
                for &n_layers in &or(&g.n_layers, base.n_layers) {
                    for &n in &n_train {
                        let mut spec = base.clone();
                        spec.variant = variant;
                        spec.h_dim = h_dim;
                        spec.z_dim = z_dim;
                        spec.n_layers = n_layers;
                        if variant.is_gmm() != base.variant.is_gmm() {
                            spec.mixtures = None;
                        }
                        spec.to_config(1, 1).validate()?;
                        points.push(GridPoint { spec, n_train: n });
                    }
                }
            }
        }
    }
    Ok(points)
}

pub const GRID_SUMMARY_HEADER: &str =
    "rank,variant,h_dim,z_dim,n_layers,n_train,runs,failures,rmse_mean,rmse_std,nll_mean,nll_std,val_loss_mean";

pub fn gridsearch(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    let seeds = c.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let points = expand_grid(&cfg)?;
    let grid_dir = out.join("grid");
    refuse_existing(&grid_dir, c.force)?;
    fs::create_dir_all(&grid_dir)?;

    let mut data: BTreeMap<Option<usize>, Datasets> = BTreeMap::new();
    for p in &points {
        if !data.contains_key(&p.n_train) {
            data.insert(p.n_train, resolve_datasets(&cfg, &out, p.n_train)?);
        }
    }
    let jobs: Vec<(usize, usize, u64)> = (0..points.len())
        .flat_map(|pi| seeds.iter().enumerate().map(move |(si, &s)| (pi, si, s)))
        .collect();
    eprintln!("{} grid points x {} seeds = {} jobs", points.len(), seeds.len(), jobs.len());

    let results: Vec<std::result::Result<RunRecord, String>> = pool(c.jobs)?.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(j, &(pi, _, master))| {
                let p = &points[pi];
                let seed = derive_seed(master, j as u64);
                let dir = grid_dir.join(format!("job-{j}"));
                let r = run_job(&cfg, &p.spec, &data[&p.n_train], seed, &dir).map_err(|e| format!("{e:#}"));
                match &r {
                    Ok(o) => eprintln!("job {j}: test rmse {:.4}", o.test_rmse.unwrap_or(f64::NAN)),
                    Err(e) => eprintln!("job {j}: failed: {e}"),
                }
                r
            })
            .collect()
    });

    let mut jobs_csv = String::from("job,variant,h_dim,z_dim,n_layers,n_train,seed,status,stop_reason,val_loss,rmse,nll\n");
    struct Agg {
        rmse: Vec<f64>,
        nll: Vec<f64>,
        val: Vec<f64>,
        failures: usize,
    }
    let mut agg: Vec<Agg> = points
        .iter()
        .map(|_| Agg {
            rmse: vec![],
            nll: vec![],
            val: vec![],
            failures: 0,
        })
        .collect();
    let (n_default, _, _) = cfg.sizes();
    for (j, ((pi, _, master), r)) in jobs.iter().zip(&results).enumerate() {
        let p = &points[*pi];
        let s = &p.spec;
        let n = p.n_train.unwrap_or(n_default);
        let prefix = format!("{j},{},{},{},{},{n},{master}", s.variant, s.h_dim, s.z_dim, s.n_layers);
        match r {
            Ok(o) if o.stop_reason != StopReason::NanAbort => {
                let rmse = o.test_rmse.unwrap_or(f64::NAN);
                let nll = o.test_nll.unwrap_or(f64::NAN);
                writeln!(
                    jobs_csv,
                    "{prefix},ok,{},{:?},{rmse:?},{nll:?}",
                    o.stop_reason.as_str(),
                    o.best_val_loss
                )
                .unwrap();
                agg[*pi].rmse.push(rmse);
                agg[*pi].nll.push(nll);
                agg[*pi].val.push(o.best_val_loss);
            }
            Ok(o) => {
                writeln!(jobs_csv, "{prefix},failed,nan-abort,,,").unwrap();
                let _ = o;
                agg[*pi].failures += 1;
            }
            Err(_) => {
                writeln!(jobs_csv, "{prefix},failed,,,,").unwrap();
                agg[*pi].failures += 1;
            }
        }
    }
    write(&grid_dir.join("jobs.csv"), jobs_csv)?;

    let mut rows: Vec<(f64, String)> = points
        .iter()
        .zip(&agg)
        .map(|(p, a)| {
            let (rm, rs) = mean_std(&a.rmse);
            let (nm, ns) = mean_std(&a.nll);
            let (vm, _) = mean_std(&a.val);
            let s = &p.spec;
            let n = p.n_train.unwrap_or(n_default);
            let row = format!(
                "{},{},{},{},{n},{},{},{rm:?},{rs:?},{nm:?},{ns:?},{vm:?}",
                s.variant,
                s.h_dim,
                s.z_dim,
                s.n_layers,
                a.rmse.len(),
                a.failures
            );
            (if rm.is_nan() { f64::INFINITY } else { rm }, row)
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut summary = format!("{GRID_SUMMARY_HEADER}\n");
    for (rank, (_, row)) in rows.iter().enumerate() {
        writeln!(summary, "{},{row}", rank + 1).unwrap();
    }
    write(&grid_dir.join("summary.csv"), summary)?;
    eprintln!("wrote {}", grid_dir.join("summary.csv").display());
    Ok(())
}
