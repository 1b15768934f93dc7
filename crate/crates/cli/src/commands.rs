use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use flowssn::datagen::{
    dataset_read, markovshapes_exact_covariance, markovshapes_generate, multirater_generate, Dataset,
    InitialDistribution, LabelMap, MultiraterConfig, ShapeAtlas, TransitionMatrix,
};
use flowssn::flows_continuous::SolverConfig;
use flowssn::linalg::Matrix;
use flowssn::metrics::{uncertainty_map, SampleSet};
use flowssn::rank_analysis::{concavity_statistic, pushforward_covariance_mc, rank_seed, RankReport, SpecFamily};
use flowssn::tensor::Tensor;
use flowssn::training::{self, write_evaluation_csv, ModelSpec, RunConfig, TrainedModel, EVAL_SEED};

use crate::images::{class_preview, gray_scale, min_max, upscale, write_pgm, write_ppm};
use crate::{usage, CliResult, DatasetKind, EvaluateArgs, Family, GenerateArgs, RankArgs, SampleArgs, SolverArgs, TrainArgs};

pub const RUN_MANIFEST: &str = "run_manifest.json";

pub fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialise") + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Manifest path for a command whose output is a single file.
pub fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if !path.exists() {
        return usage(format!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    require_exists(path, "dataset")?;
    Ok(dataset_read(path)?)
}

fn parse_shape(s: &str) -> CliResult<(usize, usize)> {
    let parsed = s.split_once(['x', 'X']).and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => usage(format!("--shape expects HxW, got {s:?}")),
    }
}

pub fn generate_data(a: GenerateArgs) -> CliResult<()> {
    if a.count == 0 {
        return usage("--count must be positive");
    }
    let manifest = match a.dataset {
        DatasetKind::Markovshapes => {
            if a.raters.is_some() || a.shape.is_some() {
                return usage("--raters/--shape apply to the multirater dataset only");
            }
            let q = a.quadrant_size.unwrap_or(8);
            if q < 3 {
                return usage("--quadrant-size must be at least 3");
            }
            markovshapes_generate(&a.out, a.seed, a.count, q)?
        }
        DatasetKind::Multirater => {
            if a.quadrant_size.is_some() {
                return usage("--quadrant-size applies to markovshapes only");
            }
            let mut cfg = MultiraterConfig::default();
            if let Some(r) = a.raters {
                cfg.raters = r;
            }
            if let Some(s) = &a.shape {
                (cfg.height, cfg.width) = parse_shape(s)?;
            }
            if let Err(e) = cfg.validate() {
                return usage(e.to_string());
            }
            multirater_generate(&a.out, a.seed, a.count, &cfg)?
        }
    };
    write_json(
        &a.out.join(RUN_MANIFEST),
        &json!({
            "command": "generate-data",
            "dataset": manifest.name,
            "out": a.out,
            "seed": a.seed,
            "count": a.count,
            "generator": manifest.generator,
        }),
    )?;
    Ok(())
}

fn heatmap(path: &Path, m: &Matrix) -> anyhow::Result<serde_json::Value> {
    let (lo, hi) = min_max(&m.data);
    write_pgm(path, m.cols, m.rows, &gray_scale(&m.data, lo, hi))?;
    Ok(json!({ "file": path.file_name().map(|f| f.to_string_lossy().into_owned()), "min": lo, "max": hi }))
}

fn stem_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "rank".into());
    out.with_file_name(format!("{stem}_{suffix}.pgm"))
}

/// Quadrant size recorded by the MarkovShapes generator.
pub fn markovshapes_atlas(ds: &Dataset) -> CliResult<ShapeAtlas> {
    if ds.manifest.name != "markovshapes" {
        return usage(format!("expected a markovshapes dataset, found {:?}", ds.manifest.name));
    }
    let q = ds.manifest.generator["quadrant_size"]
        .as_u64()
        .ok_or_else(|| crate::CliError::Usage("dataset manifest lacks quadrant_size".into()))?;
    Ok(ShapeAtlas::new(q as usize)?)
}

pub fn exact_markovshapes_covariance(atlas: &ShapeAtlas) -> Matrix {
    markovshapes_exact_covariance(&TransitionMatrix::markov_shapes(), &InitialDistribution::uniform(), atlas).1
}

pub fn analyze_rank(a: RankArgs) -> CliResult<()> {
    if !(a.rel_tol > 0.0 && a.rel_tol < 1.0) {
        return usage("--rel-tol must lie in (0, 1)");
    }
    ensure_parent(&a.out)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut maps = Vec::new();
    let mut extra = json!({});
    let header: Vec<&str>;
    if let Some(dir) = &a.dataset {
        let ds = read_dataset(dir)?;
        let atlas = markovshapes_atlas(&ds)?;
        let exact = exact_markovshapes_covariance(&atlas);
        let mut acc = flowssn::linalg::CovarianceAccumulator::new(exact.rows);
        for rec in ds.iter() {
            for l in &rec.labels {
                let fg: Vec<f64> = l.foreground().iter().map(|&b| b as u8 as f64).collect();
                acc.push_rows(&fg);
            }
        }
        let empirical = acc.covariance();
        header = vec!["source", "r", "numerical_rank", "effective_rank", "N", "rel_tol", "seed"];
        for (source, cov, n, tol) in [("exact", &exact, 0, 1e-8), ("empirical", &empirical, acc.count(), a.rel_tol)] {
            let rep = RankReport::from_covariance(cov, 0, n, tol, ds.manifest.rng_seed)?;
            let mut row = vec![source.to_string()];
            row.extend(rep.csv_record());
            rows.push(row);
            maps.push(heatmap(&stem_path(&a.out, source), cov)?);
        }
    } else {
        let spec = a.synthetic.as_deref().unwrap_or_default();
        let (k, d) = match spec.split_once(',').and_then(|(k, d)| Some((k.trim().parse().ok()?, d.trim().parse().ok()?))) {
            Some((k, d)) if k >= 2 && d >= 1 => (k, d),
            _ => return usage(format!("--synthetic expects k,d with k >= 2, got {spec:?}")),
        };
        if a.ranks.is_empty() || a.ranks.windows(2).any(|w| w[1] <= w[0]) || a.ranks[0] == 0 {
            return usage("--ranks must be a strictly increasing list of positive integers");
        }
        if a.samples < 2 {
            return usage("--samples must be at least 2");
        }
        let family = match a.family {
            Family::Default => SpecFamily::default_sublinearity(),
            Family::Floor => SpecFamily::floor_diagonal(),
        };
        header = RankReport::csv_header().to_vec();
        let mut eranks = Vec::new();
        for &r in &a.ranks {
            let s = rank_seed(a.seed, r);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let lowrank = family.sample(r, k * d, &mut rng);
            let cov = pushforward_covariance_mc(&lowrank, k, d, a.samples, &mut rng);
            let rep = RankReport::from_covariance(&cov, r, a.samples, a.rel_tol, s)?;
            eranks.push(rep.effective_rank);
            rows.push(rep.csv_record().to_vec());
            maps.push(heatmap(&stem_path(&a.out, &format!("r{r}")), &cov)?);
        }
        let diffs: Vec<f64> = eranks.windows(2).map(|w| w[1] - w[0]).collect();
        let slopes: Vec<f64> = diffs.iter().zip(a.ranks.windows(2)).map(|(de, w)| de / (w[1] - w[0]) as f64).collect();
        extra = json!({ "k": k, "d": d, "differences": diffs, "slopes": slopes, "concavity": concavity_statistic(&slopes) });
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(&header).context("csv")?;
    for r in &rows {
        w.write_record(r).context("csv")?;
    }
    w.flush().context("csv")?;
    write_json(
        &sidecar(&a.out),
        &json!({
            "command": "analyze-rank",
            "dataset": a.dataset,
            "synthetic": a.synthetic,
            "ranks": a.ranks,
            "samples": a.samples,
            "seed": a.seed,
            "rel_tol": a.rel_tol,
            "family": format!("{:?}", a.family).to_lowercase(),
            "out": a.out,
            "heatmaps": maps,
            "summary": extra,
        }),
    )?;
    Ok(())
}

/// Loads a TOML run configuration; relative paths resolve against the
/// file's directory.
pub fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    require_exists(path, "config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: RunConfig = match toml::from_str(&text) {
        Ok(c) => c,
        Err(e) => return usage(format!("invalid config {}: {e}", path.display())),
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut cfg.dataset);
    resolve(&mut cfg.output_dir);
    if let Some(v) = cfg.val_dataset.as_mut() {
        resolve(v);
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let resolved = toml::to_string(&cfg).context("serialising config")?;
    fs::write(cfg.output_dir.join("config.resolved.toml"), resolved).context("writing resolved config")?;
    write_json(
        &cfg.output_dir.join(RUN_MANIFEST),
        &json!({ "command": "train", "config": cfg, "seed": cfg.seed }),
    )?;
    let out = training::train(&cfg)?;
    eprintln!(
        "trained {} steps; final loss {:.4}; checkpoint {}",
        out.losses.len(),
        out.losses.last().copied().unwrap_or(f64::NAN),
        out.last_checkpoint.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    require_exists(path, "checkpoint")?;
    Ok(TrainedModel::load(path)?)
}

/// Solver from flags, defaulting to the checkpoint's training solver.
fn resolve_solver(args: &SolverArgs, model: &TrainedModel) -> CliResult<SolverConfig> {
    let continuous = matches!(model.spec, ModelSpec::Continuous { .. });
    if !continuous && (args.steps.is_some() || args.adaptive) {
        eprintln!("warning: solver flags are ignored; this model samples in a single pass");
    }
    let solver = if args.adaptive {
        SolverConfig::dopri5(args.tol)
    } else if let Some(steps) = args.steps {
        SolverConfig::Euler { steps }
    } else {
        model.config.solver.clone()
    };
    if let Err(e) = solver.validate() {
        return usage(e.to_string());
    }
    Ok(solver)
}

fn conditioning_image(model: &TrainedModel, dataset: Option<&Path>, index: usize) -> CliResult<Option<Tensor>> {
    if !model.spec.is_conditional() {
        return Ok(None);
    }
    let Some(dir) = dataset else {
        return usage("this checkpoint is conditional; pass --dataset to supply an input image");
    };
    let ds = read_dataset(dir)?;
    if index >= ds.len() {
        return usage(format!("--index {index} out of range for {} images", ds.len()));
    }
    let [c, h, w] = ds.manifest.image_shape;
    let rec = ds.record(index);
    Ok(Some(Tensor::new(&[1, c, h, w], rec.image.iter().map(|&v| v as f64).collect())))
}

pub fn sample(a: SampleArgs) -> CliResult<()> {
    if a.m == 0 {
        return usage("--m must be positive");
    }
    let model = load_model(&a.checkpoint)?;
    let solver = resolve_solver(&a.solver, &model)?;
    let image = conditioning_image(&model, a.dataset.as_deref(), a.index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let labels = model.sample_labels(image.as_ref(), a.m, &solver, &mut rng)?;
    let (k, h, w) = model.spec.label_shape();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.values().iter().copied()).collect();
    fs::write(a.out.join("labels.bin"), &bytes).context("writing labels.bin")?;
    let scale = (128 / h.max(w)).max(1);
    for (i, l) in labels.iter().enumerate() {
        let rgb = class_preview(&l.classes(), k);
        let big: Vec<u8> = {
            let mut out = Vec::with_capacity(rgb.len() * scale * scale);
            for r in 0..h * scale {
                for c in 0..w * scale {
                    let p = ((r / scale) * w + c / scale) * 3;
                    out.extend_from_slice(&rgb[p..p + 3]);
                }
            }
            out
        };
        write_ppm(&a.out.join(format!("sample_{i:03}.ppm")), w * scale, h * scale, &big)?;
    }
    let mut uncertainty = serde_json::Value::Null;
    if a.m >= 2 {
        let set = SampleSet::new(labels.clone(), vec![labels[0].clone()])?;
        let map = uncertainty_map(&set)?;
        let hi = (k as f64).log2();
        write_pgm(&a.out.join("uncertainty.pgm"), w * scale, h * scale, &upscale(&gray_scale(&map, 0.0, hi), w, h, scale))?;
        let mut wr = csv::Writer::from_path(a.out.join("uncertainty.csv")).context("writing uncertainty.csv")?;
        wr.write_record(["row", "col", "entropy_bits"]).context("csv")?;
        for (j, v) in map.iter().enumerate() {
            wr.write_record([(j / w).to_string(), (j % w).to_string(), v.to_string()]).context("csv")?;
        }
        wr.flush().context("csv")?;
        uncertainty = json!({ "file": "uncertainty.pgm", "min": 0.0, "max": hi, "units": "bits" });
    } else {
        eprintln!("warning: one sample gives no uncertainty map");
    }
    write_json(
        &a.out.join(RUN_MANIFEST),
        &json!({
            "command": "sample",
            "checkpoint": a.checkpoint,
            "m": a.m,
            "solver": solver,
            "seed": a.seed,
            "dataset": a.dataset,
            "index": a.index,
            "labels": { "file": "labels.bin", "dtype": "uint8", "shape": [a.m, k, h, w], "order": "C" },
            "uncertainty": uncertainty,
        }),
    )?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    if a.m == 0 {
        return usage("--m must be positive");
    }
    let model = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    let name = a.checkpoint.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ensure_parent(&a.out)?;
    let solvers: Vec<SolverConfig> = if a.sweep.is_empty() {
        vec![resolve_solver(&a.solver, &model)?]
    } else {
        if a.sweep.contains(&0) {
            return usage("--sweep step counts must be positive");
        }
        a.sweep.iter().map(|&steps| SolverConfig::Euler { steps }).collect()
    };
    let mut reports = Vec::new();
    for solver in &solvers {
        let eval = training::evaluate_model(&model, &name, &ds, a.m, solver, EVAL_SEED)?;
        reports.push(eval);
    }
    if a.sweep.is_empty() {
        write_evaluation_csv(&a.out, &reports[0], &ds.manifest.name, &name, a.m, ds.len(), EVAL_SEED)?;
    } else {
        let mut wr = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
        let mut header = vec!["steps".to_string()];
        header.extend(flowssn::metrics::MetricReport::csv_header().iter().map(|h| {
            if *h == "gedM" {
                format!("ged{}", a.m)
            } else {
                h.to_string()
            }
        }));
        wr.write_record(&header).context("csv")?;
        for (steps, eval) in a.sweep.iter().zip(&reports) {
            let Some(r) = &eval.report else {
                return usage("--sweep needs a conditional model");
            };
            let mut row = vec![steps.to_string()];
            row.extend(r.csv_record());
            wr.write_record(&row).context("csv")?;
        }
        wr.flush().context("csv")?;
    }
    write_json(
        &sidecar(&a.out),
        &json!({
            "command": "evaluate",
            "checkpoint": a.checkpoint,
            "dataset": a.dataset,
            "m": a.m,
            "solvers": solvers,
            "seed": EVAL_SEED,
            "out": a.out,
        }),
    )?;
    Ok(())
}

/// Sampled label maps of an unconditional checkpoint.
pub fn unconditional_samples(model: &TrainedModel, m: usize, seed: u64) -> CliResult<Vec<LabelMap>> {
    if model.spec.is_conditional() {
        return usage("covariance panels need an unconditional (MarkovShapes) checkpoint");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.sample_labels(None, m, &model.config.solver, &mut rng)?)
}

pub fn load_checkpoint_model(path: &Path) -> CliResult<TrainedModel> {
    load_model(path)
}
