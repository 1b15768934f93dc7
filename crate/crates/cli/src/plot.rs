use std::path::Path;

use anyhow::Context;
use serde_json::json;

use flowssn::datagen::ShapeAtlas;
use flowssn::training::label_covariance;

use crate::commands::{
    ensure_parent, exact_markovshapes_covariance, load_checkpoint_model, sidecar, unconditional_samples, write_json,
};
use crate::images::{gray_scale, min_max, write_ppm, Chart, Series};
use crate::{usage, CliResult, PlotArgs, PlotKind};

const CHART_W: usize = 480;
const CHART_H: usize = 320;

fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

/// `(x, y)` pairs from two named columns, skipping rows with an empty `y`.
fn read_columns(path: &Path, x_col: &str, y_col: &str) -> CliResult<Vec<(f64, f64)>> {
    if !path.exists() {
        return usage(format!("input {} does not exist", path.display()));
    }
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rd.headers().context("csv header")?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(xi), Some(yi)) = (find(x_col), find(y_col)) else {
        return usage(format!("{} lacks columns {x_col} and {y_col}", path.display()));
    };
    let mut points = Vec::new();
    for rec in rd.records() {
        let rec = rec.context("csv record")?;
        if rec[yi].trim().is_empty() {
            continue;
        }
        let x: f64 = rec[xi].parse().with_context(|| format!("bad {x_col} value {:?}", &rec[xi]))?;
        let y: f64 = rec[yi].parse().with_context(|| format!("bad {y_col} value {:?}", &rec[yi]))?;
        points.push((x, y));
    }
    Ok(points)
}

fn write_tidy<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header).context("csv")?;
    for r in rows {
        w.write_record(&r).context("csv")?;
    }
    w.flush().context("csv")?;
    Ok(())
}

fn line_chart(a: &PlotArgs, inputs: &[std::path::PathBuf], x_col: &str, y_col: &str, log_x: bool) -> CliResult<serde_json::Value> {
    if inputs.is_empty() {
        return usage(format!("--kind {:?} needs at least one input file", a.kind));
    }
    let mut series = Vec::new();
    for p in inputs {
        let mut points = read_columns(p, x_col, y_col)?;
        if points.is_empty() {
            return usage(format!("{} has no {y_col} values", p.display()));
        }
        points.sort_by(|l, r| l.0.total_cmp(&r.0));
        series.push(Series { label: series_label(p), points });
    }
    let chart = Chart::new(CHART_W, CHART_H, &series, log_x);
    write_ppm(&a.out, chart.width, chart.height, chart.rgb())?;
    let rows = series.iter().flat_map(|s| s.points.iter().map(|(x, y)| [s.label.clone(), x.to_string(), y.to_string()]));
    write_tidy(&a.out.with_extension("csv"), ["series", x_col, y_col], rows)?;
    let legend: Vec<_> = series
        .iter()
        .enumerate()
        .map(|(i, s)| json!({ "series": s.label, "colour": crate::images::PALETTE[i % crate::images::PALETTE.len()] }))
        .collect();
    Ok(json!({ "legend": legend, "x_range": chart.x_range(), "y_range": chart.y_range(), "log_x": log_x }))
}

fn covariance_panels(a: &PlotArgs) -> CliResult<serde_json::Value> {
    let Some(ckpt) = &a.checkpoint else {
        return usage("--kind covariance needs --checkpoint");
    };
    if a.samples < 2 {
        return usage("--samples must be at least 2");
    }
    let model = load_checkpoint_model(ckpt)?;
    let (k, h, w) = model.spec.label_shape();
    if k != 2 || h != w || h % 2 != 0 {
        return usage("covariance panels need a binary MarkovShapes checkpoint");
    }
    let atlas = ShapeAtlas::new(h / 2)?;
    let exact = exact_markovshapes_covariance(&atlas);
    let learned = label_covariance(&unconditional_samples(&model, a.samples, a.seed)?, 1);
    let (l0, h0) = min_max(&exact.data);
    let (l1, h1) = min_max(&learned.data);
    let (lo, hi) = (l0.min(l1), h0.max(h1));
    let d = exact.rows;
    let gap = 4;
    let width = 2 * d + gap;
    let mut rgb = vec![255u8; 3 * width * d];
    for (panel, m) in [&exact, &learned].into_iter().enumerate() {
        let g = gray_scale(&m.data, lo, hi);
        for i in 0..d {
            for j in 0..d {
                let o = 3 * (i * width + panel * (d + gap) + j);
                rgb[o..o + 3].fill(g[i * d + j]);
            }
        }
    }
    write_ppm(&a.out, width, d, &rgb)?;
    let rows = [("exact", &exact), ("learned", &learned)].into_iter().flat_map(|(name, m)| {
        (0..d * d).map(move |idx| [name.to_string(), (idx / d).to_string(), (idx % d).to_string(), m.data[idx].to_string()])
    });
    write_tidy(&a.out.with_extension("csv"), ["panel", "i", "j", "value"], rows)?;
    let rel = flowssn::training::relative_frobenius(&learned, &exact);
    Ok(json!({ "scale": { "min": lo, "max": hi }, "panels": ["exact", "learned"], "relative_frobenius": rel }))
}

pub fn plot(a: PlotArgs) -> CliResult<()> {
    ensure_parent(&a.out)?;
    let summary = match a.kind {
        PlotKind::Bpd => line_chart(&a, &a.log, "step", "eval_metric", false)?,
        PlotKind::GedVsSteps => line_chart(&a, &a.report, "steps", "ged16", true)?,
        PlotKind::Covariance => covariance_panels(&a)?,
    };
    write_json(
        &sidecar(&a.out),
        &json!({
            "command": "plot",
            "kind": format!("{:?}", a.kind),
            "log": a.log,
            "report": a.report,
            "checkpoint": a.checkpoint,
            "samples": a.samples,
            "seed": a.seed,
            "out": a.out,
            "summary": summary,
        }),
    )?;
    Ok(())
}
