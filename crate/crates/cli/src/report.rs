//! Result collection: one summary table plus deterministic SVG plots
//! regenerated bit-identically from the same inputs.

use crate::ReportArgs;
use anyhow::Result;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const KNOWN_RESULTS: [&str; 5] = [
    "zero_shot.json",
    "retrieval.json",
    "phenotypes.json",
    "disease.json",
    "scaling.json",
];

fn metric_rows_from(name: &str, value: &Value, rows: &mut Vec<(String, f64, f64, f64, u64)>) {
    let push = |rows: &mut Vec<(String, f64, f64, f64, u64)>, label: String, report: &Value| {
        if let (Some(p), Some(lo), Some(hi)) = (
            report.get("point_estimate").and_then(Value::as_f64),
            report.get("ci_low").and_then(Value::as_f64),
            report.get("ci_high").and_then(Value::as_f64),
        ) {
            let n = report.get("n_boot").and_then(Value::as_u64).unwrap_or(0);
            rows.push((label, p, lo, hi, n));
        }
    };
    match name {
        "zero_shot.json" => {
            if let Some(findings) = value.get("per_finding").and_then(Value::as_array) {
                for f in findings {
                    if let (Some(finding), Some(f1)) =
                        (f.get("finding").and_then(Value::as_str), f.get("f1"))
                    {
                        push(rows, format!("zero_shot_f1/{finding}"), f1);
                    }
                }
            }
            if let Some(macro_f1) = value.get("macro_f1").and_then(Value::as_f64) {
                rows.push(("zero_shot_macro_f1".into(), macro_f1, macro_f1, macro_f1, 0));
            }
        }
        "retrieval.json" => {
            if let Some(recall) = value.get("recall") {
                let label = match (
                    value.pointer("/config/k").and_then(Value::as_u64),
                    value.pointer("/config/pool_size").and_then(Value::as_u64),
                ) {
                    (Some(k), Some(n)) => format!("recall_at_{k}_pool_{n}"),
                    _ => "recall".into(),
                };
                push(rows, label, recall);
            }
        }
        "phenotypes.json" => {
            if let Some(r) = value.get("macro_auroc") {
                push(rows, "phenotype_macro_auroc".into(), r);
            }
            if let Some(r) = value.get("macro_auprc") {
                push(rows, "phenotype_macro_auprc".into(), r);
            }
        }
        "disease.json" => {
            if let Some(map) = value.get("per_disease").and_then(Value::as_object) {
                for (disease, r) in map {
                    push(rows, format!("disease_auroc/{disease}"), r);
                }
            }
        }
        "scaling.json" => {
            if let Some(fits) = value.get("fits").and_then(Value::as_object) {
                for (metric, fit) in fits {
                    if let (Some(a), Some(b)) = (
                        fit.get("a").and_then(Value::as_f64),
                        fit.get("b").and_then(Value::as_f64),
                    ) {
                        rows.push((format!("scaling_a/{metric}"), a, a, a, 0));
                        rows.push((format!("scaling_b/{metric}"), b, b, b, 0));
                    }
                }
            }
        }
        _ => {}
    }
}

fn svg_header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" \
         font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    )
}

/// Horizontal bar chart sorted by value descending.
fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let width = 640.0;
    let row_h = 22.0;
    let height = 60.0 + bars.len() as f64 * row_h;
    let mut s = svg_header(width, height);
    let _ = write!(s, "<text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>\n");
    let max = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-9);
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = 40.0 + i as f64 * row_h;
        let w = 360.0 * (value / max).clamp(0.0, 1.0);
        let _ = write!(
            s,
            "<text x=\"10\" y=\"{:.1}\">{label}</text>\n\
             <rect x=\"210\" y=\"{:.1}\" width=\"{w:.2}\" height=\"14\" fill=\"#4477aa\"/>\n\
             <text x=\"{:.2}\" y=\"{:.1}\">{value:.3}</text>\n",
            y + 11.0,
            y,
            215.0 + w,
            y + 11.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Log-x scatter with the fitted power-law line per metric.
fn scaling_svg(points: &BTreeMap<String, Vec<(f64, f64)>>, fits: &BTreeMap<String, (f64, f64)>) -> String {
    let (width, height) = (640.0, 400.0);
    let (x0, y0, x1, y1) = (70.0, 340.0, 600.0, 40.0);
    let mut s = svg_header(width, height);
    let all: Vec<(f64, f64)> = points.values().flatten().copied().collect();
    if all.is_empty() {
        s.push_str("<text x=\"10\" y=\"20\">no scaling points</text>\n</svg>\n");
        return s;
    }
    let (min_x, max_x) = all
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
    let (min_y, max_y) = all
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), (_, y)| (lo.min(*y), hi.max(*y)));
    let pad_y = (max_y - min_y).max(1e-9) * 0.15;
    let (lo_y, hi_y) = (min_y - pad_y, max_y + pad_y);
    let sx = |x: f64| x0 + (x.ln() - min_x.ln()) / (max_x.ln() - min_x.ln()).max(1e-12) * (x1 - x0);
    let sy = |y: f64| y0 + (y - lo_y) / (hi_y - lo_y) * (y1 - y0);
    let _ = write!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"260\" y=\"375\">dataset size (log scale)</text>\n"
    );
    let colors = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee"];
    for (mi, (metric, pts)) in points.iter().enumerate() {
        let color = colors[mi % colors.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(&(a, b)) = fits.get(metric) {
            let mut path = String::new();
            for (i, (x, _)) in sorted.iter().enumerate() {
                let yfit = a * x.powf(b);
                let _ = write!(path, "{}{:.2},{:.2}", if i == 0 { "" } else { " " }, sx(*x), sy(yfit));
            }
            let _ = write!(
                s,
                "<polyline points=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"4 2\"/>\n"
            );
        }
        for (x, y) in &sorted {
            let _ = write!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            );
        }
        let _ = write!(
            s,
            "<text x=\"{:.0}\" y=\"{:.0}\" fill=\"{color}\">{metric}</text>\n",
            x1 - 160.0,
            y1 + 16.0 * (mi as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_report(args: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut rows: Vec<(String, f64, f64, f64, u64)> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut loaded: BTreeMap<String, Value> = BTreeMap::new();

    for name in KNOWN_RESULTS {
        let path = find_result(&args.results, name);
        match path {
            Some(p) => {
                let value: Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                metric_rows_from(name, &value, &mut rows);
                loaded.insert(name.to_string(), value);
            }
            None => warnings.push(format!("missing result file {name}")),
        }
    }

    let mut w = csv::Writer::from_path(args.out.join("summary.csv"))?;
    w.write_record(["metric", "point", "ci_low", "ci_high", "n"])?;
    for (name, p, lo, hi, n) in &rows {
        w.write_record([
            name.clone(),
            format!("{p:.6}"),
            format!("{lo:.6}"),
            format!("{hi:.6}"),
            n.to_string(),
        ])?;
    }
    w.flush()?;

    // Per-finding zero-shot bars, highest first.
    if let Some(zs) = loaded.get("zero_shot.json") {
        let mut bars: Vec<(String, f64)> = zs
            .get("per_finding")
            .and_then(Value::as_array)
            .map(|fs| {
                fs.iter()
                    .filter_map(|f| {
                        Some((
                            f.get("finding")?.as_str()?.to_string(),
                            f.pointer("/f1/point_estimate")?.as_f64()?,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        bars.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        std::fs::write(
            args.out.join("zero_shot_f1.svg"),
            bar_chart_svg("Zero-shot F1 by finding", &bars),
        )?;
    }

    // Scaling curves.
    if let Some(sc) = loaded.get("scaling.json") {
        let mut points: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        if let Some(map) = sc.get("points").and_then(Value::as_object) {
            for (metric, pts) in map {
                if let Some(arr) = pts.as_array() {
                    let v: Vec<(f64, f64)> = arr
                        .iter()
                        .filter_map(|p| {
                            let pair = p.as_array()?;
                            Some((pair[0].as_f64()?, pair[1].as_f64()?))
                        })
                        .collect();
                    points.insert(metric.clone(), v);
                }
            }
        }
        let mut fits = BTreeMap::new();
        if let Some(map) = sc.get("fits").and_then(Value::as_object) {
            for (metric, fit) in map {
                if let (Some(a), Some(b)) = (
                    fit.get("a").and_then(Value::as_f64),
                    fit.get("b").and_then(Value::as_f64),
                ) {
                    fits.insert(metric.clone(), (a, b));
                }
            }
        }
        // Long-format table: metric, size, value.
        let mut w = csv::Writer::from_path(args.out.join("scaling_long.csv"))?;
        w.write_record(["metric", "size", "value"])?;
        for (metric, pts) in &points {
            for (x, y) in pts {
                w.write_record([metric.clone(), format!("{x}"), format!("{y:.6}")])?;
            }
        }
        w.flush()?;
        std::fs::write(args.out.join("scaling_curves.svg"), scaling_svg(&points, &fits))?;
    }

    std::fs::write(
        args.out.join("warnings.json"),
        serde_json::to_string_pretty(&warnings)?,
    )?;
    println!(
        "report: {} metric rows, {} warnings → {}",
        rows.len(),
        warnings.len(),
        args.out.display()
    );
    for warning in &warnings {
        println!("warning: {warning}");
    }
    Ok(())
}

/// A result file may sit at the top level or one directory down.
fn find_result(results_dir: &Path, name: &str) -> Option<std::path::PathBuf> {
    let direct = results_dir.join(name);
    if direct.exists() {
        return Some(direct);
    }
    let mut candidates: Vec<std::path::PathBuf> = std::fs::read_dir(results_dir)
        .ok()?
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path().join(name))
        .filter(|p| p.exists())
        .collect();
    candidates.sort();
    candidates.into_iter().next()
}
