use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use docclean::trainer::ExperimentSummary;
use docclean::{Error, Result};
use plotters::prelude::*;
use serde::Serialize;

use crate::artifacts::read_json;

/// Every `summary.json` below the given roots, sorted by path.
pub fn find_summaries(roots: &[PathBuf]) -> Result<Vec<(PathBuf, ExperimentSummary)>> {
    let mut paths = Vec::new();
    for root in roots {
        collect(root, &mut paths)?;
    }
    paths.sort();
    paths.dedup();
    paths.into_iter().map(|p| read_json(&p).map(|s| (p, s))).collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(dir.to_path_buf()),
        _ => Error::Io {
            path: dir.to_path_buf(),
            source: e,
        },
    })?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget_percent: f64,
    pub strategy: String,
    pub prune_fraction: f64,
    pub beta: f64,
    pub runs: usize,
    pub median_test_word_accuracy: f64,
    pub median_approximation_accuracy: f64,
    pub median_train_queries: f64,
}

/// Runs grouped by everything except the seed, with medians over seeds.
pub fn sweep_rows(summaries: &[(PathBuf, ExperimentSummary)]) -> Vec<SweepRow> {
    type Key = (u64, String, u64, u64);
    let mut groups: BTreeMap<Key, Vec<&ExperimentSummary>> = BTreeMap::new();
    for (_, s) in summaries {
        let c = &s.config;
        let key = (
            c.budget.percent.to_bits(),
            c.budget.strategy.to_string(),
            c.data.prune_fraction.to_bits(),
            c.train.beta.to_bits(),
        );
        groups.entry(key).or_default().push(s);
    }
    let mut rows: Vec<SweepRow> = groups
        .into_iter()
        .map(|((b, strategy, p, beta), runs)| {
            let mut acc: Vec<f64> = runs.iter().map(|s| s.test_word_accuracy).collect();
            let mut approx: Vec<f64> = runs.iter().map(|s| s.test_approximation_accuracy).collect();
            let mut q: Vec<f64> = runs.iter().map(|s| s.train_queries as f64).collect();
            SweepRow {
                budget_percent: f64::from_bits(b),
                strategy,
                prune_fraction: f64::from_bits(p),
                beta: f64::from_bits(beta),
                runs: runs.len(),
                median_test_word_accuracy: median(&mut acc),
                median_approximation_accuracy: median(&mut approx),
                median_train_queries: median(&mut q),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.prune_fraction
            .total_cmp(&b.prune_fraction)
            .then(a.strategy.cmp(&b.strategy))
            .then(a.budget_percent.total_cmp(&b.budget_percent))
            .then(a.beta.total_cmp(&b.beta))
    });
    rows
}

pub fn markdown_table(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "| budget % | strategy | prune | beta | runs | test word acc | approx acc | train queries |\n|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {} |",
            r.budget_percent,
            r.strategy,
            r.prune_fraction,
            r.beta,
            r.runs,
            r.median_test_word_accuracy,
            r.median_approximation_accuracy,
            r.median_train_queries
        );
    }
    s
}

/// Remarks on the budget sweep for one strategy at prune 0: monotonicity
/// and where the largest step sits.
pub fn budget_trend_notes(rows: &[SweepRow]) -> Vec<String> {
    let mut by_strategy: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.prune_fraction == 0.0) {
        by_strategy.entry(r.strategy.as_str()).or_default().push(r);
    }
    let mut notes = Vec::new();
    for (strategy, mut rs) in by_strategy {
        rs.sort_by(|a, b| a.budget_percent.total_cmp(&b.budget_percent));
        if rs.len() < 2 {
            continue;
        }
        let steps: Vec<f64> = rs.windows(2).map(|w| w[1].median_test_word_accuracy - w[0].median_test_word_accuracy).collect();
        let monotone = steps.iter().all(|d| *d >= 0.0);
        let (i, _) = steps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, d)| if *d > best.1 { (i, *d) } else { best });
        notes.push(format!(
            "{strategy}: median accuracy {} in budget; largest step between {}% and {}%",
            if monotone { "non-decreasing" } else { "not monotone" },
            rs[i].budget_percent,
            rs[i + 1].budget_percent
        ));
    }
    notes
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: "plot".into(),
        detail: e.to_string(),
    }
}

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

/// Accuracy against budget, one line per strategy, budgets on evenly spaced ticks.
pub fn plot_budget(rows: &[SweepRow], path: &Path) -> Result<()> {
    let rows: Vec<&SweepRow> = rows.iter().filter(|r| r.prune_fraction == 0.0).collect();
    let mut budgets: Vec<f64> = rows.iter().map(|r| r.budget_percent).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        let x = budgets.iter().position(|b| *b == r.budget_percent).unwrap_or(0) as f64;
        series.entry(r.strategy.as_str()).or_default().push((x, r.median_test_word_accuracy));
    }
    let labels = budgets.clone();
    draw(
        path,
        "test word accuracy vs query budget",
        "budget %",
        (-0.5, budgets.len().max(1) as f64 - 0.5),
        series,
        move |x: &f64| {
            let i = x.round();
            if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < labels.len() {
                format!("{}", labels[i as usize])
            } else {
                String::new()
            }
        },
    )
}

/// Accuracy against pruned fraction, one line per budget/strategy pair.
pub fn plot_pruning(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry(format!("{}% {}", r.budget_percent, r.strategy))
            .or_default()
            .push((r.prune_fraction * 100.0, r.median_test_word_accuracy));
    }
    series.retain(|_, pts| pts.len() > 1);
    let series: BTreeMap<&str, Vec<(f64, f64)>> = series.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    draw(path, "test word accuracy vs pruned documents", "pruned %", (-2.0, 62.0), series, |x: &f64| format!("{x}"))
}

fn draw(
    path: &Path,
    title: &str,
    x_desc: &str,
    x_range: (f64, f64),
    mut series: BTreeMap<&str, Vec<(f64, f64)>>,
    x_fmt: impl Fn(&f64) -> String,
) -> Result<()> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x_range.0..x_range.1, 0.0f64..1.0f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("word accuracy")
        .x_label_formatter(&x_fmt)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().cloned(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
