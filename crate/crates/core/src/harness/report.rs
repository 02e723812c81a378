use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{Method, RunResult};
use crate::error::{Error, Result};

/// Metrics accepted by [`emit_plot_series`].
pub const METRICS: [&str; 4] = ["acc_target_test", "acc_source_dev", "dhat", "wall_time_sec"];

/// Mean and sample standard deviation of one method at one fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub fraction: f64,
    pub method: Method,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Relative gain of transdann over dann on seed-paired means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub fraction: f64,
    pub pairs: usize,
    pub dann_mean: f64,
    pub transdann_mean: f64,
    /// `100 · (transdann − dann) / dann`.
    pub percent: f64,
}

/// A (fraction, seed) with only one of the two adversarial methods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingPair {
    pub fraction: f64,
    pub seed: u64,
    pub missing: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Fractions descending, methods in declaration order.
    pub summaries: Vec<MethodSummary>,
    pub improvements: Vec<Improvement>,
    pub max_improvement: Option<Improvement>,
    pub missing_pairs: Vec<MissingPair>,
}

/// Fraction key that sorts descending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct FracKey(std::cmp::Reverse<u64>);

impl FracKey {
    // Fractions are positive, so bit order equals numeric order.
    fn new(f: f64) -> Self {
        Self(std::cmp::Reverse(f.to_bits()))
    }

    fn value(self) -> f64 {
        f64::from_bits(self.0 .0)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `(fraction, method) → seed → value` over successful runs with the metric.
fn group(
    results: &[RunResult],
    metric: impl Fn(&RunResult) -> Option<f64>,
) -> BTreeMap<(FracKey, Method), BTreeMap<u64, f64>> {
    let mut groups: BTreeMap<(FracKey, Method), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        if let Some(v) = metric(r) {
            groups
                .entry((FracKey::new(r.fraction), r.method))
                .or_default()
                .insert(r.seed, v);
        }
    }
    groups
}

/// Per-fraction method summaries of target test accuracy and the
/// transdann-over-dann improvement. Insensitive to the order of `results`;
/// a duplicated (method, fraction, seed) keeps one value.
pub fn compare(results: &[RunResult]) -> Comparison {
    let groups = group(results, |r| r.acc_target_test);
    let summaries = groups
        .iter()
        .map(|(&(frac, method), by_seed)| {
            let values: Vec<f64> = by_seed.values().copied().collect();
            let (mean, sd) = mean_sd(&values);
            MethodSummary {
                fraction: frac.value(),
                method,
                n: values.len(),
                mean,
                sd,
            }
        })
        .collect();

    let empty = BTreeMap::new();
    let mut fractions: Vec<FracKey> = groups.keys().map(|&(f, _)| f).collect();
    fractions.dedup();
    let mut improvements = Vec::new();
    let mut missing_pairs = Vec::new();
    for frac in fractions {
        let dann = groups.get(&(frac, Method::Dann)).unwrap_or(&empty);
        let td = groups.get(&(frac, Method::Transdann)).unwrap_or(&empty);
        let mut paired = (Vec::new(), Vec::new());
        let seeds: std::collections::BTreeSet<u64> = dann.keys().chain(td.keys()).copied().collect();
        for seed in seeds {
            match (dann.get(&seed), td.get(&seed)) {
                (Some(&d), Some(&t)) => {
                    paired.0.push(d);
                    paired.1.push(t);
                }
                (Some(_), None) => missing_pairs.push(MissingPair {
                    fraction: frac.value(),
                    seed,
                    missing: Method::Transdann,
                }),
                (None, _) => missing_pairs.push(MissingPair {
                    fraction: frac.value(),
                    seed,
                    missing: Method::Dann,
                }),
            }
        }
        if paired.0.is_empty() {
            continue;
        }
        let (dann_mean, _) = mean_sd(&paired.0);
        let (transdann_mean, _) = mean_sd(&paired.1);
        improvements.push(Improvement {
            fraction: frac.value(),
            pairs: paired.0.len(),
            dann_mean,
            transdann_mean,
            percent: 100.0 * (transdann_mean - dann_mean) / dann_mean,
        });
    }
    // Ties keep the larger fraction (the earlier entry).
    let max_improvement = improvements
        .iter()
        .fold(None::<&Improvement>, |best, i| match best {
            Some(b) if b.percent >= i.percent => Some(b),
            _ => Some(i),
        })
        .cloned();
    Comparison {
        summaries,
        improvements,
        max_improvement,
        missing_pairs,
    }
}

impl Comparison {
    /// Aligned text table: one row per fraction, one `mean±sd` column per method.
    pub fn to_table(&self) -> String {
        let mut methods: Vec<Method> = self.summaries.iter().map(|s| s.method).collect();
        methods.sort();
        methods.dedup();
        let mut fractions: Vec<f64> = self.summaries.iter().map(|s| s.fraction).collect();
        fractions.dedup();

        let mut rows = vec![std::iter::once("fraction".to_string())
            .chain(methods.iter().map(|m| m.to_string()))
            .collect::<Vec<_>>()];
        for &f in &fractions {
            let mut row = vec![format!("{f:.2}")];
            for &m in &methods {
                let cell = self
                    .summaries
                    .iter()
                    .find(|s| s.fraction == f && s.method == m)
                    .map_or("-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.sd));
                row.push(cell);
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        match &self.max_improvement {
            Some(m) => {
                let _ = writeln!(
                    out,
                    "max improvement of transdann over dann: {:+.2}% at fraction {:.2} ({} paired seeds)",
                    m.percent, m.fraction, m.pairs
                );
            }
            None => {
                let _ = writeln!(out, "max improvement of transdann over dann: n/a (no paired runs)");
            }
        }
        for p in &self.missing_pairs {
            let _ = writeln!(out, "excluded: fraction {:.2} seed {} lacks {}", p.fraction, p.seed, p.missing);
        }
        out
    }

    /// `fraction,method,n,mean,sd` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fraction", "method", "n", "mean", "sd"])?;
        for s in &self.summaries {
            w.write_record([
                s.fraction.to_string(),
                s.method.to_string(),
                s.n.to_string(),
                s.mean.to_string(),
                s.sd.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean and standard deviation of a metric per method, against fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSeries {
    pub metric: String,
    /// Ascending.
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    /// `points[m][f]`: `(mean, sd)` of method `m` at fraction `f`, if any runs.
    pub points: Vec<Vec<Option<(f64, f64)>>>,
}

fn metric_getter(metric: &str) -> Result<fn(&RunResult) -> Option<f64>> {
    Ok(match metric {
        "acc_target_test" => |r| r.acc_target_test,
        "acc_source_dev" => |r| r.acc_source_dev,
        "dhat" => |r| r.dhat,
        "wall_time_sec" => |r| Some(r.wall_time_sec),
        other => {
            return Err(Error::Usage(format!(
                "unknown metric {other:?}; expected one of {}",
                METRICS.join(", ")
            )))
        }
    })
}

/// One series per method with at least one successful run.
pub fn emit_plot_series(results: &[RunResult], metric: &str) -> Result<PlotSeries> {
    let getter = metric_getter(metric)?;
    if results.is_empty() {
        return Err(Error::contract("no results to plot"));
    }
    let groups = group(results, getter);
    let mut fractions: Vec<f64> = groups.keys().map(|(f, _)| f.value()).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut methods: Vec<Method> = groups.keys().map(|&(_, m)| m).collect();
    methods.sort();
    methods.dedup();
    let points = methods
        .iter()
        .map(|&m| {
            fractions
                .iter()
                .map(|&f| {
                    groups.get(&(FracKey::new(f), m)).map(|by_seed| {
                        let v: Vec<f64> = by_seed.values().copied().collect();
                        mean_sd(&v)
                    })
                })
                .collect()
        })
        .collect();
    Ok(PlotSeries {
        metric: metric.to_string(),
        fractions,
        methods,
        points,
    })
}

const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

impl PlotSeries {
    /// Columns `fraction`, then `<method>_mean,<method>_sd` per method; blank
    /// cells where a method has no runs.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["fraction".to_string()];
        for m in &self.methods {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_sd"));
        }
        w.write_record(&header)?;
        for (fi, f) in self.fractions.iter().enumerate() {
            let mut row = vec![f.to_string()];
            for series in &self.points {
                match series[fi] {
                    Some((mean, sd)) => {
                        row.push(mean.to_string());
                        row.push(sd.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Static SVG line chart: one line per method with a ±sd band.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 56.0);
        let all = self.points.iter().flatten().flatten();
        let lo = all.clone().map(|&(m, s)| m - s).fold(f64::INFINITY, f64::min);
        let hi = all.map(|&(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        };
        let (f_lo, f_hi) = match (self.fractions.first(), self.fractions.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            (Some(&a), _) => (a - 0.05, a + 0.05),
            _ => (0.0, 1.0),
        };
        let x = |f: f64| pad + (f - f_lo) / (f_hi - f_lo) * (w - 2.0 * pad);
        let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        for &f in &self.fractions {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{f:.2}</text>"#,
                x(f),
                h - pad + 16.0
            );
        }
        for v in [lo, (lo + hi) / 2.0, hi] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                pad - 6.0,
                y(v) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">fraction of source labels</text>"#,
            w / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            h / 2.0,
            h / 2.0,
            self.metric
        );
        for (mi, (method, series)) in self.methods.iter().zip(&self.points).enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let pts: Vec<(f64, f64, f64)> = self
                .fractions
                .iter()
                .zip(series)
                .filter_map(|(&f, p)| p.map(|(m, s)| (f, m, s)))
                .collect();
            let upper = pts.iter().map(|&(f, m, s)| format!("{:.2},{:.2}", x(f), y(m + s)));
            let lower = pts.iter().rev().map(|&(f, m, s)| format!("{:.2},{:.2}", x(f), y(m - s)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.join(" ")
            );
            let line: Vec<String> = pts.iter().map(|&(f, m, _)| format!("{:.2},{:.2}", x(f), y(m))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{method}</text>"#,
                w - pad - 90.0,
                pad + 16.0 * mi as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
