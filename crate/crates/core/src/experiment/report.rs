//! Result tables and accuracy-versus-epoch curves, computed only from stored probe records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::StoredCell;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::eval::{t_interval, EvalRecord, ProbeResult};
use crate::geometry::Component;
use crate::ssl::Method;

/// Mean and interval of one (method, variant, dataset) entry, with the cells it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mean: f64,
    pub ci_half_width: f64,
    pub trials: usize,
    pub epoch: usize,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub variant: String,
    /// One entry per column; `None` when no result exists.
    pub cells: Vec<Option<TableCell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<DatasetId>,
    pub rows: Vec<TableRow>,
}

/// Per method, the accuracy of each single-component variant as a percentage of the
/// all-component variant, averaged over datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentTable {
    pub columns: Vec<Component>,
    pub rows: Vec<(Method, Vec<Option<f64>>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: ResultsTable,
    pub percent_of_max: PercentTable,
}

/// Combines probe results of several seeds. A single result is passed through unchanged;
/// several are pooled into one Student-t interval over all their trial accuracies.
fn pool(results: &[&ProbeResult]) -> (f64, f64, usize, Vec<f64>) {
    if let [one] = results {
        return (one.mean, one.ci_half_width, one.trials, one.accuracies.clone());
    }
    let accs: Vec<f64> = results.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
    let (mean, half, _) = t_interval(&accs);
    (mean, half, accs.len(), accs)
}

fn probes(cell: &StoredCell) -> impl Iterator<Item = &ProbeResult> {
    cell.probes.iter().filter_map(|r| match r {
        EvalRecord::Probe(p) => Some(p),
        EvalRecord::Skipped { .. } => None,
    })
}

fn row_key(method: Method, variant: &str) -> (usize, bool, String) {
    (Method::ALL.iter().position(|m| *m == method).unwrap_or(usize::MAX), variant != "baseline", variant.to_string())
}

pub fn render_tables(store: &[StoredCell]) -> Result<Report> {
    if store.is_empty() {
        return Err(Error::contract("result store is empty"));
    }
    // (method, variant) -> dataset -> final-epoch results of each cell.
    let mut groups: BTreeMap<(usize, bool, String), (Method, BTreeMap<DatasetId, Vec<(&ProbeResult, &str)>>)> = BTreeMap::new();
    for cell in store {
        let r = &cell.record;
        let entry = groups.entry(row_key(r.method, &r.variant)).or_insert_with(|| (r.method, BTreeMap::new()));
        let mut last: BTreeMap<DatasetId, &ProbeResult> = BTreeMap::new();
        for p in probes(cell) {
            if last.get(&p.dataset).is_none_or(|q| p.epoch >= q.epoch) {
                last.insert(p.dataset, p);
            }
        }
        for (d, p) in last {
            entry.1.entry(d).or_default().push((p, r.hash.as_str()));
        }
    }
    let mut columns: Vec<DatasetId> = groups.values().flat_map(|(_, m)| m.keys().copied()).collect();
    columns.sort();
    columns.dedup();
    let rows = groups
        .into_iter()
        .map(|((_, _, variant), (method, per_dataset))| {
            let cells = columns
                .iter()
                .map(|d| {
                    per_dataset.get(d).map(|entries| {
                        let results: Vec<&ProbeResult> = entries.iter().map(|(p, _)| *p).collect();
                        let (mean, ci_half_width, trials, _) = pool(&results);
                        TableCell {
                            mean,
                            ci_half_width,
                            trials,
                            epoch: results.iter().map(|p| p.epoch).max().unwrap_or(0),
                            sources: entries.iter().map(|(_, h)| h.to_string()).collect(),
                        }
                    })
                })
                .collect();
            TableRow { method, variant, cells }
        })
        .collect();
    let results = ResultsTable { columns, rows };
    let percent_of_max = percent_of_max(&results);
    Ok(Report { results, percent_of_max })
}

pub fn percent_of_max(table: &ResultsTable) -> PercentTable {
    let find = |m: Method, v: &str| table.rows.iter().find(|r| r.method == m && r.variant == v);
    let mut rows = Vec::new();
    for m in Method::ALL {
        let Some(full) = find(m, "+affine") else { continue };
        let values: Vec<Option<f64>> = Component::ALL
            .iter()
            .map(|c| {
                let single = find(m, &format!("+affine {}", c.name()))?;
                let ratios: Vec<f64> = full
                    .cells
                    .iter()
                    .zip(&single.cells)
                    .filter_map(|(f, s)| Some(s.as_ref()?.mean / f.as_ref()?.mean))
                    .filter(|r| r.is_finite())
                    .collect();
                (!ratios.is_empty()).then(|| 100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64)
            })
            .collect();
        if values.iter().any(|v| v.is_some()) {
            rows.push((m, values));
        }
    }
    PercentTable { columns: Component::ALL.to_vec(), rows }
}

/// Accuracy as a percentage with two decimals, with `± half-width` when there are at least two
/// trials.
pub fn format_cell(mean: f64, ci_half_width: f64, trials: usize) -> String {
    if trials >= 2 {
        format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * ci_half_width)
    } else {
        format!("{:.2}", 100.0 * mean)
    }
}

impl Report {
    /// Markdown tables; the best mean of each column is bold and missing entries show `-`.
    pub fn to_markdown(&self) -> String {
        let t = &self.results;
        let mut out = String::new();
        let _ = writeln!(out, "| Method | Variant | {} |", t.columns.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "|---|---|{}", "---|".repeat(t.columns.len()));
        let best: Vec<Option<f64>> =
            (0..t.columns.len()).map(|j| t.rows.iter().filter_map(|r| r.cells[j].as_ref().map(|c| c.mean)).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))).collect();
        for row in &t.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .zip(&best)
                .map(|(c, b)| match c {
                    Some(c) if Some(c.mean) == *b => format!("**{}**", format_cell(c.mean, c.ci_half_width, c.trials)),
                    Some(c) => format_cell(c.mean, c.ci_half_width, c.trials),
                    None => "-".into(),
                })
                .collect();
            let _ = writeln!(out, "| {} | {} | {} |", row.method, row.variant, cells.join(" | "));
        }
        let p = &self.percent_of_max;
        if !p.rows.is_empty() {
            let _ = writeln!(out, "\nPercentage of the all-component accuracy (mean over datasets)\n");
            let _ = writeln!(out, "| Method | {} |", p.columns.iter().map(|c| c.name()).collect::<Vec<_>>().join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(p.columns.len()));
            for (m, values) in &p.rows {
                let cells: Vec<String> = values.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.2}%"))).collect();
                let _ = writeln!(out, "| {m} + affine | {} |", cells.join(" | "));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One plotted point: a (method, variant, dataset) result at one evaluation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: Method,
    pub variant: String,
    pub dataset: DatasetId,
    pub epoch: usize,
    pub mean: f64,
    pub ci_half_width: f64,
    pub trials: usize,
    pub accuracies: Vec<f64>,
}

fn curve_points(store: &[StoredCell]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<((usize, bool, String), DatasetId, usize), (Method, Vec<&ProbeResult>)> = BTreeMap::new();
    for cell in store {
        let r = &cell.record;
        for p in probes(cell) {
            groups.entry((row_key(r.method, &r.variant), p.dataset, p.epoch)).or_insert_with(|| (r.method, Vec::new())).1.push(p);
        }
    }
    groups
        .into_iter()
        .map(|(((_, _, variant), dataset, epoch), (method, results))| {
            let (mean, ci_half_width, trials, accuracies) = pool(&results);
            CurvePoint { method, variant, dataset, epoch, mean, ci_half_width, trials, accuracies }
        })
        .collect()
}

/// Newline-delimited JSON of the plotted series. Floats use shortest round-trip formatting, so
/// re-importing gives back identical values.
pub fn export_curves(points: &[CurvePoint]) -> Result<String> {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn import_curves(text: &str) -> Result<Vec<CurvePoint>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_figure(method: Method, dataset: DatasetId, series: &[(&str, Vec<&CurvePoint>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 30.0, 50.0);
    let mut epochs: Vec<usize> = series.iter().flat_map(|(_, ps)| ps.iter().map(|p| p.epoch)).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let x_max = epochs.last().copied().unwrap_or(1).max(1) as f64;
    let lo = series.iter().flat_map(|(_, ps)| ps.iter().map(|p| p.mean - p.ci_half_width)).fold(f64::INFINITY, f64::min);
    let hi = series.iter().flat_map(|(_, ps)| ps.iter().map(|p| p.mean + p.ci_half_width)).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (y0, y1) = ((lo - pad).max(0.0), (hi + pad).min(1.0));
    let sx = |e: f64| left + (w - left - right) * e / x_max;
    let sy = |a: f64| top + (h - top - bottom) * (1.0 - (a - y0) / (y1 - y0).max(1e-12));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{method} on {dataset}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - bottom, w - right, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    for e in &epochs {
        let x = sx(*e as f64);
        let _ = writeln!(s, r#"<g class="xtick"><line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{e}</text></g>"#, h - bottom, h - bottom + 5.0, h - bottom + 18.0);
    }
    for k in 0..=4 {
        let a = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = sy(a);
        let _ = writeln!(s, r#"<g class="ytick"><line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{:.1}</text></g>"#, left - 5.0, left - 8.0, y + 4.0, 100.0 * a);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">accuracy (%)</text>"#, h / 2.0, h / 2.0);
    for (k, (variant, ps)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if ps.len() == 1 {
            let p = ps[0];
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#, sy(p.mean - p.ci_half_width), sy(p.mean + p.ci_half_width), x = sx(p.epoch as f64));
            let _ = writeln!(s, r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(p.epoch as f64), sy(p.mean));
        } else {
            let upper = ps.iter().map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean + p.ci_half_width)));
            let lower = ps.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean - p.ci_half_width)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> = ps.iter().map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean))).collect();
            let _ = writeln!(s, r#"<polyline class="curve" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        }
        let ly = top + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.2}" fill="{color}">{variant}</text>"#, left + 10.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per (method, dataset) with every variant's curve and CI band, plus the
/// plotted series as `curves.ndjson`. Returns the written paths.
pub fn render_curves(store: &[StoredCell], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let points = curve_points(store);
    if points.is_empty() {
        return Err(Error::contract("no probe results to plot"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut figures: BTreeMap<(usize, DatasetId), (Method, Vec<(&str, Vec<&CurvePoint>)>)> = BTreeMap::new();
    for p in &points {
        let key = (Method::ALL.iter().position(|m| *m == p.method).unwrap_or(usize::MAX), p.dataset);
        let series = &mut figures.entry(key).or_insert_with(|| (p.method, Vec::new())).1;
        match series.iter_mut().find(|(v, _)| *v == p.variant) {
            Some((_, ps)) => ps.push(p),
            None => series.push((p.variant.as_str(), vec![p])),
        }
    }
    let mut written = Vec::new();
    for ((_, dataset), (method, series)) in &figures {
        let path = out_dir.join(format!("curve_{method}_{dataset}.svg"));
        std::fs::write(&path, svg_figure(*method, *dataset, series))?;
        written.push(path);
    }
    let path = out_dir.join("curves.ndjson");
    std::fs::write(&path, export_curves(&points)?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::grid::CellRecord;
    use crate::experiment::ExperimentConfig;

    fn probe(dataset: DatasetId, epoch: usize, accs: &[f64]) -> ProbeResult {
        let (mean, ci_half_width, degenerate_ci) = t_interval(accs);
        ProbeResult {
            dataset,
            checkpoint: format!("epoch_{epoch:04}"),
            epoch,
            trial_seeds: (0..accs.len() as u64).collect(),
            accuracies: accs.to_vec(),
            mean,
            ci_half_width,
            degenerate_ci,
            trials: accs.len(),
            converged: true,
        }
    }

    fn cell(method: Method, variant: &str, seed: u64, probes: Vec<ProbeResult>) -> StoredCell {
        StoredCell {
            record: CellRecord { hash: format!("{method}-{variant}-{seed}"), method, variant: variant.into(), seed, config: ExperimentConfig::smoke() },
            probes: probes.into_iter().map(EvalRecord::Probe).collect(),
            done: true,
        }
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.5288, 0.0017, 5), "52.88 ± 0.17");
        assert_eq!(format_cell(0.5288, 0.0, 1), "52.88");
    }

    #[test]
    fn table_marks_best_and_leaves_gaps() {
        let store = vec![
            cell(Method::SimClr, "baseline", 0, vec![probe(DatasetId::Cifar10, 5, &[0.5, 0.52])]),
            cell(Method::SimClr, "+affine", 0, vec![probe(DatasetId::Cifar10, 5, &[0.55, 0.56]), probe(DatasetId::Cifar100, 5, &[0.3, 0.31])]),
        ];
        let report = render_tables(&store).unwrap();
        assert_eq!(report.results.columns, vec![DatasetId::Cifar10, DatasetId::Cifar100]);
        assert_eq!(report.results.rows[0].variant, "baseline");
        assert!(report.results.rows[0].cells[1].is_none());
        let md = report.to_markdown();
        assert!(md.contains("| simclr | baseline | 51.00 ± "), "{md}");
        assert!(md.contains("**55.50 ± "), "{md}");
        assert!(md.contains(" | - |"), "{md}");
        assert!(matches!(render_tables(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn numbers_trace_back_to_probe_records() {
        let p = probe(DatasetId::Cifar10, 5, &[0.5, 0.52, 0.54, 0.51, 0.53]);
        let report = render_tables(&[cell(Method::Byol, "+affine", 0, vec![p.clone()])]).unwrap();
        let c = report.results.rows[0].cells[0].as_ref().unwrap();
        assert_eq!((c.mean, c.ci_half_width, c.trials), (p.mean, p.ci_half_width, 5));
        assert_eq!(c.sources, vec!["byol-+affine-0".to_string()]);
        // Two seeds pool their trials.
        let q = probe(DatasetId::Cifar10, 5, &[0.6, 0.62]);
        let report = render_tables(&[cell(Method::Byol, "+affine", 0, vec![p.clone()]), cell(Method::Byol, "+affine", 1, vec![q])]).unwrap();
        let c = report.results.rows[0].cells[0].as_ref().unwrap();
        assert_eq!(c.trials, 7);
        assert_eq!(c.mean, [0.5, 0.52, 0.54, 0.51, 0.53, 0.6, 0.62].iter().sum::<f64>() / 7.0);
    }

    #[test]
    fn percent_of_max_rule() {
        let store = vec![
            cell(Method::SimClr, "+affine", 0, vec![probe(DatasetId::Cifar10, 5, &[0.6]), probe(DatasetId::Cifar100, 5, &[0.4])]),
            cell(Method::SimClr, "+affine scale", 0, vec![probe(DatasetId::Cifar10, 5, &[0.3]), probe(DatasetId::Cifar100, 5, &[0.4])]),
            cell(Method::SimClr, "+affine rotation", 0, vec![probe(DatasetId::Cifar10, 5, &[0.6]), probe(DatasetId::Cifar100, 5, &[0.4])]),
        ];
        let report = render_tables(&store).unwrap();
        let (m, values) = &report.percent_of_max.rows[0];
        assert_eq!(*m, Method::SimClr);
        assert_eq!(values[Component::ALL.iter().position(|c| *c == Component::Scale).unwrap()], Some(75.0));
        assert_eq!(values[Component::ALL.iter().position(|c| *c == Component::Rotation).unwrap()], Some(100.0));
        assert_eq!(values[0], None);
        assert!(report.to_markdown().contains("75.00%"));
    }

    #[test]
    fn curves_export_round_trip_and_ticks() {
        let dir = tempfile::tempdir().unwrap();
        let probes: Vec<ProbeResult> = (1..=10).map(|k| probe(DatasetId::Cifar10, 10 * k, &[0.3 + 0.01 * k as f64, 0.31 + 0.013 * k as f64, 0.305])).collect();
        let store = vec![cell(Method::SimClr, "baseline", 0, probes.clone()), cell(Method::SimClr, "+affine", 0, probes.clone())];
        let paths = render_curves(&store, dir.path()).unwrap();
        let svg = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(svg.matches(r#"class="xtick""#).count(), 10);
        for k in 1..=10 {
            assert!(svg.contains(&format!(">{}</text></g>", 10 * k)));
        }
        assert_eq!(svg.matches(r#"class="curve""#).count(), 2);
        let back = import_curves(&std::fs::read_to_string(dir.path().join("curves.ndjson")).unwrap()).unwrap();
        assert_eq!(back.len(), 20);
        let baseline: Vec<_> = back.iter().filter(|p| p.variant == "baseline").collect();
        let affine: Vec<_> = back.iter().filter(|p| p.variant == "+affine").collect();
        for ((b, a), p) in baseline.iter().zip(&affine).zip(&probes) {
            assert_eq!((b.epoch, b.mean, b.ci_half_width, &b.accuracies), (p.epoch, p.mean, p.ci_half_width, &p.accuracies));
            assert_eq!((a.mean, a.ci_half_width, &a.accuracies), (b.mean, b.ci_half_width, &b.accuracies));
        }
    }

    #[test]
    fn single_point_is_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let store = vec![cell(Method::BarlowTwins, "baseline", 0, vec![probe(DatasetId::Cifar10, 5, &[0.4, 0.42])])];
        let paths = render_curves(&store, dir.path()).unwrap();
        let svg = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(svg.matches(r#"class="marker""#).count(), 1);
        assert_eq!(svg.matches("polyline").count(), 0);
    }
}
