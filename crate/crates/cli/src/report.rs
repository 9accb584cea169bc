//! CSV tables and standalone SVG plots for a run and whichever analyses
//! exist next to it.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use mfl_core::continual::{GradStudy, RouteStudy};
use mfl_core::probes::{HeadImportanceTable, ProbeRow};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::run_dir::RunDir;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

fn read_optional<T: DeserializeOwned>(dir: &Path, name: &str) -> anyhow::Result<Option<T>> {
    let path = dir.join(name);
    if !path.exists() {
        warn!("{} not found; skipping", path.display());
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn write_csv<T: Serialize>(out: &Path, name: &str, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out.join(name))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    info!("wrote {}", out.join(name).display());
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11"><rect width="100%" height="100%" fill="white"/><text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        Self { body }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = write!(self.body, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#, escape(s));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = write!(self.body, r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{fill}"/>"#, w.max(0.0), h.max(0.0));
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = write!(self.body, r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}"/>"#);
    }

    /// Axes with a labelled y range; returns the value-to-pixel map.
    fn axes(&mut self, lo: f64, hi: f64, ylabel: &str) -> impl Fn(f64) -> f64 {
        let (top, bottom) = (MARGIN / 2.0 + 10.0, H - MARGIN);
        self.line(MARGIN, top, MARGIN, bottom, "black");
        self.line(MARGIN, bottom, W - 20.0, bottom, "black");
        let span = if hi > lo { hi - lo } else { 1.0 };
        let y = move |v: f64| bottom - (v - lo) / span * (bottom - top);
        for i in 0..=4 {
            let v = lo + span * i as f64 / 4.0;
            self.text(MARGIN - 5.0, y(v) + 4.0, "end", &format!("{v:.2}"));
            self.line(MARGIN - 3.0, y(v), MARGIN, y(v), "black");
        }
        let _ = write!(self.body, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, escape(ylabel));
        y
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, n) in names.iter().enumerate() {
            let x = W - 150.0;
            let y = 40.0 + 16.0 * i as f64;
            self.rect(x, y - 9.0, 10.0, 10.0, PALETTE[i % PALETTE.len()]);
            self.text(x + 14.0, y, "start", n);
        }
    }

    fn save(mut self, out: &Path, name: &str) -> anyhow::Result<()> {
        self.body.push_str("</svg>\n");
        std::fs::write(out.join(name), self.body)?;
        info!("wrote {}", out.join(name).display());
        Ok(())
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo.is_finite() {
        (lo.min(0.0), hi.max(0.0))
    } else {
        (0.0, 1.0)
    }
}

/// Grouped bars: one group per label, one bar per series.
fn bar_chart(out: &Path, name: &str, title: &str, ylabel: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> anyhow::Result<()> {
    let mut svg = Svg::new(title);
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let y = svg.axes(lo, hi, ylabel);
    let group_w = (W - MARGIN - 40.0) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let x0 = MARGIN + 10.0 + g as f64 * group_w;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values[g];
            let (top, bottom) = (y(v.max(0.0)), y(v.min(0.0)));
            svg.rect(x0 + s as f64 * bar_w, top, bar_w * 0.95, bottom - top, PALETTE[s % PALETTE.len()]);
        }
        svg.text(x0 + group_w * 0.4, H - MARGIN + 16.0, "middle", label);
    }
    svg.legend(&series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    svg.save(out, name)
}

/// Cells shaded from white (0) to blue (max); `None` cells are grey.
fn heatmap(out: &Path, name: &str, title: &str, rows: &[String], cols: &[String], cells: &[Vec<Option<f64>>]) -> anyhow::Result<()> {
    let mut svg = Svg::new(title);
    let max = cells.iter().flatten().flatten().fold(0.0_f64, |m, &v| m.max(v.abs())).max(1e-12);
    let (cw, ch) = ((W - MARGIN - 40.0) / cols.len().max(1) as f64, (H - 2.0 * MARGIN) / rows.len().max(1) as f64);
    for (r, row) in cells.iter().enumerate() {
        svg.text(MARGIN - 5.0, MARGIN + (r as f64 + 0.6) * ch, "end", &rows[r]);
        for (c, v) in row.iter().enumerate() {
            let (x, yy) = (MARGIN + c as f64 * cw, MARGIN + r as f64 * ch);
            match v {
                Some(v) => {
                    let t = (v.abs() / max).clamp(0.0, 1.0);
                    let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
                    svg.rect(x, yy, cw - 1.0, ch - 1.0, &format!("#{:02x}{:02x}{:02x}", shade(76.0), shade(114.0), shade(176.0)));
                    if cw > 30.0 && ch > 14.0 {
                        svg.text(x + cw / 2.0, yy + ch / 2.0 + 4.0, "middle", &format!("{v:.2}"));
                    }
                }
                None => svg.rect(x, yy, cw - 1.0, ch - 1.0, "#eeeeee"),
            }
        }
    }
    for (c, label) in cols.iter().enumerate() {
        svg.text(MARGIN + (c as f64 + 0.5) * cw, H - MARGIN + 16.0, "middle", label);
    }
    svg.save(out, name)
}

#[derive(Serialize)]
struct ScoreCell {
    task: usize,
    after: usize,
    score: f64,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    arch: &'a str,
    order: String,
    op: f64,
    bwt: f64,
    bwt_convention: &'a str,
}

#[derive(Serialize)]
struct ProbeCsv<'a> {
    feature: &'a str,
    layer: usize,
    accuracy: f64,
    chance: f64,
    rank: usize,
}

#[derive(Serialize)]
struct OverlapCsv<'a> {
    feature: &'a str,
    other: &'a str,
    overlap: f64,
}

#[derive(Serialize)]
struct HeadCsv<'a> {
    feature: &'a str,
    head: usize,
    importance: f64,
    share: f64,
}

#[derive(Serialize)]
struct HistCsv {
    bin_low: f64,
    bin_high: f64,
    within: u64,
    between: u64,
}

#[derive(Serialize)]
struct BinCsv {
    bin: usize,
    routes: usize,
    mass: f64,
    neff_min: f64,
    neff_max: f64,
    mean_neff: f64,
    mean_delta: f64,
    se_delta: f64,
}

pub fn write_report(run: &Path, analysis: &Path, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let summary = RunDir::new(run).summary()?;
    let n = summary.order.len();

    let cells: Vec<ScoreCell> = (0..n)
        .flat_map(|j| (0..=j).map(move |i| (i, j)))
        .filter_map(|(i, j)| summary.matrix.get(i, j).map(|score| ScoreCell { task: summary.order[i], after: j, score }))
        .collect();
    write_csv(out, "scores.csv", &cells)?;
    let order = summary.order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    write_csv(out, "metrics.csv", &[MetricRow { arch: summary.arch.name(), order, op: summary.op, bwt: summary.bwt, bwt_convention: &summary.bwt_convention }])?;
    let grid: Vec<Vec<Option<f64>>> = (0..n).map(|i| (0..n).map(|j| summary.matrix.get(i, j)).collect()).collect();
    let task_labels: Vec<String> = summary.order.iter().map(|t| format!("t{t}")).collect();
    let after_labels: Vec<String> = (0..n).map(|j| format!("after {j}")).collect();
    heatmap(out, "score_matrix.svg", &format!("{} accuracy by task and stage", summary.arch.name()), &task_labels, &after_labels, &grid)?;

    if let Some(probes) = read_optional::<Vec<ProbeRow>>(analysis, "probes.json")? {
        let rows: Vec<ProbeCsv> = probes.iter().map(|p| ProbeCsv { feature: &p.feature, layer: p.layer, accuracy: p.accuracy, chance: p.chance, rank: p.rank }).collect();
        write_csv(out, "probes.csv", &rows)?;
        let overlaps: Vec<OverlapCsv> = probes.iter().flat_map(|p| p.overlaps.iter().map(move |(o, v)| OverlapCsv { feature: &p.feature, other: o, overlap: *v })).collect();
        write_csv(out, "probe_overlaps.csv", &overlaps)?;
        let labels: Vec<String> = probes.iter().map(|p| p.feature.clone()).collect();
        bar_chart(
            out,
            "probe_accuracy.svg",
            "Probe accuracy on router inputs",
            "accuracy",
            &labels,
            &[("probe", probes.iter().map(|p| p.accuracy).collect()), ("chance", probes.iter().map(|p| p.chance).collect())],
        )?;
    }

    if let Some(heads) = read_optional::<Vec<HeadImportanceTable>>(analysis, "heads.json")? {
        let rows: Vec<HeadCsv> = heads
            .iter()
            .flat_map(|t| t.shares.iter().enumerate().map(move |(m, &s)| HeadCsv { feature: &t.feature, head: m, importance: t.importance[m], share: s }))
            .collect();
        write_csv(out, "head_shares.csv", &rows)?;
        let features: Vec<String> = heads.iter().map(|t| t.feature.clone()).collect();
        let h = heads.first().map_or(0, |t| t.shares.len());
        let cols: Vec<String> = (0..h).map(|m| format!("head {m}")).collect();
        let grid: Vec<Vec<Option<f64>>> = heads.iter().map(|t| t.shares.iter().map(|&s| Some(s)).collect()).collect();
        heatmap(out, "head_shares.svg", "Head importance shares", &features, &cols, &grid)?;
    }

    if let Some(g) = read_optional::<GradStudy>(analysis, "grads.json")? {
        let hist = &g.study.histogram;
        let rows: Vec<HistCsv> = (0..hist.within.len())
            .map(|b| HistCsv { bin_low: hist.edges[b], bin_high: hist.edges[b + 1], within: hist.within[b], between: hist.between[b] })
            .collect();
        write_csv(out, "grad_histogram.csv", &rows)?;
        let frac = |c: &[u64]| -> Vec<f64> {
            let t = c.iter().sum::<u64>().max(1) as f64;
            c.iter().map(|&v| v as f64 / t).collect()
        };
        let labels: Vec<String> = (0..hist.within.len()).map(|b| if b % 4 == 0 { format!("{:.1}", hist.edges[b]) } else { String::new() }).collect();
        bar_chart(
            out,
            "grad_histogram.svg",
            &format!("Gradient cosines (gap {:.3}, null gap {:.3})", g.study.gap, g.null.gap),
            "fraction",
            &labels,
            &[("within", frac(&hist.within)), ("between", frac(&hist.between))],
        )?;
    }

    if let Some(r) = read_optional::<RouteStudy>(analysis, "routes.json")? {
        write_csv(out, "routes.csv", &r.routes)?;
        write_csv(out, "route_transitions.csv", &r.transitions)?;
        let bins: Vec<BinCsv> = r
            .bins
            .bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                b.as_ref().map(|b| BinCsv {
                    bin: i,
                    routes: b.routes,
                    mass: b.mass,
                    neff_min: b.neff_min,
                    neff_max: b.neff_max,
                    mean_neff: b.mean_neff,
                    mean_delta: b.mean_delta,
                    se_delta: b.se_delta,
                })
            })
            .collect();
        write_csv(out, "route_bins.csv", &bins)?;
        route_bin_plot(out, &r, &bins)?;
    }
    Ok(())
}

/// Mean old-task loss change per mass-quantile bin, with standard errors.
fn route_bin_plot(out: &Path, r: &RouteStudy, bins: &[BinCsv]) -> anyhow::Result<()> {
    let rho = r.bins.bin_spearman.map_or("n/a".to_string(), |(rho, p)| format!("{rho:.2} (p {p:.2})"));
    let mut svg = Svg::new(&format!("{} loss change by route N_eff bin, rho {rho}", r.arch.name()));
    let (lo, hi) = range(bins.iter().flat_map(|b| [b.mean_delta - b.se_delta, b.mean_delta + b.se_delta]));
    let y = svg.axes(lo, hi, "mean loss change on old task");
    let step = (W - MARGIN - 40.0) / bins.len().max(1) as f64;
    let mut prev: Option<(f64, f64)> = None;
    for (i, b) in bins.iter().enumerate() {
        let x = MARGIN + (i as f64 + 0.5) * step;
        svg.line(x, y(b.mean_delta - b.se_delta), x, y(b.mean_delta + b.se_delta), "#555555");
        let _ = write!(svg.body, r##"<circle cx="{x:.1}" cy="{:.1}" r="4" fill="{}"/>"##, y(b.mean_delta), PALETTE[0]);
        if let Some((px, py)) = prev {
            svg.line(px, py, x, y(b.mean_delta), PALETTE[0]);
        }
        prev = Some((x, y(b.mean_delta)));
        svg.text(x, H - MARGIN + 16.0, "middle", &format!("{:.1}", b.mean_neff));
    }
    svg.text(W / 2.0, H - MARGIN + 34.0, "middle", "bin mean N_eff");
    svg.save(out, "route_bins.svg")
}
