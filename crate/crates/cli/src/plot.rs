//! Static SVG figures from recorded traces.
//!
//! Every input is loaded and every figure rendered in memory before the first
//! file is written, so a bad input produces an error and no partial output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use skidsim_core::trace::{SimTrace, TraceError};

use crate::error::CliError;
use crate::output::OutputDir;

const SIZE: (u32, u32) = (900, 500);
/// Plotted points per series; longer traces are decimated.
const MAX_POINTS: usize = 2000;

const RIGHT: RGBColor = RGBColor(31, 119, 180);
const LEFT: RGBColor = RGBColor(214, 39, 40);
const TERRAIN_COLORS: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

struct Series {
    label: String,
    color: RGBColor,
    width: u32,
    points: Vec<(f64, f64)>,
}

impl Series {
    fn new(label: impl Into<String>, color: RGBColor, points: Vec<(f64, f64)>) -> Self {
        Series { label: label.into(), color, width: 2, points }
    }

    /// Thin dark variant, for reference curves drawn over measurements.
    fn as_reference(mut self) -> Self {
        self.color = RGBColor(self.color.0 / 3, self.color.1 / 3, self.color.2 / 3);
        self.width = 1;
        self
    }
}

fn decimate<T: Copy>(xs: &[T]) -> impl Iterator<Item = T> + '_ {
    let stride = xs.len().div_ceil(MAX_POINTS).max(1);
    xs.iter().step_by(stride).copied()
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let fold = |f: fn(&(f64, f64)) -> f64| {
        pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let pad = |(lo, hi): (f64, f64)| {
        let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    (pad(fold(|p| p.0)), pad(fold(|p| p.1)))
}

fn render(title: &str, x_desc: &str, y_desc: &str, series: &[Series], equal_aspect: bool) -> Result<String, CliError> {
    let draw_err = |e: &dyn std::fmt::Display| CliError::Fault(format!("cannot draw `{title}`: {e}"));
    let ((mut x0, mut x1), (mut y0, mut y1)) = bounds(series);
    if equal_aspect {
        // Same metres per pixel on both axes, so turns keep their shape.
        let scale = ((x1 - x0) / (SIZE.0 as f64 - 100.0)).max((y1 - y0) / (SIZE.1 as f64 - 100.0));
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let (hx, hy) = (scale * (SIZE.0 as f64 - 100.0) / 2.0, scale * (SIZE.1 as f64 - 100.0) / 2.0);
        (x0, x1, y0, y1) = (cx - hx, cx + hx, cy - hy, cy + hy);
    }

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(|e| draw_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| draw_err(&e))?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(|e| draw_err(&e))?;
        for s in series {
            let style = s.color.stroke_width(s.width);
            let color = s.color;
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), style))
                .map_err(|e| draw_err(&e))?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        if series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| draw_err(&e))?;
        }
        root.present().map_err(|e| draw_err(&e))?;
    }
    Ok(svg)
}

fn side_series(trace: &SimTrace, name: &str, pick: impl Fn(&skidsim_core::trace::TraceRecord) -> [f64; 2]) -> Vec<Series> {
    let pts = |i: usize| decimate(&trace.records).map(|r| (r.t, pick(&r)[i])).collect::<Vec<_>>();
    vec![Series::new(format!("{name} right"), RIGHT, pts(0)), Series::new(format!("{name} left"), LEFT, pts(1))]
}

/// The five per-trace figures, as `(file suffix, svg)`.
fn trace_figures(trace: &SimTrace, label: &str) -> Result<Vec<(String, String)>, CliError> {
    let m = &trace.meta;
    let context = format!("{label} ({}, {})", m.terrain, m.controller);

    let mut velocity = side_series(trace, "measured", |r| r.velocity);
    velocity.extend(side_series(trace, "reference", |r| r.reference).into_iter().map(Series::as_reference));
    let error = side_series(trace, "error", |r| r.error);
    let control = side_series(trace, "U", |r| r.control);
    let phi = side_series(trace, "‖Φ‖", |r| r.phi_norm);
    let path = vec![Series::new("path", RIGHT, decimate(&trace.records).map(|r| (r.pose[0], r.pose[1])).collect())];

    Ok(vec![
        ("velocity".into(), render(&format!("Velocity tracking: {context}"), "t (s)", "V (m/s)", &velocity, false)?),
        ("error".into(), render(&format!("Tracking error: {context}"), "t (s)", "e = V - V_d (m/s)", &error, false)?),
        ("control".into(), render(&format!("Control effort: {context}"), "t (s)", "U", &control, false)?),
        ("phi_norm".into(), render(&format!("Basis norm ‖Φ‖: {context}"), "t (s)", "‖Φ(V)‖", &phi, false)?),
        ("path".into(), render(&format!("XY path: {context}"), "x (m)", "y (m)", &path, true)?),
    ])
}

/// Mean error norm per terrain across all traces, one curve per terrain, on a
/// log scale so the steady tracking band is visible next to the transient.
fn terrain_overlay(traces: &[(String, SimTrace)]) -> Result<String, CliError> {
    let mut groups: BTreeMap<&str, Vec<&SimTrace>> = BTreeMap::new();
    for (_, t) in traces {
        groups.entry(t.meta.terrain.as_str()).or_default().push(t);
    }
    let series = groups
        .iter()
        .enumerate()
        .map(|(k, (terrain, ts))| {
            let n = ts.iter().map(|t| t.records.len()).min().unwrap_or(0);
            let mean: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let mean = ts.iter().map(|t| t.records[i].error_norm()).sum::<f64>() / ts.len() as f64;
                    (ts[0].records[i].t, mean.max(1e-9).log10())
                })
                .collect();
            let label = format!("{terrain} ({} run{})", ts.len(), if ts.len() == 1 { "" } else { "s" });
            Series::new(label, TERRAIN_COLORS[k % TERRAIN_COLORS.len()], decimate(&mean).collect())
        })
        .collect::<Vec<_>>();
    render("Velocity tracking error by terrain", "t (s)", "log10 mean ‖e‖ (m/s)", &series, false)
}

/// Expands the command-line inputs into `(trace csv, optional meta.json)`.
fn resolve(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, Option<PathBuf>)>, CliError> {
    let mut found = Vec::new();
    for input in inputs {
        let sidecar = |csv: &Path| Some(csv.with_file_name("meta.json")).filter(|m| m.is_file());
        if input.is_file() {
            found.push((input.clone(), sidecar(input)));
        } else if input.join("trace.csv").is_file() {
            let csv = input.join("trace.csv");
            found.push((csv.clone(), sidecar(&csv)));
        } else if input.join("traces").is_dir() {
            let dir = input.join("traces");
            let mut runs: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(CliError::io(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path().join("trace.csv")))
                .filter(|p| p.is_file())
                .collect();
            if runs.is_empty() {
                return Err(CliError::Input(format!("{} contains no traces", dir.display())));
            }
            runs.sort();
            found.extend(runs.into_iter().map(|csv| {
                let meta = sidecar(&csv);
                (csv, meta)
            }));
        } else {
            return Err(CliError::Input(format!(
                "{}: expected a trace CSV, a run directory with trace.csv, or a sweep directory with traces/",
                input.display()
            )));
        }
    }
    Ok(found)
}

fn label_for(trace: &SimTrace, csv: &Path, taken: &mut BTreeMap<String, usize>) -> String {
    let base = if trace.meta.scenario_id != "synthetic" {
        trace.meta.scenario_id.clone()
    } else {
        csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into())
    };
    let base: String = base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    let n = taken.entry(base.clone()).or_insert(0);
    *n += 1;
    if *n == 1 { base } else { format!("{base}_{n}") }
}

pub fn plot(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut traces = Vec::new();
    let mut taken = BTreeMap::new();
    for (csv, meta) in resolve(inputs)? {
        let trace = SimTrace::load(&csv, meta.as_deref()).map_err(|e| match e {
            TraceError::Io(source) => CliError::Io { path: csv.clone(), source },
            other => CliError::Input(format!("{}: {other}", csv.display())),
        })?;
        if !trace.records.iter().all(|r| r.is_finite()) {
            return Err(CliError::Input(format!("{}: trace contains non-finite values", csv.display())));
        }
        let label = label_for(&trace, &csv, &mut taken);
        traces.push((label, trace));
    }

    let mut files = Vec::new();
    for (label, trace) in &traces {
        for (suffix, svg) in trace_figures(trace, label)? {
            files.push((format!("{label}_{suffix}.svg"), svg));
        }
    }
    if traces.len() > 1 {
        files.push(("error_by_terrain.svg".into(), terrain_overlay(&traces)?));
    }

    let dir = OutputDir::create(out)?;
    for (name, svg) in &files {
        dir.write(name, svg)?;
    }
    println!("wrote {} figure(s) for {} trace(s) to {}", files.len(), traces.len(), out.display());
    Ok(())
}
