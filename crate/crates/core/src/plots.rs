//! SVG emission for the three standard plot shapes: single-edit perplexity
//! scatter, sequential perplexity trace, and weight-diff heatmap.
//!
//! Plots are views over persisted tabular artifacts, never the only record
//! of a datum. Perplexity axes default to log scale; observed values span
//! ten orders of magnitude.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io error: {0}")]
    Io(String),
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

struct LogAxis {
    min: f64,
    max: f64,
}

impl LogAxis {
    fn of(values: impl Iterator<Item = f64>) -> LogAxis {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            let v = v.max(1e-12);
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() || !max.is_finite() {
            min = 1.0;
            max = 10.0;
        }
        if min == max {
            max = min * 10.0;
        }
        LogAxis { min, max }
    }

    /// Screen y for a value (top = max).
    fn y(&self, v: f64) -> f64 {
        let v = v.max(1e-12);
        let frac = (v.ln() - self.min.ln()) / (self.max.ln() - self.min.ln());
        HEIGHT - MARGIN - frac * (HEIGHT - 2.0 * MARGIN)
    }

    fn ticks(&self) -> Vec<f64> {
        let lo = self.min.log10().floor() as i32;
        let hi = self.max.log10().ceil() as i32;
        (lo..=hi).map(|e| 10f64.powi(e)).collect()
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes_with_log_y(svg: &mut String, axis: &LogAxis, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN;
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN;
    let _ = writeln!(
        svg,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for tick in axis.ticks() {
        if tick < axis.min / 10.0 || tick > axis.max * 10.0 {
            continue;
        }
        let y = axis.y(tick.clamp(axis.min, axis.max));
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">1e{}</text>",
            x0 - 4.0,
            x0 - 6.0,
            y + 3.0,
            tick.log10().round() as i32
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        WIDTH / 2.0,
        HEIGHT - 16.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
}

fn x_position(i: usize, n: usize) -> f64 {
    let span = WIDTH - 2.0 * MARGIN;
    if n <= 1 {
        MARGIN + span / 2.0
    } else {
        MARGIN + span * i as f64 / (n - 1) as f64
    }
}

/// Scatter of per-case perplexities (one mark per edit case), log-y, with a
/// horizontal threshold rule.
pub fn sweep_scatter_svg(points: &[(String, f64)], threshold: f64, title: &str) -> String {
    let mut svg = svg_header(title);
    let axis = LogAxis::of(points.iter().map(|(_, p)| *p).chain([threshold]));
    axes_with_log_y(&mut svg, &axis, "case index", "perplexity");
    let ty = axis.y(threshold.clamp(axis.min, axis.max));
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{ty}\" x2=\"{}\" y2=\"{ty}\" stroke=\"crimson\" \
         stroke-dasharray=\"6 3\"/>",
        WIDTH - MARGIN
    );
    for (i, (case_id, ppl)) in points.iter().enumerate() {
        let x = x_position(i, points.len());
        let y = axis.y(*ppl);
        let color = if *ppl > threshold { "crimson" } else { "steelblue" };
        let _ = writeln!(
            svg,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\">\
             <title>{case_id}: {ppl:.3}</title></circle>"
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-edit perplexity trace for one or more labeled series, log-y.
pub fn trace_svg(series: &[(String, Vec<f64>)], threshold: f64, title: &str) -> String {
    let mut svg = svg_header(title);
    let axis = LogAxis::of(
        series
            .iter()
            .flat_map(|(_, ys)| ys.iter().copied())
            .chain([threshold]),
    );
    axes_with_log_y(&mut svg, &axis, "edit index", "perplexity");
    let ty = axis.y(threshold.clamp(axis.min, axis.max));
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{ty}\" x2=\"{}\" y2=\"{ty}\" stroke=\"crimson\" \
         stroke-dasharray=\"6 3\"/>",
        WIDTH - MARGIN
    );
    let colors = ["steelblue", "darkorange", "seagreen", "purple", "brown"];
    for (s, (label, ys)) in series.iter().enumerate() {
        let color = colors[s % colors.len()];
        let mut path = String::new();
        for (i, y) in ys.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{:.2} {:.2} ", x_position(i, ys.len()), axis.y(*y));
        }
        let _ = writeln!(
            svg,
            "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{label}</text>",
            MARGIN + 8.0,
            MARGIN + 14.0 + 14.0 * s as f64,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Max-pooled downsampling so huge layers stay renderable.
fn downsample(matrix: &Array2<f64>, max_cells: usize) -> Array2<f64> {
    let (rows, cols) = matrix.dim();
    let row_block = rows.div_ceil(max_cells);
    let col_block = cols.div_ceil(max_cells);
    if row_block <= 1 && col_block <= 1 {
        return matrix.clone();
    }
    let out_rows = rows.div_ceil(row_block);
    let out_cols = cols.div_ceil(col_block);
    Array2::from_shape_fn((out_rows, out_cols), |(i, j)| {
        let mut best = 0.0_f64;
        for r in i * row_block..((i + 1) * row_block).min(rows) {
            for c in j * col_block..((j + 1) * col_block).min(cols) {
                best = best.max(matrix[[r, c]]);
            }
        }
        best
    })
}

/// Heatmap of an absolute weight-difference matrix.
pub fn heatmap_svg(matrix: &Array2<f64>, title: &str) -> String {
    let shown = downsample(matrix, 128);
    let (rows, cols) = shown.dim();
    let max = shown.iter().fold(0.0_f64, |m, v| m.max(*v)).max(1e-300);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let cell_w = plot_w / cols as f64;
    let cell_h = plot_h / rows as f64;
    let mut svg = svg_header(title);
    for i in 0..rows {
        for j in 0..cols {
            let t = (shown[[i, j]] / max).clamp(0.0, 1.0);
            // White through orange to dark red.
            let r = 255.0 - 100.0 * t;
            let g = 245.0 * (1.0 - t);
            let b = 235.0 * (1.0 - t);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"rgb({},{},{})\"/>",
                MARGIN + j as f64 * cell_w,
                MARGIN + i as f64 * cell_h,
                cell_w + 0.5,
                cell_h + 0.5,
                r as u8,
                g as u8,
                b as u8
            );
        }
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">max |dW| = {max:.4e}</text>",
        MARGIN,
        HEIGHT - 20.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Renders every plottable artifact in a run directory into `plots/`.
/// Sweep reports become scatters, sequential traces become line traces, and
/// weight-diff matrices become heatmaps.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let plots_dir = run_dir.join("plots");
    let mut written = Vec::new();

    let sweep_path = run_dir.join("sweep_report.jsonl");
    if sweep_path.exists() {
        let report = crate::harness::load_sweep_report(&sweep_path)
            .map_err(|e| PlotError::Io(e.to_string()))?;
        let points: Vec<(String, f64)> = report
            .cases
            .iter()
            .filter_map(|c| c.aggregate.map(|p| (c.case_id.clone(), p)))
            .collect();
        if points.is_empty() {
            return Err(PlotError::MissingArtifact(format!(
                "{} has no scored cases",
                sweep_path.display()
            )));
        }
        let svg = sweep_scatter_svg(
            &points,
            report.threshold,
            &format!("single edits: {} on {}", report.editor, report.model_id),
        );
        written.push(write_plot(&plots_dir, "sweep_scatter.svg", &svg)?);
    }

    let trace_path = run_dir.join("sequential_trace.jsonl");
    if trace_path.exists() {
        let trace =
            crate::harness::load_trace(&trace_path).map_err(|e| PlotError::Io(e.to_string()))?;
        if trace.entries.is_empty() {
            return Err(PlotError::MissingArtifact(format!(
                "{} has an empty trace",
                trace_path.display()
            )));
        }
        let ys: Vec<f64> = trace.entries.iter().map(|e| e.aggregate).collect();
        let svg = trace_svg(
            &[(format!("{} on {}", trace.editor, trace.model_id), ys)],
            crate::DEFAULT_COLLAPSE_THRESHOLD,
            "sequential editing",
        );
        written.push(write_plot(&plots_dir, "sequential_trace.svg", &svg)?);
    }

    for entry in std::fs::read_dir(run_dir).map_err(|e| PlotError::Io(e.to_string()))? {
        let entry = entry.map_err(|e| PlotError::Io(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("weight_diff_") && name.ends_with(".tsv") {
            let matrix = read_matrix_tsv(&entry.path())?;
            let svg = heatmap_svg(&matrix, name.trim_end_matches(".tsv"));
            let out = name.replace(".tsv", ".svg");
            written.push(write_plot(&plots_dir, &out, &svg)?);
        }
    }

    if written.is_empty() {
        return Err(PlotError::MissingArtifact(format!(
            "no plottable artifacts under {}",
            run_dir.display()
        )));
    }
    Ok(written)
}

fn write_plot(dir: &Path, name: &str, svg: &str) -> Result<PathBuf, PlotError> {
    std::fs::create_dir_all(dir).map_err(|e| PlotError::Io(e.to_string()))?;
    let path = dir.join(name);
    std::fs::write(&path, svg).map_err(|e| PlotError::Io(e.to_string()))?;
    Ok(path)
}

fn read_matrix_tsv(path: &Path) -> Result<Array2<f64>, PlotError> {
    let raw = std::fs::read_to_string(path).map_err(|e| PlotError::Io(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split('\t').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| PlotError::Io(format!("{}: {e}", path.display())))?);
    }
    if rows.is_empty() {
        return Err(PlotError::MissingArtifact(format!(
            "{} is empty",
            path.display()
        )));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PlotError::Io(format!("{}: ragged rows", path.display())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols, cols), flat)
        .map_err(|e| PlotError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_mark_count_matches_data() {
        let points: Vec<(String, f64)> = (0..3)
            .map(|i| (format!("c{i}"), 50.0 * (i + 1) as f64))
            .collect();
        let svg = sweep_scatter_svg(&points, 1000.0, "t");
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn log_axis_renders_ten_orders_of_magnitude() {
        let points: Vec<(String, f64)> = vec![
            ("a".into(), 10.0),
            ("b".into(), 1e6),
            ("c".into(), 1.19e11),
        ];
        let svg = sweep_scatter_svg(&points, 1000.0, "wide range");
        assert!(svg.contains("1e11") || svg.contains("1e12"));
        // All marks inside the canvas.
        for cap in svg.split("cy=\"").skip(1) {
            let y: f64 = cap.split('"').next().unwrap().parse().unwrap();
            assert!((0.0..=HEIGHT).contains(&y));
        }
    }

    #[test]
    fn trace_renders_one_path_per_series() {
        let series = vec![
            ("hard".to_string(), vec![50.0, 80.0, 5000.0]),
            ("normal".to_string(), vec![50.0, 52.0, 55.0]),
        ];
        let svg = trace_svg(&series, 1000.0, "t");
        assert_eq!(svg.matches("<path").count(), 2);
    }

    #[test]
    fn heatmap_downsamples_large_matrices() {
        let big = Array2::from_shape_fn((300, 500), |(i, j)| (i + j) as f64);
        let small = downsample(&big, 128);
        assert!(small.nrows() <= 128 && small.ncols() <= 128);
        // Max pooling preserves the global maximum.
        let max_big = big.iter().fold(0.0_f64, |m, v| m.max(*v));
        let max_small = small.iter().fold(0.0_f64, |m, v| m.max(*v));
        assert_eq!(max_big, max_small);
    }

    #[test]
    fn emit_plots_requires_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_plots(dir.path()),
            Err(PlotError::MissingArtifact(_))
        ));
    }

    #[test]
    fn emit_plots_renders_sweep_and_heatmap() {
        use crate::harness::{save_sweep_report, CaseRecord, SweepReport};
        use crate::ppl::Verdict;
        let dir = tempfile::tempdir().unwrap();
        let report = SweepReport {
            dataset_id: "d".into(),
            editor: "rank_one".into(),
            model_id: "m".into(),
            threshold: 1000.0,
            cases: (0..4)
                .map(|i| CaseRecord {
                    case_id: format!("c{i}"),
                    success: true,
                    aggregate: Some(100.0 * (i + 1) as f64),
                    verdict: Some(Verdict::Stable),
                    deltas: Vec::new(),
                    error: None,
                })
                .collect(),
            hard_cases: Vec::new(),
        };
        save_sweep_report(&report, &dir.path().join("sweep_report.jsonl")).unwrap();
        std::fs::write(
            dir.path().join("weight_diff_layer.tsv"),
            "0.0\t1.0\n2.0\t3.0\n",
        )
        .unwrap();
        let written = emit_plots(dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        let svg = std::fs::read_to_string(&written[0]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn empty_trace_is_missing_artifact() {
        use crate::harness::{save_trace, SequentialTrace};
        use crate::ppl::Verdict;
        let dir = tempfile::tempdir().unwrap();
        let trace = SequentialTrace {
            dataset_id: "d".into(),
            editor: "ft_linf".into(),
            model_id: "m".into(),
            corpus_tier: None,
            original_aggregate: 50.0,
            degradation_multiplier: 5.0,
            entries: Vec::new(),
            final_verdict: Verdict::Stable,
            success_rate: 0.0,
        };
        save_trace(&trace, &dir.path().join("sequential_trace.jsonl")).unwrap();
        assert!(matches!(
            emit_plots(dir.path()),
            Err(PlotError::MissingArtifact(_))
        ));
    }
}
