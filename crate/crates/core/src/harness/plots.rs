//! Hand-rolled SVG figures: delta-vs-condition-number scatters with
//! marginal histograms, and error-vs-iteration convergence curves. No
//! plotting dependency; the markup is written directly.

use super::{read_curves_csv, read_deltas_csv, ConvergenceCurve, DeltaRecord, Method};
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

const PLOT_W: f64 = 560.0;
const PLOT_H: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 55.0;
const HIST_W: f64 = 110.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Tick positions with a 1/2/5 step covering [min, max].
fn ticks(min: f64, max: f64) -> Vec<f64> {
    let range = (max - min).abs();
    if range == 0.0 {
        return vec![min];
    }
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| range / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut t = (min / step).ceil() * step;
    let mut out = Vec::new();
    while t <= max + 1e-12 * range {
        out.push(t);
        t += step;
    }
    out
}

/// Linear map of data onto pixels with a 5% margin around the data range.
struct Scale {
    min: f64,
    max: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn with_margin(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if !min.is_finite() || !max.is_finite() {
            min = 0.0;
            max = 1.0;
        }
        if min == max {
            min -= 0.5;
            max += 0.5;
        }
        let pad = 0.05 * (max - min);
        Self { min: min - pad, max: max + pad, px_lo, px_hi }
    }

    fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.min) / (self.max - self.min) * (self.px_hi - self.px_lo)
    }
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width}"/>"#
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str, size: f64, anchor: &str, rotate: Option<f64>) {
        let transform = rotate
            .map(|deg| format!(r#" transform="rotate({deg:.0} {x:.2} {y:.2})""#))
            .unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}"{transform}>{s}</text>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

fn draw_axes(
    svg: &mut Svg,
    xs: &Scale,
    ys: &Scale,
    x_label: &str,
    y_label: &str,
    title: &str,
    log_x: bool,
) {
    let (x0, x1) = (xs.px_lo, xs.px_hi);
    let (y0, y1) = (ys.px_lo, ys.px_hi);
    svg.line(x0, y0, x1, y0, "black", 1.0);
    svg.line(x0, y0, x0, y1, "black", 1.0);
    for t in ticks(xs.min, xs.max) {
        let px = xs.px(t);
        svg.line(px, y0, px, y0 + 4.0, "black", 1.0);
        let label = if log_x { format!("1e{}", fmt_tick(t)) } else { fmt_tick(t) };
        svg.text(px, y0 + 18.0, &label, 11.0, "middle", None);
    }
    for t in ticks(ys.min, ys.max) {
        let py = ys.px(t);
        svg.line(x0 - 4.0, py, x0, py, "black", 1.0);
        svg.text(x0 - 7.0, py + 4.0, &fmt_tick(t), 11.0, "end", None);
    }
    svg.text((x0 + x1) / 2.0, y0 + 40.0, x_label, 13.0, "middle", None);
    svg.text(x0 - 52.0, (y0 + y1) / 2.0, y_label, 13.0, "middle", Some(-90.0));
    svg.text((x0 + x1) / 2.0, MARGIN_T - 10.0, title, 14.0, "middle", None);
}

/// Scatter of (kappa, delta) on a log10 x-axis with a marginal histogram of
/// the delta values on the right; a dashed zero line marks the sign change.
fn scatter_with_marginal(
    points: &[(f64, f64)],
    title: &str,
    y_label: &str,
) -> String {
    let width = PLOT_W + HIST_W + 20.0;
    let mut svg = Svg::new(width, PLOT_H);
    let xs = Scale::with_margin(
        points.iter().map(|(k, _)| k.log10()),
        MARGIN_L,
        PLOT_W - MARGIN_R,
    );
    let ys = Scale::with_margin(points.iter().map(|(_, d)| *d), PLOT_H - MARGIN_B, MARGIN_T);
    draw_axes(&mut svg, &xs, &ys, "condition number kappa", y_label, title, true);

    if ys.min < 0.0 && ys.max > 0.0 {
        let zy = ys.px(0.0);
        svg.line(xs.px_lo, zy, xs.px_hi, zy, "#888888", 0.7);
    }
    for (k, d) in points {
        svg.circle(xs.px(k.log10()), ys.px(*d), 2.0, "#1f6fb2", 0.45);
    }

    // marginal histogram of the delta values, horizontal bars
    if !points.is_empty() {
        let n_bins = 24usize;
        let mut counts = vec![0usize; n_bins];
        for (_, d) in points {
            let frac = (d - ys.min) / (ys.max - ys.min);
            let bin = ((frac * n_bins as f64) as usize).min(n_bins - 1);
            counts[bin] += 1;
        }
        let max_count = counts.iter().copied().max().unwrap_or(1).max(1);
        let hx0 = PLOT_W + 5.0;
        let bin_h = (ys.px_lo - ys.px_hi) / n_bins as f64;
        for (b, c) in counts.iter().enumerate() {
            if *c == 0 {
                continue;
            }
            let w = HIST_W * (*c as f64) / max_count as f64;
            let y_top = ys.px_lo - (b as f64 + 1.0) * bin_h;
            svg.rect(hx0, y_top, w, bin_h.max(1.0) - 0.5, "#7aa8cc");
        }
        svg.text(hx0 + HIST_W / 2.0, PLOT_H - MARGIN_B + 18.0, "count", 11.0, "middle", None);
    }
    svg.finish()
}

/// Error-vs-iteration panels for the selected samples, one panel per
/// sample, CG and FNO-CG curves overlaid.
fn convergence_panels(curves: &[ConvergenceCurve]) -> String {
    let mut ids: Vec<u64> = curves.iter().map(|c| c.sample_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let n_panels = ids.len().max(1);
    let panel_w = 360.0;
    let width = n_panels as f64 * panel_w;
    let mut svg = Svg::new(width, PLOT_H);

    for (p, id) in ids.iter().enumerate() {
        let x_off = p as f64 * panel_w;
        let panel: Vec<&ConvergenceCurve> =
            curves.iter().filter(|c| c.sample_id == *id).collect();
        let xs = Scale::with_margin(
            panel.iter().flat_map(|c| c.points.iter().map(|(i, _)| *i as f64)),
            x_off + MARGIN_L,
            x_off + panel_w - MARGIN_R,
        );
        let ys = Scale::with_margin(
            panel.iter().flat_map(|c| c.points.iter().map(|(_, e)| *e)),
            PLOT_H - MARGIN_B,
            MARGIN_T,
        );
        draw_axes(
            &mut svg,
            &xs,
            &ys,
            "CG iteration",
            "relative error",
            &format!("sample {id}"),
            false,
        );
        for c in panel {
            let color = match c.method {
                Method::Cg => "#c44e52",
                Method::FnoCg => "#1f6fb2",
                Method::Fno => "#55a868",
            };
            let pts: Vec<(f64, f64)> =
                c.points.iter().map(|(i, e)| (xs.px(*i as f64), ys.px(*e))).collect();
            svg.polyline(&pts, color);
            svg.text(
                xs.px_hi - 4.0,
                MARGIN_T + 14.0 + 13.0 * (c.method as usize as f64),
                c.method.as_str(),
                11.0,
                "end",
                None,
            );
            let _ = color;
        }
    }
    if curves.is_empty() {
        let xs = Scale::with_margin(std::iter::empty(), MARGIN_L, panel_w - MARGIN_R);
        let ys = Scale::with_margin(std::iter::empty(), PLOT_H - MARGIN_B, MARGIN_T);
        draw_axes(&mut svg, &xs, &ys, "CG iteration", "relative error", "no curves", false);
    }
    svg.finish()
}

/// Read `deltas.csv` (and `curves.csv` if present) from `records_dir` and
/// write the four figures into `out_dir`.
pub fn emit_plots(records_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<()> {
    let records_dir = records_dir.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let deltas: Vec<DeltaRecord> = read_deltas_csv(records_dir.join("deltas.csv"))?;

    let fno: Vec<(f64, f64)> = deltas.iter().map(|d| (d.kappa, d.delta_e_fno)).collect();
    let fnocg: Vec<(f64, f64)> = deltas.iter().map(|d| (d.kappa, d.delta_e_fnocg)).collect();
    let dn: Vec<(f64, f64)> = deltas.iter().map(|d| (d.kappa, d.delta_n_fnocg)).collect();

    std::fs::write(
        out_dir.join("fig1a_delta_e_fno.svg"),
        scatter_with_marginal(&fno, "FNO error minus CG error", "delta E (FNO)"),
    )?;
    std::fs::write(
        out_dir.join("fig1b_delta_e_fnocg.svg"),
        scatter_with_marginal(&fnocg, "FNO-CG error minus CG error", "delta E (FNO-CG)"),
    )?;
    std::fs::write(
        out_dir.join("fig1c_delta_n_fnocg.svg"),
        scatter_with_marginal(&dn, "FNO-CG iterations minus CG iterations", "delta n (FNO-CG)"),
    )?;

    let curves_path = records_dir.join("curves.csv");
    let curves = if curves_path.exists() { read_curves_csv(&curves_path)? } else { Vec::new() };
    let relevant: Vec<ConvergenceCurve> =
        curves.into_iter().filter(|c| c.method != Method::Fno).collect();
    std::fs::write(out_dir.join("fig2_convergence.svg"), convergence_panels(&relevant))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{write_curves_csv, write_deltas_csv};

    #[test]
    fn empty_records_still_produce_labeled_axes() {
        let dir = tempfile::tempdir().unwrap();
        write_deltas_csv(&[], dir.path().join("deltas.csv")).unwrap();
        emit_plots(dir.path(), dir.path().join("plots")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("plots/fig1a_delta_e_fno.svg")).unwrap();
        assert!(svg.contains("condition number"));
        assert!(svg.contains("</svg>"));
        assert!(!svg.contains("circle"));
    }

    #[test]
    fn single_record_plots_one_point() {
        let dir = tempfile::tempdir().unwrap();
        let d = DeltaRecord {
            sample_id: 1,
            kappa: 100.0,
            delta_e_fno: 0.1,
            delta_e_fnocg: -0.02,
            delta_n_fnocg: -12.0,
        };
        write_deltas_csv(&[d], dir.path().join("deltas.csv")).unwrap();
        write_curves_csv(
            &[ConvergenceCurve {
                sample_id: 1,
                method: Method::Cg,
                points: vec![(0, 0.3), (1, 0.2), (2, 0.1)],
            }],
            dir.path().join("curves.csv"),
        )
        .unwrap();
        emit_plots(dir.path(), dir.path().join("plots")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("plots/fig1b_delta_e_fnocg.svg")).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        let fig2 = std::fs::read_to_string(dir.path().join("plots/fig2_convergence.svg")).unwrap();
        assert!(fig2.contains("polyline"));
        assert!(fig2.contains("sample 1"));
    }

    #[test]
    fn tick_generation_is_sane() {
        let t = ticks(0.0, 1.0);
        assert!(t.len() >= 3 && t.len() <= 7);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        let t = ticks(-0.05, 0.05);
        assert!(t.iter().any(|v| v.abs() < 1e-12));
    }

    #[test]
    fn axis_range_covers_data_with_margin() {
        let s = Scale::with_margin([1.0, 3.0].into_iter(), 0.0, 100.0);
        assert!(s.min < 1.0 && s.max > 3.0);
        assert!((s.min - 0.9).abs() < 1e-12 && (s.max - 3.1).abs() < 1e-12);
    }

    #[test]
    fn malformed_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("deltas.csv"), "header\n1,2\n").unwrap();
        assert!(emit_plots(dir.path(), dir.path().join("plots")).is_err());
    }
}
