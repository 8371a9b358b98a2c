//! Minimal deterministic SVG rendering for sweep results.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

/// Row-major grid of values in `[0, 1]`; 1 renders white, 0 black.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotBody {
    Line(Vec<Series>),
    Heatmap(Heatmap),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub body: PlotBody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Line,
    Heatmap,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn tick_label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e12 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

fn header(out: &mut String, plot: &Plot) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        num((LEFT + WIDTH - RIGHT) / 2.0),
        escape(&plot.title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        num((LEFT + WIDTH - RIGHT) / 2.0),
        num(HEIGHT - 15.0),
        escape(&plot.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(&plot.y_label),
        y = num((TOP + HEIGHT - BOTTOM) / 2.0)
    );
}

fn render_line(out: &mut String, series: &[Series]) -> Result<()> {
    let points: Vec<&Point> = series.iter().flat_map(|s| &s.points).collect();
    if points.is_empty() {
        return Err(Error::Empty("plot series".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let lo = points.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    let (y0, y1) = (lo - pad, hi + pad);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| if x1 > x0 { LEFT + (x - x0) / (x1 - x0) * pw } else { LEFT + pw / 2.0 };
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        num(pw),
        num(ph)
    );
    for &x in &xs {
        let px = num(sx(x));
        let base = TOP + ph;
        let _ = writeln!(out, r#"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="black"/>"#, num(base), num(base + 5.0));
        let _ = writeln!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, num(base + 18.0), tick_label(x));
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = num(sy(v));
        let _ = writeln!(out, r#"<line x1="{}" y1="{py}" x2="{LEFT}" y2="{py}" stroke="black"/>"#, num(LEFT - 5.0));
        let _ = writeln!(out, r#"<text x="{}" y="{py}" text-anchor="end" dy="4">{v:.3}</text>"#, num(LEFT - 8.0));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&Point> = s.points.iter().collect();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|p| format!("{},{}", num(sx(p.x)), num(sy(p.mean)))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        }
        for p in pts {
            let (px, top, bot) = (sx(p.x), sy(p.mean + p.std), sy(p.mean - p.std));
            let _ = writeln!(out, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="{color}"/>"#, num(top), num(bot), x = num(px));
            for y in [top, bot] {
                let _ = writeln!(
                    out,
                    r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}"/>"#,
                    num(px - 4.0),
                    num(px + 4.0),
                    y = num(y)
                );
            }
            let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="3.5" fill="{color}"/>"#, num(px), num(sy(p.mean)));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/>"#, num(lx), num(ly));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, num(lx + 18.0), num(ly + 10.0), escape(&s.label));
    }
    Ok(())
}

fn render_heatmap(out: &mut String, h: &Heatmap) -> Result<()> {
    let rows = h.values.len();
    let cols = h.values.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("heatmap values".into()));
    }
    if h.values.iter().any(|r| r.len() != cols) || h.x_ticks.len() != cols || h.y_ticks.len() != rows {
        return Err(Error::invalid("heatmap ticks and values disagree in shape"));
    }
    let cw = (WIDTH - LEFT - RIGHT) / cols as f64;
    let ch = (HEIGHT - TOP - BOTTOM) / rows as f64;
    let _ = writeln!(out, r#"<g class="cells">"#);
    for (r, row) in h.values.iter().enumerate() {
        // first row at the bottom
        let y = TOP + (rows - 1 - r) as f64 * ch;
        for (c, &v) in row.iter().enumerate() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="rgb({g},{g},{g})" stroke="gray"/>"#,
                num(LEFT + c as f64 * cw),
                num(y),
                num(cw),
                num(ch)
            );
        }
    }
    let _ = writeln!(out, "</g>");
    for (c, t) in h.x_ticks.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + (c as f64 + 0.5) * cw),
            num(HEIGHT - BOTTOM + 18.0),
            escape(t)
        );
    }
    for (r, t) in h.y_ticks.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" dy="4">{}</text>"#,
            num(LEFT - 8.0),
            num(TOP + (rows as f64 - r as f64 - 0.5) * ch),
            escape(t)
        );
    }
    let lx = WIDTH - RIGHT + 12.0;
    for (i, (label, g)) in [("all success", 255), ("all failure", 0)].iter().enumerate() {
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="rgb({g},{g},{g})" stroke="black"/>"#,
            num(lx),
            num(ly)
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{label}</text>"#, num(lx + 18.0), num(ly + 10.0));
    }
    Ok(())
}

pub fn render_svg(plot: &Plot) -> Result<String> {
    let mut out = String::new();
    header(&mut out, plot);
    match &plot.body {
        PlotBody::Line(series) => render_line(&mut out, series)?,
        PlotBody::Heatmap(h) => render_heatmap(&mut out, h)?,
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders `plot` and writes it atomically to `path`.
pub fn emit_plot(plot: &Plot, path: impl AsRef<Path>) -> Result<()> {
    let svg = render_svg(plot)?;
    write_atomic(path.as_ref(), svg.as_bytes())
}

/// Builds a plot from CSV text.
///
/// Line plots group rows by `group_col` (one series per value, or a single
/// series when absent) and `x_col`, then take mean and population std of
/// `y_col`. Heatmaps use `group_col` as the row key and average `y_col`.
pub fn plot_from_csv(
    csv_text: &str,
    kind: PlotKind,
    x_col: &str,
    y_col: &str,
    group_col: Option<&str>,
    title: &str,
) -> Result<Plot> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::invalid(format!("csv: {e}")))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("csv has no column {name:?}")))
    };
    let xi = col(x_col)?;
    let yi = col(y_col)?;
    let gi = group_col.map(col).transpose()?;
    if kind == PlotKind::Heatmap && gi.is_none() {
        return Err(Error::invalid("heatmaps need a row column"));
    }
    // group -> x -> values; BTreeMap keys keep output deterministic
    let mut groups: BTreeMap<GroupKey, BTreeMap<OrdF64, Vec<f64>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("csv: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            let field = record.get(i).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("non-numeric value {field:?}")))
        };
        let x = parse(xi)?;
        let y = match record.get(yi) {
            Some("") | None => continue,
            Some(_) => parse(yi)?,
        };
        let g = gi.map(|i| GroupKey::new(record.get(i).unwrap_or(""))).unwrap_or_else(|| GroupKey::new(y_col));
        groups.entry(g).or_default().entry(OrdF64(x)).or_default().push(y);
    }
    if groups.is_empty() {
        return Err(Error::Empty("csv rows".into()));
    }
    let stats = |v: &[f64]| (crate::util::mean(v), crate::util::std_dev(v));
    let body = match kind {
        PlotKind::Line => PlotBody::Line(
            groups
                .iter()
                .map(|(g, xs)| Series {
                    label: g.label.clone(),
                    points: xs
                        .iter()
                        .map(|(x, v)| {
                            let (mean, std) = stats(v);
                            Point { x: x.0, mean, std }
                        })
                        .collect(),
                })
                .collect(),
        ),
        PlotKind::Heatmap => {
            let mut all_x: Vec<OrdF64> = groups.values().flat_map(|m| m.keys().copied()).collect();
            all_x.sort();
            all_x.dedup();
            PlotBody::Heatmap(Heatmap {
                x_ticks: all_x.iter().map(|x| tick_label(x.0)).collect(),
                y_ticks: groups.keys().map(|g| g.label.clone()).collect(),
                values: groups
                    .values()
                    .map(|m| all_x.iter().map(|x| m.get(x).map_or(0.0, |v| stats(v).0)).collect())
                    .collect(),
            })
        }
    };
    Ok(Plot {
        title: title.into(),
        x_label: x_col.into(),
        y_label: match kind {
            PlotKind::Line => y_col.into(),
            PlotKind::Heatmap => group_col.unwrap_or_default().into(),
        },
        body,
    })
}

#[derive(Clone, Copy, Debug)]
struct OrdF64(f64);
impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Group labels sort numerically when they parse as numbers.
#[derive(Clone, Debug, PartialEq, Eq)]
struct GroupKey {
    numeric: Option<OrdF64>,
    label: String,
}

impl GroupKey {
    fn new(label: &str) -> Self {
        GroupKey {
            numeric: label.parse::<f64>().ok().map(OrdF64),
            label: label.to_string(),
        }
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self.numeric, other.numeric) {
            (Some(a), Some(b)) => a.cmp(&b).then_with(|| self.label.cmp(&other.label)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => self.label.cmp(&other.label),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_line() -> Plot {
        Plot {
            title: "accuracy vs samples".into(),
            x_label: "N".into(),
            y_label: "test accuracy".into(),
            body: PlotBody::Line(vec![
                Series {
                    label: "pmoe".into(),
                    points: vec![
                        Point { x: 100.0, mean: 0.6, std: 0.05 },
                        Point { x: 200.0, mean: 0.8, std: 0.04 },
                        Point { x: 400.0, mean: 0.97, std: 0.01 },
                    ],
                },
                Series {
                    label: "cnn".into(),
                    points: vec![
                        Point { x: 100.0, mean: 0.55, std: 0.03 },
                        Point { x: 200.0, mean: 0.7, std: 0.06 },
                        Point { x: 400.0, mean: 0.9, std: 0.02 },
                    ],
                },
            ]),
        }
    }

    #[test]
    fn golden_line_plot() {
        let svg = render_svg(&fixed_line()).unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/line.svg");
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(path, &svg).unwrap();
        }
        assert_eq!(svg, std::fs::read_to_string(path).unwrap());
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(render_svg(&fixed_line()).unwrap(), render_svg(&fixed_line()).unwrap());
    }

    #[test]
    fn single_point_series() {
        let plot = Plot {
            title: "one".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            body: PlotBody::Line(vec![Series {
                label: "s".into(),
                points: vec![Point { x: 1.0, mean: 0.5, std: 0.0 }],
            }]),
        };
        let svg = render_svg(&plot).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        let empty = Plot {
            body: PlotBody::Line(vec![]),
            ..plot
        };
        assert!(render_svg(&empty).is_err());
    }

    #[test]
    fn heatmap_cell_count() {
        let plot = Plot {
            title: "phase".into(),
            x_label: "N".into(),
            y_label: "l".into(),
            body: PlotBody::Heatmap(Heatmap {
                x_ticks: (0..20).map(|i| i.to_string()).collect(),
                y_ticks: (0..10).map(|i| i.to_string()).collect(),
                values: (0..10).map(|r| (0..20).map(|c| ((r + c) % 3) as f64 / 2.0).collect()).collect(),
            }),
        };
        let svg = render_svg(&plot).unwrap();
        let cells = svg.split(r#"<g class="cells">"#).nth(1).unwrap().split("</g>").next().unwrap();
        assert_eq!(cells.matches("<rect").count(), 200);
        assert!(svg.contains("rgb(255,255,255)") && svg.contains("rgb(0,0,0)"));
    }

    #[test]
    fn csv_aggregation() {
        let text = "model,N,trial,accuracy,success\n\
                    a,10,0,0.5,0\na,10,1,0.7,0\na,20,0,1.0,1\nb,10,0,0.4,0\nb,10,1,,0\n";
        let plot = plot_from_csv(text, PlotKind::Line, "N", "accuracy", Some("model"), "t").unwrap();
        let PlotBody::Line(series) = &plot.body else { panic!() };
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].points.len(), 2);
        assert!((series[0].points[0].mean - 0.6).abs() < 1e-12);
        assert!((series[0].points[0].std - 0.1).abs() < 1e-12);
        assert_eq!(series[1].points[0].mean, 0.4);
        let heat = plot_from_csv(text, PlotKind::Heatmap, "N", "success", Some("model"), "t").unwrap();
        let PlotBody::Heatmap(h) = &heat.body else { panic!() };
        assert_eq!(h.values, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(plot_from_csv(text, PlotKind::Line, "missing", "accuracy", None, "t").is_err());
    }
}
