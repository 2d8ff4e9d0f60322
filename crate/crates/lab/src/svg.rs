//! Minimal SVG line plots. Every figure is rendered from CSV text alone, so
//! re-rendering a CSV reproduces the same bytes.

use std::fmt::Write;

use crate::error::LabError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 50.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Vertical marker at this x, with its label.
    pub marker: Option<(f64, String)>,
}

/// Columns of a CSV file with a header row.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, LabError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| LabError::Config("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| LabError::Config(format!("CSV row {}: {e}", i + 2)))?;
            if row.len() != header.len() {
                return Err(LabError::Config(format!(
                    "CSV row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, LabError> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Config(format!("CSV has no column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

impl Plot {
    fn y_value(&self, y: f64) -> Option<f64> {
        if self.log_y {
            (y > 0.0 && y.is_finite()).then(|| y.log10())
        } else {
            y.is_finite().then_some(y)
        }
    }

    pub fn render(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter_map(|&(x, y)| Some((x, self.y_value(y)?)).filter(|p| p.0.is_finite()))
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if pts.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        if self.log_y {
            y0 = y0.floor();
            y1 = y1.ceil();
        } else {
            let pad = 0.05 * (y1 - y0);
            y0 -= pad;
            y1 += pad;
        }
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        for t in nice_ticks(x0, x1, 6) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
                MARGIN_T,
                MARGIN_T + ph,
                MARGIN_T + ph + 16.0,
                fmt_tick(t)
            );
        }
        let y_ticks: Vec<(f64, String)> = if self.log_y {
            let step = ((y1 - y0) / 6.0).ceil().max(1.0);
            let mut v = Vec::new();
            let mut e = y0;
            while e <= y1 + 1e-9 {
                v.push((e, format!("1e{}", e as i64)));
                e += step;
            }
            v
        } else {
            nice_ticks(y0, y1, 6).into_iter().map(|t| (t, fmt_tick(t))).collect()
        };
        for (t, label) in y_ticks {
            let y = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                MARGIN_L,
                MARGIN_L + pw,
                MARGIN_L - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );

        if let Some((mx, label)) = &self.marker {
            if mx.is_finite() && *mx >= x0 && *mx <= x1 {
                let x = sx(*mx);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#555" stroke-dasharray="6 4"/><text x="{:.1}" y="{:.1}" fill="#555">{}</text>"##,
                    MARGIN_T,
                    MARGIN_T + ph,
                    x + 4.0,
                    MARGIN_T + 14.0,
                    escape(label)
                );
            }
        }

        for (i, ser) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let dash = if ser.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let coords: Vec<String> = ser
                .points
                .iter()
                .filter_map(|&(x, y)| Some((x, self.y_value(y)?)).filter(|p| p.0.is_finite()))
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if !coords.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                    coords.join(" ")
                );
            }
            let ly = MARGIN_T + 12.0 + 18.0 * i as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                escape(&ser.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Index of the first row whose step does not advance: the stage switch.
pub fn switch_step(steps: &[f64]) -> Option<f64> {
    steps.windows(2).find(|w| w[1] <= w[0]).map(|w| w[1])
}

/// Loss and error curves of `train_log.csv` on a log scale, with the stage
/// switch marked where the step counter first repeats.
pub fn loss_curves(csv: &str) -> Result<String, LabError> {
    let t = Table::parse(csv)?;
    let steps = t.column("step")?;
    let mut series = Vec::new();
    for (col, name) in [
        ("dsm_loss", "DSM loss"),
        ("orthogonal_err", "orthogonal error"),
        ("manifold_err", "manifold error"),
        ("alignment_risk_F", "alignment risk F"),
    ] {
        let ys = t.column(col)?;
        series.push(Series {
            name: name.into(),
            points: steps.iter().cloned().zip(ys).collect(),
            dashed: false,
        });
    }
    Ok(Plot {
        title: "Two-stage training".into(),
        x_label: "step".into(),
        y_label: "value".into(),
        log_y: true,
        series,
        marker: switch_step(&steps).map(|s| (s, "stage 2".into())),
    }
    .render())
}

/// Learned against reference curves of a profile CSV with columns
/// `s,learned,analytic`.
pub fn profile(csv: &str, title: &str, x_label: &str, y_label: &str, reference: &str) -> Result<String, LabError> {
    let t = Table::parse(csv)?;
    let s = t.column("s")?;
    let learned = t.column("learned")?;
    let analytic = t.column("analytic")?;
    Ok(Plot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        log_y: false,
        series: vec![
            Series { name: "learned".into(), points: s.iter().cloned().zip(learned).collect(), dashed: false },
            Series { name: reference.into(), points: s.iter().cloned().zip(analytic).collect(), dashed: true },
        ],
        marker: None,
    }
    .render())
}

/// Profile CSV text from parallel columns.
pub fn profile_csv(s: &[f64], learned: &[f64], analytic: &[f64]) -> String {
    let mut out = String::from("s,learned,analytic\n");
    for ((a, b), c) in s.iter().zip(learned).zip(analytic) {
        let _ = writeln!(out, "{a:e},{b:e},{c:e}");
    }
    out
}
