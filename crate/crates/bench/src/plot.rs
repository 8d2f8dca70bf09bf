//! SVG plots rendered from report JSON. Output depends only on the report,
//! so the same report always gives the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{io_err, BenchError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 30.0, 40.0, 60.0); // left, right, top, bottom
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Default)]
pub struct PlotOutcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

struct Series {
    name: String,
    points: Vec<(f64, f64, Option<f64>)>,
    dashed: bool,
}

fn field<'a>(v: &'a Value, path: &str) -> Result<&'a Value, BenchError> {
    let mut cur = v;
    for key in path.split('.') {
        cur = match key.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(key),
        }
        .ok_or_else(|| BenchError::Schema(format!("missing key `{path}`")))?;
    }
    Ok(cur)
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, BenchError> {
    field(v, path)?
        .as_array()
        .ok_or_else(|| BenchError::Schema(format!("`{path}` is not an array")))
}

fn number(v: &Value, path: &str) -> Result<f64, BenchError> {
    field(v, path)?
        .as_f64()
        .ok_or_else(|| BenchError::Schema(format!("`{path}` is not a number")))
}

/// Mean and std of a `Stat` field, or `None` if it is null.
fn stat(v: &Value, path: &str) -> Result<Option<(f64, f64)>, BenchError> {
    let s = field(v, path)?;
    if s.is_null() {
        return Ok(None);
    }
    Ok(Some((number(s, "mean")?, number(s, "std")?)))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    );
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return 1.0;
    }
    let step = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * step >= v {
            return m * step;
        }
    }
    10.0 * step
}

fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let x_max = nice_max(pts.clone().map(|p| p.0).fold(0.0, f64::max));
    let y_max = nice_max(pts.map(|p| p.1 + p.2.unwrap_or(0.0)).fold(0.0, f64::max));
    let sx = |x: f64| ml + pw * x / x_max;
    let sy = |y: f64| mt + ph * (1.0 - y / y_max);

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        "<rect x=\"{ml:.1}\" y=\"{mt:.1}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let (x, y) = (sx(f * x_max), sy(f * y_max));
        let _ = writeln!(
            out,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            mt,
            mt + ph,
            mt + ph + 16.0,
            tick(f * x_max)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{ml:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            ml + pw,
            ml - 6.0,
            y + 4.0,
            tick(f * y_max)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        ml + pw / 2.0,
        HEIGHT - 16.0,
        esc(x_label),
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let path: Vec<String> = s.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            path.join(" ")
        );
        for &(x, y, err) in &s.points {
            let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", sx(x), sy(y));
            if let Some(e) = err.filter(|e| *e > 0.0) {
                let _ = writeln!(
                    out,
                    "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"{color}\"/>",
                    sx(x),
                    sy((y - e).max(0.0)),
                    sy(y + e)
                );
            }
        }
        let ly = mt + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            ml + pw - 150.0,
            ml + pw - 130.0,
            ml + pw - 124.0,
            ly + 4.0,
            esc(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else if v.abs() >= 0.1 {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

/// Blue to yellow ramp over `t` in [0, 1].
fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 4] = [(68.0, 1.0, 84.0), (49.0, 104.0, 142.0), (53.0, 183.0, 121.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let c = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// Azimuth along x, axial bin along y (apex at the top).
fn heatmap(title: &str, n_azimuth: usize, n_axial: usize, values: &[Option<f64>]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr - 60.0, HEIGHT - mt - mb);
    let (cw, ch) = (pw / n_azimuth as f64, ph / n_axial as f64);
    let max = values.iter().flatten().copied().fold(0.0, f64::max);
    let mut out = String::new();
    header(&mut out, title);
    for j in 0..n_axial {
        for i in 0..n_azimuth {
            let fill = match values[j * n_azimuth + i] {
                Some(v) if max > 0.0 => ramp(v / max),
                Some(_) => ramp(0.0),
                None => "#cccccc".into(),
            };
            let _ = writeln!(
                out,
                "<rect class=\"cell\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                ml + i as f64 * cw,
                mt + ph - (j + 1) as f64 * ch,
                cw,
                ch
            );
        }
    }
    let _ = writeln!(
        out,
        "<rect x=\"{ml:.1}\" y=\"{mt:.1}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">azimuth (0 to 360 deg)</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">axial bin (base to apex)</text>",
        ml + pw / 2.0,
        HEIGHT - 16.0,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    let lx = ml + pw + 20.0;
    for k in 0..20 {
        let t = k as f64 / 19.0;
        let _ = writeln!(
            out,
            "<rect x=\"{lx:.1}\" y=\"{:.2}\" width=\"16\" height=\"{:.2}\" fill=\"{}\"/>",
            mt + ph * (1.0 - (k + 1) as f64 / 20.0),
            ph / 20.0,
            ramp(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n<text x=\"{:.1}\" y=\"{:.1}\">0</text>",
        lx + 20.0,
        mt + 10.0,
        tick(max),
        lx + 20.0,
        mt + ph
    );
    out.push_str("</svg>\n");
    out
}

fn heatmap_files(metrics: &Value, stem: &str) -> Result<Vec<(String, String)>, BenchError> {
    let h = field(metrics, "heatmap")?;
    let na = number(h, "n_azimuth")? as usize;
    let nx = number(h, "n_axial")? as usize;
    let mut files = Vec::new();
    for (key, unit) in [("position", "mm"), ("force", "N"), ("torsion", "N m")] {
        let cells = array(h, key)?;
        if cells.len() != na * nx {
            return Err(BenchError::Schema(format!("heatmap `{key}` has {} cells, expected {}", cells.len(), na * nx)));
        }
        let values = cells
            .iter()
            .map(|c| if c.is_null() { Ok(None) } else { c.as_f64().map(Some).ok_or_else(|| BenchError::Schema(format!("heatmap `{key}` cell is not a number"))) })
            .collect::<Result<Vec<_>, _>>()?;
        files.push((
            format!("{stem}-heatmap-{key}.svg"),
            heatmap(&format!("mean {key} error ({unit})"), na, nx, &values),
        ));
    }
    Ok(files)
}

fn force_curves(rows: &[Value], metric: &str, unit: &str, stem: &str) -> Result<(String, String), BenchError> {
    let mut series = Vec::new();
    for row in rows {
        let mut points = Vec::new();
        for b in array(row, "metrics.force_bins")? {
            if let Some((m, _)) = stat(b, metric)? {
                points.push(((number(b, "lo")? + number(b, "hi")?) / 2.0, m, None));
            }
        }
        let name = field(row, "configuration")?.as_str().unwrap_or_default().to_string();
        let dashed = !field(row, "markers")?.as_bool().unwrap_or(true);
        series.push(Series { name, points, dashed });
    }
    Ok((
        format!("{stem}-{metric}-vs-force.svg"),
        line_chart(&format!("{metric} error by contact force"), "|f| (N)", &format!("mean {metric} error ({unit})"), &series),
    ))
}

fn curve_series(points: &[Value], sizes: &[Value], name: &str) -> Result<Series, BenchError> {
    let mut out = Vec::new();
    for (p, size) in points.iter().zip(sizes) {
        if let Some((m, s)) = stat(p, "position")? {
            out.push((size.as_f64().unwrap_or(0.0), m, Some(s)));
        }
    }
    Ok(Series { name: name.into(), points: out, dashed: false })
}

fn files_for(report: &Value) -> Result<Vec<(String, String)>, BenchError> {
    let experiment = field(report, "experiment")?.as_str().unwrap_or_default();
    let seed = number(report, "seed")? as u64;
    let stem = format!("{experiment}-{seed}");
    let results = field(report, "results")?;
    let kind = field(results, "kind")?.as_str().unwrap_or_default();
    match kind {
        "config_sweep" => {
            let rows = array(results, "rows")?;
            Ok(vec![
                force_curves(rows, "position", "mm", &stem)?,
                force_curves(rows, "force", "N", &stem)?,
            ])
        }
        "multi_indenter" => heatmap_files(field(results, "metrics")?, &stem),
        "data_efficiency" => {
            let sizes = array(results, "train_sizes")?;
            let series = [
                curve_series(array(results, "scratch")?, sizes, "scratch")?,
                curve_series(array(results, "pretrained")?, sizes, "pre-trained")?,
            ];
            let threshold = number(results, "threshold_mm")?;
            let x_max = sizes.iter().filter_map(Value::as_f64).fold(0.0, f64::max);
            let mut all = series.into_iter().collect::<Vec<_>>();
            all.push(Series {
                name: "threshold".into(),
                points: vec![(0.0, threshold, None), (x_max, threshold, None)],
                dashed: true,
            });
            Ok(vec![(
                format!("{stem}-learning-curves.svg"),
                line_chart("position error against training size", "full-state training samples", "position error (mm)", &all),
            )])
        }
        "transfer" => {
            let mut points = Vec::new();
            for row in array(results, "rows")? {
                if let Some((m, s)) = stat(row, "position")? {
                    points.push((number(row, "finetune_size")?, m, Some(s)));
                }
            }
            let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
            let mut series = vec![Series { name: "target".into(), points, dashed: false }];
            if let Some((m, _)) = stat(results, "in_distribution.position")? {
                series.push(Series {
                    name: "in-distribution".into(),
                    points: vec![(0.0, m, None), (x_max, m, None)],
                    dashed: true,
                });
            }
            Ok(vec![(
                format!("{stem}-transfer.svg"),
                line_chart("transfer to an unseen sensor", "target fine-tune samples", "position error (mm)", &series),
            )])
        }
        other => Err(BenchError::Schema(format!("unknown result kind `{other}`"))),
    }
}

fn is_empty(report: &Value) -> bool {
    match report {
        Value::Null => true,
        Value::Object(m) => m.is_empty(),
        _ => false,
    }
}

/// Writes the plots of `report` into `dir`. An empty report writes nothing
/// and returns a warning.
pub fn plot(report: &Value, dir: &Path) -> Result<PlotOutcome, BenchError> {
    let mut outcome = PlotOutcome::default();
    if is_empty(report) {
        let w = "empty report: nothing to plot".to_string();
        log::warn!("{w}");
        outcome.warnings.push(w);
        return Ok(outcome);
    }
    let files = files_for(report)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, svg) in files {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(io_err(&path))?;
        outcome.files.push(path);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(-1.0), ramp(0.0));
    }

    #[test]
    fn nice_max_rounds_up() {
        assert_eq!(nice_max(0.0), 1.0);
        assert_eq!(nice_max(3.2), 5.0);
        assert_eq!(nice_max(0.0041), 0.005);
        assert_eq!(nice_max(10.0), 10.0);
    }

    #[test]
    fn field_paths() {
        let v = serde_json::json!({"a": {"b": [1, {"c": 2.5}]}});
        assert_eq!(number(&v, "a.b.1.c").unwrap(), 2.5);
        assert!(matches!(field(&v, "a.x"), Err(BenchError::Schema(_))));
    }
}
