//! Plot emission: tiny hand-rolled SVG line charts with CSV twins.
//!
//! Inputs are never modified; output file names are fixed per kind so runs
//! are comparable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tsdkd::distill::MetricsRecord;
use tsdkd::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// One named line on a chart.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("no data to plot".into()));
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * (HEIGHT - 2.0 * MARGIN);

    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="monospace" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
    // Axes.
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="monospace" font-size="11">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="monospace" font-size="11" transform="rotate(-90 14 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (pos, value) in [(x_min, "start"), (x_max, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="monospace" font-size="10">{pos:.4}</text>"#,
            sx(pos),
            HEIGHT - MARGIN + 16.0
        );
        let _ = value;
    }
    for pos in [y_min, y_max] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="monospace" font-size="10">{pos:.4}</text>"#,
            MARGIN - 4.0,
            sy(pos) + 3.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let mut path = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let color = colors[i % colors.len()];
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.trim_end()
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * (i + 1) as f64,
            s.label
        );
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Loss curves from a JSONL metrics stream: one SVG + CSV pair per loss
/// component and for the total. Returns the files written.
pub fn plot_loss_curves(metrics_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let lines = read_lines(metrics_path)?;
    let mut records = Vec::new();
    for (lineno, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| {
            Error::InvalidInput(format!(
                "{}:{}: malformed metrics line: {e}",
                metrics_path.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no data",
            metrics_path.display()
        )));
    }
    let components: [(&str, fn(&MetricsRecord) -> Option<f64>); 4] = [
        ("loss_indirect", |r| r.loss_indirect),
        ("loss_direct", |r| r.loss_direct),
        ("loss_em", |r| r.loss_em),
        ("loss_total", |r| r.loss_total),
    ];
    let mut written = Vec::new();
    for (name, select) in components {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| select(r).map(|v| (r.step as f64, v)))
            .collect();
        if points.is_empty() {
            continue;
        }
        let mut csv = String::from("step,value\n");
        for &(x, y) in &points {
            let _ = writeln!(csv, "{},{}", x as usize, y);
        }
        let csv_path = out_dir.join(format!("{name}.csv"));
        write_file(&csv_path, &csv)?;
        let svg = svg_chart(name, "step", "nats", &[Series {
            label: name.to_string(),
            points,
        }])?;
        let svg_path = out_dir.join(format!("{name}.svg"));
        write_file(&svg_path, &svg)?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

fn parse_csv(path: &Path, expect_header: &str, columns: usize) -> Result<Vec<Vec<f64>>> {
    let lines = read_lines(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != expect_header {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: expected header {expect_header:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected {columns} fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!(
                        "{}:{}: unparsable number {f:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no data", path.display())));
    }
    Ok(rows)
}

/// Entropy-profile plot from a `position,mean_entropy,count` CSV.
pub fn plot_entropy_profile(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = parse_csv(csv_path, "position,mean_entropy,count", 3)?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let mut csv = String::from("position,mean_entropy,count\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r[0] as usize, r[1], r[2] as usize);
    }
    let csv_out = out_dir.join("entropy_profile.csv");
    write_file(&csv_out, &csv)?;
    let svg = svg_chart(
        "mean token entropy by position",
        "position",
        "nats",
        &[Series { label: "mean entropy".into(), points }],
    )?;
    let svg_out = out_dir.join("entropy_profile.svg");
    write_file(&svg_out, &svg)?;
    Ok(vec![csv_out, svg_out])
}

/// Teacher-vs-student mass plot from a `bin,teacher_mass,student_mass` CSV.
pub fn plot_mode_demo(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = parse_csv(csv_path, "bin,teacher_mass,student_mass", 3)?;
    let teacher: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let student: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[2])).collect();
    let mut csv = String::from("bin,teacher_mass,student_mass\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r[0] as usize, r[1], r[2]);
    }
    let csv_out = out_dir.join("mode_demo.csv");
    write_file(&csv_out, &csv)?;
    let svg = svg_chart(
        "teacher vs fitted student mass",
        "bin",
        "probability",
        &[
            Series { label: "teacher".into(), points: teacher },
            Series { label: "student".into(), points: student },
        ],
    )?;
    let svg_out = out_dir.join("mode_demo.svg");
    write_file(&svg_out, &svg)?;
    Ok(vec![csv_out, svg_out])
}
