//! SVG line plots of JSONL logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lipsync_core::{Error, Result};
use plotters::prelude::*;

const PALETTE: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

/// Numeric columns of a JSONL file keyed by name; `x` is the `step` field
/// when present, else the record index.
pub fn read_columns(text: &str) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut cols: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Format(format!("line {}: not an object", i + 1)))?;
        let x = obj.get("step").and_then(|s| s.as_f64()).unwrap_or(i as f64);
        for (k, val) in obj {
            if k == "step" {
                continue;
            }
            if let Some(y) = val.as_f64().filter(|y| y.is_finite()) {
                cols.entry(k.clone()).or_default().push((x, y));
            }
        }
    }
    Ok(cols)
}

pub fn plot_log(log: &Path, out: &Path, columns: &[String]) -> Result<()> {
    let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let mut cols = read_columns(&text)?;
    if !columns.is_empty() {
        if let Some(c) = columns.iter().find(|c| !cols.contains_key(*c)) {
            return Err(Error::InvalidArgument(format!("no numeric column `{c}` in {}", log.display())));
        }
        cols.retain(|k, _| columns.contains(k));
    }
    if cols.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no numeric columns", log.display())));
    }
    let pts = cols.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let draw = |e: &dyn std::fmt::Display| Error::Format(format!("plot: {e}"));
    let root = SVGBackend::new(out, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw(&e))?;
    chart.configure_mesh().x_desc("step").draw().map_err(|e| draw(&e))?;
    for (i, (name, series)) in cols.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(series.iter().copied(), color))
            .map_err(|e| draw(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw(&e))?;
    root.present().map_err(|e| draw(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_skip_non_numeric_and_null() {
        let cols = read_columns("{\"step\":0,\"a\":1.5,\"r1\":null,\"kind\":\"x\"}\n\n{\"step\":2,\"a\":2}\n").unwrap();
        assert_eq!(cols.len(), 1);
        assert_eq!(cols["a"], vec![(0.0, 1.5), (2.0, 2.0)]);
        assert!(read_columns("[1]").is_err());
    }
}
