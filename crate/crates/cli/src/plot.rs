use std::path::Path;

use plotters::prelude::*;

use crate::error::CliError;
use crate::output::Table;

pub const DEFAULT_COLUMNS: [&str; 4] = ["loss", "lambda1_at_x", "alignment", "stableness"];

const PANEL_HEIGHT: u32 = 220;
const WIDTH: u32 = 900;

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

/// Stacked line panels, one per entry of `columns`, against `x_col`. Rows with
/// an empty cell in either column are skipped. The input file is only read.
pub fn plot_columns(table: &Table, x_col: &str, columns: &[String], out: &Path) -> Result<(), CliError> {
    let missing: Vec<&str> =
        std::iter::once(x_col).chain(columns.iter().map(String::as_str)).filter(|c| table.column(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!("missing columns for plot: {}", missing.join(", "))));
    }
    if columns.is_empty() {
        return Err(CliError::Config("no columns to plot".into()));
    }
    let xs = table.column(x_col).expect("checked");
    let root = SVGBackend::new(out, (WIDTH, PANEL_HEIGHT * columns.len() as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((columns.len(), 1));
    for (i, (name, area)) in columns.iter().zip(panels.iter()).enumerate() {
        let ys = table.column(name).expect("checked");
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(ys)
            .filter_map(|(x, y)| Some((x.filter(|v| v.is_finite())?, y.filter(|v| v.is_finite())?)))
            .collect();
        let (x0, x1) = bounds(pts.iter().map(|p| p.0));
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_col).light_line_style(WHITE.mix(0.0)).draw().map_err(plot_err)?;
        let color = Palette99::pick(i).to_rgba();
        chart.draw_series(LineSeries::new(pts, color.stroke_width(1))).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Data range padded by 5%, or a unit interval around a constant.
fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}
