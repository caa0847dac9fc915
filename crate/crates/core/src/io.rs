//! RFC-4180 CSV exports. Floats use Rust's shortest round-trip formatting.

use std::io::Write;

use crate::error::{FlowError, Result};
use crate::inversion::InversionResult;
use crate::numerics::Tensor;
use crate::samplers::TimeGrid;

pub const LOSS_CURVE_HEADER: [&str; 2] = ["step", "loss"];
pub const DIAGNOSTICS_HEADER: [&str; 5] = ["step", "sigma", "metric", "iteration", "value"];

fn component_header(prefix: &str, lead: &[&str], dim: usize) -> Vec<String> {
    lead.iter().map(|s| s.to_string()).chain((0..dim).map(|k| format!("{prefix}{k}"))).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Samples as `x0..x{d-1}`, plus `token0..` columns when prompts are given.
pub fn write_samples_csv(out: impl Write, x: &Tensor, prompts: Option<&[Vec<u32>]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = component_header("x", &[], x.cols());
    let width = prompts.and_then(|p| p.first()).map_or(0, Vec::len);
    if let Some(p) = prompts {
        if p.len() != x.rows() || p.iter().any(|t| t.len() != width) {
            return Err(FlowError::invalid("one fixed-length prompt per sample is required"));
        }
        header.extend((0..width).map(|k| format!("token{k}")));
    }
    w.write_record(&header)?;
    for (i, row) in x.row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().copied().map(num).collect();
        if let Some(p) = prompts {
            rec.extend(p[i].iter().map(|t| t.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid node and sample: `step,sigma,sample,x0..`.
pub fn write_trajectory_csv(out: impl Write, grid: &TimeGrid, states: &[Tensor]) -> Result<()> {
    if states.len() != grid.steps() + 1 {
        return Err(FlowError::invalid(format!("{} states for a grid of {} steps", states.len(), grid.steps())));
    }
    write_per_step(out, "x", states.iter().enumerate().map(|(t, s)| (t, grid.sigma(t), s)))
}

/// One row per step and sample: `step,sigma,sample,e0..`, with `sigma = σ_t` of the step start.
pub fn write_compensations_csv(out: impl Write, inv: &InversionResult) -> Result<()> {
    if !inv.has_compensations() {
        return Err(FlowError::State("inversion result holds no compensations".into()));
    }
    let grid = &inv.trajectory.grid;
    write_per_step(out, "e", inv.compensations.iter().enumerate().map(|(t, c)| (t, grid.sigma(t), c)))
}

fn write_per_step<'a>(
    out: impl Write,
    prefix: &str,
    rows: impl Iterator<Item = (usize, f64, &'a Tensor)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut wrote_header = false;
    for (t, sigma, x) in rows {
        if !wrote_header {
            w.write_record(component_header(prefix, &["step", "sigma", "sample"], x.cols()))?;
            wrote_header = true;
        }
        for (i, row) in x.row_iter().enumerate() {
            let mut rec = vec![t.to_string(), num(sigma), i.to_string()];
            rec.extend(row.iter().copied().map(num));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format inversion diagnostics: `iterate_distance` rows per fixed-point
/// iteration and one `velocity_gap` row per step (iteration left empty).
pub fn write_diagnostics_csv(out: impl Write, inv: &InversionResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSTICS_HEADER)?;
    let grid = &inv.trajectory.grid;
    for (t, step) in inv.diagnostics.steps.iter().enumerate() {
        let sigma = num(grid.sigma(t));
        for (i, d) in step.iterate_distances.iter().enumerate() {
            w.write_record([t.to_string(), sigma.clone(), "iterate_distance".into(), (i + 1).to_string(), num(*d)])?;
        }
        if let Some(gap) = inv.diagnostics.velocity_gaps.get(t) {
            w.write_record([t.to_string(), sigma, "velocity_gap".into(), String::new(), num(*gap)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_curve_csv(out: impl Write, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_CURVE_HEADER)?;
    for (step, loss) in losses.iter().enumerate() {
        w.write_record([step.to_string(), num(*loss)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a samples CSV written by [`write_samples_csv`].
pub fn read_samples_csv(input: impl std::io::Read) -> Result<(Tensor, Option<Vec<Vec<u32>>>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with('x')).count();
    let width = header.iter().filter(|h| h.starts_with("token")).count();
    if dim == 0 || dim + width != header.len() {
        return Err(FlowError::Configuration(format!("unrecognised samples header {header:?}")));
    }
    let mut rows = Vec::new();
    let mut prompts = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |e: String| FlowError::Configuration(format!("samples row {}: {e}", line + 1));
        let row = rec
            .iter()
            .take(dim)
            .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let prompt = rec
            .iter()
            .skip(dim)
            .map(|v| v.parse::<u32>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        prompts.push(prompt);
    }
    let x = Tensor::from_rows(&rows)?;
    Ok((x, (width > 0).then_some(prompts)))
}
