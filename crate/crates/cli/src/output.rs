//! Machine-readable result writers: CSV tables with 17-significant-digit
//! numbers (lossless round trip of doubles) and surface lattices for
//! external plotting.

use anyhow::Context;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use trialdesign_core::sweep::{ComparisonStats, SweepRow};
use trialdesign_core::tps::{eval_tps, TpsSurface};

/// Formats a double with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn header_columns(n: usize) -> Vec<String> {
    let mut cols = Vec::new();
    for i in 2..=n {
        cols.push(format!("r{i}"));
    }
    for i in 1..=n {
        cols.push(format!("alpha{i}"));
    }
    cols.push("power".into());
    cols.push("method".into());
    cols.push("seconds".into());
    cols
}

fn push_padded(record: &mut Vec<String>, values: &[f64], len: usize) {
    for i in 0..len {
        record.push(fmt_f64(values.get(i).copied().unwrap_or(0.0)));
    }
}

/// Sweep rows table: r2..rn, alpha1..alphan, power, method, seconds.
pub fn write_rows_csv(path: &Path, n: usize, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("create {}", path.display()))?;
    w.write_record(header_columns(n))?;
    for row in rows {
        let mut rec: Vec<String> = Vec::new();
        push_padded(&mut rec, &row.r, n - 1);
        push_padded(&mut rec, row.alpha.alphas(), n);
        rec.push(fmt_f64(row.power));
        rec.push(row.method.to_string());
        rec.push(fmt_f64(row.seconds));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Single-row optimum table in the same column layout; dropped populations
/// appear with fraction 0 and level 0.
#[allow(clippy::too_many_arguments)]
pub fn write_optimum_csv(
    path: &Path,
    n: usize,
    r_opt: &[f64],
    alphas: &[f64],
    power: f64,
    method: &str,
    seconds: f64,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("create {}", path.display()))?;
    w.write_record(header_columns(n))?;
    let mut rec: Vec<String> = Vec::new();
    push_padded(&mut rec, r_opt, n - 1);
    push_padded(&mut rec, alphas, n);
    rec.push(fmt_f64(power));
    rec.push(method.into());
    rec.push(fmt_f64(seconds));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

/// Method-comparison table.
pub fn write_compare_csv(path: &Path, n: usize, stats: &[ComparisonStats]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("create {}", path.display()))?;
    let mut cols = Vec::new();
    for i in 2..=n {
        cols.push(format!("r{i}"));
    }
    for i in 1..=n {
        cols.push(format!("alpha{i}_std"));
    }
    for i in 1..=n {
        cols.push(format!("alpha{i}_novel"));
    }
    for i in 1..=n {
        cols.push(format!("r_rel{i}"));
    }
    for name in ["q", "p_s", "p_n", "p_f_std", "p_f_novel", "seconds_std", "seconds_novel"] {
        cols.push(name.into());
    }
    w.write_record(&cols)?;
    for s in stats {
        let mut rec: Vec<String> = Vec::new();
        push_padded(&mut rec, &s.r[1..], n - 1);
        push_padded(&mut rec, s.alpha_std.alphas(), n);
        push_padded(&mut rec, s.alpha_novel.alphas(), n);
        push_padded(&mut rec, &s.r_rel, n);
        for v in [
            s.q,
            s.p_s,
            s.p_n,
            s.p_f_std,
            s.p_f_novel,
            s.seconds_std,
            s.seconds_novel,
        ] {
            rec.push(fmt_f64(v));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates the surface on a regular `density`-per-dimension lattice over
/// its knot bounding box and writes (coordinates, value) rows.
pub fn emit_surface(
    surface: &TpsSurface,
    density: usize,
    coord_names: &[&str],
    path: &Path,
) -> anyhow::Result<()> {
    anyhow::ensure!(density >= 2, "surface density must be >= 2");
    let d = surface.dim();
    anyhow::ensure!(
        coord_names.len() == d,
        "need {d} coordinate names, got {}",
        coord_names.len()
    );
    let file = File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let mut header: Vec<&str> = coord_names.to_vec();
    header.push("value");
    writeln!(w, "{}", header.join(","))?;

    let (lo, hi) = surface.bbox();
    let total = density.pow(d as u32);
    let mut x = vec![0.0f64; d];
    for flat in 0..total {
        let mut rem = flat;
        for j in (0..d).rev() {
            let k = rem % density;
            rem /= density;
            x[j] = lo[j] + (hi[j] - lo[j]) * k as f64 / (density - 1) as f64;
        }
        let v = eval_tps(surface, &x);
        let mut rec: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        rec.push(fmt_f64(v));
        writeln!(w, "{}", rec.join(","))?;
    }
    w.flush()?;
    Ok(())
}
