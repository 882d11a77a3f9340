//! CSV artifacts and the generated plot script.
//!
//! Floats are written with 17 significant digits so the files round-trip
//! bit for bit and identical configurations produce byte-identical output.

use super::RunArtifacts;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// `mean_curves.csv`: `iter, gamma_emp_1..k, gamma_theo_1..k`.
pub fn mean_curves_csv(art: &RunArtifacts) -> String {
    let k = art.k_s;
    let mut out = String::new();
    out.push_str("iter");
    for j in 1..=k {
        write!(out, ",gamma_emp_{j}").unwrap();
    }
    for j in 1..=k {
        write!(out, ",gamma_theo_{j}").unwrap();
    }
    out.push('\n');
    for i in 0..art.mean_emp.len() {
        write!(out, "{i}").unwrap();
        for j in 0..k {
            out.push(',');
            out.push_str(&fmt(art.mean_emp[i][j]));
        }
        for j in 0..k {
            out.push(',');
            out.push_str(&fmt(art.mean_theory[i][j]));
        }
        out.push('\n');
    }
    out
}

/// `msd.csv`: `iter, msd_emp, msd_theo, msd_ss` (steady state column empty
/// for regularized runs, which have no closed-form steady state).
pub fn msd_csv(art: &RunArtifacts) -> String {
    let mut out = String::from("iter,msd_emp,msd_theo,msd_ss\n");
    let ss = art.steady_state_msd.map(fmt).unwrap_or_default();
    for i in 0..art.msd_emp.len() {
        writeln!(
            out,
            "{i},{},{},{ss}",
            fmt(art.msd_emp[i]),
            fmt(art.msd_theory[i])
        )
        .unwrap();
    }
    out
}

/// `topology.csv`: `m, delta_m, a_hat` per input node, 1-based.
pub fn topology_csv(art: &RunArtifacts) -> String {
    let mut out = String::from("m,delta_m,a_hat\n");
    for m in 0..art.n_inputs {
        writeln!(
            out,
            "{},{},{}",
            m + 1,
            fmt(art.edge_strengths[m]),
            u8::from(art.adjacency_row[m])
        )
        .unwrap();
    }
    out
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plots the emitted curves: coefficient means and MSD, measured vs model."""
import csv
import math
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")

with open(out / "mean_curves.csv") as f:
    rows = list(csv.reader(f))
header, data = rows[0], rows[1:]
k = (len(header) - 1) // 2
it = [int(r[0]) for r in data]
emp = [[float(r[1 + j]) for r in data] for j in range(k)]
theo = [[float(r[1 + k + j]) for r in data] for j in range(k)]

fig, ax = plt.subplots(figsize=(8, 5))
for j in range(k):
    ax.plot(it, emp[j], "b--", lw=0.7)
    ax.plot(it, theo[j], "r-", lw=0.7)
ax.set_xlabel("iteration")
ax.set_ylabel("coefficient mean")
ax.set_title("ensemble (dashed) vs model (solid)")
fig.tight_layout()
fig.savefig(out / "mean_curves.png", dpi=150)

with open(out / "msd.csv") as f:
    rows = list(csv.reader(f))
data = rows[1:]
it = [int(r[0]) for r in data]
msd_emp = [float(r[1]) for r in data]
msd_theo = [float(r[2]) for r in data]
msd_ss = [float(r[3]) for r in data if r[3]]

fig, ax = plt.subplots(figsize=(8, 5))
db = lambda xs: [10 * math.log10(x) if x > 0 else float("nan") for x in xs]
ax.plot(it, db(msd_emp), "b--", label="measured")
ax.plot(it, db(msd_theo), "r-", label="model")
if msd_ss:
    ax.axhline(10 * math.log10(msd_ss[0]), color="k", ls=":", label="steady state")
ax.set_xlabel("iteration")
ax.set_ylabel("MSD [dB]")
ax.legend()
fig.tight_layout()
fig.savefig(out / "msd.png", dpi=150)
print(f"wrote {out/'mean_curves.png'} and {out/'msd.png'}")
"#;

/// Writes every artifact of a run into `dir`: the three CSV files, the
/// dictionary and optimal coefficients the run used, and a plot script.
pub fn emit_outputs(art: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("mean_curves.csv"), mean_curves_csv(art))?;
    std::fs::write(dir.join("msd.csv"), msd_csv(art))?;
    std::fs::write(dir.join("topology.csv"), topology_csv(art))?;
    std::fs::write(dir.join("dictionary.txt"), art.dict.to_text())?;
    let mut gamma = String::new();
    for v in art.optimal.iter() {
        gamma.push_str(&fmt(*v));
        gamma.push('\n');
    }
    std::fs::write(dir.join("gamma_star.txt"), gamma)?;
    std::fs::write(dir.join("plot_curves.py"), PLOT_SCRIPT)?;
    Ok(())
}

/// Reads one numeric column (by name or 0-based index) from a CSV with a
/// header row.
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let idx = match names.iter().position(|&n| n == column) {
        Some(i) => i,
        None => column
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("no column named {column}")))?,
    };
    if idx >= names.len() {
        return Err(Error::Parse(format!("column {idx} out of range")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let field = line
            .split(',')
            .nth(idx)
            .ok_or_else(|| Error::Parse(format!("row {ln}: missing column {idx}")))?;
        if field.is_empty() {
            continue;
        }
        out.push(
            field
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {ln}: {e}")))?,
        );
    }
    Ok(out)
}
