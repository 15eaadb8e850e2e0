//! On-disk formats: trajectory and experiment CSVs, the predictor text file,
//! the debug QP text format and flat key-value summaries.
//!
//! CSV values use the shortest decimal representation that round-trips the
//! `f64` exactly, so reading a file back reproduces the in-memory data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::edmd::{LiftedPredictor, Trajectory};
use crate::error::{Error, Result};
use crate::lifting::LiftingSpec;
use crate::plant::Measurement;
use crate::qp::QpProblem;

pub const TRAJECTORY_HEADER: &str = "t,phi,phi_dot,u,d";
pub const EXPERIMENT_HEADER: &str = "t,phi,phi_dot,r_phi,u,du,solver_iters,status";
pub const PREDICTOR_MAGIC: &str = "KOOPMAN-PREDICTOR v1";

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One row of an open-loop trajectory file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub phi: f64,
    pub phi_dot: f64,
    pub u: f64,
    pub d: f64,
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.t, r.phi, r.phi_dot, r.u, r.d);
    }
    out
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::parse(context, format!("`{field}`: {e}")))
}

pub fn parse_trajectory_csv(text: &str, context: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => return Err(Error::parse(context, format!("expected header `{TRAJECTORY_HEADER}`, found {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ctx = format!("{context}:{}", i + 2);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::parse(&ctx, format!("expected 5 fields, found {}", fields.len())));
            }
            Ok(TrajectoryRow {
                t: parse_f64(fields[0], &ctx)?,
                phi: parse_f64(fields[1], &ctx)?,
                phi_dot: parse_f64(fields[2], &ctx)?,
                u: parse_f64(fields[3], &ctx)?,
                d: parse_f64(fields[4], &ctx)?,
            })
        })
        .collect()
}

pub fn rows_to_trajectory(rows: &[TrajectoryRow]) -> Trajectory {
    rows.iter().map(|r| (Measurement { phi: r.phi, phi_dot: r.phi_dot }, r.u)).collect()
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    parse_trajectory_csv(&read_text(path)?, &path.display().to_string())
}

/// One row of a closed-loop experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub t: f64,
    pub phi: f64,
    pub phi_dot: f64,
    pub r_phi: f64,
    pub u: f64,
    pub du: f64,
    pub solver_iters: usize,
    pub status: String,
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 96);
    out.push_str(EXPERIMENT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", r.t, r.phi, r.phi_dot, r.r_phi, r.u, r.du, r.solver_iters, r.status);
    }
    out
}

pub fn parse_experiment_csv(text: &str, context: &str) -> Result<Vec<ExperimentRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EXPERIMENT_HEADER => {}
        other => return Err(Error::parse(context, format!("expected header `{EXPERIMENT_HEADER}`, found {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ctx = format!("{context}:{}", i + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::parse(&ctx, format!("expected 8 fields, found {}", f.len())));
            }
            Ok(ExperimentRow {
                t: parse_f64(f[0], &ctx)?,
                phi: parse_f64(f[1], &ctx)?,
                phi_dot: parse_f64(f[2], &ctx)?,
                r_phi: parse_f64(f[3], &ctx)?,
                u: parse_f64(f[4], &ctx)?,
                du: parse_f64(f[5], &ctx)?,
                solver_iters: f[6].trim().parse().map_err(|e| Error::parse(&ctx, format!("solver_iters: {e}")))?,
                status: f[7].trim().to_string(),
            })
        })
        .collect()
}

/// Flat `key = value` lines in insertion order.
pub fn key_value_text(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn parse_key_value(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_block(out: &mut String, name: &str, m: &DMatrix<f64>) {
    out.push_str(name);
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt17(m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

/// Predictor plus the optional LQR blocks that may accompany it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorFile {
    pub predictor: LiftedPredictor,
    pub gain: Option<DMatrix<f64>>,
    pub riccati: Option<DMatrix<f64>>,
}

impl PredictorFile {
    pub fn new(predictor: LiftedPredictor) -> Self {
        Self { predictor, gain: None, riccati: None }
    }

    pub fn to_text(&self) -> String {
        let p = &self.predictor;
        let mut out = String::new();
        out.push_str(PREDICTOR_MAGIC);
        out.push('\n');
        let _ = writeln!(out, "{} {} {} {} {}", p.lifted_dim(), p.output_dim(), p.input_dim(), p.spec.delays, fmt17(p.dt));
        push_block(&mut out, "A", &p.a);
        push_block(&mut out, "B", &p.b);
        push_block(&mut out, "C", &p.c);
        if let Some(k) = &self.gain {
            push_block(&mut out, "K", k);
        }
        if let Some(pm) = &self.riccati {
            push_block(&mut out, "P", pm);
        }
        out
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(PREDICTOR_MAGIC) {
            return Err(Error::parse(context, format!("missing `{PREDICTOR_MAGIC}` header")));
        }
        let dims: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::parse(context, "missing dimension line"))?
            .split_whitespace()
            .collect();
        if dims.len() != 5 {
            return Err(Error::parse(context, "dimension line must read `N q m delays dt`"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(context, format!("`{s}`: {e}")));
        let (n, q, m, delays) = (int(dims[0])?, int(dims[1])?, int(dims[2])?, int(dims[3])?);
        let dt = parse_f64(dims[4], context)?;

        let mut read_block = |name: &str, rows: usize, cols: usize| -> Result<Option<DMatrix<f64>>> {
            match lines.next() {
                None => Ok(None),
                Some(h) if h == name => {
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let line = lines.next().ok_or_else(|| Error::parse(context, format!("block {name} ends after {i} rows")))?;
                        let vals: Vec<f64> = line.split_whitespace().map(|v| parse_f64(v, context)).collect::<Result<_>>()?;
                        if vals.len() != cols {
                            return Err(Error::parse(context, format!("block {name} row {i} has {} values, expected {cols}", vals.len())));
                        }
                        data.extend(vals);
                    }
                    Ok(Some(DMatrix::from_row_slice(rows, cols, &data)))
                }
                Some(h) => Err(Error::parse(context, format!("expected block `{name}`, found `{h}`"))),
            }
        };
        let missing = |name: &str| Error::parse(context, format!("missing block {name}"));
        let a = read_block("A", n, n)?.ok_or_else(|| missing("A"))?;
        let b = read_block("B", n, m)?.ok_or_else(|| missing("B"))?;
        let c = read_block("C", q, n)?.ok_or_else(|| missing("C"))?;
        let gain = read_block("K", m, n)?;
        let riccati = if gain.is_some() { read_block("P", n, n)? } else { None };
        if lines.next().is_some() {
            return Err(Error::parse(context, "trailing content after the last block"));
        }
        let predictor = LiftedPredictor::new(a, b, c, LiftingSpec::new(delays), dt)?;
        if delays > 0 && predictor.spec.lifted_dim() != n {
            return Err(Error::Dimension(format!("N = {n} does not match {delays} delays")));
        }
        Ok(Self { predictor, gain, riccati })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }
}

/// Debug QP text format:
///
/// ```text
/// n c
/// H
/// <n rows of n values>
/// f
/// <n values>
/// G
/// <c rows of n values>
/// b_min
/// <c values>
/// b_max
/// <c values>
/// ```
///
/// Bounds accept `inf` and `-inf`. Lines starting with `#` are ignored.
pub fn parse_qp_text(text: &str, context: &str) -> Result<QpProblem> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::parse(context, "missing dimension line"))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| Error::parse(context, format!("`{s}`: {e}"))))
        .collect::<Result<_>>()?;
    let [n, c] = dims[..] else {
        return Err(Error::parse(context, "dimension line must read `n c`"));
    };
    let mut read = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        match lines.next() {
            Some(h) if h == name => {}
            other => return Err(Error::parse(context, format!("expected `{name}`, found {other:?}"))),
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| Error::parse(context, format!("block {name} is truncated")))?;
            let vals: Vec<f64> = line.split_whitespace().map(|v| parse_f64(v, context)).collect::<Result<_>>()?;
            if vals.len() != cols {
                return Err(Error::parse(context, format!("block {name}: expected {cols} values per row, found {}", vals.len())));
            }
            data.extend(vals);
        }
        Ok(data)
    };
    let h = DMatrix::from_row_slice(n, n, &read("H", n, n)?);
    let f = DVector::from_vec(read("f", 1, n)?);
    let g = DMatrix::from_row_slice(c, n, &read("G", c, n)?);
    let bound_rows = usize::from(c > 0);
    let b_min = DVector::from_vec(read("b_min", bound_rows, c)?);
    let b_max = DVector::from_vec(read("b_max", bound_rows, c)?);
    let problem = QpProblem { h, f, g, b_min, b_max };
    problem.validate()?;
    Ok(problem)
}

pub fn qp_text(p: &QpProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", p.f.len(), p.g.nrows());
    push_block(&mut out, "H", &p.h);
    push_block(&mut out, "f", &DMatrix::from_row_slice(1, p.f.len(), p.f.as_slice()));
    push_block(&mut out, "G", &p.g);
    if p.g.nrows() > 0 {
        push_block(&mut out, "b_min", &DMatrix::from_row_slice(1, p.b_min.len(), p.b_min.as_slice()));
        push_block(&mut out, "b_max", &DMatrix::from_row_slice(1, p.b_max.len(), p.b_max.as_slice()));
    } else {
        out.push_str("b_min\nb_max\n");
    }
    out
}
