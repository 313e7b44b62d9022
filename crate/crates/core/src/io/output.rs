use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::alm::SingularKind;
use crate::curve::CollectedPoint;
use crate::engine::{Engine, SerialOutput, SubmitAction};
use crate::problem::SolutionPoint;
use crate::runtime::ApalmOutput;

/// Above this many unknowns the CSV carries `‖u‖` and one observable
/// component instead of the full vector.
pub const FULL_LAYOUT_MAX_DOF: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvLayout {
    Full(usize),
    Summary { observable: usize },
}

impl CsvLayout {
    pub fn for_dof(n: usize) -> Self {
        if n <= FULL_LAYOUT_MAX_DOF {
            CsvLayout::Full(n)
        } else {
            CsvLayout::Summary { observable: n / 2 }
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["branch", "xi", "s", "level", "lambda"].map(String::from).into();
        match *self {
            CsvLayout::Full(n) => h.extend((0..n).map(|i| format!("u{i}"))),
            CsvLayout::Summary { observable } => {
                h.push("u_norm".into());
                h.push(format!("u{observable}"));
            }
        }
        h
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv_to(points: &[CollectedPoint], layout: CsvLayout, out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(layout.header())?;
    for p in points {
        let mut row = vec![p.branch.to_string(), num(p.xi), num(p.s), p.level.to_string(), num(p.w.lambda)];
        match layout {
            CsvLayout::Full(_) => row.extend(p.w.u.iter().map(|x| num(*x))),
            CsvLayout::Summary { observable } => {
                row.push(num(p.w.u.norm()));
                row.push(num(p.w.u[observable]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per point in (branch, ξ) order.
pub fn write_csv(points: &[CollectedPoint], path: &Path) -> Result<(), csv::Error> {
    let n = points.first().map_or(0, |p| p.w.n_dof());
    let file = std::fs::File::create(path)?;
    write_csv_to(points, CsvLayout::for_dof(n), file)
}

fn bad(msg: impl Into<String>) -> csv::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()).into()
}

/// Reads a full-layout CSV back into points.
pub fn read_csv_from(input: impl Read) -> Result<Vec<CollectedPoint>, csv::Error> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().any(|h| h == "u_norm") {
        return Err(bad("summary-layout CSV does not carry full solutions"));
    }
    let n = header.len().saturating_sub(5);
    let f = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let u: Vec<f64> = (0..n).map(|i| f(&rec[5 + i])).collect::<Result<_, _>>()?;
        out.push(CollectedPoint {
            branch: rec[0].parse().map_err(|e| bad(format!("branch: {e}")))?,
            xi: f(&rec[1])?,
            s: f(&rec[2])?,
            level: rec[3].parse().map_err(|e| bad(format!("level: {e}")))?,
            w: SolutionPoint::new(DVector::from_vec(u), f(&rec[4])?),
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<CollectedPoint>, csv::Error> {
    read_csv_from(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SingularitySummary {
    pub branch: usize,
    pub kind: SingularKind,
    pub lambda: f64,
    pub spawned: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub problem: String,
    pub workers: usize,
    pub branches: usize,
    pub points: usize,
    pub jobs: usize,
    pub failed_jobs: usize,
    pub jobs_per_level: BTreeMap<u32, usize>,
    pub max_level: u32,
    pub serial_time_s: f64,
    pub parallel_time_s: f64,
    pub singularities: Vec<SingularitySummary>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn new(problem: &str, workers: usize, serial: &SerialOutput, engine: &Engine) -> Self {
        Self {
            problem: problem.into(),
            workers,
            branches: serial.branches.len(),
            points: engine.collect().len(),
            jobs: engine.records().len(),
            failed_jobs: engine.records().iter().filter(|r| r.action == SubmitAction::Failed).count(),
            jobs_per_level: engine.jobs_per_level(),
            max_level: engine.max_level(),
            serial_time_s: 0.0,
            parallel_time_s: 0.0,
            singularities: serial
                .singularities
                .iter()
                .map(|s| SingularitySummary {
                    branch: s.branch,
                    kind: s.located.kind,
                    lambda: s.located.point.lambda,
                    spawned: s.spawned,
                })
                .collect(),
            warnings: engine.warnings().to_vec(),
        }
    }

    pub fn from_apalm(problem: &str, workers: usize, out: &ApalmOutput) -> Self {
        Self {
            serial_time_s: out.serial_time.as_secs_f64(),
            parallel_time_s: out.parallel_time.as_secs_f64(),
            ..Self::new(problem, workers, &out.serial, &out.engine)
        }
    }
}
