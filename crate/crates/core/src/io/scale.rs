use std::io::Write;

use serde::Serialize;

use super::compare::Spread;
use crate::engine::SubmitAction;
use crate::runtime::{ApalmOutput, RuntimeError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub workers: usize,
    pub repeats: usize,
    pub initial_intervals: usize,
    pub jobs: usize,
    pub serial: Spread,
    pub parallel: Spread,
}

/// Runs `run(workers)` `repeats` times for each count and records serial
/// initialisation and parallel-stage wall times separately. Counts are
/// interleaved within each repeat so slow drift of the machine affects all
/// counts alike.
pub fn scale_harness(
    counts: &[usize],
    repeats: usize,
    mut run: impl FnMut(usize) -> Result<ApalmOutput, RuntimeError>,
) -> Result<Vec<ScaleRow>, RuntimeError> {
    let repeats = repeats.max(1);
    let mut serial = vec![Vec::with_capacity(repeats); counts.len()];
    let mut parallel = vec![Vec::with_capacity(repeats); counts.len()];
    let mut jobs = vec![0; counts.len()];
    let mut initial = vec![0; counts.len()];
    for _ in 0..repeats {
        for (i, &workers) in counts.iter().enumerate() {
            let out = run(workers)?;
            serial[i].push(out.serial_time);
            parallel[i].push(out.parallel_time);
            jobs[i] = out.engine.records().len();
            initial[i] = out
                .serial
                .branches
                .iter()
                .map(|b| b.points.len().saturating_sub(1))
                .sum();
            let failed = out.engine.records().iter().filter(|r| r.action == SubmitAction::Failed).count();
            if failed > 0 {
                log::warn!("{workers} workers: {failed} failed jobs");
            }
        }
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &workers)| {
            log::info!("{workers} workers: mean parallel {:.3}s", Spread::of(&parallel[i]).mean);
            ScaleRow {
                workers,
                repeats,
                initial_intervals: initial[i],
                jobs: jobs[i],
                serial: Spread::of(&serial[i]),
                parallel: Spread::of(&parallel[i]),
            }
        })
        .collect())
}

pub fn write_scale_csv(rows: &[ScaleRow], out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "workers",
        "repeats",
        "initial_intervals",
        "jobs",
        "serial_mean_s",
        "serial_min_s",
        "serial_max_s",
        "parallel_mean_s",
        "parallel_min_s",
        "parallel_max_s",
    ])?;
    for r in rows {
        w.write_record(
            [r.workers, r.repeats, r.initial_intervals, r.jobs]
                .iter()
                .map(ToString::to_string)
                .chain(
                    [r.serial.mean, r.serial.min, r.serial.max, r.parallel.mean, r.parallel.min, r.parallel.max]
                        .iter()
                        .map(|x| format!("{x:.6}")),
                ),
        )?;
    }
    w.flush()?;
    Ok(())
}
