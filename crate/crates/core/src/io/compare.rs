use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;

use crate::curve::{BranchId, CollectedPoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub points_a: usize,
    pub points_b: usize,
    pub keys_equal: bool,
    /// `(branch, ξ)` keys present in only one run.
    pub only_in_a: Vec<(BranchId, f64)>,
    pub only_in_b: Vec<(BranchId, f64)>,
    /// Largest componentwise difference over shared keys, `λ` included.
    pub max_deviation: f64,
    pub bitwise_identical: bool,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares two collected solution sets key by key.
pub fn compare(a: &[CollectedPoint], b: &[CollectedPoint], tolerance: f64) -> CompareReport {
    let index = |pts: &[CollectedPoint]| -> BTreeMap<(BranchId, u64), CollectedPoint> {
        pts.iter().map(|p| ((p.branch, p.xi.to_bits()), p.clone())).collect()
    };
    let (ma, mb) = (index(a), index(b));
    let only = |x: &BTreeMap<(BranchId, u64), CollectedPoint>, y: &BTreeMap<(BranchId, u64), CollectedPoint>| {
        x.keys()
            .filter(|k| !y.contains_key(k))
            .map(|&(br, xi)| (br, f64::from_bits(xi)))
            .collect::<Vec<_>>()
    };
    let (only_in_a, only_in_b) = (only(&ma, &mb), only(&mb, &ma));
    let mut max_deviation = 0.0f64;
    let mut bitwise = true;
    for (k, pa) in &ma {
        let Some(pb) = mb.get(k) else { continue };
        if pa.w.n_dof() != pb.w.n_dof() {
            max_deviation = f64::INFINITY;
            bitwise = false;
            continue;
        }
        bitwise &= pa.w == pb.w && pa.level == pb.level;
        let dl = (pa.w.lambda - pb.w.lambda).abs();
        let du = (&pa.w.u - &pb.w.u).amax();
        for d in [dl, du] {
            max_deviation = if d.is_nan() { f64::INFINITY } else { max_deviation.max(d) };
        }
    }
    let keys_equal = only_in_a.is_empty() && only_in_b.is_empty();
    CompareReport {
        points_a: a.len(),
        points_b: b.len(),
        keys_equal,
        only_in_a,
        only_in_b,
        max_deviation,
        bitwise_identical: keys_equal && bitwise,
        tolerance,
        pass: keys_equal && max_deviation <= tolerance,
    }
}

/// Mean and spread of repeated wall-time measurements in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(samples: &[Duration]) -> Self {
        let secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        let n = secs.len().max(1) as f64;
        Self {
            mean: secs.iter().sum::<f64>() / n,
            min: secs.iter().copied().fold(f64::INFINITY, f64::min),
            max: secs.iter().copied().fold(0.0, f64::max),
        }
    }
}
