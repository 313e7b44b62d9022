//! Per-branch discrete maps `ξ ↦ (s, w, w′, ℓ)` and the two ways a
//! refined interval is written back into them.
//!
//! Entries are kept sorted by `ξ`. Keys are the exact stored `ξ` values and
//! never change once written; only the curve-length coordinate `s` of
//! entries downstream of a stretched interval moves.

use thiserror::Error;

use crate::problem::SolutionPoint;

pub type BranchId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("no entry at xi = {xi} on branch {branch}")]
    UnknownKey { branch: BranchId, xi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveEntry {
    pub xi: f64,
    pub s: f64,
    pub w: SolutionPoint,
    pub w_prev: Option<SolutionPoint>,
    pub level: u32,
}

/// A queued sub-interval `[ξ_lo, ξ_hi)` of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalDescriptor {
    pub branch: BranchId,
    pub xi_lo: f64,
    pub xi_hi: f64,
    /// Nominal metric length of the interval when it was created.
    pub delta_l0: f64,
    /// Level of the job that will compute it.
    pub level: u32,
}

/// Output of one interval job: `solutions[0]` is the start point and
/// `distances[k]` the metric length from `solutions[k]` to `solutions[k+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalResult {
    pub distances: Vec<f64>,
    pub solutions: Vec<SolutionPoint>,
    /// `ΔL̄`: distance from the start to the last fine solution.
    pub lower_distance: f64,
    /// `δL`: distance from the last fine solution to the reference end.
    pub closing_distance: f64,
}

impl IntervalResult {
    pub fn path_length(&self) -> f64 {
        self.distances.iter().sum()
    }

    pub fn validate(&self) -> Result<(), CurveError> {
        if self.distances.is_empty() || self.solutions.len() != self.distances.len() + 1 {
            return Err(CurveError::Structural(format!(
                "interval result with {} solutions and {} distances",
                self.solutions.len(),
                self.distances.len()
            )));
        }
        if self.distances.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(CurveError::Structural("non-positive fine distance".into()));
        }
        if !(self.closing_distance.is_finite() && self.closing_distance >= 0.0) {
            return Err(CurveError::Structural("negative closing distance".into()));
        }
        Ok(())
    }
}

/// Which children a stretched interval spawns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineFlags {
    pub lower: bool,
    pub upper: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectedPoint {
    pub branch: BranchId,
    pub xi: f64,
    pub s: f64,
    pub level: u32,
    pub w: SolutionPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveMap {
    branch: BranchId,
    entries: Vec<CurveEntry>,
}

impl CurveMap {
    /// Level-0 map of a serial run: `ξ_i = s_i / s_I`. `start_prev` is the
    /// predecessor used for predictors leaving the first point, if any.
    pub fn init(
        branch: BranchId,
        solutions: &[SolutionPoint],
        s_coords: &[f64],
        start_prev: Option<SolutionPoint>,
    ) -> Result<Self, CurveError> {
        if solutions.is_empty() || solutions.len() != s_coords.len() {
            return Err(CurveError::Structural(format!(
                "{} solutions but {} curve coordinates",
                solutions.len(),
                s_coords.len()
            )));
        }
        if s_coords[0] != 0.0 {
            return Err(CurveError::Structural("first curve coordinate must be 0".into()));
        }
        if s_coords.windows(2).any(|p| !(p[1] > p[0])) || s_coords.iter().any(|s| !s.is_finite()) {
            return Err(CurveError::Structural("curve coordinates not strictly increasing".into()));
        }
        let total = *s_coords.last().expect("nonempty");
        let entries = solutions
            .iter()
            .zip(s_coords)
            .enumerate()
            .map(|(i, (w, &s))| CurveEntry {
                xi: if i == 0 { 0.0 } else { s / total },
                s,
                w: w.clone(),
                w_prev: if i == 0 {
                    start_prev.clone()
                } else {
                    Some(solutions[i - 1].clone())
                },
                level: 0,
            })
            .collect();
        Ok(Self { branch, entries })
    }

    pub fn branch(&self) -> BranchId {
        self.branch
    }

    pub fn entries(&self) -> &[CurveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn index_of(&self, xi: f64) -> Result<usize, CurveError> {
        self.entries
            .binary_search_by(|e| e.xi.total_cmp(&xi))
            .map_err(|_| CurveError::UnknownKey {
                branch: self.branch,
                xi,
            })
    }

    pub fn lookup(&self, xi: f64) -> Result<&CurveEntry, CurveError> {
        Ok(&self.entries[self.index_of(xi)?])
    }

    /// Descriptors for every consecutive pair of level-0 entries.
    pub fn initial_intervals(&self) -> Vec<IntervalDescriptor> {
        self.entries
            .windows(2)
            .map(|p| IntervalDescriptor {
                branch: self.branch,
                xi_lo: p[0].xi,
                xi_hi: p[1].xi,
                delta_l0: p[1].s - p[0].s,
                level: 1,
            })
            .collect()
    }

    fn parent_indices(&self, parent: &IntervalDescriptor) -> Result<(usize, usize), CurveError> {
        if parent.branch != self.branch {
            return Err(CurveError::Structural(format!(
                "interval of branch {} submitted to branch {}",
                parent.branch, self.branch
            )));
        }
        if !(parent.delta_l0 > 0.0) {
            return Err(CurveError::Structural("interval with non-positive length".into()));
        }
        let lo = self.index_of(parent.xi_lo)?;
        let hi = self.index_of(parent.xi_hi)?;
        if hi != lo + 1 {
            return Err(CurveError::Structural(format!(
                "interval [{}, {}) is not a pair of adjacent entries",
                parent.xi_lo, parent.xi_hi
            )));
        }
        Ok((lo, hi))
    }

    /// Stores the inner fine points `1..M−1`; the last fine point is
    /// dropped and no existing coordinate moves.
    pub fn insert_interior(&mut self, parent: &IntervalDescriptor, result: &IntervalResult) -> Result<(), CurveError> {
        result.validate()?;
        let (lo, hi) = self.parent_indices(parent)?;
        let (xi_lo, s_lo) = (self.entries[lo].xi, self.entries[lo].s);
        let (xi_hi, s_hi) = (self.entries[hi].xi, self.entries[hi].s);
        let width = xi_hi - xi_lo;
        let m = result.distances.len();

        let mut fresh = Vec::with_capacity(m.saturating_sub(1));
        let mut cum = 0.0;
        let (mut prev_xi, mut prev_s) = (xi_lo, s_lo);
        for k in 1..m {
            cum += result.distances[k - 1];
            let xi = xi_lo + width * (cum / parent.delta_l0);
            let s = s_lo + cum;
            if !(xi > prev_xi && xi < xi_hi && s > prev_s && s < s_hi) {
                return Err(CurveError::Structural(format!(
                    "interior point {k} at (s = {s}, xi = {xi}) leaves ({s_lo}, {s_hi})"
                )));
            }
            fresh.push(CurveEntry {
                xi,
                s,
                w: result.solutions[k].clone(),
                w_prev: Some(result.solutions[k - 1].clone()),
                level: parent.level,
            });
            prev_xi = xi;
            prev_s = s;
        }
        self.entries.splice(hi..hi, fresh);
        Ok(())
    }

    /// Stores all fine points, stretches every coordinate from the old
    /// interval end onward by `Σd + δL − ΔL₀`, and returns the children to
    /// refine. Fine points get `ξ` in proportion to their share of the
    /// stretched length `Σd + δL`.
    ///
    /// When the last fine point coincides with the old end (`δL = 0`) it is
    /// not stored and no closing child is produced.
    pub fn insert_stretch(
        &mut self,
        parent: &IntervalDescriptor,
        result: &IntervalResult,
        refine: RefineFlags,
    ) -> Result<Vec<IntervalDescriptor>, CurveError> {
        result.validate()?;
        let (lo, hi) = self.parent_indices(parent)?;
        let (xi_lo, s_lo) = (self.entries[lo].xi, self.entries[lo].s);
        let xi_hi = self.entries[hi].xi;
        let width = xi_hi - xi_lo;
        let m = result.distances.len();
        let path = result.path_length();
        let total = path + result.closing_distance;
        let shift = total - parent.delta_l0;
        let s_hi_new = self.entries[hi].s + shift;

        let mut xis = Vec::with_capacity(m + 1);
        let mut ss = Vec::with_capacity(m + 1);
        xis.push(xi_lo);
        ss.push(s_lo);
        let mut cum = 0.0;
        for d in &result.distances {
            cum += d;
            xis.push(xi_lo + width * (cum / total));
            ss.push(s_lo + cum);
        }
        let merged = !(result.closing_distance > 0.0 && xis[m] < xi_hi && ss[m] < s_hi_new);
        let stored = if merged { m - 1 } else { m };
        for k in 1..=stored {
            if !(xis[k] > xis[k - 1] && ss[k] > ss[k - 1] && xis[k] < xi_hi && ss[k] < s_hi_new) {
                return Err(CurveError::Structural(format!(
                    "stretched point {k} at (s = {}, xi = {}) breaks monotonicity",
                    ss[k], xis[k]
                )));
            }
        }

        for e in &mut self.entries[hi..] {
            e.s += shift;
        }
        let fresh: Vec<CurveEntry> = (1..=stored)
            .map(|k| CurveEntry {
                xi: xis[k],
                s: ss[k],
                w: result.solutions[k].clone(),
                w_prev: Some(result.solutions[k - 1].clone()),
                level: parent.level,
            })
            .collect();
        self.entries.splice(hi..hi, fresh);

        let child = |a: f64, b: f64, delta_l0: f64| IntervalDescriptor {
            branch: self.branch,
            xi_lo: a,
            xi_hi: b,
            delta_l0,
            level: parent.level + 1,
        };
        let mut children = Vec::new();
        if refine.lower {
            for k in 0..m {
                let end = if k + 1 == m && merged { xi_hi } else { xis[k + 1] };
                children.push(child(xis[k], end, result.distances[k]));
            }
        }
        if refine.upper && !merged {
            children.push(child(xis[m], xi_hi, result.closing_distance));
        }
        Ok(children)
    }

    pub fn collect(&self) -> Vec<CollectedPoint> {
        self.entries
            .iter()
            .map(|e| CollectedPoint {
                branch: self.branch,
                xi: e.xi,
                s: e.s,
                level: e.level,
                w: e.w.clone(),
            })
            .collect()
    }

    /// Both `ξ` and `s` strictly increasing.
    pub fn is_monotone(&self) -> bool {
        self.entries
            .windows(2)
            .all(|p| p[1].xi > p[0].xi && p[1].s > p[0].s)
    }

    pub fn max_level(&self) -> u32 {
        self.entries.iter().map(|e| e.level).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn w(x: f64) -> SolutionPoint {
        SolutionPoint::from_slice(&[x], x)
    }

    fn map_from(s: &[f64]) -> CurveMap {
        let sols: Vec<_> = s.iter().map(|&x| w(x)).collect();
        CurveMap::init(0, &sols, s, None).unwrap()
    }

    fn xis(m: &CurveMap) -> Vec<f64> {
        m.entries().iter().map(|e| e.xi).collect()
    }

    fn result(d: &[f64], closing: f64) -> IntervalResult {
        let mut sols = vec![w(0.0)];
        let mut acc = 0.0;
        for x in d {
            acc += x;
            sols.push(w(acc));
        }
        IntervalResult {
            distances: d.to_vec(),
            solutions: sols,
            lower_distance: acc,
            closing_distance: closing,
        }
    }

    /// Map with entries at (s, ξ) = (0,0), (2,0.2), (4,0.4), (7,0.7), (10,1).
    fn reference_map() -> CurveMap {
        map_from(&[0.0, 2.0, 4.0, 7.0, 10.0])
    }

    fn parent(lo: f64, hi: f64, len: f64) -> IntervalDescriptor {
        IntervalDescriptor {
            branch: 0,
            xi_lo: lo,
            xi_hi: hi,
            delta_l0: len,
            level: 1,
        }
    }

    #[test]
    fn init_scales_to_unit_interval() {
        assert_eq!(xis(&map_from(&[0.0, 1.0, 2.0])), vec![0.0, 0.5, 1.0]);
        let m = map_from(&[0.0, 30.0, 60.0, 90.0]);
        assert_eq!(xis(&m), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(xis(&map_from(&[0.0, 0.25])), vec![0.0, 1.0]);
        assert!(m.entries().iter().all(|e| e.level == 0));
        assert_eq!(m.initial_intervals().len(), 3);
    }

    #[test]
    fn init_rejects_bad_coordinates() {
        let sols = vec![w(0.0), w(1.0), w(2.0)];
        assert!(CurveMap::init(0, &sols, &[0.0, 2.0, 1.0], None).is_err());
        assert!(CurveMap::init(0, &sols, &[0.0, 1.0, 1.0], None).is_err());
        assert!(CurveMap::init(0, &sols, &[0.0, 1.0], None).is_err());
        assert!(CurveMap::init(0, &sols, &[0.5, 1.0, 2.0], None).is_err());
    }

    #[test]
    fn single_point_branch_has_no_intervals() {
        let m = CurveMap::init(3, &[w(0.0)], &[0.0], None).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.initial_intervals().is_empty());
    }

    #[test]
    fn lookup_returns_payload() {
        let m = map_from(&[0.0, 1.0, 2.0]);
        let e = m.lookup(0.0).unwrap();
        assert_eq!((&e.w, &e.w_prev, e.s, e.level), (&w(0.0), &None, 0.0, 0));
        let e = m.lookup(0.5).unwrap();
        assert_eq!((&e.w, e.w_prev.as_ref(), e.s, e.level), (&w(1.0), Some(&w(0.0)), 1.0, 0));
        assert!(matches!(m.lookup(0.25), Err(CurveError::UnknownKey { .. })));
    }

    #[test]
    fn interior_insertion_examples() {
        let mut m = reference_map();
        m.insert_interior(&parent(0.2, 0.4, 2.0), &result(&[0.8, 1.2], 0.0)).unwrap();
        let e = &m.entries()[2];
        assert_relative_eq!(e.s, 2.8, max_relative = 1e-15);
        assert_relative_eq!(e.xi, 0.28, max_relative = 1e-15);
        assert_eq!(e.level, 1);
        assert_eq!(m.lookup(e.xi).unwrap().level, 1);

        let mut m = reference_map();
        m.insert_interior(&parent(0.2, 0.4, 2.0), &result(&[1.0, 1.0], 0.0)).unwrap();
        assert_eq!(m.entries()[2].s, 3.0);
        assert_relative_eq!(m.entries()[2].xi, 0.3, max_relative = 1e-15);

        let mut m = reference_map();
        m.insert_interior(&parent(0.2, 0.4, 2.0), &result(&[0.5, 0.5, 0.5], 0.5)).unwrap();
        assert_eq!(m.len(), 7);
        assert_eq!((m.entries()[2].s, m.entries()[2].xi), (2.5, 0.25));
        assert_relative_eq!(m.entries()[3].s, 3.0);
        assert_relative_eq!(m.entries()[3].xi, 0.3, max_relative = 1e-15);
    }

    #[test]
    fn interior_insertion_moves_nothing_else() {
        let mut m = reference_map();
        let before = m.clone();
        m.insert_interior(&parent(0.2, 0.4, 2.0), &result(&[0.9, 1.1], 0.1)).unwrap();
        for e in before.entries() {
            let now = m.lookup(e.xi).unwrap();
            assert_eq!(now, e);
        }
        assert_eq!(m.len(), before.len() + 1);
    }

    #[test]
    fn interior_insertion_past_the_end_is_structural() {
        let mut m = reference_map();
        let err = m.insert_interior(&parent(0.2, 0.4, 2.0), &result(&[2.5, 0.5], 0.0));
        assert!(matches!(err, Err(CurveError::Structural(_))));
        assert_eq!(m, reference_map());
    }

    #[test]
    fn stretch_example() {
        let mut m = reference_map();
        let kids = m
            .insert_stretch(&parent(0.2, 0.4, 2.0), &result(&[1.0, 1.0], 0.3), RefineFlags { lower: true, upper: true })
            .unwrap();
        let e: Vec<(f64, f64)> = m.entries().iter().map(|e| (e.s, e.xi)).collect();
        assert_eq!(e.len(), 7);
        assert_eq!(e[2].0, 3.0);
        assert_relative_eq!(e[2].1, 0.2 + 0.2 / 2.3, max_relative = 1e-15);
        assert_relative_eq!(e[2].1, 0.28696, epsilon = 1e-5);
        assert_eq!(e[3].0, 4.0);
        assert_relative_eq!(e[3].1, 0.37391, epsilon = 1e-5);
        assert_relative_eq!(e[4].0, 4.3, max_relative = 1e-15);
        assert_eq!(e[4].1, 0.4);
        assert_relative_eq!(e[5].0, 7.3, max_relative = 1e-15);
        assert_eq!(e[5].1, 0.7);
        assert_relative_eq!(e[6].0, 10.3, max_relative = 1e-15);
        assert_eq!(e[6].1, 1.0);
        assert_eq!(e[0], (0.0, 0.0));
        assert_eq!(e[1], (2.0, 0.2));

        assert_eq!(kids.len(), 3);
        assert_eq!((kids[0].xi_lo, kids[0].xi_hi, kids[0].delta_l0), (0.2, e[2].1, 1.0));
        assert_eq!((kids[1].xi_lo, kids[1].xi_hi, kids[1].delta_l0), (e[2].1, e[3].1, 1.0));
        assert_eq!((kids[2].xi_lo, kids[2].xi_hi, kids[2].delta_l0), (e[3].1, 0.4, 0.3));
        assert!(kids.iter().all(|k| k.level == 2));
    }

    #[test]
    fn stretch_children_follow_flags() {
        let run = |flags| {
            let mut m = reference_map();
            m.insert_stretch(&parent(0.2, 0.4, 2.0), &result(&[1.0, 1.0], 0.3), flags).unwrap()
        };
        assert_eq!(run(RefineFlags { lower: true, upper: false }).len(), 2);
        let upper = run(RefineFlags { lower: false, upper: true });
        assert_eq!(upper.len(), 1);
        assert_eq!(upper[0].delta_l0, 0.3);
    }

    #[test]
    fn zero_closing_distance_merges_the_end_point() {
        let mut m = reference_map();
        let kids = m
            .insert_stretch(&parent(0.2, 0.4, 2.0), &result(&[1.0, 1.0], 0.0), RefineFlags { lower: true, upper: true })
            .unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.entries()[2].s, 3.0);
        assert_relative_eq!(m.entries()[2].xi, 0.3, max_relative = 1e-15);
        assert_eq!((m.entries()[3].s, m.entries()[3].xi), (4.0, 0.4));
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[1].xi_hi, 0.4);
        assert!(m.is_monotone());
    }

    #[test]
    fn collect_counts() {
        let m = map_from(&[0.0, 1.0, 2.0]);
        assert_eq!(m.collect().len(), 3);
        assert!(m.collect().iter().all(|p| p.level == 0));

        let mut a = m.clone();
        a.insert_interior(&parent(0.0, 0.5, 1.0), &result(&[0.5, 0.5], 0.0)).unwrap();
        assert_eq!(a.collect().len(), 4);

        let mut b = m.clone();
        b.insert_stretch(&parent(0.0, 0.5, 1.0), &result(&[0.5, 0.5], 0.2), RefineFlags { lower: true, upper: true })
            .unwrap();
        let rows = b.collect();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|p| p[1].xi > p[0].xi));
    }

    #[test]
    fn stretch_preserves_total_length_bookkeeping() {
        let mut m = reference_map();
        m.insert_stretch(&parent(0.4, 0.7, 3.0), &result(&[1.6, 1.5], 0.4), RefineFlags { lower: true, upper: false })
            .unwrap();
        assert_relative_eq!(m.entries().last().unwrap().s, 10.0 + 1.6 + 1.5 + 0.4 - 3.0, max_relative = 1e-15);
        assert_eq!(m.entries().last().unwrap().xi, 1.0);
    }

    #[derive(Debug, Clone)]
    struct Op {
        pick: usize,
        stretch: bool,
        parts: Vec<f64>,
        closing: f64,
    }

    fn op() -> impl Strategy<Value = Op> {
        (
            0usize..1000,
            any::<bool>(),
            proptest::collection::vec(0.2f64..1.0, 2..5),
            prop_oneof![Just(0.0), 0.0f64..0.6],
        )
            .prop_map(|(pick, stretch, parts, closing)| Op { pick, stretch, parts, closing })
    }

    proptest! {
        #[test]
        fn insertions_keep_both_coordinates_strictly_increasing(ops in proptest::collection::vec(op(), 1..40)) {
            let mut m = map_from(&[0.0, 1.0, 2.5, 3.0, 5.0]);
            let end_xi = 1.0;
            for o in ops {
                let n = m.len();
                let i = o.pick % (n - 1);
                let (a, b) = (m.entries()[i].clone(), m.entries()[i + 1].clone());
                let len = b.s - a.s;
                let total: f64 = o.parts.iter().sum();
                let d: Vec<f64> = o.parts.iter().map(|p| p / total * len).collect();
                let p = IntervalDescriptor { branch: 0, xi_lo: a.xi, xi_hi: b.xi, delta_l0: len, level: 1 };
                let before = m.clone();
                if o.stretch {
                    let r = result(&d, o.closing * len);
                    let kids = m.insert_stretch(&p, &r, RefineFlags { lower: true, upper: true }).unwrap();
                    for k in &kids {
                        prop_assert!(m.lookup(k.xi_lo).is_ok() && m.lookup(k.xi_hi).is_ok());
                        prop_assert!(k.xi_lo < k.xi_hi);
                    }
                    let shift = m.entries().last().unwrap().s - before.entries().last().unwrap().s;
                    for e in before.entries() {
                        let now = m.lookup(e.xi).unwrap();
                        if e.xi < b.xi { prop_assert_eq!(now.s, e.s); }
                        else { prop_assert!((now.s - e.s - shift).abs() <= 1e-9 * (1.0 + e.s)); }
                    }
                } else {
                    m.insert_interior(&p, &result(&d, o.closing * len)).unwrap();
                    for e in before.entries() {
                        prop_assert_eq!(m.lookup(e.xi).unwrap(), e);
                    }
                }
                prop_assert!(m.is_monotone());
                prop_assert_eq!(m.entries().last().unwrap().xi, end_xi);
            }
        }
    }
}
