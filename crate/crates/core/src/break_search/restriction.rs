//! Linear restrictions `R lambda = r` on stacked break fractions, limited to
//! the three shapes that map onto the integer date grid: pinned dates, common
//! dates and fixed offsets between two dates.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestrictionKind {
    None,
    FixedDates,
    CommonGroups,
    FixedOffsets,
    /// More than one of the above in a single set.
    Mixed,
}

/// One row of `R lambda = r`. Slots index the stacked break vector
/// (equation-major, as in [`BreakVector::flat`](crate::BreakVector::flat)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    /// `lambda_slot = fraction`
    Fixed { slot: usize, fraction: f64 },
    /// `lambda_a - lambda_b = diff`; a zero difference is a common break.
    Offset { a: usize, b: usize, diff: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestrictionSet {
    m: usize,
    constraints: Vec<Constraint>,
}

/// `round(x)` with halves going up, tolerant of representation error so
/// that e.g. `0.525 * 100` maps to 53.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5 + 1e-9).floor() as i64
}

impl RestrictionSet {
    pub fn none(m: usize) -> Self {
        Self {
            m,
            constraints: Vec::new(),
        }
    }

    /// Pins each listed slot to a fraction of the sample.
    pub fn fixed_dates(m: usize, pins: &[(usize, f64)]) -> Result<Self> {
        let constraints = pins
            .iter()
            .map(|&(slot, fraction)| Constraint::Fixed { slot, fraction })
            .collect();
        Self::from_constraints(m, constraints)
    }

    /// Every slot in a group shares one date.
    pub fn common(m: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut constraints = Vec::new();
        for g in groups {
            if g.len() < 2 {
                return Err(Error::invalid(
                    "a common-break group needs at least two slots",
                ));
            }
            for &s in &g[1..] {
                constraints.push(Constraint::Offset {
                    a: g[0],
                    b: s,
                    diff: 0.0,
                });
            }
        }
        Self::from_constraints(m, constraints)
    }

    /// `lambda_a - lambda_b = c` for each `(a, b, c)`.
    pub fn offsets(m: usize, offsets: &[(usize, usize, f64)]) -> Result<Self> {
        let constraints = offsets
            .iter()
            .map(|&(a, b, diff)| Constraint::Offset { a, b, diff })
            .collect();
        Self::from_constraints(m, constraints)
    }

    pub fn from_constraints(m: usize, constraints: Vec<Constraint>) -> Result<Self> {
        for c in &constraints {
            match *c {
                Constraint::Fixed { slot, fraction } => {
                    if slot >= m {
                        return Err(Error::invalid(format!(
                            "slot {slot} out of range for m = {m}"
                        )));
                    }
                    if !(fraction > 0.0 && fraction < 1.0) {
                        return Err(Error::invalid(format!(
                            "fixed fraction {fraction} not in (0, 1)"
                        )));
                    }
                }
                Constraint::Offset { a, b, diff } => {
                    if a >= m || b >= m {
                        return Err(Error::invalid(format!("slot out of range for m = {m}")));
                    }
                    if a == b {
                        return Err(Error::invalid("offset constraint links a slot to itself"));
                    }
                    if !(diff.abs() < 1.0) {
                        return Err(Error::invalid(format!("offset {diff} not in (-1, 1)")));
                    }
                }
            }
        }
        let set = Self { m, constraints };
        if set.q() > 0 {
            let r = set.r_matrix();
            if linalg::rank(&r, 1e-10) != set.q() {
                return Err(Error::invalid("restriction rows are linearly dependent"));
            }
        }
        Ok(set)
    }

    /// Parses a general `(R, r)` pair, accepting only rows with a single
    /// `+-1` entry or a `+1, -1` pair.
    pub fn from_matrix(r_mat: &DMatrix<f64>, r_vec: &[f64]) -> Result<Self> {
        if r_mat.nrows() != r_vec.len() {
            return Err(Error::invalid("R and r have different row counts"));
        }
        let m = r_mat.ncols();
        let mut constraints = Vec::with_capacity(r_vec.len());
        for (row, &rhs) in r_vec.iter().enumerate() {
            let nz: Vec<(usize, f64)> = (0..m)
                .filter_map(|j| {
                    let v = r_mat[(row, j)];
                    (v != 0.0).then_some((j, v))
                })
                .collect();
            let c = match nz.as_slice() {
                [(j, v)] if v.abs() == 1.0 => Constraint::Fixed {
                    slot: *j,
                    fraction: rhs * v,
                },
                [(a, va), (b, vb)] if *va == 1.0 && *vb == -1.0 => Constraint::Offset {
                    a: *a,
                    b: *b,
                    diff: rhs,
                },
                [(a, va), (b, vb)] if *va == -1.0 && *vb == 1.0 => Constraint::Offset {
                    a: *b,
                    b: *a,
                    diff: rhs,
                },
                _ => {
                    return Err(Error::invalid(format!(
                    "row {row} of R is not a fixed-date, common-break or fixed-offset restriction"
                )))
                }
            };
            constraints.push(c);
        }
        Self::from_constraints(m, constraints)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn kind(&self) -> RestrictionKind {
        let mut fixed = false;
        let mut common = false;
        let mut offset = false;
        for c in &self.constraints {
            match *c {
                Constraint::Fixed { .. } => fixed = true,
                Constraint::Offset { diff: 0.0, .. } => common = true,
                Constraint::Offset { .. } => offset = true,
            }
        }
        match (fixed, common, offset) {
            (false, false, false) => RestrictionKind::None,
            (true, false, false) => RestrictionKind::FixedDates,
            (false, true, false) => RestrictionKind::CommonGroups,
            (false, false, true) => RestrictionKind::FixedOffsets,
            _ => RestrictionKind::Mixed,
        }
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.q(), self.m);
        for (row, c) in self.constraints.iter().enumerate() {
            match *c {
                Constraint::Fixed { slot, .. } => r[(row, slot)] = 1.0,
                Constraint::Offset { a, b, .. } => {
                    r[(row, a)] = 1.0;
                    r[(row, b)] = -1.0;
                }
            }
        }
        r
    }

    pub fn r_vector(&self) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| match *c {
                Constraint::Fixed { fraction, .. } => fraction,
                Constraint::Offset { diff, .. } => diff,
            })
            .collect()
    }

    /// Maps the restriction onto dates for sample length `t`.
    pub(crate) fn resolve(&self, t: usize) -> Result<SlotMap> {
        let m = self.m;
        let mut parent: Vec<usize> = (0..m).collect();
        // date(s) = date(parent(s)) + off(s)
        let mut off = vec![0i64; m];

        fn find(parent: &mut [usize], off: &mut [i64], s: usize) -> (usize, i64) {
            let mut root = s;
            let mut acc = 0;
            while parent[root] != root {
                acc += off[root];
                root = parent[root];
            }
            // path compression
            let mut cur = s;
            let mut rem = acc;
            while parent[cur] != cur {
                let next = parent[cur];
                let o = off[cur];
                parent[cur] = root;
                off[cur] = rem;
                rem -= o;
                cur = next;
            }
            (root, acc)
        }

        let tf = t as f64;
        for c in &self.constraints {
            if let Constraint::Offset { a, b, diff } = *c {
                let d = round_half_up(diff * tf);
                let (ra, oa) = find(&mut parent, &mut off, a);
                let (rb, ob) = find(&mut parent, &mut off, b);
                if ra == rb {
                    if oa - ob != d {
                        return Err(Error::invalid("offset restrictions are inconsistent"));
                    }
                    continue;
                }
                // date(ra) = date(rb) + d + ob - oa
                parent[ra] = rb;
                off[ra] = d + ob - oa;
            }
        }

        let mut pinned: Vec<Option<i64>> = vec![None; m];
        for c in &self.constraints {
            if let Constraint::Fixed { slot, fraction } = *c {
                let date = round_half_up(fraction * tf);
                let (root, o) = find(&mut parent, &mut off, slot);
                let root_date = date - o;
                match pinned[root] {
                    Some(prev) if prev != root_date => {
                        return Err(Error::invalid("fixed-date restrictions are inconsistent"));
                    }
                    _ => pinned[root] = Some(root_date),
                }
            }
        }

        let mut roots = Vec::new();
        let mut root_index = vec![usize::MAX; m];
        for s in 0..m {
            let (r, _) = find(&mut parent, &mut off, s);
            if r == s && pinned[s].is_none() {
                root_index[s] = roots.len();
                roots.push(s);
            }
        }
        let slots = (0..m)
            .map(|s| {
                let (r, o) = find(&mut parent, &mut off, s);
                match pinned[r] {
                    Some(d) => SlotRule::Pinned(d + o),
                    None => SlotRule::Free {
                        root: root_index[r],
                        offset: o,
                    },
                }
            })
            .collect();
        Ok(SlotMap {
            free: roots.len(),
            slots,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SlotRule {
    Pinned(i64),
    Free { root: usize, offset: i64 },
}

/// Date-level form of a restriction: each slot is either pinned or a free
/// root date plus an integer offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SlotMap {
    pub free: usize,
    pub slots: Vec<SlotRule>,
}

impl SlotMap {
    /// Dates for given free-root values.
    #[cfg(test)]
    pub(crate) fn dates(&self, roots: &[i64], out: &mut [i64]) {
        for (o, rule) in out.iter_mut().zip(&self.slots) {
            *o = match *rule {
                SlotRule::Pinned(d) => d,
                SlotRule::Free { root, offset } => roots[root] + offset,
            };
        }
    }
}
