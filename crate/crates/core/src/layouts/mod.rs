//! One layout per basis pair, built by sequential trilateration, and the
//! transfer of every layout into a shared reference frame.

mod range_table;

pub use range_table::{read_csv, write_csv, RangeTable, RANGES_CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resolve_mirror, trilaterate, Point2, RigidTransform2, EPSILON_BASIS};

/// Node positions computed with one unordered node pair as coordinate basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Basis pair `(n, m)`; at construction `n` is at the origin and `m` on
    /// the +x axis.
    pub base: (usize, usize),
    /// `None` marks a node that could not be placed in this layout.
    pub positions: Vec<Option<Point2>>,
    /// Set for nodes whose ranges were inconsistent or partly missing.
    pub flags: Vec<bool>,
}

impl Layout {
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn involves(&self, node: usize) -> bool {
        self.base.0 == node || self.base.1 == node
    }

    pub fn present_count(&self) -> usize {
        self.positions.iter().filter(|p| p.is_some()).count()
    }
}

/// Nodes that pin the shared frame: `origin` maps to (0, 0), `axis` onto the
/// +x axis, and `disambiguator` to y ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonFrame {
    pub origin: usize,
    pub axis: usize,
    pub disambiguator: usize,
}

impl Default for CommonFrame {
    fn default() -> Self {
        CommonFrame {
            origin: 0,
            axis: 1,
            disambiguator: 2,
        }
    }
}

/// Rigid motion optionally followed by reflection across the x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMap {
    pub rigid: RigidTransform2,
    pub reflect: bool,
}

impl FrameMap {
    pub fn apply(&self, p: Point2) -> Point2 {
        let q = self.rigid.apply(p);
        if self.reflect {
            q.mirrored()
        } else {
            q
        }
    }
}

impl CommonFrame {
    pub fn new(origin: usize, axis: usize, disambiguator: usize) -> Result<Self> {
        let f = CommonFrame {
            origin,
            axis,
            disambiguator,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.origin == self.axis
            || self.origin == self.disambiguator
            || self.axis == self.disambiguator
        {
            return Err(Error::DegenerateReference(format!(
                "reference nodes must be distinct: {self:?}"
            )));
        }
        Ok(())
    }

    /// Map taking `positions` into this frame.
    pub fn map_for(&self, positions: &[Option<Point2>]) -> Result<FrameMap> {
        self.validate()?;
        let fetch = |k: usize| -> Result<Point2> {
            positions.get(k).copied().flatten().ok_or_else(|| {
                Error::DegenerateReference(format!("reference node {k} has no position"))
            })
        };
        let a = fetch(self.origin)?;
        let b = fetch(self.axis)?;
        let c = fetch(self.disambiguator)?;
        let ab = b - a;
        if ab.norm() <= EPSILON_BASIS {
            return Err(Error::DegenerateReference(format!(
                "nodes {} and {} coincide",
                self.origin, self.axis
            )));
        }
        let rigid = RigidTransform2::rotation(-ab.y.atan2(ab.x))
            .compose(&RigidTransform2::translation(-a.x, -a.y));
        let reflect = rigid.apply(c).y < 0.0;
        Ok(FrameMap { rigid, reflect })
    }

    /// `positions` expressed in this frame.
    pub fn canonicalize(&self, positions: &[Option<Point2>]) -> Result<Vec<Option<Point2>>> {
        let map = self.map_for(positions)?;
        Ok(positions.iter().map(|p| p.map(|q| map.apply(q))).collect())
    }

    /// Same as [`canonicalize`](Self::canonicalize) for fully populated input.
    pub fn canonicalize_points(&self, positions: &[Point2]) -> Result<Vec<Point2>> {
        let wrapped: Vec<Option<Point2>> = positions.iter().copied().map(Some).collect();
        let map = self.map_for(&wrapped)?;
        Ok(positions.iter().map(|p| map.apply(*p)).collect())
    }
}

/// Layouts for one timestamp, all expressed in the same [`CommonFrame`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLayoutSet {
    pub timestamp: f64,
    pub n: usize,
    pub frame: CommonFrame,
    pub layouts: Vec<Layout>,
    /// Nodes removed as anomalous; they no longer steer alignment or scoring.
    pub excluded: Vec<usize>,
}

impl AlignedLayoutSet {
    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn is_excluded(&self, node: usize) -> bool {
        self.excluded.contains(&node)
    }

    pub fn bases(&self) -> Vec<(usize, usize)> {
        self.layouts.iter().map(|l| l.base).collect()
    }
}

/// Builds the layout whose basis is `base = (n, m)`.
///
/// Non-basis nodes are placed in ascending index order; each one's mirror
/// branch is chosen against the non-basis nodes already placed. A node
/// missing a range to either basis node is left absent.
pub fn build_layout(ranges: &RangeTable, base: (usize, usize)) -> Result<Layout> {
    let (bn, bm) = base;
    let n = ranges.n();
    for index in [bn, bm] {
        if index >= n {
            return Err(Error::NodeOutOfRange { index, n });
        }
    }
    if bn == bm {
        return Err(Error::DegenerateBasis(0.0));
    }
    let d_nm = ranges.get(bn, bm).ok_or(Error::DegenerateBasis(f64::NAN))?;
    if d_nm <= EPSILON_BASIS {
        return Err(Error::DegenerateBasis(d_nm));
    }

    let mut positions = vec![None; n];
    let mut flags = vec![false; n];
    positions[bn] = Some(Point2::ORIGIN);
    positions[bm] = Some(Point2::new(d_nm, 0.0));

    let mut placed: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        if i == bn || i == bm {
            continue;
        }
        let (Some(d_ni), Some(d_im)) = (ranges.get(bn, i), ranges.get(i, bm)) else {
            continue;
        };
        let tri = trilaterate(d_nm, d_ni, d_im)?;
        let prior: Vec<(Point2, f64)> = placed
            .iter()
            .filter_map(|&j| Some((positions[j]?, ranges.get(i, j)?)))
            .collect();
        positions[i] = Some(resolve_mirror((tri.x, tri.y_abs), &prior));
        let missing_peer = (0..n).any(|j| j != bn && j != bm && j != i && !ranges.is_valid(i, j));
        flags[i] = tri.inconsistent || missing_peer;
        placed.push(i);
    }
    Ok(Layout {
        base,
        positions,
        flags,
    })
}

/// One layout for every valid, non-degenerate unordered pair, ordered by
/// basis pair.
pub fn enumerate_layouts(ranges: &RangeTable) -> Result<Vec<Layout>> {
    let n = ranges.n();
    if n < 3 {
        return Err(Error::TooFewNodes(n));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            match ranges.get(i, j) {
                Some(d) if d > EPSILON_BASIS => out.push(build_layout(ranges, (i, j))?),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Transfers every layout into `frame`, reflecting where needed so the
/// disambiguator lands on y ≥ 0.
pub fn to_common_frame(
    layouts: &[Layout],
    frame: CommonFrame,
    timestamp: f64,
) -> Result<AlignedLayoutSet> {
    frame.validate()?;
    let n = layouts.first().map_or(0, Layout::n);
    let mut out = Vec::with_capacity(layouts.len());
    for layout in layouts {
        let positions = frame.canonicalize(&layout.positions).map_err(|e| match e {
            Error::DegenerateReference(msg) => {
                Error::DegenerateReference(format!("layout {:?}: {msg}", layout.base))
            }
            other => other,
        })?;
        out.push(Layout {
            base: layout.base,
            positions,
            flags: layout.flags.clone(),
        });
    }
    Ok(AlignedLayoutSet {
        timestamp,
        n,
        frame,
        layouts: out,
        excluded: Vec::new(),
    })
}

/// Enumerates layouts for one range table and transfers them into `frame`.
///
/// Layouts that fail to place any of the three reference nodes cannot be
/// expressed in the frame and are dropped.
pub fn aligned_layouts(ranges: &RangeTable, frame: CommonFrame) -> Result<AlignedLayoutSet> {
    let layouts: Vec<Layout> = enumerate_layouts(ranges)?
        .into_iter()
        .filter(|l| {
            [frame.origin, frame.axis, frame.disambiguator]
                .iter()
                .all(|&k| l.positions.get(k).is_some_and(Option::is_some))
        })
        .collect();
    let mut set = to_common_frame(&layouts, frame, ranges.timestamp())?;
    set.n = ranges.n();
    Ok(set)
}
