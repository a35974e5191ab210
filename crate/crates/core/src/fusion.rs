//! Fusion of redundant layouts: align every layout to the running mean,
//! score each by its squared error against that mean, and average the
//! best-scoring ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{best_rigid_align, Point2};
use crate::layouts::{AlignedLayoutSet, CommonFrame, Layout};

/// LSE values closer than this (m²) to the retention boundary count as tied.
pub const LSE_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    /// Fraction of layouts kept for the final average, in (0, 1].
    pub q: f64,
    /// Stop once no node of the mean moves by more than this (m).
    pub tol_fuse: f64,
    pub max_iter: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            q: 0.5,
            tol_fuse: 1e-6,
            max_iter: 10,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParams(format!("q must be in (0, 1], got {}", self.q)));
        }
        if !(self.tol_fuse > 0.0) {
            return Err(Error::InvalidParams(format!(
                "tol_fuse must be positive, got {}",
                self.tol_fuse
            )));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidParams("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutScore {
    pub base: (usize, usize),
    pub lse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEstimate {
    pub timestamp: f64,
    /// `None` for nodes absent from every retained layout.
    pub positions: Vec<Option<Point2>>,
    /// One entry per input layout, ordered by basis pair.
    pub layout_lse: Vec<LayoutScore>,
    /// Basis pairs averaged into `positions`, ordered by basis pair.
    pub retained: Vec<(usize, usize)>,
    pub iterations_used: usize,
}

impl FusedEstimate {
    /// Positions with absent nodes replaced by the origin.
    pub fn positions_or_origin(&self) -> Vec<Point2> {
        self.positions
            .iter()
            .map(|p| p.unwrap_or(Point2::ORIGIN))
            .collect()
    }
}

/// Per-node mean over every layout that places the node.
pub(crate) fn node_mean(layouts: &[Vec<Option<Point2>>], n: usize) -> Vec<Option<Point2>> {
    (0..n)
        .map(|i| {
            let mut sum = Point2::ORIGIN;
            let mut count = 0usize;
            for layout in layouts {
                if let Some(p) = layout[i] {
                    sum = sum + p;
                    count += 1;
                }
            }
            (count > 0).then(|| sum.scale(1.0 / count as f64))
        })
        .collect()
}

/// Corresponding points of `layout` and `reference` over nodes present in
/// both and not excluded.
pub(crate) fn correspondences(
    layout: &[Option<Point2>],
    reference: &[Option<Point2>],
    excluded: &[usize],
) -> (Vec<Point2>, Vec<Point2>) {
    let mut src = Vec::with_capacity(layout.len());
    let mut dst = Vec::with_capacity(layout.len());
    for (i, (p, q)) in layout.iter().zip(reference).enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        if let (Some(p), Some(q)) = (p, q) {
            src.push(*p);
            dst.push(*q);
        }
    }
    (src, dst)
}

/// Squared error of `layout` against `reference` over shared, non-excluded
/// nodes.
pub(crate) fn masked_lse(
    layout: &[Option<Point2>],
    reference: &[Option<Point2>],
    excluded: &[usize],
) -> f64 {
    let (a, b) = correspondences(layout, reference, excluded);
    a.iter().zip(&b).map(|(p, q)| p.distance_squared(q)).sum()
}

/// Rigidly moves `layout` onto `reference`; layouts with too few shared
/// distinct points are returned unchanged.
pub(crate) fn align_onto(
    layout: &[Option<Point2>],
    reference: &[Option<Point2>],
    excluded: &[usize],
) -> Vec<Option<Point2>> {
    let (src, dst) = correspondences(layout, reference, excluded);
    match best_rigid_align(&src, &dst) {
        Ok(t) => layout.iter().map(|p| p.map(|q| t.apply(q))).collect(),
        Err(_) => layout.to_vec(),
    }
}

pub(crate) struct Alignment {
    pub positions: Vec<Vec<Option<Point2>>>,
    pub mean: Vec<Option<Point2>>,
    pub iterations: usize,
}

/// Repeatedly aligns every layout to the per-node mean, re-expressing the
/// whole set in `frame` after each pass, until the mean settles.
pub(crate) fn align_to_mean(
    layouts: Vec<Vec<Option<Point2>>>,
    n: usize,
    frame: &CommonFrame,
    excluded: &[usize],
    tol: f64,
    max_iter: usize,
) -> Alignment {
    let originals = layouts;
    let mut current = originals.clone();
    let mut mean = node_mean(&current, n);
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        current = originals
            .iter()
            .map(|l| align_onto(l, &mean, excluded))
            .collect();
        let mut next = node_mean(&current, n);
        if let Ok(map) = frame.map_for(&next) {
            let rigid = map.rigid;
            for layout in current.iter_mut() {
                for p in layout.iter_mut().flatten() {
                    *p = rigid.apply(*p);
                }
            }
            for p in next.iter_mut().flatten() {
                *p = rigid.apply(*p);
            }
        }
        let shift = next
            .iter()
            .zip(&mean)
            .filter_map(|(a, b)| Some(a.as_ref()?.distance(b.as_ref()?)))
            .fold(0.0f64, f64::max);
        mean = next;
        if shift < tol {
            break;
        }
    }
    Alignment {
        positions: current,
        mean,
        iterations,
    }
}

/// Fuses a layout set into one position estimate.
pub fn fuse(aligned: &AlignedLayoutSet, params: &FusionParams) -> Result<FusedEstimate> {
    fuse_with_layouts(aligned, params).map(|(fused, _)| fused)
}

/// Like [`fuse`], also returning every layout as moved onto the mean.
pub fn fuse_with_layouts(
    aligned: &AlignedLayoutSet,
    params: &FusionParams,
) -> Result<(FusedEstimate, AlignedLayoutSet)> {
    params.validate()?;
    if aligned.layouts.len() < 2 {
        return Err(Error::InsufficientLayouts(aligned.layouts.len()));
    }
    let n = aligned.n;
    let excluded = aligned.excluded.as_slice();
    let mut ordered: Vec<&Layout> = aligned.layouts.iter().collect();
    ordered.sort_by_key(|l| l.base);

    let first = align_to_mean(
        ordered.iter().map(|l| l.positions.clone()).collect(),
        n,
        &aligned.frame,
        excluded,
        params.tol_fuse,
        params.max_iter,
    );

    let scores: Vec<LayoutScore> = ordered
        .iter()
        .zip(&first.positions)
        .map(|(l, p)| LayoutScore {
            base: l.base,
            lse: masked_lse(p, &first.mean, excluded),
        })
        .collect();

    let mut rank: Vec<usize> = (0..scores.len()).collect();
    rank.sort_by(|&a, &b| {
        scores[a]
            .lse
            .total_cmp(&scores[b].lse)
            .then(scores[a].base.cmp(&scores[b].base))
    });
    let keep = ((params.q * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let boundary = scores[rank[keep - 1]].lse;
    let retained_idx: Vec<usize> = (0..scores.len())
        .filter(|&k| scores[k].lse <= boundary + LSE_TIE_EPS)
        .collect();

    let last = align_to_mean(
        retained_idx
            .iter()
            .map(|&k| first.positions[k].clone())
            .collect(),
        n,
        &aligned.frame,
        excluded,
        params.tol_fuse,
        params.max_iter,
    );

    let fused = FusedEstimate {
        timestamp: aligned.timestamp,
        positions: last.mean,
        layout_lse: scores,
        retained: retained_idx.iter().map(|&k| ordered[k].base).collect(),
        iterations_used: first.iterations,
    };
    let moved = AlignedLayoutSet {
        timestamp: aligned.timestamp,
        n,
        frame: aligned.frame,
        layouts: ordered
            .iter()
            .zip(first.positions)
            .map(|(l, positions)| Layout {
                base: l.base,
                positions,
                flags: l.flags.clone(),
            })
            .collect(),
        excluded: aligned.excluded.clone(),
    };
    Ok((fused, moved))
}
