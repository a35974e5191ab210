//! Gradient-descent positioning on the total squared range residual.
//!
//! The loss is invariant to rotations, translations and reflections of the
//! whole node set, so every result is re-expressed in the caller's
//! [`CommonFrame`] before it is returned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::per_node_spread;
use crate::error::{Error, Result};
use crate::fusion::node_mean;
use crate::geometry::Point2;
use crate::layouts::{AlignedLayoutSet, CommonFrame, Layout, RangeTable};

/// Pairs closer than this (m) are treated as coincident.
pub const COINCIDENT_RADIUS: f64 = 1e-9;

/// Offset (m) applied along +x to the higher-indexed node of a coincident
/// pair before optimizing.
pub const COINCIDENT_NUDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdParams {
    pub step: f64,
    pub max_iter: usize,
    /// Stop once one iteration improves the loss by less than this (m²).
    pub tol_loss: f64,
    /// Backtracking by halving from `step`; keeps the loss trace monotone.
    pub line_search: bool,
    pub max_backtracks: usize,
}

impl Default for GdParams {
    fn default() -> Self {
        GdParams {
            step: 0.05,
            max_iter: 500,
            tol_loss: 1e-9,
            line_search: true,
            max_backtracks: 20,
        }
    }
}

impl GdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParams(format!("step must be positive, got {}", self.step)));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidParams("max_iter must be at least 1".into()));
        }
        if !(self.tol_loss > 0.0) {
            return Err(Error::InvalidParams(format!(
                "tol_loss must be positive, got {}",
                self.tol_loss
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdResult {
    pub positions: Vec<Point2>,
    /// Loss before the first step, then after every accepted step.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

impl GdResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial loss")
    }
}

fn check_len(positions: &[Point2], ranges: &RangeTable) -> Result<()> {
    if positions.len() != ranges.n() {
        return Err(Error::LengthMismatch {
            left: positions.len(),
            right: ranges.n(),
        });
    }
    Ok(())
}

/// Sum over valid unordered pairs of `(d_ij − ‖p_i − p_j‖)²`.
pub fn gd_loss(positions: &[Point2], ranges: &RangeTable) -> Result<f64> {
    check_len(positions, ranges)?;
    Ok(ranges
        .pairs()
        .map(|(i, j, d)| {
            let r = d - positions[i].distance(&positions[j]);
            r * r
        })
        .sum())
}

/// Analytic gradient of [`gd_loss`] with respect to every position.
pub fn gd_gradient(positions: &[Point2], ranges: &RangeTable) -> Result<Vec<Point2>> {
    check_len(positions, ranges)?;
    let mut grad = vec![Point2::ORIGIN; positions.len()];
    for (i, j, d) in ranges.pairs() {
        let diff = positions[i] - positions[j];
        let dist = diff.norm();
        if dist < COINCIDENT_RADIUS {
            return Err(Error::CoincidentPoints(i, j));
        }
        let g = diff.scale(-2.0 * (d - dist) / dist);
        grad[i] = grad[i] + g;
        grad[j] = grad[j] - g;
    }
    Ok(grad)
}

fn separate_coincident(positions: &mut [Point2], ranges: &RangeTable) {
    for (i, j, _) in ranges.pairs() {
        if positions[i].distance(&positions[j]) < COINCIDENT_RADIUS {
            positions[j].x += COINCIDENT_NUDGE;
        }
    }
}

/// Minimizes [`gd_loss`] from `init` and re-anchors the result in `frame`.
pub fn gd_optimize(
    init: &[Point2],
    ranges: &RangeTable,
    frame: &CommonFrame,
    params: &GdParams,
) -> Result<GdResult> {
    params.validate()?;
    check_len(init, ranges)?;
    if init.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidParams("initial positions must be finite".into()));
    }
    let mut pos = init.to_vec();
    separate_coincident(&mut pos, ranges);
    let mut loss = gd_loss(&pos, ranges)?;
    let mut trace = vec![loss];
    let mut converged = false;

    for it in 0..params.max_iter {
        let grad = match gd_gradient(&pos, ranges) {
            Ok(g) => g,
            Err(Error::CoincidentPoints(..)) => {
                separate_coincident(&mut pos, ranges);
                gd_gradient(&pos, ranges)?
            }
            Err(e) => return Err(e),
        };
        let step_to = |step: f64| -> Vec<Point2> {
            pos.iter().zip(&grad).map(|(p, g)| *p - g.scale(step)).collect()
        };

        let (next, next_loss) = if params.line_search {
            let mut step = params.step;
            let mut accepted = None;
            for _ in 0..=params.max_backtracks {
                let cand = step_to(step);
                let l = gd_loss(&cand, ranges)?;
                if l <= loss {
                    accepted = Some((cand, l));
                    break;
                }
                step /= 2.0;
            }
            match accepted {
                Some(a) => a,
                None => {
                    converged = true;
                    break;
                }
            }
        } else {
            let cand = step_to(params.step);
            let l = gd_loss(&cand, ranges)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss(it + 1));
            }
            (cand, l)
        };

        let improvement = loss - next_loss;
        pos = next;
        loss = next_loss;
        trace.push(loss);
        if improvement.abs() < params.tol_loss {
            converged = true;
            break;
        }
    }

    let positions = frame.canonicalize_points(&pos).unwrap_or(pos);
    Ok(GdResult {
        positions,
        loss_trace: trace,
        converged,
    })
}

/// Runs [`gd_optimize`] once per layout, each initialized from that layout,
/// and returns the converged solutions as a layout set with the same bases.
///
/// Nodes a layout could not place start from their mean over the other
/// layouts.
pub fn gd_configurations(
    aligned: &AlignedLayoutSet,
    ranges: &RangeTable,
    params: &GdParams,
) -> Result<AlignedLayoutSet> {
    let positions: Vec<Vec<Option<Point2>>> =
        aligned.layouts.iter().map(|l| l.positions.clone()).collect();
    let fallback = node_mean(&positions, aligned.n);
    let solved: Vec<Result<Layout>> = aligned
        .layouts
        .par_iter()
        .map(|layout| {
            let init: Vec<Point2> = layout
                .positions
                .iter()
                .zip(&fallback)
                .map(|(p, f)| p.or(*f).unwrap_or(Point2::ORIGIN))
                .collect();
            let result = gd_optimize(&init, ranges, &aligned.frame, params)?;
            Ok(Layout {
                base: layout.base,
                positions: result.positions.into_iter().map(Some).collect(),
                flags: layout.flags.clone(),
            })
        })
        .collect();
    Ok(AlignedLayoutSet {
        timestamp: aligned.timestamp,
        n: aligned.n,
        frame: aligned.frame,
        layouts: solved.into_iter().collect::<Result<_>>()?,
        excluded: aligned.excluded.clone(),
    })
}

/// Per-node positional spread of the gradient-descent solutions started from
/// every layout.
pub fn gd_configuration_dispersion(
    aligned: &AlignedLayoutSet,
    ranges: &RangeTable,
    params: &GdParams,
) -> Result<Vec<f64>> {
    let solved = gd_configurations(aligned, ranges, params)?;
    Ok(per_node_spread(&solved))
}
