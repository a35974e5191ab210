//! Detection of nodes whose ranges corrupt the layouts they take part in.
//!
//! A node's error is the mean squared error, against the fused estimate, of
//! the layouts that use it as a basis member. Nodes whose error stands out
//! become candidates; a candidate is confirmed only if dropping its layouts
//! lowers the summed positional spread of the remaining layouts, which
//! screens out normal nodes that merely share a basis with the faulty one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{align_to_mean, fuse, masked_lse, FusedEstimate, FusionParams};
use crate::geometry::Point2;
use crate::layouts::{AlignedLayoutSet, Layout};

/// Scale factor turning a median absolute deviation into a normal-consistent
/// standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

/// Per-node errors at or below this (m²) never make a node a candidate.
pub const ERROR_FLOOR: f64 = 1e-9;

/// A removal must lower the spread statistic by more than this (m) to count.
const SD_BAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Flag errors above a fixed value in m².
    Absolute,
    /// Flag errors above `median + value · 1.4826 · MAD` across nodes.
    RobustZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub threshold_mode: ThresholdMode,
    pub threshold_value: f64,
    pub min_layouts_remaining: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            threshold_mode: ThresholdMode::RobustZ,
            threshold_value: 3.0,
            min_layouts_remaining: 3,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_value > 0.0 && self.threshold_value.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "threshold_value must be positive, got {}",
                self.threshold_value
            )));
        }
        if self.min_layouts_remaining < 1 {
            return Err(Error::InvalidParams(
                "min_layouts_remaining must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Error level above which a node becomes a candidate.
    pub fn threshold(&self, errors: &[Option<f64>]) -> f64 {
        match self.threshold_mode {
            ThresholdMode::Absolute => self.threshold_value,
            ThresholdMode::RobustZ => {
                let values: Vec<f64> = errors.iter().flatten().copied().collect();
                if values.is_empty() {
                    return f64::INFINITY;
                }
                let med = median(&values);
                let deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
                med + self.threshold_value * MAD_SCALE * median(&deviations)
            }
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub timestamp: f64,
    /// Mean layout error over the layouts each node is a basis member of;
    /// `None` when the node has no such layout.
    pub per_node_error: Vec<Option<f64>>,
    pub candidates: Vec<usize>,
    pub confirmed: Vec<usize>,
    pub sd_bar_baseline: f64,
    pub sd_bar_after_removal: BTreeMap<usize, f64>,
    pub pruned_layout_count: usize,
}

impl AnomalyReport {
    pub fn is_flagged(&self, node: usize) -> bool {
        self.confirmed.contains(&node)
    }
}

/// Mean error, in the common frame, of the layouts whose basis contains each
/// node against the fused positions.
pub fn per_node_error(aligned: &AlignedLayoutSet, fused: &FusedEstimate) -> Vec<Option<f64>> {
    let excluded = aligned.excluded.as_slice();
    let scores: Vec<(&Layout, f64)> = aligned
        .layouts
        .iter()
        .map(|l| {
            (l, masked_lse(&l.positions, &fused.positions, excluded))
        })
        .collect();
    (0..aligned.n)
        .map(|i| {
            if aligned.is_excluded(i) {
                return None;
            }
            let own: Vec<f64> = scores
                .iter()
                .filter(|(l, _)| l.involves(i))
                .map(|(_, e)| *e)
                .collect();
            (!own.is_empty()).then(|| own.iter().sum::<f64>() / own.len() as f64)
        })
        .collect()
}

/// Summed positional standard deviation across the layouts of `aligned`.
///
/// Layouts are first co-registered to their mean. For each non-excluded node
/// the population standard deviation is taken per axis over the layouts that
/// place it and combined as `hypot(sd_x, sd_y)`; the result is the sum over
/// nodes.
pub fn dispersion(aligned: &AlignedLayoutSet) -> f64 {
    dispersion_with_mask(aligned, &aligned.layouts.iter().collect::<Vec<_>>(), &aligned.excluded)
}

fn dispersion_with_mask(aligned: &AlignedLayoutSet, layouts: &[&Layout], registration_mask: &[usize]) -> f64 {
    let defaults = FusionParams::default();
    let alignment = align_to_mean(
        layouts.iter().map(|l| l.positions.clone()).collect(),
        aligned.n,
        &aligned.frame,
        registration_mask,
        defaults.tol_fuse,
        defaults.max_iter,
    );
    spread(&alignment.positions, aligned.n, registration_mask)
}

pub(crate) fn spread(layouts: &[Vec<Option<Point2>>], n: usize, excluded: &[usize]) -> f64 {
    (0..n)
        .filter(|i| !excluded.contains(i))
        .map(|i| node_spread(layouts, i))
        .sum()
}

/// `hypot(sd_x, sd_y)` of one node's positions, population form.
fn node_spread(layouts: &[Vec<Option<Point2>>], node: usize) -> f64 {
    let pts: Vec<Point2> = layouts.iter().filter_map(|l| l[node]).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.x).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.y).sum::<f64>() / m;
    let vx = pts.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / m;
    let vy = pts.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / m;
    vx.sqrt().hypot(vy.sqrt())
}

/// Per-node positional spread across the layouts as given, without any
/// re-registration.
pub fn per_node_spread(aligned: &AlignedLayoutSet) -> Vec<f64> {
    let positions: Vec<Vec<Option<Point2>>> =
        aligned.layouts.iter().map(|l| l.positions.clone()).collect();
    (0..aligned.n).map(|i| node_spread(&positions, i)).collect()
}

/// Spread statistic over the layouts that do not use `suspect` as a basis
/// member. The suspect is left out of both the co-registration and the sum:
/// once its layouts are gone its position comes only from its own ranges.
pub fn dispersion_after_removal(
    aligned: &AlignedLayoutSet,
    suspect: usize,
    params: &DetectorParams,
) -> Result<f64> {
    let remaining: Vec<&Layout> = aligned.layouts.iter().filter(|l| !l.involves(suspect)).collect();
    if remaining.len() < params.min_layouts_remaining.max(1) {
        return Err(Error::TooFewLayouts {
            remaining: remaining.len(),
            required: params.min_layouts_remaining,
        });
    }
    let mut mask = aligned.excluded.clone();
    if !mask.contains(&suspect) {
        mask.push(suspect);
    }
    Ok(dispersion_with_mask(aligned, &remaining, &mask))
}

/// Drops every layout whose basis contains a confirmed node and marks those
/// nodes as excluded.
pub fn prune(
    aligned: &AlignedLayoutSet,
    confirmed: &[usize],
    params: &DetectorParams,
) -> Result<AlignedLayoutSet> {
    let layouts: Vec<Layout> = aligned
        .layouts
        .iter()
        .filter(|l| !confirmed.iter().any(|&c| l.involves(c)))
        .cloned()
        .collect();
    if layouts.len() < params.min_layouts_remaining {
        return Err(Error::TooFewLayouts {
            remaining: layouts.len(),
            required: params.min_layouts_remaining,
        });
    }
    let mut excluded = aligned.excluded.clone();
    excluded.extend_from_slice(confirmed);
    excluded.sort_unstable();
    excluded.dedup();
    Ok(AlignedLayoutSet {
        timestamp: aligned.timestamp,
        n: aligned.n,
        frame: aligned.frame,
        layouts,
        excluded,
    })
}

/// Candidate-then-confirm detection.
///
/// Candidates are nodes whose error exceeds the threshold derived from the
/// initial errors. Each round scores the spread left by removing every
/// node's layouts and confirms the best candidate only if its removal both
/// lowers the current spread and is the lowest of all single-node removals.
/// The set is then pruned, re-fused and re-scored, and rounds continue until
/// no candidate qualifies.
pub fn detect(
    aligned: &AlignedLayoutSet,
    fused: &FusedEstimate,
    fusion: &FusionParams,
    params: &DetectorParams,
) -> Result<AnomalyReport> {
    params.validate()?;
    if aligned.layouts.len() < params.min_layouts_remaining {
        return Err(Error::TooFewLayouts {
            remaining: aligned.layouts.len(),
            required: params.min_layouts_remaining,
        });
    }

    let first_errors = per_node_error(aligned, fused);
    let sd_bar_baseline = dispersion(aligned);

    let mut candidates: Vec<usize> = Vec::new();
    let mut confirmed: Vec<usize> = Vec::new();
    let mut after_removal: BTreeMap<usize, f64> = BTreeMap::new();

    let mut current = aligned.clone();
    let mut errors = first_errors.clone();
    let mut current_sd = sd_bar_baseline;

    // Fixed from the full node set: after a removal the remaining errors can
    // be tiny, and a scale-free rule re-derived from them would flag noise.
    let threshold = params.threshold(&first_errors);
    loop {
        let round: Vec<usize> = errors
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.filter(|&e| e > threshold && e > ERROR_FLOOR).map(|_| i))
            .collect();
        if round.is_empty() {
            break;
        }
        for &c in &round {
            if !candidates.contains(&c) {
                candidates.push(c);
            }
        }
        // Every node's removal is scored so a candidate can be checked
        // against the lowest spread any single removal achieves.
        let mut removal: Vec<Option<f64>> = vec![None; current.n];
        for (k, slot) in removal.iter_mut().enumerate() {
            if current.is_excluded(k) {
                continue;
            }
            match dispersion_after_removal(&current, k, params) {
                Ok(sd) => *slot = Some(sd),
                Err(Error::TooFewLayouts { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let floor = removal.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let mut best: Option<(usize, f64)> = None;
        for &c in &round {
            let Some(sd) = removal[c] else { continue };
            after_removal.entry(c).or_insert(sd);
            if best.is_none_or(|(_, b)| sd < b) {
                best = Some((c, sd));
            }
        }
        let Some((node, sd)) = best else { break };
        if sd >= current_sd - SD_BAR_EPS || sd > floor {
            break;
        }
        confirmed.push(node);
        current = prune(&current, &[node], params)?;
        if current.layouts.len() < 2 {
            break;
        }
        let refused = fuse(&current, fusion)?;
        errors = per_node_error(&current, &refused);
        current_sd = dispersion(&current);
    }

    candidates.sort_unstable();
    confirmed.sort_unstable();
    Ok(AnomalyReport {
        timestamp: aligned.timestamp,
        per_node_error: first_errors,
        candidates,
        confirmed,
        sd_bar_baseline,
        sd_bar_after_removal: after_removal,
        pruned_layout_count: aligned.layouts.len() - current.layouts.len(),
    })
}
