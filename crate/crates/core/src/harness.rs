//! End-to-end evaluation: simulate, localize with both methods, detect and
//! prune anomalous nodes, and score everything against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anomaly::{detect, prune, AnomalyReport, DetectorParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedEstimate, FusionParams};
use crate::gd::{gd_configurations, gd_optimize, GdParams, GdResult};
use crate::geometry::{best_rigid_align, Point2};
use crate::layouts::{aligned_layouts, AlignedLayoutSet, CommonFrame, RangeTable};
use crate::sim::{generate_ranges, generate_truth, GroundTruthLog, SimScenario};

/// Stated at the top of every report: what one confusion-matrix count means.
pub const DECISION_SEMANTICS: &str =
    "confusion counts are per (timestamp, node) decisions; positive = node flagged anomalous";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Methods {
    Ml,
    Gd,
    Both,
}

impl Methods {
    pub fn ml(self) -> bool {
        matches!(self, Methods::Ml | Methods::Both)
    }

    pub fn gd(self) -> bool {
        matches!(self, Methods::Gd | Methods::Both)
    }
}

/// Estimation parameters shared by every entry point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorParams {
    pub fusion: FusionParams,
    pub detector: DetectorParams,
    pub gd: GdParams,
    /// Defaults to the scenario's static nodes plus the lowest mobile node,
    /// or to nodes (0, 1, 2) when no scenario is involved.
    pub frame: Option<CommonFrame>,
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.detector.validate()?;
        self.gd.validate()?;
        if let Some(f) = &self.frame {
            f.validate()?;
        }
        Ok(())
    }

    pub fn frame_or_default(&self) -> CommonFrame {
        self.frame.unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scenario: SimScenario,
    #[serde(flatten)]
    pub params: EstimatorParams,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.params.validate()?;
        let frame = self.frame();
        if [frame.origin, frame.axis, frame.disambiguator]
            .iter()
            .any(|&k| k >= self.scenario.n_nodes)
        {
            return Err(Error::InvalidParams(format!(
                "frame {frame:?} out of range for {} nodes",
                self.scenario.n_nodes
            )));
        }
        Ok(())
    }

    pub fn frame(&self) -> CommonFrame {
        self.params
            .frame
            .unwrap_or_else(|| self.scenario.default_frame())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn rate(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn tp_rate(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fn_)
    }

    pub fn fn_rate(&self) -> f64 {
        Self::rate(self.fn_, self.tp + self.fn_)
    }

    pub fn fp_rate(&self) -> f64 {
        Self::rate(self.fp, self.fp + self.tn)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// One detector verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub timestamp: usize,
    pub node: usize,
    pub flagged: bool,
}

/// Tallies decisions against the injected anomaly of each timestamp.
/// Every `(timestamp, node)` for `timestamp < truth.len()` and `node < n`
/// must be decided.
pub fn confusion(decisions: &[Decision], truth: &[Option<usize>], n: usize) -> Result<Confusion> {
    let mut seen = vec![false; truth.len() * n];
    let mut c = Confusion::default();
    for d in decisions {
        if d.timestamp >= truth.len() || d.node >= n {
            return Err(Error::TimestampMismatch(format!(
                "decision for node {} at timestamp index {} is outside the evaluated range",
                d.node, d.timestamp
            )));
        }
        seen[d.timestamp * n + d.node] = true;
        let positive = truth[d.timestamp] == Some(d.node);
        match (d.flagged, positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::CoverageGap {
            timestamp: k / n,
            node: k % n,
        });
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Root-mean-square position error per node, in meters.
    pub per_node: Vec<f64>,
    /// Average of `per_node`.
    pub mean: f64,
}

/// Expresses `est` in the frame of the ground truth: the truth is put into
/// `frame` (reflection included) and the estimate is rigidly fitted onto it
/// using the frame's three reference nodes.
pub fn frame_fix(est: &[Option<Point2>], gt: &[Point2], frame: &CommonFrame) -> Result<Vec<Option<Point2>>> {
    let gt_canon = frame.canonicalize_points(gt)?;
    let refs = [frame.origin, frame.axis, frame.disambiguator];
    let mut src = Vec::with_capacity(3);
    let mut dst = Vec::with_capacity(3);
    for &k in &refs {
        if let Some(p) = est.get(k).copied().flatten() {
            src.push(p);
            dst.push(gt_canon[k]);
        }
    }
    let t = best_rigid_align(&src, &dst)?;
    Ok(est.iter().map(|p| p.map(|q| t.apply(q))).collect())
}

/// Per-node RMSE of frame-fixed estimates over all timestamps. Samples where
/// a node has no estimate are skipped; a node never estimated gets NaN.
pub fn trajectory_error(
    est: &[Vec<Option<Point2>>],
    gt: &GroundTruthLog,
    frame: &CommonFrame,
) -> Result<TrajectoryError> {
    if est.len() != gt.len() {
        return Err(Error::TimestampMismatch(format!(
            "{} estimated timestamps vs {} ground-truth timestamps",
            est.len(),
            gt.len()
        )));
    }
    let n = gt.frames.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (k, (e, g)) in est.iter().zip(&gt.frames).enumerate() {
        if e.len() != n || g.len() != n {
            return Err(Error::TimestampMismatch(format!(
                "node count differs at timestamp index {k}"
            )));
        }
        let fixed = frame_fix(e, g, frame).map_err(|err| err.at(gt.timestamp(k)))?;
        let truth = frame.canonicalize_points(g)?;
        for i in 0..n {
            if let Some(p) = fixed[i] {
                sum[i] += p.distance_squared(&truth[i]);
                count[i] += 1;
            }
        }
    }
    let per_node: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { (s / c as f64).sqrt() })
        .collect();
    let mean = per_node.iter().sum::<f64>() / n.max(1) as f64;
    Ok(TrajectoryError { per_node, mean })
}

/// Multilateration estimate for one range table.
pub fn localize_ml(
    ranges: &RangeTable,
    frame: CommonFrame,
    fusion: &FusionParams,
) -> Result<(AlignedLayoutSet, FusedEstimate)> {
    let aligned = aligned_layouts(ranges, frame)?;
    let fused = fuse(&aligned, fusion)?;
    Ok((aligned, fused))
}

/// Gradient-descent estimate initialized from the multilateration fusion.
pub fn localize_gd(
    ranges: &RangeTable,
    frame: CommonFrame,
    params: &EstimatorParams,
) -> Result<GdResult> {
    let (_, fused) = localize_ml(ranges, frame, &params.fusion)?;
    gd_optimize(&fused.positions_or_origin(), ranges, &frame, &params.gd)
}

/// Multilateration-based detection for one range table.
pub fn detect_ml(ranges: &RangeTable, frame: CommonFrame, params: &EstimatorParams) -> Result<AnomalyReport> {
    let (aligned, fused) = localize_ml(ranges, frame, &params.fusion)?;
    detect(&aligned, &fused, &params.fusion, &params.detector)
}

/// Same detector applied to the gradient-descent solutions started from
/// every layout.
pub fn detect_gd(
    ranges: &RangeTable,
    aligned: &AlignedLayoutSet,
    params: &EstimatorParams,
) -> Result<AnomalyReport> {
    let solved = gd_configurations(aligned, ranges, &params.gd)?;
    let fused = fuse(&solved, &params.fusion)?;
    detect(&solved, &fused, &params.fusion, &params.detector)
}

fn without_nodes(ranges: &RangeTable, nodes: &[usize]) -> RangeTable {
    let mut t = ranges.clone();
    for &k in nodes {
        t.invalidate_node(k);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub semantics: String,
    pub seed: u64,
    pub n_nodes: usize,
    pub timestamps: usize,
    pub anomaly_node: Option<usize>,
    pub frame: CommonFrame,
    /// Trajectory error per estimation variant.
    pub per_node_rmse: BTreeMap<String, TrajectoryError>,
    /// Mean per-node RMSE over nodes other than the injected anomaly.
    pub normal_node_rmse: BTreeMap<String, f64>,
    pub confusion: BTreeMap<String, Confusion>,
    /// Confirmed nodes per timestamp, per detector.
    pub confirmed: BTreeMap<String, Vec<Vec<usize>>>,
    /// Wall-clock milliseconds per stage. Kept out of the serialized report
    /// so reruns stay byte-identical.
    #[serde(skip)]
    pub runtime: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn decisions(&self, method: &str) -> Vec<Decision> {
        let Some(rows) = self.confirmed.get(method) else {
            return Vec::new();
        };
        rows.iter()
            .enumerate()
            .flat_map(|(t, flagged)| {
                (0..self.n_nodes).map(move |node| Decision {
                    timestamp: t,
                    node,
                    flagged: flagged.contains(&node),
                })
            })
            .collect()
    }

    pub fn rmse_csv(&self) -> String {
        let mut out = String::from("variant,node,rmse_m\n");
        for (variant, err) in &self.per_node_rmse {
            for (i, r) in err.per_node.iter().enumerate() {
                let _ = writeln!(out, "{variant},{i},{r}");
            }
            let _ = writeln!(out, "{variant},mean,{}", err.mean);
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("method,tp,fp,fn,tn\n");
        for (m, c) in &self.confusion {
            let _ = writeln!(out, "{m},{},{},{},{}", c.tp, c.fp, c.fn_, c.tn);
        }
        out
    }

    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("method,timestamp_index,node,flagged\n");
        for method in self.confirmed.keys() {
            for d in self.decisions(method) {
                let _ = writeln!(out, "{method},{},{},{}", d.timestamp, d.node, u8::from(d.flagged));
            }
        }
        out
    }

    pub fn runtime_text(&self) -> String {
        let mut out = String::new();
        for (stage, ms) in &self.runtime {
            let _ = writeln!(out, "{stage}\t{ms:.3} ms");
        }
        out
    }
}

#[derive(Default)]
struct Stopwatch {
    stages: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.stages.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64() * 1e3;
        out
    }
}

type Track = Vec<Vec<Option<Point2>>>;

#[derive(Default)]
struct Tracks {
    ml: Track,
    ml_pruned: Track,
    gd: Track,
    gd_pruned: Track,
    ml_pruned_gd: Track,
    ml_confirmed: Vec<Vec<usize>>,
    gd_confirmed: Vec<Vec<usize>>,
}

fn some_all(p: &[Point2]) -> Vec<Option<Point2>> {
    p.iter().copied().map(Some).collect()
}

/// Runs every per-timestamp stage over `tables`. Stage names are prefixed
/// with `prefix` in the runtime map.
fn run_tables(
    tables: &[RangeTable],
    frame: CommonFrame,
    params: &EstimatorParams,
    methods: Methods,
    with_detection: bool,
    prefix: &str,
    watch: &mut Stopwatch,
) -> Result<Tracks> {
    let mut tracks = Tracks::default();
    let stage = |s: &str| format!("{prefix}{s}");
    for table in tables {
        let ts = table.timestamp();
        let ctx = |e: Error| e.at(ts);
        let (aligned, fused) = watch
            .time(&stage("ml_localize"), || localize_ml(table, frame, &params.fusion))
            .map_err(ctx)?;

        if methods.ml() {
            tracks.ml.push(fused.positions.clone());
            if with_detection {
                let report = watch
                    .time(&stage("ml_detect"), || {
                        detect(&aligned, &fused, &params.fusion, &params.detector)
                    })
                    .map_err(ctx)?;
                let pruned = watch
                    .time(&stage("ml_prune_refuse"), || {
                        let set = prune(&aligned, &report.confirmed, &params.detector)?;
                        fuse(&set, &params.fusion)
                    })
                    .map_err(ctx)?;
                if methods.gd() {
                    let init: Vec<Point2> = pruned.positions_or_origin();
                    let reduced = without_nodes(table, &report.confirmed);
                    let refined = watch
                        .time(&stage("ml_pruned_gd"), || {
                            gd_optimize(&init, &reduced, &frame, &params.gd)
                        })
                        .map_err(ctx)?;
                    let mut pos = some_all(&refined.positions);
                    // A confirmed node has no ranges left; keep its
                    // multilateration estimate.
                    for &k in &report.confirmed {
                        pos[k] = carry_point(&pruned.positions, &refined.positions, k);
                    }
                    tracks.ml_pruned_gd.push(pos);
                }
                tracks.ml_pruned.push(pruned.positions);
                tracks.ml_confirmed.push(report.confirmed);
            }
        }

        if methods.gd() {
            let init = fused.positions_or_origin();
            let result = watch
                .time(&stage("gd_optimize"), || gd_optimize(&init, table, &frame, &params.gd))
                .map_err(ctx)?;
            if with_detection {
                let report = watch
                    .time(&stage("gd_detect"), || detect_gd(table, &aligned, params))
                    .map_err(ctx)?;
                let reduced = without_nodes(table, &report.confirmed);
                let pruned = watch
                    .time(&stage("gd_prune_optimize"), || {
                        gd_optimize(&result.positions, &reduced, &frame, &params.gd)
                    })
                    .map_err(ctx)?;
                tracks.gd_pruned.push(some_all(&pruned.positions));
                tracks.gd_confirmed.push(report.confirmed);
            }
            tracks.gd.push(some_all(&result.positions));
        }
    }
    Ok(tracks)
}

/// Position of node `k` from `source`, carried into the frame of `target` by
/// a rigid fit over the nodes both place.
fn carry_point(source: &[Option<Point2>], target: &[Point2], k: usize) -> Option<Point2> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, (p, q)) in source.iter().zip(target).enumerate() {
        if i != k {
            if let Some(p) = p {
                src.push(*p);
                dst.push(*q);
            }
        }
    }
    let t = best_rigid_align(&src, &dst).ok()?;
    source[k].map(|p| t.apply(p))
}

/// Full simulate → localize → detect → evaluate run.
pub fn run_pipeline(config: &PipelineConfig, methods: Methods) -> Result<EvalReport> {
    config.validate()?;
    let wall = Instant::now();
    let mut watch = Stopwatch::default();
    let scenario = &config.scenario;
    let frame = config.frame();
    let params = &config.params;
    let n = scenario.n_nodes;

    let (truth, tables) = watch.time("simulate", || -> Result<_> {
        let truth = generate_truth(scenario)?;
        let tables = generate_ranges(&truth, scenario)?;
        Ok((truth, tables))
    })?;
    let tracks = run_tables(&tables, frame, params, methods, true, "", &mut watch)?;

    let nominal = match scenario.anomaly {
        Some(_) => {
            let clean = SimScenario {
                anomaly: None,
                ..scenario.clone()
            };
            let tables = watch.time("nominal_simulate", || generate_ranges(&truth, &clean))?;
            Some(run_tables(&tables, frame, params, methods, false, "nominal_", &mut watch)?)
        }
        None => None,
    };

    let anomaly_node = scenario.anomaly_node();
    let report = watch.time("evaluate", || -> Result<EvalReport> {
        let mut per_node_rmse = BTreeMap::new();
        let mut add = |name: &str, track: &Track| -> Result<()> {
            if !track.is_empty() {
                per_node_rmse.insert(name.to_string(), trajectory_error(track, &truth, &frame)?);
            }
            Ok(())
        };
        add("ml", &tracks.ml)?;
        add("ml_pruned", &tracks.ml_pruned)?;
        add("ml_pruned_gd", &tracks.ml_pruned_gd)?;
        add("gd", &tracks.gd)?;
        add("gd_pruned", &tracks.gd_pruned)?;
        if let Some(nom) = &nominal {
            add("ml_nominal", &nom.ml)?;
            add("gd_nominal", &nom.gd)?;
        }

        let normal_node_rmse = per_node_rmse
            .iter()
            .map(|(k, e)| {
                let normal: Vec<f64> = e
                    .per_node
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != anomaly_node)
                    .map(|(_, r)| *r)
                    .collect();
                (k.clone(), normal.iter().sum::<f64>() / normal.len().max(1) as f64)
            })
            .collect();

        let truth_labels = vec![anomaly_node; tables.len()];
        let mut confirmed = BTreeMap::new();
        if methods.ml() {
            confirmed.insert("ml".to_string(), tracks.ml_confirmed.clone());
        }
        if methods.gd() {
            confirmed.insert("gd".to_string(), tracks.gd_confirmed.clone());
        }
        let mut report = EvalReport {
            semantics: DECISION_SEMANTICS.to_string(),
            seed: scenario.seed,
            n_nodes: n,
            timestamps: tables.len(),
            anomaly_node,
            frame,
            per_node_rmse,
            normal_node_rmse,
            confusion: BTreeMap::new(),
            confirmed,
            runtime: BTreeMap::new(),
        };
        for method in report.confirmed.keys().cloned().collect::<Vec<_>>() {
            let c = confusion(&report.decisions(&method), &truth_labels, n)?;
            report.confusion.insert(method, c);
        }
        Ok(report)
    })?;

    let mut report = report;
    report.runtime = watch.stages;
    report
        .runtime
        .insert("total_wall".to_string(), wall.elapsed().as_secs_f64() * 1e3);
    Ok(report)
}
