//! Seeded scenario generator: static reference nodes, random-waypoint mobile
//! nodes, Gaussian ranging noise, positive NLOS bias behind a virtual wall,
//! and a byzantine node whose every range is offset.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tof_distance, Point2, TimingPair, SPEED_OF_LIGHT};
use crate::layouts::{CommonFrame, RangeTable};

/// Maximum speed of mobile nodes (m/s).
pub const V_MAX: f64 = 0.3;

/// Minimum distance kept between any two nodes (m).
pub const MIN_SEPARATION: f64 = 0.3;

/// Distance kept from the arena boundary when sampling positions (m).
const MARGIN: f64 = 0.5;

/// Reported responder turnaround used by the timing-error forward model (s).
const RESPONDER_DELAY: f64 = 100e-9;

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Stream id reserved for trajectory generation; range tables use
/// `timestamp index + 1`.
const TRUTH_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arena {
    pub width: f64,
    pub length: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Arena {
            width: 8.0,
            length: 9.0,
        }
    }
}

impl Arena {
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.length
    }

    /// Axis-aligned wall blocking line of sight: `(x0, y0, x1, y1)`.
    pub fn occluder(&self) -> (f64, f64, f64, f64) {
        (
            0.25 * self.width,
            0.55 * self.length,
            0.75 * self.width,
            0.6 * self.length,
        )
    }

    /// Sampling region for NLOS-routed nodes, on the far side of the wall.
    fn behind_wall(&self) -> (f64, f64, f64, f64) {
        let (_, _, _, wall_top) = self.occluder();
        (
            MARGIN,
            wall_top + MIN_SEPARATION,
            self.width - MARGIN,
            self.length - MARGIN,
        )
    }

    fn interior(&self) -> (f64, f64, f64, f64) {
        (MARGIN, MARGIN, self.width - MARGIN, self.length - MARGIN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlosConfig {
    /// Nodes routed behind the wall; their links crossing it are biased.
    pub nodes: Vec<usize>,
    /// Pairs biased regardless of geometry.
    pub pairs: Vec<(usize, usize)>,
    pub bias_mean: f64,
    pub bias_sigma: f64,
    /// Chance that an affected link is biased at a given timestamp.
    pub probability: f64,
}

impl Default for NlosConfig {
    fn default() -> Self {
        NlosConfig {
            nodes: vec![4],
            pairs: Vec::new(),
            bias_mean: 0.25,
            bias_sigma: 0.1,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyMode {
    ConstantBias,
    TimingError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyConfig {
    pub node: usize,
    /// Range offset in meters added to every link of `node`.
    pub bias: f64,
    pub mode: AnomalyMode,
}

impl AnomalyConfig {
    /// Responder timing error producing this range offset.
    pub fn timing_offset(&self, c: f64) -> f64 {
        2.0 * self.bias / c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimScenario {
    pub n_nodes: usize,
    pub static_nodes: Vec<usize>,
    pub arena: Arena,
    /// Number of timestamps.
    pub duration: usize,
    pub dt: f64,
    pub noise_sigma: f64,
    pub nlos: Option<NlosConfig>,
    pub anomaly: Option<AnomalyConfig>,
    pub speed_of_light: f64,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            n_nodes: 8,
            static_nodes: vec![0, 1],
            arena: Arena::default(),
            duration: 100,
            dt: 0.5,
            noise_sigma: 0.05,
            nlos: Some(NlosConfig::default()),
            anomaly: None,
            speed_of_light: SPEED_OF_LIGHT,
            seed: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        let n = self.n_nodes;
        if n < 3 {
            return bad(format!("n_nodes must be at least 3, got {n}"));
        }
        if self.static_nodes.len() < 2 {
            return bad("at least two static nodes are required".into());
        }
        let mut seen = self.static_nodes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.static_nodes.len() || seen.iter().any(|&s| s >= n) {
            return bad(format!("invalid static_nodes {:?}", self.static_nodes));
        }
        if seen.len() >= n {
            return bad("at least one node must be mobile".into());
        }
        if !(self.arena.width > 2.0 * MARGIN && self.arena.length > 2.0 * MARGIN) {
            return bad(format!("arena too small: {:?}", self.arena));
        }
        if self.duration < 1 {
            return bad("duration must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if !(self.speed_of_light > 0.0 && self.speed_of_light.is_finite()) {
            return bad(format!("invalid speed_of_light {}", self.speed_of_light));
        }
        if let Some(nlos) = &self.nlos {
            if nlos.nodes.iter().any(|&k| k >= n)
                || nlos.pairs.iter().any(|&(i, j)| i >= n || j >= n || i == j)
            {
                return bad("nlos node index out of range".into());
            }
            if nlos.nodes.iter().any(|k| self.static_nodes.contains(k)) {
                return bad("static nodes cannot be routed behind the wall".into());
            }
            if !(0.0..=1.0).contains(&nlos.probability)
                || !(nlos.bias_sigma >= 0.0)
                || !nlos.bias_mean.is_finite()
            {
                return bad("invalid nlos bias parameters".into());
            }
        }
        if let Some(a) = &self.anomaly {
            if a.node >= n {
                return bad(format!("anomaly node {} out of range", a.node));
            }
            if !(a.bias.is_finite() && a.bias >= 0.0) {
                return bad(format!("anomaly bias must be nonnegative, got {}", a.bias));
            }
        }
        Ok(())
    }

    pub fn is_static(&self, node: usize) -> bool {
        self.static_nodes.contains(&node)
    }

    /// Frame pinned by the first two static nodes, with the lowest-index
    /// mobile node fixing chirality.
    pub fn default_frame(&self) -> CommonFrame {
        let mobile = (0..self.n_nodes)
            .find(|k| !self.is_static(*k))
            .unwrap_or(self.n_nodes);
        CommonFrame {
            origin: self.static_nodes[0],
            axis: self.static_nodes[1],
            disambiguator: mobile,
        }
    }

    pub fn anomaly_node(&self) -> Option<usize> {
        self.anomaly.map(|a| a.node)
    }

    fn is_nlos_routed(&self, node: usize) -> bool {
        self.nlos.as_ref().is_some_and(|c| c.nodes.contains(&node))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Ground-truth positions per timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLog {
    pub dt: f64,
    /// `frames[k][i]` is node `i` at time `k · dt`.
    pub frames: Vec<Vec<Point2>>,
}

impl GroundTruthLog {
    pub fn timestamp(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn sample_in(rng: &mut ChaCha8Rng, region: (f64, f64, f64, f64)) -> Point2 {
    Point2::new(rng.random_range(region.0..=region.2), rng.random_range(region.1..=region.3))
}

fn clear_of(p: &Point2, others: &[Point2]) -> bool {
    others.iter().all(|q| p.distance(q) >= MIN_SEPARATION)
}

/// Static nodes sit on the arena corners; mobile nodes move
/// between uniformly drawn waypoints at [`V_MAX`].
pub fn generate_truth(scenario: &SimScenario) -> Result<GroundTruthLog> {
    scenario.validate()?;
    let n = scenario.n_nodes;
    let arena = scenario.arena;
    let mut rng = scenario.rng(TRUTH_STREAM);
    // Wall-mounted at the arena corners, so the line through the first two
    // stays at least MARGIN away from every mobile node.
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(arena.width, 0.0),
        Point2::new(arena.width, arena.length),
        Point2::new(0.0, arena.length),
    ];
    let region_of = |k: usize| {
        if scenario.is_nlos_routed(k) {
            arena.behind_wall()
        } else {
            arena.interior()
        }
    };

    let mut pos: Vec<Point2> = Vec::with_capacity(n);
    let mut corner = 0;
    for k in 0..n {
        let placed = if scenario.is_static(k) && corner < corners.len() {
            corner += 1;
            Some(corners[corner - 1]).filter(|p| arena.contains(p) && clear_of(p, &pos))
        } else {
            None
        };
        let p = match placed {
            Some(p) => p,
            None => (0..PLACEMENT_ATTEMPTS)
                .map(|_| sample_in(&mut rng, region_of(k)))
                .find(|p| clear_of(p, &pos))
                .ok_or(Error::ArenaTooSmall(n))?,
        };
        pos.push(p);
    }

    let mut waypoints: Vec<Point2> = (0..n).map(|k| sample_in(&mut rng, region_of(k))).collect();
    let reach = V_MAX * scenario.dt;
    let mut frames = Vec::with_capacity(scenario.duration);
    frames.push(pos.clone());
    for _ in 1..scenario.duration {
        for k in 0..n {
            if scenario.is_static(k) {
                continue;
            }
            let to = waypoints[k] - pos[k];
            let dist = to.norm();
            let (next, arrived) = if dist <= reach {
                (waypoints[k], true)
            } else {
                (pos[k] + to.scale(reach / dist), false)
            };
            let others: Vec<Point2> = pos
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, p)| *p)
                .collect();
            if clear_of(&next, &others) {
                pos[k] = next;
                if arrived {
                    waypoints[k] = sample_in(&mut rng, region_of(k));
                }
            } else {
                waypoints[k] = sample_in(&mut rng, region_of(k));
            }
        }
        frames.push(pos.clone());
    }
    Ok(GroundTruthLog {
        dt: scenario.dt,
        frames,
    })
}

/// Whether segment `a`–`b` passes through the axis-aligned box.
fn segment_hits_box(a: Point2, b: Point2, bx: (f64, f64, f64, f64)) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = b - a;
    for (p, q) in [
        (-d.x, a.x - bx.0),
        (d.x, bx.2 - a.x),
        (-d.y, a.y - bx.1),
        (d.y, bx.3 - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Forward ranging model for every timestamp of `truth`.
///
/// Each link gets `N(0, noise_sigma²)` noise; NLOS-affected links add
/// `|N(bias_mean, bias_sigma²)|`; every link touching the anomalous node is
/// offset by the configured bias, either directly or through a responder
/// timing error pushed through the two-way-ranging conversion.
pub fn generate_ranges(truth: &GroundTruthLog, scenario: &SimScenario) -> Result<Vec<RangeTable>> {
    scenario.validate()?;
    let n = scenario.n_nodes;
    let c = scenario.speed_of_light;
    let wall = scenario.arena.occluder();
    truth
        .frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            if frame.len() != n {
                return Err(Error::LengthMismatch {
                    left: frame.len(),
                    right: n,
                });
            }
            let mut rng = scenario.rng(k as u64 + 1);
            let mut table = RangeTable::new(n, truth.timestamp(k));
            for i in 0..n {
                for j in (i + 1)..n {
                    let z: f64 = rng.sample(StandardNormal);
                    let u: f64 = rng.random();
                    let zb: f64 = rng.sample(StandardNormal);
                    let mut r = frame[i].distance(&frame[j]) + scenario.noise_sigma * z;
                    if let Some(nlos) = &scenario.nlos {
                        let listed = nlos.pairs.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j));
                        let routed = (nlos.nodes.contains(&i) || nlos.nodes.contains(&j))
                            && segment_hits_box(frame[i], frame[j], wall);
                        if (listed || routed) && u < nlos.probability {
                            r += (nlos.bias_mean + nlos.bias_sigma * zb).abs();
                        }
                    }
                    if let Some(a) = scenario.anomaly.filter(|a| a.node == i || a.node == j) {
                        r = match a.mode {
                            AnomalyMode::ConstantBias => r + a.bias,
                            AnomalyMode::TimingError => {
                                let net = 2.0 * r.max(0.0) / c + a.timing_offset(c);
                                let timing = TimingPair::new(RESPONDER_DELAY + net, RESPONDER_DELAY)?;
                                tof_distance(timing, c)?
                            }
                        };
                    }
                    table.set(i, j, r.max(0.0))?;
                }
            }
            Ok(table)
        })
        .collect()
}

pub const TRUTH_CSV_HEADER: &str = "timestamp_s,node,x_m,y_m";

pub fn write_truth_csv(truth: &GroundTruthLog) -> String {
    let mut out = String::from(TRUTH_CSV_HEADER);
    out.push('\n');
    for (k, frame) in truth.frames.iter().enumerate() {
        for (i, p) in frame.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", truth.timestamp(k), i, p.x, p.y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SimScenario {
        SimScenario {
            noise_sigma: 0.0,
            nlos: None,
            seed,
            ..SimScenario::default()
        }
    }

    #[test]
    fn single_frame_inside_arena() {
        let s = SimScenario {
            duration: 1,
            ..SimScenario::default()
        };
        let truth = generate_truth(&s).unwrap();
        assert_eq!(truth.len(), 1);
        assert!(truth.frames[0].iter().all(|p| s.arena.contains(p)));
    }

    #[test]
    fn same_seed_same_output() {
        let s = SimScenario {
            seed: 42,
            ..SimScenario::default()
        };
        let a = generate_truth(&s).unwrap();
        let b = generate_truth(&s).unwrap();
        assert_eq!(a, b);
        let ra = crate::layouts::write_csv(&generate_ranges(&a, &s).unwrap());
        let rb = crate::layouts::write_csv(&generate_ranges(&b, &s).unwrap());
        assert_eq!(ra, rb);
        let other = generate_truth(&SimScenario { seed: 43, ..s }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn motion_respects_speed_and_separation() {
        let s = SimScenario {
            duration: 1000,
            seed: 9,
            ..SimScenario::default()
        };
        let truth = generate_truth(&s).unwrap();
        for w in truth.frames.windows(2) {
            for (k, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
                let step = a.distance(b);
                assert!(step <= V_MAX * s.dt + 1e-12);
                if s.is_static(k) {
                    assert_eq!(step, 0.0);
                }
            }
        }
        for frame in &truth.frames {
            assert!(frame.iter().all(|p| s.arena.contains(p)));
            for i in 0..8 {
                for j in (i + 1)..8 {
                    assert!(frame[i].distance(&frame[j]) >= MIN_SEPARATION - 1e-12);
                }
            }
        }
    }

    #[test]
    fn nlos_node_stays_behind_the_wall() {
        let s = SimScenario {
            duration: 400,
            seed: 2,
            ..SimScenario::default()
        };
        let truth = generate_truth(&s).unwrap();
        let (_, _, _, wall_top) = s.arena.occluder();
        assert!(truth.frames.iter().all(|f| f[4].y > wall_top));
    }

    #[test]
    fn crowded_arena_is_rejected() {
        let s = SimScenario {
            n_nodes: 400,
            static_nodes: vec![0, 1],
            arena: Arena {
                width: 1.5,
                length: 1.5,
            },
            nlos: None,
            ..SimScenario::default()
        };
        assert!(matches!(generate_truth(&s), Err(Error::ArenaTooSmall(400))));
    }

    #[test]
    fn noiseless_ranges_are_exact() {
        let s = quiet(3);
        let truth = generate_truth(&s).unwrap();
        let tables = generate_ranges(&truth, &s).unwrap();
        for (frame, table) in truth.frames.iter().zip(&tables) {
            for (i, j, r) in table.pairs() {
                assert_eq!(r, frame[i].distance(&frame[j]));
            }
        }
    }

    #[test]
    fn anomaly_offsets_every_link() {
        let mut s = quiet(4);
        s.anomaly = Some(AnomalyConfig {
            node: 5,
            bias: 1.5,
            mode: AnomalyMode::ConstantBias,
        });
        let truth = generate_truth(&s).unwrap();
        let tables = generate_ranges(&truth, &s).unwrap();
        for (frame, table) in truth.frames.iter().zip(&tables) {
            for j in 0..8 {
                if j != 5 {
                    let excess = table.get(5, j).unwrap() - frame[5].distance(&frame[j]);
                    assert!((excess - 1.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn timing_error_matches_constant_bias() {
        let a = AnomalyConfig {
            node: 3,
            bias: 1.5,
            mode: AnomalyMode::TimingError,
        };
        let dt = a.timing_offset(SPEED_OF_LIGHT);
        assert!((dt - 10.007e-9).abs() < 1e-12, "{dt}");
        let mut timing = quiet(5);
        timing.anomaly = Some(a);
        let mut constant = timing.clone();
        constant.anomaly = Some(AnomalyConfig {
            mode: AnomalyMode::ConstantBias,
            ..a
        });
        let truth = generate_truth(&timing).unwrap();
        let ta = generate_ranges(&truth, &timing).unwrap();
        let tb = generate_ranges(&truth, &constant).unwrap();
        for (x, y) in ta.iter().zip(&tb) {
            for ((_, _, r1), (_, _, r2)) in x.pairs().zip(y.pairs()) {
                assert!((r1 - r2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_calibrated() {
        let s = SimScenario {
            noise_sigma: 0.1,
            nlos: None,
            duration: 400,
            seed: 6,
            ..SimScenario::default()
        };
        let truth = generate_truth(&s).unwrap();
        let tables = generate_ranges(&truth, &s).unwrap();
        let errs: Vec<f64> = truth
            .frames
            .iter()
            .zip(&tables)
            .flat_map(|(f, t)| t.pairs().map(move |(i, j, r)| r - f[i].distance(&f[j])).collect::<Vec<_>>())
            .collect();
        assert!(errs.len() >= 10_000);
        let m = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / m;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "{sd}");
    }

    #[test]
    fn nlos_bias_is_nonnegative() {
        let base = SimScenario {
            duration: 200,
            seed: 7,
            ..SimScenario::default()
        };
        let clean = SimScenario {
            nlos: None,
            ..base.clone()
        };
        let truth = generate_truth(&base).unwrap();
        let with = generate_ranges(&truth, &base).unwrap();
        let without = generate_ranges(&truth, &clean).unwrap();
        let mut affected = 0;
        for (a, b) in with.iter().zip(&without) {
            for ((_, _, r1), (_, _, r2)) in a.pairs().zip(b.pairs()) {
                assert!(r1 >= r2);
                if r1 > r2 {
                    affected += 1;
                }
            }
        }
        assert!(affected > 0);
    }

    #[test]
    fn segment_box_intersection() {
        let bx = (1.0, 1.0, 2.0, 2.0);
        assert!(segment_hits_box(Point2::new(0.0, 1.5), Point2::new(3.0, 1.5), bx));
        assert!(!segment_hits_box(Point2::new(0.0, 0.0), Point2::new(3.0, 0.5), bx));
        assert!(!segment_hits_box(Point2::new(0.0, 0.0), Point2::new(0.5, 3.0), bx));
    }

    #[test]
    fn scenario_json_rejects_unknown_keys() {
        let ok: SimScenario = serde_json::from_str(r#"{"n_nodes": 6, "seed": 3}"#).unwrap();
        assert_eq!(ok.n_nodes, 6);
        assert_eq!(ok.arena, Arena::default());
        assert!(serde_json::from_str::<SimScenario>(r#"{"n_nodes": 6, "bogus": 1}"#).is_err());
        let a: SimScenario = serde_json::from_str(
            r#"{"anomaly": {"node": 3, "bias": 1.5, "mode": "timing-error"}}"#,
        )
        .unwrap();
        assert_eq!(a.anomaly.unwrap().mode, AnomalyMode::TimingError);
    }

    #[test]
    fn invalid_scenarios() {
        let d = SimScenario::default();
        assert!(SimScenario { n_nodes: 2, ..d.clone() }.validate().is_err());
        assert!(SimScenario { static_nodes: vec![0, 0], ..d.clone() }.validate().is_err());
        assert!(SimScenario { dt: 0.0, ..d.clone() }.validate().is_err());
        assert!(SimScenario { noise_sigma: -1.0, ..d.clone() }.validate().is_err());
        let mut bad = d.clone();
        bad.anomaly = Some(AnomalyConfig { node: 8, bias: 1.0, mode: AnomalyMode::ConstantBias });
        assert!(bad.validate().is_err());
        assert_eq!(d.default_frame(), CommonFrame { origin: 0, axis: 1, disambiguator: 2 });
    }
}
