use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Symmetric matrix of pairwise range measurements taken at one timestamp.
///
/// Entries are either valid (finite, nonnegative) or missing. The diagonal is
/// always zero and valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    n: usize,
    timestamp: f64,
    d: Vec<f64>,
    valid: Vec<bool>,
}

impl RangeTable {
    /// An `n`-node table with every off-diagonal entry missing.
    pub fn new(n: usize, timestamp: f64) -> Self {
        let mut valid = vec![false; n * n];
        for i in 0..n {
            valid[i * n + i] = true;
        }
        RangeTable {
            n,
            timestamp,
            d: vec![0.0; n * n],
            valid,
        }
    }

    /// Exact ranges between the given points.
    pub fn from_positions(timestamp: f64, positions: &[Point2]) -> Self {
        let n = positions.len();
        let mut t = RangeTable::new(n, timestamp);
        for i in 0..n {
            for j in (i + 1)..n {
                t.put(i, j, positions[i].distance(&positions[j]));
            }
        }
        t
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        for index in [i, j] {
            if index >= self.n {
                return Err(Error::NodeOutOfRange { index, n: self.n });
            }
        }
        Ok(())
    }

    fn put(&mut self, i: usize, j: usize, r: f64) {
        let n = self.n;
        self.d[i * n + j] = r;
        self.d[j * n + i] = r;
        self.valid[i * n + j] = true;
        self.valid[j * n + i] = true;
    }

    /// Records a symmetric measurement.
    pub fn set(&mut self, i: usize, j: usize, range: f64) -> Result<()> {
        self.check(i, j)?;
        if !(range.is_finite() && range >= 0.0) || (i == j && range != 0.0) {
            return Err(Error::InvalidRange { i, j, value: range });
        }
        if i != j {
            self.put(i, j, range);
        }
        Ok(())
    }

    /// Marks the pair as missing.
    pub fn invalidate(&mut self, i: usize, j: usize) {
        if i < self.n && j < self.n && i != j {
            let n = self.n;
            self.valid[i * n + j] = false;
            self.valid[j * n + i] = false;
            self.d[i * n + j] = 0.0;
            self.d[j * n + i] = 0.0;
        }
    }

    /// Marks every pair touching `node` as missing.
    pub fn invalidate_node(&mut self, node: usize) {
        for j in 0..self.n {
            self.invalidate(node, j);
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.n || j >= self.n || !self.valid[i * self.n + j] {
            None
        } else {
            Some(self.d[i * self.n + j])
        }
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_some()
    }

    /// Valid unordered pairs `(i, j, range)` with `i < j`, in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            ((i + 1)..self.n).filter_map(move |j| self.get(i, j).map(|r| (i, j, r)))
        })
    }

    pub fn valid_pair_count(&self) -> usize {
        self.pairs().count()
    }
}

/// Header line written by [`write_csv`].
pub const RANGES_CSV_HEADER: &str = "timestamp_s,node_i,node_j,range_m";

/// Parses `timestamp_s,node_i,node_j,range_m` rows into one table per
/// timestamp, ordered by time.
///
/// A single header row and blank lines are skipped. A pair may be listed once
/// or in both directions; when both directions are present the two values are
/// averaged. Every table gets the same node count, one past the largest index
/// seen anywhere in the input.
pub fn read_csv(text: &str) -> Result<Vec<RangeTable>> {
    struct Row {
        t: f64,
        i: usize,
        j: usize,
        r: f64,
    }
    let mut rows = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        if rows.is_empty() && fields[0].parse::<f64>().is_err() {
            // header
            continue;
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("timestamp: {e}")))?;
        let i: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(format!("node_i: {e}")))?;
        let j: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("node_j: {e}")))?;
        let r: f64 = fields[3]
            .parse()
            .map_err(|e| parse_err(format!("range: {e}")))?;
        if !t.is_finite() {
            return Err(parse_err("non-finite timestamp".into()));
        }
        if !(r.is_finite() && r >= 0.0) {
            return Err(parse_err(format!("invalid range {r}")));
        }
        if i == j {
            return Err(parse_err(format!("self-range for node {i}")));
        }
        n = n.max(i + 1).max(j + 1);
        rows.push(Row { t, i, j, r });
    }

    // Keyed on the bit pattern so equal timestamps group exactly.
    let mut groups: BTreeMap<u64, (f64, BTreeMap<(usize, usize), (f64, u32)>)> = BTreeMap::new();
    for row in rows {
        let entry = groups
            .entry(order_key(row.t))
            .or_insert_with(|| (row.t, BTreeMap::new()));
        let key = (row.i.min(row.j), row.i.max(row.j));
        let acc = entry.1.entry(key).or_insert((0.0, 0));
        acc.0 += row.r;
        acc.1 += 1;
    }
    Ok(groups
        .into_values()
        .map(|(t, pairs)| {
            let mut table = RangeTable::new(n, t);
            for ((i, j), (sum, count)) in pairs {
                table.put(i, j, sum / f64::from(count));
            }
            table
        })
        .collect())
}

/// Total order on finite f64 that matches numeric order.
fn order_key(t: f64) -> u64 {
    let bits = t.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Writes tables in the format read by [`read_csv`], one row per valid pair
/// with `i < j`. Numbers use the shortest representation that round-trips.
pub fn write_csv(tables: &[RangeTable]) -> String {
    let mut out = String::new();
    out.push_str(RANGES_CSV_HEADER);
    out.push('\n');
    for table in tables {
        for (i, j, r) in table.pairs() {
            let _ = writeln!(out, "{},{},{},{}", table.timestamp, i, j, r);
        }
    }
    out
}
