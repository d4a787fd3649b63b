//! CVRP instances: random generation, CVRPLIB ingestion, the binary
//! instance-set format, tour lengths and solution validation.
//!
//! Node 0 is always the depot. Coordinates used by the model live in the
//! unit square; CVRPLIB instances additionally keep their raw coordinates
//! so reported lengths follow the library's rounded-integer convention.

use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance set format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Capacity used for the standard generated problem sizes.
pub fn default_capacity(n: usize) -> Option<f64> {
    match n {
        20 => Some(30.0),
        50 => Some(40.0),
        100 => Some(50.0),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VrpInstance {
    pub name: Option<String>,
    coords: Vec<[f64; 2]>,
    demands: Vec<f64>,
    capacity: f64,
    dist: Vec<f64>,
    raw_coords: Option<Vec<[f64; 2]>>,
    known_optimum: Option<f64>,
}

impl VrpInstance {
    /// Builds an instance; `coords[0]` / `demands[0]` describe the depot.
    pub fn new(coords: Vec<[f64; 2]>, demands: Vec<f64>, capacity: f64) -> Result<Self, InstanceError> {
        if coords.len() < 2 {
            return Err(InstanceError::Argument("an instance needs a depot and at least one customer".into()));
        }
        if coords.len() != demands.len() {
            return Err(InstanceError::Argument(format!(
                "{} coordinates but {} demands",
                coords.len(),
                demands.len()
            )));
        }
        if !(capacity > 0.0 && capacity.is_finite()) {
            return Err(InstanceError::Argument(format!("capacity must be positive, got {capacity}")));
        }
        if demands[0] != 0.0 {
            return Err(InstanceError::Argument(format!("depot demand must be 0, got {}", demands[0])));
        }
        if let Some((i, q)) = demands.iter().enumerate().skip(1).find(|(_, &q)| !(0.0..capacity).contains(&q)) {
            return Err(InstanceError::Argument(format!("customer {i} demand {q} outside [0, {capacity})")));
        }
        let nn = coords.len();
        let mut dist = vec![0.0; nn * nn];
        for i in 0..nn {
            for j in i + 1..nn {
                let d = euclid(coords[i], coords[j]);
                dist[i * nn + j] = d;
                dist[j * nn + i] = d;
            }
        }
        Ok(VrpInstance { name: None, coords, demands, capacity, dist, raw_coords: None, known_optimum: None })
    }

    /// Uniform coordinates in the unit square and integer demands in 1..=9,
    /// using the standard capacity for `n`.
    pub fn generate_random(n: usize, seed: u64) -> Result<Self, InstanceError> {
        let capacity = default_capacity(n).ok_or_else(|| {
            InstanceError::Argument(format!("no default capacity for n={n}; supply one explicitly"))
        })?;
        Self::generate_random_with_capacity(n, capacity, seed)
    }

    pub fn generate_random_with_capacity(n: usize, capacity: f64, seed: u64) -> Result<Self, InstanceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(n, capacity, &mut rng)
    }

    /// Draws one instance from `rng`. Coordinates are rounded to `f32` so
    /// instance-set files reproduce them exactly.
    pub fn random_with<R: Rng>(n: usize, capacity: f64, rng: &mut R) -> Result<Self, InstanceError> {
        if n < 1 {
            return Err(InstanceError::Argument("customer count must be at least 1".into()));
        }
        if capacity <= 9.0 {
            return Err(InstanceError::Argument(format!(
                "capacity {capacity} cannot serve demands up to 9"
            )));
        }
        let mut coords = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let x: f32 = rng.gen();
            let y: f32 = rng.gen();
            coords.push([x as f64, y as f64]);
        }
        let mut demands = vec![0.0];
        demands.extend((0..n).map(|_| rng.gen_range(1..=9) as f64));
        Self::new(coords, demands, capacity)
    }

    pub fn n_customers(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.coords.len() + j]
    }

    pub fn dist_matrix(&self) -> &[f64] {
        &self.dist
    }

    pub fn raw_coords(&self) -> Option<&[[f64; 2]]> {
        self.raw_coords.as_deref()
    }

    /// Published optimum (or best known value), when the file states one.
    pub fn known_optimum(&self) -> Option<f64> {
        self.known_optimum
    }

    pub fn is_cvrplib(&self) -> bool {
        self.raw_coords.is_some()
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<(), InstanceError> {
        if seq.first() != Some(&0) {
            return Err(InstanceError::Argument("sequence must start at the depot".into()));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= self.n_nodes()) {
            return Err(InstanceError::Argument(format!("node {bad} out of range 0..{}", self.n_nodes())));
        }
        Ok(())
    }

    /// Total Euclidean length in model coordinates, closing the tour back
    /// at the depot.
    pub fn tour_length(&self, seq: &[usize]) -> Result<f64, InstanceError> {
        self.check_sequence(seq)?;
        Ok(closed_walk(seq, |a, b| self.dist(a, b)))
    }

    /// Length in the instance's reporting convention: rounded-integer raw
    /// distances for CVRPLIB input, model-space length otherwise.
    pub fn reported_length(&self, seq: &[usize]) -> Result<f64, InstanceError> {
        self.check_sequence(seq)?;
        match &self.raw_coords {
            Some(raw) => Ok(closed_walk(seq, |a, b| euclid(raw[a], raw[b]).round())),
            None => Ok(closed_walk(seq, |a, b| self.dist(a, b))),
        }
    }

    /// Checks every routing constraint; an empty report means feasible.
    pub fn validate(&self, sol: &Solution) -> ValidationReport {
        let seq = &sol.sequence;
        let n = self.n_customers();
        let mut violations = Vec::new();
        if seq.first() != Some(&0) {
            violations.push(Violation::NotStartingAtDepot);
        }
        let mut seen = vec![0usize; n + 1];
        for &v in seq {
            if v > n {
                violations.push(Violation::UnknownNode(v));
            } else {
                seen[v] += 1;
            }
        }
        for (c, &count) in seen.iter().enumerate().skip(1) {
            match count {
                0 => violations.push(Violation::MissingCustomer(c)),
                1 => {}
                times => violations.push(Violation::DuplicateCustomer { customer: c, times }),
            }
        }
        for (pos, w) in seq.windows(2).enumerate() {
            if w[0] == 0 && w[1] == 0 {
                violations.push(Violation::ConsecutiveDepot { position: pos + 1 });
            }
        }
        for (r, route) in sol.routes().iter().enumerate() {
            let load: f64 = route.iter().filter(|&&v| v <= n).map(|&v| self.demands[v]).sum();
            if load > self.capacity {
                violations.push(Violation::CapacityExceeded { route: r, load, capacity: self.capacity });
            }
        }
        ValidationReport { violations }
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn closed_walk(seq: &[usize], d: impl Fn(usize, usize) -> f64) -> f64 {
    let body: f64 = seq.windows(2).map(|w| d(w[0], w[1])).sum();
    body + seq.last().map_or(0.0, |&last| d(last, 0))
}

/// A complete routing plan: the node sequence starts and ends at the depot.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub sequence: Vec<usize>,
    pub length: f64,
}

impl Solution {
    /// Normalizes `seq` so it starts and ends at the depot and records its
    /// model-space length.
    pub fn from_sequence(inst: &VrpInstance, mut seq: Vec<usize>) -> Result<Self, InstanceError> {
        if seq.first() != Some(&0) {
            seq.insert(0, 0);
        }
        if seq.last() != Some(&0) {
            seq.push(0);
        }
        let length = inst.tour_length(&seq)?;
        Ok(Solution { sequence: seq, length })
    }

    /// Route decomposition: customer lists between depot visits.
    pub fn routes(&self) -> Vec<Vec<usize>> {
        self.sequence
            .split(|&v| v == 0)
            .filter(|r| !r.is_empty())
            .map(|r| r.to_vec())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NotStartingAtDepot,
    UnknownNode(usize),
    MissingCustomer(usize),
    DuplicateCustomer { customer: usize, times: usize },
    ConsecutiveDepot { position: usize },
    CapacityExceeded { route: usize, load: f64, capacity: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotStartingAtDepot => write!(f, "sequence does not start at the depot"),
            Violation::UnknownNode(v) => write!(f, "unknown node {v}"),
            Violation::MissingCustomer(c) => write!(f, "customer {c} never visited"),
            Violation::DuplicateCustomer { customer, times } => write!(f, "customer {customer} visited {times} times"),
            Violation::ConsecutiveDepot { position } => write!(f, "consecutive depot visits at position {position}"),
            Violation::CapacityExceeded { route, load, capacity } => {
                write!(f, "route {route} carries {load} > capacity {capacity}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

// ---------------------------------------------------------------- CVRPLIB

#[derive(PartialEq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depot,
}

/// Reads a CVRPLIB `.vrp` file with `EDGE_WEIGHT_TYPE : EUC_2D`.
///
/// The depot is moved to index 0 and the other nodes keep file order.
/// Model coordinates are min-max normalized into the unit square with one
/// common scale for both axes.
pub fn parse_cvrplib(text: &str) -> Result<VrpInstance, InstanceError> {
    let perr = |line: usize, message: String| InstanceError::Parse { line, message };
    let mut name = None;
    let mut comment = String::new();
    let mut dimension: Option<usize> = None;
    let mut capacity: Option<f64> = None;
    let mut edge_type_seen = false;
    let mut coords: Vec<(usize, [f64; 2])> = Vec::new();
    let mut demands: Vec<(usize, f64)> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut seen_coords = false;
    let mut seen_demands = false;
    let mut seen_depot = false;
    let mut section = Section::Header;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        if upper == "EOF" {
            break;
        }
        match upper.as_str() {
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                seen_coords = true;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                seen_demands = true;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depot;
                seen_depot = true;
                continue;
            }
            _ => {}
        }
        if let Some((key, value)) = line.split_once(':') {
            if !key.trim().chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-') {
                section = Section::Header;
                let value = value.trim();
                match key.trim().to_ascii_uppercase().as_str() {
                    "NAME" => name = Some(value.to_string()),
                    "COMMENT" => comment = value.to_string(),
                    "TYPE" => {
                        if !value.eq_ignore_ascii_case("CVRP") {
                            return Err(perr(line_no, format!("unsupported problem type {value}")));
                        }
                    }
                    "DIMENSION" => {
                        dimension = Some(value.parse().map_err(|_| perr(line_no, format!("bad DIMENSION {value}")))?)
                    }
                    "CAPACITY" => {
                        capacity = Some(value.parse().map_err(|_| perr(line_no, format!("bad CAPACITY {value}")))?)
                    }
                    "EDGE_WEIGHT_TYPE" => {
                        if !value.eq_ignore_ascii_case("EUC_2D") {
                            return Err(perr(line_no, format!("unsupported EDGE_WEIGHT_TYPE {value}")));
                        }
                        edge_type_seen = true;
                    }
                    _ => {}
                }
                continue;
            }
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| -> Result<f64, InstanceError> {
            s.parse::<f64>().map_err(|_| perr(line_no, format!("expected a number, found {s:?}")))
        };
        let id = |s: &str| -> Result<usize, InstanceError> {
            s.parse::<usize>().map_err(|_| perr(line_no, format!("expected a node id, found {s:?}")))
        };
        match section {
            Section::Coords => {
                if fields.len() != 3 {
                    return Err(perr(line_no, "coordinate line needs `id x y`".into()));
                }
                coords.push((id(fields[0])?, [num(fields[1])?, num(fields[2])?]));
            }
            Section::Demands => {
                if fields.len() != 2 {
                    return Err(perr(line_no, "demand line needs `id demand`".into()));
                }
                demands.push((id(fields[0])?, num(fields[1])?));
            }
            Section::Depot => {
                for f in fields {
                    let v: i64 = f.parse().map_err(|_| perr(line_no, format!("bad depot id {f:?}")))?;
                    if v > 0 {
                        depots.push(v as usize);
                    }
                }
            }
            Section::Header => return Err(perr(line_no, format!("unexpected line {line:?}"))),
        }
    }

    let end = last_line.max(1);
    if !edge_type_seen {
        return Err(perr(end, "missing EDGE_WEIGHT_TYPE".into()));
    }
    let capacity = capacity.ok_or_else(|| perr(end, "missing CAPACITY".into()))?;
    if !seen_coords {
        return Err(perr(end, "missing NODE_COORD_SECTION".into()));
    }
    if !seen_demands {
        return Err(perr(end, "missing DEMAND_SECTION".into()));
    }
    if !seen_depot || depots.is_empty() {
        return Err(perr(end, "missing DEPOT_SECTION".into()));
    }
    let dim = dimension.unwrap_or(coords.len());
    if coords.len() != dim || demands.len() != dim {
        return Err(perr(end, format!("DIMENSION {dim} but {} coordinates and {} demands", coords.len(), demands.len())));
    }
    if depots.len() != 1 {
        return Err(perr(end, format!("expected one depot, found {}", depots.len())));
    }
    let depot = depots[0];
    let mut by_id: Vec<Option<([f64; 2], Option<f64>)>> = vec![None; dim + 1];
    for &(i, c) in &coords {
        if i == 0 || i > dim {
            return Err(perr(end, format!("node id {i} outside 1..={dim}")));
        }
        by_id[i] = Some((c, None));
    }
    for &(i, q) in &demands {
        match by_id.get_mut(i).and_then(|e| e.as_mut()) {
            Some(entry) => entry.1 = Some(q),
            None => return Err(perr(end, format!("demand for unknown node {i}"))),
        }
    }
    if depot > dim || by_id[depot].is_none() {
        return Err(perr(end, format!("depot {depot} has no coordinates")));
    }
    let mut order = vec![depot];
    order.extend((1..=dim).filter(|&i| i != depot));
    let mut raw = Vec::with_capacity(dim);
    let mut dem = Vec::with_capacity(dim);
    for &i in &order {
        let (c, q) = by_id[i].ok_or_else(|| perr(end, format!("node {i} missing")))?;
        raw.push(c);
        dem.push(q.ok_or_else(|| perr(end, format!("node {i} has no demand")))?);
    }

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &raw {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE);
    let unit: Vec<[f64; 2]> = raw.iter().map(|c| [(c[0] - lo[0]) / span, (c[1] - lo[1]) / span]).collect();

    let mut inst = VrpInstance::new(unit, dem, capacity).map_err(|e| perr(end, e.to_string()))?;
    inst.name = name;
    inst.raw_coords = Some(raw);
    inst.known_optimum = optimum_from_comment(&comment);
    Ok(inst)
}

fn optimum_from_comment(comment: &str) -> Option<f64> {
    let lower = comment.to_ascii_lowercase();
    ["optimal value", "best value"].iter().find_map(|key| {
        let rest = &lower[lower.find(key)? + key.len()..];
        let digits: String = rest
            .trim_start_matches([':', ' '])
            .chars()
            .take_while(|c| c.is_ascii_digit() || *c == '.')
            .collect();
        digits.parse().ok()
    })
}

// ---------------------------------------------------------- instance sets

const SET_MAGIC: &[u8; 4] = b"GVRP";
pub const SET_VERSION: u32 = 1;

/// Writes instances in the `GVRP` little-endian set format.
pub fn write_instance_set<W: Write>(mut w: W, set: &[VrpInstance]) -> Result<(), InstanceError> {
    w.write_all(SET_MAGIC)?;
    w.write_all(&SET_VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for inst in set {
        w.write_all(&(inst.n_customers() as u32).to_le_bytes())?;
        w.write_all(&(inst.capacity as f32).to_le_bytes())?;
        for c in &inst.coords {
            w.write_all(&(c[0] as f32).to_le_bytes())?;
            w.write_all(&(c[1] as f32).to_le_bytes())?;
        }
        for &q in &inst.demands {
            w.write_all(&(q as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_instance_set<R: Read>(mut r: R) -> Result<Vec<VrpInstance>, InstanceError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != SET_MAGIC {
        return Err(InstanceError::Format("bad magic, expected GVRP".into()));
    }
    let version = cur.u32()?;
    if version != SET_VERSION {
        return Err(InstanceError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut set = Vec::with_capacity(count.min(1 << 20));
    for k in 0..count {
        let n = cur.u32()? as usize;
        let capacity = cur.f32()? as f64;
        let mut coords = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            coords.push([cur.f32()? as f64, cur.f32()? as f64]);
        }
        let mut demands = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            demands.push(cur.f32()? as f64);
        }
        let inst = VrpInstance::new(coords, demands, capacity)
            .map_err(|e| InstanceError::Format(format!("instance {k}: {e}")))?;
        set.push(inst);
    }
    if cur.pos != bytes.len() {
        return Err(InstanceError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(set)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], InstanceError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(InstanceError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, InstanceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, InstanceError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
