//! Hierarchical cube-sphere cells with Hilbert-curve ordering.
//!
//! A cell is identified by a cube face (0..5) plus a base-4 quadtree path in
//! Hilbert order, written as a token like `2/03`. The mapping from a point to
//! a cell: lat/lng -> unit XYZ -> dominant-axis face -> gnomonic (u,v) ->
//! quadratic (s,t) -> grid (i,j) -> Hilbert path.
//!
//! Tokens here follow the face/path text form but are NOT byte-compatible
//! with Google S2 tokens; the compatibility target is structural (hierarchy,
//! sibling disjointness, per-face Hilbert adjacency).

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

pub const MAX_LEVEL: u8 = 30;

#[derive(Debug, Clone, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {lat} / longitude {lng} out of range")]
    InvalidLatLng { lat: f64, lng: f64 },
    #[error("level {0} out of range 0..={MAX_LEVEL}")]
    InvalidLevel(u32),
    #[error("bad cell token {token:?}: {reason}")]
    BadToken { token: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Geographic point in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    pub fn new(lat: f64, lng: f64) -> Result<Self, GeoError> {
        if !lat.is_finite()
            || !lng.is_finite()
            || !(-90.0..=90.0).contains(&lat)
            || !(-180.0..=180.0).contains(&lng)
        {
            return Err(GeoError::InvalidLatLng { lat, lng });
        }
        Ok(Self { lat, lng })
    }

    /// (longitude, latitude) in radians — the encoder-boundary convention.
    pub fn radians(&self) -> (f64, f64) {
        (self.lng.to_radians(), self.lat.to_radians())
    }

    pub fn to_xyz(&self) -> [f64; 3] {
        let (lng, lat) = self.radians();
        [lat.cos() * lng.cos(), lat.cos() * lng.sin(), lat.sin()]
    }

    /// Central angle between two points, in radians.
    pub fn angular_distance(&self, other: &LatLng) -> f64 {
        let a = self.to_xyz();
        let b = other.to_xyz();
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        dot.clamp(-1.0, 1.0).acos()
    }
}

// Hilbert sub-cell tables. `pos` is the traversal-order index (the path
// digit); `ij` packs the sub-cell coordinate as i*2 + j. Orientation bits:
// 1 = swap i/j, 2 = invert both. The curve enters each face with
// orientation 0; per-face adjacency of consecutive positions is a property
// of these tables.
const SWAP: u8 = 0x1;
const INVERT: u8 = 0x2;
const POS_TO_IJ: [[u8; 4]; 4] = [
    [0, 1, 3, 2], // canonical: (0,0) (0,1) (1,1) (1,0)
    [0, 2, 3, 1], // swapped
    [3, 2, 0, 1], // inverted
    [3, 1, 0, 2], // swapped + inverted
];
const IJ_TO_POS: [[u8; 4]; 4] = [[0, 1, 3, 2], [0, 3, 1, 2], [2, 3, 1, 0], [2, 1, 3, 0]];
const POS_TO_ORIENTATION: [u8; 4] = [SWAP, 0, 0, SWAP | INVERT];

/// Face + base-4 Hilbert path identifying one cell of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CellId {
    face: u8,
    path: Vec<u8>,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

impl CellId {
    pub fn new(face: u8, path: Vec<u8>) -> Result<Self, GeoError> {
        if face > 5 {
            return Err(GeoError::Invalid(format!("face {face} out of range 0..=5")));
        }
        if path.len() > MAX_LEVEL as usize {
            return Err(GeoError::InvalidLevel(path.len() as u32));
        }
        if let Some(&d) = path.iter().find(|&&d| d > 3) {
            return Err(GeoError::Invalid(format!(
                "path digit {d} out of range 0..=3"
            )));
        }
        Ok(Self { face, path })
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn level(&self) -> u8 {
        self.path.len() as u8
    }

    pub fn path(&self) -> &[u8] {
        &self.path
    }

    /// Text token, e.g. `2/` (face cell) or `4/0012`.
    pub fn token(&self) -> String {
        let digits: String = self.path.iter().map(|d| char::from(b'0' + d)).collect();
        format!("{}/{}", self.face, digits)
    }

    pub fn parse(token: &str) -> Result<Self, GeoError> {
        let bad = |reason: &str| GeoError::BadToken {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let (face_str, path_str) = token.split_once('/').ok_or_else(|| bad("missing '/'"))?;
        let face: u8 = face_str.parse().map_err(|_| bad("face is not a digit"))?;
        if face > 5 {
            return Err(bad("face out of range 0..=5"));
        }
        let mut path = Vec::with_capacity(path_str.len());
        for c in path_str.chars() {
            match c {
                '0'..='3' => path.push(c as u8 - b'0'),
                _ => return Err(bad("path digits must be 0..=3")),
            }
        }
        CellId::new(face, path)
    }

    pub fn parent(&self) -> Option<CellId> {
        if self.path.is_empty() {
            return None;
        }
        let mut path = self.path.clone();
        path.pop();
        Some(CellId {
            face: self.face,
            path,
        })
    }

    pub fn child(&self, pos: u8) -> Result<CellId, GeoError> {
        if pos > 3 {
            return Err(GeoError::Invalid(format!(
                "child position {pos} out of range"
            )));
        }
        if self.level() >= MAX_LEVEL {
            return Err(GeoError::InvalidLevel(self.level() as u32 + 1));
        }
        let mut path = self.path.clone();
        path.push(pos);
        Ok(CellId {
            face: self.face,
            path,
        })
    }

    pub fn children(&self) -> Vec<CellId> {
        (0..4).filter_map(|p| self.child(p).ok()).collect()
    }

    /// True if `other` lies within this cell (same face, path prefix).
    pub fn contains(&self, other: &CellId) -> bool {
        self.face == other.face
            && other.path.len() >= self.path.len()
            && other.path[..self.path.len()] == self.path[..]
    }

    /// Grid coordinates of this cell at its own level.
    pub fn to_ij(&self) -> (u32, u32) {
        let mut orientation = 0u8;
        let (mut i, mut j) = (0u32, 0u32);
        for &pos in &self.path {
            let ij = POS_TO_IJ[orientation as usize][pos as usize];
            i = (i << 1) | u32::from(ij >> 1);
            j = (j << 1) | u32::from(ij & 1);
            orientation ^= POS_TO_ORIENTATION[pos as usize];
        }
        (i, j)
    }

    /// Build a cell from grid coordinates at a level.
    pub fn from_face_ij(face: u8, i: u32, j: u32, level: u8) -> Result<Self, GeoError> {
        if level > MAX_LEVEL {
            return Err(GeoError::InvalidLevel(level as u32));
        }
        let mut orientation = 0u8;
        let mut path = Vec::with_capacity(level as usize);
        for k in (0..level).rev() {
            let ij = ((((i >> k) & 1) << 1) | ((j >> k) & 1)) as u8;
            let pos = IJ_TO_POS[orientation as usize][ij as usize];
            path.push(pos);
            orientation ^= POS_TO_ORIENTATION[pos as usize];
        }
        CellId::new(face, path)
    }

    /// The (s, t) rectangle this cell covers on its face: (s0, s1, t0, t1).
    pub fn st_bounds(&self) -> (f64, f64, f64, f64) {
        let (i, j) = self.to_ij();
        let size = f64::from(1u32 << u32::from(self.level()));
        (
            f64::from(i) / size,
            f64::from(i + 1) / size,
            f64::from(j) / size,
            f64::from(j + 1) / size,
        )
    }

    /// Geometric point-in-cell test, independent of token prefix logic.
    pub fn contains_point(&self, p: &LatLng) -> bool {
        let (face, s, t) = point_to_face_st(p);
        if face != self.face {
            return false;
        }
        let (s0, s1, t0, t1) = self.st_bounds();
        s >= s0 && s < s1 && t >= t0 && t < t1
    }

    /// Center of the cell on the sphere.
    pub fn center(&self) -> LatLng {
        let (s0, s1, t0, t1) = self.st_bounds();
        let u = st_to_uv((s0 + s1) / 2.0);
        let v = st_to_uv((t0 + t1) / 2.0);
        let xyz = face_uv_to_xyz(self.face, u, v);
        xyz_to_latlng(xyz)
    }

    /// All cells of a level in (face, Hilbert) order.
    pub fn all_at_level(level: u8) -> Vec<CellId> {
        let mut out = Vec::new();
        for face in 0..6u8 {
            let mut frontier = vec![CellId {
                face,
                path: Vec::new(),
            }];
            for _ in 0..level {
                frontier = frontier.iter().flat_map(|c| c.children()).collect();
            }
            out.extend(frontier);
        }
        out
    }
}

impl TryFrom<String> for CellId {
    type Error = GeoError;
    fn try_from(s: String) -> Result<Self, GeoError> {
        CellId::parse(&s)
    }
}

impl From<CellId> for String {
    fn from(c: CellId) -> String {
        c.token()
    }
}

/// Face of the dominant half-axis in order (+x, +y, +z, -x, -y, -z);
/// ties resolve to the lowest face index.
fn xyz_to_face(p: [f64; 3]) -> u8 {
    let candidates = [p[0], p[1], p[2], -p[0], -p[1], -p[2]];
    let mut best = 0usize;
    for (k, &v) in candidates.iter().enumerate() {
        if v > candidates[best] {
            best = k;
        }
    }
    best as u8
}

/// Gnomonic projection of a point onto a face: (u, v) in [-1, 1]^2.
fn xyz_to_face_uv(face: u8, p: [f64; 3]) -> (f64, f64) {
    let [x, y, z] = p;
    match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        5 => (-y / z, -x / z),
        _ => unreachable!("face out of range"),
    }
}

fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        5 => [v, u, -1.0],
        _ => unreachable!("face out of range"),
    }
}

/// Quadratic reparameterization, u in [-1,1] -> s in [0,1].
fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (4.0 * s * s - 1.0) / 3.0
    } else {
        -(4.0 * (1.0 - s) * (1.0 - s) - 1.0) / 3.0
    }
}

fn xyz_to_latlng(p: [f64; 3]) -> LatLng {
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let lat = (p[2] / norm).clamp(-1.0, 1.0).asin().to_degrees();
    let lng = p[1].atan2(p[0]).to_degrees();
    LatLng { lat, lng }
}

/// (face, s, t) coordinates of a point.
pub fn point_to_face_st(p: &LatLng) -> (u8, f64, f64) {
    let xyz = p.to_xyz();
    let face = xyz_to_face(xyz);
    let (u, v) = xyz_to_face_uv(face, xyz);
    (face, uv_to_st(u), uv_to_st(v))
}

/// Deterministic point-to-cell mapping at a given level.
pub fn cell_from_latlng(p: &LatLng, level: u8) -> Result<CellId, GeoError> {
    LatLng::new(p.lat, p.lng)?;
    if level > MAX_LEVEL {
        return Err(GeoError::InvalidLevel(level as u32));
    }
    let (face, s, t) = point_to_face_st(p);
    let size = 1u32 << u32::from(level);
    let quantize = |x: f64| -> u32 {
        let i = (x * f64::from(size)).floor();
        (i.max(0.0) as u32).min(size - 1)
    };
    CellId::from_face_ij(face, quantize(s), quantize(t), level)
}

/// Result of adaptive per-class-count partitioning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellPartition {
    pub cells: Vec<CellId>,
    pub n_max: usize,
    /// Per-cell record counts, aligned with `cells`.
    pub counts: Vec<usize>,
    /// Per-cell maximum single-class counts, aligned with `cells`.
    pub max_class_counts: Vec<usize>,
    /// True when some cell still exceeded n_max at max_level.
    pub truncated: bool,
}

impl CellPartition {
    /// Fraction of cells whose max class count is at least 0.1 * n_max.
    /// Reported as a statistic of the split, not enforced.
    pub fn lower_bound_fraction(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        let lo = self.n_max as f64 * 0.1;
        let hits = self
            .max_class_counts
            .iter()
            .filter(|&&c| c as f64 >= lo)
            .count();
        hits as f64 / self.cells.len() as f64
    }

    pub fn cell_of(&self, p: &LatLng) -> Option<&CellId> {
        self.cells.iter().find(|c| c.contains_point(p))
    }
}

/// Split the sphere so no cell holds more than `n_max` records of any one
/// class, refining from the 6 face cells down to at most `max_level`.
/// Only cells containing records are returned.
pub fn adaptive_partition(
    records: &[(LatLng, u32)],
    n_max: usize,
    max_level: u8,
) -> Result<CellPartition, GeoError> {
    if n_max == 0 {
        return Err(GeoError::Invalid("n_max must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(GeoError::Invalid("records must be non-empty".into()));
    }
    let max_level = max_level.min(MAX_LEVEL);

    let max_class_count = |idxs: &[usize]| -> usize {
        let mut counts = std::collections::HashMap::new();
        for &i in idxs {
            *counts.entry(records[i].1).or_insert(0usize) += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    };

    // seed the queue with non-empty face cells
    let mut queue: Vec<(CellId, Vec<usize>)> = Vec::new();
    for face in 0..6u8 {
        let cell = CellId::new(face, Vec::new())?;
        let idxs: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, (p, _))| cell.contains_point(p))
            .map(|(i, _)| i)
            .collect();
        if !idxs.is_empty() {
            queue.push((cell, idxs));
        }
    }

    let mut leaves: Vec<(CellId, Vec<usize>)> = Vec::new();
    let mut truncated = false;
    while let Some((cell, idxs)) = queue.pop() {
        let mc = max_class_count(&idxs);
        if mc <= n_max || cell.level() >= max_level {
            if mc > n_max {
                truncated = true;
            }
            leaves.push((cell, idxs));
            continue;
        }
        let next_level = cell.level() + 1;
        let mut buckets: std::collections::HashMap<CellId, Vec<usize>> =
            std::collections::HashMap::new();
        for &i in &idxs {
            let child = cell_from_latlng(&records[i].0, next_level)?;
            debug_assert!(cell.contains(&child));
            buckets.entry(child).or_default().push(i);
        }
        for entry in buckets {
            queue.push(entry);
        }
    }

    leaves.sort_by(|a, b| a.0.cmp(&b.0));
    let counts = leaves.iter().map(|(_, v)| v.len()).collect();
    let max_class_counts = leaves.iter().map(|(_, v)| max_class_count(v)).collect();
    Ok(CellPartition {
        cells: leaves.into_iter().map(|(c, _)| c).collect(),
        n_max,
        counts,
        max_class_counts,
        truncated,
    })
}

/// Classes with at least one training record inside `cell`.
pub fn species_in_cell(records: &[(LatLng, u32)], cell: &CellId) -> BTreeSet<u32> {
    records
        .iter()
        .filter(|(p, _)| cell.contains_point(p))
        .map(|(_, class)| *class)
        .collect()
}
