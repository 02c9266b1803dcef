//! Geographic primitives: Web-Mercator tile projection, quadkeys, shifted
//! windows, n-gram tokenization, great-circle distance and an exact k-NN
//! index over POI coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rstar::primitives::GeomWithData;
use rstar::RTree;

use crate::error::{Error, Result};

pub const MIN_LATITUDE: f64 = -85.05112878;
pub const MAX_LATITUDE: f64 = 85.05112878;
pub const MAX_LEVEL: u8 = 23;
pub const TILE_SIZE: f64 = 256.0;
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lon
            )));
        }
        if self.lat.abs() > 90.0 || self.lon.abs() > 180.0 {
            return Err(Error::invalid(format!(
                "coordinate out of range ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// A tile address in the quadtree pyramid, one base-4 digit per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadkey(String);

impl Quadkey {
    pub fn from_tile(tile_x: u32, tile_y: u32, level: u8) -> Result<Self> {
        check_level(level)?;
        let n = 1u64 << level;
        if tile_x as u64 >= n || tile_y as u64 >= n {
            return Err(Error::invalid(format!(
                "tile ({tile_x}, {tile_y}) outside level {level}"
            )));
        }
        let mut digits = String::with_capacity(level as usize);
        for i in (1..=level).rev() {
            let mask = 1u32 << (i - 1);
            let mut digit = b'0';
            if tile_x & mask != 0 {
                digit += 1;
            }
            if tile_y & mask != 0 {
                digit += 2;
            }
            digits.push(digit as char);
        }
        Ok(Quadkey(digits))
    }

    pub fn level(&self) -> u8 {
        self.0.len() as u8
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Tile coordinates `(x, y)` addressed by this key.
    pub fn tile(&self) -> (u32, u32) {
        let mut x = 0u32;
        let mut y = 0u32;
        for b in self.0.bytes() {
            let d = (b - b'0') as u32;
            x = (x << 1) | (d & 1);
            y = (y << 1) | (d >> 1);
        }
        (x, y)
    }

    pub fn is_prefix_of(&self, other: &Quadkey) -> bool {
        other.0.starts_with(&self.0)
    }
}

impl FromStr for Quadkey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() || s.len() > MAX_LEVEL as usize {
            return Err(Error::invalid(format!("quadkey {s:?} has invalid length")));
        }
        if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='3')) {
            return Err(Error::invalid(format!("quadkey {s:?} contains {c:?}")));
        }
        Ok(Quadkey(s.to_owned()))
    }
}

impl fmt::Display for Quadkey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_level(level: u8) -> Result<()> {
    if level == 0 || level > MAX_LEVEL {
        return Err(Error::invalid(format!(
            "level {level} outside [1, {MAX_LEVEL}]"
        )));
    }
    Ok(())
}

fn map_size(level: u8) -> f64 {
    TILE_SIZE * (1u64 << level) as f64
}

/// Continuous pixel coordinates of `p` at `level`.
fn continuous_pixel(p: GeoPoint, level: u8) -> (f64, f64) {
    let lat = p.lat.clamp(MIN_LATITUDE, MAX_LATITUDE);
    let lon = p.lon.clamp(-180.0, 180.0);
    let x = (lon + 180.0) / 360.0;
    let sin_lat = (lat * PI / 180.0).sin();
    let y = 0.5 - ((1.0 + sin_lat) / (1.0 - sin_lat)).ln() / (4.0 * PI);
    let size = map_size(level);
    (x * size, y * size)
}

fn whole_pixel(c: f64, level: u8) -> u64 {
    let max = map_size(level) - 1.0;
    c.floor().clamp(0.0, max) as u64
}

/// Integer pixel coordinates of `p` at `level`.
pub fn pixel_of(p: GeoPoint, level: u8) -> Result<(u64, u64)> {
    p.validate()?;
    check_level(level)?;
    let (cx, cy) = continuous_pixel(p, level);
    Ok((whole_pixel(cx, level), whole_pixel(cy, level)))
}

/// Inverse projection of a (possibly fractional) pixel coordinate.
pub fn pixel_to_point(pixel_x: f64, pixel_y: f64, level: u8) -> Result<GeoPoint> {
    check_level(level)?;
    let size = map_size(level);
    let x = (pixel_x.clamp(0.0, size) / size) - 0.5;
    let y = 0.5 - (pixel_y.clamp(0.0, size) / size);
    let lat = 90.0 - 360.0 * (-y * 2.0 * PI).exp().atan() / PI;
    GeoPoint::new(lat, 360.0 * x)
}

pub fn quadkey_of(p: GeoPoint, level: u8) -> Result<Quadkey> {
    let (px, py) = pixel_of(p, level)?;
    Quadkey::from_tile((px / 256) as u32, (py / 256) as u32, level)
}

/// Geographic center of the tile addressed by `q`.
///
/// Tile `t` spans continuous pixel coordinates `[256t, 256t + 256)`, so the
/// center is `256t + 128`.
pub fn quadkey_to_center(q: &Quadkey) -> Result<GeoPoint> {
    let (tx, ty) = q.tile();
    let cx = tx as f64 * TILE_SIZE + 128.0;
    let cy = ty as f64 * TILE_SIZE + 128.0;
    pixel_to_point(cx, cy, q.level())
}

/// Boundary slack in tile units (one millionth of a pixel).
const BOUNDARY_SLACK: f64 = 1e-6 / TILE_SIZE;

/// Tile index along one axis after shifting by `shift` pixels. A shifted
/// point lying exactly on a tile edge is assigned to the tile on the side of
/// the unshifted point.
fn shifted_tile(c: f64, shift: f64, level: u8) -> u32 {
    let u = (c + shift) / TILE_SIZE;
    let t = if shift > 0.0 {
        (u - BOUNDARY_SLACK).ceil() - 1.0
    } else if shift < 0.0 {
        (u + BOUNDARY_SLACK).floor()
    } else {
        u.floor()
    };
    let max = ((1u64 << level) - 1) as f64;
    t.clamp(0.0, max) as u32
}

/// The nine window quadkeys around `p`: offsets of `delta * 256 * step`
/// pixels for `delta` in {-1, 0, 1} on each axis, row-major over (dy, dx).
/// Duplicates are kept.
pub fn shifted_window_quadkeys(p: GeoPoint, level: u8, step: f64) -> Result<Vec<Quadkey>> {
    p.validate()?;
    check_level(level)?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("window step {step} outside (0, 1]")));
    }
    let (cx, cy) = continuous_pixel(p, level);
    // Snap the unshifted coordinate to its whole pixel so the centre
    // window is exactly quadkey_of(p).
    let size = map_size(level);
    let cx = cx.clamp(0.0, size);
    let cy = cy.clamp(0.0, size);
    let offset = TILE_SIZE * step;
    let mut out = Vec::with_capacity(9);
    for dy in [-1.0, 0.0, 1.0] {
        let ty = if dy == 0.0 {
            (whole_pixel(cy, level) / 256) as u32
        } else {
            shifted_tile(cy, dy * offset, level)
        };
        for dx in [-1.0, 0.0, 1.0] {
            let tx = if dx == 0.0 {
                (whole_pixel(cx, level) / 256) as u32
            } else {
                shifted_tile(cx, dx * offset, level)
            };
            out.push(Quadkey::from_tile(tx, ty, level)?);
        }
    }
    Ok(out)
}

/// Overlapping width-`n` grams of a quadkey, each encoded as its base-4 value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GramSequence {
    pub n: usize,
    pub ids: Vec<u32>,
}

impl GramSequence {
    pub fn vocab_size(&self) -> usize {
        4usize.pow(self.n as u32)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn ngram_tokenize(q: &Quadkey, n: usize) -> Result<GramSequence> {
    let level = q.level() as usize;
    if n == 0 || n > level || n > 15 {
        return Err(Error::invalid(format!(
            "gram width {n} incompatible with quadkey level {level}"
        )));
    }
    let digits: Vec<u32> = q.as_str().bytes().map(|b| (b - b'0') as u32).collect();
    let ids = digits
        .windows(n)
        .map(|w| w.iter().fold(0u32, |acc, &d| acc * 4 + d))
        .collect();
    Ok(GramSequence { n, ids })
}

/// The `n`-character base-4 string a gram id stands for.
pub fn decode_gram(id: u32, n: usize) -> String {
    let mut chars = vec![b'0'; n];
    let mut v = id;
    for slot in chars.iter_mut().rev() {
        *slot = b'0' + (v % 4) as u8;
        v /= 4;
    }
    String::from_utf8(chars).expect("ascii digits")
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlambda / 2.0).sin();
    let h = (s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

fn unit_vector(p: GeoPoint) -> [f64; 3] {
    let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

type IndexedPoint = GeomWithData<[f64; 3], usize>;

/// Exact haversine k-nearest-neighbour index over POIs.
///
/// Points are stored as unit vectors in an R-tree; chord length is monotone
/// in great-circle distance, so the tree narrows the candidate set and the
/// final order is decided on haversine distance with ties by ascending id.
pub struct SpatialIndex {
    poi_ids: Vec<usize>,
    coordinates: Vec<GeoPoint>,
    tree: RTree<IndexedPoint>,
}

impl SpatialIndex {
    pub fn new(poi_ids: Vec<usize>, coordinates: Vec<GeoPoint>) -> Result<Self> {
        if poi_ids.len() != coordinates.len() {
            return Err(Error::invalid("poi ids and coordinates differ in length"));
        }
        for p in &coordinates {
            p.validate()?;
        }
        let items = coordinates
            .iter()
            .enumerate()
            .map(|(slot, &p)| GeomWithData::new(unit_vector(p), slot))
            .collect();
        Ok(SpatialIndex {
            poi_ids,
            coordinates,
            tree: RTree::bulk_load(items),
        })
    }

    /// Index over a dense registry where POI `i` sits at `coordinates[i]`.
    pub fn from_registry(coordinates: &[GeoPoint]) -> Result<Self> {
        Self::new((0..coordinates.len()).collect(), coordinates.to_vec())
    }

    pub fn len(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poi_ids.is_empty()
    }

    pub fn k_nearest(&self, p: GeoPoint, k: usize) -> Result<Vec<usize>> {
        p.validate()?;
        if k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds indexed population {}",
                self.len()
            )));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = unit_vector(p);
        let kth = self
            .tree
            .nearest_neighbor_iter_with_distance_2(&q)
            .nth(k - 1)
            .map(|(_, d2)| d2)
            .expect("k <= population");
        // Widen the radius slightly so that rounding differences between the
        // chord and haversine formulas cannot drop a tied candidate.
        let radius2 = kth * (1.0 + 1e-9) + 1e-18;
        let mut candidates: Vec<(f64, usize)> = self
            .tree
            .locate_within_distance(q, radius2)
            .map(|item| {
                let slot = item.data;
                (haversine_km(p, self.coordinates[slot]), self.poi_ids[slot])
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(k);
        Ok(candidates.into_iter().map(|(_, id)| id).collect())
    }
}
