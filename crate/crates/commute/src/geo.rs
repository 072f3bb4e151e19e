//! Geodesic distance and polygon primitives shared by the whole pipeline.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// IUGG mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A WGS-84 style lat/lon point in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, Error> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in meters via the haversine formula.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// A polygon in lon/lat space: one exterior ring plus optional holes.
/// Rings are implicitly closed and must have at least 3 vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<GeoPoint>,
    pub holes: Vec<Vec<GeoPoint>>,
}

impl Polygon {
    pub fn new(exterior: Vec<GeoPoint>, holes: Vec<Vec<GeoPoint>>) -> Result<Self, Error> {
        for ring in std::iter::once(&exterior).chain(holes.iter()) {
            if ring.len() < 3 {
                return Err(Error::DegenerateRing { vertices: ring.len() });
            }
            if ring_self_intersects(ring) {
                return Err(Error::SelfIntersectingRing);
            }
        }
        Ok(Polygon { exterior, holes })
    }

    /// Axis-aligned rectangle helper, mostly for tests and synthetic grids.
    pub fn rect(lat_min: f64, lon_min: f64, lat_max: f64, lon_max: f64) -> Polygon {
        Polygon {
            exterior: vec![
                GeoPoint { lat: lat_min, lon: lon_min },
                GeoPoint { lat: lat_min, lon: lon_max },
                GeoPoint { lat: lat_max, lon: lon_max },
                GeoPoint { lat: lat_max, lon: lon_min },
            ],
            holes: Vec::new(),
        }
    }

    pub fn bounding_box(&self) -> (GeoPoint, GeoPoint) {
        let mut lat_min = f64::INFINITY;
        let mut lat_max = f64::NEG_INFINITY;
        let mut lon_min = f64::INFINITY;
        let mut lon_max = f64::NEG_INFINITY;
        for p in &self.exterior {
            lat_min = lat_min.min(p.lat);
            lat_max = lat_max.max(p.lat);
            lon_min = lon_min.min(p.lon);
            lon_max = lon_max.max(p.lon);
        }
        (
            GeoPoint { lat: lat_min, lon: lon_min },
            GeoPoint { lat: lat_max, lon: lon_max },
        )
    }
}

// Segment intersection test over all non-adjacent ring edges. Per-ring
// vertex counts are small (tract boundaries), O(n^2) is fine.
fn ring_self_intersects(ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let a1 = ring[i];
        let a2 = ring[(i + 1) % n];
        for j in (i + 1)..n {
            // skip adjacent edges (shared vertex)
            if j == i || (j + 1) % n == i || j == (i + 1) % n {
                continue;
            }
            let b1 = ring[j];
            let b2 = ring[(j + 1) % n];
            if segments_properly_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

fn cross(o: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon)
}

fn segments_properly_intersect(a1: GeoPoint, a2: GeoPoint, b1: GeoPoint, b2: GeoPoint) -> bool {
    let d1 = cross(b1, b2, a1);
    let d2 = cross(b1, b2, a2);
    let d3 = cross(a1, a2, b1);
    let d4 = cross(a1, a2, b2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0
}

/// Even-odd ray-casting containment in planar lon/lat space. Points exactly
/// on a ring edge count as inside (closed-boundary rule). Holes subtract.
pub fn point_in_polygon(p: GeoPoint, poly: &Polygon) -> bool {
    if !ring_contains(p, &poly.exterior) {
        return false;
    }
    for hole in &poly.holes {
        if ring_contains_open(p, hole) {
            return false;
        }
    }
    true
}

fn point_on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    if cross(a, b, p).abs() > 1e-15 {
        return false;
    }
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn ray_cast(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a = ring[i];
        let b = ring[j];
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = (b.lon - a.lon) * (p.lat - a.lat) / (b.lat - a.lat) + a.lon;
            if p.lon < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn ring_contains(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        if point_on_segment(p, ring[i], ring[(i + 1) % n]) {
            return true;
        }
    }
    ray_cast(p, ring)
}

// Strict interior test for holes: a point on a hole boundary still counts
// as inside the polygon.
fn ring_contains_open(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        if point_on_segment(p, ring[i], ring[(i + 1) % n]) {
            return false;
        }
    }
    ray_cast(p, ring)
}

/// Fraction of `subject`'s area that lies inside `container`, by a
/// deterministic grid sample of `grid_resolution`^2 points over the
/// subject's bounding box.
pub fn area_fraction_inside(
    subject: &Polygon,
    container: &Polygon,
    grid_resolution: u32,
) -> Result<f64, Error> {
    area_fraction_inside_multi(
        std::slice::from_ref(subject),
        std::slice::from_ref(container),
        grid_resolution,
    )
}

/// Multi-polygon variant: the subject is the union of `subjects`, the
/// container the union of `containers`. Each subject polygon is sampled
/// over its own bounding box with the same grid resolution.
pub fn area_fraction_inside_multi(
    subjects: &[Polygon],
    containers: &[Polygon],
    grid_resolution: u32,
) -> Result<f64, Error> {
    assert!(grid_resolution >= 10, "grid_resolution must be >= 10");
    let n = grid_resolution as usize;
    let mut in_subject = 0u64;
    let mut in_both = 0u64;
    for subject in subjects {
        let (lo, hi) = subject.bounding_box();
        for i in 0..n {
            // cell-center sampling
            let lat = lo.lat + (hi.lat - lo.lat) * (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let lon = lo.lon + (hi.lon - lo.lon) * (j as f64 + 0.5) / n as f64;
                let p = GeoPoint { lat, lon };
                if point_in_polygon(p, subject) {
                    in_subject += 1;
                    if containers.iter().any(|c| point_in_polygon(p, c)) {
                        in_both += 1;
                    }
                }
            }
        }
    }
    if in_subject == 0 {
        return Err(Error::DegenerateGeometry);
    }
    Ok(in_both as f64 / in_subject as f64)
}
