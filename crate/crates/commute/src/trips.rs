//! Average-daily-trip construction, tract assignment with the city-area
//! filter, and OD matrix aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    area_fraction_inside_multi, haversine_distance, point_in_polygon, GeoPoint, Polygon,
};
use crate::geojson::read_feature_collection;
use crate::ingest::{to_local, ObservationWindow};
use crate::stay::StayPoint;

/// A census tract with its fraction of area inside the city boundary.
#[derive(Debug, Clone)]
pub struct TractGeometry {
    pub tract_id: String,
    pub polygons: Vec<Polygon>,
    pub area_fraction_in_city: f64,
    pub included: bool,
}

impl TractGeometry {
    pub fn contains(&self, p: GeoPoint) -> bool {
        self.polygons.iter().any(|poly| {
            let (lo, hi) = poly.bounding_box();
            p.lat >= lo.lat
                && p.lat <= hi.lat
                && p.lon >= lo.lon
                && p.lon <= hi.lon
                && point_in_polygon(p, poly)
        })
    }
}

/// One commuter's tract-level contribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommuterRecord {
    pub device_id: String,
    pub home_tract: String,
    pub work_tract: String,
    pub commute_days: u32,
    pub weekday_count: u32,
    pub avg_daily_trips: f64,
}

/// Sparse OD matrix; zero cells are omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ODMatrix {
    pub cells: BTreeMap<(String, String), f64>,
}

impl ODMatrix {
    pub fn total(&self) -> f64 {
        self.cells.values().sum()
    }

    pub fn add(&mut self, origin: &str, dest: &str, trips: f64) {
        if trips > 0.0 {
            *self
                .cells
                .entry((origin.to_string(), dest.to_string()))
                .or_insert(0.0) += trips;
        }
    }

    /// Merge another partial matrix in; commutative and associative.
    pub fn merge(&mut self, other: ODMatrix) {
        for ((o, d), v) in other.cells {
            *self.cells.entry((o, d)).or_insert(0.0) += v;
        }
    }
}

/// Distinct local weekdays with at least one stay point within `radius_m`
/// of the work centroid; a stay belongs to the local date of its arrival.
/// Home presence is not required: the origin is assumed to be home.
pub fn count_commute_days(
    stay_points: &[StayPoint],
    work_centroid: GeoPoint,
    radius_m: f64,
    window: &ObservationWindow,
) -> u32 {
    let mut days: BTreeSet<NaiveDate> = BTreeSet::new();
    for s in stay_points {
        if haversine_distance(s.centroid, work_centroid) > radius_m {
            continue;
        }
        let local = to_local(s.arrival_utc, window);
        if local.is_weekday {
            days.insert(local.date);
        }
    }
    days.len() as u32
}

pub fn avg_daily_trips(commute_days: u32, weekday_count: u32) -> Result<f64> {
    if weekday_count == 0 {
        return Err(Error::NoWeekdays);
    }
    Ok(commute_days as f64 / weekday_count as f64)
}

/// Load tract and city GeoJSON, annotate each tract with its in-city area
/// fraction, and flag inclusion per the >= `min_fraction` rule.
pub fn load_and_filter_tracts(
    tract_file: &Path,
    city_boundary_file: &Path,
    min_fraction: f64,
    grid_resolution: u32,
    id_property: &str,
) -> Result<Vec<TractGeometry>> {
    let city = read_feature_collection(city_boundary_file, id_property)?;
    let city_polygons: Vec<Polygon> =
        city.into_iter().flat_map(|f| f.polygons).collect();
    if city_polygons.is_empty() {
        return Err(Error::Config("city boundary file contains no polygons".into()));
    }
    let features = read_feature_collection(tract_file, id_property)?;
    let mut tracts = Vec::with_capacity(features.len());
    for (idx, feature) in features.into_iter().enumerate() {
        let tract_id = feature.id.unwrap_or_else(|| format!("feature-{idx}"));
        let fraction =
            area_fraction_inside_multi(&feature.polygons, &city_polygons, grid_resolution)
                .map_err(|e| Error::InvalidTract {
                    tract_id: tract_id.clone(),
                    reason: e.to_string(),
                })?;
        tracts.push(TractGeometry {
            tract_id,
            polygons: feature.polygons,
            area_fraction_in_city: fraction,
            included: fraction >= min_fraction,
        });
    }
    Ok(tracts)
}

/// A commuter ready for tract aggregation.
#[derive(Debug, Clone)]
pub struct CommuterFlow {
    pub device_id: String,
    pub home: GeoPoint,
    pub work: GeoPoint,
    pub commute_days: u32,
    pub weekday_count: u32,
    pub avg_daily_trips: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub included_commuters: u64,
    pub excluded_home_outside: u64,
    pub excluded_work_outside: u64,
}

/// Find the unique included tract containing `p`; two containing tracts
/// is a data-quality error, none is a (counted) exclusion.
fn assign_tract<'a>(p: GeoPoint, tracts: &'a [TractGeometry]) -> Result<Option<&'a str>> {
    let mut found: Option<&str> = None;
    for t in tracts.iter().filter(|t| t.included) {
        if t.contains(p) {
            if let Some(prev) = found {
                return Err(Error::OverlappingTracts {
                    lat: p.lat,
                    lon: p.lon,
                    a: prev.to_string(),
                    b: t.tract_id.clone(),
                });
            }
            found = Some(&t.tract_id);
        }
    }
    Ok(found)
}

/// Aggregate commuter flows into tract-pair cells. Commuters whose home
/// or work falls in no included tract are excluded and counted.
pub fn build_od(
    commuters: &[CommuterFlow],
    tracts: &[TractGeometry],
) -> Result<(ODMatrix, Vec<CommuterRecord>, ExclusionReport)> {
    let mut od = ODMatrix::default();
    let mut records = Vec::new();
    let mut report = ExclusionReport::default();
    for c in commuters {
        let Some(home_tract) = assign_tract(c.home, tracts)? else {
            report.excluded_home_outside += 1;
            continue;
        };
        let Some(work_tract) = assign_tract(c.work, tracts)? else {
            report.excluded_work_outside += 1;
            continue;
        };
        report.included_commuters += 1;
        od.add(home_tract, work_tract, c.avg_daily_trips);
        records.push(CommuterRecord {
            device_id: c.device_id.clone(),
            home_tract: home_tract.to_string(),
            work_tract: work_tract.to_string(),
            commute_days: c.commute_days,
            weekday_count: c.weekday_count,
            avg_daily_trips: c.avg_daily_trips,
        });
    }
    Ok((od, records, report))
}
