//! Home and work inference from clustered stay points, plus the detection
//! funnel the pipeline reports.

use chrono::TimeZone;
use serde::{Deserialize, Serialize};

use crate::geo::haversine_distance;
use crate::ingest::{to_local, ObservationWindow};
use crate::region::{cluster_regions, StayRegion};
use crate::stay::StayPoint;

/// Thresholds for place inference. Defaults carry the published values:
/// 250 m linkage, 20:00-05:00 nights, 3 h night overlap, 24 h long stay,
/// 08:00-18:00 work arrivals, 800 m walking distance, 2 visits, p = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacesConfig {
    pub linkage_threshold_m: f64,
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub min_night_overlap_s: i64,
    pub long_stay_s: i64,
    pub work_start_hour: u32,
    pub work_end_hour: u32,
    pub walking_distance_m: f64,
    pub min_visits: usize,
    pub score_exponent: u32,
}

impl Default for PlacesConfig {
    fn default() -> Self {
        PlacesConfig {
            linkage_threshold_m: 250.0,
            night_start_hour: 20,
            night_end_hour: 5,
            min_night_overlap_s: 3 * 3600,
            long_stay_s: 24 * 3600,
            work_start_hour: 8,
            work_end_hour: 18,
            walking_distance_m: 800.0,
            min_visits: 2,
            score_exponent: 1,
        }
    }
}

/// A device's inferred places. `work` present implies `home` present.
#[derive(Debug, Clone)]
pub struct PlaceProfile {
    pub device_id: String,
    pub home: Option<StayRegion>,
    pub work: Option<StayRegion>,
    pub home_work_distance_m: Option<f64>,
    pub work_visit_count: usize,
    pub score_exponent_used: u32,
}

/// Detection funnel counts, with both ratio bases printed so the
/// commuters/homes vs commuters/total ambiguity never bites a reader.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunnelReport {
    pub total_users: u64,
    pub users_with_home: u64,
    pub users_with_home_and_work: u64,
    pub home_ratio_of_total: f64,
    pub commuter_ratio_of_total: f64,
    pub commuter_ratio_of_homes: f64,
}

impl FunnelReport {
    pub fn from_counts(total: u64, with_home: u64, commuters: u64) -> Self {
        let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        FunnelReport {
            total_users: total,
            users_with_home: with_home,
            users_with_home_and_work: commuters,
            home_ratio_of_total: frac(with_home, total),
            commuter_ratio_of_total: frac(commuters, total),
            commuter_ratio_of_homes: frac(commuters, with_home),
        }
    }
}

/// Total overlap (seconds) of a stay with the nightly recurring window,
/// summed across every night the stay spans.
pub fn night_overlap(
    stay: &StayPoint,
    window: &ObservationWindow,
    night_start_hour: u32,
    night_end_hour: u32,
) -> i64 {
    let tz = window.tz;
    let arrival_date = to_local(stay.arrival_utc, window).date;
    let departure_date = to_local(stay.departure_utc, window).date;
    let mut total = 0i64;
    // the night starting the evening of `d` runs into the morning of d+1,
    // so the night starting the day before arrival can still overlap
    let mut d = arrival_date.pred_opt().unwrap();
    while d <= departure_date {
        let night_start = tz
            .from_local_datetime(&d.and_hms_opt(night_start_hour, 0, 0).unwrap())
            .earliest()
            .map(|t| t.timestamp());
        let night_end = tz
            .from_local_datetime(
                &d.succ_opt().unwrap().and_hms_opt(night_end_hour, 0, 0).unwrap(),
            )
            .earliest()
            .map(|t| t.timestamp());
        if let (Some(ns), Some(ne)) = (night_start, night_end) {
            let lo = stay.arrival_utc.max(ns);
            let hi = stay.departure_utc.min(ne);
            if hi > lo {
                total += hi - lo;
            }
        }
        d = d.succ_opt().unwrap();
    }
    total
}

/// Which home-filter criterion a stay satisfies. Used by tests to pin the
/// long-stay path, since a >24 h stay always also overlaps a night.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HomeEligibility {
    pub night_overlap_ok: bool,
    pub long_stay_ok: bool,
}

impl HomeEligibility {
    pub fn eligible(&self) -> bool {
        self.night_overlap_ok || self.long_stay_ok
    }
}

pub fn home_eligibility(
    stay: &StayPoint,
    window: &ObservationWindow,
    cfg: &PlacesConfig,
) -> HomeEligibility {
    let overlap = night_overlap(stay, window, cfg.night_start_hour, cfg.night_end_hour);
    HomeEligibility {
        night_overlap_ok: overlap >= cfg.min_night_overlap_s,
        long_stay_ok: stay.duration_s() > cfg.long_stay_s,
    }
}

/// Home = the most-visited region among stays with enough night overlap
/// or a long enough total duration; all days of week are eligible.
pub fn detect_home(
    stay_points: &[StayPoint],
    window: &ObservationWindow,
    cfg: &PlacesConfig,
) -> Option<StayRegion> {
    let survivors: Vec<StayPoint> = stay_points
        .iter()
        .filter(|s| home_eligibility(s, window, cfg).eligible())
        .cloned()
        .collect();
    let regions = cluster_regions(&survivors, cfg.linkage_threshold_m);
    regions.into_iter().max_by(|a, b| {
        a.visit_count
            .cmp(&b.visit_count)
            .then(b.first_arrival().cmp(&a.first_arrival()))
    })
}

/// Work = argmax of n^p * d over weekday working-hours arrival regions,
/// after dismissing near-home (d < walking distance) and rarely visited
/// (n < min_visits) candidates.
pub fn detect_work(
    stay_points: &[StayPoint],
    home: &StayRegion,
    window: &ObservationWindow,
    cfg: &PlacesConfig,
    exponent: u32,
) -> Option<StayRegion> {
    let survivors: Vec<StayPoint> = stay_points
        .iter()
        .filter(|s| {
            let local = to_local(s.arrival_utc, window);
            local.is_weekday
                && local.hour >= cfg.work_start_hour
                && local.hour < cfg.work_end_hour
        })
        .cloned()
        .collect();
    let regions = cluster_regions(&survivors, cfg.linkage_threshold_m);
    regions
        .into_iter()
        .filter_map(|r| {
            let d = haversine_distance(r.centroid, home.centroid);
            if d < cfg.walking_distance_m || r.visit_count < cfg.min_visits {
                return None;
            }
            let score = (r.visit_count as f64).powi(exponent as i32) * d;
            Some((score, r))
        })
        .max_by(|(sa, ra), (sb, rb)| {
            sa.total_cmp(sb)
                .then(ra.visit_count.cmp(&rb.visit_count))
                .then(rb.first_arrival().cmp(&ra.first_arrival()))
        })
        .map(|(_, r)| r)
}

/// Full home-then-work inference for one device.
pub fn infer_places(
    device_id: &str,
    stay_points: &[StayPoint],
    window: &ObservationWindow,
    cfg: &PlacesConfig,
) -> PlaceProfile {
    let home = detect_home(stay_points, window, cfg);
    let (work, distance, visits) = match &home {
        Some(h) => match detect_work(stay_points, h, window, cfg, cfg.score_exponent) {
            Some(w) => {
                let d = haversine_distance(h.centroid, w.centroid);
                let n = w.visit_count;
                (Some(w), Some(d), n)
            }
            None => (None, None, 0),
        },
        None => (None, None, 0),
    };
    PlaceProfile {
        device_id: device_id.to_string(),
        home,
        work,
        home_work_distance_m: distance,
        work_visit_count: visits,
        score_exponent_used: cfg.score_exponent,
    }
}

/// Fraction of home-detected devices whose selected work region moves
/// when the visit exponent changes from 1 to each alternative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub devices_with_home: u64,
    /// (exponent, fraction of devices whose work differs vs p = 1)
    pub differing_fraction: Vec<(u32, f64)>,
}

pub fn work_sensitivity<'a>(
    devices: impl IntoIterator<Item = (&'a str, &'a [StayPoint])>,
    window: &ObservationWindow,
    cfg: &PlacesConfig,
    alt_exponents: &[u32],
) -> SensitivityReport {
    let mut with_home = 0u64;
    let mut differs: Vec<u64> = vec![0; alt_exponents.len()];
    for (_, stays) in devices {
        let Some(home) = detect_home(stays, window, cfg) else { continue };
        with_home += 1;
        let base = detect_work(stays, &home, window, cfg, 1);
        for (k, &p) in alt_exponents.iter().enumerate() {
            let alt = detect_work(stays, &home, window, cfg, p);
            let moved = match (&base, &alt) {
                (Some(a), Some(b)) => haversine_distance(a.centroid, b.centroid) > 1.0,
                (None, None) => false,
                _ => true,
            };
            if moved {
                differs[k] += 1;
            }
        }
    }
    SensitivityReport {
        devices_with_home: with_home,
        differing_fraction: alt_exponents
            .iter()
            .zip(differs)
            .map(|(&p, c)| (p, if with_home == 0 { 0.0 } else { c as f64 / with_home as f64 }))
            .collect(),
    }
}
