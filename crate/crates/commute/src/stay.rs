//! Stay-point extraction: stationary episodes exceeding a time threshold
//! within a distance threshold, scanned from an anchor ping.

use serde::{Deserialize, Serialize};

use crate::geo::{haversine_distance, GeoPoint};
use crate::ingest::Ping;

/// One stationary episode of a device.
#[derive(Debug, Clone, PartialEq)]
pub struct StayPoint {
    pub centroid: GeoPoint,
    pub arrival_utc: i64,
    pub departure_utc: i64,
    pub member_count: usize,
    /// Location of the anchor ping the radius was measured from.
    pub anchor: GeoPoint,
    /// Half-open member index range into the source trajectory.
    pub start_index: usize,
    pub end_index: usize,
}

impl StayPoint {
    pub fn duration_s(&self) -> i64 {
        self.departure_utc - self.arrival_utc
    }
}

/// How the distance threshold is interpreted when growing a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// Distance measured from the group's first (anchor) ping.
    #[default]
    Anchor,
    /// Every pair of group members must be within the threshold.
    Pairwise,
}

/// Anchor-scan stay-point extraction over a time-ordered trajectory.
///
/// The scan keeps an anchor `i` and advances `j` while `p_j` stays within
/// `dist_threshold_m` of the group (anchor or pairwise, per `mode`). On a
/// radius break at `j`: if the group `p_i..p_{j-1}` spans at least
/// `time_threshold_s` it is emitted and the anchor jumps to `j`; otherwise
/// the anchor advances by a single ping so one outlier cannot destroy a
/// real stay. The trajectory end closes any qualifying open group.
pub fn extract_stay_points(
    trajectory: &[Ping],
    dist_threshold_m: f64,
    time_threshold_s: i64,
    mode: RadiusMode,
) -> Vec<StayPoint> {
    assert!(dist_threshold_m > 0.0 && time_threshold_s > 0);
    let n = trajectory.len();
    let mut stays = Vec::new();
    let mut i = 0;
    while i < n {
        let anchor = trajectory[i].location;
        let mut j = i + 1;
        while j < n {
            let within = match mode {
                RadiusMode::Anchor => {
                    haversine_distance(anchor, trajectory[j].location) <= dist_threshold_m
                }
                RadiusMode::Pairwise => trajectory[i..j].iter().all(|p| {
                    haversine_distance(p.location, trajectory[j].location) <= dist_threshold_m
                }),
            };
            if !within {
                break;
            }
            j += 1;
        }
        // group is p_i..p_{j-1}
        let duration = trajectory[j - 1].timestamp_utc - trajectory[i].timestamp_utc;
        if duration >= time_threshold_s {
            stays.push(make_stay(trajectory, i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    stays
}

fn make_stay(trajectory: &[Ping], start: usize, end: usize) -> StayPoint {
    let members = &trajectory[start..end];
    let k = members.len() as f64;
    let lat = members.iter().map(|p| p.location.lat).sum::<f64>() / k;
    let lon = members.iter().map(|p| p.location.lon).sum::<f64>() / k;
    StayPoint {
        centroid: GeoPoint { lat, lon },
        arrival_utc: members[0].timestamp_utc,
        departure_utc: members[members.len() - 1].timestamp_utc,
        member_count: members.len(),
        anchor: members[0].location,
        start_index: start,
        end_index: end,
    }
}
