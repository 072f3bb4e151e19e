//! Stage orchestration. Every stage reads the previous stage's CSV
//! artifacts and writes its own, so each intermediate is inspectable and
//! any stage can run standalone on hand-written inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::ingest::{parse_pings_file, ObservationWindow};
use crate::par::par_map;
use crate::places::{infer_places, work_sensitivity, FunnelReport, PlaceProfile};
use crate::region::StayRegion;
use crate::routing::{
    route_all, HttpBackend, OfflineBackend, RouteBackend, RouteCache, RoutePair, TravelMode,
};
use crate::stay::{extract_stay_points, StayPoint};
use crate::synth::{self, score_recovery};
use crate::trips::{
    avg_daily_trips, build_od, count_commute_days, load_and_filter_tracts, CommuterFlow, ODMatrix,
};
use crate::validate::{commute_summary, compare_od, FlowReference, PairSelection, RoutedCommute};

/// Collects a stage's artifacts under a `.partial` suffix and renames
/// them into place only when the whole stage succeeded, so a failed run
/// never clobbers good outputs.
pub struct ArtifactSet {
    dir: PathBuf,
    pending: Vec<String>,
}

impl ArtifactSet {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(ArtifactSet { dir: dir.to_path_buf(), pending: Vec::new() })
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(format!("{name}.partial"));
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.pending.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Json { path: name.into(), source: e })?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn commit(self) -> Result<Vec<String>> {
        for name in &self.pending {
            let from = self.dir.join(format!("{name}.partial"));
            let to = self.dir.join(name);
            std::fs::rename(&from, &to)
                .map_err(|e| Error::io(to.display().to_string(), e))?;
        }
        Ok(self.pending)
    }
}

pub type StaysByDevice = BTreeMap<String, Vec<StayPoint>>;

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::StageInput(format!("{what} is not configured")))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::StageInput(format!("{what} not found at {}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// extract-stays

pub fn run_extract_stays(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let window = cfg.observation_window()?;
    let pings_path = existing(require(&cfg.input.pings, "input.pings")?, "ping file")?;
    let (trajectories, rejections) = parse_pings_file(&pings_path, &cfg.schema, &window)?;

    let devices: Vec<(&String, &Vec<crate::ingest::Ping>)> = trajectories.iter().collect();
    let stays: Vec<(String, Vec<StayPoint>)> = par_map(&devices, |(id, pings)| {
        (
            (*id).clone(),
            extract_stay_points(
                pings,
                cfg.stay.dist_threshold_m,
                cfg.stay.time_threshold_s,
                cfg.stay.radius_mode,
            ),
        )
    });

    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    let mut csv = String::from("device_id,lat,lon,arrival_utc,departure_utc,member_count\n");
    for (id, device_stays) in &stays {
        for s in device_stays {
            writeln!(
                csv,
                "{id},{:.7},{:.7},{},{},{}",
                s.centroid.lat, s.centroid.lon, s.arrival_utc, s.departure_utc, s.member_count
            )
            .unwrap();
        }
    }
    out.write("stays.csv", &csv)?;
    out.write_json("rejections.json", &rejections)?;
    out.commit()
}

pub fn read_stays_csv(path: &Path) -> Result<StaysByDevice> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
    let mut out: StaysByDevice = BTreeMap::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let num = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad stays row in {path:?}")))
        };
        let device = record.get(0).unwrap_or_default().to_string();
        let centroid = GeoPoint::new(num(1)?, num(2)?)?;
        let stays = out.entry(device).or_default();
        let index = stays.len();
        stays.push(StayPoint {
            centroid,
            arrival_utc: num(3)? as i64,
            departure_utc: num(4)? as i64,
            member_count: num(5)? as usize,
            anchor: centroid,
            start_index: index,
            end_index: index + 1,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// infer-places

pub fn infer_all_places(
    stays: &StaysByDevice,
    window: &ObservationWindow,
    cfg: &PipelineConfig,
) -> Vec<PlaceProfile> {
    let devices: Vec<(&String, &Vec<StayPoint>)> = stays.iter().collect();
    par_map(&devices, |(id, device_stays)| {
        infer_places(id, device_stays, window, &cfg.places)
    })
}

pub fn run_infer_places(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let window = cfg.observation_window()?;
    let stays_path = existing(cfg.output_dir.join("stays.csv"), "stays.csv")?;
    let stays = read_stays_csv(&stays_path)?;
    let profiles = infer_all_places(&stays, &window, cfg);

    let total = profiles.len() as u64;
    let with_home = profiles.iter().filter(|p| p.home.is_some()).count() as u64;
    let commuters = profiles.iter().filter(|p| p.work.is_some()).count() as u64;
    let funnel = FunnelReport::from_counts(total, with_home, commuters);

    let sensitivity = work_sensitivity(
        stays.iter().map(|(id, s)| (id.as_str(), s.as_slice())),
        &window,
        &cfg.places,
        &[2, 3],
    );

    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    out.write("places.csv", &places_csv(&profiles))?;
    out.write_json("funnel.json", &funnel)?;
    out.write_json("sensitivity.json", &sensitivity)?;
    out.commit()
}

pub fn places_csv(profiles: &[PlaceProfile]) -> String {
    let mut csv = String::from("device_id,home_lat,home_lon,work_lat,work_lon,n,d\n");
    for p in profiles {
        let Some(home) = &p.home else { continue };
        match &p.work {
            Some(work) => writeln!(
                csv,
                "{},{:.7},{:.7},{:.7},{:.7},{},{:.1}",
                p.device_id,
                home.centroid.lat,
                home.centroid.lon,
                work.centroid.lat,
                work.centroid.lon,
                p.work_visit_count,
                p.home_work_distance_m.unwrap_or(0.0)
            )
            .unwrap(),
            None => writeln!(
                csv,
                "{},{:.7},{:.7},,,,",
                p.device_id, home.centroid.lat, home.centroid.lon
            )
            .unwrap(),
        }
    }
    csv
}

/// A places.csv row reduced to what downstream stages need.
#[derive(Debug, Clone)]
pub struct PlaceRow {
    pub device_id: String,
    pub home: GeoPoint,
    pub work: Option<GeoPoint>,
}

pub fn read_places_csv(path: &Path) -> Result<Vec<PlaceRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let num = |i: usize| -> Option<f64> { record.get(i).and_then(|s| s.parse().ok()) };
        let (Some(hlat), Some(hlon)) = (num(1), num(2)) else {
            return Err(Error::Config(format!("bad places row in {path:?}")));
        };
        let work = match (num(3), num(4)) {
            (Some(wlat), Some(wlon)) => Some(GeoPoint::new(wlat, wlon)?),
            _ => None,
        };
        out.push(PlaceRow {
            device_id: record.get(0).unwrap_or_default().to_string(),
            home: GeoPoint::new(hlat, hlon)?,
            work,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// build-od

pub fn commuter_flows(
    places: &[PlaceRow],
    stays: &StaysByDevice,
    window: &ObservationWindow,
    cfg: &PipelineConfig,
) -> Result<Vec<CommuterFlow>> {
    let commuters: Vec<&PlaceRow> = places.iter().filter(|p| p.work.is_some()).collect();
    let empty: Vec<StayPoint> = Vec::new();
    let days: Vec<u32> = par_map(&commuters, |p| {
        let device_stays = stays.get(&p.device_id).unwrap_or(&empty);
        count_commute_days(
            device_stays,
            p.work.unwrap(),
            cfg.trips.work_presence_radius_m,
            window,
        )
    });
    commuters
        .iter()
        .zip(days)
        .map(|(p, commute_days)| {
            Ok(CommuterFlow {
                device_id: p.device_id.clone(),
                home: p.home,
                work: p.work.unwrap(),
                commute_days,
                weekday_count: window.weekday_count,
                avg_daily_trips: avg_daily_trips(commute_days, window.weekday_count)?,
            })
        })
        .collect()
}

pub fn od_csv(od: &ODMatrix) -> String {
    let mut csv = String::from("origin_tract,dest_tract,avg_daily_trips\n");
    for ((o, d), v) in &od.cells {
        writeln!(csv, "{o},{d},{v}").unwrap();
    }
    csv
}

pub fn read_od_csv(path: &Path) -> Result<ODMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
    let mut od = ODMatrix::default();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let trips: f64 = record
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad OD row in {path:?}")))?;
        od.add(record.get(0).unwrap_or_default(), record.get(1).unwrap_or_default(), trips);
    }
    Ok(od)
}

pub fn run_build_od(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let window = cfg.observation_window()?;
    let stays = read_stays_csv(&existing(cfg.output_dir.join("stays.csv"), "stays.csv")?)?;
    let places = read_places_csv(&existing(cfg.output_dir.join("places.csv"), "places.csv")?)?;
    let tracts_path = existing(require(&cfg.input.tracts, "input.tracts")?, "tract GeoJSON")?;
    let city_path = existing(require(&cfg.input.city, "input.city")?, "city GeoJSON")?;
    let tracts = load_and_filter_tracts(
        &tracts_path,
        &city_path,
        cfg.trips.min_tract_fraction,
        cfg.trips.grid_resolution,
        &cfg.trips.tract_id_property,
    )?;
    let flows = commuter_flows(&places, &stays, &window, cfg)?;
    let (od, records, exclusions) = build_od(&flows, &tracts)?;

    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    out.write("od.csv", &od_csv(&od))?;
    let mut commuters = String::from(
        "device_id,home_tract,work_tract,commute_days,weekday_count,avg_daily_trips\n",
    );
    for r in &records {
        writeln!(
            commuters,
            "{},{},{},{},{},{}",
            r.device_id, r.home_tract, r.work_tract, r.commute_days, r.weekday_count,
            r.avg_daily_trips
        )
        .unwrap();
    }
    out.write("commuters.csv", &commuters)?;
    out.write_json("exclusions.json", &exclusions)?;
    out.commit()
}

// ---------------------------------------------------------------------------
// validate

pub fn run_validate(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let od = read_od_csv(&existing(cfg.output_dir.join("od.csv"), "od.csv")?)?;
    let ref_path = existing(
        require(&cfg.input.reference_flows, "input.reference_flows")?,
        "reference flow CSV",
    )?;
    let reference = FlowReference::from_csv(&ref_path)?;
    let mode = PairSelection::parse(&cfg.validation.pair_selection)?;
    let report = compare_od(&od, &reference, mode)?;

    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    let mut scatter = String::from("origin_tract,dest_tract,gps_trips,ref_trips,ref_stderr\n");
    for row in &report.scatter {
        writeln!(
            scatter,
            "{},{},{},{},{}",
            row.origin,
            row.dest,
            row.gps_trips,
            row.ref_trips,
            row.ref_stderr.map(|s| s.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    out.write("scatter.csv", &scatter)?;
    let mut slim = report.clone();
    slim.scatter.clear(); // full scatter lives in scatter.csv
    out.write_json("validation.json", &slim)?;
    out.commit()
}

// ---------------------------------------------------------------------------
// route-stats

fn make_backend(cfg: &PipelineConfig) -> Result<Box<dyn RouteBackend>> {
    match cfg.routing.backend.as_str() {
        "offline" => Ok(Box::new(OfflineBackend {
            detour_factor: cfg.routing.detour_factor,
            car_speed_mps: cfg.routing.car_speed_mps,
            transit_speed_mps: cfg.routing.transit_speed_mps,
            car_overhead_s: cfg.routing.car_overhead_s,
            transit_overhead_s: cfg.routing.transit_overhead_s,
        })),
        "external" => {
            if cfg.routing.endpoint.is_empty() {
                return Err(Error::Config("routing.endpoint required for external backend".into()));
            }
            Ok(Box::new(HttpBackend::new(
                cfg.routing.endpoint.clone(),
                Some(cfg.routing.api_key_env.as_str()),
                cfg.routing.depart_local.clone(),
                std::time::Duration::from_secs(cfg.routing.timeout_s),
                std::time::Duration::from_millis(cfg.routing.min_request_interval_ms),
            )?))
        }
        other => Err(Error::Config(format!("unknown routing backend {other}"))),
    }
}

#[derive(Debug, Serialize)]
struct RouteStatsReport {
    backend: String,
    summaries: Vec<crate::validate::ModeSummary>,
    routable_fraction_by_mode: BTreeMap<String, f64>,
    failed_requests: usize,
}

pub fn run_route_stats(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let places = read_places_csv(&existing(cfg.output_dir.join("places.csv"), "places.csv")?)?;
    let pairs: Vec<RoutePair> = places
        .iter()
        .filter_map(|p| {
            p.work.map(|work| RoutePair {
                device_id: p.device_id.clone(),
                origin: p.home,
                dest: work,
            })
        })
        .collect();
    let modes: Vec<TravelMode> = cfg
        .routing
        .modes
        .iter()
        .map(|m| TravelMode::parse(m))
        .collect::<Result<_>>()?;
    let backend = make_backend(cfg)?;
    let mut cache = RouteCache::open(&cfg.output_dir.join("route_cache.csv"));
    let (results, errors) = route_all(&pairs, &modes, backend.as_ref(), &mut cache);

    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    let mut csv = String::from("device_id,mode,distance_m,duration_s,routable\n");
    for r in &results {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.device_id,
            r.estimate.mode.as_str(),
            r.estimate.distance_m,
            r.estimate.duration_s,
            r.estimate.routable
        )
        .unwrap();
    }
    out.write("routes.csv", &csv)?;

    let routed: Vec<RoutedCommute> = results
        .iter()
        .filter(|r| r.estimate.routable)
        .map(|r| RoutedCommute {
            device_id: r.device_id.clone(),
            mode: r.estimate.mode.as_str().to_string(),
            distance_m: r.estimate.distance_m,
            duration_s: r.estimate.duration_s,
        })
        .collect();
    let mut routable_fraction = BTreeMap::new();
    for &mode in &modes {
        let all = results.iter().filter(|r| r.estimate.mode == mode).count();
        let ok = results
            .iter()
            .filter(|r| r.estimate.mode == mode && r.estimate.routable)
            .count();
        if all > 0 {
            routable_fraction.insert(mode.as_str().to_string(), ok as f64 / all as f64);
        }
    }
    let report = RouteStatsReport {
        backend: backend.name().to_string(),
        summaries: commute_summary(&routed, cfg.routing.histogram_bin_s),
        routable_fraction_by_mode: routable_fraction,
        failed_requests: errors.failed_pairs.len(),
    };
    out.write_json("route_summary.json", &report)?;
    out.commit()
}

// ---------------------------------------------------------------------------
// synth

pub fn run_synth(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let window = cfg.observation_window()?;
    let (pings, truth) = synth::generate(&cfg.synth, &window)?;
    synth::write_world(&cfg.output_dir, &cfg.synth, &pings, &truth)?;
    Ok(vec![
        "pings.csv".into(),
        "agents.csv".into(),
        "planted_od.csv".into(),
        "tracts.geojson".into(),
        "city.geojson".into(),
    ])
}

// ---------------------------------------------------------------------------
// sweep

pub fn run_sweep(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let window = cfg.observation_window()?;
    let pings_path = existing(require(&cfg.input.pings, "input.pings")?, "ping file")?;
    let (trajectories, _) = parse_pings_file(&pings_path, &cfg.schema, &window)?;
    let tracts_path = existing(require(&cfg.input.tracts, "input.tracts")?, "tract GeoJSON")?;
    let city_path = existing(require(&cfg.input.city, "input.city")?, "city GeoJSON")?;
    let tracts = load_and_filter_tracts(
        &tracts_path,
        &city_path,
        cfg.trips.min_tract_fraction,
        cfg.trips.grid_resolution,
        &cfg.trips.tract_id_property,
    )?;

    let mut table = String::from(
        "time_threshold_s,score_exponent,devices,users_with_home,commuters,od_cells,od_total\n",
    );
    let devices: Vec<(&String, &Vec<crate::ingest::Ping>)> = trajectories.iter().collect();
    for &time_threshold in &cfg.sweep.time_thresholds_s {
        let stays_vec: Vec<(String, Vec<StayPoint>)> = par_map(&devices, |(id, pings)| {
            (
                (*id).clone(),
                extract_stay_points(
                    pings,
                    cfg.stay.dist_threshold_m,
                    time_threshold,
                    cfg.stay.radius_mode,
                ),
            )
        });
        let stays: StaysByDevice = stays_vec.into_iter().collect();
        for &exponent in &cfg.sweep.exponents {
            let mut variant = cfg.clone();
            variant.places.score_exponent = exponent;
            let profiles = infer_all_places(&stays, &window, &variant);
            let with_home = profiles.iter().filter(|p| p.home.is_some()).count();
            let commuters = profiles.iter().filter(|p| p.work.is_some()).count();
            let rows: Vec<PlaceRow> = profiles
                .iter()
                .filter_map(|p| {
                    p.home.as_ref().map(|h| PlaceRow {
                        device_id: p.device_id.clone(),
                        home: h.centroid,
                        work: p.work.as_ref().map(|w| w.centroid),
                    })
                })
                .collect();
            let flows = commuter_flows(&rows, &stays, &window, &variant)?;
            let (od, _, _) = build_od(&flows, &tracts)?;
            writeln!(
                table,
                "{},{},{},{},{},{},{}",
                time_threshold,
                exponent,
                profiles.len(),
                with_home,
                commuters,
                od.cells.len(),
                od.total()
            )
            .unwrap();
        }
    }
    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    out.write("sweep.csv", &table)?;
    out.commit()
}

// ---------------------------------------------------------------------------
// all

fn default_input(cfg: &mut PipelineConfig) {
    let candidates: [(&mut Option<PathBuf>, &str); 4] = [
        (&mut cfg.input.pings, "pings.csv"),
        (&mut cfg.input.tracts, "tracts.geojson"),
        (&mut cfg.input.city, "city.geojson"),
        (&mut cfg.input.reference_flows, "planted_od.csv"),
    ];
    for (slot, name) in candidates {
        if slot.is_none() {
            let candidate = cfg.output_dir.join(name);
            if candidate.exists() {
                *slot = Some(candidate);
            }
        }
    }
}

pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let mut cfg = cfg.clone();
    default_input(&mut cfg);
    let mut artifacts = Vec::new();
    artifacts.extend(run_extract_stays(&cfg)?);
    artifacts.extend(run_infer_places(&cfg)?);
    artifacts.extend(run_build_od(&cfg)?);
    if cfg.input.reference_flows.is_some() {
        artifacts.extend(run_validate(&cfg)?);
    }
    artifacts.extend(run_route_stats(&cfg)?);

    // when planted truth is available, score recovery against it
    let truth_path = cfg.output_dir.join("agents.csv");
    if truth_path.exists() {
        let window = cfg.observation_window()?;
        let truth = synth::read_truth(&cfg.output_dir, window.weekday_count)?;
        let stays = read_stays_csv(&cfg.output_dir.join("stays.csv"))?;
        let profiles = infer_all_places(&stays, &window, &cfg);
        let places = read_places_csv(&cfg.output_dir.join("places.csv"))?;
        let mut commute_days: BTreeMap<String, u32> = BTreeMap::new();
        let empty: Vec<StayPoint> = Vec::new();
        for p in &places {
            if let Some(work) = p.work {
                let device_stays = stays.get(&p.device_id).unwrap_or(&empty);
                commute_days.insert(
                    p.device_id.clone(),
                    count_commute_days(
                        device_stays,
                        work,
                        cfg.trips.work_presence_radius_m,
                        &window,
                    ),
                );
            }
        }
        let od = read_od_csv(&cfg.output_dir.join("od.csv"))?;
        let recovery = score_recovery(&truth, &profiles, &commute_days, &od, 250.0, 5)?;
        let mut out = ArtifactSet::new(&cfg.output_dir)?;
        out.write_json("recovery.json", &recovery)?;
        artifacts.extend(out.commit()?);
    }

    write_run_metadata(&cfg, &mut artifacts)?;
    Ok(artifacts)
}

/// Config echo plus a manifest of artifact digests.
pub fn write_run_metadata(cfg: &PipelineConfig, artifacts: &mut Vec<String>) -> Result<()> {
    let mut out = ArtifactSet::new(&cfg.output_dir)?;
    out.write("config_echo.toml", &cfg.to_toml())?;
    artifacts.push("config_echo.toml".to_string());
    artifacts.sort();
    artifacts.dedup();

    #[derive(Serialize)]
    struct ManifestEntry {
        path: String,
        sha256: String,
    }
    let mut entries = Vec::new();
    for name in artifacts.iter() {
        let path = if name == "config_echo.toml" {
            cfg.output_dir.join("config_echo.toml.partial")
        } else {
            cfg.output_dir.join(name)
        };
        if let Ok(bytes) = std::fs::read(&path) {
            let digest = Sha256::digest(&bytes);
            entries.push(ManifestEntry {
                path: name.clone(),
                sha256: format!("{digest:x}"),
            });
        }
    }
    out.write_json("run_manifest.json", &entries)?;
    out.commit()?;
    artifacts.push("run_manifest.json".to_string());
    Ok(())
}

// ---------------------------------------------------------------------------

/// The profile-to-region bridge used by recovery scoring tests.
pub fn profile_region_centroid(region: &Option<StayRegion>) -> Option<GeoPoint> {
    region.as_ref().map(|r| r.centroid)
}
