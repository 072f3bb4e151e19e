//! Seeded synthetic commuter worlds with planted ground truth, used as
//! the end-to-end oracle for the pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoPoint, Polygon};
use crate::geojson::write_feature_collection;
use crate::ingest::{to_local, ObservationWindow, Ping};
use crate::places::PlaceProfile;
use crate::trips::ODMatrix;
use crate::validate::pearson;

/// Meters per degree of latitude at the grid scale used here.
const M_PER_DEG_LAT: f64 = 111_194.93;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub agent_count: usize,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub tract_size_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub ping_interval_mean_s: i64,
    pub ping_interval_jitter_s: i64,
    pub gps_noise_sigma_m: f64,
    pub p_commute: f64,
    pub p_home_detected_dropout: f64,
    pub min_home_work_separation_m: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            agent_count: 100,
            grid_rows: 5,
            grid_cols: 5,
            tract_size_m: 2_000.0,
            origin_lat: 29.50,
            origin_lon: -95.60,
            ping_interval_mean_s: 300,
            ping_interval_jitter_s: 120,
            gps_noise_sigma_m: 30.0,
            p_commute: 0.8,
            p_home_detected_dropout: 0.0,
            min_home_work_separation_m: 1_500.0,
            rng_seed: 17,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_commute", self.p_commute),
            ("p_home_detected_dropout", self.p_home_detected_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.gps_noise_sigma_m < 0.0 {
            return Err(Error::Config("gps_noise_sigma_m must be >= 0".into()));
        }
        let diag = self.tract_size_m
            * ((self.grid_rows as f64).powi(2) + (self.grid_cols as f64).powi(2)).sqrt();
        if self.min_home_work_separation_m >= diag {
            return Err(Error::InfeasibleGeometry(format!(
                "home-work separation {} m cannot fit inside a {}x{} grid of {} m tracts",
                self.min_home_work_separation_m,
                self.grid_rows,
                self.grid_cols,
                self.tract_size_m
            )));
        }
        Ok(())
    }

    fn deg_per_m_lon(&self) -> f64 {
        1.0 / (M_PER_DEG_LAT * self.origin_lat.to_radians().cos())
    }

    pub fn tract_id(row: u32, col: u32) -> String {
        format!("r{row}c{col}")
    }

    /// Tract polygons in row-major order, plus the city boundary covering
    /// the whole grid.
    pub fn grid_geometry(&self) -> (Vec<(String, Polygon)>, Polygon) {
        let dlat = self.tract_size_m / M_PER_DEG_LAT;
        let dlon = self.tract_size_m * self.deg_per_m_lon();
        let mut tracts = Vec::new();
        for row in 0..self.grid_rows {
            for col in 0..self.grid_cols {
                let lat0 = self.origin_lat + row as f64 * dlat;
                let lon0 = self.origin_lon + col as f64 * dlon;
                tracts.push((
                    Self::tract_id(row, col),
                    Polygon::rect(lat0, lon0, lat0 + dlat, lon0 + dlon),
                ));
            }
        }
        let city = Polygon::rect(
            self.origin_lat - dlat,
            self.origin_lon - dlon,
            self.origin_lat + (self.grid_rows as f64 + 1.0) * dlat,
            self.origin_lon + (self.grid_cols as f64 + 1.0) * dlon,
        );
        (tracts, city)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTruth {
    pub id: String,
    pub home: GeoPoint,
    pub work: GeoPoint,
    pub home_tract: String,
    pub work_tract: String,
    pub commuted_days: Vec<NaiveDate>,
    pub night_ping_count: u32,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub agents: Vec<AgentTruth>,
    pub weekday_count: u32,
    pub planted_od: ODMatrix,
}

impl GroundTruth {
    fn build_planted_od(agents: &[AgentTruth], weekday_count: u32) -> ODMatrix {
        let mut od = ODMatrix::default();
        for a in agents {
            let trips = a.commuted_days.len() as f64 / weekday_count as f64;
            od.add(&a.home_tract, &a.work_tract, trips);
        }
        od
    }
}

/// A point placed uniformly inside the tract, with a margin so GPS noise
/// cannot push the inferred place across a tract boundary.
fn place_in_tract(cfg: &SynthConfig, row: u32, col: u32, rng: &mut ChaCha8Rng) -> GeoPoint {
    let margin = 0.15;
    let u = rng.gen_range(margin..(1.0 - margin));
    let v = rng.gen_range(margin..(1.0 - margin));
    let dlat = cfg.tract_size_m / M_PER_DEG_LAT;
    let dlon = cfg.tract_size_m * cfg.deg_per_m_lon();
    GeoPoint {
        lat: cfg.origin_lat + (row as f64 + u) * dlat,
        lon: cfg.origin_lon + (col as f64 + v) * dlon,
    }
}

struct Presence {
    start_utc: i64,
    end_utc: i64,
    location: GeoPoint,
}

/// Generate the ping stream and ground truth for a seeded world. The same
/// seed always yields byte-identical output files.
pub fn generate(cfg: &SynthConfig, window: &ObservationWindow) -> Result<(Vec<Ping>, GroundTruth)> {
    cfg.validate()?;
    let tz = window.tz;
    let start_date = to_local(window.start_utc, window).date;
    let end_date = to_local(window.end_utc, window).date;

    let local_ts = |date: NaiveDate, hour: u32| -> i64 {
        tz.from_local_datetime(&date.and_hms_opt(hour, 0, 0).unwrap())
            .earliest()
            .map(|t| t.timestamp())
            .unwrap_or(i64::MIN)
    };

    let mut agents = Vec::with_capacity(cfg.agent_count);
    let mut pings = Vec::new();
    let noise = Normal::new(0.0, cfg.gps_noise_sigma_m.max(f64::MIN_POSITIVE)).unwrap();

    for idx in 0..cfg.agent_count {
        let id = format!("a{idx:05}");
        // per-agent RNG stream keyed by (seed, agent index) so agent
        // generation can shard without perturbing determinism
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(idx as u64 + 1);

        let home_row = rng.gen_range(0..cfg.grid_rows);
        let home_col = rng.gen_range(0..cfg.grid_cols);
        let home = place_in_tract(cfg, home_row, home_col, &mut rng);
        let mut work = None;
        for _ in 0..1000 {
            let row = rng.gen_range(0..cfg.grid_rows);
            let col = rng.gen_range(0..cfg.grid_cols);
            let candidate = place_in_tract(cfg, row, col, &mut rng);
            if haversine_distance(home, candidate) >= cfg.min_home_work_separation_m {
                work = Some((candidate, row, col));
                break;
            }
        }
        let Some((work, work_row, work_col)) = work else {
            return Err(Error::InfeasibleGeometry(format!(
                "could not place a work >= {} m from home for agent {id}",
                cfg.min_home_work_separation_m
            )));
        };

        let dropout = rng.gen_bool(cfg.p_home_detected_dropout);

        let mut commuted_days = Vec::new();
        let mut presences: Vec<Presence> = Vec::new();
        let mut d = start_date;
        while d <= end_date {
            let commuted = {
                let weekday = !matches!(
                    chrono::Datelike::weekday(&d),
                    chrono::Weekday::Sat | chrono::Weekday::Sun
                );
                weekday && rng.gen_bool(cfg.p_commute)
            };
            if commuted {
                commuted_days.push(d);
                presences.push(Presence {
                    start_utc: local_ts(d, 9),
                    end_utc: local_ts(d, 17),
                    location: work,
                });
            }
            if !dropout {
                // morning tail of last night's stay, then tonight's start
                presences.push(Presence {
                    start_utc: local_ts(d, 0),
                    end_utc: local_ts(d, 7),
                    location: home,
                });
                presences.push(Presence {
                    start_utc: local_ts(d, 20),
                    end_utc: local_ts(d.succ_opt().unwrap(), 0),
                    location: home,
                });
            }
            d = d.succ_opt().unwrap();
        }
        presences.sort_by_key(|p| p.start_utc);

        let mut night_ping_count = 0u32;
        for presence in &presences {
            let start = presence.start_utc.max(window.start_utc);
            let end = presence.end_utc.min(window.end_utc);
            let mut t = start + rng.gen_range(0..=cfg.ping_interval_jitter_s.max(1));
            while t < end {
                let (dn, de) = if cfg.gps_noise_sigma_m > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                let location = GeoPoint {
                    lat: presence.location.lat + dn / M_PER_DEG_LAT,
                    lon: presence.location.lon + de * cfg.deg_per_m_lon(),
                };
                let local = to_local(t, window);
                let hour = local.hour;
                if hour >= 20 || hour < 5 {
                    night_ping_count += 1;
                }
                pings.push(Ping { device_id: id.clone(), location, timestamp_utc: t });
                let jitter = cfg.ping_interval_jitter_s;
                t += (cfg.ping_interval_mean_s + rng.gen_range(-jitter..=jitter)).max(30);
            }
        }

        agents.push(AgentTruth {
            id,
            home,
            work,
            home_tract: SynthConfig::tract_id(home_row, home_col),
            work_tract: SynthConfig::tract_id(work_row, work_col),
            commuted_days,
            night_ping_count,
        });
    }

    let planted_od = GroundTruth::build_planted_od(&agents, window.weekday_count);
    Ok((
        pings,
        GroundTruth { agents, weekday_count: window.weekday_count, planted_od },
    ))
}

/// Write the world to disk: ping CSV, truth CSVs, and grid GeoJSON.
pub fn write_world(
    dir: &Path,
    cfg: &SynthConfig,
    pings: &[Ping],
    truth: &GroundTruth,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
    };

    {
        use std::io::Write as _;
        let path = dir.join("pings.csv");
        let file = std::fs::File::create(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut writer = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(writer, "device_id,latitude,longitude,timestamp").map_err(io_err)?;
        for p in pings {
            writeln!(
                writer,
                "{},{:.7},{:.7},{}",
                p.device_id, p.location.lat, p.location.lon, p.timestamp_utc
            )
            .map_err(io_err)?;
        }
        writer.flush().map_err(io_err)?;
    }

    let mut agents_csv = String::from(
        "id,home_lat,home_lon,work_lat,work_lon,home_tract,work_tract,night_ping_count,commuted_days\n",
    );
    for a in &truth.agents {
        let days: Vec<String> = a.commuted_days.iter().map(|d| d.to_string()).collect();
        agents_csv.push_str(&format!(
            "{},{:.7},{:.7},{:.7},{:.7},{},{},{},{}\n",
            a.id,
            a.home.lat,
            a.home.lon,
            a.work.lat,
            a.work.lon,
            a.home_tract,
            a.work_tract,
            a.night_ping_count,
            days.join(";")
        ));
    }
    write("agents.csv", agents_csv)?;

    let mut od_csv = String::from("origin_tract,dest_tract,avg_daily_trips\n");
    for ((o, d), v) in &truth.planted_od.cells {
        od_csv.push_str(&format!("{o},{d},{v}\n"));
    }
    write("planted_od.csv", od_csv)?;

    let (tracts, city) = cfg.grid_geometry();
    let tract_refs: Vec<(String, &Polygon)> =
        tracts.iter().map(|(id, poly)| (id.clone(), poly)).collect();
    write_feature_collection(&dir.join("tracts.geojson"), &tract_refs, "GEOID")?;
    write_feature_collection(&dir.join("city.geojson"), &[("city".into(), &city)], "GEOID")?;
    Ok(())
}

/// Read an agents.csv truth file back.
pub fn read_truth(dir: &Path, weekday_count: u32) -> Result<GroundTruth> {
    let path = dir.join("agents.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
    let mut agents = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let field = |i: usize| record.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad truth row in {path:?}")))
        };
        let commuted_days = record
            .get(8)
            .unwrap_or_default()
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<NaiveDate>()
                    .map_err(|_| Error::Config(format!("bad date {s} in {path:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        agents.push(AgentTruth {
            id: field(0),
            home: GeoPoint::new(num(1)?, num(2)?)?,
            work: GeoPoint::new(num(3)?, num(4)?)?,
            home_tract: field(5),
            work_tract: field(6),
            night_ping_count: num(7)? as u32,
            commuted_days,
        });
    }
    let planted_od = GroundTruth::build_planted_od(&agents, weekday_count);
    Ok(GroundTruth { agents, weekday_count, planted_od })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub agents_total: u64,
    /// Agents with fewer than `min_night_pings`; excluded from the
    /// conditional home-recovery denominator.
    pub agents_unrecoverable: u64,
    pub home_recovered: u64,
    pub home_recovery_fraction: f64,
    pub work_recovered: u64,
    /// Fraction of home-recovered agents whose work also matched.
    pub work_recovery_fraction: f64,
    pub mean_commute_day_abs_error: f64,
    pub od_pearson_r: Option<f64>,
}

/// Score pipeline outputs against planted truth. `estimated_od` pairs
/// with the planted OD via union-of-nonzero cells.
pub fn score_recovery(
    truth: &GroundTruth,
    profiles: &[PlaceProfile],
    commute_days: &BTreeMap<String, u32>,
    estimated_od: &ODMatrix,
    match_radius_m: f64,
    min_night_pings: u32,
) -> Result<RecoveryReport> {
    let by_id: BTreeMap<&str, &AgentTruth> =
        truth.agents.iter().map(|a| (a.id.as_str(), a)).collect();
    for p in profiles {
        if !by_id.contains_key(p.device_id.as_str()) {
            return Err(Error::IdMismatch(p.device_id.clone()));
        }
    }
    let profile_by_id: BTreeMap<&str, &PlaceProfile> =
        profiles.iter().map(|p| (p.device_id.as_str(), p)).collect();

    let mut unrecoverable = 0u64;
    let mut recoverable = 0u64;
    let mut home_hits = 0u64;
    let mut work_hits = 0u64;
    let mut day_err_sum = 0f64;
    let mut day_err_n = 0u64;

    for agent in &truth.agents {
        if agent.night_ping_count < min_night_pings {
            unrecoverable += 1;
            continue;
        }
        recoverable += 1;
        let profile = profile_by_id.get(agent.id.as_str());
        let home_hit = profile
            .and_then(|p| p.home.as_ref())
            .is_some_and(|h| haversine_distance(h.centroid, agent.home) <= match_radius_m);
        if home_hit {
            home_hits += 1;
            let work_hit = profile
                .and_then(|p| p.work.as_ref())
                .is_some_and(|w| haversine_distance(w.centroid, agent.work) <= match_radius_m);
            if work_hit {
                work_hits += 1;
            }
        }
        if let Some(&estimated) = commute_days.get(&agent.id) {
            day_err_sum += (estimated as f64 - agent.commuted_days.len() as f64).abs();
            day_err_n += 1;
        }
    }

    // union_nonzero pairing of planted vs estimated OD
    let keys: std::collections::BTreeSet<&(String, String)> = truth
        .planted_od
        .cells
        .keys()
        .chain(estimated_od.cells.keys())
        .collect();
    let x: Vec<f64> = keys
        .iter()
        .map(|k| truth.planted_od.cells.get(*k).copied().unwrap_or(0.0))
        .collect();
    let y: Vec<f64> = keys
        .iter()
        .map(|k| estimated_od.cells.get(*k).copied().unwrap_or(0.0))
        .collect();
    let od_r = pearson(&x, &y).ok().map(|(r, _)| r);

    let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(RecoveryReport {
        agents_total: truth.agents.len() as u64,
        agents_unrecoverable: unrecoverable,
        home_recovered: home_hits,
        home_recovery_fraction: frac(home_hits, recoverable),
        work_recovered: work_hits,
        work_recovery_fraction: frac(work_hits, home_hits),
        mean_commute_day_abs_error: if day_err_n == 0 {
            0.0
        } else {
            day_err_sum / day_err_n as f64
        },
        od_pearson_r: od_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> ObservationWindow {
        ObservationWindow::from_local_dates(
            NaiveDate::from_ymd_opt(2017, 8, 1).unwrap(),
            NaiveDate::from_ymd_opt(2017, 8, 15).unwrap(),
            "America/Chicago",
        )
        .unwrap()
    }

    #[test]
    fn zero_agents_zero_output() {
        let cfg = SynthConfig { agent_count: 0, ..Default::default() };
        let (pings, truth) = generate(&cfg, &window()).unwrap();
        assert!(pings.is_empty());
        assert!(truth.agents.is_empty());
        assert!(truth.planted_od.cells.is_empty());
    }

    #[test]
    fn same_seed_byte_identical_files() {
        let cfg = SynthConfig { agent_count: 5, ..Default::default() };
        let w = window();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let (pings, truth) = generate(&cfg, &w).unwrap();
            write_world(dir.path(), &cfg, &pings, &truth).unwrap();
        }
        for name in ["pings.csv", "agents.csv", "planted_od.csv", "tracts.geojson"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical-seed runs");
        }
    }

    #[test]
    fn commuted_day_count_matches_binomial_expectation() {
        let cfg = SynthConfig { agent_count: 100, p_commute: 0.8, ..Default::default() };
        let w = window();
        let (_, truth) = generate(&cfg, &w).unwrap();
        let mean = truth
            .agents
            .iter()
            .map(|a| a.commuted_days.len() as f64)
            .sum::<f64>()
            / truth.agents.len() as f64;
        let n = w.weekday_count as f64;
        let expected = 0.8 * n;
        // 3 sigma of the mean of 100 binomial draws
        let sigma = (n * 0.8 * 0.2 / 100.0).sqrt();
        assert!((mean - expected).abs() <= 3.0 * sigma, "mean {mean} vs {expected}");
    }

    #[test]
    fn planted_od_conserves_trips() {
        let cfg = SynthConfig { agent_count: 50, ..Default::default() };
        let w = window();
        let (_, truth) = generate(&cfg, &w).unwrap();
        let expected: f64 = truth
            .agents
            .iter()
            .map(|a| a.commuted_days.len() as f64 / w.weekday_count as f64)
            .sum();
        assert!((truth.planted_od.total() - expected).abs() < 1e-9);
    }

    #[test]
    fn works_are_separated_from_homes() {
        let cfg = SynthConfig { agent_count: 50, ..Default::default() };
        let (_, truth) = generate(&cfg, &window()).unwrap();
        for a in &truth.agents {
            assert!(haversine_distance(a.home, a.work) >= 1_500.0);
        }
    }

    #[test]
    fn infeasible_separation_is_fatal() {
        let cfg = SynthConfig {
            grid_rows: 1,
            grid_cols: 1,
            tract_size_m: 500.0,
            min_home_work_separation_m: 5_000.0,
            ..Default::default()
        };
        assert!(matches!(
            generate(&cfg, &window()),
            Err(Error::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn dropout_agents_have_no_night_pings() {
        let cfg = SynthConfig {
            agent_count: 40,
            p_home_detected_dropout: 0.5,
            ..Default::default()
        };
        let (_, truth) = generate(&cfg, &window()).unwrap();
        let dropped = truth.agents.iter().filter(|a| a.night_ping_count == 0).count();
        assert!(dropped > 0, "expected some dropout at p = 0.5");
    }

    #[test]
    fn identity_od_scores_r_one() {
        let cfg = SynthConfig { agent_count: 30, ..Default::default() };
        let w = window();
        let (_, truth) = generate(&cfg, &w).unwrap();
        let report =
            score_recovery(&truth, &[], &BTreeMap::new(), &truth.planted_od, 250.0, 5).unwrap();
        assert!((report.od_pearson_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truth_round_trips_through_csv() {
        let cfg = SynthConfig { agent_count: 8, ..Default::default() };
        let w = window();
        let (pings, truth) = generate(&cfg, &w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_world(dir.path(), &cfg, &pings, &truth).unwrap();
        let back = read_truth(dir.path(), w.weekday_count).unwrap();
        assert_eq!(back.agents.len(), truth.agents.len());
        for (a, b) in truth.agents.iter().zip(&back.agents) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.home_tract, b.home_tract);
            assert_eq!(a.commuted_days, b.commuted_days);
            assert!(haversine_distance(a.home, b.home) < 0.05);
        }
        assert_eq!(back.planted_od.cells.len(), truth.planted_od.cells.len());
    }
}
