//! Home-to-work route estimation: a backend-neutral contract with an
//! offline deterministic estimator, an HTTP client, and an on-disk cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TravelMode {
    Car,
    Transit,
}

impl TravelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TravelMode::Car => "car",
            TravelMode::Transit => "transit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(TravelMode::Car),
            "transit" => Ok(TravelMode::Transit),
            other => Err(Error::Config(format!("unknown travel mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteEstimate {
    pub mode: TravelMode,
    pub distance_m: f64,
    pub duration_s: f64,
    pub routable: bool,
}

/// Anything that can answer a single (origin, dest, mode) request.
/// Departure is fixed by config (morning peak) and carried by the backend.
pub trait RouteBackend {
    fn route(&self, origin: GeoPoint, dest: GeoPoint, mode: TravelMode) -> Result<RouteEstimate>;
    fn name(&self) -> &'static str;
}

/// Deterministic fallback estimator: great-circle distance scaled by a
/// detour factor, at a fixed per-mode speed plus a per-mode overhead.
/// The parameters are engineering placeholders, not observed values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineBackend {
    pub detour_factor: f64,
    pub car_speed_mps: f64,
    pub transit_speed_mps: f64,
    pub car_overhead_s: f64,
    pub transit_overhead_s: f64,
}

impl Default for OfflineBackend {
    fn default() -> Self {
        OfflineBackend {
            detour_factor: 1.4,
            car_speed_mps: 12.5,
            transit_speed_mps: 6.0,
            car_overhead_s: 0.0,
            transit_overhead_s: 600.0,
        }
    }
}

impl RouteBackend for OfflineBackend {
    fn route(&self, origin: GeoPoint, dest: GeoPoint, mode: TravelMode) -> Result<RouteEstimate> {
        let distance = haversine_distance(origin, dest) * self.detour_factor;
        let (speed, overhead) = match mode {
            TravelMode::Car => (self.car_speed_mps, self.car_overhead_s),
            TravelMode::Transit => (self.transit_speed_mps, self.transit_overhead_s),
        };
        Ok(RouteEstimate {
            mode,
            distance_m: distance,
            duration_s: distance / speed + overhead,
            routable: true,
        })
    }

    fn name(&self) -> &'static str {
        "offline"
    }
}

/// External routing service client. The endpoint is expected to answer
/// GET `?olat=&olon=&dlat=&dlon=&mode=&depart=` with JSON
/// `{"distance_m": f, "duration_s": f, "routable": b}`.
pub struct HttpBackend {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub depart_local: String,
    pub timeout: Duration,
    pub min_request_interval: Duration,
    client: reqwest::blocking::Client,
    last_request: std::sync::Mutex<Option<Instant>>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    distance_m: f64,
    duration_s: f64,
    #[serde(default = "default_routable")]
    routable: bool,
}

fn default_routable() -> bool {
    true
}

impl HttpBackend {
    pub fn new(
        endpoint: String,
        api_key_env: Option<&str>,
        depart_local: String,
        timeout: Duration,
        min_request_interval: Duration,
    ) -> Result<Self> {
        let api_key = api_key_env.and_then(|var| std::env::var(var).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            endpoint,
            api_key,
            depart_local,
            timeout,
            min_request_interval,
            client,
            last_request: std::sync::Mutex::new(None),
        })
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_request_interval {
                std::thread::sleep(self.min_request_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl RouteBackend for HttpBackend {
    fn route(&self, origin: GeoPoint, dest: GeoPoint, mode: TravelMode) -> Result<RouteEstimate> {
        let mut backoff = Duration::from_millis(500);
        let mut last_err = String::new();
        for _attempt in 0..3 {
            self.throttle();
            let mut request = self
                .client
                .get(&self.endpoint)
                .query(&[
                    ("olat", origin.lat.to_string()),
                    ("olon", origin.lon.to_string()),
                    ("dlat", dest.lat.to_string()),
                    ("dlon", dest.lon.to_string()),
                    ("mode", mode.as_str().to_string()),
                    ("depart", self.depart_local.clone()),
                ]);
            if let Some(key) = &self.api_key {
                request = request.query(&[("apiKey", key.as_str())]);
            }
            match request.send().and_then(|r| r.error_for_status()) {
                Ok(response) => {
                    return match response.json::<WireResponse>() {
                        Ok(wire) => Ok(RouteEstimate {
                            mode,
                            distance_m: wire.distance_m,
                            duration_s: wire.duration_s,
                            routable: wire.routable,
                        }),
                        Err(e) => Err(Error::Config(format!("malformed routing response: {e}"))),
                    };
                }
                Err(e) => {
                    last_err = e.to_string();
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Err(Error::Config(format!("routing request failed after retries: {last_err}")))
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

/// Cache key: coordinates rounded to 5 decimal places plus the mode.
fn cache_key(origin: GeoPoint, dest: GeoPoint, mode: TravelMode) -> String {
    format!(
        "{:.5},{:.5},{:.5},{:.5},{}",
        origin.lat,
        origin.lon,
        dest.lat,
        dest.lon,
        mode.as_str()
    )
}

/// Append-only CSV route cache. A corrupt file is rebuilt with a warning
/// rather than failing the run.
pub struct RouteCache {
    path: PathBuf,
    entries: BTreeMap<String, RouteEstimate>,
}

impl RouteCache {
    pub fn open(path: &Path) -> Self {
        let mut entries = BTreeMap::new();
        if path.exists() {
            match Self::load(path) {
                Ok(loaded) => entries = loaded,
                Err(e) => {
                    eprintln!("warning: route cache {} unreadable ({e}), rebuilding", path.display());
                    let _ = std::fs::remove_file(path);
                }
            }
        }
        RouteCache { path: path.to_path_buf(), entries }
    }

    fn load(path: &Path) -> Result<BTreeMap<String, RouteEstimate>> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let mut out = BTreeMap::new();
        for record in reader.records() {
            let record =
                record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
            let parse = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config("corrupt cache row".into()))
            };
            let origin = GeoPoint::new(parse(0)?, parse(1)?)?;
            let dest = GeoPoint::new(parse(2)?, parse(3)?)?;
            let mode = TravelMode::parse(
                record.get(4).ok_or_else(|| Error::Config("corrupt cache row".into()))?,
            )?;
            let estimate = RouteEstimate {
                mode,
                distance_m: parse(5)?,
                duration_s: parse(6)?,
                routable: record.get(7) == Some("true"),
            };
            out.insert(cache_key(origin, dest, mode), estimate);
        }
        Ok(out)
    }

    pub fn get(&self, origin: GeoPoint, dest: GeoPoint, mode: TravelMode) -> Option<RouteEstimate> {
        self.entries.get(&cache_key(origin, dest, mode)).copied()
    }

    pub fn insert(
        &mut self,
        origin: GeoPoint,
        dest: GeoPoint,
        mode: TravelMode,
        estimate: RouteEstimate,
    ) -> Result<()> {
        use std::io::Write;
        let new_file = !self.path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        if new_file {
            writeln!(file, "olat,olon,dlat,dlon,mode,distance_m,duration_s,routable")
                .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        }
        writeln!(
            file,
            "{:.5},{:.5},{:.5},{:.5},{},{},{},{}",
            origin.lat,
            origin.lon,
            dest.lat,
            dest.lon,
            mode.as_str(),
            estimate.distance_m,
            estimate.duration_s,
            estimate.routable
        )
        .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        self.entries.insert(cache_key(origin, dest, mode), estimate);
        Ok(())
    }
}

/// One commuter's origin/destination pair for routing.
#[derive(Debug, Clone)]
pub struct RoutePair {
    pub device_id: String,
    pub origin: GeoPoint,
    pub dest: GeoPoint,
}

#[derive(Debug, Clone)]
pub struct RouteResult {
    pub device_id: String,
    pub estimate: RouteEstimate,
}

#[derive(Debug, Default)]
pub struct RouteErrors {
    pub failed_pairs: Vec<(String, TravelMode, String)>,
}

/// Route every (pair, mode), deduplicating identical requests through the
/// cache. Partial failures are recorded, never fatal.
pub fn route_all(
    pairs: &[RoutePair],
    modes: &[TravelMode],
    backend: &dyn RouteBackend,
    cache: &mut RouteCache,
) -> (Vec<RouteResult>, RouteErrors) {
    let mut results = Vec::new();
    let mut errors = RouteErrors::default();
    for pair in pairs {
        for &mode in modes {
            let cached = cache.get(pair.origin, pair.dest, mode);
            let estimate = match cached {
                Some(e) => Some(e),
                None => match backend.route(pair.origin, pair.dest, mode) {
                    Ok(e) => {
                        if let Err(err) = cache.insert(pair.origin, pair.dest, mode, e) {
                            eprintln!("warning: cache write failed: {err}");
                        }
                        Some(e)
                    }
                    Err(err) => {
                        errors
                            .failed_pairs
                            .push((pair.device_id.clone(), mode, err.to_string()));
                        None
                    }
                },
            };
            if let Some(estimate) = estimate {
                results.push(RouteResult { device_id: pair.device_id.clone(), estimate });
            }
        }
    }
    (results, errors)
}
