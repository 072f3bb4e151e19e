//! Declarative pipeline configuration: one TOML file, every threshold
//! defaulted to the published value, overridable with `--set key=value`.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ObservationWindow, SchemaConfig};
use crate::places::PlacesConfig;
use crate::stay::RadiusMode;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct InputConfig {
    pub pings: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub city: Option<PathBuf>,
    pub reference_flows: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub timezone: String,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            start_date: NaiveDate::from_ymd_opt(2017, 8, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2017, 8, 15).unwrap(),
            timezone: "America/Chicago".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StayConfig {
    pub dist_threshold_m: f64,
    pub time_threshold_s: i64,
    pub radius_mode: RadiusMode,
}

impl Default for StayConfig {
    fn default() -> Self {
        StayConfig { dist_threshold_m: 250.0, time_threshold_s: 900, radius_mode: RadiusMode::Anchor }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TripsConfig {
    pub work_presence_radius_m: f64,
    pub min_tract_fraction: f64,
    pub grid_resolution: u32,
    pub tract_id_property: String,
}

impl Default for TripsConfig {
    fn default() -> Self {
        TripsConfig {
            work_presence_radius_m: 800.0,
            min_tract_fraction: 0.5,
            grid_resolution: 200,
            tract_id_property: "GEOID".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    /// "offline" or "external".
    pub backend: String,
    pub endpoint: String,
    pub api_key_env: String,
    pub depart_local: String,
    pub timeout_s: u64,
    pub min_request_interval_ms: u64,
    pub modes: Vec<String>,
    pub detour_factor: f64,
    pub car_speed_mps: f64,
    pub transit_speed_mps: f64,
    pub car_overhead_s: f64,
    pub transit_overhead_s: f64,
    pub histogram_bin_s: u64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            backend: "offline".into(),
            endpoint: String::new(),
            api_key_env: "ROUTING_API_KEY".into(),
            depart_local: "08:00".into(),
            timeout_s: 10,
            min_request_interval_ms: 100,
            modes: vec!["car".into(), "transit".into()],
            detour_factor: 1.4,
            car_speed_mps: 12.5,
            transit_speed_mps: 6.0,
            car_overhead_s: 0.0,
            transit_overhead_s: 600.0,
            histogram_bin_s: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub pair_selection: String,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { pair_selection: "union_nonzero".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub time_thresholds_s: Vec<i64>,
    pub exponents: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { time_thresholds_s: vec![300, 600, 900, 1200, 1800], exponents: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub schema: SchemaConfig,
    pub window: WindowConfig,
    pub stay: StayConfig,
    pub places: PlacesConfig,
    pub trips: TripsConfig,
    pub routing: RoutingConfig,
    pub validation: ValidationConfig,
    pub sweep: SweepConfig,
    pub synth: SynthConfig,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputConfig::default(),
            schema: SchemaConfig::default(),
            window: WindowConfig::default(),
            stay: StayConfig::default(),
            places: PlacesConfig::default(),
            trips: TripsConfig::default(),
            routing: RoutingConfig::default(),
            validation: ValidationConfig::default(),
            sweep: SweepConfig::default(),
            synth: SynthConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                text.parse()
                    .map_err(|e| Error::Config(format!("cannot parse {}: {e}", p.display())))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for pair in overrides {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair}")))?;
            apply_override(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: PipelineConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("stay.dist_threshold_m", self.stay.dist_threshold_m),
            ("places.linkage_threshold_m", self.places.linkage_threshold_m),
            ("places.walking_distance_m", self.places.walking_distance_m),
            ("trips.work_presence_radius_m", self.trips.work_presence_radius_m),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.stay.time_threshold_s <= 0 {
            return Err(Error::Config("stay.time_threshold_s must be positive".into()));
        }
        if self.window.start_date > self.window.end_date {
            return Err(Error::Config("window.start_date must not follow end_date".into()));
        }
        Ok(())
    }

    pub fn observation_window(&self) -> Result<ObservationWindow> {
        ObservationWindow::from_local_dates(
            self.window.start_date,
            self.window.end_date,
            &self.window.timezone,
        )
    }

    /// The fully resolved config as TOML, for the per-run echo artifact.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn apply_override(root: &mut toml::Value, dotted_key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut node = root;
    let parts: Vec<&str> = dotted_key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{dotted_key}: not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{dotted_key}: not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
