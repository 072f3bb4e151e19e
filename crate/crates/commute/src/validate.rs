//! OD-matrix validation against a reference flow table: Pearson
//! correlation with significance, stratified fit by flow magnitude, and
//! commute summary statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::trips::ODMatrix;

/// Reference commute flows (e.g. a survey tabulation), with optional
/// standard errors echoed into the scatter output.
#[derive(Debug, Clone, Default)]
pub struct FlowReference {
    pub flows: BTreeMap<(String, String), f64>,
    pub stderrs: BTreeMap<(String, String), f64>,
}

impl FlowReference {
    /// CSV: origin_tract,dest_tract,trips[,stderr]
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        let mut out = FlowReference::default();
        for record in reader.records() {
            let record =
                record.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
            let origin = record.get(0).unwrap_or_default().to_string();
            let dest = record.get(1).unwrap_or_default().to_string();
            let trips: f64 = record
                .get(2)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Config(format!("bad trips value in {path:?}")))?;
            if trips < 0.0 {
                return Err(Error::Config(format!("negative reference flow in {path:?}")));
            }
            if let Some(se) = record.get(3).and_then(|s| s.trim().parse::<f64>().ok()) {
                out.stderrs.insert((origin.clone(), dest.clone()), se);
            }
            out.flows.insert((origin, dest), trips);
        }
        Ok(out)
    }
}

/// Sample Pearson correlation with a two-sided p-value from the
/// t-statistic t = r * sqrt((n-2) / (1-r^2)).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length vectors of >= 2 samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mean_x;
        let dy = yi - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector".into()));
    }
    let r = (cov / (var_x.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0);
    Ok((r, pearson_p_value(r, x.len())))
}

/// Two-sided p-value for an observed sample r at size n.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    2.0 * dist.cdf(-t.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairSelection {
    /// Pairs nonzero in either source; missing cells read as 0.
    #[default]
    UnionNonzero,
    /// Pairs nonzero in both sources.
    IntersectionNonzero,
    /// Every pair present in the reference, zero-imputed on the GPS side.
    RefSupport,
}

impl PairSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "union_nonzero" => Ok(PairSelection::UnionNonzero),
            "intersection_nonzero" => Ok(PairSelection::IntersectionNonzero),
            "ref_support" => Ok(PairSelection::RefSupport),
            other => Err(Error::Config(format!("unknown pair_selection {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterRow {
    pub origin: String,
    pub dest: String,
    pub gps_trips: f64,
    pub ref_trips: f64,
    pub ref_stderr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecileStat {
    pub decile: usize,
    pub n_pairs: usize,
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pearson_r: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub pair_selection_mode: PairSelection,
    pub by_ref_flow_decile: Vec<DecileStat>,
    pub scatter: Vec<ScatterRow>,
}

/// Pair the GPS OD matrix with a reference table and correlate, with a
/// breakdown of r by reference-flow magnitude deciles.
pub fn compare_od(
    gps: &ODMatrix,
    reference: &FlowReference,
    mode: PairSelection,
) -> Result<ValidationReport> {
    let pairs: BTreeSet<(String, String)> = match mode {
        PairSelection::UnionNonzero => gps
            .cells
            .keys()
            .chain(reference.flows.iter().filter(|(_, &v)| v > 0.0).map(|(k, _)| k))
            .cloned()
            .collect(),
        PairSelection::IntersectionNonzero => gps
            .cells
            .keys()
            .filter(|k| reference.flows.get(*k).is_some_and(|&v| v > 0.0))
            .cloned()
            .collect(),
        PairSelection::RefSupport => reference.flows.keys().cloned().collect(),
    };
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }

    let scatter: Vec<ScatterRow> = pairs
        .iter()
        .map(|key| ScatterRow {
            origin: key.0.clone(),
            dest: key.1.clone(),
            gps_trips: gps.cells.get(key).copied().unwrap_or(0.0),
            ref_trips: reference.flows.get(key).copied().unwrap_or(0.0),
            ref_stderr: reference.stderrs.get(key).copied(),
        })
        .collect();

    let x: Vec<f64> = scatter.iter().map(|s| s.gps_trips).collect();
    let y: Vec<f64> = scatter.iter().map(|s| s.ref_trips).collect();
    let (r, p) = pearson(&x, &y)?;

    // stratify by reference magnitude: sort pair indices by ref flow and
    // slice into ten near-equal groups
    let mut order: Vec<usize> = (0..scatter.len()).collect();
    order.sort_by(|&a, &b| {
        scatter[a]
            .ref_trips
            .total_cmp(&scatter[b].ref_trips)
            .then_with(|| {
                (&scatter[a].origin, &scatter[a].dest)
                    .cmp(&(&scatter[b].origin, &scatter[b].dest))
            })
    });
    let mut deciles = Vec::with_capacity(10);
    let n = order.len();
    for d in 0..10 {
        let lo = n * d / 10;
        let hi = n * (d + 1) / 10;
        let idx = &order[lo..hi];
        let dx: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let dy: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let stat = pearson(&dx, &dy).ok().map(|(r, _)| r);
        deciles.push(DecileStat { decile: d, n_pairs: idx.len(), pearson_r: stat });
    }

    Ok(ValidationReport {
        pearson_r: r,
        p_value: p,
        n_pairs: scatter.len(),
        pair_selection_mode: mode,
        by_ref_flow_decile: deciles,
        scatter,
    })
}

/// One routed commuter observation feeding the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutedCommute {
    pub device_id: String,
    pub mode: String,
    pub distance_m: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub n: usize,
    pub mean_duration_s: f64,
    pub median_duration_s: f64,
    pub p90_duration_s: f64,
    pub mean_distance_m: f64,
    pub median_distance_m: f64,
    pub p90_distance_m: f64,
    /// Fixed-width duration histogram: (bin start in seconds, count).
    pub duration_histogram: Vec<(u64, u64)>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest-rank on a sorted slice
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Per-mode mean/median/p90 duration and distance plus a fixed-width
/// duration histogram (default bin 300 s).
pub fn commute_summary(routes: &[RoutedCommute], histogram_bin_s: u64) -> Vec<ModeSummary> {
    assert!(histogram_bin_s > 0);
    let mut by_mode: BTreeMap<&str, Vec<&RoutedCommute>> = BTreeMap::new();
    for r in routes {
        by_mode.entry(&r.mode).or_default().push(r);
    }
    by_mode
        .into_iter()
        .map(|(mode, rs)| {
            let mut durations: Vec<f64> = rs.iter().map(|r| r.duration_s).collect();
            let mut distances: Vec<f64> = rs.iter().map(|r| r.distance_m).collect();
            durations.sort_by(f64::total_cmp);
            distances.sort_by(f64::total_cmp);
            let n = rs.len();
            let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
            for d in &durations {
                let bin = (*d as u64 / histogram_bin_s) * histogram_bin_s;
                *hist.entry(bin).or_insert(0) += 1;
            }
            ModeSummary {
                mode: mode.to_string(),
                n,
                mean_duration_s: durations.iter().sum::<f64>() / n as f64,
                median_duration_s: percentile(&durations, 0.5),
                p90_duration_s: percentile(&durations, 0.9),
                mean_distance_m: distances.iter().sum::<f64>() / n as f64,
                median_distance_m: percentile(&distances, 0.5),
                p90_distance_m: percentile(&distances, 0.9),
                duration_histogram: hist.into_iter().collect(),
            }
        })
        .collect()
}
