//! Integration tests: the CLI end to end, stage isolation on hand-written
//! artifacts, failure quarantine, gzip ingest, and the HTTP routing client
//! against a local mock server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use chrono::{NaiveDate, TimeZone};

use commute::config::PipelineConfig;
use commute::geo::GeoPoint;
use commute::pipeline::{read_od_csv, run_build_od, run_extract_stays, run_validate};
use commute::routing::{HttpBackend, RouteBackend, TravelMode};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_commute")
}

fn local_ts(day: u32, hour: u32) -> i64 {
    let tz: chrono_tz::Tz = "America/Chicago".parse().unwrap();
    tz.from_local_datetime(
        &NaiveDate::from_ymd_opt(2017, 8, day)
            .unwrap()
            .and_hms_opt(hour, 0, 0)
            .unwrap(),
    )
    .unwrap()
    .timestamp()
}

#[test]
fn cli_runs_synth_then_all() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let synth = Command::new(bin())
        .args([
            "--set",
            &format!("output_dir={out}"),
            "--set",
            "synth.agent_count=30",
            "synth",
        ])
        .output()
        .unwrap();
    assert!(synth.status.success(), "synth failed: {}", String::from_utf8_lossy(&synth.stderr));

    let all = Command::new(bin())
        .args([
            "--set",
            &format!("output_dir={out}"),
            "--set",
            "synth.agent_count=30",
            "--workers",
            "2",
            "all",
        ])
        .output()
        .unwrap();
    assert!(all.status.success(), "all failed: {}", String::from_utf8_lossy(&all.stderr));
    let stdout = String::from_utf8_lossy(&all.stdout);
    assert!(stdout.contains("wrote"), "no artifact lines printed");

    for name in [
        "stays.csv",
        "places.csv",
        "od.csv",
        "validation.json",
        "route_summary.json",
        "recovery.json",
        "config_echo.toml",
        "run_manifest.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let recovery: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("recovery.json")).unwrap())
            .unwrap();
    assert!(
        recovery["home_recovery_fraction"].as_f64().unwrap() >= 0.9,
        "poor home recovery on a clean synthetic world: {recovery}"
    );
    let validation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("validation.json")).unwrap())
            .unwrap();
    assert!(validation["pearson_r"].as_f64().unwrap() >= 0.9);
}

fn write_two_tract_world(dir: &Path) {
    // T1 spans lon 0-0.1, T2 spans lon 0.1-0.2, both lat 0-0.1
    let tracts = r#"{"type":"FeatureCollection","features":[
      {"type":"Feature","properties":{"GEOID":"T1"},"geometry":{"type":"Polygon",
       "coordinates":[[[0.0,0.0],[0.1,0.0],[0.1,0.1],[0.0,0.1],[0.0,0.0]]]}},
      {"type":"Feature","properties":{"GEOID":"T2"},"geometry":{"type":"Polygon",
       "coordinates":[[[0.1,0.0],[0.2,0.0],[0.2,0.1],[0.1,0.1],[0.1,0.0]]]}}]}"#;
    let city = r#"{"type":"FeatureCollection","features":[
      {"type":"Feature","properties":{"GEOID":"city"},"geometry":{"type":"Polygon",
       "coordinates":[[[-0.05,-0.05],[0.25,-0.05],[0.25,0.15],[-0.05,0.15],[-0.05,-0.05]]]}}]}"#;
    std::fs::write(dir.join("tracts.geojson"), tracts).unwrap();
    std::fs::write(dir.join("city.geojson"), city).unwrap();
}

#[test]
fn build_od_runs_standalone_on_handwritten_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_two_tract_world(dir.path());

    // d1 commutes T1 -> T2 on two weekdays; d2 commutes T2 -> T1 on four
    let mut stays = String::from("device_id,lat,lon,arrival_utc,departure_utc,member_count\n");
    for day in [1u32, 2] {
        stays.push_str(&format!(
            "d1,0.05,0.15,{},{},10\n",
            local_ts(day, 9),
            local_ts(day, 17)
        ));
    }
    for day in [7u32, 8, 9, 10] {
        stays.push_str(&format!(
            "d2,0.05,0.05,{},{},10\n",
            local_ts(day, 9),
            local_ts(day, 17)
        ));
    }
    std::fs::write(dir.path().join("stays.csv"), stays).unwrap();
    let places = "device_id,home_lat,home_lon,work_lat,work_lon,n,d\n\
                  d1,0.05,0.05,0.05,0.15,2,11000.0\n\
                  d2,0.05,0.15,0.05,0.05,4,11000.0\n";
    std::fs::write(dir.path().join("places.csv"), places).unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.input.tracts = Some(dir.path().join("tracts.geojson"));
    cfg.input.city = Some(dir.path().join("city.geojson"));
    run_build_od(&cfg).unwrap();

    let od = read_od_csv(&dir.path().join("od.csv")).unwrap();
    assert_eq!(od.cells.len(), 2);
    let t12 = od.cells[&("T1".to_string(), "T2".to_string())];
    let t21 = od.cells[&("T2".to_string(), "T1".to_string())];
    assert!((t12 - 2.0 / 11.0).abs() < 1e-12);
    assert!((t21 - 4.0 / 11.0).abs() < 1e-12);

    // the OD table used as its own reference must correlate perfectly
    std::fs::copy(dir.path().join("od.csv"), dir.path().join("reference.csv")).unwrap();
    cfg.input.reference_flows = Some(dir.path().join("reference.csv"));
    run_validate(&cfg).unwrap();
    let validation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("validation.json")).unwrap())
            .unwrap();
    assert!((validation["pearson_r"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(validation["n_pairs"].as_u64().unwrap(), 2);
}

#[test]
fn failed_stage_leaves_previous_artifacts_untouched() {
    let dir = tempfile::tempdir().unwrap();
    write_two_tract_world(dir.path());
    let stays = format!(
        "device_id,lat,lon,arrival_utc,departure_utc,member_count\nd1,0.05,0.15,{},{},10\nd1,0.06,0.15,{},{},10\n",
        local_ts(1, 9),
        local_ts(1, 17),
        local_ts(2, 9),
        local_ts(2, 17)
    );
    std::fs::write(dir.path().join("stays.csv"), &stays).unwrap();
    std::fs::write(
        dir.path().join("places.csv"),
        "device_id,home_lat,home_lon,work_lat,work_lon,n,d\nd1,0.05,0.05,0.05,0.15,2,11000.0\n",
    )
    .unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.input.tracts = Some(dir.path().join("tracts.geojson"));
    cfg.input.city = Some(dir.path().join("city.geojson"));
    run_build_od(&cfg).unwrap();
    let od_before = std::fs::read(dir.path().join("od.csv")).unwrap();

    // a rerun with a missing input must fail without clobbering outputs
    cfg.input.tracts = Some(dir.path().join("no-such-tracts.geojson"));
    assert!(run_build_od(&cfg).is_err());
    assert_eq!(std::fs::read(dir.path().join("od.csv")).unwrap(), od_before);
    assert!(!dir.path().join("od.csv.partial").exists());
}

#[test]
fn gzip_ping_input_matches_plain() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.synth.agent_count = 10;
    cfg.output_dir = dir.path().join("plain");
    commute::pipeline::run_synth(&cfg).unwrap();
    cfg.input.pings = Some(cfg.output_dir.join("pings.csv"));
    run_extract_stays(&cfg).unwrap();
    let plain = std::fs::read(cfg.output_dir.join("stays.csv")).unwrap();

    let gz_path = dir.path().join("pings.csv.gz");
    let raw = std::fs::read(dir.path().join("plain/pings.csv")).unwrap();
    let mut encoder =
        flate2::write::GzEncoder::new(std::fs::File::create(&gz_path).unwrap(), Default::default());
    encoder.write_all(&raw).unwrap();
    encoder.finish().unwrap();

    let mut gz_cfg = PipelineConfig::default();
    gz_cfg.output_dir = dir.path().join("gz");
    gz_cfg.input.pings = Some(gz_path);
    run_extract_stays(&gz_cfg).unwrap();
    let gzipped = std::fs::read(gz_cfg.output_dir.join("stays.csv")).unwrap();
    assert_eq!(plain, gzipped);
}

/// One-shot HTTP server: answers `responses` in order, then returns each
/// request's first line for inspection.
fn spawn_mock_server(
    responses: Vec<(u16, &'static str)>,
) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut request_lines = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut raw = Vec::new();
            let mut buf = [0u8; 1024];
            while !raw.windows(4).any(|w| w == b"\r\n\r\n") {
                let n = stream.read(&mut buf).unwrap();
                if n == 0 {
                    break;
                }
                raw.extend_from_slice(&buf[..n]);
            }
            let request = String::from_utf8_lossy(&raw);
            request_lines.push(request.lines().next().unwrap_or_default().to_string());
            let reason = if status == 200 { "OK" } else { "Service Unavailable" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        request_lines
    });
    (format!("http://{addr}/route"), handle)
}

#[test]
fn http_backend_parses_response_and_query_carries_coordinates() {
    let (endpoint, server) = spawn_mock_server(vec![(
        200,
        r#"{"distance_m":14000.0,"duration_s":1120.0,"routable":true}"#,
    )]);
    let backend = HttpBackend::new(
        endpoint,
        None,
        "08:00".into(),
        Duration::from_secs(5),
        Duration::from_millis(1),
    )
    .unwrap();
    let estimate = backend
        .route(
            GeoPoint { lat: 29.76, lon: -95.36 },
            GeoPoint { lat: 29.70, lon: -95.40 },
            TravelMode::Car,
        )
        .unwrap();
    assert_eq!(estimate.distance_m, 14000.0);
    assert_eq!(estimate.duration_s, 1120.0);
    assert!(estimate.routable);

    let requests = server.join().unwrap();
    assert_eq!(requests.len(), 1);
    let line = &requests[0];
    assert!(line.starts_with("GET /route?"), "unexpected request line: {line}");
    for fragment in ["olat=29.76", "dlon=-95.4", "mode=car", "depart=08%3A00"] {
        assert!(line.contains(fragment), "missing {fragment} in {line}");
    }
}

#[test]
fn http_backend_retries_transient_failures() {
    let (endpoint, server) = spawn_mock_server(vec![
        (503, "{}"),
        (200, r#"{"distance_m":5000.0,"duration_s":900.0}"#),
    ]);
    let backend = HttpBackend::new(
        endpoint,
        None,
        "08:00".into(),
        Duration::from_secs(5),
        Duration::from_millis(1),
    )
    .unwrap();
    let estimate = backend
        .route(
            GeoPoint { lat: 29.76, lon: -95.36 },
            GeoPoint { lat: 29.70, lon: -95.40 },
            TravelMode::Transit,
        )
        .unwrap();
    // routable defaults to true when the field is omitted
    assert!(estimate.routable);
    assert_eq!(estimate.distance_m, 5000.0);
    assert_eq!(server.join().unwrap().len(), 2);
}
