//! Minimal GeoJSON FeatureCollection reader for tract and boundary files.
//! Only Polygon and MultiPolygon geometries are accepted.

use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Polygon};

#[derive(Debug, Deserialize)]
struct FeatureCollection {
    features: Vec<Feature>,
}

#[derive(Debug, Deserialize)]
struct Feature {
    #[serde(default)]
    properties: Value,
    geometry: Geometry,
}

#[derive(Debug, Deserialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Value,
}

/// One feature flattened to polygons plus its id property (if present).
#[derive(Debug, Clone)]
pub struct GeoFeature {
    pub id: Option<String>,
    pub polygons: Vec<Polygon>,
}

fn ring_from_json(raw: &Value) -> Result<Vec<GeoPoint>> {
    let arr = raw
        .as_array()
        .ok_or_else(|| Error::Config("ring is not an array".into()))?;
    let mut ring = Vec::with_capacity(arr.len());
    for pos in arr {
        let pair = pos
            .as_array()
            .filter(|p| p.len() >= 2)
            .ok_or_else(|| Error::Config("position is not [lon, lat]".into()))?;
        let lon = pair[0].as_f64().ok_or_else(|| Error::Config("bad lon".into()))?;
        let lat = pair[1].as_f64().ok_or_else(|| Error::Config("bad lat".into()))?;
        ring.push(GeoPoint::new(lat, lon)?);
    }
    // GeoJSON rings repeat the first point; our rings are implicitly closed
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}

fn polygon_from_rings(raw: &Value) -> Result<Polygon> {
    let rings = raw
        .as_array()
        .ok_or_else(|| Error::Config("polygon coordinates are not an array".into()))?;
    if rings.is_empty() {
        return Err(Error::DegenerateRing { vertices: 0 });
    }
    let exterior = ring_from_json(&rings[0])?;
    let holes = rings[1..]
        .iter()
        .map(ring_from_json)
        .collect::<Result<Vec<_>>>()?;
    Polygon::new(exterior, holes)
}

fn polygons_from_geometry(geom: &Geometry) -> Result<Vec<Polygon>> {
    match geom.kind.as_str() {
        "Polygon" => Ok(vec![polygon_from_rings(&geom.coordinates)?]),
        "MultiPolygon" => geom
            .coordinates
            .as_array()
            .ok_or_else(|| Error::Config("MultiPolygon coordinates are not an array".into()))?
            .iter()
            .map(polygon_from_rings)
            .collect(),
        other => Err(Error::Config(format!("unsupported geometry type {other}"))),
    }
}

/// Read a FeatureCollection, extracting `id_property` from each feature's
/// properties when present.
pub fn read_feature_collection(path: &Path, id_property: &str) -> Result<Vec<GeoFeature>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fc: FeatureCollection = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    let mut out = Vec::with_capacity(fc.features.len());
    for feature in &fc.features {
        let id = feature.properties.get(id_property).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        });
        out.push(GeoFeature { id, polygons: polygons_from_geometry(&feature.geometry)? });
    }
    Ok(out)
}

/// Serialize grid-style features back out; used by the synthetic world.
pub fn write_feature_collection(
    path: &Path,
    features: &[(String, &Polygon)],
    id_property: &str,
) -> Result<()> {
    let feats: Vec<Value> = features
        .iter()
        .map(|(id, poly)| {
            let mut exterior: Vec<Value> = poly
                .exterior
                .iter()
                .map(|p| serde_json::json!([p.lon, p.lat]))
                .collect();
            if let Some(first) = exterior.first().cloned() {
                exterior.push(first); // close the ring
            }
            serde_json::json!({
                "type": "Feature",
                "properties": { id_property: id },
                "geometry": { "type": "Polygon", "coordinates": [exterior] }
            })
        })
        .collect();
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": feats });
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_polygon() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.geojson");
        let poly = Polygon::rect(29.0, -95.5, 29.1, -95.4);
        write_feature_collection(&path, &[("T1".to_string(), &poly)], "GEOID").unwrap();
        let feats = read_feature_collection(&path, "GEOID").unwrap();
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].id.as_deref(), Some("T1"));
        assert_eq!(feats[0].polygons[0], poly);
    }

    #[test]
    fn rejects_unsupported_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pt.geojson");
        std::fs::write(
            &path,
            r#"{"type":"FeatureCollection","features":[
              {"type":"Feature","properties":{},"geometry":{"type":"Point","coordinates":[0,0]}}
            ]}"#,
        )
        .unwrap();
        assert!(read_feature_collection(&path, "GEOID").is_err());
    }
}
