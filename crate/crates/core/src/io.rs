//! File formats: the self-describing basis-map format, CSV schemas for scans,
//! datasets, patches and analysis records, and JSON result files.
//!
//! All CSV columns carry units in their headers (µm, V, kHz, e/µm²);
//! conversion to internal SI happens here.

use crate::consts::{khz_to_omega, omega_to_khz, UM};
use crate::error::{Error, Result};
use crate::geometry::{Excitation, FiberLabel, SurfaceRegion};
use crate::grid::MapGrid;
use crate::inference::{FiberScanDataset, ScanPoint};
use crate::maps::{EnergyMap, PotentialMap};
use crate::patch::{AxialScan, PatchPotential, ScanRecord};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const PMAP_MAGIC: &str = "PMAP1";

#[derive(Debug, Serialize, Deserialize)]
struct PmapHeader {
    origin_m: [f64; 2],
    spacing_m: f64,
    nx: usize,
    ny: usize,
    excitation: String,
    geometry_hash: String,
    tool_version: String,
}

fn excitation_from_tag(tag: &str) -> Result<Excitation> {
    let e = match tag {
        "rf_unit" => Excitation::RfUnit,
        "ec_left_unit" => Excitation::EcLeftUnit,
        "ec_right_unit" => Excitation::EcRightUnit,
        "charge_Mf_unit" => Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Facet),
        "charge_Ms_unit" => Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Side),
        "charge_Pf_unit" => Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet),
        "charge_Ps_unit" => Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side),
        other => return Err(Error::StaleBasis(format!("unknown excitation tag {other}"))),
    };
    Ok(e)
}

/// Writes a basis map: a magic line, a JSON header line, little-endian f64
/// values (x fastest), then one validity byte per node.
pub fn write_potential_map(path: &Path, map: &PotentialMap) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = PmapHeader {
        origin_m: map.grid.origin,
        spacing_m: map.grid.spacing,
        nx: map.grid.nx,
        ny: map.grid.ny,
        excitation: map.excitation.tag(),
        geometry_hash: map.geometry_hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    writeln!(w, "{PMAP_MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for v in &map.values {
        w.write_all(&v.to_le_bytes())?;
    }
    let bytes: Vec<u8> = map.valid.iter().map(|&b| b as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_potential_map(path: &Path) -> Result<PotentialMap> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic.trim_end() != PMAP_MAGIC {
        return Err(Error::StaleBasis(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic.trim_end()
        )));
    }
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: PmapHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::StaleBasis(format!("{}: corrupt header: {e}", path.display())))?;
    let grid = MapGrid {
        origin: header.origin_m,
        spacing: header.spacing_m,
        nx: header.nx,
        ny: header.ny,
    };
    let n = grid.len();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::StaleBasis(format!("{}: truncated values: {e}", path.display())))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut vbuf = vec![0u8; n];
    r.read_exact(&mut vbuf)
        .map_err(|e| Error::StaleBasis(format!("{}: truncated validity: {e}", path.display())))?;
    let valid: Vec<bool> = vbuf.iter().map(|&b| b != 0).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::StaleBasis(format!("{}: non-finite values", path.display())));
    }
    let excitation = excitation_from_tag(&header.excitation)?;
    Ok(PotentialMap::new(grid, values, excitation, header.geometry_hash).with_validity(valid))
}

/// CSV export of a potential map: x_um, y_um, U_V.
pub fn write_potential_map_csv(path: &Path, map: &PotentialMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x_um", "y_um", "U_V"]).map_err(csv_err)?;
    for j in 0..map.grid.ny {
        for i in 0..map.grid.nx {
            w.write_record(&[
                format_f64(map.grid.x(i) / UM),
                format_f64(map.grid.y(j) / UM),
                format_f64(map.at(i, j)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV export of an energy landscape: x_um, y_um, Phi (eV or J).
pub fn write_energy_map_csv(path: &Path, map: &EnergyMap, in_ev: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let col = if in_ev { "Phi_eV" } else { "Phi_J" };
    w.write_record(["x_um", "y_um", col]).map_err(csv_err)?;
    for j in 0..map.grid.ny {
        for i in 0..map.grid.nx {
            let v = if in_ev { map.value_ev(i, j) } else { map.at(i, j) };
            w.write_record(&[
                format_f64(map.grid.x(i) / UM),
                format_f64(map.grid.y(j) / UM),
                format_f64(v),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Other(format!("csv: {e}"))
}

fn schema_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema { path: path.display().to_string(), line, message: message.into() }
}

fn parse_field(
    path: &Path,
    line: usize,
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<f64> {
    let raw = record
        .get(idx)
        .ok_or_else(|| schema_err(path, line, format!("missing column {name}")))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| schema_err(path, line, format!("column {name}: cannot parse {raw:?}")))
}

/// Axial-scan CSV columns (units in header).
pub const AXIAL_SCAN_COLUMNS: [&str; 7] =
    ["V_ecD_V", "x_exp_um", "x_err_um", "f_exp_kHz", "f_err_kHz", "x_sim_um", "f_sim_kHz"];

pub fn write_axial_scan_csv(path: &Path, scan: &AxialScan) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AXIAL_SCAN_COLUMNS).map_err(csv_err)?;
    for r in &scan.records {
        w.write_record(&[
            format_f64(r.v_ecd),
            format_f64(r.x_exp / UM),
            format_f64(r.x_err / UM),
            format_f64(omega_to_khz(r.omega_exp)),
            format_f64(omega_to_khz(r.omega_err)),
            format_f64(r.x_sim / UM),
            format_f64(omega_to_khz(r.omega_sim)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_axial_scan_csv(path: &Path, mean_endcap_voltage: f64) -> Result<AxialScan> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| schema_err(path, 1, e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| schema_err(path, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != AXIAL_SCAN_COLUMNS {
            return Err(schema_err(
                path,
                1,
                format!("expected columns {AXIAL_SCAN_COLUMNS:?}, found {got:?}"),
            ));
        }
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| schema_err(path, line, e.to_string()))?;
        records.push(ScanRecord {
            v_ecd: parse_field(path, line, &row, 0, "V_ecD_V")?,
            x_exp: parse_field(path, line, &row, 1, "x_exp_um")? * UM,
            x_err: parse_field(path, line, &row, 2, "x_err_um")? * UM,
            omega_exp: khz_to_omega(parse_field(path, line, &row, 3, "f_exp_kHz")?),
            omega_err: khz_to_omega(parse_field(path, line, &row, 4, "f_err_kHz")?),
            x_sim: parse_field(path, line, &row, 5, "x_sim_um")? * UM,
            omega_sim: khz_to_omega(parse_field(path, line, &row, 6, "f_sim_kHz")?),
        });
    }
    if records.is_empty() {
        return Err(schema_err(path, 2, "scan has no records"));
    }
    Ok(AxialScan { mean_endcap_voltage, records })
}

/// Patch CSV columns: x_um, U_patch_V, err_V.
pub fn write_patch_csv(path: &Path, patch: &PatchPotential) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x_um", "U_patch_V", "err_V"]).map_err(csv_err)?;
    for i in 0..patch.x.len() {
        w.write_record(&[
            format_f64(patch.x[i] / UM),
            format_f64(patch.values[i]),
            format_f64(patch.uncertainty[i]),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a patch from CSV; the anchor must be supplied (the CSV carries only
/// samples). Prefer the JSON sidecar written next to reconstruction outputs.
pub fn read_patch_csv(path: &Path, anchor: f64) -> Result<PatchPotential> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| schema_err(path, 1, e.to_string()))?;
    let mut x = Vec::new();
    let mut values = Vec::new();
    let mut unc = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| schema_err(path, line, e.to_string()))?;
        x.push(parse_field(path, line, &row, 0, "x_um")? * UM);
        values.push(parse_field(path, line, &row, 1, "U_patch_V")?);
        unc.push(parse_field(path, line, &row, 2, "err_V")?);
    }
    PatchPotential::from_samples(x, values, unc, anchor, crate::patch::PatchProvenance::Mean)
}

pub fn write_patch_json(path: &Path, patch: &PatchPotential) -> Result<()> {
    let json = serde_json::to_string_pretty(patch).expect("patch serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_patch_json(path: &Path) -> Result<PatchPotential> {
    let raw = std::fs::read_to_string(path)?;
    let patch: PatchPotential =
        serde_json::from_str(&raw).map_err(|e| schema_err(path, 1, e.to_string()))?;
    // Rebuild interpolation slopes through the validating constructor.
    PatchPotential::from_samples(
        patch.x,
        patch.values,
        patch.uncertainty,
        patch.anchor,
        patch.provenance,
    )
}

/// Fiber-scan dataset CSV columns; y_um is optional.
pub const DATASET_COLUMNS: [&str; 6] =
    ["d_um", "d_err_um", "x_um", "x_err_um", "f_kHz", "f_err_kHz"];

pub fn write_dataset_csv(path: &Path, dataset: &FiberScanDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let has_y = dataset.points.iter().any(|p| p.y.is_some());
    if has_y {
        let mut cols: Vec<&str> = DATASET_COLUMNS.to_vec();
        cols.push("y_um");
        w.write_record(&cols).map_err(csv_err)?;
    } else {
        w.write_record(DATASET_COLUMNS).map_err(csv_err)?;
    }
    for p in &dataset.points {
        let mut rec = vec![
            format_f64(p.d / UM),
            format_f64(p.d_err / UM),
            format_f64(p.x / UM),
            format_f64(p.x_err / UM),
            format_f64(omega_to_khz(p.omega)),
            format_f64(omega_to_khz(p.omega_err)),
        ];
        if has_y {
            rec.push(p.y.map(|y| format_f64(y / UM)).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the record rows; the moving label, voltages and fixed charge state
/// come from the run configuration.
pub fn read_dataset_points_csv(path: &Path) -> Result<Vec<ScanPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| schema_err(path, 1, e.to_string()))?;
    let has_y = {
        let headers = reader.headers().map_err(|e| schema_err(path, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got.len() < 6 || got[..6] != DATASET_COLUMNS {
            return Err(schema_err(
                path,
                1,
                format!("expected columns {DATASET_COLUMNS:?} (+ optional y_um), found {got:?}"),
            ));
        }
        got.len() > 6 && got[6] == "y_um"
    };
    let mut points = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| schema_err(path, line, e.to_string()))?;
        let y = if has_y {
            match row.get(6).map(str::trim) {
                Some("") | None => None,
                Some(raw) => Some(
                    raw.parse::<f64>()
                        .map_err(|_| schema_err(path, line, format!("y_um: bad value {raw:?}")))?
                        * UM,
                ),
            }
        } else {
            None
        };
        points.push(ScanPoint {
            d: parse_field(path, line, &row, 0, "d_um")? * UM,
            d_err: parse_field(path, line, &row, 1, "d_err_um")? * UM,
            x: parse_field(path, line, &row, 2, "x_um")? * UM,
            x_err: parse_field(path, line, &row, 3, "x_err_um")? * UM,
            omega: khz_to_omega(parse_field(path, line, &row, 4, "f_kHz")?),
            omega_err: khz_to_omega(parse_field(path, line, &row, 5, "f_err_kHz")?),
            y,
        });
    }
    if points.is_empty() {
        return Err(schema_err(path, 2, "dataset has no records"));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::EndcapVoltages;
    use crate::geometry::ChargeState;
    use crate::maps::mapgen;

    #[test]
    fn potential_map_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = MapGrid::centered(100e-6, 60e-6, 5e-6);
        let mut map = mapgen::from_fn(grid, Excitation::RfUnit, "abc123", |x, y| {
            (x * 1e4).sin() + y * 3.7e2
        });
        map.valid[17] = false;
        let path = dir.path().join("rf.pmap");
        write_potential_map(&path, &map).unwrap();
        let back = read_potential_map(&path).unwrap();
        assert_eq!(map.values, back.values);
        assert_eq!(map.valid, back.valid);
        assert_eq!(map.excitation, back.excitation);
        assert_eq!(map.geometry_hash, back.geometry_hash);
        assert_eq!(map.grid, back.grid);
    }

    #[test]
    fn corrupt_header_is_stale_basis() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pmap");
        std::fs::write(&path, b"PMAP1\n{not json\n".as_slice()).unwrap();
        let err = read_potential_map(&path).unwrap_err();
        assert!(matches!(err, Error::StaleBasis(_)));

        std::fs::write(&path, b"WRONG\n{}\n".as_slice()).unwrap();
        let err = read_potential_map(&path).unwrap_err();
        assert!(matches!(err, Error::StaleBasis(_)));
    }

    #[test]
    fn axial_scan_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        let scan = AxialScan {
            mean_endcap_voltage: 1000.0,
            records: (0..5)
                .map(|i| ScanRecord {
                    v_ecd: i as f64 * 0.5,
                    x_exp: (i as f64 - 2.0) * 50e-6 + 3e-6,
                    x_err: 0.8e-6,
                    omega_exp: khz_to_omega(200.0 + i as f64),
                    omega_err: khz_to_omega(2.0),
                    x_sim: (i as f64 - 2.0) * 50e-6,
                    omega_sim: khz_to_omega(200.0),
                })
                .collect(),
        };
        write_axial_scan_csv(&path, &scan).unwrap();
        let back = read_axial_scan_csv(&path, 1000.0).unwrap();
        assert_eq!(back.records.len(), 5);
        for (a, b) in scan.records.iter().zip(back.records.iter()) {
            assert!((a.x_exp - b.x_exp).abs() < 1e-18);
            assert!((a.omega_exp - b.omega_exp).abs() < 1e-6);
        }
    }

    #[test]
    fn scan_schema_violation_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        std::fs::write(
            &path,
            "V_ecD_V,x_exp_um,x_err_um,f_exp_kHz,f_err_kHz,x_sim_um,f_sim_kHz\n1,2,0.8,200,2,2.5,200\n1,notanumber,0.8,200,2,2.5,200\n",
        )
        .unwrap();
        match read_axial_scan_csv(&path, 0.0).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_csv_round_trip_with_optional_y() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let dataset = FiberScanDataset {
            moving: FiberLabel::P,
            points: vec![
                ScanPoint {
                    d: 500e-6,
                    d_err: 13e-6,
                    x: -3e-6,
                    x_err: 0.8e-6,
                    omega: khz_to_omega(180.0),
                    omega_err: khz_to_omega(2.0),
                    y: Some(1.5e-6),
                },
                ScanPoint {
                    d: 700e-6,
                    d_err: 13e-6,
                    x: -1e-6,
                    x_err: 0.8e-6,
                    omega: khz_to_omega(200.0),
                    omega_err: khz_to_omega(2.0),
                    y: None,
                },
            ],
            endcaps: EndcapVoltages::symmetric(1500.0),
            fixed_charges: ChargeState::neutral(),
        };
        write_dataset_csv(&path, &dataset).unwrap();
        let points = read_dataset_points_csv(&path).unwrap();
        assert_eq!(points.len(), 2);
        assert!((points[0].d - 500e-6).abs() < 1e-18);
        assert_eq!(points[0].y, Some(1.5e-6));
        assert_eq!(points[1].y, None);
    }
}
