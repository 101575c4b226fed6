use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{DatagenError, GenerationSettings, LabeledTrajectory, ObservableSpec};
use crate::dynamics::SystemSpec;
use crate::quantization::QuantizedControlSet;

/// Sidecar describing how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub system: Option<SystemSpec>,
    pub control_set: QuantizedControlSet,
    pub observable: ObservableSpec,
    pub settings: GenerationSettings,
    pub version: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DatagenError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DatagenError::Io {
            path: path.display().to_string(),
            source,
        },
        other => DatagenError::SchemaMismatch {
            line,
            reason: format!("{other:?}"),
        },
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `t, z_1..z_q, j, u_1..u_{n_u}`; `j` is 1-based and empty on the
/// final state.
pub fn save_dataset(path: &Path, traj: &LabeledTrajectory) -> Result<(), DatagenError> {
    traj.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.obs_dim).map(|i| format!("z_{i}")));
    header.push("j".into());
    header.extend((1..=traj.control_dim).map(|i| format!("u_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..traj.len() {
        let mut row = vec![fmt(traj.times[i])];
        row.extend(traj.observables[i].iter().map(|&x| fmt(x)));
        if i < traj.transitions() {
            row.push((traj.control_indices[i] + 1).to_string());
            row.extend(traj.controls[i].iter().map(|&x| fmt(x)));
        } else {
            row.push(String::new());
            row.extend(std::iter::repeat_n(String::new(), traj.control_dim));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledTrajectory, DatagenError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let j_col = names.iter().position(|&h| h == "j").ok_or(DatagenError::SchemaMismatch {
        line: 1,
        reason: "missing `j` column".into(),
    })?;
    let q = j_col.saturating_sub(1);
    let nu = names.len() - j_col - 1;
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=q).map(|i| format!("z_{i}")))
        .chain(std::iter::once("j".to_string()))
        .chain((1..=nu).map(|i| format!("u_{i}")))
        .collect();
    if names != expected {
        return Err(DatagenError::SchemaMismatch {
            line: 1,
            reason: format!("unexpected header {names:?}"),
        });
    }

    let mut traj = LabeledTrajectory::empty(q, nu);
    let mut finished = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mismatch = |reason: String| DatagenError::SchemaMismatch { line, reason };
        if rec.len() != names.len() {
            return Err(mismatch(format!("{} columns, expected {}", rec.len(), names.len())));
        }
        if finished {
            return Err(mismatch("row after the unlabeled final state".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| mismatch(format!("`{s}`: {e}")));
        traj.times.push(num(&rec[0])?);
        let z = (1..=q).map(|c| num(&rec[c])).collect::<Result<Vec<_>, _>>()?;
        traj.observables.push(DVector::from_vec(z));
        if rec[j_col].is_empty() {
            finished = true;
            continue;
        }
        let j: usize = rec[j_col]
            .parse()
            .map_err(|e| mismatch(format!("label `{}`: {e}", &rec[j_col])))?;
        if j == 0 {
            return Err(mismatch("labels are 1-based".into()));
        }
        traj.control_indices.push(j - 1);
        let u = (j_col + 1..names.len()).map(|c| num(&rec[c])).collect::<Result<Vec<_>, _>>()?;
        traj.controls.push(DVector::from_vec(u));
    }
    if !traj.is_empty() && !finished {
        return Err(DatagenError::SchemaMismatch {
            line: traj.len() as u64 + 1,
            reason: "last row must be an unlabeled final state".into(),
        });
    }
    traj.validate()?;
    Ok(traj)
}

/// `data.csv` -> `data.json`.
pub fn metadata_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("json")
}

pub fn save_metadata(path: &Path, meta: &DatasetMetadata) -> Result<(), DatagenError> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| DatagenError::Metadata(e.to_string()))?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_metadata(path: &Path) -> Result<DatasetMetadata, DatagenError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatagenError::Metadata(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledTrajectory {
        LabeledTrajectory {
            obs_dim: 2,
            control_dim: 1,
            times: vec![0.0, 0.05, 0.1],
            observables: vec![
                DVector::from_vec(vec![0.1 + 0.2, -1e-300]),
                DVector::from_vec(vec![std::f64::consts::PI, 1.0 / 3.0]),
                DVector::from_vec(vec![-0.0, 6.02e23]),
            ],
            control_indices: vec![1, 0],
            controls: vec![DVector::from_element(1, 50.0), DVector::from_element(1, -50.0)],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let t = sample();
        save_dataset(&path, &t).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.observables.iter().zip(&t.observables) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,z_1,z_2,j,u_1\n"));
        assert!(text.contains(",2,5.0000000000000000e1"));
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let t = LabeledTrajectory::empty(3, 1);
        save_dataset(&path, &t).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,z_1,z_2,z_3,j,u_1\n");
        assert_eq!(load_dataset(&path).unwrap(), t);
    }

    #[test]
    fn wrong_column_count_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,z_1,j,u_1\n0.0,1.0,1,2.0\n0.1,1.0,1\n0.2,3.0,,\n").unwrap();
        match load_dataset(&path) {
            Err(DatagenError::SchemaMismatch { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert!(matches!(err, DatagenError::Io { .. }));
    }
}
