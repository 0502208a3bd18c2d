//! Native on-disk dataset: a directory holding `dataset.json` (self-describing
//! metadata with explicit units) and `channels.f32` (little-endian f32 samples
//! in C order over `(angle, element, sample)`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ImageGrid, PlaneWaveAcquisition, ProbeGeometry};
use crate::simulate::Targets;

pub const FORMAT_TAG: &str = "icabeam-native";
pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "dataset.json";
pub const CHANNELS_FILE: &str = "channels.f32";

/// Everything needed to beamform and evaluate one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub probe: ProbeGeometry,
    pub acquisition: PlaneWaveAcquisition,
    /// Suggested reconstruction grid.
    pub grid: ImageGrid,
    pub targets: Targets,
    /// Free-form description of where the data came from.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        model::validate(&self.acquisition, &self.probe)?;
        self.grid.validate()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Units {
    length: String,
    time: String,
    angle: String,
    frequency: String,
    speed: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            length: "m".into(),
            time: "s".into(),
            angle: "rad".into(),
            frequency: "Hz".into(),
            speed: "m/s".into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AcquisitionMeta {
    angles: Vec<f64>,
    sampling_rate: f64,
    sound_speed: f64,
    start_time: f64,
    n_angles: usize,
    n_elements: usize,
    n_samples: usize,
    sample_type: String,
    layout: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: String,
    version: u32,
    name: String,
    units: Units,
    probe: ProbeGeometry,
    acquisition: AcquisitionMeta,
    grid: ImageGrid,
    #[serde(default)]
    targets: Targets,
    #[serde(default)]
    provenance: BTreeMap<String, serde_json::Value>,
}

/// Write `dataset` into directory `dir`, creating it if needed.
pub fn write_native(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let acq = &dataset.acquisition;
    let (na, ne, ns) = acq.channel_data.dim();
    let meta = Metadata {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        name: dataset.name.clone(),
        units: Units::default(),
        probe: dataset.probe.clone(),
        acquisition: AcquisitionMeta {
            angles: acq.angles.clone(),
            sampling_rate: acq.sampling_rate,
            sound_speed: acq.sound_speed,
            start_time: acq.start_time,
            n_angles: na,
            n_elements: ne,
            n_samples: ns,
            sample_type: "f32le".into(),
            layout: "angle,element,sample".into(),
        },
        grid: dataset.grid.clone(),
        targets: dataset.targets.clone(),
        provenance: dataset.provenance.clone(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join(METADATA_FILE), json)?;

    let mut out = BufWriter::new(fs::File::create(dir.join(CHANNELS_FILE))?);
    for v in acq.channel_data.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_native`]. Nothing is returned unless the
/// metadata and the sample blob are complete and consistent.
pub fn read_native(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path)?;
    let meta: Metadata =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, format!("bad metadata: {e}")))?;
    if meta.format != FORMAT_TAG {
        return Err(Error::format(
            &meta_path,
            format!("format tag `{}` is not `{FORMAT_TAG}`", meta.format),
        ));
    }
    if meta.version != FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported version {}", meta.version),
        ));
    }
    let a = &meta.acquisition;
    if a.sample_type != "f32le" || a.layout != "angle,element,sample" {
        return Err(Error::format(
            &meta_path,
            format!("unsupported sample encoding {} / {}", a.sample_type, a.layout),
        ));
    }
    let blob_path = dir.join(CHANNELS_FILE);
    let bytes = fs::read(&blob_path)?;
    let expected = a.n_angles * a.n_elements * a.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &blob_path,
            format!(
                "expected {expected} bytes for {} x {} x {} samples, found {}",
                a.n_angles,
                a.n_elements,
                a.n_samples,
                bytes.len()
            ),
        ));
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let channel_data = Array3::from_shape_vec((a.n_angles, a.n_elements, a.n_samples), samples)
        .map_err(|e| Error::format(&blob_path, e.to_string()))?;
    let dataset = Dataset {
        name: meta.name,
        probe: meta.probe,
        acquisition: PlaneWaveAcquisition {
            angles: meta.acquisition.angles,
            channel_data,
            sampling_rate: meta.acquisition.sampling_rate,
            sound_speed: meta.acquisition.sound_speed,
            start_time: meta.acquisition.start_time,
        },
        grid: meta.grid,
        targets: meta.targets,
        provenance: meta.provenance,
    };
    dataset
        .validate()
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Cyst;

    fn sample_dataset() -> Dataset {
        let probe = ProbeGeometry::linear(4, 0.3e-3).unwrap();
        let data = Array3::from_shape_fn((2, 4, 10), |(a, e, s)| (a * 100 + e * 10 + s) as f64 * 0.25 - 3.0);
        Dataset {
            name: "tiny".into(),
            probe,
            acquisition: PlaneWaveAcquisition {
                angles: vec![-0.1, 0.1],
                channel_data: data,
                sampling_rate: 20e6,
                sound_speed: 1540.0,
                start_time: 1e-6,
            },
            grid: ImageGrid::uniform(-1e-3, 1e-4, 21, 5e-3, 5e-5, 11).unwrap(),
            targets: Targets {
                points: vec![(0.0, 5e-3)],
                cysts: vec![Cyst {
                    x: 0.0,
                    z: 5.2e-3,
                    radius: 1e-4,
                }],
            },
            provenance: BTreeMap::from([("source".to_string(), serde_json::json!("unit test"))]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        write_native(&ds, dir.path()).unwrap();
        let back = read_native(dir.path()).unwrap();
        assert_eq!(back.acquisition, ds.acquisition);
        assert_eq!(back.grid, ds.grid);
        assert_eq!(back.probe, ds.probe);
        assert_eq!(back.targets, ds.targets);
        assert_eq!(back, ds);
        // A second round trip is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        write_native(&back, dir2.path()).unwrap();
        for f in [METADATA_FILE, CHANNELS_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_native(&sample_dataset(), dir.path()).unwrap();
        let blob = dir.path().join(CHANNELS_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_native(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn wrong_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_native(&sample_dataset(), dir.path()).unwrap();
        let meta = dir.path().join(METADATA_FILE);
        let text = fs::read_to_string(&meta).unwrap().replace(FORMAT_TAG, "other");
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_native(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn metadata_states_units() {
        let dir = tempfile::tempdir().unwrap();
        write_native(&sample_dataset(), dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(METADATA_FILE)).unwrap()).unwrap();
        assert_eq!(v["units"]["length"], "m");
        assert_eq!(v["acquisition"]["n_samples"], 10);
    }
}
