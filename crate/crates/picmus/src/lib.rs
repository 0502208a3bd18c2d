//! Reader for the plane-wave imaging challenge files.
//!
//! A challenge acquisition ships as up to three HDF5 files sharing a stem:
//! `<stem>_dataset_rf.hdf5` (channel data), `<stem>_scan.hdf5` (the
//! reconstruction grid) and `<stem>_phantom.hdf5` (ground truth). Each keeps
//! its arrays in the group [`DATASET_GROUP`]. Only the RF variant is read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hdf5::{File, Group};
use icabeam::native::Dataset;
use icabeam::simulate::{Cyst, Targets};
use icabeam::{ImageGrid, PlaneWaveAcquisition, ProbeGeometry};
use ndarray::{Array3, ArrayD, Ix3};

pub const DATASET_GROUP: &str = "US/US_DATASET0000";

/// Fallback grid when no scan file is found, metres.
pub const DEFAULT_X_RANGE: (f64, f64) = (-18e-3, 18e-3);
pub const DEFAULT_Z_RANGE: (f64, f64) = (5e-3, 50e-3);
pub const DEFAULT_DX: f64 = 0.1e-3;

#[derive(Debug, thiserror::Error)]
pub enum PicmusError {
    #[error("{path}: {source}")]
    Hdf5 {
        path: PathBuf,
        #[source]
        source: hdf5::Error,
    },
    #[error("{path}: missing `{field}`")]
    Missing { path: PathBuf, field: String },
    #[error("{path}: holds IQ (demodulated) data; pass the RF variant of the file (`*_dataset_rf.hdf5`)")]
    IqData { path: PathBuf },
    #[error("{path}: {msg}")]
    Layout { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] icabeam::Error),
}

pub type Result<T> = std::result::Result<T, PicmusError>;

/// The dataset file and whichever companions sit next to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeFiles {
    pub dataset: PathBuf,
    pub scan: Option<PathBuf>,
    pub phantom: Option<PathBuf>,
}

impl ChallengeFiles {
    /// Find `<stem>_scan.hdf5` and `<stem>_phantom.hdf5` beside `dataset`.
    pub fn locate(dataset: &Path) -> Self {
        let dir = dataset.parent().unwrap_or(Path::new("."));
        let name = dataset.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let stem = name.find("_dataset").map(|i| &name[..i]);
        let ext = dataset.extension().and_then(|e| e.to_str()).unwrap_or("hdf5");
        let sibling = |kind: &str| {
            let p = dir.join(format!("{}_{kind}.{ext}", stem?));
            p.is_file().then_some(p)
        };
        Self {
            dataset: dataset.to_path_buf(),
            scan: sibling("scan"),
            phantom: sibling("phantom"),
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    group: Group,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        // Failures are reported through the returned errors instead.
        hdf5::silence_errors(true);
        let file = File::open(path).map_err(|source| PicmusError::Hdf5 {
            path: path.to_path_buf(),
            source,
        })?;
        let group = file.group(DATASET_GROUP).map_err(|_| PicmusError::Missing {
            path: path.to_path_buf(),
            field: DATASET_GROUP.into(),
        })?;
        Ok(Self { path, group })
    }

    fn has(&self, name: &str) -> bool {
        // Check each level so a missing parent is not an HDF5 error.
        let mut prefix = String::new();
        name.split('/').all(|part| {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(part);
            self.group.link_exists(&prefix)
        })
    }

    fn missing(&self, name: &str) -> PicmusError {
        PicmusError::Missing {
            path: self.path.to_path_buf(),
            field: format!("{DATASET_GROUP}/{name}"),
        }
    }

    fn hdf5(&self, source: hdf5::Error) -> PicmusError {
        PicmusError::Hdf5 {
            path: self.path.to_path_buf(),
            source,
        }
    }

    fn array(&self, name: &str) -> Result<ArrayD<f64>> {
        if !self.has(name) {
            return Err(self.missing(name));
        }
        let ds = self.group.dataset(name).map_err(|e| self.hdf5(e))?;
        ds.read_dyn::<f64>().map_err(|e| self.hdf5(e))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.array(name)?.iter().copied().collect())
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.vector(name)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(self.layout(format!("`{name}` should hold one value, found {}", v.len()))),
        }
    }

    fn optional_scalar(&self, name: &str) -> Result<Option<f64>> {
        if self.has(name) {
            self.scalar(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn layout(&self, msg: String) -> PicmusError {
        PicmusError::Layout {
            path: self.path.to_path_buf(),
            msg,
        }
    }
}

/// Element x positions from a `3 x n` or `n x 3` geometry array.
fn element_positions(r: &Reader, geometry: &ArrayD<f64>) -> Result<Vec<f64>> {
    let shape = geometry.shape().to_vec();
    let g = geometry
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| r.layout(format!("probe_geometry has shape {shape:?}, expected 2-D")))?;
    if shape[0] == 3 && shape[1] != 3 {
        Ok(g.row(0).to_vec())
    } else if shape[1] == 3 {
        Ok(g.column(0).to_vec())
    } else {
        Err(r.layout(format!("probe_geometry has shape {shape:?}, expected 3 x n")))
    }
}

/// Rearrange channel data to `(angle, element, sample)` whatever order the
/// file stores it in.
fn arrange(r: &Reader, data: ArrayD<f64>, n_angles: usize, n_elements: usize) -> Result<Array3<f64>> {
    let shape = data.shape().to_vec();
    let data = match shape.len() {
        2 if n_angles == 1 => data.insert_axis(ndarray::Axis(0)),
        3 => data,
        _ => {
            return Err(r.layout(format!(
                "channel data has shape {shape:?}; expected {n_angles} angles x {n_elements} elements x samples"
            )))
        }
    };
    let shape = data.shape().to_vec();
    // Try orders with the angle and element axes where the sizes say, C order first.
    let orders: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for order in orders {
        let (a, e, s) = (order[0], order[1], order[2]);
        if shape[a] == n_angles && shape[e] == n_elements && shape[s] > 1 {
            let permuted = data.permuted_axes(vec![a, e, s]);
            let arr = permuted
                .into_dimensionality::<Ix3>()
                .map_err(|e| r.layout(e.to_string()))?;
            return Ok(arr.as_standard_layout().into_owned());
        }
    }
    Err(r.layout(format!(
        "channel data has shape {shape:?}; no axes match {n_angles} angles and {n_elements} elements"
    )))
}

/// Channel data, probe and timing from a `*_dataset_rf` file.
pub fn read_acquisition(
    path: &Path,
) -> Result<(ProbeGeometry, PlaneWaveAcquisition, BTreeMap<String, serde_json::Value>)> {
    let r = Reader::open(path)?;
    let modulation = r.optional_scalar("modulation_frequency")?.unwrap_or(0.0);
    let has_imag = r.has("data/imag") && r.array("data/imag")?.iter().any(|&v| v != 0.0);
    if modulation != 0.0 || has_imag {
        return Err(PicmusError::IqData {
            path: path.to_path_buf(),
        });
    }
    let angles = r.vector("angles")?;
    let element_x = element_positions(&r, &r.array("probe_geometry")?)?;
    if element_x.len() < 2 {
        return Err(r.layout("probe has fewer than two elements".into()));
    }
    let pitch = (element_x[element_x.len() - 1] - element_x[0]) / (element_x.len() - 1) as f64;
    let probe = ProbeGeometry::new(element_x, pitch)?;
    let data_name = if r.has("data/real") { "data/real" } else { "data" };
    let channel_data = arrange(&r, r.array(data_name)?, angles.len(), probe.n_elements())?;
    let acquisition = PlaneWaveAcquisition {
        angles,
        channel_data,
        sampling_rate: r.scalar("sampling_frequency")?,
        sound_speed: r.scalar("sound_speed")?,
        start_time: r.scalar("initial_time")?,
    };
    icabeam::model::validate(&acquisition, &probe)?;
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), serde_json::json!("challenge"));
    meta.insert("dataset_file".into(), serde_json::json!(path.display().to_string()));
    if let Some(pulse) = r.optional_scalar("transmit_frequency")? {
        meta.insert("transmit_frequency_hz".into(), serde_json::json!(pulse));
    }
    Ok((probe, acquisition, meta))
}

/// Reconstruction grid from a `*_scan` file.
pub fn read_scan(path: &Path) -> Result<ImageGrid> {
    let r = Reader::open(path)?;
    Ok(ImageGrid::new(r.vector("x_axis")?, r.vector("z_axis")?)?)
}

/// Point targets (`sca`) or cysts (`occlusionCenterX/Z`, `occlusionDiameter`)
/// from a `*_phantom` file. Cyst phantoms list their speckle in `sca`, so
/// points are only taken when no cysts are present.
pub fn read_phantom(path: &Path) -> Result<Targets> {
    let r = Reader::open(path)?;
    if r.has("occlusionCenterX") {
        let xs = r.vector("occlusionCenterX")?;
        let zs = r.vector("occlusionCenterZ")?;
        let ds = r.vector("occlusionDiameter")?;
        if xs.len() != zs.len() || xs.len() != ds.len() {
            return Err(r.layout(format!(
                "cyst fields disagree in length: {} x, {} z, {} diameters",
                xs.len(),
                zs.len(),
                ds.len()
            )));
        }
        let cysts = xs
            .iter()
            .zip(&zs)
            .zip(&ds)
            .map(|((&x, &z), &d)| Cyst { x, z, radius: d / 2.0 })
            .collect();
        return Ok(Targets {
            points: Vec::new(),
            cysts,
        });
    }
    let sca = r.array("sca")?;
    let shape = sca.shape().to_vec();
    let g = sca
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| r.layout(format!("sca has shape {shape:?}, expected n x 3")))?;
    let points = if shape[1] == 3 {
        g.rows().into_iter().map(|p| (p[0], p[2])).collect()
    } else if shape[0] == 3 {
        g.columns().into_iter().map(|p| (p[0], p[2])).collect()
    } else {
        return Err(r.layout(format!("sca has shape {shape:?}, expected n x 3")));
    };
    Ok(Targets {
        points,
        cysts: Vec::new(),
    })
}

fn default_grid(sound_speed: f64, transmit_frequency: Option<f64>) -> Result<ImageGrid> {
    let lambda = sound_speed / transmit_frequency.unwrap_or(icabeam::simulate::DEFAULT_CENTER_FREQUENCY);
    Ok(ImageGrid::spanning(
        DEFAULT_X_RANGE.0,
        DEFAULT_X_RANGE.1,
        DEFAULT_DX,
        DEFAULT_Z_RANGE.0,
        DEFAULT_Z_RANGE.1,
        lambda / 8.0,
    )?)
}

/// Read a challenge acquisition plus its scan and phantom companions when
/// present. Nothing is returned unless every file read cleanly.
pub fn read_challenge_dataset(path: &Path) -> Result<Dataset> {
    let files = ChallengeFiles::locate(path);
    let (probe, acquisition, mut provenance) = read_acquisition(&files.dataset)?;
    let grid = match &files.scan {
        Some(p) => {
            provenance.insert("scan_file".into(), serde_json::json!(p.display().to_string()));
            read_scan(p)?
        }
        None => {
            log::warn!("no scan file beside {}; using the default grid", path.display());
            let f0 = provenance.get("transmit_frequency_hz").and_then(|v| v.as_f64());
            default_grid(acquisition.sound_speed, f0)?
        }
    };
    let targets = match &files.phantom {
        Some(p) => {
            provenance.insert("phantom_file".into(), serde_json::json!(p.display().to_string()));
            read_phantom(p)?
        }
        None => Targets::default(),
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("challenge")
        .to_string();
    let dataset = Dataset {
        name,
        probe,
        acquisition,
        grid,
        targets,
        provenance,
    };
    dataset.validate()?;
    Ok(dataset)
}
