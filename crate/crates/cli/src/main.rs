use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use icabeam::image_io::{read_csv_image, write_image, ImageFormat};
use icabeam::native::{read_native, write_native};
use icabeam::pipeline::{
    compare, estimate_weights, evaluate, noise_sweep, run, simulate_preset, AngleSelection, EvalOptions, Method,
    PhantomKind, PresetOptions, RunConfig,
};
use icabeam::report::{write_csv, write_json, MetricRow, Provenance};
use icabeam::{Contrast, Dataset, Interpolation, ObservationLayout, ProfileMapping, Window};
use serde::Serialize;

/// Exit status when ICA did not converge and no override was given.
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "icabeam",
    version,
    about = "Plane-wave beamforming with ICA-estimated apodization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom into a native dataset directory.
    Simulate(SimulateArgs),
    /// Beamform a dataset into a B-mode image.
    Beamform(BeamformArgs),
    /// FWHM and CNR of a CSV B-mode image against a dataset's targets.
    Metrics(MetricsArgs),
    /// Estimated ICA window and its spectrum.
    Weights(WeightsArgs),
    /// Image error caused by noisy receive channels.
    NoiseSweep(NoiseSweepArgs),
    /// FWHM and CNR for several methods and angle counts.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    phantom: PhantomKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of transmit angles, spread evenly over the angle span.
    #[arg(long)]
    angles: Option<usize>,
    /// TOML file with simulation settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Beamforming and ICA settings shared by the processing commands. Unset
/// flags fall back to `--config`, then to the library defaults.
#[derive(Args)]
struct RunArgs {
    /// TOML file holding a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    f_number: Option<f64>,
    /// `boxcar`, `hann`, `tukey:ALPHA` or `ica`.
    #[arg(long)]
    window: Option<Window>,
    #[arg(long)]
    interpolation: Option<Interpolation>,
    /// How ICA weights map onto each pixel's aperture: `element` or `centered`.
    #[arg(long)]
    mapping: Option<ProfileMapping>,
    /// ICA observation rows: `element` or `aperture`.
    #[arg(long)]
    layout: Option<ObservationLayout>,
    /// `logcosh`, `logcosh:A1` or `gauss`.
    #[arg(long)]
    contrast: Option<Contrast>,
    #[arg(long)]
    ica_seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Estimate ICA weights on every transmit instead of reusing the 0° estimate.
    #[arg(long)]
    per_angle_weights: bool,
    /// Use an ICA estimate even if it did not converge.
    #[arg(long)]
    allow_nonconverged: bool,
    #[arg(long)]
    dynamic_range: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let b = &mut cfg.beamform;
        if let Some(v) = self.f_number {
            b.f_number = v;
        }
        if let Some(v) = self.window {
            b.window = v;
        }
        if let Some(v) = self.interpolation {
            b.interpolation = v;
        }
        if let Some(v) = self.mapping {
            b.profile_mapping = v;
        }
        if let Some(v) = self.layout {
            b.observation_layout = v;
        }
        if self.per_angle_weights {
            b.compound_reuse_zero_weights = false;
        }
        if self.allow_nonconverged {
            b.allow_nonconverged = true;
        }
        if let Some(v) = self.contrast {
            cfg.ica.contrast = v;
        }
        if let Some(v) = self.ica_seed {
            cfg.ica.seed = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.ica.max_iterations = v;
        }
        if let Some(v) = self.dynamic_range {
            cfg.dynamic_range_db = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BeamformArgs {
    /// Native dataset directory or challenge `.hdf5` file.
    #[arg(long = "in")]
    input: PathBuf,
    /// `das`, `cf` or `ica`; a `+compound` suffix is accepted.
    #[arg(long, default_value = "das")]
    method: Method,
    /// `all`, a count such as `11`, or `idx:I,J,...`.
    #[arg(long, default_value = "1")]
    angles: AngleSelection,
    #[command(flatten)]
    run: RunArgs,
    /// Output image; the format follows the extension (`.png`, `.pgm`, `.csv`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// CSV image written by `beamform`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Dynamic range the image was compressed to, dB.
    #[arg(long)]
    dynamic_range: Option<f64>,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Minimum FFT length for the spectrum.
    #[arg(long, default_value_t = 1024)]
    n_fft: usize,
    /// Per-element weights CSV; the spectrum goes to `<stem>_spectrum.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// One noisy channel set per flag: zero-based indices and ranges, e.g.
    /// `63` or `61-65` or `10,20`.
    #[arg(long, required = true)]
    channels: Vec<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-40")]
    snr_db: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "das,cf,ica")]
    methods: Vec<Method>,
    #[arg(long, default_value = "1")]
    angles: AngleSelection,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "das,cf,ica")]
    methods: Vec<Method>,
    /// Angle counts, each chosen symmetrically about 0°.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    angles: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    report: PathBuf,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let ds = match ext.as_deref() {
        Some("hdf5" | "h5") => icabeam_picmus::read_challenge_dataset(path)?,
        _ => read_native(path).with_context(|| format!("reading dataset {}", path.display()))?,
    };
    log::info!(
        "{}: {} angles, {} elements, {} samples",
        ds.name,
        ds.acquisition.n_angles(),
        ds.acquisition.n_elements(),
        ds.acquisition.channel_data.dim().2
    );
    Ok(ds)
}

/// Sidecar path `<out>.provenance.json`.
fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    out.with_file_name(name)
}

fn write_provenance(out: &Path, record: &Provenance) -> Result<()> {
    let p = provenance_path(out);
    write_json(&p, record).with_context(|| format!("writing {}", p.display()))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn parse_channels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                if b < a {
                    bail!("channel range {part} is reversed");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().with_context(|| format!("bad channel `{part}`"))?),
        }
    }
    if out.is_empty() {
        bail!("empty channel set `{text}`");
    }
    Ok(out)
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let mut opts: PresetOptions = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PresetOptions::default(),
    };
    if let Some(n) = a.angles {
        opts.n_angles = n;
    }
    let ds = simulate_preset(a.phantom, &opts, a.seed)?;
    write_native(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut prov = Provenance::new("simulate", to_value(&opts)?);
    prov.seeds.push(a.seed);
    prov.outputs.push(a.out.display().to_string());
    write_provenance(&a.out, &prov)
}

#[derive(Serialize)]
struct BeamformRecord<'a> {
    dataset: &'a str,
    run: &'a RunConfig,
    angle_indices: &'a [usize],
}

fn beamform_cmd(a: &BeamformArgs) -> Result<()> {
    let ds = load_dataset(&a.input)?;
    let mut cfg = a.run.resolve()?;
    cfg.method = a.method;
    cfg.angles = a.angles.clone();
    let format = ImageFormat::from_path(&a.out)?;
    let out = run(&ds, &cfg)?;
    write_image(&out.bmode, &a.out, format).with_context(|| format!("writing {}", a.out.display()))?;
    let record = BeamformRecord {
        dataset: &ds.name,
        run: &cfg,
        angle_indices: &out.angle_indices,
    };
    let mut prov = Provenance::new("beamform", to_value(&record)?);
    prov.seeds.push(cfg.ica.seed);
    prov.converged = out.estimates.iter().map(|e| e.converged).collect();
    prov.outputs.push(a.out.display().to_string());
    write_provenance(&a.out, &prov)
}

fn metrics_cmd(a: &MetricsArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    // The image's own provenance, when present, names the method that made it.
    let origin: Option<Provenance> = fs::read_to_string(provenance_path(&a.input))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let run_cfg: Option<RunConfig> = origin
        .as_ref()
        .and_then(|p| p.config.get("run"))
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let dr = a
        .dynamic_range
        .or(run_cfg.as_ref().map(|c| c.dynamic_range_db))
        .unwrap_or(icabeam::metrics::DEFAULT_DYNAMIC_RANGE_DB);
    let image = read_csv_image(&a.input, &ds.grid, dr)?;
    let ev = evaluate(&ds, &image, &EvalOptions::default())?;
    let n_angles = origin
        .as_ref()
        .and_then(|p| p.config.get("angle_indices"))
        .and_then(|v| v.as_array())
        .map_or(0, |v| v.len());
    let converged = origin
        .as_ref()
        .and_then(|p| (!p.converged.is_empty()).then(|| p.converged.iter().all(|&c| c)));
    let row = MetricRow {
        dataset: ds.name.clone(),
        method: run_cfg.as_ref().map_or("unknown".into(), |c| c.method.to_string()),
        n_angles,
        fwhm_axial_mm: ev.fwhm.as_ref().map(|f| f.axial_mm),
        fwhm_lateral_mm: ev.fwhm.as_ref().map(|f| f.lateral_mm),
        cnr_db: ev.cnr_db,
        seed: run_cfg.as_ref().map_or(0, |c| c.ica.seed),
        converged,
    };
    write_csv(&a.report, &[row])?;
    let mut prov = Provenance::new("metrics", to_value(&EvalOptions::default())?);
    prov.seeds.extend(run_cfg.map(|c| c.ica.seed));
    prov.converged.extend(converged);
    prov.outputs.push(a.report.display().to_string());
    write_provenance(&a.report, &prov)
}

#[derive(Serialize)]
struct WeightRow {
    row: usize,
    weight: f64,
    mixing: f64,
}

#[derive(Serialize)]
struct SpectrumRow {
    frequency: f64,
    magnitude_db: f64,
}

fn weights_cmd(a: &WeightsArgs) -> Result<()> {
    let ds = load_dataset(&a.input)?;
    let mut cfg = a.run.resolve()?;
    cfg.method = Method::Ica;
    let (est, spec) = estimate_weights(&ds, &cfg, a.n_fft)?;
    if !est.converged && !cfg.beamform.allow_nonconverged {
        return Err(icabeam::Error::NotConverged {
            iterations: est.iterations_used,
            last_dot: est.convergence_trace.last().copied().unwrap_or(f64::NAN),
        }
        .into());
    }
    let rows: Vec<WeightRow> = est
        .row_element
        .iter()
        .zip(&est.w_aperture.weights)
        .zip(&est.mixing_aperture.weights)
        .map(|((&row, &weight), &mixing)| WeightRow { row, weight, mixing })
        .collect();
    write_csv(&a.out, &rows)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    let spec_path = a.out.with_file_name(format!("{stem}_spectrum.csv"));
    let spec_rows: Vec<SpectrumRow> = spec
        .frequency
        .iter()
        .zip(&spec.magnitude_db)
        .map(|(&frequency, &magnitude_db)| SpectrumRow {
            frequency,
            magnitude_db,
        })
        .collect();
    write_csv(&spec_path, &spec_rows)?;
    let config = serde_json::json!({
        "dataset": ds.name,
        "run": cfg,
        "iterations_used": est.iterations_used,
        "main_lobe_width": spec.main_lobe_width,
        "side_lobe_db": spec.side_lobe_db,
        "leakage": spec.leakage,
    });
    let mut prov = Provenance::new("weights", config);
    prov.seeds.push(est.seed);
    prov.converged.push(est.converged);
    prov.outputs.push(a.out.display().to_string());
    prov.outputs.push(spec_path.display().to_string());
    write_provenance(&a.out, &prov)
}

fn noise_sweep_cmd(a: &NoiseSweepArgs) -> Result<()> {
    let ds = load_dataset(&a.input)?;
    let mut cfg = a.run.resolve()?;
    cfg.angles = a.angles.clone();
    let sets = a
        .channels
        .iter()
        .map(|c| parse_channels(c))
        .collect::<Result<Vec<_>>>()?;
    let sweep = noise_sweep(&ds, &sets, &a.snr_db, &a.methods, &cfg, a.noise_seed)?;
    write_csv(&a.report, &sweep.rows)?;
    let config = serde_json::json!({
        "dataset": ds.name,
        "run": cfg,
        "channel_sets": sets,
        "snr_db": a.snr_db,
        "methods": a.methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "snr_reference": "per-channel clean signal power",
    });
    let mut prov = Provenance::new("noise-sweep", config);
    prov.seeds = vec![cfg.ica.seed, a.noise_seed];
    prov.converged = sweep.rows.iter().filter_map(|r| r.converged).collect();
    prov.outputs.push(a.report.display().to_string());
    write_provenance(&a.report, &prov)
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let ds = load_dataset(&a.input)?;
    let cfg = a.run.resolve()?;
    let eval = EvalOptions::default();
    let rows = compare(&ds, &a.methods, &a.angles, &cfg, &eval)?;
    write_csv(&a.report, &rows)?;
    let config = serde_json::json!({
        "dataset": ds.name,
        "run": cfg,
        "methods": a.methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "angle_counts": a.angles,
        "eval": eval,
    });
    let mut prov = Provenance::new("compare", config);
    prov.seeds.push(cfg.ica.seed);
    prov.converged = rows.iter().filter_map(|r| r.converged).collect();
    prov.outputs.push(a.report.display().to_string());
    write_provenance(&a.report, &prov)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Beamform(a) => beamform_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Weights(a) => weights_cmd(a),
        Command::NoiseSweep(a) => noise_sweep_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let not_converged = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<icabeam::Error>(),
                    Some(icabeam::Error::NotConverged { .. })
                )
            });
            if not_converged {
                eprintln!("hint: pass --allow-nonconverged to use the estimate anyway");
                ExitCode::from(EXIT_NOT_CONVERGED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_lists() {
        assert_eq!(parse_channels("63").unwrap(), vec![63]);
        assert_eq!(parse_channels("61-63, 70").unwrap(), vec![61, 62, 63, 70]);
        assert!(parse_channels("5-3").is_err());
        assert!(parse_channels("").is_err());
        assert!(parse_channels("x").is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            provenance_path(Path::new("out/img.png")),
            Path::new("out/img.png.provenance.json")
        );
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "dynamic_range_db = 50.0\n[ica]\nseed = 7\nmax_iterations = 300\n").unwrap();
        let cli = Cli::try_parse_from([
            "icabeam",
            "beamform",
            "--in",
            "d",
            "--out",
            "x.png",
            "--config",
            p.to_str().unwrap(),
            "--ica-seed",
            "9",
        ])
        .unwrap();
        let Command::Beamform(a) = cli.command else { panic!() };
        let cfg = a.run.resolve().unwrap();
        assert_eq!(cfg.ica.seed, 9);
        assert_eq!(cfg.ica.max_iterations, 300);
        assert_eq!(cfg.dynamic_range_db, 50.0);
        assert_eq!(cfg.beamform, icabeam::BeamformConfig::default());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
