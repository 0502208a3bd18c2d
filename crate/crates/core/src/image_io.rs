//! B-mode image files: 8-bit PGM and PNG, and full-precision CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{BModeImage, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
    Csv,
}

impl ImageFormat {
    /// Format implied by the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("pgm") => Ok(Self::Pgm),
            Some("png") => Ok(Self::Png),
            Some("csv") => Ok(Self::Csv),
            _ => Err(Error::InvalidConfig(format!(
                "cannot infer image format of {}; use .pgm, .png or .csv",
                path.display()
            ))),
        }
    }
}

/// Map `[-dynamic_range, 0]` dB linearly onto `0..=255`.
pub fn gray_levels(image: &BModeImage) -> Vec<u8> {
    let dr = image.dynamic_range_db;
    image
        .db
        .iter()
        .map(|&v| (((v + dr) / dr).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_image(image: &BModeImage, path: &Path, format: ImageFormat) -> Result<()> {
    let (nz, nx) = image.db.dim();
    match format {
        ImageFormat::Pgm => {
            let mut out = BufWriter::new(fs::File::create(path)?);
            write!(out, "P5\n{nx} {nz}\n255\n")?;
            out.write_all(&gray_levels(image))?;
            out.flush()?;
        }
        ImageFormat::Png => {
            let file = BufWriter::new(fs::File::create(path)?);
            let mut enc = png::Encoder::new(file, nx as u32, nz as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&gray_levels(image))?;
            writer.finish()?;
        }
        ImageFormat::Csv => {
            let mut out = BufWriter::new(fs::File::create(path)?);
            for row in image.db.outer_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.5e}")).collect();
                writeln!(out, "{}", line.join(","))?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Read a CSV written by [`write_image`] back onto `grid`.
pub fn read_csv_image(path: &Path, grid: &ImageGrid, dynamic_range_db: f64) -> Result<BModeImage> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if row.len() != grid.nx() {
            return Err(Error::format(
                path,
                format!(
                    "line {} has {} values, grid has {} columns",
                    i + 1,
                    row.len(),
                    grid.nx()
                ),
            ));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != grid.nz() {
        return Err(Error::format(path, format!("{rows} rows, grid has {}", grid.nz())));
    }
    let db = Array2::from_shape_vec((rows, grid.nx()), values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(BModeImage {
        db,
        grid: grid.clone(),
        dynamic_range_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> BModeImage {
        let grid = ImageGrid::uniform(0.0, 1e-4, 3, 1e-3, 1e-4, 2).unwrap();
        BModeImage {
            db: Array2::from_shape_vec((2, 3), vec![0.0, -30.0, -60.0, -12.345678, -0.000123456, -59.99]).unwrap(),
            grid,
            dynamic_range_db: 60.0,
        }
    }

    #[test]
    fn gray_mapping_endpoints() {
        let g = gray_levels(&image());
        assert_eq!(g[0], 255);
        assert_eq!(g[1], 128);
        assert_eq!(g[2], 0);
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_image(&image(), &p, ImageFormat::Pgm).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(bytes[11], 255);
    }

    #[test]
    fn csv_round_trip_six_digits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let img = image();
        write_image(&img, &p, ImageFormat::Csv).unwrap();
        let back = read_csv_image(&p, &img.grid, 60.0).unwrap();
        for (a, b) in img.db.iter().zip(back.db.iter()) {
            assert!((a - b).abs() <= 5e-6 * a.abs().max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn identical_images_give_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [ImageFormat::Pgm, ImageFormat::Png, ImageFormat::Csv] {
            let a = dir.path().join("a");
            let b = dir.path().join("b");
            write_image(&image(), &a, fmt).unwrap();
            write_image(&image(), &b, fmt).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(ImageFormat::from_path(Path::new("x.PNG")).unwrap(), ImageFormat::Png);
        assert!(ImageFormat::from_path(Path::new("x.jpg")).is_err());
    }
}
