//! Episode directories: a JSON manifest, raw little-endian `f64` arrays and
//! optional PGM frames.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pidvae_core::datagen::{Episode, GenRecord};
use pidvae_core::experiment::Experiment;
use pidvae_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{io, json, Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "pidvae-episode";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesInfo {
    pub dir: String,
    pub width: usize,
    pub height: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dtype: String,
    pub endianness: String,
    pub layout: String,
    pub generator: GenRecord,
    pub arrays: BTreeMap<String, ArrayInfo>,
    pub frames: Option<FramesInfo>,
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * m.len());
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io(path))
}

pub fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() != 8 * rows * cols {
        return Err(Error::Episode {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes for {rows}x{cols} f64, found {}", 8 * rows * cols, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Matrix::from_raw(rows, cols, data))
}

/// Binary PGM (P5, maxval 255) with values in `[0, 1]` scaled to gray levels.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "PGM size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(&out).map_err(io(path))
}

/// Frame geometry when the observations are images.
pub fn frame_shape(record: &GenRecord) -> Option<(usize, usize)> {
    let d = &record.config.data;
    (record.config.experiment != Experiment::Lorenz).then_some((d.frame_width, d.frame_height))
}

/// Writes every PGM frame of `y` into `dir`.
pub fn write_frames(dir: &Path, y: &Matrix, width: usize, height: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    for n in 0..y.rows() {
        write_pgm(&dir.join(format!("frame_{n:04}.pgm")), width, height, y.row(n))?;
    }
    Ok(())
}

/// Writes `episode` into `dir`, creating it if needed.
pub fn write_episode(dir: &Path, episode: &Episode, pgm: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut arrays = BTreeMap::new();
    let mut put = |name: &str, m: &Matrix| -> Result<()> {
        let file = format!("{name}.bin");
        write_matrix(&dir.join(&file), m)?;
        arrays.insert(
            name.to_string(),
            ArrayInfo {
                file,
                rows: m.rows(),
                cols: m.cols(),
            },
        );
        Ok(())
    };
    put("y", &episode.y)?;
    put("clean_y", &episode.clean_y)?;
    if let Some(u) = &episode.truth_u {
        put("truth_u", u)?;
    }
    if let Some(x) = &episode.truth_x {
        put("truth_x", x)?;
    }
    let frames = match frame_shape(&episode.gen) {
        Some((width, height)) if pgm => {
            write_frames(&dir.join("frames"), &episode.y, width, height)?;
            Some(FramesInfo {
                dir: "frames".into(),
                width,
                height,
                count: episode.y.rows(),
            })
        }
        _ => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: episode.gen.config.seed,
        dtype: "f64".into(),
        endianness: "little".into(),
        layout: "row-major".into(),
        generator: episode.gen.clone(),
        arrays,
        frames,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(json(&path))?;
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(json(&path))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Episode {
            path,
            reason: format!("unsupported format {} version {}", manifest.format, manifest.version),
        });
    }
    if manifest.dtype != "f64" || manifest.endianness != "little" {
        return Err(Error::Episode {
            path,
            reason: format!("unsupported payload {} {}", manifest.dtype, manifest.endianness),
        });
    }
    Ok(manifest)
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let manifest = read_manifest(dir)?;
    let load = |name: &str| -> Result<Option<Matrix>> {
        match manifest.arrays.get(name) {
            Some(a) => Ok(Some(read_matrix(&dir.join(&a.file), a.rows, a.cols)?)),
            None => Ok(None),
        }
    };
    let missing = |name: &str| Error::Episode {
        path: PathBuf::from(dir),
        reason: format!("manifest lists no `{name}` array"),
    };
    let y = load("y")?.ok_or_else(|| missing("y"))?;
    let clean_y = load("clean_y")?.ok_or_else(|| missing("clean_y"))?;
    if clean_y.shape() != y.shape() {
        return Err(Error::Episode {
            path: dir.to_path_buf(),
            reason: "y and clean_y differ in shape".into(),
        });
    }
    Ok(Episode {
        y,
        clean_y,
        truth_u: load("truth_u")?,
        truth_x: load("truth_x")?,
        gen: manifest.generator,
    })
}
