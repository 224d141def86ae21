//! On-disk dataset layout.
//!
//! A dataset directory holds `materials.jsonl`, one JSON object per record
//! with fields `id`, `latent`, `crystal`, `dos.energies`, `dos.values`,
//! `density_ref` and `properties`, plus one binary voxel file per density
//! grid under `density/`. Voxel files are a 16-byte header (magic `MMV1`,
//! grid size as little-endian `u32`, 8 reserved zero bytes) followed by
//! `G³` little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{CrystalGraph, Dataset, DensityGrid, DosCurve, MaterialRecord};
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "materials.jsonl";
pub const DENSITY_DIR: &str = "density";
pub const VOXEL_MAGIC: &[u8; 4] = b"MMV1";

#[derive(Serialize, Deserialize)]
struct DosLine {
    energies: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    #[serde(default)]
    latent: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crystal: Option<CrystalGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dos: Option<DosLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    density_ref: Option<String>,
    #[serde(default)]
    properties: BTreeMap<String, f64>,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn write_voxels(path: &Path, grid: &DensityGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_voxels_to(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn write_voxels_to(w: &mut impl Write, grid: &DensityGrid) -> Result<()> {
    w.write_all(VOXEL_MAGIC)?;
    w.write_u32::<LittleEndian>(grid.grid_size() as u32)?;
    w.write_all(&[0u8; 8])?;
    for &v in grid.voxels() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_voxels(path: &Path) -> Result<DensityGrid> {
    let mut r = BufReader::new(File::open(path)?);
    read_voxels_from(&mut r)
}

pub fn read_voxels_from(r: &mut impl Read) -> Result<DensityGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOXEL_MAGIC {
        return Err(Error::Format("bad voxel magic".into()));
    }
    let g = r.read_u32::<LittleEndian>()? as usize;
    let mut reserved = [0u8; 8];
    r.read_exact(&mut reserved)?;
    let n = g
        .checked_pow(3)
        .ok_or_else(|| Error::Format(format!("grid size {g} too large")))?;
    let mut voxels = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut voxels)?;
    DensityGrid::new(g, voxels)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let has_density = data.records.iter().any(|r| r.density.is_some());
    if has_density {
        fs::create_dir_all(dir.join(DENSITY_DIR))?;
    }
    let mut w = BufWriter::new(File::create(dir.join(RECORDS_FILE))?);
    for rec in &data.records {
        let density_ref = match &rec.density {
            Some(grid) => {
                let rel = format!("{DENSITY_DIR}/{}.mmv", file_stem(&rec.id));
                write_voxels(&dir.join(&rel), grid)?;
                Some(rel)
            }
            None => None,
        };
        let line = RecordLine {
            id: rec.id.clone(),
            latent: rec.latent.clone(),
            crystal: rec.crystal.clone(),
            dos: rec.dos.as_ref().map(|d| DosLine {
                energies: d.energies().to_vec(),
                values: d.values().to_vec(),
            }),
            density_ref,
            properties: rec.properties.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record; the returned dataset's mask is the intersection of
/// the modalities present across records.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let f = File::open(dir.join(RECORDS_FILE))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{RECORDS_FILE}:{}: {e}", lineno + 1)))?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        if let Some(c) = &raw.crystal {
            c.validate()?;
        }
        let dos = raw
            .dos
            .map(|d| DosCurve::new(d.energies, d.values))
            .transpose()?;
        let density = raw
            .density_ref
            .map(|rel| read_voxels(&dir.join(rel)))
            .transpose()?;
        let rec = MaterialRecord {
            id: raw.id,
            latent: raw.latent,
            crystal: raw.crystal,
            dos,
            density,
            properties: raw.properties,
        };
        if rec.modalities().is_empty() {
            return Err(Error::EmptyRecord(rec.id));
        }
        records.push(rec);
    }
    Ok(Dataset::new(records))
}

/// Reads a standalone DOS curve `{"energies": [...], "values": [...]}`.
pub fn read_dos_json(path: &Path) -> Result<DosCurve> {
    let raw: DosLine = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    DosCurve::new(raw.energies, raw.values)
}

pub fn write_dos_json(path: &Path, dos: &DosCurve) -> Result<()> {
    let line = DosLine {
        energies: dos.energies().to_vec(),
        values: dos.values().to_vec(),
    };
    fs::write(path, serde_json::to_vec(&line)?)?;
    Ok(())
}
