//! Nearest-neighbour screening over an embedded candidate library.
//!
//! Index files are little-endian: magic `MMIX`, `u32` version, `u32` M,
//! `u32` d, `u32`-prefixed source hash, M `u32`-prefixed UTF-8 ids, then the
//! `M×d` row-major `f32` matrix of unit-norm embeddings.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingBatch, Vector};
use crate::encoders::{CrystalEncoder, DosEncoder, Encoder};
use crate::error::{Error, Result};
use crate::evalkit::{dos_mae, unit_rows};
use crate::scalar::{Scalar, NORM_EPS};
use crate::synthdata::{Dataset, DosCurve, MaterialRecord, Modality};

pub const INDEX_MAGIC: &[u8; 4] = b"MMIX";
pub const INDEX_VERSION: u32 = 1;
/// Sample size of the interpretability export preset.
pub const PAPER_EXPORT_SAMPLE: usize = 16000;
const UNIT_TOL: f64 = 1e-6;

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    d: usize,
    matrix: Vec<f32>,
    source_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

impl EmbeddingIndex {
    /// Normalizes `rows` and stores them as `f32`.
    pub fn from_batch<T: Scalar>(ids: Vec<String>, rows: &EmbeddingBatch<T>, source_hash: &str) -> Result<Self> {
        if ids.len() != rows.n() {
            return Err(Error::BatchMismatch {
                expected: rows.n(),
                got: ids.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let matrix = unit_rows(rows)?
            .into_iter()
            .flatten()
            .map(|v| v as f32)
            .collect();
        Ok(Self {
            ids,
            d: rows.d(),
            matrix,
            source_hash: source_hash.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.d..(i + 1) * self.d]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine similarity of every row against `target`, in row order.
    pub fn similarities<T: Scalar>(&self, target: &Vector<T>) -> Result<Vec<f64>> {
        if target.dim() != self.d {
            return Err(Error::DimMismatch {
                expected: self.d,
                got: target.dim(),
            });
        }
        let norm = target.norm().as_f64();
        if norm <= NORM_EPS {
            return Err(Error::ZeroNorm);
        }
        let t: Vec<f64> = target.values().iter().map(|v| v.as_f64() / norm).collect();
        Ok((0..self.len())
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(&t)
                    .map(|(&a, &b)| f64::from(a) * b)
                    .sum()
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.matrix.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.write_u32::<LittleEndian>(INDEX_VERSION)?;
        out.write_u32::<LittleEndian>(self.len() as u32)?;
        out.write_u32::<LittleEndian>(self.d as u32)?;
        out.write_u32::<LittleEndian>(self.source_hash.len() as u32)?;
        out.extend_from_slice(self.source_hash.as_bytes());
        for id in &self.ids {
            out.write_u32::<LittleEndian>(id.len() as u32)?;
            out.extend_from_slice(id.as_bytes());
        }
        for &v in &self.matrix {
            out.write_f32::<LittleEndian>(v)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let m = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let read_str = |r: &mut &[u8]| -> Result<String> {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
        };
        let source_hash = read_str(&mut r)?;
        let mut ids = Vec::with_capacity(m);
        let mut seen = HashSet::new();
        for _ in 0..m {
            let id = read_str(&mut r)?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        let mut matrix = vec![0f32; m * d];
        r.read_f32_into::<LittleEndian>(&mut matrix)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let idx = Self {
            ids,
            d,
            matrix,
            source_hash,
        };
        for i in 0..m {
            let n = idx.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Format(format!("row {i} has norm {n}")));
            }
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Embeds every record's crystal and indexes the normalized rows.
pub fn build_index<T: Scalar>(materials: &Dataset, encoder: &CrystalEncoder<T>, source_hash: &str) -> Result<EmbeddingIndex> {
    let recs: Vec<&MaterialRecord> = materials.records.iter().collect();
    let rows = embed_crystals(encoder, &recs)?;
    EmbeddingIndex::from_batch(
        materials.records.iter().map(|r| r.id.clone()).collect(),
        &rows,
        source_hash,
    )
}

pub(crate) fn embed_crystals<T: Scalar>(encoder: &CrystalEncoder<T>, recs: &[&MaterialRecord]) -> Result<EmbeddingBatch<T>> {
    use rayon::prelude::*;
    let rows = recs
        .par_iter()
        .map(|r| {
            let c = r
                .crystal
                .as_ref()
                .ok_or_else(|| Error::ModalityMissing(format!("{} for {}", Modality::Crystal, r.id)))?;
            Ok(encoder.encode(c)?.into_inner())
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBatch::from_rows(&rows)
}

/// Exhaustive top-`n` by cosine similarity; ties go to the lower row.
pub fn query_nearest<T: Scalar>(idx: &EmbeddingIndex, target: &Vector<T>, n: usize) -> Result<Vec<Neighbor>> {
    if n == 0 || n > idx.len() {
        return Err(Error::BadN { n, m: idx.len() });
    }
    let sims = idx.similarities(target)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order[..n]
        .iter()
        .map(|&i| Neighbor {
            id: idx.ids[i].clone(),
            similarity: sims[i],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScreeningResult {
    pub target_id: String,
    pub neighbors: Vec<Neighbor>,
    pub best_candidate: String,
    pub best_mae: f64,
}

/// Embeds `target` with the DOS encoder, takes its `n` nearest crystals,
/// and returns the one whose DOS is closest to the target's.
pub fn best_of_n<'a, T: Scalar>(
    idx: &EmbeddingIndex,
    target_id: &str,
    target: &DosCurve,
    dos_lookup: impl Fn(&str) -> Option<&'a DosCurve>,
    dos_encoder: &DosEncoder<T>,
    n: usize,
) -> Result<ScreeningResult> {
    Ok(best_of_n_sweep(idx, target_id, target, dos_lookup, dos_encoder, &[n])?
        .pop()
        .expect("one n")
        .1)
}

/// [`best_of_n`] for several `n` from a single query; each result is the
/// running minimum over the same ranked neighbour list.
pub fn best_of_n_sweep<'a, T: Scalar>(
    idx: &EmbeddingIndex,
    target_id: &str,
    target: &DosCurve,
    dos_lookup: impl Fn(&str) -> Option<&'a DosCurve>,
    dos_encoder: &DosEncoder<T>,
    ns: &[usize],
) -> Result<Vec<(usize, ScreeningResult)>> {
    let max_n = ns.iter().copied().max().unwrap_or(0);
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > idx.len()) {
        return Err(Error::BadN { n: bad, m: idx.len() });
    }
    let emb = dos_encoder.encode(target)?;
    let neighbors = query_nearest(idx, &emb, max_n)?;
    let mut maes = Vec::with_capacity(max_n);
    for nb in &neighbors {
        let cand = dos_lookup(&nb.id).ok_or_else(|| Error::LookupMissing(nb.id.clone()))?;
        maes.push(dos_mae(target, cand)?.value);
    }
    Ok(ns
        .iter()
        .map(|&n| {
            let (best, best_mae) = maes[..n]
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
            (
                n,
                ScreeningResult {
                    target_id: target_id.to_string(),
                    neighbors: neighbors[..n].to_vec(),
                    best_candidate: neighbors[best].id.clone(),
                    best_mae,
                },
            )
        })
        .collect())
}

/// CSV `target_id,n,best_candidate,best_mae,nearest_id,nearest_similarity`.
pub fn write_screening_csv(w: impl Write, rows: &[(usize, ScreeningResult)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "target_id",
        "n",
        "best_candidate",
        "best_mae",
        "nearest_id",
        "nearest_similarity",
    ])?;
    for (n, r) in rows {
        out.write_record([
            r.target_id.clone(),
            n.to_string(),
            r.best_candidate.clone(),
            r.best_mae.to_string(),
            r.neighbors[0].id.clone(),
            r.neighbors[0].similarity.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Id, property columns and embedding columns for a sample of materials.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub property_names: Vec<String>,
    pub properties: Vec<Vec<Option<f64>>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Seeded sample of `sample` materials (all when `None`), in dataset order,
/// with their crystal embeddings.
pub fn export_embeddings<T: Scalar>(
    encoder: &CrystalEncoder<T>,
    materials: &Dataset,
    sample: Option<usize>,
    seed: u64,
) -> Result<EmbeddingTable> {
    let available = materials.len();
    let k = sample.unwrap_or(available);
    if k > available {
        return Err(Error::SampleTooLarge { sample: k, available });
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let recs: Vec<&MaterialRecord> = chosen.iter().map(|&i| &materials.records[i]).collect();
    let property_names: Vec<String> = recs
        .iter()
        .flat_map(|r| r.properties.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let emb = embed_crystals(encoder, &recs)?;
    Ok(EmbeddingTable {
        ids: recs.iter().map(|r| r.id.clone()).collect(),
        properties: recs
            .iter()
            .map(|r| property_names.iter().map(|p| r.properties.get(p).copied()).collect())
            .collect(),
        embeddings: (0..emb.n())
            .map(|i| emb.row(i).iter().map(|v| v.as_f64()).collect())
            .collect(),
        property_names,
    })
}

impl EmbeddingTable {
    /// CSV `id,<properties…>,e0,…,e{d−1}`; missing properties are empty.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.embeddings.first().map_or(0, Vec::len);
        let mut header = vec!["id".to_string()];
        header.extend(self.property_names.iter().cloned());
        header.extend((0..d).map(|i| format!("e{i}")));
        out.write_record(&header)?;
        for ((id, props), emb) in self.ids.iter().zip(&self.properties).zip(&self.embeddings) {
            let mut row = vec![id.clone()];
            row.extend(props.iter().map(|p| p.map_or(String::new(), |v| v.to_string())));
            row.extend(emb.iter().map(f64::to_string));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::Format("embedding table must start with an `id` column".into()));
        }
        let is_emb = |h: &str| h.len() > 1 && h.starts_with('e') && h[1..].bytes().all(|b| b.is_ascii_digit());
        let first_emb = header.iter().position(is_emb).unwrap_or(header.len());
        let property_names: Vec<String> = header.iter().skip(1).take(first_emb - 1).map(String::from).collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number `{s}` in embedding table")))
        };
        let mut t = Self {
            ids: Vec::new(),
            property_names,
            properties: Vec::new(),
            embeddings: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec?;
            t.ids.push(rec[0].to_string());
            t.properties.push(
                (1..first_emb)
                    .map(|i| if rec[i].is_empty() { Ok(None) } else { parse(&rec[i]).map(Some) })
                    .collect::<Result<_>>()?,
            );
            t.embeddings
                .push((first_emb..rec.len()).map(|i| parse(&rec[i])).collect::<Result<_>>()?);
        }
        Ok(t)
    }
}

/// Top-two principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

/// Projects mean-centered rows onto the two leading eigenvectors of the
/// sample covariance. Each component's largest-magnitude loading is made
/// positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::TooFewRows(n));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(Error::ShapeMismatch("rows have no columns".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |k: usize| -> (Vec<f64>, f64) {
        let Some(&c) = order.get(k) else {
            return (vec![0.0; d], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (v, eig.eigenvalues[c].max(0.0))
    };
    let (c0, l0) = component(0);
    let (c1, l1) = component(1);
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&c0), dot(&c1)]
        })
        .collect();
    Ok(Projection {
        coords,
        components: [c0, c1],
        eigenvalues: [l0, l1],
    })
}

/// CSV `id,x,y`.
pub fn write_projection_csv(w: impl Write, ids: &[String], coords: &[[f64; 2]]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "x", "y"])?;
    for (id, [x, y]) in ids.iter().zip(coords) {
        out.write_record([id.clone(), x.to_string(), y.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
