//! Retrieval metrics and the windowed DOS comparison metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::embedding::{norm, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, NORM_EPS};
use crate::synthdata::{DosCurve, Modality};

pub const DOS_WINDOW: (f64, f64) = (-5.0, 5.0);
pub const DOS_GRID_POINTS: usize = 501;

/// Rows scaled to unit length, as `f64`.
pub(crate) fn unit_rows<T: Scalar>(b: &EmbeddingBatch<T>) -> Result<Vec<Vec<f64>>> {
    (0..b.n())
        .map(|i| {
            let row = b.row(i);
            let n = norm(row).as_f64();
            if n <= NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            Ok(row.iter().map(|v| v.as_f64() / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank of each query's paired gallery row (0 = best). Ties go to the lower
/// gallery index.
pub fn paired_ranks<T: Scalar>(queries: &EmbeddingBatch<T>, gallery: &EmbeddingBatch<T>) -> Result<Vec<usize>> {
    queries.check_same_shape(gallery)?;
    let q = unit_rows(queries)?;
    let g = unit_rows(gallery)?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let target = dot(qi, &g[i]);
            g.iter()
                .enumerate()
                .filter(|&(j, gj)| {
                    let s = dot(qi, gj);
                    s > target || (s == target && j < i)
                })
                .count()
        })
        .collect())
}

/// Fraction of queries whose paired gallery row ranks in the top `k` by
/// cosine similarity.
pub fn topk_retrieval<T: Scalar>(queries: &EmbeddingBatch<T>, gallery: &EmbeddingBatch<T>, k: usize) -> Result<f64> {
    let n = queries.n();
    if k == 0 || k > n {
        return Err(Error::BadK { k, n });
    }
    let ranks = paired_ranks(queries, gallery)?;
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
}

/// Top-k accuracies for every ordered modality pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub k_values: Vec<usize>,
    pub gallery_size: usize,
    pub accuracies: BTreeMap<(Modality, Modality, usize), f64>,
}

impl RetrievalReport {
    pub fn build<T: Scalar>(mods: &[(Modality, &EmbeddingBatch<T>)], k_values: &[usize]) -> Result<Self> {
        let n = mods.first().map(|(_, b)| b.n()).unwrap_or(0);
        if mods.len() < 2 {
            return Err(Error::TooFewModalities(mods.len()));
        }
        for &k in k_values {
            if k == 0 || k > n {
                return Err(Error::BadK { k, n });
            }
        }
        let mut accuracies = BTreeMap::new();
        for (qm, qb) in mods {
            for (gm, gb) in mods {
                if qm == gm {
                    continue;
                }
                let ranks = paired_ranks(qb, gb)?;
                for &k in k_values {
                    let acc = ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
                    accuracies.insert((*qm, *gm, k), acc);
                }
            }
        }
        Ok(Self {
            k_values: k_values.to_vec(),
            gallery_size: n,
            accuracies,
        })
    }

    pub fn get(&self, query: Modality, gallery: Modality, k: usize) -> Option<f64> {
        self.accuracies.get(&(query, gallery, k)).copied()
    }

    fn pairs(&self) -> Vec<(Modality, Modality)> {
        let mut pairs: Vec<_> = self.accuracies.keys().map(|&(q, g, _)| (q, g)).collect();
        pairs.dedup();
        pairs
    }

    /// CSV with columns `pair,k,accuracy`; pairs are written as `query->gallery`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pair", "k", "accuracy"])?;
        for (&(q, g, k), acc) in &self.accuracies {
            out.write_record([format!("{q}->{g}"), k.to_string(), acc.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Whitespace-separated table: one row per `k`, one column per pair.
    pub fn to_columns(&self) -> String {
        let pairs = self.pairs();
        let mut s = String::from("k");
        for (q, g) in &pairs {
            let _ = write!(s, " {q}->{g}");
        }
        s.push('\n');
        for &k in &self.k_values {
            let _ = write!(s, "{k}");
            for &(q, g) in &pairs {
                let _ = write!(s, " {:.6}", self.accuracies[&(q, g, k)]);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DosMaeResult {
    pub value: f64,
    pub grid_points: usize,
    pub window: (f64, f64),
}

/// Linear interpolation of `c` at `x`; `x` must lie inside the curve's range.
pub fn interpolate(c: &DosCurve, x: f64) -> f64 {
    let e = c.energies();
    let v = c.values();
    let j = e.partition_point(|&ei| ei <= x);
    if j == 0 {
        return v[0];
    }
    if j == e.len() {
        return v[e.len() - 1];
    }
    let (x0, x1) = (e[j - 1], e[j]);
    let t = (x - x0) / (x1 - x0);
    v[j - 1] + t * (v[j] - v[j - 1])
}

fn covers(c: &DosCurve, (lo, hi): (f64, f64)) -> Result<()> {
    let e = c.energies();
    let (first, last) = (e[0], e[e.len() - 1]);
    if first > lo || last < hi {
        return Err(Error::WindowNotCovered { lo: first, hi: last });
    }
    Ok(())
}

/// Mean absolute difference on the ±5 eV window, divided by the target's
/// mean height there. Both means are trapezoidal averages over the grid.
pub fn dos_mae(target: &DosCurve, candidate: &DosCurve) -> Result<DosMaeResult> {
    dos_mae_on_grid(target, candidate, DOS_GRID_POINTS)
}

pub fn dos_mae_on_grid(target: &DosCurve, candidate: &DosCurve, points: usize) -> Result<DosMaeResult> {
    if points < 2 {
        return Err(Error::InvalidCurve(format!("{points} grid points")));
    }
    let window = DOS_WINDOW;
    covers(target, window)?;
    covers(candidate, window)?;
    let (lo, hi) = window;
    let step = (hi - lo) / (points - 1) as f64;
    let mut abs_area = 0.0;
    let mut area = 0.0;
    let (mut prev_t, mut prev_d) = (0.0, 0.0);
    for i in 0..points {
        let x = if i == points - 1 { hi } else { lo + step * i as f64 };
        let t = interpolate(target, x);
        let d = (t - interpolate(candidate, x)).abs();
        if i > 0 {
            area += 0.5 * (prev_t + t) * step;
            abs_area += 0.5 * (prev_d + d) * step;
        }
        prev_t = t;
        prev_d = d;
    }
    let mean_height = area / (hi - lo);
    if mean_height <= 0.0 {
        return Err(Error::ZeroTargetArea);
    }
    Ok(DosMaeResult {
        value: abs_area / (hi - lo) / mean_height,
        grid_points: points,
        window,
    })
}
