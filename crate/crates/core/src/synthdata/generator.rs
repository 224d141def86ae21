//! Desk-scale synthetic materials.
//!
//! Every modality of a material is a function of one hidden latent vector
//! `z`. The mixing maps from `z` to each modality are fixed by
//! `GeneratorSpec::generator_seed`; the per-material seed draws `z` and the
//! structured noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CrystalGraph, Dataset, DensityGrid, DosCurve, Edge, MaterialRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub grid_size: usize,
    pub tokens: usize,
    pub node_feature_dim: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub neighbors: usize,
    pub species: usize,
    pub feature_noise: f64,
    pub dos_noise: f64,
    pub density_noise: f64,
    pub p_missing_dos: f64,
    pub p_missing_density: f64,
    pub generator_seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            grid_size: 16,
            tokens: 64,
            node_feature_dim: 8,
            min_nodes: 4,
            max_nodes: 8,
            neighbors: 4,
            species: 4,
            feature_noise: 0.1,
            dos_noise: 0.02,
            density_noise: 0.01,
            p_missing_dos: 0.0,
            p_missing_density: 0.0,
            generator_seed: 0,
        }
    }
}

/// Energy window the synthetic curves are drawn from.
pub const ENERGY_MIN: f64 = -10.0;
pub const ENERGY_MAX: f64 = 10.0;
/// Maximum inward jitter of each curve's end points.
const ENERGY_JITTER: f64 = 1.5;
const DOS_PEAKS: usize = 4;
const PEAK_BASES: [f64; DOS_PEAKS] = [-6.0, -2.0, 2.0, 6.0];
const BLOBS: usize = 3;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.to_string()));
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.grid_size == 0 || self.grid_size % 4 != 0 {
            return bad("grid_size must be a positive multiple of 4");
        }
        if self.tokens < 2 {
            return bad("tokens must be at least 2");
        }
        if self.node_feature_dim == 0 || self.species == 0 {
            return bad("node_feature_dim and species must be positive");
        }
        if self.min_nodes == 0 || self.max_nodes < self.min_nodes {
            return bad("need 1 <= min_nodes <= max_nodes");
        }
        if self.neighbors == 0 {
            return bad("neighbors must be positive");
        }
        for (name, p) in [
            ("p_missing_dos", self.p_missing_dos),
            ("p_missing_density", self.p_missing_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, s) in [
            ("feature_noise", self.feature_noise),
            ("dos_noise", self.dos_noise),
            ("density_noise", self.density_noise),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::BadSpec(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (key, value) in crate::config::parse_kv(text)? {
            s.set(&key, &value)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::BadSpec(format!("cannot parse `{v}` for {k}")))
        }
        match key {
            "latent_dim" => self.latent_dim = num(key, value)?,
            "grid_size" => self.grid_size = num(key, value)?,
            "tokens" => self.tokens = num(key, value)?,
            "node_feature_dim" => self.node_feature_dim = num(key, value)?,
            "min_nodes" => self.min_nodes = num(key, value)?,
            "max_nodes" => self.max_nodes = num(key, value)?,
            "neighbors" => self.neighbors = num(key, value)?,
            "species" => self.species = num(key, value)?,
            "feature_noise" => self.feature_noise = num(key, value)?,
            "dos_noise" => self.dos_noise = num(key, value)?,
            "density_noise" => self.density_noise = num(key, value)?,
            "p_missing_dos" => self.p_missing_dos = num(key, value)?,
            "p_missing_density" => self.p_missing_density = num(key, value)?,
            "generator_seed" => self.generator_seed = num(key, value)?,
            other => return Err(Error::BadSpec(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let pairs: [(&str, String); 14] = [
            ("latent_dim", self.latent_dim.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("tokens", self.tokens.to_string()),
            ("node_feature_dim", self.node_feature_dim.to_string()),
            ("min_nodes", self.min_nodes.to_string()),
            ("max_nodes", self.max_nodes.to_string()),
            ("neighbors", self.neighbors.to_string()),
            ("species", self.species.to_string()),
            ("feature_noise", self.feature_noise.to_string()),
            ("dos_noise", self.dos_noise.to_string()),
            ("density_noise", self.density_noise.to_string()),
            ("p_missing_dos", self.p_missing_dos.to_string()),
            ("p_missing_density", self.p_missing_density.to_string()),
            ("generator_seed", self.generator_seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Fixed linear maps from the latent space to each modality's parameters.
struct Mixing {
    node: Vec<Vec<f64>>,
    species: Vec<Vec<f64>>,
    lattice: Vec<f64>,
    peak_center: Vec<Vec<f64>>,
    peak_width: Vec<Vec<f64>>,
    peak_weight: Vec<Vec<f64>>,
    blob_pos: Vec<Vec<f64>>,
    blob_amp: Vec<Vec<f64>>,
    blob_width: Vec<Vec<f64>>,
}

impl Mixing {
    fn new(spec: &GeneratorSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.generator_seed ^ 0x6d69_7869_6e67);
        let m = spec.latent_dim;
        let scale = 1.0 / (m as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, s: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| gauss(&mut rng) * s).collect())
                .collect()
        };
        let node = mat(spec.node_feature_dim, m, 1.5 * scale);
        let species = mat(spec.species, spec.node_feature_dim, 0.5);
        let lattice = mat(1, m, scale).remove(0);
        let peak_center = mat(DOS_PEAKS, m, scale);
        let peak_width = mat(DOS_PEAKS, m, scale);
        let peak_weight = mat(DOS_PEAKS, m, scale);
        let blob_pos = mat(3 * BLOBS, m, 1.5 * scale);
        let blob_amp = mat(BLOBS, m, scale);
        let blob_width = mat(BLOBS, m, scale);
        Self {
            node,
            species,
            lattice,
            peak_center,
            peak_width,
            peak_weight,
            blob_pos,
            blob_amp,
            blob_width,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Synthetic band gap: a smooth increasing function of the first latent
/// coordinate.
pub(crate) fn gap_of(z: &[f64]) -> f64 {
    softplus(1.5 * z[0] + 0.5 * z[1] - 0.5)
}

fn formation_energy_of(z: &[f64]) -> f64 {
    let z2 = z.get(2).copied().unwrap_or(0.0);
    let z3 = z.get(3).copied().unwrap_or(0.0);
    -1.0 + 0.6 * z2.tanh() - 0.3 * z3 + 0.2 * z[0] * z[1]
}

/// Deterministic per-material seed for item `index` of a dataset.
pub fn material_seed(dataset_seed: u64, index: u64) -> u64 {
    dataset_seed.wrapping_mul(1_000_000_007).wrapping_add(index)
}

/// Generates one material as a pure function of `(seed, spec)`.
pub fn generate_material(seed: u64, spec: &GeneratorSpec) -> Result<MaterialRecord> {
    spec.validate()?;
    let mix = Mixing::new(spec);
    Ok(generate_with(seed, spec, &mix))
}

fn generate_with(seed: u64, spec: &GeneratorSpec, mix: &Mixing) -> MaterialRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..spec.latent_dim).map(|_| gauss(&mut rng)).collect();

    let crystal = crystal_from(&z, spec, mix, &mut rng);
    let dos = dos_from(&z, spec, mix, &mut rng);
    let density = density_from(&z, spec, mix, &mut rng);
    let keep_dos = rng.random::<f64>() >= spec.p_missing_dos;
    let keep_density = rng.random::<f64>() >= spec.p_missing_density;

    let mut properties = BTreeMap::new();
    properties.insert("gap".to_string(), gap_of(&z));
    properties.insert("formation_energy".to_string(), formation_energy_of(&z));

    MaterialRecord {
        id: format!("mat-{seed}"),
        latent: z,
        crystal: Some(crystal),
        dos: keep_dos.then_some(dos),
        density: keep_density.then_some(density),
        properties,
    }
}

fn crystal_from(z: &[f64], spec: &GeneratorSpec, mix: &Mixing, rng: &mut ChaCha8Rng) -> CrystalGraph {
    let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
    let shared: Vec<f64> = mix.node.iter().map(|w| dot(w, z)).collect();
    let mut feats = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(0..spec.species);
        feats.push(
            shared
                .iter()
                .zip(&mix.species[t])
                .map(|(s, e)| (s + e).tanh() + spec.feature_noise * gauss(rng))
                .collect::<Vec<f64>>(),
        );
    }
    let lattice = 3.0 + 0.8 * dot(&mix.lattice, z).tanh();
    let frac: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();

    // k nearest periodic images of every other site (and of the site's own
    // images), directed towards the centre atom.
    let k = spec.neighbors;
    let mut edges = Vec::with_capacity(n * k);
    for dst in 0..n {
        let mut cands: Vec<(f64, usize, [f64; 3])> = Vec::new();
        for src in 0..n {
            for ix in -1i32..=1 {
                for iy in -1i32..=1 {
                    for iz in -1i32..=1 {
                        if src == dst && ix == 0 && iy == 0 && iz == 0 {
                            continue;
                        }
                        let img = [ix as f64, iy as f64, iz as f64];
                        let disp = [0, 1, 2].map(|a| (frac[src][a] + img[a] - frac[dst][a]) * lattice);
                        let r2 = disp.iter().map(|d| d * d).sum::<f64>();
                        cands.push((r2, src, disp));
                    }
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, src, displacement) in cands.iter().take(k) {
            edges.push(Edge {
                src,
                dst,
                displacement,
            });
        }
    }
    CrystalGraph {
        num_nodes: n,
        node_features: feats,
        edges,
    }
}

fn dos_from(z: &[f64], spec: &GeneratorSpec, mix: &Mixing, rng: &mut ChaCha8Rng) -> DosCurve {
    let lo = ENERGY_MIN + ENERGY_JITTER * rng.random::<f64>();
    let hi = ENERGY_MAX - ENERGY_JITTER * rng.random::<f64>();
    let t = spec.tokens;
    let energies: Vec<f64> = (0..t)
        .map(|i| lo + (hi - lo) * i as f64 / (t - 1) as f64)
        .collect();
    let peaks: Vec<(f64, f64, f64)> = (0..DOS_PEAKS)
        .map(|p| {
            let c = PEAK_BASES[p] + 1.5 * dot(&mix.peak_center[p], z).tanh();
            let w = 0.5 + 1.0 * sigmoid(dot(&mix.peak_width[p], z));
            let a = 0.3 + softplus(dot(&mix.peak_weight[p], z));
            (c, w, a)
        })
        .collect();
    let half_gap = 0.5 * gap_of(z);
    let values = energies
        .iter()
        .map(|&e| {
            let raw: f64 = peaks
                .iter()
                .map(|&(c, w, a)| a * (-0.5 * ((e - c) / w).powi(2)).exp())
                .sum();
            // States are suppressed inside the gap around the Fermi level.
            let gate = sigmoid(4.0 * (e.abs() - half_gap));
            (raw * gate + spec.dos_noise * gauss(rng).abs()).max(0.0)
        })
        .collect();
    DosCurve { energies, values }
}

fn density_from(z: &[f64], spec: &GeneratorSpec, mix: &Mixing, rng: &mut ChaCha8Rng) -> DensityGrid {
    let g = spec.grid_size;
    let gf = g as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..BLOBS)
        .map(|b| {
            let pos = [0, 1, 2].map(|a| (0.2 + 0.6 * sigmoid(dot(&mix.blob_pos[3 * b + a], z))) * gf);
            let amp = 0.2 + softplus(dot(&mix.blob_amp[b], z));
            let width = (0.08 + 0.1 * sigmoid(dot(&mix.blob_width[b], z))) * gf;
            (pos, amp, width)
        })
        .collect();
    let mut voxels = Vec::with_capacity(g * g * g);
    for x in 0..g {
        for y in 0..g {
            for zz in 0..g {
                let p = [x as f64 + 0.5, y as f64 + 0.5, zz as f64 + 0.5];
                let v: f64 = blobs
                    .iter()
                    .map(|(c, a, w)| {
                        let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                        a * (-0.5 * r2 / (w * w)).exp()
                    })
                    .sum();
                voxels.push((v + spec.density_noise * gauss(rng).abs()) as f32);
            }
        }
    }
    DensityGrid {
        grid_size: g,
        voxels,
    }
}

/// Generates `n` materials with seeds `material_seed(seed, 0..n)`.
pub fn generate_dataset(n: usize, seed: u64, spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mix = Mixing::new(spec);
    let records = (0..n as u64)
        .map(|i| generate_with(material_seed(seed, i), spec, &mix))
        .collect();
    Ok(Dataset::new(records))
}
