//! Material records, datasets, and the synthetic coupled-modality generator.

mod generator;
pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generator::{generate_dataset, generate_material, material_seed, GeneratorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Crystal,
    Dos,
    Density,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Crystal, Modality::Dos, Modality::Density];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Crystal => "crystal",
            Modality::Dos => "dos",
            Modality::Density => "density",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crystal" => Ok(Modality::Crystal),
            "dos" => Ok(Modality::Dos),
            "density" | "rho" => Ok(Modality::Density),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// A small set of modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn of(mods: &[Modality]) -> Self {
        mods.iter().fold(Self::EMPTY, |s, &m| s.with(m))
    }

    pub fn with(self, m: Modality) -> Self {
        Self(self.0 | (1 << m as u8))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m as u8) != 0
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Cartesian offset from `dst` to the periodic image of `src`.
    pub displacement: [f64; 3],
}

/// Atoms with feature vectors and directed neighbour edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalGraph {
    pub num_nodes: usize,
    pub node_features: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
}

impl CrystalGraph {
    pub fn new(node_features: Vec<Vec<f64>>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self {
            num_nodes: node_features.len(),
            node_features,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.node_features.len() != self.num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} feature rows for {} nodes",
                self.node_features.len(),
                self.num_nodes
            )));
        }
        let f = self.node_features[0].len();
        if self.node_features.iter().any(|r| r.len() != f) {
            return Err(Error::InvalidGraph("ragged node features".into()));
        }
        if self
            .node_features
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidGraph("non-finite node feature".into()));
        }
        for e in &self.edges {
            if e.src >= self.num_nodes || e.dst >= self.num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge {}->{} outside {} nodes",
                    e.src, e.dst, self.num_nodes
                )));
            }
            if e.displacement.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGraph("non-finite displacement".into()));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.first().map_or(0, Vec::len)
    }

    /// Copy with nodes relabelled so that old node `i` becomes `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut feats = vec![Vec::new(); self.num_nodes];
        for (old, &new) in perm.iter().enumerate() {
            feats[new] = self.node_features[old].clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                displacement: e.displacement,
            })
            .collect();
        Self {
            num_nodes: self.num_nodes,
            node_features: feats,
            edges,
        }
    }
}

/// Density of states sampled at strictly increasing energies (eV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DosCurve {
    energies: Vec<f64>,
    values: Vec<f64>,
}

impl DosCurve {
    pub fn new(energies: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let c = Self { energies, values };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies.is_empty() {
            return Err(Error::EmptyCurve);
        }
        if self.energies.len() != self.values.len() {
            return Err(Error::InvalidCurve(format!(
                "{} energies vs {} values",
                self.energies.len(),
                self.values.len()
            )));
        }
        if self.energies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidCurve("energies not strictly increasing".into()));
        }
        if self.energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidCurve("non-finite energy".into()));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidCurve("negative or non-finite value".into()));
        }
        Ok(())
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Same curve with all values multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            energies: self.energies.clone(),
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Cubic voxel grid of nonnegative charge density, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    grid_size: usize,
    voxels: Vec<f32>,
}

impl DensityGrid {
    pub fn new(grid_size: usize, voxels: Vec<f32>) -> Result<Self> {
        if grid_size == 0 || voxels.len() != grid_size.pow(3) {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for grid size {grid_size}",
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("density voxels"));
        }
        Ok(Self { grid_size, voxels })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialRecord {
    pub id: String,
    pub latent: Vec<f64>,
    pub crystal: Option<CrystalGraph>,
    pub dos: Option<DosCurve>,
    pub density: Option<DensityGrid>,
    pub properties: BTreeMap<String, f64>,
}

impl MaterialRecord {
    pub fn modalities(&self) -> ModalitySet {
        let mut s = ModalitySet::EMPTY;
        if self.crystal.is_some() {
            s = s.with(Modality::Crystal);
        }
        if self.dos.is_some() {
            s = s.with(Modality::Dos);
        }
        if self.density.is_some() {
            s = s.with(Modality::Density);
        }
        s
    }

    pub fn crystal(&self) -> Result<&CrystalGraph> {
        self.crystal
            .as_ref()
            .ok_or_else(|| Error::ModalityMissing(format!("crystal for {}", self.id)))
    }

    pub fn dos(&self) -> Result<&DosCurve> {
        self.dos
            .as_ref()
            .ok_or_else(|| Error::ModalityMissing(format!("dos for {}", self.id)))
    }

    pub fn density(&self) -> Result<&DensityGrid> {
        self.density
            .as_ref()
            .ok_or_else(|| Error::ModalityMissing(format!("density for {}", self.id)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<MaterialRecord>,
    pub modality_mask: ModalitySet,
}

impl Dataset {
    /// Wraps `records`; the mask is the set of modalities every record has.
    pub fn new(records: Vec<MaterialRecord>) -> Self {
        let modality_mask = records
            .iter()
            .map(MaterialRecord::modalities)
            .reduce(|a, b| ModalitySet(a.0 & b.0))
            .unwrap_or(ModalitySet::EMPTY);
        Self {
            records,
            modality_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&MaterialRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Keeps the records that carry every modality in `required`, in order.
pub fn intersect_datasets(records: &[MaterialRecord], required: ModalitySet) -> Dataset {
    Dataset {
        records: records
            .iter()
            .filter(|r| required.is_subset(r.modalities()))
            .cloned()
            .collect(),
        modality_mask: required,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let s = Self {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// 60:20:20.
    pub fn standard(seed: u64) -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::BadSplit(format!("fractions must be positive: {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::BadSplit(format!("fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: validation and test are floored, the
    /// remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val_frac + 1e-9).floor() as usize;
        let test = (n as f64 * self.test_frac + 1e-9).floor() as usize;
        (n - val - test, val, test)
    }
}

/// Seeded shuffle into disjoint train/validation/test subsets.
pub fn split_dataset(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (ntr, nva, _) = spec.sizes(data.len());
    let take = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| data.records[i].clone()).collect(),
        modality_mask: data.modality_mask,
    };
    Ok((
        take(&order[..ntr]),
        take(&order[ntr..ntr + nva]),
        take(&order[ntr + nva..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(id: &str, mods: &[Modality]) -> MaterialRecord {
        let spec = GeneratorSpec::default();
        let mut r = generate_material(1, &spec).unwrap();
        r.id = id.into();
        let set = ModalitySet::of(mods);
        if !set.contains(Modality::Crystal) {
            r.crystal = None;
        }
        if !set.contains(Modality::Dos) {
            r.dos = None;
        }
        if !set.contains(Modality::Density) {
            r.density = None;
        }
        r
    }

    #[test]
    fn intersection_examples() {
        use Modality::*;
        let recs = vec![
            rec("a", &[Crystal, Dos]),
            rec("b", &[Crystal, Dos, Density]),
            rec("c", &[Crystal, Density]),
        ];
        let all = ModalitySet::of(&[Crystal, Dos, Density]);
        let d = intersect_datasets(&recs, all);
        assert_eq!(d.ids().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(intersect_datasets(&recs, ModalitySet::EMPTY).len(), 3);
        let cd = intersect_datasets(&recs, ModalitySet::of(&[Crystal, Dos]));
        assert_eq!(cd.ids().collect::<Vec<_>>(), vec!["a", "b"]);
        // Re-intersecting with a subset mask changes nothing.
        let again = intersect_datasets(&cd.records, ModalitySet::of(&[Crystal]));
        assert_eq!(again.records, cd.records);
    }

    fn dataset(n: usize) -> Dataset {
        let recs = (0..n).map(|i| rec(&format!("m{i}"), &[Modality::Crystal])).collect::<Vec<_>>();
        intersect_datasets(&recs, ModalitySet::EMPTY)
    }

    #[test]
    fn split_sizes() {
        let s = SplitSpec::standard(3);
        let (a, b, c) = split_dataset(&dataset(10), &s).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let (a, b, c) = split_dataset(&dataset(5), &s).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3, 1, 1));
        assert!(matches!(split_dataset(&dataset(0), &s), Err(Error::EmptyDataset)));
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 0).is_err());
        assert!(SplitSpec::new(0.8, 0.2, 0.0, 0).is_err());
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let d = dataset(37);
        let s = SplitSpec::standard(11);
        let (a, b, c) = split_dataset(&d, &s).unwrap();
        let (a2, b2, c2) = split_dataset(&d, &s).unwrap();
        assert_eq!((a.records == a2.records, b == b2, c == c2), (true, true, true));
        let mut seen = HashSet::new();
        for id in a.ids().chain(b.ids()).chain(c.ids()) {
            assert!(seen.insert(id.to_string()));
        }
        assert_eq!(seen.len(), 37);
    }

    #[test]
    fn curve_validation() {
        assert!(matches!(DosCurve::new(vec![], vec![]), Err(Error::EmptyCurve)));
        assert!(DosCurve::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(DosCurve::new(vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
        assert!(DosCurve::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(DosCurve::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn graph_validation() {
        let f = vec![vec![0.0; 2]; 2];
        let bad = Edge {
            src: 2,
            dst: 0,
            displacement: [1.0, 0.0, 0.0],
        };
        assert!(CrystalGraph::new(f.clone(), vec![bad]).is_err());
        assert!(CrystalGraph::new(vec![], vec![]).is_err());
        assert!(CrystalGraph::new(f, vec![]).is_ok());
    }
}
