use rayon::prelude::*;

use crate::autodiff::{Graph, ParamSet, Var};
use crate::embedding::EmbeddingBatch;
use crate::encoders::{
    CrystalEncoder, CrystalEncoderConfig, DensityEncoder, DensityEncoderConfig, DosEncoder, DosEncoderConfig,
    Encoder,
};
use crate::error::{Error, Result};
use crate::losses::{TAU_MAX, TAU_MIN};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, MaterialRecord, Modality};
use crate::tensor::Tensor;

pub const LOG_TAU: &str = "log_tau";

/// Input sizes shared by every encoder of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub node_dim: usize,
    pub grid_size: usize,
    pub d: usize,
}

impl ModelDims {
    /// Reads node feature width and grid size off the first records that
    /// carry them. `grid_size` falls back to 16 when no record has a grid.
    pub fn from_dataset(data: &Dataset, d: usize) -> Result<Self> {
        let node_dim = data
            .records
            .iter()
            .find_map(|r| r.crystal.as_ref().map(|c| c.feature_dim()))
            .ok_or_else(|| Error::ModalityMissing(Modality::Crystal.name().into()))?;
        let grid_size = data
            .records
            .iter()
            .find_map(|r| r.density.as_ref().map(|g| g.grid_size()))
            .unwrap_or(16);
        Ok(Self { node_dim, grid_size, d })
    }
}

/// A crystal encoder plus optional DOS and density encoders and a shared
/// learnable log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    dims: ModelDims,
    pub crystal: CrystalEncoder<T>,
    pub dos: Option<DosEncoder<T>>,
    pub density: Option<DensityEncoder<T>>,
    pub log_tau: T,
}

fn seed_for(seed: u64, m: Modality) -> u64 {
    let k = match m {
        Modality::Crystal => 1,
        Modality::Dos => 2,
        Modality::Density => 3,
    };
    seed.wrapping_mul(4).wrapping_add(k)
}

impl<T: Scalar> Model<T> {
    pub fn new(dims: ModelDims, mods: &[Modality], seed: u64, tau: f64) -> Result<Self> {
        let crystal = CrystalEncoder::new(
            CrystalEncoderConfig::new(dims.node_dim, dims.d),
            seed_for(seed, Modality::Crystal),
        )?;
        let dos = if mods.contains(&Modality::Dos) {
            Some(DosEncoder::new(DosEncoderConfig::new(dims.d), seed_for(seed, Modality::Dos))?)
        } else {
            None
        };
        let density = if mods.contains(&Modality::Density) {
            Some(DensityEncoder::new(
                DensityEncoderConfig::new(dims.grid_size, dims.d),
                seed_for(seed, Modality::Density),
            )?)
        } else {
            None
        };
        Ok(Self {
            dims,
            crystal,
            dos,
            density,
            log_tau: T::lit(tau.clamp(TAU_MIN, TAU_MAX).ln()),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut m = vec![Modality::Crystal];
        if self.dos.is_some() {
            m.push(Modality::Dos);
        }
        if self.density.is_some() {
            m.push(Modality::Density);
        }
        m
    }

    /// Temperature after clamping to `[TAU_MIN, TAU_MAX]`.
    pub fn tau(&self) -> T {
        self.log_tau
            .max(T::lit(TAU_MIN.ln()))
            .min(T::lit(TAU_MAX.ln()))
            .exp()
    }

    /// Every parameter under `crystal.`, `dos.`, `density.` plus `log_tau`.
    pub fn flat_params(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let mut add = |prefix: &str, p: &ParamSet<T>| {
            for (k, v) in p {
                out.insert(format!("{prefix}.{k}"), v.clone());
            }
        };
        add(Modality::Crystal.name(), self.crystal.params());
        if let Some(e) = &self.dos {
            add(Modality::Dos.name(), e.params());
        }
        if let Some(e) = &self.density {
            add(Modality::Density.name(), e.params());
        }
        out.insert(LOG_TAU.into(), Tensor::vector(vec![self.log_tau]));
        out
    }

    /// Rebuilds a model from [`Model::flat_params`] output. The encoder set
    /// follows the prefixes present.
    pub fn from_flat(dims: ModelDims, flat: &ParamSet<T>) -> Result<Self> {
        let sub = |m: Modality| -> Option<ParamSet<T>> {
            let prefix = format!("{}.", m.name());
            let p: ParamSet<T> = flat
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
                .collect();
            (!p.is_empty()).then_some(p)
        };
        let crystal = CrystalEncoder::with_params(
            CrystalEncoderConfig::new(dims.node_dim, dims.d),
            sub(Modality::Crystal).ok_or_else(|| Error::UnknownParameter("crystal.*".into()))?,
        )?;
        let dos = sub(Modality::Dos)
            .map(|p| DosEncoder::with_params(DosEncoderConfig::new(dims.d), p))
            .transpose()?;
        let density = sub(Modality::Density)
            .map(|p| DensityEncoder::with_params(DensityEncoderConfig::new(dims.grid_size, dims.d), p))
            .transpose()?;
        let log_tau = flat
            .get(LOG_TAU)
            .filter(|t| t.len() == 1)
            .ok_or_else(|| Error::UnknownParameter(LOG_TAU.into()))?
            .data()[0];
        let known = |k: &str| {
            k == LOG_TAU
                || Modality::ALL
                    .iter()
                    .any(|m| k.starts_with(&format!("{}.", m.name())))
        };
        if let Some(extra) = flat.keys().find(|k| !known(k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(Self {
            dims,
            crystal,
            dos,
            density,
            log_tau,
        })
    }

    /// Replaces parameter values; `flat` may hold a subset of the names.
    pub fn update_from(&mut self, flat: &ParamSet<T>) -> Result<()> {
        let mut all = self.flat_params();
        for (k, v) in flat {
            match all.get_mut(k) {
                Some(t) if t.shape() == v.shape() => *t = v.clone(),
                Some(_) => return Err(Error::ShapeMismatch(format!("parameter {k}"))),
                None => return Err(Error::UnknownParameter(k.clone())),
            }
        }
        *self = Self::from_flat(self.dims, &all)?;
        Ok(())
    }

    /// Records the encoder for `m` on `g`; parameter names are unprefixed.
    pub fn forward(&self, m: Modality, g: &mut Graph<T>, rec: &MaterialRecord) -> Result<Var> {
        let missing = || Error::ModalityMissing(m.name().into());
        match m {
            Modality::Crystal => self.crystal.forward(g, rec.crystal()?),
            Modality::Dos => self.dos.as_ref().ok_or_else(missing)?.forward(g, rec.dos()?),
            Modality::Density => self
                .density
                .as_ref()
                .ok_or_else(missing)?
                .forward(g, rec.density()?),
        }
    }

    /// Embeddings of `records` under modality `m`, one row per record.
    pub fn embed(&self, m: Modality, records: &[&MaterialRecord]) -> Result<EmbeddingBatch<T>> {
        let rows = records
            .par_iter()
            .map(|r| {
                let mut g = Graph::new();
                let v = self.forward(m, &mut g, r)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingBatch::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GeneratorSpec};

    fn data() -> Dataset {
        let spec = GeneratorSpec {
            grid_size: 8,
            tokens: 16,
            ..GeneratorSpec::default()
        };
        generate_dataset(4, 1, &spec).unwrap()
    }

    #[test]
    fn flat_round_trip() {
        let data = data();
        let dims = ModelDims::from_dataset(&data, 8).unwrap();
        assert_eq!((dims.node_dim, dims.grid_size), (8, 8));
        let m = Model::<f64>::new(dims, &Modality::ALL, 3, 0.07).unwrap();
        assert!((m.tau() - 0.07).abs() < 1e-15);
        let back = Model::from_flat(dims, &m.flat_params()).unwrap();
        assert_eq!(back, m);
        let only = Model::<f64>::new(dims, &[Modality::Crystal, Modality::Dos], 3, 0.07).unwrap();
        assert_eq!(only.modalities(), vec![Modality::Crystal, Modality::Dos]);
        assert_eq!(Model::from_flat(dims, &only.flat_params()).unwrap(), only);
    }

    #[test]
    fn embed_matches_single_encode() {
        let data = data();
        let dims = ModelDims::from_dataset(&data, 8).unwrap();
        let m = Model::<f64>::new(dims, &Modality::ALL, 0, 0.07).unwrap();
        let recs: Vec<&MaterialRecord> = data.records.iter().collect();
        for modality in Modality::ALL {
            let b = m.embed(modality, &recs).unwrap();
            assert_eq!((b.n(), b.d()), (4, 8));
        }
        let single = m.crystal.encode(recs[2].crystal().unwrap()).unwrap();
        assert_eq!(m.embed(Modality::Crystal, &recs).unwrap().row(2), single.values());
    }

    #[test]
    fn update_rejects_unknown() {
        let data = data();
        let dims = ModelDims::from_dataset(&data, 8).unwrap();
        let mut m = Model::<f64>::new(dims, &[Modality::Crystal], 0, 0.07).unwrap();
        let mut p = ParamSet::new();
        p.insert("dos.out.w".into(), Tensor::zeros(&[4, 8]));
        assert!(matches!(m.update_from(&p), Err(Error::UnknownParameter(_))));
        let mut p = ParamSet::new();
        p.insert(LOG_TAU.into(), Tensor::vector(vec![-1.0]));
        m.update_from(&p).unwrap();
        assert_eq!(m.log_tau, -1.0);
    }
}
