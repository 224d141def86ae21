use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::CrystalGraph;
use crate::tensor::Tensor;

use super::{check_params, linear, Encoder, Init};

/// Periodic message-passing surrogate for the crystal encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrystalEncoderConfig {
    pub node_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub rounds: usize,
}

impl CrystalEncoderConfig {
    pub fn new(node_dim: usize, embed_dim: usize) -> Self {
        Self {
            node_dim,
            hidden: embed_dim,
            embed_dim,
            rounds: 2,
        }
    }
}

/// Edge features per neighbour: distance and inverse distance.
const EDGE_FEATURES: usize = 2;
const MIN_DISTANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CrystalEncoder<T> {
    cfg: CrystalEncoderConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> CrystalEncoder<T> {
    pub fn new(cfg: CrystalEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.node_dim == 0 || cfg.hidden == 0 || cfg.embed_dim == 0 {
            return Err(Error::Config("crystal encoder dims must be positive".into()));
        }
        let params = Self::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: CrystalEncoderConfig, params: ParamSet<T>) -> Result<Self> {
        check_params(&params, &Self::init(&cfg, 0))?;
        Ok(Self { cfg, params })
    }

    fn init(cfg: &CrystalEncoderConfig, seed: u64) -> ParamSet<T> {
        let mut init = Init::new(seed);
        let mut p = ParamSet::new();
        let h = cfg.hidden;
        init.linear(&mut p, "embed", cfg.node_dim, h);
        for r in 0..cfg.rounds {
            init.linear(&mut p, &format!("mp{r}.msg"), h + EDGE_FEATURES, h);
            init.linear(&mut p, &format!("mp{r}.upd"), 2 * h, h);
        }
        init.linear(&mut p, "out", h, cfg.embed_dim);
        p
    }

    pub fn config(&self) -> &CrystalEncoderConfig {
        &self.cfg
    }
}

impl<T: Scalar> Encoder<T> for CrystalEncoder<T> {
    type Input = CrystalGraph;

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, crystal: &CrystalGraph) -> Result<Var> {
        crystal.validate()?;
        if crystal.feature_dim() != self.cfg.node_dim {
            return Err(Error::ShapeMismatch(format!(
                "node features have {} columns, encoder expects {}",
                crystal.feature_dim(),
                self.cfg.node_dim
            )));
        }
        let n = crystal.num_nodes;
        let feats: Vec<T> = crystal
            .node_features
            .iter()
            .flatten()
            .map(|&v| T::lit(v))
            .collect();
        let x = g.input(Tensor::new(vec![n, self.cfg.node_dim], feats)?);
        let src: Vec<usize> = crystal.edges.iter().map(|e| e.src).collect();
        let dst: Vec<usize> = crystal.edges.iter().map(|e| e.dst).collect();
        let mut ef = Vec::with_capacity(crystal.edges.len() * EDGE_FEATURES);
        for e in &crystal.edges {
            let r = e.displacement.iter().map(|d| d * d).sum::<f64>().sqrt().max(MIN_DISTANCE);
            ef.push(T::lit(r));
            ef.push(T::lit(1.0 / r));
        }
        let edge_feats = g.input(Tensor::new(vec![crystal.edges.len(), EDGE_FEATURES], ef)?);

        let pre = linear(g, &self.params, "embed", x)?;
        let mut h = g.silu(pre);
        for r in 0..self.cfg.rounds {
            let hs = g.gather_rows(h, &src)?;
            let m_in = g.concat_cols(&[hs, edge_feats])?;
            let m = linear(g, &self.params, &format!("mp{r}.msg"), m_in)?;
            let m = g.silu(m);
            let agg = g.scatter_mean(m, &dst, n)?;
            let u = g.concat_cols(&[h, agg])?;
            let u = linear(g, &self.params, &format!("mp{r}.upd"), u)?;
            h = g.silu(u);
        }
        let pooled = g.mean_rows(h);
        linear(g, &self.params, "out", pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::gradcheck::worst_param_error;
    use crate::synthdata::{generate_material, Edge, GeneratorSpec};

    fn sample(seed: u64) -> CrystalGraph {
        let spec = GeneratorSpec {
            grid_size: 4,
            tokens: 8,
            ..GeneratorSpec::default()
        };
        generate_material(seed, &spec).unwrap().crystal.unwrap()
    }

    #[test]
    fn output_dimension() {
        let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(8, 128), 1).unwrap();
        let v = enc.encode(&sample(3)).unwrap();
        assert_eq!(v.dim(), 128);
        assert!(v.values().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn node_permutation_invariance() {
        let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(8, 16), 2).unwrap();
        let c = sample(5);
        let n = c.num_nodes;
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut p = c.relabeled(&perm);
        p.edges.reverse();
        let a = enc.encode(&c).unwrap();
        let b = enc.encode(&p).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn single_zero_node() {
        let mut enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(3, 8), 4).unwrap();
        enc.params_mut().insert("out.b".into(), Tensor::zeros(&[8]));
        let g = CrystalGraph::new(vec![vec![0.0; 3]], vec![]).unwrap();
        let v = enc.encode(&g).unwrap();
        assert!(v.values().iter().all(|x| x.is_finite()));
        let looped = CrystalGraph::new(
            vec![vec![0.0; 3]],
            vec![Edge {
                src: 0,
                dst: 0,
                displacement: [3.0, 0.0, 0.0],
            }],
        )
        .unwrap();
        assert!(enc.encode(&looped).is_ok());
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(4, 8), 4).unwrap();
        assert!(matches!(enc.encode(&sample(1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameter_gradients() {
        let mut enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(8, 6), 7).unwrap();
        let err = worst_param_error(&mut enc, &sample(9));
        assert!(err < 1e-3, "worst relative error {err}");
    }

    #[test]
    fn works_in_f32() {
        let enc = CrystalEncoder::<f32>::new(CrystalEncoderConfig::new(8, 8), 1).unwrap();
        assert_eq!(enc.encode(&sample(2)).unwrap().dim(), 8);
    }
}
