use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::DensityGrid;
use crate::tensor::Tensor;

use super::{check_params, get, linear, Encoder, Init};

/// Small 3D convolutional encoder for density grids.
///
/// Pipeline: 2× average pool, conv(1→c1)+SiLU, 2× pool, conv(c1→c2)+SiLU,
/// flatten, linear to `d`. The grid size must be a multiple of 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DensityEncoderConfig {
    pub grid_size: usize,
    pub embed_dim: usize,
    pub channels: [usize; 2],
}

impl DensityEncoderConfig {
    pub fn new(grid_size: usize, embed_dim: usize) -> Self {
        Self {
            grid_size,
            embed_dim,
            channels: [4, 8],
        }
    }

    fn flat_len(&self) -> usize {
        let g = self.grid_size / 4;
        self.channels[1] * g * g * g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityEncoder<T> {
    cfg: DensityEncoderConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> DensityEncoder<T> {
    pub fn new(cfg: DensityEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.grid_size == 0 || cfg.grid_size % 4 != 0 {
            return Err(Error::Config(format!(
                "density grid size must be a positive multiple of 4, got {}",
                cfg.grid_size
            )));
        }
        if cfg.embed_dim == 0 || cfg.channels.contains(&0) {
            return Err(Error::Config("density encoder dims must be positive".into()));
        }
        let params = Self::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: DensityEncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let enc = Self::new(cfg, 0)?;
        check_params(&params, &enc.params)?;
        Ok(Self {
            cfg: enc.cfg,
            params,
        })
    }

    fn init(cfg: &DensityEncoderConfig, seed: u64) -> ParamSet<T> {
        let mut init = Init::new(seed);
        let mut p = ParamSet::new();
        let [c1, c2] = cfg.channels;
        p.insert("conv1.w".into(), init.uniform(&[c1, 1, 3, 3, 3], 27));
        p.insert("conv1.b".into(), init.uniform(&[c1], 27));
        p.insert("conv2.w".into(), init.uniform(&[c2, c1, 3, 3, 3], 27 * c1));
        p.insert("conv2.b".into(), init.uniform(&[c2], 27 * c1));
        init.linear(&mut p, "out", cfg.flat_len(), cfg.embed_dim);
        p
    }

    pub fn config(&self) -> &DensityEncoderConfig {
        &self.cfg
    }

    fn conv(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = g.param(&format!("{name}.w"), get(&self.params, &format!("{name}.w"))?);
        let b = g.param(&format!("{name}.b"), get(&self.params, &format!("{name}.b"))?);
        let y = g.conv3d(x, w, b)?;
        Ok(g.silu(y))
    }
}

impl<T: Scalar> Encoder<T> for DensityEncoder<T> {
    type Input = DensityGrid;

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, grid: &DensityGrid) -> Result<Var> {
        let n = self.cfg.grid_size;
        if grid.grid_size() != n {
            return Err(Error::GridSizeMismatch {
                expected: n,
                got: grid.grid_size(),
            });
        }
        let vox: Vec<T> = grid.voxels().iter().map(|&v| T::lit(f64::from(v))).collect();
        let x = g.input(Tensor::new(vec![1, n, n, n], vox)?);
        let x = g.avg_pool3d(x)?;
        let x = self.conv(g, "conv1", x)?;
        let x = g.avg_pool3d(x)?;
        let x = self.conv(g, "conv2", x)?;
        let flat = g.reshape(x, &[1, self.cfg.flat_len()])?;
        linear(g, &self.params, "out", flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::gradcheck::worst_param_error;
    use crate::synthdata::{generate_material, GeneratorSpec};

    fn grid(g: usize, seed: u64) -> DensityGrid {
        let spec = GeneratorSpec {
            grid_size: g,
            tokens: 8,
            ..GeneratorSpec::default()
        };
        generate_material(seed, &spec).unwrap().density.unwrap()
    }

    #[test]
    fn output_dimension() {
        let enc = DensityEncoder::<f64>::new(DensityEncoderConfig::new(16, 128), 0).unwrap();
        assert_eq!(enc.encode(&grid(16, 1)).unwrap().dim(), 128);
    }

    #[test]
    fn zero_grid_zero_biases() {
        let mut enc = DensityEncoder::<f64>::new(DensityEncoderConfig::new(8, 8), 0).unwrap();
        for name in ["conv1.b", "conv2.b", "out.b"] {
            let shape = enc.params()[name].shape().to_vec();
            enc.params_mut().insert(name.into(), Tensor::zeros(&shape));
        }
        let zero = DensityGrid::new(8, vec![0.0; 512]).unwrap();
        let v = enc.encode(&zero).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaling_changes_embedding() {
        let enc = DensityEncoder::<f64>::new(DensityEncoderConfig::new(16, 16), 2).unwrap();
        let a = grid(16, 4);
        let b = DensityGrid::new(16, a.voxels().iter().map(|v| v * 2.0).collect()).unwrap();
        let (ea, eb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
        let diff = ea
            .values()
            .iter()
            .zip(eb.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn wrong_grid_size() {
        let enc = DensityEncoder::<f64>::new(DensityEncoderConfig::new(16, 8), 0).unwrap();
        assert!(matches!(
            enc.encode(&grid(8, 1)),
            Err(Error::GridSizeMismatch { expected: 16, got: 8 })
        ));
    }

    #[test]
    fn parameter_gradients() {
        let mut enc = DensityEncoder::<f64>::new(DensityEncoderConfig::new(8, 4), 3).unwrap();
        let err = worst_param_error(&mut enc, &grid(8, 2));
        assert!(err < 1e-3, "worst relative error {err}");
    }
}
