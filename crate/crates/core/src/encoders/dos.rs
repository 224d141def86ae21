use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::DosCurve;
use crate::tensor::Tensor;

use super::{check_params, linear, Encoder, Init};

/// Energy-aware attention encoder for DOS curves.
///
/// Each `(energy, value)` token is embedded by two affine maps into `R^h`,
/// concatenated, mixed, and halved back to `h = d/2` before the attention
/// blocks. There is no positional encoding, so the output depends on the
/// tokens only as a set.
#[derive(Clone, Debug, PartialEq)]
pub struct DosEncoderConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Energies are multiplied by this before embedding.
    pub energy_scale: f64,
}

impl DosEncoderConfig {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            blocks: 2,
            heads: 2,
            energy_scale: 0.1,
        }
    }

    pub fn hidden(&self) -> usize {
        self.embed_dim / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DosEncoder<T> {
    cfg: DosEncoderConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> DosEncoder<T> {
    pub fn new(cfg: DosEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.embed_dim < 2 || cfg.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "DOS encoder needs an even embedding dimension, got {}",
                cfg.embed_dim
            )));
        }
        if cfg.heads == 0 || cfg.hidden() % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                cfg.heads,
                cfg.hidden()
            )));
        }
        if !(cfg.energy_scale.is_finite() && cfg.energy_scale > 0.0) {
            return Err(Error::Config("energy_scale must be positive".into()));
        }
        let params = Self::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: DosEncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let enc = Self::new(cfg, 0)?;
        check_params(&params, &enc.params)?;
        Ok(Self {
            cfg: enc.cfg,
            params,
        })
    }

    fn init(cfg: &DosEncoderConfig, seed: u64) -> ParamSet<T> {
        let mut init = Init::new(seed);
        let mut p = ParamSet::new();
        let h = cfg.hidden();
        init.linear(&mut p, "value_embed", 1, h);
        init.linear(&mut p, "energy_embed", 1, h);
        init.linear(&mut p, "mix", 2 * h, 2 * h);
        init.linear(&mut p, "down", 2 * h, h);
        for b in 0..cfg.blocks {
            for part in ["q", "k", "v", "o"] {
                init.linear(&mut p, &format!("blk{b}.{part}"), h, h);
            }
            init.linear(&mut p, &format!("blk{b}.ff1"), h, 2 * h);
            init.linear(&mut p, &format!("blk{b}.ff2"), 2 * h, h);
        }
        init.linear(&mut p, "out", h, cfg.embed_dim);
        p
    }

    pub fn config(&self) -> &DosEncoderConfig {
        &self.cfg
    }

    /// Forward pass over raw `(energy, value)` tokens in any order.
    pub fn forward_tokens(&self, g: &mut Graph<T>, energies: &[f64], values: &[f64]) -> Result<Var> {
        if energies.is_empty() {
            return Err(Error::EmptyCurve);
        }
        if energies.len() != values.len() {
            return Err(Error::InvalidCurve(format!(
                "{} energies, {} values",
                energies.len(),
                values.len()
            )));
        }
        let t = energies.len();
        let vals: Vec<T> = values.iter().map(|&v| T::lit(v)).collect();
        let ens: Vec<T> = energies
            .iter()
            .map(|&e| T::lit(e * self.cfg.energy_scale))
            .collect();
        let vals = g.input(Tensor::new(vec![t, 1], vals)?);
        let ens = g.input(Tensor::new(vec![t, 1], ens)?);
        let ve = linear(g, &self.params, "value_embed", vals)?;
        let ee = linear(g, &self.params, "energy_embed", ens)?;
        let tok = g.concat_cols(&[ve, ee])?;
        let tok = linear(g, &self.params, "mix", tok)?;
        let tok = g.silu(tok);
        let mut x = linear(g, &self.params, "down", tok)?;
        for b in 0..self.cfg.blocks {
            x = self.attention(g, x, b)?;
        }
        let pooled = g.mean_rows(x);
        linear(g, &self.params, "out", pooled)
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, b: usize) -> Result<Var> {
        let h = self.cfg.hidden();
        let dh = h / self.cfg.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let xn = g.layer_norm_rows(x);
        let q = linear(g, &self.params, &format!("blk{b}.q"), xn)?;
        let k = linear(g, &self.params, &format!("blk{b}.k"), xn)?;
        let v = linear(g, &self.params, &format!("blk{b}.v"), xn)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = linear(g, &self.params, &format!("blk{b}.o"), cat)?;
        let x = g.add(x, o)?;

        let xn = g.layer_norm_rows(x);
        let f = linear(g, &self.params, &format!("blk{b}.ff1"), xn)?;
        let f = g.silu(f);
        let f = linear(g, &self.params, &format!("blk{b}.ff2"), f)?;
        g.add(x, f)
    }
}

impl<T: Scalar> Encoder<T> for DosEncoder<T> {
    type Input = DosCurve;

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, curve: &DosCurve) -> Result<Var> {
        self.forward_tokens(g, curve.energies(), curve.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::gradcheck::worst_param_error;

    fn curve(t: usize, shift: f64) -> DosCurve {
        let energies: Vec<f64> = (0..t).map(|i| -5.0 + 10.0 * i as f64 / (t - 1) as f64 + shift).collect();
        let values = (0..t).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        DosCurve::new(energies, values).unwrap()
    }

    #[test]
    fn output_dimension() {
        let enc = DosEncoder::<f64>::new(DosEncoderConfig::new(128), 0).unwrap();
        let v = enc.encode(&curve(64, 0.0)).unwrap();
        assert_eq!(v.dim(), 128);
    }

    #[test]
    fn joint_token_permutation_invariance() {
        let enc = DosEncoder::<f64>::new(DosEncoderConfig::new(16), 3).unwrap();
        let c = curve(12, 0.0);
        let a = enc.encode(&c).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let e: Vec<f64> = perm.iter().map(|&i| c.energies()[i]).collect();
        let v: Vec<f64> = perm.iter().map(|&i| c.values()[i]).collect();
        let mut g = Graph::new();
        let out = enc.forward_tokens(&mut g, &e, &v).unwrap();
        for (x, y) in a.values().iter().zip(g.value(out).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn energy_shift_changes_embedding() {
        let enc = DosEncoder::<f64>::new(DosEncoderConfig::new(16), 5).unwrap();
        let a = enc.encode(&curve(16, 0.0)).unwrap();
        let b = enc.encode(&curve(16, 1.5)).unwrap();
        let diff = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            DosEncoder::<f64>::new(DosEncoderConfig::new(7), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token() {
        let enc = DosEncoder::<f64>::new(DosEncoderConfig::new(8), 0).unwrap();
        let c = DosCurve::new(vec![0.0], vec![2.0]).unwrap();
        assert!(enc.encode(&c).unwrap().values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_gradients() {
        let mut enc = DosEncoder::<f64>::new(DosEncoderConfig::new(8), 11).unwrap();
        let err = worst_param_error(&mut enc, &curve(8, 0.3));
        assert!(err < 1e-3, "worst relative error {err}");
    }
}
