use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::encoding_len;
use crate::autodiff::{Tape, Tensor, Var};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

/// Architecture shared by the geometry and appearance MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub width: usize,
    pub hidden_layers: usize,
    /// Hidden layer whose input is concatenated with the network input.
    pub skip_layer: usize,
    pub encoding_levels: usize,
    pub softplus_beta: f64,
    /// Feed only the along-ray component of the SDF gradient to the
    /// appearance network.
    pub gradient_along_ray: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 128,
            hidden_layers: 4,
            skip_layer: 2,
            encoding_levels: 6,
            softplus_beta: 10.0,
            gradient_along_ray: false,
        }
    }
}

impl NetworkConfig {
    pub fn geometry_input_dim(&self, dg: usize) -> usize {
        dg + 2 * encoding_len(1, self.encoding_levels)
    }

    pub fn appearance_input_dim(&self, da: usize) -> usize {
        encoding_len(3, self.encoding_levels) + da + 3 + encoding_len(1, self.encoding_levels)
    }
}

/// Dense layers `x·W + b`; `W` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, dims: &[(usize, usize)], last_scale: f64) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, &(i, o)) in dims.iter().enumerate() {
            let last = l + 1 == dims.len();
            let std = (2.0 / i as f64).sqrt() * if last { last_scale } else { 1.0 };
            let normal = Normal::new(0.0, std).unwrap();
            weights.push(Tensor::from_vec(i, o, (0..i * o).map(|_| normal.sample(rng)).collect()));
            biases.push(Tensor::zeros(1, o));
        }
        Self { weights, biases }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| w.shape()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|t| t.data.len()).sum()
    }

    fn zeroed(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Tensor::zeros(w.rows, w.cols)).collect(),
            biases: self.biases.iter().map(|b| Tensor::zeros(b.rows, b.cols)).collect(),
        }
    }
}

fn layer_dims(cfg: &NetworkConfig, input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..=cfg.hidden_layers)
        .map(|l| {
            let i = match l {
                0 => input,
                l if l == cfg.skip_layer => cfg.width + input,
                _ => cfg.width,
            };
            let o = if l == cfg.hidden_layers { output } else { cfg.width };
            (i, o)
        })
        .collect()
}

/// Weights of both networks plus the logistic steepness.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub geometry: Mlp,
    pub appearance: Mlp,
    pub log_steepness: f64,
}

const MAGIC: &[u8; 4] = b"SMLP";
const VERSION: u32 = 1;

impl NetworkParams {
    /// Seeded random initialisation for feature sizes `da` (appearance) and
    /// `dg` (geometry).
    pub fn init(config: NetworkConfig, da: usize, dg: usize, seed: u64) -> Result<Self> {
        if config.width == 0
            || config.hidden_layers == 0
            || config.skip_layer == 0
            || config.skip_layer > config.hidden_layers
        {
            return Err(Error::Config(format!("invalid network shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = Mlp::init(&mut rng, &layer_dims(&config, config.geometry_input_dim(dg), 1), 0.1);
        let appearance = Mlp::init(&mut rng, &layer_dims(&config, config.appearance_input_dim(da), 3), 0.1);
        Ok(Self {
            config,
            geometry,
            appearance,
            log_steepness: 20f64.ln(),
        })
    }

    /// Same shapes, every weight zero, `log_steepness` kept.
    pub fn zeroed(&self) -> Self {
        Self {
            config: self.config,
            geometry: self.geometry.zeroed(),
            appearance: self.appearance.zeroed(),
            log_steepness: self.log_steepness,
        }
    }

    pub fn steepness(&self) -> f64 {
        self.log_steepness.exp()
    }

    pub fn geometry_feature_dim(&self) -> usize {
        self.geometry.weights[0].rows - 2 * encoding_len(1, self.config.encoding_levels)
    }

    pub fn appearance_feature_dim(&self) -> usize {
        self.appearance.weights[0].rows
            - encoding_len(3, self.config.encoding_levels)
            - 3
            - encoding_len(1, self.config.encoding_levels)
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in [&self.geometry, &self.appearance] {
            for (w, b) in net.weights.iter().zip(&net.biases) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    /// Mutable tensors in checkpoint order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in [&mut self.geometry, &mut self.appearance] {
            for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION)
            .u32(c.width as u32)
            .u32(c.hidden_layers as u32)
            .u32(c.skip_layer as u32)
            .u32(c.encoding_levels as u32)
            .f32s(&[c.softplus_beta as f32])
            .u32(c.gradient_along_ray as u32);
        for net in [&self.geometry, &self.appearance] {
            w.u32(net.weights.len() as u32);
            for (i, o) in net.layer_dims() {
                w.u32(i as u32).u32(o as u32);
            }
        }
        for t in self.tensors() {
            let v: Vec<f32> = t.data.iter().map(|&x| x as f32).collect();
            w.f32s(&v);
        }
        w.f32s(&[self.log_steepness as f32]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, asset);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let config = NetworkConfig {
            width: r.u32()? as usize,
            hidden_layers: r.u32()? as usize,
            skip_layer: r.u32()? as usize,
            encoding_levels: r.u32()? as usize,
            softplus_beta: r.f32s(1)?[0] as f64,
            gradient_along_ray: r.u32()? != 0,
        };
        let mut dims = Vec::new();
        for _ in 0..2 {
            let n = r.u32()? as usize;
            if n != config.hidden_layers + 1 {
                return Err(r.error(format!("{n} layers, header says {}", config.hidden_layers + 1)));
            }
            let d: Vec<(usize, usize)> = (0..n)
                .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
                .collect::<Result<_>>()?;
            dims.push(d);
        }
        let mut nets = Vec::new();
        for d in &dims {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for &(i, o) in d {
                let wv = r.f32s(i * o)?.into_iter().map(f64::from).collect();
                weights.push(Tensor::from_vec(i, o, wv));
                let bv = r.f32s(o)?.into_iter().map(f64::from).collect();
                biases.push(Tensor::from_vec(1, o, bv));
            }
            nets.push(Mlp { weights, biases });
        }
        let log_steepness = r.f32s(1)?[0] as f64;
        r.finish()?;
        let appearance = nets.pop().unwrap();
        let geometry = nets.pop().unwrap();
        let params = Self {
            config,
            geometry,
            appearance,
            log_steepness,
        };
        let expect_g = layer_dims(&config, params.geometry.weights[0].rows, 1);
        let expect_a = layer_dims(&config, params.appearance.weights[0].rows, 3);
        if params.geometry.layer_dims() != expect_g || params.appearance.layer_dims() != expect_a {
            return Err(r.error("layer dimensions do not chain"));
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    pub fn on_tape(tape: &mut Tape, mlp: &Mlp, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            weights: mlp.weights.iter().map(&mut put).collect(),
            biases: mlp.biases.iter().map(&mut put).collect(),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b])
    }
}

/// Tape handles for a full [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub geometry: MlpVars,
    pub appearance: MlpVars,
    pub log_steepness: Var,
}

impl ParamVars {
    pub fn on_tape(tape: &mut Tape, params: &NetworkParams, train_geometry: bool, train_appearance: bool) -> Self {
        let geometry = MlpVars::on_tape(tape, &params.geometry, train_geometry);
        let appearance = MlpVars::on_tape(tape, &params.appearance, train_appearance);
        let s = Tensor::scalar(params.log_steepness);
        let log_steepness = if train_geometry {
            tape.param(s)
        } else {
            tape.constant(s)
        };
        Self {
            geometry,
            appearance,
            log_steepness,
        }
    }

    /// Handles in checkpoint order followed by `log_steepness`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.geometry.all().chain(self.appearance.all()).collect();
        v.push(self.log_steepness);
        v
    }
}

fn check_finite(tape: &Tape, v: Var, layer: String) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFault { layer })
    }
}

/// Output of an MLP pass: pre-activations are kept for the input-gradient
/// pass.
struct Forward {
    out: Var,
    pre: Vec<Var>,
}

fn mlp_forward(tape: &mut Tape, vars: &MlpVars, config: &NetworkConfig, x: Var, name: &str) -> Result<Forward> {
    let mut h = x;
    let mut pre = Vec::new();
    let last = vars.weights.len() - 1;
    for l in 0..=last {
        let input = if l == config.skip_layer {
            tape.concat_cols(&[h, x])
        } else {
            h
        };
        let z = tape.matmul(input, vars.weights[l]);
        let z = tape.add_row(z, vars.biases[l]);
        check_finite(tape, z, format!("{name}.{l}"))?;
        if l < last {
            pre.push(z);
            h = tape.softplus(z, config.softplus_beta);
        } else {
            h = z;
        }
    }
    Ok(Forward { out: h, pre })
}

/// Geometry network: returns the `N × 1` SDF and, when requested, its
/// gradient with respect to the `N × in` input, built from tape ops so it
/// can itself be differentiated.
pub fn geometry_on_tape(
    tape: &mut Tape,
    vars: &MlpVars,
    config: &NetworkConfig,
    x: Var,
    with_input_grad: bool,
) -> Result<(Var, Option<Var>)> {
    let fwd = mlp_forward(tape, vars, config, x, "geometry")?;
    if !with_input_grad {
        return Ok((fwd.out, None));
    }
    let n = tape.shape(x).0;
    let in_dim = tape.shape(x).1;
    let last = vars.weights.len() - 1;
    let mut g = tape.constant(Tensor::filled(n, 1, 1.0));
    let mut skip_grad = None;
    for l in (0..=last).rev() {
        if l < last {
            let d = tape.sigmoid_scaled(fwd.pre[l], config.softplus_beta);
            g = tape.mul(g, d);
        }
        let gin = tape.matmul_t(g, vars.weights[l]);
        if l == config.skip_layer {
            let width = tape.shape(gin).1 - in_dim;
            skip_grad = Some(tape.slice_cols(gin, width, in_dim));
            g = tape.slice_cols(gin, 0, width);
        } else {
            g = gin;
        }
    }
    if let Some(s) = skip_grad {
        g = tape.add(g, s);
    }
    Ok((fwd.out, Some(g)))
}

/// Appearance network: `N × 3` colours in `[0, 1]`.
pub fn appearance_on_tape(tape: &mut Tape, vars: &MlpVars, config: &NetworkConfig, x: Var) -> Result<Var> {
    let fwd = mlp_forward(tape, vars, config, x, "appearance")?;
    let rgb = tape.sigmoid(fwd.out);
    check_finite(tape, rgb, "appearance.output".into())?;
    Ok(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            width: 16,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn smlp_round_trip() {
        let p = NetworkParams::init(small(), 7, 7, 3).unwrap();
        let bytes = p.to_bytes();
        let back = NetworkParams::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.geometry_feature_dim(), 7);
        assert_eq!(back.appearance_feature_dim(), 7);
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(NetworkParams::from_bytes(&bad, "x").is_err());
    }

    #[test]
    fn layer_shapes_chain() {
        let p = NetworkParams::init(NetworkConfig::default(), 7, 5, 0).unwrap();
        let dims = p.geometry.layer_dims();
        assert_eq!(dims.len(), 5);
        assert_eq!(dims[0], (5 + 26, 128));
        assert_eq!(dims[2], (128 + 31, 128));
        assert_eq!(dims[4], (128, 1));
        assert_eq!(p.appearance.layer_dims()[4], (128, 3));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = NetworkParams::init(small(), 2, 3, 9).unwrap();
        let cfg = p.config;
        let in_dim = cfg.geometry_input_dim(3);
        let x0: Vec<f64> = (0..2 * in_dim).map(|i| ((i * 37 % 11) as f64 / 11.0) - 0.5).collect();
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = MlpVars::on_tape(&mut t, &p.geometry, false);
            let xv = t.constant(Tensor::from_vec(2, in_dim, x.to_vec()));
            let (s, g) = geometry_on_tape(&mut t, &v, &cfg, xv, true).unwrap();
            (t.value(s).clone(), t.value(g.unwrap()).clone())
        };
        let (_, grad) = eval(&x0);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut a = x0.clone();
            a[i] += h;
            let mut b = x0.clone();
            b[i] -= h;
            let fd = (eval(&a).0.data[i / in_dim] - eval(&b).0.data[i / in_dim]) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                grad.data[i]
            );
        }
    }
}
