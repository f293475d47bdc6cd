//! Direct-feature extractors: an MLP for vector inputs and a small
//! convolutional network ending in a modulated-attention block for images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{next, normal_tensor, prefixed, Linear, LinearVars, Module};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackboneConfig {
    Mlp { hidden: [usize; 2] },
    Cnn { channels: usize },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Mlp { hidden: [64, 64] }
    }
}

/// `input -> relu(hidden0) -> relu(hidden1) -> feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: [Linear<T>; 3],
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: [LinearVars; 3],
}

impl<T: Real> Mlp<T> {
    pub fn init<R: Rng>(rng: &mut R, input: usize, hidden: [usize; 2], feature_dim: usize) -> Self {
        Mlp {
            layers: [
                Linear::init(rng, input, hidden[0]),
                Linear::init(rng, hidden[0], hidden[1]),
                Linear::init(rng, hidden[1], feature_dim),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }
}

impl MlpVars {
    /// `x: [batch, input] -> [batch, feature_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.relu(h)?;
        self.layers[2].forward(tape, h)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    type Bound = MlpVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> MlpVars {
        MlpVars {
            layers: [
                self.layers[0].bind_vars(vars),
                self.layers[1].bind_vars(vars),
                self.layers[2].bind_vars(vars),
            ],
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn init<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        Conv3x3 {
            weight: normal_tensor(rng, &[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt()),
            bias: Tensor::zeros(vec![cout]),
        }
    }
}

/// Self-attention over spatial positions modulated by a conditional spatial map:
/// `f_att = f + MA(f) * SA(f)`.
///
/// `SA(f) = W_out (A g(f)^T)^T` with `A = softmax_rows(theta(f)^T phi(f))` over
/// all `HW` positions; `theta`, `phi`, `g` are 1x1 projections to `C/2`
/// channels. `MA(f) = HW * softmax(w_ma f)` is one weight per position, so a
/// uniform map scales every position by exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedAttention<T> {
    pub theta: Tensor<T>,
    pub phi: Tensor<T>,
    pub g: Tensor<T>,
    pub out: Tensor<T>,
    pub modulator: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    pub out: Var,
    pub modulator: Var,
}

impl<T: Real> ModulatedAttention<T> {
    pub fn init<R: Rng>(rng: &mut R, channels: usize) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let s_in = (1.0 / channels as f64).sqrt();
        Ok(ModulatedAttention {
            theta: normal_tensor(rng, &[half, channels], s_in),
            phi: normal_tensor(rng, &[half, channels], s_in),
            g: normal_tensor(rng, &[half, channels], s_in),
            out: normal_tensor(rng, &[channels, half], (1.0 / half as f64).sqrt()),
            modulator: normal_tensor(rng, &[1, channels], s_in),
        })
    }

    pub fn channels(&self) -> usize {
        self.theta.shape()[1]
    }
}

impl<T: Real> Module<T> for ModulatedAttention<T> {
    type Bound = AttentionVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("theta".into(), &self.theta),
            ("phi".into(), &self.phi),
            ("g".into(), &self.g),
            ("out".into(), &self.out),
            ("modulator".into(), &self.modulator),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.theta,
            &mut self.phi,
            &mut self.g,
            &mut self.out,
            &mut self.modulator,
        ]
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> AttentionVars {
        AttentionVars {
            theta: next(vars),
            phi: next(vars),
            g: next(vars),
            out: next(vars),
            modulator: next(vars),
        }
    }
}

fn check_map<T: Real>(tape: &Tape<T>, f: Var, a: &AttentionVars, op: &'static str) -> Result<()> {
    let s = tape.shape(f);
    let c = tape.shape(a.theta)[1];
    if s.len() != 2 || s[0] != c || s[1] == 0 || !c.is_multiple_of(2) {
        return Err(Error::Shape {
            op,
            shapes: vec![s.to_vec(), tape.shape(a.theta).to_vec()],
        });
    }
    Ok(())
}

impl AttentionVars {
    /// Attention matrix `A` (`[HW, HW]`, rows sum to 1) for `f: [C, HW]`.
    pub fn affinity<T: Real>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        check_map(tape, f, self, "self_attention")?;
        let th = tape.matmul(self.theta, f)?;
        let ph = tape.matmul(self.phi, f)?;
        let tht = tape.transpose(th)?;
        let aff = tape.matmul(tht, ph)?;
        tape.softmax(aff, 1)
    }

    /// `SA(f)` for `f: [C, HW]`; same shape as `f`.
    pub fn self_attention<T: Real>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let a = self.affinity(tape, f)?;
        let g = tape.matmul(self.g, f)?;
        let gt = tape.transpose(g)?;
        let y = tape.matmul(a, gt)?;
        let yt = tape.transpose(y)?;
        tape.matmul(self.out, yt)
    }

    /// `MA(f)`: `[1, HW]`, non-negative, summing to `HW`.
    pub fn modulation<T: Real>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        check_map(tape, f, self, "modulated_attention")?;
        let hw = tape.shape(f)[1];
        let m = tape.matmul(self.modulator, f)?;
        let m = tape.softmax(m, 1)?;
        tape.scalar_mul(m, T::c(hw as f64))
    }

    /// `f + MA(f) * SA(f)` for `f: [C, HW]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let sa = self.self_attention(tape, f)?;
        let ma = self.modulation(tape, f)?;
        let mod_sa = tape.mul(ma, sa)?;
        tape.add(f, mod_sa)
    }
}

/// conv -> relu -> conv -> relu -> modulated attention -> global average pool -> linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
    pub attention: ModulatedAttention<T>,
    pub proj: Linear<T>,
    pub input_shape: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct CnnVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub attention: AttentionVars,
    pub proj: LinearVars,
    pub input_shape: [usize; 3],
}

impl<T: Real> Cnn<T> {
    pub fn init<R: Rng>(rng: &mut R, input_shape: [usize; 3], channels: usize, feature_dim: usize) -> Result<Self> {
        Ok(Cnn {
            conv1: Conv3x3::init(rng, input_shape[0], channels),
            conv2: Conv3x3::init(rng, channels, channels),
            attention: ModulatedAttention::init(rng, channels)?,
            proj: Linear::init(rng, channels, feature_dim),
            input_shape,
        })
    }
}

impl CnnVars {
    /// Last convolutional feature map for one image, `[C, H, W]` flattened to `[C, HW]`.
    pub fn feature_map<T: Real>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let h = tape.conv3x3(image, self.conv1.0, self.conv1.1)?;
        let h = tape.relu(h)?;
        let h = tape.conv3x3(h, self.conv2.0, self.conv2.1)?;
        let h = tape.relu(h)?;
        let s = tape.shape(h).to_vec();
        tape.reshape(h, &[s[1], s[2] * s[3]])
    }

    /// One image `[1, c, h, w]` to a `[1, feature_dim]` row.
    pub fn forward_one<T: Real>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let f = self.feature_map(tape, image)?;
        let c = tape.shape(f)[0];
        let [_, h, w] = self.input_shape;
        let att = self.attention.forward(tape, f)?;
        let att = tape.reshape(att, &[1, c, h, w])?;
        let pooled = tape.global_avg_pool(att)?;
        self.proj.forward(tape, pooled)
    }
}

impl<T: Real> Module<T> for Cnn<T> {
    type Bound = CnnVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![
            ("conv1.weight".to_string(), &self.conv1.weight),
            ("conv1.bias".to_string(), &self.conv1.bias),
            ("conv2.weight".to_string(), &self.conv2.weight),
            ("conv2.bias".to_string(), &self.conv2.bias),
        ];
        v.extend(prefixed("attention", self.attention.named_params()));
        v.extend(prefixed("proj", self.proj.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ];
        v.extend(self.attention.params_mut());
        v.extend(self.proj.params_mut());
        v
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> CnnVars {
        CnnVars {
            conv1: (next(vars), next(vars)),
            conv2: (next(vars), next(vars)),
            attention: self.attention.bind_vars(vars),
            proj: self.proj.bind_vars(vars),
            input_shape: self.input_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Backbone<T> {
    Mlp(Mlp<T>),
    Cnn(Cnn<T>),
}

#[derive(Debug, Clone)]
pub enum BackboneVars {
    Mlp(MlpVars),
    Cnn(CnnVars),
}

impl<T: Real> Backbone<T> {
    pub fn init<R: Rng>(rng: &mut R, cfg: &BackboneConfig, sample_shape: &[usize], feature_dim: usize) -> Result<Self> {
        match cfg {
            BackboneConfig::Mlp { hidden } => {
                let input: usize = sample_shape.iter().product();
                Ok(Backbone::Mlp(Mlp::init(rng, input, *hidden, feature_dim)))
            }
            BackboneConfig::Cnn { channels } => {
                let shape: [usize; 3] = sample_shape.try_into().map_err(|_| {
                    Error::Config(format!("cnn backbone needs [c, h, w] samples, got {sample_shape:?}"))
                })?;
                Ok(Backbone::Cnn(Cnn::init(rng, shape, *channels, feature_dim)?))
            }
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Backbone::Mlp(m) => vec![m.input_dim()],
            Backbone::Cnn(c) => c.input_shape.to_vec(),
        }
    }
}

impl BackboneVars {
    /// Direct features `[n, feature_dim]` for `n` row-major samples in `inputs`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, inputs: &[T], n: usize) -> Result<Var> {
        match self {
            BackboneVars::Mlp(m) => {
                let dim = tape.shape(m.layers[0].weight)[0];
                if n == 0 || inputs.len() != n * dim {
                    return Err(Error::Shape {
                        op: "extract_features_mlp",
                        shapes: vec![vec![inputs.len()], vec![n, dim]],
                    });
                }
                let x = tape.constant(Tensor::new(vec![n, dim], inputs.to_vec())?);
                m.forward(tape, x)
            }
            BackboneVars::Cnn(c) => {
                let [ch, h, w] = c.input_shape;
                let per = ch * h * w;
                if n == 0 || inputs.len() != n * per {
                    return Err(Error::Shape {
                        op: "extract_features_cnn",
                        shapes: vec![vec![inputs.len()], vec![n, ch, h, w]],
                    });
                }
                let rows = inputs
                    .chunks(per)
                    .map(|img| {
                        let x = tape.constant(Tensor::new(vec![1, ch, h, w], img.to_vec())?);
                        c.forward_one(tape, x)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if rows.len() == 1 {
                    Ok(rows[0])
                } else {
                    tape.concat(&rows, 0)
                }
            }
        }
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    type Bound = BackboneVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Backbone::Mlp(m) => prefixed("mlp", m.named_params()),
            Backbone::Cnn(c) => prefixed("cnn", c.named_params()),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Backbone::Mlp(m) => m.params_mut(),
            Backbone::Cnn(c) => c.params_mut(),
        }
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BackboneVars {
        match self {
            Backbone::Mlp(m) => BackboneVars::Mlp(m.bind_vars(vars)),
            Backbone::Cnn(c) => BackboneVars::Cnn(c.bind_vars(vars)),
        }
    }
}
