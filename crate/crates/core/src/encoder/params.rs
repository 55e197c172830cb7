use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// A dense affine map `y = x W + b` with `W` stored row-major as
/// `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        LayerRepr {
            weight: l.weight.chunks(l.outputs).map(<[f64]>::to_vec).collect(),
            bias: l.bias,
        }
    }
}

impl TryFrom<LayerRepr> for Layer {
    type Error = String;

    fn try_from(r: LayerRepr) -> Result<Self, String> {
        let outputs = r.bias.len();
        let inputs = r.weight.len();
        if outputs == 0 || inputs == 0 {
            return Err("layer with zero inputs or outputs".into());
        }
        if r.weight.iter().any(|row| row.len() != outputs) {
            return Err(format!("weight rows must all have {outputs} entries"));
        }
        Ok(Layer {
            inputs,
            outputs,
            weight: r.weight.concat(),
            bias: r.bias,
        })
    }
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Layer {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    #[inline]
    pub(crate) fn row(&self, input: usize) -> &[f64] {
        &self.weight[input * self.outputs..(input + 1) * self.outputs]
    }
}

/// All trainable encoder weights. One instance is shared by both branches
/// of the Siamese pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// EdgeConv layers; layer `l` maps `2 * d_in` edge features to `d_out`.
    pub edgeconv: Vec<Layer>,
    pub fc: Vec<Layer>,
}

fn shapes(cfg: &EncoderConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut edge = Vec::new();
    let mut d_in = 3;
    for &w in &cfg.edgeconv_widths {
        edge.push((2 * d_in, w));
        d_in = w;
    }
    let mut fc = Vec::new();
    let mut d_in: usize = cfg.edgeconv_widths.iter().sum();
    for &w in &cfg.fc_widths {
        fc.push((d_in, w));
        d_in = w;
    }
    (edge, fc)
}

impl EncoderParams {
    /// Seeded Glorot initialization from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (edge, fc) = shapes(cfg);
        Ok(EncoderParams {
            edgeconv: edge.iter().map(|&(i, o)| Layer::glorot(i, o, &mut rng)).collect(),
            fc: fc.iter().map(|&(i, o)| Layer::glorot(i, o, &mut rng)).collect(),
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (edge, fc) = shapes(cfg);
        EncoderParams {
            edgeconv: edge.iter().map(|&(i, o)| Layer::zeros(i, o)).collect(),
            fc: fc.iter().map(|&(i, o)| Layer::zeros(i, o)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.inputs, l.outputs);
        EncoderParams {
            edgeconv: self.edgeconv.iter().map(z).collect(),
            fc: self.fc.iter().map(z).collect(),
        }
    }

    /// Checks layer shapes against `cfg` and that every weight is finite.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let (edge, fc) = shapes(cfg);
        let got = |ls: &[Layer]| ls.iter().map(|l| (l.inputs, l.outputs)).collect::<Vec<_>>();
        if got(&self.edgeconv) != edge || got(&self.fc) != fc {
            return Err(Error::Shape(format!(
                "parameters {:?}/{:?} do not match config {:?}/{:?}",
                got(&self.edgeconv),
                got(&self.fc),
                edge,
                fc
            )));
        }
        if self.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Adds `other` into `self`, block by block.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            for x in block {
                *x *= factor;
            }
        }
    }

    /// Human-readable name of each block, aligned with [`ParamBlocks::blocks`].
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.edgeconv.len() {
            names.push(format!("edgeconv{l}.weight"));
            names.push(format!("edgeconv{l}.bias"));
        }
        for l in 0..self.fc.len() {
            names.push(format!("fc{l}.weight"));
            names.push(format!("fc{l}.bias"));
        }
        names
    }
}

/// Anything Adam can update: a fixed sequence of flat `f64` blocks.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
}

impl ParamBlocks for EncoderParams {
    fn blocks(&self) -> Vec<&[f64]> {
        self.edgeconv
            .iter()
            .chain(&self.fc)
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.edgeconv
            .iter_mut()
            .chain(self.fc.iter_mut())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl ParamBlocks for Vec<Vec<f64>> {
    fn blocks(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}
