//! Observation encoder and decoder for 11×11 binary crops.
//!
//! Both are two-layer perceptrons with a ReLU hidden layer and a linear
//! output. The encoder maps flattened crops (optionally joined with their
//! position embedding) to `E`-vectors; the decoder maps a representation to
//! 121 logits.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::init::fan_in_uniform;
use crate::tensorcore::{BoundParams, ParamStore, Tensor, Var};

/// Side length of an observation crop.
pub const CROP: usize = 11;
/// Pixels per crop.
pub const CROP_PIXELS: usize = CROP * CROP;

/// Two-layer perceptron `x -> relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy)]
pub struct MlpVars<'g> {
    pub w1: Var<'g>,
    pub b1: Var<'g>,
    pub w2: Var<'g>,
    pub b2: Var<'g>,
}

/// Registers `{prefix}.w1/.b1/.w2/.b2` for an `input -> hidden -> output`
/// perceptron.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(format!("{prefix}.w1"), fan_in_uniform(&[input, hidden], input, rng))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.w2"), fan_in_uniform(&[hidden, output], hidden, rng))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[output]))?;
    Ok(())
}

pub fn bind_mlp<'g>(p: &BoundParams<'g>, prefix: &str) -> Result<MlpVars<'g>> {
    Ok(MlpVars {
        w1: p.get(&format!("{prefix}.w1"))?,
        b1: p.get(&format!("{prefix}.b1"))?,
        w2: p.get(&format!("{prefix}.w2"))?,
        b2: p.get(&format!("{prefix}.b2"))?,
    })
}

impl<'g> MlpVars<'g> {
    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Applies the perceptron row-wise to `x: (rows, input)`.
    pub fn forward(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.input_width() {
            return dim_err(format!("perceptron expects (rows, {}), got {xs:?}", self.input_width()));
        }
        x.affine(&self.w1, &self.b1)?.relu().affine(&self.w2, &self.b2)
    }
}

/// Encodes crops `(A, 121)` to `(A, E)`.
pub fn encode<'g>(crops: &Var<'g>, encoder: &MlpVars<'g>) -> Result<Var<'g>> {
    let cs = crops.shape();
    if cs.len() != 2 || cs[1] != CROP_PIXELS {
        return dim_err(format!("crops must be (A, {CROP_PIXELS}), got {cs:?}"));
    }
    encoder.forward(crops)
}

/// Encodes crops `(A, 121)` jointly with their position embeddings `(A, d)`
/// by input concatenation.
pub fn encode_with_position<'g>(
    crops: &Var<'g>,
    positions: &Var<'g>,
    encoder: &MlpVars<'g>,
) -> Result<Var<'g>> {
    let (cs, ps) = (crops.shape(), positions.shape());
    if cs.len() != 2 || cs[1] != CROP_PIXELS || ps.len() != 2 || ps[0] != cs[0] {
        return dim_err(format!("crops {cs:?} and positions {ps:?} do not pair up"));
    }
    encoder.forward(&Var::concat(&[*crops, *positions], 1)?)
}

/// Decodes representations `(Q, width)` to crop logits `(Q, 121)`.
pub fn decode<'g>(z: &Var<'g>, decoder: &MlpVars<'g>) -> Result<Var<'g>> {
    if decoder.output_width() != CROP_PIXELS {
        return dim_err(format!("decoder emits {} values, not {CROP_PIXELS}", decoder.output_width()));
    }
    decoder.forward(z)
}
