//! Convolutional encoder mapping a radiograph to a unit-norm embedding.

mod checkpoint;
mod network;
mod real;
mod spec;

pub use checkpoint::{decode, encode, load_model, read_model, save_model, write_model, MAGIC, VERSION};
pub use network::{l2_normalize, l2_normalize_backward, Network, Trace, NORM_EPS};
pub use real::Real;
pub use spec::{LayerSpec, NetworkSpec, Shape, EMBEDDING_DIMS};

use serde::{Deserialize, Serialize};

use crate::drr::RadiographImage;
use crate::error::{Error, Result};

/// Tolerance on `| ‖e‖ − 1 |` for stored embeddings.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// The trainable encoder: 32-bit parameters and activations.
pub type EncoderModel = Network<f32>;

/// Builds a model with He-initialized weights.
pub fn init_model(spec: NetworkSpec, seed: u64) -> Result<EncoderModel> {
    Network::init(spec, seed)
}

/// Unit-norm embedding of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Accepts `values` if they are finite and already unit length.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding values".into()));
        }
        let e = Embedding(values);
        let norm = e.norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Normalization(norm));
        }
        Ok(e)
    }

    /// Scales `values` to unit length.
    pub fn normalized(values: &[f32]) -> Result<Self> {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let unit = l2_normalize(&v)?;
        Self::new(unit.into_iter().map(|x| x as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Checks that `image` matches the model input and returns its pixels.
pub fn image_input<'a>(model: &EncoderModel, image: &'a RadiographImage) -> Result<&'a [f32]> {
    let [c, h, w] = model.input_shape();
    if c != 1 || h != image.height || w != image.width {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {}x{} with {} channel(s)",
            image.width, image.height, w, h, c
        )));
    }
    Ok(&image.pixels)
}

/// Embeds one image. Pure in `(model, image)`.
pub fn forward(model: &EncoderModel, image: &RadiographImage) -> Result<Embedding> {
    let out = model.forward(image_input(model, image)?)?;
    Embedding::new(out)
}
