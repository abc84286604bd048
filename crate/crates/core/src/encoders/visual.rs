use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, MapShape, Var};
use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Four conv3x3-ReLU-maxpool blocks followed by global average pooling.
    #[serde(rename = "reference-conv4-small")]
    Conv4Small,
    /// One hidden ReLU layer and a linear output layer.
    #[serde(rename = "mlp-tiny")]
    MlpTiny,
}

impl Architecture {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "reference-conv4-small" => Ok(Self::Conv4Small),
            "mlp-tiny" => Ok(Self::MlpTiny),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::Conv4Small => "reference-conv4-small",
            Self::MlpTiny => "mlp-tiny",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: String,
    pub output_dim: usize,
    /// Hidden units (MLP) or channels of the first three conv blocks.
    pub hidden_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::MlpTiny.id().into(),
            output_dim: 64,
            hidden_width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Weights of a visual encoder plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderParams {
    pub architecture: Architecture,
    pub input_shape: ImageShape,
    pub output_dim: usize,
    pub tensors: Vec<NamedTensor>,
}

const CONV_BLOCKS: usize = 4;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Fan-in scaled Gaussian init: std `sqrt(2 / fan_in)` ahead of a ReLU,
/// `sqrt(1 / fan_in)` for the linear output layer. Biases start at zero.
pub fn init_visual_encoder(
    config: &EncoderConfig,
    input_shape: ImageShape,
    seed: u64,
) -> Result<VisualEncoderParams> {
    let architecture = Architecture::from_id(&config.architecture)?;
    if config.output_dim == 0 || config.hidden_width == 0 {
        return Err(Error::InvalidConfig(
            "encoder output_dim and hidden_width must be positive".into(),
        ));
    }
    if input_shape.is_empty() {
        return Err(Error::InvalidConfig(format!("empty input shape {input_shape}")));
    }
    let mut tensors = Vec::new();
    let mut layer = |name: &str, rows: usize, cols: usize, std: f64, idx: u64| {
        let mut rng = rng_for(seed, Stream::EncoderInit, idx);
        tensors.push(NamedTensor {
            name: format!("{name}.weight"),
            value: gaussian(rows, cols, std, &mut rng),
        });
        tensors.push(NamedTensor {
            name: format!("{name}.bias"),
            value: Matrix::zeros(1, rows),
        });
    };
    match architecture {
        Architecture::MlpTiny => {
            let fan_in = input_shape.len();
            let h = config.hidden_width;
            layer("fc1", h, fan_in, (2.0 / fan_in as f64).sqrt(), 0);
            layer("fc2", config.output_dim, h, (1.0 / h as f64).sqrt(), 1);
        }
        Architecture::Conv4Small => {
            let min_side = 1 << CONV_BLOCKS;
            if input_shape.height < min_side || input_shape.width < min_side {
                return Err(Error::InvalidConfig(format!(
                    "{architecture} needs inputs of at least {min_side}x{min_side}, got {input_shape}"
                )));
            }
            let mut cin = input_shape.channels;
            for b in 0..CONV_BLOCKS {
                let cout = if b + 1 == CONV_BLOCKS {
                    config.output_dim
                } else {
                    config.hidden_width
                };
                let fan_in = 9 * cin;
                layer(
                    &format!("conv{}", b + 1),
                    cout,
                    fan_in,
                    (2.0 / fan_in as f64).sqrt(),
                    b as u64,
                );
                cin = cout;
            }
        }
    }
    Ok(VisualEncoderParams {
        architecture,
        input_shape,
        output_dim: config.output_dim,
        tensors,
    })
}

impl VisualEncoderParams {
    /// Adds every tensor to `g` (as trainable leaves when `trainable`).
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.value.clone())
                } else {
                    g.constant(t.value.clone())
                }
            })
            .collect()
    }

    /// Forward pass for a `B × input_len` image node using registered `vars`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        let cols = g.value(images).cols();
        if cols != self.input_shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "images have {cols} values, encoder expects {} ({})",
                self.input_shape.len(),
                self.input_shape
            )));
        }
        let out = match self.architecture {
            Architecture::MlpTiny => {
                let h = g.matmul_bt(images, vars[0]);
                let h = g.add_row(h, vars[1]);
                let h = g.relu(h);
                let o = g.matmul_bt(h, vars[2]);
                g.add_row(o, vars[3])
            }
            Architecture::Conv4Small => {
                let mut shape = MapShape {
                    height: self.input_shape.height,
                    width: self.input_shape.width,
                    channels: self.input_shape.channels,
                };
                let mut x = images;
                for b in 0..CONV_BLOCKS {
                    let w = vars[2 * b];
                    let y = g.conv3x3(x, w, vars[2 * b + 1], shape);
                    shape.channels = g.value(w).rows();
                    let y = g.relu(y);
                    let (p, s) = g.max_pool2(y, shape);
                    x = p;
                    shape = s;
                }
                g.global_avg_pool(x, shape)
            }
        };
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("visual encoder activations".into()));
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data().len()).sum()
    }

    /// SHA-256 over architecture, shapes and the exact bits of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.architecture.id().as_bytes());
        h.update(self.output_dim.to_le_bytes());
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update((t.value.rows() as u64).to_le_bytes());
            h.update((t.value.cols() as u64).to_le_bytes());
            for v in t.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Anything that maps a batch of images to embedding rows.
pub trait Embedder {
    fn output_dim(&self) -> usize;
    fn embed(&self, images: &Matrix) -> Result<Matrix>;
}

impl Embedder for VisualEncoderParams {
    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn embed(&self, images: &Matrix) -> Result<Matrix> {
        visual_encode(self, images)
    }
}

/// Embeds a batch of images (one flattened HWC image per row).
pub fn visual_encode(params: &VisualEncoderParams, images: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let x = g.constant(images.clone());
    let out = params.forward(&mut g, &vars, x)?;
    Ok(g.value(out).clone())
}
