//! Gated convolutional encoder and decoder towers.

use candle_core::{DType, Device, Module, ModuleT, Tensor};
use candle_nn::{
    batch_norm, conv2d, conv_transpose2d, linear, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig,
    ConvTranspose2d, ConvTranspose2dConfig, Linear, VarBuilder,
};

use crate::error::Result;
use crate::model::tensor_flow::TensorFlowLayer;
use crate::model::{ModelConfig, PosteriorParams};

fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// Stride-2 convolution with a sigmoid gate.
#[derive(Debug, Clone)]
struct GatedConv {
    conv: Conv2d,
    out: usize,
}

impl GatedConv {
    fn new(vb: VarBuilder, input: usize, out: usize) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self { conv: conv2d(input, 2 * out, 3, cfg, vb.pp("conv"))?, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let a = y.narrow(1, 0, self.out)?;
        let g = y.narrow(1, self.out, self.out)?;
        Ok((a * sigmoid(&g)?)?)
    }
}

/// Stride-2 transpose convolution with a sigmoid gate, then batch norm and GELU.
#[derive(Debug, Clone)]
struct GatedUpBlock {
    conv: ConvTranspose2d,
    norm: BatchNorm,
    out: usize,
}

impl GatedUpBlock {
    fn new(vb: VarBuilder, input: usize, out: usize) -> Result<Self> {
        let cfg = ConvTranspose2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self {
            conv: conv_transpose2d(input, 2 * out, 4, cfg, vb.pp("conv"))?,
            norm: batch_norm(out, BatchNormConfig::default(), vb.pp("bn"))?,
            out,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let a = y.narrow(1, 0, self.out)?;
        let g = y.narrow(1, self.out, self.out)?;
        let gated = (a * sigmoid(&g)?)?;
        Ok(self.norm.forward_t(&gated, train)?.gelu_erf()?)
    }
}

/// Batched encoder output before any sampling.
#[derive(Debug, Clone)]
pub struct PosteriorTensors {
    /// `(B, D)`
    pub mu: Tensor,
    /// `(B, D)`, strictly positive.
    pub sigma: Tensor,
    pub flows: Vec<TensorFlowLayer>,
}

impl PosteriorTensors {
    /// Batch-1 tensors from host parameters.
    pub fn from_params(p: &PosteriorParams, dtype: DType, device: &Device) -> Result<Self> {
        let d = p.mu.len();
        let row = |v: &nalgebra::DVector<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v.as_slice().to_vec(), (1, d), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            mu: row(&p.mu)?,
            sigma: row(&p.sigma)?,
            flows: p
                .flow
                .layers
                .iter()
                .map(|l| TensorFlowLayer::from_reference(l, dtype, device))
                .collect::<Result<_>>()?,
        })
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.mu.dim(0)?)
    }

    /// Keep only row `i`.
    pub fn select(&self, i: usize) -> Result<Self> {
        Ok(Self {
            mu: self.mu.narrow(0, i, 1)?,
            sigma: self.sigma.narrow(0, i, 1)?,
            flows: self.flows.iter().map(|f| f.select(i)).collect::<Result<_>>()?,
        })
    }

    /// Broadcast a batch-1 posterior to `n` rows.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let d = self.mu.dim(1)?;
        Ok(Self {
            mu: self.mu.broadcast_as((n, d))?.contiguous()?,
            sigma: self.sigma.broadcast_as((n, d))?.contiguous()?,
            flows: self.flows.iter().map(|f| f.repeat(n)).collect::<Result<_>>()?,
        })
    }

    /// Repeat each row `n` times consecutively, `(B, ..) -> (B * n, ..)`.
    pub fn repeat_interleave(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor| -> Result<Tensor> {
            let dims = t.dims().to_vec();
            let mut expanded = vec![dims[0], n];
            expanded.extend_from_slice(&dims[1..]);
            let mut flat = vec![dims[0] * n];
            flat.extend_from_slice(&dims[1..]);
            Ok(t.unsqueeze(1)?.broadcast_as(expanded)?.contiguous()?.reshape(flat)?)
        };
        Ok(Self {
            mu: rep(&self.mu)?,
            sigma: rep(&self.sigma)?,
            flows: self
                .flows
                .iter()
                .map(|f| {
                    Ok(TensorFlowLayer {
                        q: rep(&f.q)?,
                        r: rep(&f.r)?,
                        r_tilde: rep(&f.r_tilde)?,
                        b: rep(&f.b)?,
                        r_diag: rep(&f.r_diag)?,
                        r_tilde_diag: rep(&f.r_tilde_diag)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<GatedConv>,
    mu: Linear,
    sigma: Linear,
    flow: Linear,
    cfg: ModelConfig,
}

impl Encoder {
    pub fn new(vb: VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.enc_layers);
        let (mut h, mut w, mut c) = (cfg.n_r, cfg.n_gamma, 2usize);
        for i in 0..cfg.enc_layers {
            layers.push(GatedConv::new(vb.pp(format!("layers.{i}")), c, cfg.enc_channels)?);
            c = cfg.enc_channels;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let features = c * h * w;
        let flow_width = cfg.flow_layers * TensorFlowLayer::raw_width(cfg.latent_dim, cfg.flow_vectors);
        Ok(Self {
            layers,
            mu: linear(features, cfg.latent_dim, vb.pp("mu"))?,
            sigma: linear(features, cfg.latent_dim, vb.pp("sigma"))?,
            flow: linear(features, flow_width.max(1), vb.pp("flow"))?,
            cfg: cfg.clone(),
        })
    }

    /// `x`: `(B, 2, n_r, n_gamma)` with channel 0 the zero-filled observation and channel 1 the mask image.
    pub fn forward(&self, x: &Tensor) -> Result<PosteriorTensors> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        let h = h.flatten_from(1)?;
        let mu = self.mu.forward(&h)?;
        let sigma = (softplus(&self.sigma.forward(&h)?)? + 1e-5)?;
        let width = TensorFlowLayer::raw_width(self.cfg.latent_dim, self.cfg.flow_vectors);
        let raw = self.flow.forward(&h)?;
        let flows = (0..self.cfg.flow_layers)
            .map(|k| {
                TensorFlowLayer::from_raw(&raw.narrow(1, k * width, width)?, self.cfg.latent_dim, self.cfg.flow_vectors)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorTensors { mu, sigma, flows })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    fc: Linear,
    blocks: Vec<GatedUpBlock>,
    head: [Conv2d; 3],
    start: (usize, usize),
    cfg: ModelConfig,
}

impl Decoder {
    pub fn new(vb: VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let scale = 1usize << cfg.dec_blocks;
        let start = (cfg.n_r.div_ceil(scale), cfg.n_gamma.div_ceil(scale));
        let c = cfg.dec_channels;
        let blocks = (0..cfg.dec_blocks)
            .map(|i| GatedUpBlock::new(vb.pp(format!("blocks.{i}")), c, c))
            .collect::<Result<Vec<_>>>()?;
        let same = Conv2dConfig { padding: 1, ..Default::default() };
        let head = [
            conv2d(c, c, 3, same, vb.pp("head.0"))?,
            conv2d(c, c, 3, same, vb.pp("head.1"))?,
            conv2d(c, 1, 3, same, vb.pp("head.2"))?,
        ];
        Ok(Self {
            fc: linear(cfg.latent_dim, c * start.0 * start.1, vb.pp("fc"))?,
            blocks,
            head,
            start,
            cfg: cfg.clone(),
        })
    }

    /// Mean image in `[0, 1]`, shape `(B, n_r, n_gamma)`.
    pub fn forward(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let batch = z.dim(0)?;
        let mut h = self
            .fc
            .forward(z)?
            .gelu_erf()?
            .reshape((batch, self.cfg.dec_channels, self.start.0, self.start.1))?;
        for block in &self.blocks {
            h = block.forward(&h, train)?;
        }
        h = self.head[0].forward(&h)?.gelu_erf()?;
        h = self.head[1].forward(&h)?.gelu_erf()?;
        h = self.head[2].forward(&h)?;
        let h = h.narrow(2, 0, self.cfg.n_r)?.narrow(3, 0, self.cfg.n_gamma)?.squeeze(1)?;
        Ok(sigmoid(&h)?)
    }
}
