//! Batched, differentiable Sylvester flows on candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::model::flow::{FlowLayer, FlowStack};

/// Bound `t` on the flow diagonals, `r_ii = t * tanh(raw)`, so that
/// `r_ii * r~_ii >= -t^2 > -1`.
pub const DIAG_BOUND: f64 = 0.999;

/// One amortized flow layer for a batch. Shapes: `q` `(B, D, M)`,
/// `r`/`r_tilde` `(B, M, M)` upper-triangular, `b` `(B, M)`, diagonals `(B, M)`.
#[derive(Debug, Clone)]
pub struct TensorFlowLayer {
    pub q: Tensor,
    pub r: Tensor,
    pub r_tilde: Tensor,
    pub b: Tensor,
    pub r_diag: Tensor,
    pub r_tilde_diag: Tensor,
}

impl TensorFlowLayer {
    /// Builds a layer from raw network outputs laid out as
    /// `[q_raw (D*M) | r_full (M*M) | r~_full (M*M) | r_diag (M) | r~_diag (M) | b (M)]`.
    pub fn from_raw(raw: &Tensor, latent_dim: usize, n_vectors: usize) -> Result<Self> {
        let (batch, width) = raw.dims2()?;
        let (d, m) = (latent_dim, n_vectors);
        debug_assert_eq!(width, Self::raw_width(d, m));
        let mut off = 0;
        let mut take = |n: usize| -> Result<Tensor> {
            let t = raw.narrow(1, off, n)?;
            off += n;
            Ok(t)
        };
        let q_raw = take(d * m)?.reshape((batch, d, m))?;
        let r_full = take(m * m)?.reshape((batch, m, m))?;
        let rt_full = take(m * m)?.reshape((batch, m, m))?;
        let r_diag = (take(m)?.tanh()? * DIAG_BOUND)?;
        let r_tilde_diag = (take(m)?.tanh()? * DIAG_BOUND)?;
        let b = take(m)?;

        let strict = strict_upper_mask(m, raw.dtype(), raw.device())?;
        let eye = Tensor::eye(m, raw.dtype(), raw.device())?;
        let r = (r_full.broadcast_mul(&strict)? + r_diag.unsqueeze(1)?.broadcast_mul(&eye)?)?;
        let r_tilde = (rt_full.broadcast_mul(&strict)? + r_tilde_diag.unsqueeze(1)?.broadcast_mul(&eye)?)?;
        let q = gram_schmidt(&q_raw)?;
        Ok(Self { q, r, r_tilde, b, r_diag, r_tilde_diag })
    }

    pub fn raw_width(latent_dim: usize, n_vectors: usize) -> usize {
        latent_dim * n_vectors + 2 * n_vectors * n_vectors + 3 * n_vectors
    }

    /// Select batch element `i` as an `f64` reference layer.
    pub fn to_reference(&self, i: usize) -> Result<FlowLayer> {
        let (_, d, m) = self.q.dims3()?;
        let host = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let q = nalgebra::DMatrix::from_row_slice(d, m, &host(&self.q)?);
        let r = nalgebra::DMatrix::from_row_slice(m, m, &host(&self.r)?);
        let r_tilde = nalgebra::DMatrix::from_row_slice(m, m, &host(&self.r_tilde)?);
        let b = nalgebra::DVector::from_vec(host(&self.b)?);
        Ok(FlowLayer { q, r, r_tilde, b })
    }

    /// Repeat a batch-1 layer `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor| -> Result<Tensor> {
            let mut dims = t.dims().to_vec();
            dims[0] = n;
            Ok(t.broadcast_as(dims)?.contiguous()?)
        };
        Ok(Self {
            q: rep(&self.q)?,
            r: rep(&self.r)?,
            r_tilde: rep(&self.r_tilde)?,
            b: rep(&self.b)?,
            r_diag: rep(&self.r_diag)?,
            r_tilde_diag: rep(&self.r_tilde_diag)?,
        })
    }

    /// Select one batch row, keeping the batch axis.
    pub fn select(&self, i: usize) -> Result<Self> {
        let sel = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(0, i, 1)?) };
        Ok(Self {
            q: sel(&self.q)?,
            r: sel(&self.r)?,
            r_tilde: sel(&self.r_tilde)?,
            b: sel(&self.b)?,
            r_diag: sel(&self.r_diag)?,
            r_tilde_diag: sel(&self.r_tilde_diag)?,
        })
    }

    /// Build a batch-1 tensor layer from a reference layer.
    pub fn from_reference(layer: &FlowLayer, dtype: DType, device: &Device) -> Result<Self> {
        let (d, m) = layer.q.shape();
        let t = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
        };
        let row_major = |mat: &nalgebra::DMatrix<f64>| -> Vec<f64> { mat.transpose().as_slice().to_vec() };
        let diag = |mat: &nalgebra::DMatrix<f64>| -> Vec<f64> { mat.diagonal().as_slice().to_vec() };
        Ok(Self {
            q: t(row_major(&layer.q), &[1, d, m])?,
            r: t(row_major(&layer.r), &[1, m, m])?,
            r_tilde: t(row_major(&layer.r_tilde), &[1, m, m])?,
            b: t(layer.b.as_slice().to_vec(), &[1, m])?,
            r_diag: t(diag(&layer.r), &[1, m])?,
            r_tilde_diag: t(diag(&layer.r_tilde), &[1, m])?,
        })
    }

    /// One forward step: returns `(z', log|det J|)` with shapes `(B, D)` and `(B,)`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let qtz = z.unsqueeze(1)?.matmul(&self.q)?;
        let v = qtz
            .matmul(&self.r_tilde.transpose(1, 2)?.contiguous()?)?
            .broadcast_add(&self.b.unsqueeze(1)?)?;
        let h = v.tanh()?;
        let dz = h
            .matmul(&self.r.transpose(1, 2)?.contiguous()?)?
            .matmul(&self.q.transpose(1, 2)?.contiguous()?)?
            .squeeze(1)?;
        let z_next = (z + dz)?;
        let dh = (1.0 - h.squeeze(1)?.sqr()?)?;
        let diag = (&self.r_diag * &self.r_tilde_diag)?;
        let log_det = ((diag * dh)? + 1.0)?.abs()?.log()?.sum(D::Minus1)?;
        Ok((z_next, log_det))
    }
}

/// Run the whole stack. Returns `z^K` and the summed log-det, shape `(B,)`.
pub fn flow_forward_batch(z0: &Tensor, layers: &[TensorFlowLayer]) -> Result<(Tensor, Tensor)> {
    let batch = z0.dim(0)?;
    let mut z = z0.clone();
    let mut log_det = Tensor::zeros(batch, z0.dtype(), z0.device())?;
    for layer in layers {
        let (next, ld) = layer.forward(&z)?;
        z = next;
        log_det = (log_det + ld)?;
    }
    Ok((z, log_det))
}

/// Differentiable two-pass classical Gram-Schmidt over the last axis of `(B, D, M)`.
pub fn gram_schmidt(q_raw: &Tensor) -> Result<Tensor> {
    let (_, _, m) = q_raw.dims3()?;
    let mut cols: Vec<Tensor> = Vec::with_capacity(m);
    for k in 0..m {
        let mut v = q_raw.narrow(2, k, 1)?;
        if k > 0 {
            let basis = Tensor::cat(&cols, 2)?;
            let basis_t = basis.transpose(1, 2)?.contiguous()?;
            for _ in 0..2 {
                let coeff = basis_t.matmul(&v)?;
                v = (v - basis.matmul(&coeff)?)?;
            }
        }
        let norm = v.sqr()?.sum_keepdim(1)?.sqrt()?;
        cols.push(v.broadcast_div(&norm)?);
    }
    Ok(Tensor::cat(&cols, 2)?)
}

fn strict_upper_mask(m: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..m * m).map(|idx| if idx % m > idx / m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (m, m), device)?.to_dtype(dtype)?)
}

/// Stack of reference layers for batch element `i`.
pub fn to_reference_stack(layers: &[TensorFlowLayer], i: usize) -> Result<FlowStack> {
    Ok(FlowStack::new(layers.iter().map(|l| l.to_reference(i)).collect::<Result<_>>()?))
}
