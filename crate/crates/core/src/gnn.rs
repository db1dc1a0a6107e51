//! Shared observation encoder followed by graph convolutions over a fixed
//! coordination prior, with exact reverse-mode gradients.
//!
//! Each layer computes `H' = relu((A · H) · Wᵀ)`. The prior `A` is an input
//! constant: no gradient is ever produced for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul_nt, matmul_tn, matmul, relu_backward_matrix, relu_matrix, Linear, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub encoder1: Linear,
    pub encoder2: Linear,
    /// One `d x d` weight per graph-convolution layer; no biases.
    pub conv: Vec<Matrix>,
}

impl GnnParams {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, cfg: GnnConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers < 1 {
            return Err(Error::Invalid("a graph network needs at least one layer".into()));
        }
        if cfg.hidden < 1 || obs_dim < 1 {
            return Err(Error::Invalid("hidden width and observation size must be positive".into()));
        }
        let d = cfg.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            encoder1: Linear::init(obs_dim, d, rng),
            encoder2: Linear::init(d, d, rng),
            conv: (0..cfg.layers).map(|_| Matrix::uniform(d, d, bound, rng)).collect(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder1.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.encoder2.out_dim()
    }

    pub fn layers(&self) -> usize {
        self.conv.len()
    }
}

impl Parameters for GnnParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.encoder1.tensors();
        v.extend(self.encoder2.tensors());
        v.extend(self.conv.iter());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.encoder1.tensors_mut();
        v.extend(self.encoder2.tensors_mut());
        v.extend(self.conv.iter_mut());
        v
    }
}

/// Encoder activations for a stack of observations.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub input: Matrix,
    pub pre1: Matrix,
    pub act1: Matrix,
    pub pre2: Matrix,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct GnnForwardTrace {
    pub encoder: EncoderTrace,
    /// The priors used, one per graph, each `n x n`.
    pub adjacency: Vec<Matrix>,
    /// Layer inputs `H^(l-1)`, aggregated `A·H^(l-1)`, and pre-activations, per layer.
    pub layer_inputs: Vec<Matrix>,
    pub aggregated: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    pub output_shape: (usize, usize),
}

/// `h^(0) = relu(W2 · relu(W1 · o + b1) + b2)` for every row of `obs`.
pub fn encode(obs: &Matrix, params: &GnnParams) -> Result<(Matrix, EncoderTrace)> {
    if obs.cols() != params.obs_dim() {
        return Err(Error::Dimension(format!(
            "encoder expects observations of length {}, got {}",
            params.obs_dim(),
            obs.cols()
        )));
    }
    let pre1 = params.encoder1.forward(obs)?;
    let act1 = relu_matrix(&pre1);
    let pre2 = params.encoder2.forward(&act1)?;
    let h0 = relu_matrix(&pre2);
    Ok((
        h0,
        EncoderTrace {
            input: obs.clone(),
            pre1,
            act1,
            pre2,
        },
    ))
}

/// Row-block aggregation: rows `[b*n, (b+1)*n)` of `h` are mixed by `adj[b]`
/// (or its transpose).
fn aggregate(adj: &[Matrix], h: &Matrix, transpose: bool) -> Result<Matrix> {
    let n = adj.first().map_or(0, Matrix::rows);
    if n == 0 || h.rows() != adj.len() * n {
        return Err(Error::Dimension(format!(
            "{} graphs of {n} nodes cannot aggregate {} rows",
            adj.len(),
            h.rows()
        )));
    }
    let d = h.cols();
    let mut out = Matrix::zeros(h.rows(), d);
    for (b, a) in adj.iter().enumerate() {
        if a.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "prior {b} is {}x{}, expected {n}x{n}",
                a.rows(),
                a.cols()
            )));
        }
        for i in 0..n {
            let out_row = b * n + i;
            for j in 0..n {
                let w = if transpose { a.get(j, i) } else { a.get(i, j) };
                if w == 0.0 {
                    continue;
                }
                let src = h.row(b * n + j).to_vec();
                for (o, x) in out.row_mut(out_row).iter_mut().zip(&src) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(out)
}

/// One graph-convolution layer on a single graph: `relu((A · H) · Wᵀ)`.
pub fn propagate(h: &Matrix, adjacency: &Matrix, weight: &Matrix) -> Result<Matrix> {
    if adjacency.shape() != (h.rows(), h.rows()) {
        return Err(Error::Dimension(format!(
            "prior is {}x{} but there are {} node embeddings",
            adjacency.rows(),
            adjacency.cols(),
            h.rows()
        )));
    }
    let m = matmul(adjacency, h)?;
    Ok(relu_matrix(&matmul_nt(&m, weight)?))
}

/// Forward pass over a batch of graphs that share the same node count.
///
/// `obs` stacks `adjacency.len() * n` observation rows, graph-major.
pub fn gnn_forward_batch(
    obs: &Matrix,
    adjacency: &[Matrix],
    params: &GnnParams,
) -> Result<(Matrix, GnnForwardTrace)> {
    let (mut h, enc) = encode(obs, params)?;
    let mut layer_inputs = Vec::with_capacity(params.layers());
    let mut aggregated = Vec::with_capacity(params.layers());
    let mut pre = Vec::with_capacity(params.layers());
    for w in &params.conv {
        let m = aggregate(adjacency, &h, false)?;
        let z = matmul_nt(&m, w)?;
        let next = relu_matrix(&z);
        layer_inputs.push(std::mem::replace(&mut h, next));
        aggregated.push(m);
        pre.push(z);
    }
    let output_shape = h.shape();
    Ok((
        h,
        GnnForwardTrace {
            encoder: enc,
            adjacency: adjacency.to_vec(),
            layer_inputs,
            aggregated,
            pre,
            output_shape,
        },
    ))
}

/// Forward pass for one graph: `n` observations and their `n x n` prior.
pub fn gnn_forward(obs: &Matrix, adjacency: &Matrix, params: &GnnParams) -> Result<(Matrix, GnnForwardTrace)> {
    gnn_forward_batch(obs, std::slice::from_ref(adjacency), params)
}

pub struct GnnGrads {
    pub params: GnnParams,
    pub obs: Matrix,
}

/// Reverse-mode gradients of a scalar loss given `upstream = dLoss/dH^(L)`.
pub fn gnn_backward(trace: &GnnForwardTrace, params: &GnnParams, upstream: &Matrix) -> Result<GnnGrads> {
    if upstream.shape() != trace.output_shape || trace.pre.len() != params.layers() {
        return Err(Error::Dimension(format!(
            "upstream gradient {}x{} does not match the traced forward pass {}x{} ({} layers)",
            upstream.rows(),
            upstream.cols(),
            trace.output_shape.0,
            trace.output_shape.1,
            trace.pre.len()
        )));
    }
    let mut grad_conv = vec![Matrix::zeros(0, 0); params.layers()];
    let mut dh = upstream.clone();
    for l in (0..params.layers()).rev() {
        relu_backward_matrix(&trace.pre[l], &mut dh);
        grad_conv[l] = matmul_tn(&dh, &trace.aggregated[l])?;
        let dm = matmul(&dh, &params.conv[l])?;
        dh = aggregate(&trace.adjacency, &dm, true)?;
    }
    let enc = &trace.encoder;
    relu_backward_matrix(&enc.pre2, &mut dh);
    let g2 = params.encoder2.backward(&enc.act1, &dh)?;
    let mut da1 = g2.input;
    relu_backward_matrix(&enc.pre1, &mut da1);
    let g1 = params.encoder1.backward(&enc.input, &da1)?;
    Ok(GnnGrads {
        params: GnnParams {
            encoder1: Linear {
                weight: g1.weight,
                bias: g1.bias,
            },
            encoder2: Linear {
                weight: g2.weight,
                bias: g2.bias,
            },
            conv: grad_conv,
        },
        obs: g1.input,
    })
}
