use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkit::special::{swish, swish_grad};
use crate::numkit::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// One bias-free linear map per output head.
    Linear,
    /// One swish hidden layer (with bias) followed by affine output heads.
    Mlp1,
}

/// Amortized encoder producing one `B × K` output per parameter head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    /// `(weight H×M, bias 1×H)` for `Mlp1`.
    hidden: Option<(Matrix, Matrix)>,
    /// `(weight K×in, bias 1×K)`; the bias is absent for `Linear`.
    heads: Vec<(Matrix, Option<Matrix>)>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct EncoderPass {
    pre_hidden: Option<Matrix>,
    hidden: Option<Matrix>,
    pub heads: Vec<Matrix>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-bound, bound))
}

impl Encoder {
    pub fn new(
        kind: EncoderKind,
        input_dim: usize,
        latent_dim: usize,
        hidden_dim: usize,
        n_heads: usize,
        rng: &mut RngStream,
    ) -> Self {
        match kind {
            EncoderKind::Linear => Self {
                kind,
                hidden: None,
                heads: (0..n_heads)
                    .map(|_| (uniform_init(latent_dim, input_dim, input_dim, rng), None))
                    .collect(),
            },
            EncoderKind::Mlp1 => {
                let w1 = uniform_init(hidden_dim, input_dim, input_dim, rng);
                let b1 = uniform_init(1, hidden_dim, input_dim, rng);
                let heads = (0..n_heads)
                    .map(|_| {
                        (
                            uniform_init(latent_dim, hidden_dim, hidden_dim, rng),
                            Some(uniform_init(1, latent_dim, hidden_dim, rng)),
                        )
                    })
                    .collect();
                Self {
                    kind,
                    hidden: Some((w1, b1)),
                    heads,
                }
            }
        }
    }

    /// Rebuilds an encoder from tensors in [`Encoder::tensors`] order.
    pub fn from_tensors(kind: EncoderKind, n_heads: usize, mut tensors: Vec<Matrix>) -> Self {
        let mut it = tensors.drain(..);
        let hidden = match kind {
            EncoderKind::Linear => None,
            EncoderKind::Mlp1 => Some((it.next().unwrap(), it.next().unwrap())),
        };
        let heads = (0..n_heads)
            .map(|_| {
                let w = it.next().unwrap();
                let b = match kind {
                    EncoderKind::Linear => None,
                    EncoderKind::Mlp1 => Some(it.next().unwrap()),
                };
                (w, b)
            })
            .collect();
        Self {
            kind,
            hidden,
            heads,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Number of parameter tensors the encoder owns.
    pub fn n_tensors(&self) -> usize {
        match self.kind {
            EncoderKind::Linear => self.heads.len(),
            EncoderKind::Mlp1 => 2 + 2 * self.heads.len(),
        }
    }

    /// Weight matrix of the given head.
    pub fn head_weight(&self, head: usize) -> &Matrix {
        &self.heads[head].0
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.hidden {
            out.push(("enc.hidden.weight".to_string(), w));
            out.push(("enc.hidden.bias".to_string(), b));
        }
        for (h, (w, b)) in self.heads.iter().enumerate() {
            out.push((format!("enc.head{h}.weight"), w));
            if let Some(b) = b {
                out.push((format!("enc.head{h}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.hidden {
            out.push(w);
            out.push(b);
        }
        for (w, b) in &mut self.heads {
            out.push(w);
            if let Some(b) = b {
                out.push(b);
            }
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<EncoderPass> {
        let (pre_hidden, hidden) = match &self.hidden {
            None => (None, None),
            Some((w1, b1)) => {
                let mut pre = x.matmul_nt(w1)?;
                add_bias(&mut pre, b1);
                let h = pre.map(swish);
                (Some(pre), Some(h))
            }
        };
        let input = hidden.as_ref().unwrap_or(x);
        let heads = self
            .heads
            .iter()
            .map(|(w, b)| {
                let mut out = input.matmul_nt(w)?;
                if let Some(b) = b {
                    add_bias(&mut out, b);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderPass {
            pre_hidden,
            hidden,
            heads,
        })
    }

    /// Gradients of the loss w.r.t. every encoder tensor given the gradient
    /// w.r.t. each head output.
    pub fn backward(
        &self,
        x: &Matrix,
        pass: &EncoderPass,
        head_grads: &[Matrix],
    ) -> Result<Vec<Matrix>> {
        let input = pass.hidden.as_ref().unwrap_or(x);
        let mut head_tensors = Vec::new();
        let mut d_hidden: Option<Matrix> = None;
        for ((w, b), g) in self.heads.iter().zip(head_grads) {
            head_tensors.push(g.matmul_tn(input)?);
            if b.is_some() {
                head_tensors.push(Matrix::row_vector(&g.column_sums()));
            }
            if self.hidden.is_some() {
                let dh = g.matmul(w)?;
                match &mut d_hidden {
                    None => d_hidden = Some(dh),
                    Some(acc) => acc.axpy(1.0, &dh)?,
                }
            }
        }
        let mut out = Vec::with_capacity(self.n_tensors());
        if let (Some(pre), Some(dh)) = (&pass.pre_hidden, d_hidden) {
            let dpre = dh.zip_map(pre, |g, p| g * swish_grad(p))?;
            out.push(dpre.matmul_tn(x)?);
            out.push(Matrix::row_vector(&dpre.column_sums()));
        }
        out.extend(head_tensors);
        Ok(out)
    }
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..m.rows() {
        for (v, bb) in m.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}
