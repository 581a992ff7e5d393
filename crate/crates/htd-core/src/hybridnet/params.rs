//! Parameter initialization and the canonical tensor layout.
//!
//! Every place that walks the full parameter set (the optimizer, the tape
//! registration, persistence) uses the same canonical slot order defined by
//! `slots`/`slots_mut`/`named_tensors`: embedding, then per kernel width its
//! kernels and bias, the nine GRU tensors, the optional aux projection, and
//! the dense head.

use std::collections::HashMap;

use super::{HybridNetError, ModelConfig};
use crate::numgrad::Tensor;
use crate::rng::DetRng;
use crate::textproc::PAD_ID;

/// The gated recurrent unit's parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

/// All learned weights of the hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModelParams {
    pub embedding: Tensor,
    pub conv_kernels: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    pub gru: GruParams,
    pub aux_proj: Option<Tensor>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn glorot(dims: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut DetRng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-a, a)).collect();
    Tensor::new(dims, data)
}

/// Square orthogonal matrix: Gaussian draw followed by modified
/// Gram-Schmidt over the rows.
fn orthogonal(h: usize, rng: &mut DetRng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..h)
        .map(|_| (0..h).map(|_| rng.normal()).collect())
        .collect();
    for i in 0..h {
        for j in 0..i {
            let dot: f64 = (0..h).map(|k| rows[i][k] * rows[j][k]).sum();
            for k in 0..h {
                rows[i][k] -= dot * rows[j][k];
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate draw during orthogonal init");
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(vec![h, h], rows.into_iter().flatten().collect())
}

/// Deterministic initialization from `config.seed`: Glorot-uniform
/// embedding, conv, and dense weights; orthogonal recurrent `U` matrices;
/// zero biases; PAD embedding row zeroed (and kept frozen by training).
pub fn init_params(config: &ModelConfig) -> Result<HybridModelParams, HybridNetError> {
    config.validate()?;
    let mut rng = DetRng::new(config.seed);
    let (v, e) = (config.vocab_size, config.embed_dim);
    let (f, h) = (config.filters_per_width, config.gru_hidden);
    let d = config.dense_hidden;

    let mut embedding = glorot(vec![v, e], v, e, &mut rng);
    embedding.data_mut()[PAD_ID * e..(PAD_ID + 1) * e].fill(0.0);

    let mut conv_kernels = Vec::new();
    let mut conv_biases = Vec::new();
    for &w in &config.kernel_widths {
        conv_kernels.push(glorot(vec![f, w, e], w * e, f, &mut rng));
        conv_biases.push(Tensor::zeros(vec![f]));
    }

    let gate = |rng: &mut DetRng| -> (Tensor, Tensor, Tensor) {
        (
            glorot(vec![h, e], e, h, rng),
            orthogonal(h, rng),
            Tensor::zeros(vec![h]),
        )
    };
    let (w_z, u_z, b_z) = gate(&mut rng);
    let (w_r, u_r, b_r) = gate(&mut rng);
    let (w_h, u_h, b_h) = gate(&mut rng);
    let gru = GruParams {
        w_z,
        u_z,
        b_z,
        w_r,
        u_r,
        b_r,
        w_h,
        u_h,
        b_h,
    };

    let aux_proj = config
        .use_tfidf_aux
        .then(|| glorot(vec![config.aux_dim(), v], v, config.aux_dim(), &mut rng));

    let c = config.hybrid_dim();
    let dense_w = glorot(vec![d, c], c, d, &mut rng);
    let dense_b = Tensor::zeros(vec![d]);
    let out_w = glorot(vec![1, d], d, 1, &mut rng);
    let out_b = Tensor::zeros(vec![1]);

    Ok(HybridModelParams {
        embedding,
        conv_kernels,
        conv_biases,
        gru,
        aux_proj,
        dense_w,
        dense_b,
        out_w,
        out_b,
    })
}

impl HybridModelParams {
    /// Immutable views of every tensor in canonical slot order.
    pub fn slots(&self) -> Vec<&Tensor> {
        let mut slots = vec![&self.embedding];
        for (k, b) in self.conv_kernels.iter().zip(&self.conv_biases) {
            slots.push(k);
            slots.push(b);
        }
        let g = &self.gru;
        slots.extend([
            &g.w_z, &g.u_z, &g.b_z, &g.w_r, &g.u_r, &g.b_r, &g.w_h, &g.u_h, &g.b_h,
        ]);
        if let Some(aux) = &self.aux_proj {
            slots.push(aux);
        }
        slots.extend([&self.dense_w, &self.dense_b, &self.out_w, &self.out_b]);
        slots
    }

    /// Mutable views in the same canonical order as [`Self::slots`].
    pub fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut slots = vec![&mut self.embedding];
        for (k, b) in self.conv_kernels.iter_mut().zip(self.conv_biases.iter_mut()) {
            slots.push(k);
            slots.push(b);
        }
        let g = &mut self.gru;
        slots.extend([
            &mut g.w_z, &mut g.u_z, &mut g.b_z, &mut g.w_r, &mut g.u_r, &mut g.b_r, &mut g.w_h,
            &mut g.u_h, &mut g.b_h,
        ]);
        if let Some(aux) = &mut self.aux_proj {
            slots.push(aux);
        }
        slots.extend([
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        slots
    }

    /// Names for the canonical slots, aligned with [`Self::slots`]. Kernel
    /// widths appear in the names, so widths must be unique (validated by
    /// the config).
    pub fn slot_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for &w in &config.kernel_widths {
            names.push(format!("conv{w}.kernels"));
            names.push(format!("conv{w}.bias"));
        }
        for gate in ["z", "r", "h"] {
            names.push(format!("gru.w_{gate}"));
            names.push(format!("gru.u_{gate}"));
            names.push(format!("gru.b_{gate}"));
        }
        if config.use_tfidf_aux {
            names.push("aux.proj".to_string());
        }
        for tail in ["dense.w", "dense.b", "out.w", "out.b"] {
            names.push(tail.to_string());
        }
        names
    }

    /// (name, tensor) pairs in canonical order, for persistence.
    pub fn named_tensors(&self, config: &ModelConfig) -> Vec<(String, &Tensor)> {
        Self::slot_names(config).into_iter().zip(self.slots()).collect()
    }

    /// Reassembles a parameter set from named tensors, checking that every
    /// expected tensor is present with the shape the config implies.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: HashMap<String, Tensor>,
    ) -> Result<Self, HybridNetError> {
        config.validate()?;
        let mut take = |name: &str, dims: Vec<usize>| -> Result<Tensor, HybridNetError> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| HybridNetError::BadParams(format!("missing tensor `{name}`")))?;
            if t.dims() != dims {
                return Err(HybridNetError::BadParams(format!(
                    "tensor `{name}` has dims {:?}, config implies {:?}",
                    t.dims(),
                    dims
                )));
            }
            Ok(t)
        };

        let (v, e) = (config.vocab_size, config.embed_dim);
        let (f, h) = (config.filters_per_width, config.gru_hidden);
        let d = config.dense_hidden;
        let embedding = take("embedding", vec![v, e])?;
        let mut conv_kernels = Vec::new();
        let mut conv_biases = Vec::new();
        for &w in &config.kernel_widths {
            conv_kernels.push(take(&format!("conv{w}.kernels"), vec![f, w, e])?);
            conv_biases.push(take(&format!("conv{w}.bias"), vec![f])?);
        }
        let load_gate = |name: &str,
                             take: &mut dyn FnMut(&str, Vec<usize>) -> Result<Tensor, HybridNetError>|
         -> Result<(Tensor, Tensor, Tensor), HybridNetError> {
            Ok((
                take(&format!("gru.w_{name}"), vec![h, e])?,
                take(&format!("gru.u_{name}"), vec![h, h])?,
                take(&format!("gru.b_{name}"), vec![h])?,
            ))
        };
        let (w_z, u_z, b_z) = load_gate("z", &mut take)?;
        let (w_r, u_r, b_r) = load_gate("r", &mut take)?;
        let (w_h, u_h, b_h) = load_gate("h", &mut take)?;
        let gru = GruParams {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        };
        let aux_proj = if config.use_tfidf_aux {
            Some(take("aux.proj", vec![config.aux_dim(), v])?)
        } else {
            None
        };
        let c = config.hybrid_dim();
        let out = Self {
            embedding,
            conv_kernels,
            conv_biases,
            gru,
            aux_proj,
            dense_w: take("dense.w", vec![d, c])?,
            dense_b: take("dense.b", vec![d])?,
            out_w: take("out.w", vec![1, d])?,
            out_b: take("out.b", vec![1])?,
        };
        if let Some(extra) = tensors.into_keys().next() {
            return Err(HybridNetError::BadParams(format!(
                "unexpected tensor `{extra}`"
            )));
        }
        Ok(out)
    }
}
