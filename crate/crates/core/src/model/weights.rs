// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Weights of one transformer block. Linear weights are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// Packed query/key/value projection, `3d × d`.
    pub attn_w: Matrix,
    pub attn_b: Vec<f64>,
    pub attn_proj_w: Matrix,
    pub attn_proj_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    /// `W_fc`, `d_ffn × d`.
    pub fc_w: Matrix,
    pub fc_b: Vec<f64>,
    /// `W_proj`, `d × d_ffn`; the matrix the editor rewrites.
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// Token embeddings, also used as the output head.
    pub wte: Matrix,
    pub wpe: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerWeights {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            attn_w: Matrix::zeros(3 * d, d),
            attn_b: vec![0.0; 3 * d],
            attn_proj_w: Matrix::zeros(d, d),
            attn_proj_b: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            fc_w: Matrix::zeros(cfg.d_ffn, d),
            fc_b: vec![0.0; cfg.d_ffn],
            proj_w: Matrix::zeros(d, cfg.d_ffn),
            proj_b: vec![0.0; d],
        };
        Self {
            wte: Matrix::zeros(cfg.vocab_size, d),
            wpe: Matrix::zeros(cfg.max_seq_len, d),
            layers: vec![layer; cfg.n_layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    /// GPT-2 style initialization: `N(0, 0.02)` everywhere, residual output
    /// projections scaled by `1/√(2L)`, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
        let mut fill = |m: &mut [f64], dist: &Normal<f64>| {
            for v in m.iter_mut() {
                *v = dist.sample(rng);
            }
        };
        fill(w.wte.data_mut(), &normal);
        fill(w.wpe.data_mut(), &normal);
        for layer in &mut w.layers {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
            fill(layer.attn_w.data_mut(), &normal);
            fill(layer.attn_proj_w.data_mut(), &resid);
            fill(layer.fc_w.data_mut(), &normal);
            fill(layer.proj_w.data_mut(), &resid);
        }
        w.lnf_g.fill(1.0);
        w
    }

    /// Tensor names in storage order, following the `transformer.h.{l}.…`
    /// module-path scheme.
    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut names = vec![
            "transformer.wte.weight".to_string(),
            "transformer.wpe.weight".to_string(),
        ];
        for l in 0..n_layers {
            for suffix in LAYER_SUFFIXES {
                names.push(format!("transformer.h.{l}.{suffix}"));
            }
        }
        names.push("transformer.ln_f.weight".into());
        names.push("transformer.ln_f.bias".into());
        names
    }

    /// Every tensor as `(shape, data)` in [`Weights::tensor_names`] order.
    pub fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        fn mat(m: &Matrix) -> (Vec<usize>, &[f64]) {
            (vec![m.rows(), m.cols()], m.data())
        }
        fn vec1(v: &[f64]) -> (Vec<usize>, &[f64]) {
            (vec![v.len()], v)
        }
        let mut out = vec![mat(&self.wte), mat(&self.wpe)];
        for l in &self.layers {
            out.extend([
                vec1(&l.ln1_g),
                vec1(&l.ln1_b),
                mat(&l.attn_w),
                vec1(&l.attn_b),
                mat(&l.attn_proj_w),
                vec1(&l.attn_proj_b),
                vec1(&l.ln2_g),
                vec1(&l.ln2_b),
                mat(&l.fc_w),
                vec1(&l.fc_b),
                mat(&l.proj_w),
                vec1(&l.proj_b),
            ]);
        }
        out.push(vec1(&self.lnf_g));
        out.push(vec1(&self.lnf_b));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.wte.data_mut(), self.wpe.data_mut()];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(l.attn_w.data_mut());
            out.push(&mut l.attn_b);
            out.push(l.attn_proj_w.data_mut());
            out.push(&mut l.attn_proj_b);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(l.fc_w.data_mut());
            out.push(&mut l.fc_b);
            out.push(l.proj_w.data_mut());
            out.push(&mut l.proj_b);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    /// Rebuilds weights from named tensors, checking every name and shape.
    pub fn from_named(cfg: &ModelConfig, mut named: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut w = Self::zeros(cfg);
        let names = Self::tensor_names(cfg.n_layers);
        let shapes: Vec<Vec<usize>> = w.tensors().into_iter().map(|(s, _)| s).collect();
        if named.len() != names.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        named.sort_by_key(|(n, _, _)| names.iter().position(|x| x == n).unwrap_or(usize::MAX));
        for (((name, shape, data), expected_name), expected_shape) in
            named.iter().zip(&names).zip(&shapes)
        {
            if name != expected_name {
                return Err(Error::Invalid(format!("unexpected tensor `{name}`")));
            }
            if shape != expected_shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {shape:?}, expected {expected_shape:?}"
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
        }
        for (buf, (_, _, data)) in w.buffers_mut().into_iter().zip(named) {
            buf.copy_from_slice(&data);
        }
        Ok(w)
    }
}

const LAYER_SUFFIXES: [&str; 12] = [
    "ln_1.weight",
    "ln_1.bias",
    "attn.c_attn.weight",
    "attn.c_attn.bias",
    "attn.c_proj.weight",
    "attn.c_proj.bias",
    "ln_2.weight",
    "ln_2.bias",
    "mlp.c_fc.weight",
    "mlp.c_fc.bias",
    "mlp.c_proj.weight",
    "mlp.c_proj.bias",
];

/// Which FFN projection a module address names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FfnModule {
    Fc,
    Proj,
}

/// Parses `transformer.h.3.mlp.c_proj` (or the bracketed
/// `transformer.h.[3].mlp.c_proj`) into `(3, FfnModule::Proj)`.
pub fn parse_module_address(address: &str) -> Result<(usize, FfnModule)> {
    let bad = || Error::Invalid(format!("unrecognized module address `{address}`"));
    let rest = address.strip_prefix("transformer.h.").ok_or_else(bad)?;
    let (layer, module) = rest.split_once('.').ok_or_else(bad)?;
    let layer = layer.trim_start_matches('[').trim_end_matches(']');
    let layer: usize = layer.parse().map_err(|_| bad())?;
    let module = match module.trim_end_matches(".weight") {
        "mlp.c_proj" => FfnModule::Proj,
        "mlp.c_fc" => FfnModule::Fc,
        _ => return Err(bad()),
    };
    Ok((layer, module))
}

pub fn module_address(layer: usize, module: FfnModule) -> String {
    match module {
        FfnModule::Proj => format!("transformer.h.{layer}.mlp.c_proj"),
        FfnModule::Fc => format!("transformer.h.{layer}.mlp.c_fc"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_addresses() {
        assert_eq!(
            parse_module_address("transformer.h.[3].mlp.c_proj").unwrap(),
            (3, FfnModule::Proj)
        );
        assert_eq!(
            parse_module_address("transformer.h.12.mlp.c_fc.weight").unwrap(),
            (12, FfnModule::Fc)
        );
        assert!(parse_module_address("transformer.h.1.attn.c_proj").is_err());
        assert_eq!(module_address(4, FfnModule::Proj), "transformer.h.4.mlp.c_proj");
    }

    #[test]
    fn names_cover_every_tensor() {
        let cfg = ModelConfig::tiny(10);
        let w = Weights::zeros(&cfg);
        assert_eq!(Weights::tensor_names(cfg.n_layers).len(), w.tensors().len());
    }
}
