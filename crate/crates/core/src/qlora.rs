//! Affine b-bit weight quantization and rank-r adapters.
//!
//! A frozen linear layer stores `Wq = round((W - min W) / Δ)` with
//! `Δ = (max W - min W) / (2^b - 1)`; its effective weight under an adapter
//! is `dequantize(Wq) + A·B` with `A: d_out × r` and `B: r × d_in`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, Checksum, Matrix};

pub const DEFAULT_BITS: u8 = 4;
pub const DEFAULT_RANK: usize = 16;
const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub wq: Array2<u8>,
    pub delta: f64,
    pub w_min: f64,
    pub bias: Array1<f64>,
    pub bits: u8,
}

impl QuantizedLinear {
    pub fn shape(&self) -> (usize, usize) {
        self.wq.dim()
    }

    pub fn checksum_into(&self, h: &mut Checksum) {
        h.update_bytes(self.wq.as_slice().expect("standard layout"));
        h.update_f64s([self.delta, self.w_min].iter());
        h.update_f64s(self.bias.iter());
        h.update_bytes(&[self.bits]);
    }
}

/// Quantizes `w` to `bits` with a zero bias.
pub fn quantize(w: &Matrix, bits: u8) -> Result<QuantizedLinear> {
    quantize_with_bias(w, Array1::zeros(w.nrows()), bits)
}

pub fn quantize_with_bias(w: &Matrix, bias: Array1<f64>, bits: u8) -> Result<QuantizedLinear> {
    if !(2..=8).contains(&bits) {
        return Err(Error::usage(format!("quantization bits must be in 2..=8, got {bits}")));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("cannot quantize a matrix with non-finite entries"));
    }
    if bias.len() != w.nrows() {
        return Err(Error::usage("bias length must equal the output width"));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let w_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = w_max - w_min;
    if w.is_empty() || range == 0.0 {
        return Ok(QuantizedLinear {
            wq: Array2::zeros(w.dim()),
            delta: 1.0,
            w_min: if w.is_empty() { 0.0 } else { w_min },
            bias,
            bits,
        });
    }
    // (w - min) * levels / range rather than (w - min) / Δ keeps exact grid
    // points exact; f64::round rounds half away from zero.
    let wq = w.mapv(|v| ((v - w_min) * levels / range).round().clamp(0.0, levels) as u8);
    Ok(QuantizedLinear {
        wq,
        delta: range / levels,
        w_min,
        bias,
        bits,
    })
}

pub fn dequantize(q: &QuantizedLinear) -> Matrix {
    q.wq.mapv(|v| v as f64 * q.delta + q.w_min)
}

/// Trainable low-rank pair for one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `d_out × r`
    pub a: Matrix,
    /// `r × d_in`
    pub b: Matrix,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn zeros(d_out: usize, d_in: usize, r: usize) -> Self {
        Self {
            a: Array2::zeros((d_out, r)),
            b: Array2::zeros((r, d_in)),
        }
    }

    pub fn delta(&self) -> Matrix {
        self.a.dot(&self.b)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `A ~ N(0, 0.02²)`, `B = 0`, so the adapted layer starts equal to the base.
pub fn init_adapter(d_out: usize, d_in: usize, r: usize, rng: &mut impl Rng) -> Result<Adapter> {
    if r == 0 || r > d_out.min(d_in) {
        return Err(Error::usage(format!(
            "adapter rank {r} must lie in 1..={} for a {d_out}x{d_in} layer",
            d_out.min(d_in)
        )));
    }
    Ok(Adapter {
        a: gaussian(d_out, r, ADAPTER_INIT_STD, rng),
        b: Array2::zeros((r, d_in)),
    })
}

pub fn adapted_weight(q: &QuantizedLinear, adapter: &Adapter) -> Result<Matrix> {
    let (d_out, d_in) = q.shape();
    if adapter.a.nrows() != d_out || adapter.b.ncols() != d_in || adapter.a.ncols() != adapter.b.nrows() {
        return Err(Error::usage(format!(
            "adapter {}x{} · {}x{} does not fit a {d_out}x{d_in} layer",
            adapter.a.nrows(),
            adapter.a.ncols(),
            adapter.b.nrows(),
            adapter.b.ncols()
        )));
    }
    Ok(dequantize(q) + adapter.delta())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Sequencing,
    Aggregation,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Sequencing => "sequencing",
            AdapterKind::Aggregation => "aggregation",
        }
    }
}

/// One adapter per linear layer of the base model, in the base's canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub kind: AdapterKind,
    pub paths: Vec<String>,
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// Initializes adapters for layers given as `(path, d_out, d_in)`.
    pub fn init(kind: AdapterKind, layers: &[(String, usize, usize)], r: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut adapters = Vec::with_capacity(layers.len());
        for (_, d_out, d_in) in layers {
            adapters.push(init_adapter(*d_out, *d_in, r, rng)?);
        }
        Ok(Self {
            kind,
            paths: layers.iter().map(|(p, _, _)| p.clone()).collect(),
            adapters,
        })
    }

    /// Same shapes, all zeros (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            paths: self.paths.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| Adapter {
                    a: Array2::zeros(a.a.dim()),
                    b: Array2::zeros(a.b.dim()),
                })
                .collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&Adapter> {
        self.paths.iter().position(|p| p == path).map(|i| &self.adapters[i])
    }

    pub fn rank(&self) -> usize {
        self.adapters.first().map_or(0, Adapter::rank)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(Adapter::param_count).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.adapters
            .iter()
            .flat_map(|a| [a.a.as_slice().expect("standard layout"), a.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.adapters
            .iter_mut()
            .flat_map(|a| {
                [
                    a.a.as_slice_mut().expect("standard layout"),
                    a.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        let mut h = Checksum::new();
        for p in self.params() {
            h.update_f64s(p);
        }
        h.finish()
    }
}
