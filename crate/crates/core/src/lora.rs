//! LoRA adapters: representation, initialization, and the closed-form
//! gradients of a LoRA-adapted linear layer `y = (W₀ + R + (α/r)·B·A)·x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{self, Purpose};

/// One adapter: `A` is `r×d`, `B` is `k×r`, effective update `(α/r)·B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair", into = "RawPair")]
pub struct LoraPair {
    a: DenseMatrix,
    b: DenseMatrix,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPair {
    a: DenseMatrix,
    b: DenseMatrix,
    rank: usize,
    alpha: f64,
}

impl TryFrom<RawPair> for LoraPair {
    type Error = Error;

    fn try_from(raw: RawPair) -> Result<Self> {
        if raw.a.rows() != raw.rank {
            return Err(Error::InvalidDimensions(format!(
                "declared rank {} but A has {} rows",
                raw.rank,
                raw.a.rows()
            )));
        }
        LoraPair::new(raw.a, raw.b, raw.alpha)
    }
}

impl From<LoraPair> for RawPair {
    fn from(p: LoraPair) -> Self {
        RawPair {
            rank: p.rank(),
            a: p.a,
            b: p.b,
            alpha: p.alpha,
        }
    }
}

impl LoraPair {
    pub fn new(a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self> {
        let r = a.rows();
        if r == 0 || b.cols() != r {
            return Err(Error::InvalidDimensions(format!(
                "A is {}x{}, B is {}x{}: need A.rows = B.cols ≥ 1",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if r > b.rows().min(a.cols()) {
            return Err(Error::InvalidDimensions(format!(
                "rank {r} exceeds min(k={}, d={})",
                b.rows(),
                a.cols()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidDimensions(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { a, b, alpha })
    }

    #[inline]
    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    #[inline]
    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut DenseMatrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut DenseMatrix {
        &mut self.b
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α / r`
    #[inline]
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Output dimension `k`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `d`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// Replaces both factors, keeping `α`. Shapes must match the current ones.
    pub fn set_factors(&mut self, a: DenseMatrix, b: DenseMatrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "set_factors: expected A {:?} and B {:?}, got {:?} and {:?}",
                self.a.shape(),
                self.b.shape(),
                a.shape(),
                b.shape()
            )));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }
}

/// A frozen pretrained weight plus a server-managed residual slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLayer {
    w0: DenseMatrix,
    pub residual: DenseMatrix,
}

impl FrozenLayer {
    pub fn new(w0: DenseMatrix) -> Self {
        let residual = DenseMatrix::zeros(w0.rows(), w0.cols());
        Self { w0, residual }
    }

    pub fn with_residual(w0: DenseMatrix, residual: DenseMatrix) -> Result<Self> {
        if w0.shape() != residual.shape() {
            return Err(Error::ShapeMismatch("residual must match w0".into()));
        }
        Ok(Self { w0, residual })
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub id: String,
    pub frozen: FrozenLayer,
    pub pair: LoraPair,
}

/// Ordered per-layer adapters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    layers: Vec<AdapterLayer>,
}

impl AdapterSet {
    pub fn new(layers: Vec<AdapterLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.id == l.id) {
                return Err(Error::InvalidDimensions(format!(
                    "duplicate layer id {:?}",
                    l.id
                )));
            }
            check_layer_shape(&l.frozen, &l.pair)?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterLayer] {
        &mut self.layers
    }

    pub fn get(&self, id: &str) -> Option<&AdapterLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn check_layer_shape(layer: &FrozenLayer, pair: &LoraPair) -> Result<()> {
    let (k, d) = layer.shape();
    if pair.out_dim() != k || pair.in_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "layer is {k}x{d} but adapter produces {}x{}",
            pair.out_dim(),
            pair.in_dim()
        )));
    }
    Ok(())
}

/// Kaiming-uniform `A` (fan-in `d`, bound `√(6/d)`) and zero `B`.
pub fn init_lora(k: usize, d: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraPair> {
    if k == 0 || d == 0 || r == 0 || r > k.min(d) {
        return Err(Error::InvalidDimensions(format!(
            "init_lora needs 1 ≤ r ≤ min(k, d), got k={k} d={d} r={r}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::LoraInit, &[k as u64, d as u64, r as u64]);
    LoraPair::new(
        kaiming_uniform(r, d, &mut rng),
        DenseMatrix::zeros(k, r),
        alpha,
    )
}

/// `r×d` matrix uniform on `[−√(6/d), √(6/d)]`.
pub fn kaiming_uniform<R: Rng + ?Sized>(r: usize, d: usize, rng: &mut R) -> DenseMatrix {
    let bound = (6.0 / d as f64).sqrt();
    DenseMatrix::from_fn(r, d, |_, _| rng.random_range(-bound..=bound))
}

/// `(α/r)·B·A`
pub fn lora_delta(pair: &LoraPair) -> DenseMatrix {
    let mut delta = pair
        .b
        .matmul(&pair.a)
        .expect("LoraPair invariant guarantees compatible factors");
    delta.scale_in_place(pair.scale());
    delta
}

/// `W₀ + residual + (α/r)·B·A`
pub fn effective_weight(layer: &FrozenLayer, pair: &LoraPair) -> Result<DenseMatrix> {
    check_layer_shape(layer, pair)?;
    let mut w = layer.w0.add(&layer.residual)?;
    w.axpy(1.0, &lora_delta(pair))?;
    Ok(w)
}

/// Gradients of a scalar loss with respect to `A` and `B`, given the input
/// batch `x` (`n×d`) and the upstream gradient `gy = ∂L/∂y` (`n×k`).
///
/// With `G = gyᵀ·x` and `s = α/r`: `∂L/∂B = s·G·Aᵀ` and `∂L/∂A = s·Bᵀ·G`.
/// Both are summed over the batch; `G` is never formed, the products are
/// routed through the rank-`r` side instead.
pub fn lora_gradients(
    layer: &FrozenLayer,
    pair: &LoraPair,
    x: &DenseMatrix,
    gy: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_layer_shape(layer, pair)?;
    let (k, d) = layer.shape();
    if x.cols() != d || gy.cols() != k || x.rows() != gy.rows() {
        return Err(Error::ShapeMismatch(format!(
            "lora_gradients: x is {}x{}, gy is {}x{}, layer is {k}x{d}",
            x.rows(),
            x.cols(),
            gy.rows(),
            gy.cols()
        )));
    }
    let s = pair.scale();
    // n×r projections
    let xa = x.matmul_nt(&pair.a)?;
    let gyb = gy.matmul(&pair.b)?;
    let mut grad_b = gy.matmul_tn(&xa)?;
    grad_b.scale_in_place(s);
    let mut grad_a = gyb.matmul_tn(x)?;
    grad_a.scale_in_place(s);
    Ok((grad_a, grad_b))
}
