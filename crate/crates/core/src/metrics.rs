//! Aggregation divergence against the ideal aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregateResult, LayerAggregate};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDivergence {
    /// `‖Δ_approx − Δ_ideal‖_F / ‖Δ_ideal‖_F`; absent when normalization was
    /// not requested or the ideal update is zero.
    pub normalized: Option<f64>,
    /// `‖Δ_approx − Δ_ideal‖_F`
    pub raw: f64,
    /// `‖Δ_approx − Δ_ideal‖²_F`
    pub raw_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub layers: BTreeMap<String, LayerDivergence>,
    /// Mean of the per-layer normalized gaps over layers where defined;
    /// mean of the raw gaps when none is.
    pub aggregate: f64,
    /// Frobenius norm of the raw gaps across all layers.
    pub raw_gap: f64,
    /// Sum of the per-layer squared gaps.
    pub rho: f64,
}

impl DivergenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn layer_divergence(id: &str, layer: &LayerAggregate, normalize: bool) -> Result<LayerDivergence> {
    let ideal = &layer.ideal_delta;
    let (raw, raw_squared) = match layer.approx_delta() {
        Some(approx) => {
            let sq = approx.sub(ideal)?.frobenius_norm_sq();
            (sq.sqrt(), sq)
        }
        None => {
            let deltas = layer.client_deltas().ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "layer {id} has neither a global update nor client factors"
                ))
            })?;
            if deltas.is_empty() {
                return Err(Error::EmptyUpdates);
            }
            let n = deltas.len() as f64;
            let (mut raw, mut sq) = (0.0, 0.0);
            for delta in &deltas {
                let s = delta.sub(ideal)?.frobenius_norm_sq();
                raw += s.sqrt();
                sq += s;
            }
            (raw / n, sq / n)
        }
    };
    let norm = ideal.frobenius_norm();
    let normalized = (normalize && norm > 0.0).then(|| raw / norm);
    Ok(LayerDivergence {
        normalized,
        raw,
        raw_squared,
    })
}

/// Per-layer gap between each strategy's applied update and the ideal one.
/// FedSA has no single global update, so its gap is the mean over clients of
/// `‖s·B_u·ā − Δ_ideal‖_F`.
pub fn divergence(result: &AggregateResult, normalize: bool) -> Result<DivergenceReport> {
    let mut layers = BTreeMap::new();
    for (id, layer) in &result.layers {
        layers.insert(id.clone(), layer_divergence(id, layer, normalize)?);
    }
    let normalized: Vec<f64> = layers.values().filter_map(|l| l.normalized).collect();
    let aggregate = if !normalized.is_empty() {
        mean(&normalized)
    } else {
        mean(&layers.values().map(|l| l.raw).collect::<Vec<_>>())
    };
    let rho: f64 = layers.values().map(|l| l.raw_squared).sum();
    Ok(DivergenceReport {
        layers,
        aggregate,
        raw_gap: rho.sqrt(),
        rho,
    })
}

/// Normalized gap of one approximate update against the ideal one, zero for a
/// zero ideal.
pub fn normalized_divergence(approx: &DenseMatrix, ideal: &DenseMatrix) -> Result<f64> {
    let norm = ideal.frobenius_norm();
    let gap = approx.distance(ideal)?;
    Ok(if norm > 0.0 { gap / norm } else { gap })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
