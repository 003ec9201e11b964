//! Server-side aggregation of a round's LoRA uploads, one layer at a time.
//!
//! Every strategy also records the ideal full-parameter aggregate
//! `Σ w_u·(α/r)·B_u·A_u` so divergence can be measured against it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::matrix::DenseMatrix;
use crate::solver::{solve_coefficients, NaProblem, SolverConfig};

/// Largest entrywise deviation tolerated before an FFA upload counts as
/// having modified its frozen `A`.
pub const FROZEN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Full-parameter average of the products.
    Ideal,
    /// Separate averaging of `A` and `B`.
    Fedit,
    /// `A` frozen at init, only `B` averaged.
    Ffa,
    /// Only `A` averaged, `B` stays on the client.
    Fedsa,
    /// Block-stacked factors (exact, download grows with `U`).
    Stack,
    /// Separate averaging plus a dense residual correction.
    Fedex,
    /// Coefficient-weighted factors fitted to the ideal product.
    FloraNa,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ideal,
        Strategy::Fedit,
        Strategy::Ffa,
        Strategy::Fedsa,
        Strategy::Stack,
        Strategy::Fedex,
        Strategy::FloraNa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ideal => "IDEAL",
            Strategy::Fedit => "FEDIT",
            Strategy::Ffa => "FFA",
            Strategy::Fedsa => "FEDSA",
            Strategy::Stack => "STACK",
            Strategy::Fedex => "FEDEX",
            Strategy::FloraNa => "FLORA_NA",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Parse(format!("unknown strategy {s:?}")))
    }
}

/// One client's upload for a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: String,
    pub adapters: BTreeMap<String, LoraPair>,
    pub sample_count: usize,
}

/// Non-negative aggregation weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientWeights(Vec<f64>);

impl ClientWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no weights".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(clients: usize) -> Self {
        Self(vec![1.0 / clients as f64; clients])
    }

    /// Proportional to each update's sample count.
    pub fn from_sample_counts(updates: &[ClientUpdate]) -> Result<Self> {
        let total: usize = updates.iter().map(|u| u.sample_count).sum();
        if total == 0 {
            return Err(Error::InvalidWeights("total sample count is zero".into()));
        }
        Self::new(
            updates
                .iter()
                .map(|u| u.sample_count as f64 / total as f64)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub initial_objective: f64,
    pub objective: f64,
}

/// Server output for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub a_bar: Option<DenseMatrix>,
    pub b_bar: Option<DenseMatrix>,
    pub residual: Option<DenseMatrix>,
    pub ideal_delta: DenseMatrix,
    /// Multiplier applied to `b_bar·a_bar`.
    pub scale: f64,
    pub coefficients: Option<Coefficients>,
    /// FedSA only: the clients' own `B` factors, in update order.
    pub client_b: Option<Vec<DenseMatrix>>,
}

impl LayerAggregate {
    /// The update this aggregate applies on top of the frozen weight, or
    /// `None` when there is no single global update (FedSA).
    pub fn approx_delta(&self) -> Option<DenseMatrix> {
        match (&self.a_bar, &self.b_bar) {
            (Some(a), Some(b)) => {
                let mut delta = b.matmul(a).expect("aggregate factors are compatible");
                delta.scale_in_place(self.scale);
                if let Some(r) = &self.residual {
                    delta.axpy(1.0, r).expect("residual matches layer");
                }
                Some(delta)
            }
            (None, None) => Some(self.ideal_delta.clone()),
            _ => None,
        }
    }

    /// FedSA: each client's `scale·B_u·a_bar`.
    pub fn client_deltas(&self) -> Option<Vec<DenseMatrix>> {
        let a = self.a_bar.as_ref()?;
        let bs = self.client_b.as_ref()?;
        Some(
            bs.iter()
                .map(|b| b.matmul(a).expect("compatible").scaled(self.scale))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub strategy: Strategy,
    pub layers: BTreeMap<String, LayerAggregate>,
}

#[derive(Serialize)]
struct LayerDoc<'a> {
    has_a_bar: bool,
    has_b_bar: bool,
    has_residual: bool,
    scale: f64,
    a_bar: Option<&'a DenseMatrix>,
    b_bar: Option<&'a DenseMatrix>,
    residual: Option<&'a DenseMatrix>,
    ideal_delta: &'a DenseMatrix,
    coefficients: Option<&'a Coefficients>,
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    strategy: Strategy,
    layers: BTreeMap<&'a str, LayerDoc<'a>>,
}

impl AggregateResult {
    /// JSON report: strategy name, matrix dumps, coefficients, presence flags.
    pub fn to_json(&self) -> Result<String> {
        let doc = ResultDoc {
            strategy: self.strategy,
            layers: self
                .layers
                .iter()
                .map(|(id, l)| {
                    (
                        id.as_str(),
                        LayerDoc {
                            has_a_bar: l.a_bar.is_some(),
                            has_b_bar: l.b_bar.is_some(),
                            has_residual: l.residual.is_some(),
                            scale: l.scale,
                            a_bar: l.a_bar.as_ref(),
                            b_bar: l.b_bar.as_ref(),
                            residual: l.residual.as_ref(),
                            ideal_delta: &l.ideal_delta,
                            coefficients: l.coefficients.as_ref(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Extra inputs some strategies need.
#[derive(Debug, Clone, Default)]
pub struct AggregationContext<'a> {
    pub frozen_a: Option<&'a BTreeMap<String, DenseMatrix>>,
    pub solver: SolverConfig,
}

/// Checks the round and returns the layer ids of the first update.
fn validate(updates: &[ClientUpdate], w: &ClientWeights) -> Result<Vec<String>> {
    let first = updates.first().ok_or(Error::EmptyUpdates)?;
    if w.len() != updates.len() {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} updates",
            w.len(),
            updates.len()
        )));
    }
    let ids: Vec<String> = first.adapters.keys().cloned().collect();
    for u in updates {
        if u.sample_count == 0 {
            return Err(Error::InsufficientSamples(format!(
                "client {} reports zero samples",
                u.client_id
            )));
        }
        if u.adapters.len() != ids.len() || ids.iter().any(|id| !u.adapters.contains_key(id)) {
            return Err(Error::ShapeMismatch(format!(
                "client {} uploads a different layer set",
                u.client_id
            )));
        }
    }
    Ok(ids)
}

fn layer_pairs<'u>(
    updates: &'u [ClientUpdate],
    layer: &str,
    uniform: Option<Strategy>,
) -> Result<Vec<&'u LoraPair>> {
    let pairs: Vec<&LoraPair> = updates.iter().map(|u| &u.adapters[layer]).collect();
    let (k, d) = (pairs[0].out_dim(), pairs[0].in_dim());
    for (p, u) in pairs.iter().zip(updates) {
        if p.out_dim() != k || p.in_dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer}: client {} has a {}x{} adapter, expected {k}x{d}",
                u.client_id,
                p.out_dim(),
                p.in_dim()
            )));
        }
    }
    if let Some(strategy) = uniform {
        let (r, alpha) = (pairs[0].rank(), pairs[0].alpha());
        if pairs.iter().any(|p| p.rank() != r || p.alpha() != alpha) {
            return Err(Error::MixedRanks(strategy.name()));
        }
    }
    Ok(pairs)
}

fn ideal_delta(pairs: &[&LoraPair], w: &[f64]) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(pairs[0].out_dim(), pairs[0].in_dim());
    for (p, &wu) in pairs.iter().zip(w) {
        if wu == 0.0 {
            continue;
        }
        let prod = p.b().matmul(p.a()).expect("LoraPair invariant");
        t.axpy(wu * p.scale(), &prod).expect("shapes validated");
    }
    t
}

fn weighted_sum<'m>(mats: impl Iterator<Item = &'m DenseMatrix>, w: &[f64]) -> DenseMatrix {
    let mut out: Option<DenseMatrix> = None;
    for (m, &wu) in mats.zip(w) {
        match &mut out {
            None => out = Some(m.scaled(wu)),
            Some(acc) => acc.axpy(wu, m).expect("shapes validated"),
        }
    }
    out.expect("at least one update")
}

fn empty_layer(ideal: DenseMatrix, scale: f64) -> LayerAggregate {
    LayerAggregate {
        a_bar: None,
        b_bar: None,
        residual: None,
        ideal_delta: ideal,
        scale,
        coefficients: None,
        client_b: None,
    }
}

fn per_layer<F>(
    strategy: Strategy,
    updates: &[ClientUpdate],
    w: &ClientWeights,
    f: F,
) -> Result<AggregateResult>
where
    F: Fn(&str, &[ClientUpdate]) -> Result<LayerAggregate> + Sync,
{
    let ids = validate(updates, w)?;
    let layers = ids
        .par_iter()
        .map(|id| f(id, updates).map(|agg| (id.clone(), agg)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregateResult {
        strategy,
        layers: layers.into_iter().collect(),
    })
}

pub fn aggregate_ideal(updates: &[ClientUpdate], w: &ClientWeights) -> Result<AggregateResult> {
    per_layer(Strategy::Ideal, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, None)?;
        Ok(empty_layer(ideal_delta(&pairs, w.as_slice()), 1.0))
    })
}

pub fn aggregate_fedit(updates: &[ClientUpdate], w: &ClientWeights) -> Result<AggregateResult> {
    per_layer(Strategy::Fedit, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, Some(Strategy::Fedit))?;
        let ws = w.as_slice();
        let mut agg = empty_layer(ideal_delta(&pairs, ws), pairs[0].scale());
        agg.a_bar = Some(weighted_sum(pairs.iter().map(|p| p.a()), ws));
        agg.b_bar = Some(weighted_sum(pairs.iter().map(|p| p.b()), ws));
        Ok(agg)
    })
}

pub fn aggregate_ffa(
    updates: &[ClientUpdate],
    w: &ClientWeights,
    frozen_a: &BTreeMap<String, DenseMatrix>,
) -> Result<AggregateResult> {
    per_layer(Strategy::Ffa, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, Some(Strategy::Ffa))?;
        let frozen = frozen_a
            .get(id)
            .ok_or_else(|| Error::ShapeMismatch(format!("no frozen A for layer {id}")))?;
        for (p, u) in pairs.iter().zip(updates) {
            let dev = p.a().max_abs_diff(frozen)?;
            if dev > FROZEN_TOLERANCE {
                return Err(Error::FrozenViolation {
                    client: u.client_id.clone(),
                    layer: id.to_string(),
                });
            }
        }
        let ws = w.as_slice();
        let mut agg = empty_layer(ideal_delta(&pairs, ws), pairs[0].scale());
        agg.a_bar = Some(frozen.clone());
        agg.b_bar = Some(weighted_sum(pairs.iter().map(|p| p.b()), ws));
        Ok(agg)
    })
}

pub fn aggregate_fedsa(updates: &[ClientUpdate], w: &ClientWeights) -> Result<AggregateResult> {
    per_layer(Strategy::Fedsa, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, Some(Strategy::Fedsa))?;
        let ws = w.as_slice();
        let mut agg = empty_layer(ideal_delta(&pairs, ws), pairs[0].scale());
        agg.a_bar = Some(weighted_sum(pairs.iter().map(|p| p.a()), ws));
        agg.client_b = Some(pairs.iter().map(|p| p.b().clone()).collect());
        Ok(agg)
    })
}

/// Ranks may differ per client. `B` blocks carry `w_u·s_u/s₀` (with `s_u` the
/// client's `α/r` and `s₀` the first client's) so that
/// `s₀·b_bar·a_bar = Σ w_u·s_u·B_u·A_u` exactly.
pub fn aggregate_stack(updates: &[ClientUpdate], w: &ClientWeights) -> Result<AggregateResult> {
    per_layer(Strategy::Stack, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, None)?;
        let ws = w.as_slice();
        let s0 = pairs[0].scale();
        let a_blocks: Vec<&DenseMatrix> = pairs.iter().map(|p| p.a()).collect();
        let b_blocks: Vec<DenseMatrix> = pairs
            .iter()
            .zip(ws)
            .map(|(p, &wu)| p.b().scaled(wu * p.scale() / s0))
            .collect();
        let mut agg = empty_layer(ideal_delta(&pairs, ws), s0);
        agg.a_bar = Some(DenseMatrix::vstack(&a_blocks)?);
        agg.b_bar = Some(DenseMatrix::hstack(&b_blocks.iter().collect::<Vec<_>>())?);
        Ok(agg)
    })
}

pub fn aggregate_fedex(updates: &[ClientUpdate], w: &ClientWeights) -> Result<AggregateResult> {
    let mut result = aggregate_fedit(updates, w)?;
    result.strategy = Strategy::Fedex;
    for agg in result.layers.values_mut() {
        let a = agg.a_bar.as_ref().expect("fedit sets a_bar");
        let b = agg.b_bar.as_ref().expect("fedit sets b_bar");
        let product = b.matmul(a)?.scaled(agg.scale);
        agg.residual = Some(agg.ideal_delta.sub(&product)?);
    }
    Ok(result)
}

/// Solves `(p, q)` per layer on the unscaled factors, then applies them.
pub fn aggregate_flora_na(
    updates: &[ClientUpdate],
    w: &ClientWeights,
    config: &SolverConfig,
) -> Result<AggregateResult> {
    config.validate()?;
    per_layer(Strategy::FloraNa, updates, w, |id, updates| {
        let pairs = layer_pairs(updates, id, Some(Strategy::FloraNa))?;
        let ws = w.as_slice();
        let problem = NaProblem::from_pairs(&pairs, ws)?;
        let sol =
            solve_coefficients(&problem, config).map_err(|e| e.context(format!("layer {id}")))?;
        let (b_bar, a_bar) = problem.combine(&sol.p, &sol.q);
        let mut agg = empty_layer(ideal_delta(&pairs, ws), pairs[0].scale());
        agg.a_bar = Some(a_bar);
        agg.b_bar = Some(b_bar);
        agg.coefficients = Some(Coefficients {
            p: sol.p,
            q: sol.q,
            initial_objective: sol.initial_objective,
            objective: sol.objective,
        });
        Ok(agg)
    })
}

/// Dispatches to the strategy's aggregation rule.
pub fn aggregate(
    strategy: Strategy,
    updates: &[ClientUpdate],
    w: &ClientWeights,
    ctx: &AggregationContext<'_>,
) -> Result<AggregateResult> {
    match strategy {
        Strategy::Ideal => aggregate_ideal(updates, w),
        Strategy::Fedit => aggregate_fedit(updates, w),
        Strategy::Ffa => {
            let frozen = ctx.frozen_a.ok_or_else(|| {
                Error::InvalidSpec("FFA aggregation needs the frozen A matrices".into())
            })?;
            aggregate_ffa(updates, w, frozen)
        }
        Strategy::Fedsa => aggregate_fedsa(updates, w),
        Strategy::Stack => aggregate_stack(updates, w),
        Strategy::Fedex => aggregate_fedex(updates, w),
        Strategy::FloraNa => aggregate_flora_na(updates, w, &ctx.solver),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::lora_delta;
    use crate::rng::{self, Purpose};
    use rand::Rng;

    pub(crate) fn update(id: &str, pairs: Vec<(&str, LoraPair)>) -> ClientUpdate {
        ClientUpdate {
            client_id: id.to_string(),
            adapters: pairs.into_iter().map(|(l, p)| (l.to_string(), p)).collect(),
            sample_count: 10,
        }
    }

    fn pair(b: &[&[f64]], a: &[&[f64]], alpha: f64) -> LoraPair {
        LoraPair::new(DenseMatrix::from_rows(a), DenseMatrix::from_rows(b), alpha).unwrap()
    }

    /// r = 1, α = r: B₁=[1;1], A₁=[1,0]; B₂=[2;2], A₂=[0,1].
    fn hand_instance() -> Vec<ClientUpdate> {
        vec![
            update(
                "c1",
                vec![("l", pair(&[&[1.0], &[1.0]], &[&[1.0, 0.0]], 1.0))],
            ),
            update(
                "c2",
                vec![("l", pair(&[&[2.0], &[2.0]], &[&[0.0, 1.0]], 1.0))],
            ),
        ]
    }

    fn random_pair(k: usize, d: usize, r: usize, seed: u64) -> LoraPair {
        let mut rng = rng::stream(seed, Purpose::Fixture, &[k as u64, d as u64, r as u64]);
        let a = DenseMatrix::from_fn(r, d, |_, _| rng.random_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(k, r, |_, _| rng.random_range(-1.0..1.0));
        LoraPair::new(a, b, 2.0 * r as f64).unwrap()
    }

    fn gap(result: &AggregateResult) -> f64 {
        let l = &result.layers["l"];
        l.approx_delta().unwrap().distance(&l.ideal_delta).unwrap()
    }

    #[test]
    fn ideal_examples() {
        let w = ClientWeights::uniform(2);
        let r = aggregate_ideal(&hand_instance(), &w).unwrap();
        assert_eq!(
            r.layers["l"].ideal_delta,
            DenseMatrix::from_rows(&[[0.5, 1.0], [0.5, 1.0]])
        );

        let p = random_pair(3, 4, 2, 1);
        let single = aggregate_ideal(
            &[update("a", vec![("l", p.clone())])],
            &ClientWeights::uniform(1),
        )
        .unwrap();
        assert!(
            single.layers["l"]
                .ideal_delta
                .max_abs_diff(&lora_delta(&p))
                .unwrap()
                < 1e-15
        );

        let neg = LoraPair::new(p.a().clone(), p.b().scaled(-1.0), p.alpha()).unwrap();
        let cancel = aggregate_ideal(
            &[update("a", vec![("l", p)]), update("b", vec![("l", neg)])],
            &ClientWeights::uniform(2),
        )
        .unwrap();
        assert!(cancel.layers["l"].ideal_delta.is_zero());
    }

    #[test]
    fn fedit_hand_gap() {
        let r = aggregate_fedit(&hand_instance(), &ClientWeights::uniform(2)).unwrap();
        let l = &r.layers["l"];
        assert_eq!(
            l.approx_delta().unwrap(),
            DenseMatrix::from_rows(&[[0.75, 0.75], [0.75, 0.75]])
        );
        assert!((gap(&r) - 0.5).abs() < 1e-15);
        assert!((gap(&r) / l.ideal_delta.frobenius_norm() - 0.316_227_766).abs() < 1e-6);
    }

    #[test]
    fn fedit_common_factor_collapse() {
        let shared = random_pair(4, 5, 2, 7);
        let updates: Vec<_> = (0..3)
            .map(|i| {
                let other = random_pair(4, 5, 2, 100 + i);
                let p =
                    LoraPair::new(other.a().clone(), shared.b().clone(), shared.alpha()).unwrap();
                update(&format!("c{i}"), vec![("l", p)])
            })
            .collect();
        assert!(gap(&aggregate_fedit(&updates, &ClientWeights::uniform(3)).unwrap()) <= 1e-12);
        let updates: Vec<_> = (0..3)
            .map(|i| {
                let other = random_pair(4, 5, 2, 200 + i);
                let p =
                    LoraPair::new(shared.a().clone(), other.b().clone(), shared.alpha()).unwrap();
                update(&format!("c{i}"), vec![("l", p)])
            })
            .collect();
        assert!(gap(&aggregate_fedit(&updates, &ClientWeights::uniform(3)).unwrap()) <= 1e-12);
        let single = vec![update("a", vec![("l", random_pair(3, 3, 1, 5))])];
        assert_eq!(
            gap(&aggregate_fedit(&single, &ClientWeights::uniform(1)).unwrap()),
            0.0
        );
    }

    #[test]
    fn ffa_examples() {
        let base = random_pair(4, 4, 2, 1);
        let frozen: BTreeMap<String, DenseMatrix> = [("l".to_string(), base.a().clone())].into();
        let updates: Vec<_> = (0..2)
            .map(|i| {
                let b = random_pair(4, 4, 2, 10 + i).b().clone();
                update(
                    &format!("c{i}"),
                    vec![(
                        "l",
                        LoraPair::new(base.a().clone(), b, base.alpha()).unwrap(),
                    )],
                )
            })
            .collect();
        let r = aggregate_ffa(&updates, &ClientWeights::uniform(2), &frozen).unwrap();
        assert!(gap(&r) <= 1e-12);
        assert_eq!(r.layers["l"].a_bar.as_ref().unwrap(), base.a());

        let mut bad = updates.clone();
        bad[1].adapters.get_mut("l").unwrap().a_mut()[(0, 0)] += 0.1;
        assert!(matches!(
            aggregate_ffa(&bad, &ClientWeights::uniform(2), &frozen),
            Err(Error::FrozenViolation { .. })
        ));
    }

    #[test]
    fn fedsa_examples() {
        let updates = hand_instance();
        let r = aggregate_fedsa(&updates, &ClientWeights::uniform(2)).unwrap();
        let l = &r.layers["l"];
        assert!(l.b_bar.is_none());
        assert!(l.approx_delta().is_none());
        assert_eq!(
            l.a_bar.as_ref().unwrap(),
            &DenseMatrix::from_rows(&[[0.5, 0.5]])
        );
        assert_eq!(l.client_deltas().unwrap().len(), 2);

        let shared = random_pair(3, 4, 2, 3);
        let updates: Vec<_> = (0..3)
            .map(|i| {
                let b = random_pair(3, 4, 2, 30 + i).b().clone();
                update(
                    &format!("c{i}"),
                    vec![(
                        "l",
                        LoraPair::new(shared.a().clone(), b, shared.alpha()).unwrap(),
                    )],
                )
            })
            .collect();
        let r = aggregate_fedsa(&updates, &ClientWeights::uniform(3)).unwrap();
        for (delta, u) in r.layers["l"].client_deltas().unwrap().iter().zip(&updates) {
            assert!(delta.max_abs_diff(&lora_delta(&u.adapters["l"])).unwrap() < 1e-12);
        }
    }

    #[test]
    fn stack_dimensions_and_exactness() {
        let updates: Vec<_> = (1..=3)
            .map(|r| {
                update(
                    &format!("c{r}"),
                    vec![("l", random_pair(5, 6, r, r as u64))],
                )
            })
            .collect();
        let w = ClientWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let res = aggregate_stack(&updates, &w).unwrap();
        let l = &res.layers["l"];
        assert_eq!(l.a_bar.as_ref().unwrap().shape(), (6, 6));
        assert_eq!(l.b_bar.as_ref().unwrap().shape(), (5, 6));
        assert!(gap(&res) <= 1e-12);
        // other strategies refuse mixed ranks
        assert!(matches!(
            aggregate_fedit(&updates, &w),
            Err(Error::MixedRanks(_))
        ));
        assert!(matches!(
            aggregate_flora_na(&updates, &w, &SolverConfig::default()),
            Err(Error::MixedRanks(_))
        ));
    }

    #[test]
    fn fedex_examples() {
        let r = aggregate_fedex(&hand_instance(), &ClientWeights::uniform(2)).unwrap();
        let l = &r.layers["l"];
        assert_eq!(
            l.residual.as_ref().unwrap(),
            &DenseMatrix::from_rows(&[[-0.25, 0.25], [-0.25, 0.25]])
        );
        assert!(gap(&r) <= 1e-12);

        let p = random_pair(3, 3, 2, 8);
        let same = vec![
            update("a", vec![("l", p.clone())]),
            update("b", vec![("l", p)]),
        ];
        let r = aggregate_fedex(&same, &ClientWeights::uniform(2)).unwrap();
        assert!(r.layers["l"].residual.as_ref().unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn flora_na_examples() {
        let p = random_pair(4, 3, 2, 9);
        let single = vec![update("a", vec![("l", p)])];
        let r = aggregate_flora_na(
            &single,
            &ClientWeights::uniform(1),
            &SolverConfig::default(),
        )
        .unwrap();
        let c = r.layers["l"].coefficients.as_ref().unwrap();
        assert_eq!((c.p.as_slice(), c.q.as_slice()), (&[1.0][..], &[1.0][..]));
        assert!(c.objective < 1e-24);

        // shared left factor: B_u = β_u·b, β = (1, 2)
        let cfg = SolverConfig {
            steps: 2000,
            ..SolverConfig::default()
        };
        let r = aggregate_flora_na(&hand_instance(), &ClientWeights::uniform(2), &cfg).unwrap();
        let l = &r.layers["l"];
        assert!(l.coefficients.as_ref().unwrap().objective <= 1e-6);
        assert!(gap(&r) <= 1e-3);
    }

    #[test]
    fn flora_na_never_worse_than_fedit() {
        for seed in 0..5 {
            let updates: Vec<_> = (0..4)
                .map(|i| {
                    update(
                        &format!("c{i}"),
                        vec![("l", random_pair(6, 5, 2, seed * 10 + i))],
                    )
                })
                .collect();
            let w = ClientWeights::uniform(4);
            let na = gap(&aggregate_flora_na(&updates, &w, &SolverConfig::default()).unwrap());
            let fedit = gap(&aggregate_fedit(&updates, &w).unwrap());
            assert!(na <= fedit + 1e-12, "{na} > {fedit}");
        }
    }

    #[test]
    fn identical_clients_are_exact_for_every_strategy() {
        let p = random_pair(4, 5, 2, 77);
        let updates: Vec<_> = (0..3)
            .map(|i| update(&format!("c{i}"), vec![("l", p.clone())]))
            .collect();
        let w = ClientWeights::uniform(3);
        let frozen: BTreeMap<String, DenseMatrix> = [("l".to_string(), p.a().clone())].into();
        let ctx = AggregationContext {
            frozen_a: Some(&frozen),
            solver: SolverConfig::default(),
        };
        let target = lora_delta(&p);
        for s in Strategy::ALL {
            let r = aggregate(s, &updates, &w, &ctx).unwrap();
            let l = &r.layers["l"];
            let deltas = match l.approx_delta() {
                Some(d) => vec![d],
                None => l.client_deltas().unwrap(),
            };
            for d in deltas {
                assert!(d.distance(&target).unwrap() <= 1e-12, "{s}");
            }
        }
    }

    #[test]
    fn validation_errors() {
        let w = ClientWeights::uniform(1);
        assert!(matches!(aggregate_fedit(&[], &w), Err(Error::EmptyUpdates)));
        let mut u = hand_instance();
        u[1].adapters
            .insert("extra".into(), random_pair(2, 2, 1, 1));
        assert!(aggregate_fedit(&u, &ClientWeights::uniform(2)).is_err());
        let u = vec![
            update("a", vec![("l", random_pair(2, 3, 1, 1))]),
            update("b", vec![("l", random_pair(3, 3, 1, 2))]),
        ];
        assert!(matches!(
            aggregate_ideal(&u, &ClientWeights::uniform(2)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(ClientWeights::new(vec![0.5, 0.6]).is_err());
        assert!(ClientWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn sample_count_weights() {
        let mut u = hand_instance();
        u[0].sample_count = 30;
        u[1].sample_count = 10;
        let w = ClientWeights::from_sample_counts(&u).unwrap();
        assert_eq!(w.as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.name())
            );
        }
        assert_eq!("flora-na".parse::<Strategy>().unwrap(), Strategy::FloraNa);
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn json_document() {
        let r = aggregate_fedex(&hand_instance(), &ClientWeights::uniform(2)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["strategy"], "FEDEX");
        assert_eq!(v["layers"]["l"]["has_residual"], true);
        let dump = v["layers"]["l"]["residual"].as_str().unwrap();
        assert_eq!(
            DenseMatrix::from_text(dump).unwrap(),
            r.layers["l"].residual.clone().unwrap()
        );
        let r = aggregate_fedit(&hand_instance(), &ClientWeights::uniform(2)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["layers"]["l"]["has_residual"], false);
        assert!(v["layers"]["l"]["coefficients"].is_null());
    }
}
