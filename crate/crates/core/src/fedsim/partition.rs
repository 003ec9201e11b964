//! Dirichlet label-skew partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Sample indices per client, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    /// Per-client count of each key value.
    pub fn histograms(&self, keys: &[usize]) -> Vec<Vec<usize>> {
        let classes = keys.iter().copied().max().map_or(0, |m| m + 1);
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                for &i in idx {
                    h[keys[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every draw underflowed: all mass on one client
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    p
}

/// Splits samples among `clients` so that, for each key value (class or
/// cluster id), the share each client receives follows `Dir(alpha·1)`.
/// Clients left with fewer than `min_samples` take samples from the largest
/// client until every client has enough.
pub fn dirichlet_partition(
    keys: &[usize],
    clients: usize,
    alpha: f64,
    min_samples: usize,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidSpec("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "dirichlet alpha must be finite and > 0, got {alpha}"
        )));
    }
    let min_samples = min_samples.max(1);
    if keys.len() < clients * min_samples {
        return Err(Error::InsufficientSamples(format!(
            "{} samples cannot give {clients} clients {min_samples} each",
            keys.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Partition, &[clients as u64]);
    let classes = keys.iter().copied().max().map_or(0, |m| m + 1);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..keys.len()).filter(|&i| keys[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let props = dirichlet(alpha, clients, &mut rng);
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (u, p) in props.iter().enumerate() {
            cum += p;
            let end = if u + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[u].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(needy) = (0..clients).find(|&u| parts[u].len() < min_samples) {
        let donor = (0..clients)
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("clients ≥ 1");
        let moved = parts[donor]
            .pop()
            .expect("donor holds more than min_samples");
        parts[needy].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Partition { clients: parts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn conservation_and_disjointness() {
        let k = keys(500, 3);
        for alpha in [0.05, 0.5, 10.0] {
            let p = dirichlet_partition(&k, 7, alpha, 2, 11).unwrap();
            assert_eq!(p.total(), 500);
            let mut all: Vec<usize> = p.clients.concat();
            all.sort_unstable();
            assert_eq!(all, (0..500).collect::<Vec<_>>());
            assert!(p.clients.iter().all(|c| c.len() >= 2));
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let p = dirichlet_partition(&keys(10, 2), 1, 0.5, 1, 3).unwrap();
        assert_eq!(p.clients[0], (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn near_iid_for_huge_alpha() {
        let k = keys(4000, 2);
        for seed in 0..3 {
            let p = dirichlet_partition(&k, 5, 1e6, 1, seed).unwrap();
            for h in p.histograms(&k) {
                let n: usize = h.iter().sum();
                for &c in &h {
                    assert!((c as f64 / n as f64 - 0.5).abs() <= 0.05);
                }
            }
        }
    }

    #[test]
    fn skewed_for_small_alpha() {
        let k = keys(1000, 2);
        for seed in 0..5 {
            let p = dirichlet_partition(&k, 10, 0.1, 1, seed).unwrap();
            let skewed = p.histograms(&k).iter().any(|h| {
                let n: usize = h.iter().sum();
                h.iter().any(|&c| c as f64 > 0.6 * n as f64)
            });
            assert!(skewed, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_and_errors() {
        let k = keys(100, 4);
        assert_eq!(
            dirichlet_partition(&k, 4, 0.3, 1, 5).unwrap(),
            dirichlet_partition(&k, 4, 0.3, 1, 5).unwrap()
        );
        assert!(matches!(
            dirichlet_partition(&k, 60, 0.3, 2, 5),
            Err(Error::InsufficientSamples(_))
        ));
        assert!(dirichlet_partition(&k, 4, 0.0, 1, 5).is_err());
        assert!(dirichlet_partition(&k, 0, 0.3, 1, 5).is_err());
    }
}
