//! Non-uniform per-tensor weight quantization via interquartile-range
//! clustering.
//!
//! Each weight tensor is split into three clusters by the IQR outlier
//! fences (below `Q1 − 1.5·IQR`, inside the fences, above `Q3 + 1.5·IQR`).
//! The `2^bits` code budget is divided across clusters proportionally to
//! `range × weight count` (largest-remainder rounding, at least one code
//! per nonempty cluster), and each cluster is quantized uniformly with its
//! own code budget. Reconstruction looks a value's cluster up by the fence
//! intervals, so the scheme stays per-tensor with O(1) storage per layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quartiles of a value list: for an even count `2n`, `Q1` is the median of
/// the `n` smallest and `Q3` the median of the `n` largest values; for an
/// odd count the middle element is excluded from both halves. `Q2` is the
/// ordinary median.
pub fn quartiles(values: &[f32]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.len() == 1 {
        let v = values[0] as f64;
        return Ok((v, v, v));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let n = sorted.len();
    let half = n / 2;
    let (lo_half, hi_half) = if n % 2 == 0 {
        (&sorted[..half], &sorted[half..])
    } else {
        (&sorted[..half], &sorted[half + 1..])
    };
    Ok((median(lo_half), median(&sorted), median(hi_half)))
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Summary of one IQR cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    /// Smallest member value (0 when empty).
    pub lo: f32,
    /// Largest member value (0 when empty).
    pub hi: f32,
    /// Number of member weights.
    pub count: usize,
    /// Range width over member values; 0 for empty or singleton clusters.
    pub range: f64,
    /// Allocated code budget; 0 until allocation and for empty clusters.
    pub steps: u32,
}

/// The three IQR clusters of a weight tensor plus the quartile bookkeeping
/// behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub clusters: [ClusterInfo; 3],
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Outlier fences: values below `fences.0` fall in C1, above `fences.1`
    /// in C3.
    pub fences: (f64, f64),
}

impl ClusterPlan {
    /// Cluster index of a value by fence lookup.
    pub fn cluster_of(&self, x: f32) -> usize {
        let v = x as f64;
        if v < self.fences.0 {
            0
        } else if v > self.fences.1 {
            2
        } else {
            1
        }
    }

    pub fn total_steps(&self) -> u32 {
        self.clusters.iter().map(|c| c.steps).sum()
    }
}

/// Partition a weight tensor into the three IQR clusters. Step budgets are
/// left unallocated.
pub fn iqr_clusters(weights: &Tensor) -> Result<ClusterPlan> {
    if weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (q1, q2, q3) = quartiles(weights.data())?;
    let iqr = q3 - q1;
    let fences = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);

    let mut infos = [ClusterInfo {
        lo: 0.0,
        hi: 0.0,
        count: 0,
        range: 0.0,
        steps: 0,
    }; 3];
    let mut los = [f32::INFINITY; 3];
    let mut his = [f32::NEG_INFINITY; 3];
    for &x in weights.data() {
        let c = if (x as f64) < fences.0 {
            0
        } else if (x as f64) > fences.1 {
            2
        } else {
            1
        };
        infos[c].count += 1;
        los[c] = los[c].min(x);
        his[c] = his[c].max(x);
    }
    for c in 0..3 {
        if infos[c].count > 0 {
            infos[c].lo = los[c];
            infos[c].hi = his[c];
            if infos[c].count > 1 {
                infos[c].range = his[c] as f64 - los[c] as f64;
            }
        }
    }
    Ok(ClusterPlan {
        clusters: infos,
        q1,
        q2,
        q3,
        iqr,
        fences,
    })
}

/// Divide the `2^bits` code budget across clusters proportionally to
/// `range × count`, rounded by largest remainder, then repaired so every
/// nonempty cluster keeps at least one code and the budget is met exactly.
pub fn allocate_steps(plan: &ClusterPlan, bits: u8) -> Result<ClusterPlan> {
    let budget: u32 = 1u32 << bits;
    let nonempty: Vec<usize> = (0..3).filter(|&c| plan.clusters[c].count > 0).collect();
    if (budget as usize) < nonempty.len() {
        return Err(Error::BudgetTooSmall {
            budget,
            clusters: nonempty.len(),
        });
    }

    let products: Vec<f64> = plan
        .clusters
        .iter()
        .map(|c| c.range * c.count as f64)
        .collect();
    let total: f64 = nonempty.iter().map(|&c| products[c]).sum();
    let ideal: Vec<f64> = (0..3)
        .map(|c| {
            if plan.clusters[c].count == 0 {
                0.0
            } else if total > 0.0 {
                budget as f64 * products[c] / total
            } else {
                // all products zero (constant clusters): share equally
                budget as f64 / nonempty.len() as f64
            }
        })
        .collect();

    let mut steps: Vec<u32> = ideal.iter().map(|&s| s.floor() as u32).collect();
    let mut assigned: u32 = steps.iter().sum();

    // largest remainder first, ties broken by lower cluster index
    let mut order: Vec<usize> = nonempty.clone();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < budget {
        steps[order[i % order.len()]] += 1;
        assigned += 1;
        i += 1;
    }

    // min-1 repair: move codes from the largest cluster to empty-handed ones
    for c in nonempty.iter().copied() {
        if steps[c] == 0 {
            let donor = (0..3)
                .filter(|&d| steps[d] >= 2)
                .max_by(|&a, &b| steps[a].cmp(&steps[b]).then(b.cmp(&a)))
                .expect("budget >= nonempty count guarantees a donor");
            steps[donor] -= 1;
            steps[c] = 1;
        }
    }

    let mut out = plan.clone();
    for c in 0..3 {
        out.clusters[c].steps = steps[c];
    }
    debug_assert_eq!(out.total_steps(), budget);
    Ok(out)
}

/// Uniform code grid of one cluster.
///
/// For `steps >= 2` the grid is `(code − zero_point) · scale` over codes
/// `[0, steps)`; a cluster containing 0 lands zero exactly on the grid. A
/// single-code cluster represents 0 when it straddles zero and the range
/// midpoint otherwise (exact for singletons).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterGrid {
    pub lo: f64,
    pub hi: f64,
    pub steps: u32,
    pub scale: f64,
    pub zero_point: i64,
}

impl ClusterGrid {
    fn from_range(lo: f64, hi: f64, steps: u32) -> Self {
        if steps <= 1 || hi == lo {
            return Self {
                lo,
                hi,
                steps,
                scale: 0.0,
                zero_point: 0,
            };
        }
        let span = hi - lo;
        let scale = span / (steps as f64 - 1.0);
        let zero_point = (-lo * (steps as f64 - 1.0) / span).round() as i64;
        Self {
            lo,
            hi,
            steps,
            scale,
            zero_point,
        }
    }

    pub fn reconstruct(&self, x: f32) -> f32 {
        if self.steps == 0 {
            return x;
        }
        if self.scale == 0.0 {
            return if self.lo <= 0.0 && self.hi >= 0.0 {
                0.0
            } else {
                (0.5 * (self.lo + self.hi)) as f32
            };
        }
        let q = (x as f64 / self.scale).round() + self.zero_point as f64;
        let q = q.clamp(0.0, self.steps as f64 - 1.0);
        ((q - self.zero_point as f64) * self.scale) as f32
    }
}

/// Serializable description of a non-uniform weight quantizer: quartile
/// fences for cluster lookup plus one uniform grid per nonempty cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonUniformCodebook {
    pub bits: u8,
    pub quartiles: [f64; 3],
    pub iqr: f64,
    pub fences: [f64; 2],
    pub clusters: [Option<ClusterGrid>; 3],
}

impl NonUniformCodebook {
    /// Reconstruct (fake-quantize) one value: fence lookup, then the
    /// cluster's grid.
    pub fn reconstruct(&self, x: f32) -> f32 {
        let c = if (x as f64) < self.fences[0] {
            0
        } else if (x as f64) > self.fences[1] {
            2
        } else {
            1
        };
        match &self.clusters[c] {
            Some(grid) => grid.reconstruct(x),
            // fences put every value in a nonempty cluster at build time
            None => x,
        }
    }

    pub fn apply(&self, weights: &Tensor) -> Tensor {
        weights.map(|x| self.reconstruct(x))
    }
}

/// Cluster, allocate and quantize a weight tensor, returning the codebook
/// and the fake-quantized tensor.
pub fn nonuniform_quantize(weights: &Tensor, bits: u8) -> Result<(NonUniformCodebook, Tensor)> {
    let plan = allocate_steps(&iqr_clusters(weights)?, bits)?;
    let clusters: [Option<ClusterGrid>; 3] = std::array::from_fn(|c| {
        let info = &plan.clusters[c];
        if info.count == 0 {
            None
        } else {
            let lo = info.lo as f64;
            let hi = info.hi as f64;
            // zero-inclusion only for the cluster that contains 0
            let (lo, hi) = if lo <= 0.0 && hi >= 0.0 {
                (lo.min(0.0), hi.max(0.0))
            } else {
                (lo, hi)
            };
            Some(ClusterGrid::from_range(lo, hi, info.steps))
        }
    });
    let codebook = NonUniformCodebook {
        bits,
        quartiles: [plan.q1, plan.q2, plan.q3],
        iqr: plan.iqr,
        fences: [plan.fences.0, plan.fences.1],
        clusters,
    };
    let out = codebook.apply(weights);
    Ok((codebook, out))
}
