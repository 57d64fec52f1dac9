//! Training objectives over point clouds: Chamfer distance, extended Chamfer
//! distance, density-aware Chamfer distance, and the composite used for
//! training (density-aware term plus a neighbor-distance uniformity term).
//!
//! Every objective returns an analytic gradient with respect to the
//! reconstructed cloud. Nearest-neighbor assignments and hit counts are
//! treated as locally constant, which matches central finite differences
//! everywhere except on the measure-zero assignment boundaries.
//!
//! Both clouds must live in the same frame; callers pass raw coordinate
//! slices (`PointCloud::points()`).

use crate::error::{Error, Result};
use crate::neighbors::{knn, DEFAULT_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Cd,
    Ecd,
    Dacd,
    DacdKnn,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(ObjectiveKind::Cd),
            "ecd" => Ok(ObjectiveKind::Ecd),
            "dacd" => Ok(ObjectiveKind::Dacd),
            "dacd_knn" => Ok(ObjectiveKind::DacdKnn),
            other => Err(Error::InvalidConfig(format!(
                "unknown objective kind {other:?} (expected cd|ecd|dacd|dacd_knn)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Cd => "cd",
            ObjectiveKind::Ecd => "ecd",
            ObjectiveKind::Dacd => "dacd",
            ObjectiveKind::DacdKnn => "dacd_knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Weight of the uniformity term in the composite objective.
    pub alpha: f64,
    /// Neighborhood size of the uniformity term; at least 2 because the term
    /// compares neighbor pairs.
    pub k: usize,
    /// Sharpness of the density-aware exponential.
    pub dacd_temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::DacdKnn,
            alpha: 0.1,
            k: 4,
            dacd_temperature: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("objective alpha must be >= 0".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig(
                "objective k must be >= 2 (the uniformity term compares neighbor pairs)".into(),
            ));
        }
        if !(self.dacd_temperature > 0.0) || !self.dacd_temperature.is_finite() {
            return Err(Error::InvalidConfig(
                "objective temperature must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    /// Per-point gradient with respect to the reconstructed cloud.
    pub gradient: Option<Vec<[f64; 3]>>,
}

impl LossValue {
    pub fn grad(&self) -> &[[f64; 3]] {
        self.gradient.as_deref().unwrap_or(&[])
    }
}

fn check_nonempty(pr: &[[f64; 3]], pgt: &[[f64; 3]]) -> Result<()> {
    if pr.is_empty() || pgt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Nearest neighbor of every `from` point among `to`: (index, rooted distance).
fn nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Result<(Vec<u32>, Vec<f64>)> {
    let res = knn(from, to, 1, false, DEFAULT_CHUNK)?;
    Ok((res.indices, res.distances))
}

/// Mean squared nearest-neighbor distance, both directions summed.
pub fn chamfer(pr: &[[f64; 3]], pgt: &[[f64; 3]]) -> Result<LossValue> {
    check_nonempty(pr, pgt)?;
    let (fwd_idx, fwd_d) = nearest(pr, pgt)?;
    let (bwd_idx, bwd_d) = nearest(pgt, pr)?;
    let nr = pr.len() as f64;
    let ng = pgt.len() as f64;

    let value = fwd_d.iter().map(|d| d * d).sum::<f64>() / nr
        + bwd_d.iter().map(|d| d * d).sum::<f64>() / ng;

    let mut grad = vec![[0.0; 3]; pr.len()];
    for (i, (&j, _)) in fwd_idx.iter().zip(&fwd_d).enumerate() {
        let g = &pgt[j as usize];
        for a in 0..3 {
            grad[i][a] += 2.0 * (pr[i][a] - g[a]) / nr;
        }
    }
    for (j, &i) in bwd_idx.iter().enumerate() {
        let g = &pgt[j];
        let i = i as usize;
        for a in 0..3 {
            grad[i][a] += 2.0 * (pr[i][a] - g[a]) / ng;
        }
    }
    Ok(LossValue {
        value,
        gradient: Some(grad),
    })
}

/// Max of the two directional mean unsquared nearest-neighbor distances.
pub fn extended_chamfer(pr: &[[f64; 3]], pgt: &[[f64; 3]]) -> Result<LossValue> {
    check_nonempty(pr, pgt)?;
    let (fwd_idx, fwd_d) = nearest(pr, pgt)?;
    let (bwd_idx, bwd_d) = nearest(pgt, pr)?;
    let nr = pr.len() as f64;
    let ng = pgt.len() as f64;
    let m_fwd = fwd_d.iter().sum::<f64>() / nr;
    let m_bwd = bwd_d.iter().sum::<f64>() / ng;

    let mut grad = vec![[0.0; 3]; pr.len()];
    // subgradient of max: the larger branch; ties take the forward branch
    if m_fwd >= m_bwd {
        for i in 0..pr.len() {
            let d = fwd_d[i];
            if d <= f64::EPSILON {
                continue;
            }
            let g = &pgt[fwd_idx[i] as usize];
            for a in 0..3 {
                grad[i][a] += (pr[i][a] - g[a]) / (d * nr);
            }
        }
    } else {
        for (j, &i) in bwd_idx.iter().enumerate() {
            let d = bwd_d[j];
            if d <= f64::EPSILON {
                continue;
            }
            let i = i as usize;
            for a in 0..3 {
                grad[i][a] += (pr[i][a] - pgt[j][a]) / (d * ng);
            }
        }
    }
    Ok(LossValue {
        value: m_fwd.max(m_bwd),
        gradient: Some(grad),
    })
}

/// Density-aware Chamfer distance: the symmetric mean of
/// `1 - (1/n) exp(-t d²)` terms, where `n` counts how many points of the
/// query cloud share the matched target, discounting many-to-one matches.
pub fn dacd(pr: &[[f64; 3]], pgt: &[[f64; 3]], cfg: &ObjectiveConfig) -> Result<LossValue> {
    check_nonempty(pr, pgt)?;
    cfg.validate()?;
    let t = cfg.dacd_temperature;
    let (fwd_idx, fwd_d) = nearest(pr, pgt)?;
    let (bwd_idx, bwd_d) = nearest(pgt, pr)?;
    let nr = pr.len() as f64;
    let ng = pgt.len() as f64;

    let mut fwd_hits = vec![0u32; pgt.len()];
    for &j in &fwd_idx {
        fwd_hits[j as usize] += 1;
    }
    let mut bwd_hits = vec![0u32; pr.len()];
    for &i in &bwd_idx {
        bwd_hits[i as usize] += 1;
    }

    let mut grad = vec![[0.0; 3]; pr.len()];
    let mut term_fwd = 0.0;
    for i in 0..pr.len() {
        let j = fwd_idx[i] as usize;
        let n = fwd_hits[j] as f64;
        let d2 = fwd_d[i] * fwd_d[i];
        let e = (-t * d2).exp();
        term_fwd += 1.0 - e / n;
        // 0.5/nr * (1/n) * 2t * e * (pr_i - target); halves cancel
        let c = t * e / (n * nr);
        for a in 0..3 {
            grad[i][a] += c * (pr[i][a] - pgt[j][a]);
        }
    }
    let mut term_bwd = 0.0;
    for j in 0..pgt.len() {
        let i = bwd_idx[j] as usize;
        let n = bwd_hits[i] as f64;
        let d2 = bwd_d[j] * bwd_d[j];
        let e = (-t * d2).exp();
        term_bwd += 1.0 - e / n;
        let c = t * e / (n * ng);
        for a in 0..3 {
            grad[i][a] += c * (pr[i][a] - pgt[j][a]);
        }
    }
    Ok(LossValue {
        value: 0.5 * (term_fwd / nr + term_bwd / ng),
        gradient: Some(grad),
    })
}

/// Per-point pair sums `Σ_{j<l} |d(i,j) - d(i,l)|` over each point's `k`
/// nearest neighbors (self excluded), unnormalized.
pub fn uniformity_contributions(pr: &[[f64; 3]], k: usize) -> Result<Vec<f64>> {
    if pr.len() <= k {
        return Err(Error::CloudTooSmall {
            needed: k + 1,
            have: pr.len(),
        });
    }
    let res = knn(pr, pr, k, true, DEFAULT_CHUNK)?;
    let mut out = vec![0.0; pr.len()];
    for i in 0..pr.len() {
        let d = res.row_distances(i);
        let mut acc = 0.0;
        for j in 0..k {
            for l in (j + 1)..k {
                acc += (d[j] - d[l]).abs();
            }
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Uniformity regularizer: `(1/S) Σ_i Σ_{j<l} |d(i,j) - d(i,l)|`, zero when
/// every point's k neighbor distances are equal. Pair sums are not averaged
/// over the pair count.
pub fn uniformity_term(pr: &[[f64; 3]], k: usize) -> Result<LossValue> {
    if pr.len() <= k {
        return Err(Error::CloudTooSmall {
            needed: k + 1,
            have: pr.len(),
        });
    }
    let res = knn(pr, pr, k, true, DEFAULT_CHUNK)?;
    let s = pr.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; pr.len()];

    for i in 0..pr.len() {
        let idx = res.row_indices(i);
        let dist = res.row_distances(i);
        for j in 0..k {
            for l in (j + 1)..k {
                let diff = dist[j] - dist[l];
                value += diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    continue;
                };
                // d|d_ij - d_il| = sign * (unit(i,j) dotted with dp_i - dp_j
                //                          - unit(i,l) with dp_i - dp_l)
                let nj = idx[j] as usize;
                let nl = idx[l] as usize;
                if dist[j] > f64::EPSILON {
                    for a in 0..3 {
                        let u = (pr[i][a] - pr[nj][a]) / dist[j];
                        grad[i][a] += sign * u / s;
                        grad[nj][a] -= sign * u / s;
                    }
                }
                if dist[l] > f64::EPSILON {
                    for a in 0..3 {
                        let u = (pr[i][a] - pr[nl][a]) / dist[l];
                        grad[i][a] -= sign * u / s;
                        grad[nl][a] += sign * u / s;
                    }
                }
            }
        }
    }
    Ok(LossValue {
        value: value / s,
        gradient: Some(grad),
    })
}

/// The configured training objective. For the composite kind this is
/// `dacd + alpha * uniformity_term`.
pub fn objective(pr: &[[f64; 3]], pgt: &[[f64; 3]], cfg: &ObjectiveConfig) -> Result<LossValue> {
    cfg.validate()?;
    match cfg.kind {
        ObjectiveKind::Cd => chamfer(pr, pgt),
        ObjectiveKind::Ecd => extended_chamfer(pr, pgt),
        ObjectiveKind::Dacd => dacd(pr, pgt, cfg),
        ObjectiveKind::DacdKnn => {
            let base = dacd(pr, pgt, cfg)?;
            let uni = uniformity_term(pr, cfg.k)?;
            let mut grad = base.gradient.unwrap();
            for (g, u) in grad.iter_mut().zip(uni.grad()) {
                for a in 0..3 {
                    g[a] += cfg.alpha * u[a];
                }
            }
            Ok(LossValue {
                value: base.value + cfg.alpha * uni.value,
                gradient: Some(grad),
            })
        }
    }
}
