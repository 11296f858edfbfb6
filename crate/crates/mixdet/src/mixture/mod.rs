//! Probability computations for the box mixture model: Cauchy and Gaussian
//! log-densities, the factorized box density, mixture log-likelihoods,
//! component sampling and the underflow diagnostics.

mod precision;

pub use precision::{round_to_half, round_to_precision, Precision};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{ltrb_to_xywh, BBox};
use crate::real::Real;

/// Density family used for the per-coordinate box distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Cauchy,
    Gaussian,
}

/// Coordinate space in which component locations are expressed. With the
/// ltrb transform disabled the model learns raw (cx, cy, w, h) coordinates
/// and likelihoods are evaluated in that space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSpace {
    Ltrb,
    Xywh,
}

impl BoxSpace {
    /// Project a ground-truth ltrb box into this coordinate space.
    pub fn project<R: Real>(&self, b: &BBox<R>) -> [R; 4] {
        match self {
            BoxSpace::Ltrb => b.coords(),
            BoxSpace::Xywh => {
                let (cx, cy, w, h) = ltrb_to_xywh(b.l, b.t, b.r, b.b);
                [cx, cy, w, h]
            }
        }
    }
}

/// Flattened K-component mixture: per-component location mu (4 coords),
/// positive scale gamma (4 coords), class probabilities over C foreground
/// classes plus background (last channel), and a global mixing vector pi.
#[derive(Clone, Debug)]
pub struct MixtureModel<R = f64> {
    pub mu: Vec<[R; 4]>,
    pub gamma: Vec<[R; 4]>,
    /// Row-major K x (C+1), background last.
    pub p: Vec<Vec<R>>,
    pub pi: Vec<R>,
    pub space: BoxSpace,
}

impl<R: Real> MixtureModel<R> {
    pub fn num_components(&self) -> usize {
        self.pi.len()
    }

    pub fn num_classes(&self) -> usize {
        self.p[0].len() - 1
    }

    pub fn background_class(&self) -> usize {
        self.num_classes()
    }

    /// Component location as an ltrb box regardless of the model space.
    pub fn component_box(&self, k: usize) -> BBox<R> {
        let m = self.mu[k];
        match self.space {
            BoxSpace::Ltrb => BBox::new(m[0], m[1], m[2], m[3]),
            BoxSpace::Xywh => {
                let (l, t, r, b) = crate::geometry::xywh_to_ltrb(m[0], m[1], m[2], m[3]);
                BBox::new(l, t, r, b)
            }
        }
    }

    pub fn validate(&self) {
        let k = self.num_components();
        assert!(k > 0 && self.mu.len() == k && self.gamma.len() == k && self.p.len() == k);
        let tol = R::from_f64_lossy(1e-9);
        for g in &self.gamma {
            assert!(g.iter().all(|&v| v > R::zero()), "gamma must be positive");
        }
        for row in &self.p {
            let s: R = row.iter().copied().sum();
            assert!((s - R::one()).abs() < tol, "class probabilities must sum to 1");
            assert!(row.iter().all(|&v| v >= R::zero() && v <= R::one()));
        }
        let s: R = self.pi.iter().copied().sum();
        assert!((s - R::one()).abs() < tol, "pi must sum to 1");
    }
}

/// log of the Cauchy density gamma / (pi ((x - mu)^2 + gamma^2)).
/// Finite for all finite inputs; this is the heavy-tail property the model
/// relies on to keep likelihoods representable.
pub fn cauchy_logpdf<R: Real>(x: R, mu: R, gamma: R) -> R {
    assert!(gamma > R::zero(), "cauchy scale must be positive");
    let d = x - mu;
    gamma.ln() - R::pi().ln() - (d * d + gamma * gamma).ln()
}

/// log of the Gaussian density with mean mu and standard deviation sigma.
pub fn gaussian_logpdf<R: Real>(x: R, mu: R, sigma: R) -> R {
    assert!(sigma > R::zero(), "gaussian scale must be positive");
    let d = (x - mu) / sigma;
    -(R::two() * R::pi()).ln() * R::half() - sigma.ln() - d * d * R::half()
}

pub fn coord_logpdf<R: Real>(kind: DensityKind, x: R, mu: R, scale: R) -> R {
    match kind {
        DensityKind::Cauchy => cauchy_logpdf(x, mu, scale),
        DensityKind::Gaussian => gaussian_logpdf(x, mu, scale),
    }
}

/// Factorized log-density of the four box coordinates.
pub fn box_logpdf<R: Real>(kind: DensityKind, coords: [R; 4], mu: &[R; 4], gamma: &[R; 4]) -> R {
    (0..4).map(|c| coord_logpdf(kind, coords[c], mu[c], gamma[c])).sum()
}

/// Numerically stable log(sum(exp(a))) with max subtraction.
pub fn log_sum_exp<R: Real>(a: &[R]) -> R {
    let m = a.iter().copied().fold(R::neg_infinity(), R::max);
    if !m.is_finite() {
        return m;
    }
    let s: R = a.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// log sum_k pi_k F(box; mu_k, gamma_k): the coordinate-only mixture
/// likelihood of one ground-truth box.
pub fn mixture_box_loglik<R: Real>(kind: DensityKind, coords: [R; 4], model: &MixtureModel<R>) -> R {
    let terms: Vec<R> = (0..model.num_components())
        .map(|k| model.pi[k].ln() + box_logpdf(kind, coords, &model.mu[k], &model.gamma[k]))
        .collect();
    log_sum_exp(&terms)
}

/// log sum_k pi_k F(box; mu_k, gamma_k) p_k[class]: the complete mixture
/// likelihood including the categorical class factor.
pub fn mixture_full_loglik<R: Real>(
    kind: DensityKind,
    coords: [R; 4],
    class_id: usize,
    model: &MixtureModel<R>,
) -> R {
    assert!(class_id < model.p[0].len(), "class_id out of range");
    let terms: Vec<R> = (0..model.num_components())
        .map(|k| {
            model.pi[k].ln()
                + box_logpdf(kind, coords, &model.mu[k], &model.gamma[k])
                + model.p[k][class_id].ln()
        })
        .collect();
    log_sum_exp(&terms)
}

/// Draw n i.i.d. categorical component indices from pi.
pub fn sample_components<R: Real>(pi: &[R], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = R::from_f64_lossy(rng.random::<f64>());
        let mut acc = R::zero();
        let mut chosen = pi.len() - 1;
        for (k, &w) in pi.iter().enumerate() {
            acc = acc + w;
            if u < acc {
                chosen = k;
                break;
            }
        }
        out.push(chosen);
    }
    out
}

/// Per-component density of one box: the product of the four per-coordinate
/// densities (not logs), rounded into the selected precision.
pub fn component_density_at_precision<R: Real>(
    kind: DensityKind,
    coords: [R; 4],
    mu: &[R; 4],
    gamma: &[R; 4],
    precision: Precision,
) -> f64 {
    let mut product = 1.0f64;
    for c in 0..4 {
        product *= coord_logpdf(kind, coords[c], mu[c], gamma[c]).to_f64_lossy().exp();
    }
    round_to_precision(product, precision)
}

/// Fraction of (box, component) pairs whose density rounds to exactly zero
/// at the selected precision. Gaussian evaluation reuses gamma as sigma.
pub fn underflow_ratio<R: Real>(
    boxes: &[BBox<R>],
    model: &MixtureModel<R>,
    kind: DensityKind,
    precision: Precision,
) -> f64 {
    let total = boxes.len() * model.num_components();
    if total == 0 {
        return 0.0;
    }
    let mut underflowed = 0usize;
    for b in boxes {
        let coords = model.space.project(b);
        for k in 0..model.num_components() {
            let d = component_density_at_precision(kind, coords, &model.mu[k], &model.gamma[k], precision);
            if d == 0.0 {
                underflowed += 1;
            }
        }
    }
    underflowed as f64 / total as f64
}

/// Random valid model for tests across the crate.
#[cfg(test)]
pub(crate) fn random_model(
    rng: &mut rand_chacha::ChaCha8Rng,
    k: usize,
    c: usize,
) -> MixtureModel {
    let mu: Vec<[f64; 4]> = (0..k)
            .map(|_| {
                let l = rng.random_range(0.0..40.0);
                let t = rng.random_range(0.0..40.0);
                [l, t, l + rng.random_range(0.5..20.0), t + rng.random_range(0.5..20.0)]
            })
            .collect();
        let gamma: Vec<[f64; 4]> =
            (0..k).map(|_| std::array::from_fn(|_| rng.random_range(0.5..8.0))).collect();
        let p: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..=c).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
    let raw_pi: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw_pi.iter().sum();
    let pi = raw_pi.into_iter().map(|v| v / s).collect();
    MixtureModel { mu, gamma, p, pi, space: BoxSpace::Ltrb }
}
