//! Toy target distributions `ℙ₀`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture; the component index is the class label.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.stds.len() != k || self.weights.len() != k {
            return Err(Error::invalid(
                "mixture",
                "means, stds and weights need equal nonzero length",
            ));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid(
                "mixture",
                "all means need the same nonzero dimension",
            ));
        }
        if self.stds.iter().any(|&s| !(s >= 0.0)) || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid(
                "mixture",
                "stds and weights must be non-negative",
            ));
        }
        if !(self.weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::invalid("mixture", "weights sum to zero"));
        }
        Ok(())
    }

    /// Component mean `Σ w_k μ_k` and total variance trace.
    pub fn moments(&self) -> (Vec<f64>, f64) {
        let d = self.means[0].len();
        let z: f64 = self.weights.iter().sum();
        let mut mu = vec![0.0; d];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (a, b) in mu.iter_mut().zip(m) {
                *a += w / z * b;
            }
        }
        let mut trace = 0.0;
        for ((m, w), s) in self.means.iter().zip(&self.weights).zip(&self.stds) {
            trace += w / z * (math::sq_dist(m, &mu) + d as f64 * s * s);
        }
        (mu, trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum Dataset {
    Mixture(GaussianMixture),
    /// Uniform on the dark squares of a `cells × cells` board over
    /// `[−half_width, half_width]²`.
    Checkerboard {
        cells: usize,
        half_width: f64,
    },
    /// Uniform over a fixed point set.
    Points {
        points: Tensor,
    },
}

impl Dataset {
    /// Eight modes evenly spaced on a circle.
    pub fn eight_gaussians(radius: f64, std: f64) -> Self {
        let means = (0..8)
            .map(|k| {
                let a = core::f64::consts::PI * k as f64 / 4.0;
                vec![radius * math::cos(a), radius * math::sin(a)]
            })
            .collect();
        Dataset::Mixture(GaussianMixture {
            means,
            stds: vec![std; 8],
            weights: vec![1.0; 8],
        })
    }

    /// Two modes at `±offset` along the first axis with weights `w`, `1 − w`.
    pub fn two_gaussians(offset: f64, std: f64, weight: f64) -> Self {
        Dataset::Mixture(GaussianMixture {
            means: vec![vec![-offset, 0.0], vec![offset, 0.0]],
            stds: vec![std; 2],
            weights: vec![weight, 1.0 - weight],
        })
    }

    pub fn checkerboard() -> Self {
        Dataset::Checkerboard {
            cells: 4,
            half_width: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dataset::Mixture(m) => m.validate(),
            Dataset::Checkerboard { cells, half_width } => {
                if *cells < 2 || !(*half_width > 0.0) {
                    Err(Error::invalid(
                        "checkerboard",
                        "need cells ≥ 2 and half_width > 0",
                    ))
                } else {
                    Ok(())
                }
            }
            Dataset::Points { points } => {
                if points.rows() == 0 {
                    return Err(Error::EmptyPool("dataset points"));
                }
                points.check_finite("dataset points")
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.means[0].len(),
            Dataset::Checkerboard { .. } => 2,
            Dataset::Points { points } => points.cols(),
        }
    }

    /// Number of classes, 0 when unlabeled.
    pub fn classes(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.means.len(),
            _ => 0,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        self.sample_labeled(n, rng).0
    }

    pub fn sample_labeled(&self, n: usize, rng: &mut Rng) -> (Tensor, Vec<Option<usize>>) {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        match self {
            Dataset::Mixture(m) => {
                let z: f64 = m.weights.iter().sum();
                for _ in 0..n {
                    let mut u = rng::uniform(rng) * z;
                    let mut k = m.weights.len() - 1;
                    for (i, w) in m.weights.iter().enumerate() {
                        if u < *w {
                            k = i;
                            break;
                        }
                        u -= w;
                    }
                    out.extend(
                        m.means[k]
                            .iter()
                            .map(|mu| mu + m.stds[k] * rng::normal(rng)),
                    );
                    labels.push(Some(k));
                }
            }
            Dataset::Checkerboard { cells, half_width } => {
                let c = *cells;
                let side = 2.0 * half_width / c as f64;
                // dark squares are those with (i + j) even
                let dark = c * c / 2 + (c * c) % 2;
                for _ in 0..n {
                    let k = rng::index(rng, dark);
                    let mut seen = 0;
                    let (mut ci, mut cj) = (0, 0);
                    'find: for i in 0..c {
                        for j in 0..c {
                            if (i + j) % 2 == 0 {
                                if seen == k {
                                    ci = i;
                                    cj = j;
                                    break 'find;
                                }
                                seen += 1;
                            }
                        }
                    }
                    out.push(-half_width + side * (ci as f64 + rng::uniform(rng)));
                    out.push(-half_width + side * (cj as f64 + rng::uniform(rng)));
                    labels.push(None);
                }
            }
            Dataset::Points { points } => {
                for _ in 0..n {
                    out.extend_from_slice(points.row(rng::index(rng, points.rows())));
                    labels.push(None);
                }
            }
        }
        (Tensor::matrix(n, d, out), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_gaussians_shape_and_labels() {
        let ds = Dataset::eight_gaussians(2.0, 0.1);
        ds.validate().unwrap();
        let (x, l) = ds.sample_labeled(64, &mut rng::seeded(0));
        assert_eq!(x.shape(), &[64, 2]);
        assert!(l.iter().all(|l| l.unwrap() < 8));
        assert_eq!(ds.classes(), 8);
    }

    #[test]
    fn checkerboard_stays_on_dark_squares() {
        let ds = Dataset::checkerboard();
        let x = ds.sample(500, &mut rng::seeded(2));
        for r in x.iter_rows() {
            let i = libm::floor((r[0] + 2.0) / 1.0) as i64;
            let j = libm::floor((r[1] + 2.0) / 1.0) as i64;
            assert_eq!((i + j) % 2, 0);
        }
    }

    #[test]
    fn points_are_resampled_exactly() {
        let p = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ds = Dataset::Points { points: p.clone() };
        let x = ds.sample(20, &mut rng::seeded(1));
        assert!(x.iter_rows().all(|r| r == p.row(0) || r == p.row(1)));
    }

    #[test]
    fn bad_mixture_rejected() {
        let m = GaussianMixture {
            means: vec![vec![0.0], vec![1.0, 2.0]],
            stds: vec![1.0, 1.0],
            weights: vec![1.0, 1.0],
        };
        assert!(m.validate().is_err());
    }
}
