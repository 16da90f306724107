//! Principal component analysis via power iteration with deflation, for
//! the 2-D latent-space projection plots.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 1000;

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal directions, unit length, sign-fixed so the first
    /// coordinate above 1e-12 in magnitude is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Project rows onto the fitted components: `[k, d] -> [k, dims]`.
    pub fn project(&self, data: &Tensor) -> Tensor {
        let (k, d) = (data.rows(), data.cols());
        let dims = self.components.len();
        let mut out = vec![0.0; k * dims];
        for i in 0..k {
            let row = data.row(i);
            for (j, comp) in self.components.iter().enumerate() {
                out[i * dims + j] = row
                    .iter()
                    .zip(&self.mean)
                    .zip(comp)
                    .map(|((x, m), c)| (x - m) * c)
                    .sum();
            }
        }
        let _ = d;
        Tensor::new_unchecked(vec![k, dims], out)
    }
}

fn covariance(data: &Tensor, mean: &[f64]) -> Vec<f64> {
    let (k, d) = (data.rows(), data.cols());
    let mut cov = vec![0.0; d * d];
    for i in 0..k {
        let row = data.row(i);
        for a in 0..d {
            let xa = row[a] - mean[a];
            if xa == 0.0 {
                continue;
            }
            for b in 0..d {
                cov[a * d + b] += xa * (row[b] - mean[b]);
            }
        }
    }
    for v in &mut cov {
        *v /= k as f64;
    }
    cov
}

fn mat_vec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Fit `dims` principal components on the rows of `data` (at least 2).
pub fn fit(data: &Tensor, dims: usize) -> Result<Pca> {
    let (k, d) = (data.rows(), data.cols());
    if k < 2 {
        return Err(Error::TooFewPoints { got: k, need: 2 });
    }
    if dims == 0 || dims > d {
        return Err(Error::Config(format!("cannot extract {dims} components from width {d}")));
    }
    let mean = data.col_means().data().to_vec();
    let mut cov = covariance(data, &mean);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for _ in 0..dims {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut v);
        let mut eigenvalue = 0.0;
        for _ in 0..MAX_ITERS {
            let mut next = mat_vec(&cov, &v, d);
            let norm = normalize(&mut next);
            if norm < 1e-300 {
                // degenerate direction: no variance left
                next = (0..d).map(|i| if i == components.len() { 1.0 } else { 0.0 }).collect();
                eigenvalue = 0.0;
                v = next;
                break;
            }
            eigenvalue = norm;
            let delta: f64 =
                v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < TOL {
                break;
            }
        }
        fix_sign(&mut v);
        // deflate: cov -= lambda v v^T
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= eigenvalue * v[a] * v[b];
            }
        }
        components.push(v);
        eigenvalues.push(eigenvalue);
    }
    Ok(Pca { mean, components, eigenvalues })
}

/// Center and project rows to `dims` coordinates.
pub fn pca_project(data: &Tensor, dims: usize) -> Result<Tensor> {
    Ok(fit(data, dims)?.project(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_init;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn too_few_points_rejected() {
        let data = Tensor::zeros(&[1, 4]);
        assert!(matches!(pca_project(&data, 2), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn axis_aligned_hand_case() {
        // x-axis spread only: first axis = +x, projections {1,-1,2,-2}
        let data = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![2.0, 0.0],
            vec![-2.0, 0.0],
        ])
        .unwrap();
        let pca = fit(&data, 2).unwrap();
        assert!((pca.components[0][0] - 1.0).abs() < 1e-8);
        assert!(pca.components[0][1].abs() < 1e-8);
        let proj = pca.project(&data);
        let xs: Vec<f64> = (0..4).map(|i| proj.at(i, 0)).collect();
        for (got, want) in xs.iter().zip(&[1.0, -1.0, 2.0, -2.0]) {
            assert!((got - want).abs() < 1e-8);
        }
        // second component carries no variance
        let var2: f64 = (0..4).map(|i| proj.at(i, 1).powi(2)).sum();
        assert!(var2 < 1e-12);
    }

    #[test]
    fn collinear_points_have_zero_second_component() {
        let data = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, -1.0],
            vec![2.0, 4.0, -2.0],
            vec![3.0, 6.0, -3.0],
        ])
        .unwrap();
        let pca = fit(&data, 2).unwrap();
        assert!(pca.eigenvalues[1].abs() < 1e-9);
    }

    #[test]
    fn projection_of_2d_data_is_an_isometry() {
        let mut rng = stream_rng(4, Stream::GradCheck);
        let data = normal_init(&mut rng, &[12, 2], 1.5);
        let proj = pca_project(&data, 2).unwrap();
        for i in 0..12 {
            for j in (i + 1)..12 {
                let orig: f64 = data
                    .row(i)
                    .iter()
                    .zip(data.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let mapped: f64 = proj
                    .row(i)
                    .iter()
                    .zip(proj.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((orig - mapped).abs() < 1e-6, "{orig} vs {mapped}");
            }
        }
    }

    #[test]
    fn captured_variance_beats_random_projections() {
        let mut rng = stream_rng(9, Stream::GradCheck);
        for trial in 0..5 {
            let data = normal_init(&mut rng, &[20, 4], 1.0 + trial as f64 * 0.3);
            let pca = fit(&data, 2).unwrap();
            let captured: f64 = pca.eigenvalues.iter().sum();
            let mean = data.col_means();
            for _ in 0..50 {
                // random orthonormal 2-frame via Gram-Schmidt
                let mut u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&mut u);
                let mut v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(&u) {
                    *vi -= dot * ui;
                }
                if normalize(&mut v) < 1e-9 {
                    continue;
                }
                let mut var = 0.0;
                for dir in [&u, &v] {
                    let coords: Vec<f64> = (0..20)
                        .map(|i| {
                            data.row(i)
                                .iter()
                                .zip(mean.data())
                                .zip(dir.iter())
                                .map(|((x, m), c)| (x - m) * c)
                                .sum()
                        })
                        .collect();
                    var += coords.iter().map(|c| c * c).sum::<f64>() / 20.0;
                }
                assert!(captured >= var - 1e-9, "captured {captured} < random {var}");
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = stream_rng(14, Stream::GradCheck);
        let data = normal_init(&mut rng, &[10, 5], 1.0);
        let a = pca_project(&data, 2).unwrap();
        let b = pca_project(&data, 2).unwrap();
        assert_eq!(a, b);
    }
}
