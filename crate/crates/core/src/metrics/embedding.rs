//! Exact t-SNE (O(n^2) per iteration) for plotting source and target features.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Domain;
use crate::error::{Error, Result};

pub const EMBEDDING_HEADER: &str = "id,domain,x,y";

const ITERATIONS: usize = 1000;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;
const MIN_POINTS: usize = 5;

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let min = (0..n)
                .filter(|&j| j != i)
                .map(|j| d[[i, j]])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d[[i, j]] - min) * beta).exp()
                };
                sum += row[j];
            }
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] /= sum;
                weighted += row[j] * (d[[i, j]] - min);
            }
            // Entropy of the normalized row.
            let entropy = sum.ln() + beta * weighted;
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    p
}

/// 2-D t-SNE embedding with perplexity `min(30, (n - 1) / 3)`.
pub fn embed_2d(features: ArrayView2<f64>, seed: u64) -> Result<Array2<f64>> {
    let n = features.nrows();
    if n < MIN_POINTS {
        return Err(Error::InvalidInput(format!(
            "embedding needs at least {MIN_POINTS} points, got {n}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding input"));
    }
    let perplexity = (30.0f64).min((n - 1) as f64 / 3.0);
    let cond = conditional_affinities(&squared_distances(features), perplexity);
    let mut p = &cond + &cond.t();
    let total = p.sum();
    p.mapv_inplace(|v| (v / total).max(1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));

    for iter in 0..ITERATIONS {
        let exaggeration = if iter < EXAGGERATION_ITERS {
            EXAGGERATION
        } else {
            1.0
        };
        let momentum = if iter < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = v;
                num[[j, i]] = v;
                q_sum += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / q_sum).max(1e-12);
                let w = (exaggeration * p[[i, j]] - q) * num[[i, j]];
                grad[0] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                grad[1] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
            }
            for k in 0..2 {
                let same_sign = (grad[k] > 0.0) == (update[[i, k]] > 0.0);
                gains[[i, k]] = if same_sign {
                    gains[[i, k]] * 0.8
                } else {
                    gains[[i, k]] + 0.2
                };
                gains[[i, k]] = gains[[i, k]].max(0.01);
                update[[i, k]] =
                    momentum * update[[i, k]] - LEARNING_RATE * gains[[i, k]] * grad[k];
            }
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).unwrap();
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding output"));
    }
    Ok(y)
}

pub fn embedding_to_csv(ids: &[String], domains: &[Domain], coords: ArrayView2<f64>) -> String {
    let mut out = String::from(EMBEDDING_HEADER);
    out.push('\n');
    for ((id, d), row) in ids.iter().zip(domains).zip(coords.rows()) {
        writeln!(out, "{id},{d},{},{}", row[0], row[1]).unwrap();
    }
    out
}

/// Embeds `features` (one row per id) and writes `id,domain,x,y`.
pub fn export_embedding_2d(
    features: ArrayView2<f64>,
    ids: &[String],
    domains: &[Domain],
    out_path: &Path,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    if ids.len() != n || domains.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows, {} ids, {} domain tags",
            ids.len(),
            domains.len()
        )));
    }
    let coords = embed_2d(features, seed)?;
    std::fs::write(out_path, embedding_to_csv(ids, domains, coords.view()))
        .map_err(|e| Error::io(out_path, e))?;
    Ok(coords)
}
