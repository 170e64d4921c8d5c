//! Classification and alignment losses, computed in f64.

use ndarray::{Array2, ArrayView2};

use crate::data::{Domain, TumorClass};
use crate::error::{Error, Result};

use super::config::{AdaptConfig, Bandwidth, MmdMode};

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Features of one domain's mini-batch with their (pseudo-)class tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Array2<f64>,
    pub class_tags: Vec<TumorClass>,
    pub domain: Domain,
}

impl FeatureBatch {
    pub fn new(features: Array2<f64>, class_tags: Vec<TumorClass>, domain: Domain) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidInput("feature batch is empty".into()));
        }
        if class_tags.len() != features.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows, {} class tags",
                features.nrows(),
                class_tags.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature batch"));
        }
        Ok(Self {
            features,
            class_tags,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows_of(&self, class: TumorClass) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.class_tags[i] == class)
            .collect()
    }
}

fn check_probs(probs: ArrayView2<f64>, targets: (usize, usize)) -> Result<()> {
    if probs.dim() != targets || probs.ncols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dim(),
            targets
        )));
    }
    Ok(())
}

/// Summed negative log-likelihood `-sum_i sum_c y_ic ln(max(p_ic, eps))`.
pub fn cross_entropy(probs: ArrayView2<f64>, one_hot: ArrayView2<f64>) -> Result<f64> {
    check_probs(probs, one_hot.dim())?;
    Ok(-probs
        .iter()
        .zip(one_hot.iter())
        .map(|(&p, &y)| {
            if y == 0.0 {
                0.0
            } else {
                y * p.max(PROB_EPS).ln()
            }
        })
        .sum::<f64>())
}

/// Batch-mean cross-entropy over integer labels; the form optimized in training.
pub fn mean_cross_entropy(probs: ArrayView2<f64>, labels: &[TumorClass]) -> Result<f64> {
    check_probs(probs, (labels.len(), probs.ncols()))?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, c)| -probs[[i, c.index()]].max(PROB_EPS).ln())
        .sum();
    Ok(sum / labels.len() as f64)
}

pub fn one_hot(labels: &[TumorClass]) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), crate::data::NUM_CLASSES));
    for (i, c) in labels.iter().enumerate() {
        out[[i, c.index()]] = 1.0;
    }
    out
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(xs: ArrayView2<f64>, xt: ArrayView2<f64>) -> Result<()> {
    if xs.nrows() == 0 || xt.nrows() == 0 {
        return Err(Error::InvalidInput("MMD needs non-empty batches".into()));
    }
    if xs.ncols() != xt.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dimensions {} and {}",
            xs.ncols(),
            xt.ncols()
        )));
    }
    if xs.iter().chain(xt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MMD input"));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel, and its gradient
/// with respect to every source and target feature (sigma held constant).
pub fn mmd_squared_with_grad(
    xs: ArrayView2<f64>,
    xt: ArrayView2<f64>,
    sigma: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(xs, xt)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let (ns, nt) = (xs.nrows() as f64, xt.nrows() as f64);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut gs = Array2::<f64>::zeros(xs.raw_dim());
    let mut gt = Array2::<f64>::zeros(xt.raw_dim());

    // Accumulates w * k(a, b) and its gradient dk/da = -k (a - b) / sigma^2.
    let block = |a: ArrayView2<f64>,
                 b: ArrayView2<f64>,
                 w: f64,
                 ga: &mut Array2<f64>,
                 gb: Option<&mut Array2<f64>>|
     -> f64 {
        let mut total = 0.0;
        let mut gb = gb;
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let k = (-sq_dist(a.row(i), b.row(j)) * inv).exp();
                total += w * k;
                let coef = -w * k * 2.0 * inv;
                for d in 0..a.ncols() {
                    let diff = a[[i, d]] - b[[j, d]];
                    ga[[i, d]] += coef * diff;
                    if let Some(g) = gb.as_deref_mut() {
                        g[[j, d]] -= coef * diff;
                    }
                }
            }
        }
        total
    };
    // Within-domain terms: the double sum visits each ordered pair, so the
    // gradient w.r.t. a point collects both positions.
    let ss = block(xs, xs, 1.0 / (ns * ns), &mut gs, None);
    gs *= 2.0;
    let mut gt_tt = Array2::<f64>::zeros(xt.raw_dim());
    let tt = block(xt, xt, 1.0 / (nt * nt), &mut gt_tt, None);
    gt_tt *= 2.0;
    let st = block(xs, xt, -2.0 / (ns * nt), &mut gs, Some(&mut gt));
    gt += &gt_tt;
    Ok((ss + tt + st, gs, gt))
}

pub fn mmd_squared(source: &FeatureBatch, target: &FeatureBatch, sigma: f64) -> Result<f64> {
    Ok(mmd_squared_with_grad(source.features.view(), target.features.view(), sigma)?.0)
}

/// Median of pooled pairwise Euclidean distances (pairs `i < j`); 1 when the
/// median is zero.
pub fn median_sigma(xs: ArrayView2<f64>, xt: ArrayView2<f64>) -> Result<f64> {
    if xs.ncols() != xt.ncols() {
        return Err(Error::ShapeMismatch("feature dimensions differ".into()));
    }
    let rows: Vec<_> = xs.rows().into_iter().chain(xt.rows()).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidInput(
            "bandwidth needs at least 2 points".into(),
        ));
    }
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

pub fn median_heuristic_sigma(source: &FeatureBatch, target: &FeatureBatch) -> Result<f64> {
    median_sigma(source.features.view(), target.features.view())
}

fn bandwidth(policy: Bandwidth, xs: ArrayView2<f64>, xt: ArrayView2<f64>) -> Result<f64> {
    match policy {
        Bandwidth::Median => median_sigma(xs, xt),
        Bandwidth::Fixed(s) => Ok(s),
    }
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), x.ncols()), |(i, d)| x[[rows[i], d]])
}

/// Global MMD or the mean of per-class MMDs over classes tagged in both
/// batches (0 if none), with gradients scattered back to the batch rows.
pub fn alignment_loss_with_grad(
    source: &FeatureBatch,
    target: &FeatureBatch,
    config: &AdaptConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    match config.mmd_mode {
        MmdMode::Global => {
            let sigma = bandwidth(
                config.bandwidth,
                source.features.view(),
                target.features.view(),
            )?;
            mmd_squared_with_grad(source.features.view(), target.features.view(), sigma)
        }
        MmdMode::Classwise => {
            check_pair(source.features.view(), target.features.view())?;
            let mut gs = Array2::<f64>::zeros(source.features.raw_dim());
            let mut gt = Array2::<f64>::zeros(target.features.raw_dim());
            let mut values = Vec::new();
            let mut grads = Vec::new();
            for class in TumorClass::ALL {
                let (rs, rt) = (source.rows_of(class), target.rows_of(class));
                if rs.is_empty() || rt.is_empty() {
                    continue;
                }
                let (xs, xt) = (gather(&source.features, &rs), gather(&target.features, &rt));
                let sigma = bandwidth(config.bandwidth, xs.view(), xt.view())?;
                let (v, g_s, g_t) = mmd_squared_with_grad(xs.view(), xt.view(), sigma)?;
                values.push(v);
                grads.push((rs, rt, g_s, g_t));
            }
            if values.is_empty() {
                return Ok((0.0, gs, gt));
            }
            let scale = 1.0 / values.len() as f64;
            for (rs, rt, g_s, g_t) in grads {
                for (k, &r) in rs.iter().enumerate() {
                    gs.row_mut(r).scaled_add(scale, &g_s.row(k));
                }
                for (k, &r) in rt.iter().enumerate() {
                    gt.row_mut(r).scaled_add(scale, &g_t.row(k));
                }
            }
            Ok((values.iter().sum::<f64>() * scale, gs, gt))
        }
    }
}

/// Class-wise MMD: mean over classes present in both batches, 0 if none.
pub fn classwise_mmd(
    source: &FeatureBatch,
    target: &FeatureBatch,
    config: &AdaptConfig,
) -> Result<f64> {
    let config = AdaptConfig {
        mmd_mode: MmdMode::Classwise,
        ..config.clone()
    };
    Ok(alignment_loss_with_grad(source, target, &config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub ce_src: f64,
    pub ce_tgt: f64,
    pub mmd: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(ce_src: f64, ce_tgt: f64, mmd: f64, lambda: f64) -> Self {
        Self {
            ce_src,
            ce_tgt,
            mmd,
            total: ce_src + ce_tgt + lambda * mmd,
        }
    }
}

/// `CE_src + CE_tgt + lambda * MMD` with batch-mean cross-entropies; the MMD
/// term follows `config.mmd_mode`.
pub fn total_loss(
    src_probs: ArrayView2<f64>,
    src_labels: &[TumorClass],
    tgt_probs: ArrayView2<f64>,
    tgt_pseudo: &[TumorClass],
    src_feats: &FeatureBatch,
    tgt_feats: &FeatureBatch,
    config: &AdaptConfig,
) -> Result<(f64, LossComponents)> {
    let a = mean_cross_entropy(src_probs, src_labels)?;
    let b = mean_cross_entropy(tgt_probs, tgt_pseudo)?;
    let m = alignment_loss_with_grad(src_feats, tgt_feats, config)?.0;
    let c = LossComponents::combine(a, b, m, config.lambda);
    Ok((c.total, c))
}
