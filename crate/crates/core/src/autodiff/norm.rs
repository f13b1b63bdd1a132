//! Normalization kernels: batch statistics, frozen statistics and group
//! statistics, each followed by a per-channel affine transform.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Where the normalizing statistics of a norm layer come from.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Per-channel statistics of the current batch (training).
    BatchStats,
    /// Stored per-channel running statistics (adaptation and inference).
    Frozen { mean: &'a [T], var: &'a [T] },
    /// Per-sample statistics over groups of channels.
    Group { groups: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StatLayout {
    PerChannel,
    Frozen,
    Group { groups: usize },
}

pub(crate) struct NormOutput<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub layout: StatLayout,
    /// Batch mean and population variance per channel (batch-stats mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    hw: usize,
}

impl Dims {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape("norm", shape, &[0, 0]));
        }
        Ok(Dims {
            n: shape[0],
            c: shape[1],
            hw: shape[2..].iter().product(),
        })
    }
}

fn stat_index(layout: StatLayout, d: Dims, n: usize, c: usize) -> usize {
    match layout {
        StatLayout::PerChannel | StatLayout::Frozen => c,
        StatLayout::Group { groups } => n * groups + c / (d.c / groups),
    }
}

fn stat_count(layout: StatLayout, d: Dims) -> (usize, usize) {
    match layout {
        StatLayout::PerChannel | StatLayout::Frozen => (d.c, d.n * d.hw),
        StatLayout::Group { groups } => (d.n * groups, d.c / groups * d.hw),
    }
}

pub(crate) fn norm_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    mode: NormMode<'_, T>,
    eps: T,
) -> Result<NormOutput<T>> {
    let d = Dims::of(shape)?;
    if gamma.len() != d.c || beta.len() != d.c {
        return Err(Error::shape("norm affine", shape, &[gamma.len()]));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("norm eps must be positive"));
    }
    if d.n == 0 {
        return Err(Error::Empty("batch"));
    }
    let (layout, mean, var) = match mode {
        NormMode::Frozen { mean, var } => {
            if mean.len() != d.c || var.len() != d.c {
                return Err(Error::shape("norm frozen stats", shape, &[mean.len()]));
            }
            if let Some(v) = var.iter().find(|v| **v < T::zero()) {
                return Err(Error::invalid(format!("frozen variance is negative ({v})")));
            }
            (StatLayout::Frozen, mean.to_vec(), var.to_vec())
        }
        NormMode::BatchStats | NormMode::Group { .. } => {
            let layout = match mode {
                NormMode::Group { groups } => {
                    if groups == 0 || d.c % groups != 0 {
                        return Err(Error::invalid(format!(
                            "{groups} groups do not divide {} channels",
                            d.c
                        )));
                    }
                    StatLayout::Group { groups }
                }
                _ => StatLayout::PerChannel,
            };
            let (s, m) = stat_count(layout, d);
            let mut mean = vec![T::zero(); s];
            for n in 0..d.n {
                for c in 0..d.c {
                    let plane = &x[(n * d.c + c) * d.hw..][..d.hw];
                    mean[stat_index(layout, d, n, c)] += plane.iter().copied().sum::<T>();
                }
            }
            let mf = T::from_usize(m);
            mean.iter_mut().for_each(|v| *v /= mf);
            let mut var = vec![T::zero(); s];
            for n in 0..d.n {
                for c in 0..d.c {
                    let si = stat_index(layout, d, n, c);
                    let mu = mean[si];
                    let plane = &x[(n * d.c + c) * d.hw..][..d.hw];
                    var[si] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= mf);
            (layout, mean, var)
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let si = stat_index(layout, d, n, c);
            let (mu, is) = (mean[si], inv_std[si]);
            let off = (n * d.c + c) * d.hw;
            for i in off..off + d.hw {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    let batch_stats = (layout == StatLayout::PerChannel).then(|| (mean, var));
    Ok(NormOutput {
        y,
        xhat,
        inv_std,
        layout,
        batch_stats,
    })
}

pub(crate) struct NormGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn norm_backward<T: Real>(
    dy: &[T],
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    layout: StatLayout,
    need_dx: bool,
) -> NormGrads<T> {
    let d = Dims::of(shape).expect("shape validated in forward");
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let off = (n * d.c + c) * d.hw;
            for i in off..off + d.hw {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    if !need_dx {
        return NormGrads {
            dx: None,
            dgamma,
            dbeta,
        };
    }

    let mut dx = vec![T::zero(); dy.len()];
    if layout == StatLayout::Frozen {
        for n in 0..d.n {
            for c in 0..d.c {
                let scale = gamma[c] * inv_std[c];
                let off = (n * d.c + c) * d.hw;
                for i in off..off + d.hw {
                    dx[i] = dy[i] * scale;
                }
            }
        }
    } else {
        let (s, m) = stat_count(layout, d);
        let mut sum1 = vec![T::zero(); s];
        let mut sum2 = vec![T::zero(); s];
        for n in 0..d.n {
            for c in 0..d.c {
                let si = stat_index(layout, d, n, c);
                let off = (n * d.c + c) * d.hw;
                for i in off..off + d.hw {
                    let g = dy[i] * gamma[c];
                    sum1[si] += g;
                    sum2[si] += g * xhat[i];
                }
            }
        }
        let mf = T::from_usize(m);
        for n in 0..d.n {
            for c in 0..d.c {
                let si = stat_index(layout, d, n, c);
                let k = inv_std[si] / mf;
                let off = (n * d.c + c) * d.hw;
                for i in off..off + d.hw {
                    let g = dy[i] * gamma[c];
                    dx[i] = k * (mf * g - sum1[si] - xhat[i] * sum2[si]);
                }
            }
        }
    }
    NormGrads {
        dx: Some(dx),
        dgamma,
        dbeta,
    }
}
