//! Clear-condition activation statistics and the alignment loss that
//! matches batch statistics against them.

use serde_json::json;

use crate::autodiff::Var;
use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::model::{Model, Pass, Regime};
use crate::tensor::{Real, Tensor};

/// Streaming per-element mean and population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(len: usize) -> Self {
        Welford {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push<T: Real>(&mut self, sample: &[T]) {
        debug_assert_eq!(sample.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let x = x.as_f64();
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.m2.len()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|s| (s / n).max(0.0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub name: String,
    /// `(C, H, W)` of the layer output.
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
    pub count: u64,
    pub model_checksum: u64,
}

impl ActivationStats {
    pub fn layer(&self, name: &str) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "stats",
            json!({
                "count": self.count,
                "model_checksum": self.model_checksum.to_string(),
                "layers": self.layers.iter().map(|l| &l.name).collect::<Vec<_>>(),
            }),
        );
        for l in &self.layers {
            c.push(Blob::f64(
                format!("{}.mean", l.name),
                l.shape.clone(),
                l.mean.clone(),
            ));
            c.push(Blob::f64(
                format!("{}.var", l.name),
                l.shape.clone(),
                l.var.clone(),
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("stats")?;
        let bad = |what: &str| Error::Corrupt(format!("stats metadata: {what}"));
        let count = c.meta["count"].as_u64().ok_or_else(|| bad("count"))?;
        let model_checksum = c.meta["model_checksum"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("model_checksum"))?;
        let names = c.meta["layers"].as_array().ok_or_else(|| bad("layers"))?;
        let mut layers = Vec::new();
        for n in names {
            let name = n.as_str().ok_or_else(|| bad("layer name"))?.to_string();
            let mean = c.blob(&format!("{name}.mean"))?;
            let var = c.f64s(&format!("{name}.var"))?.to_vec();
            if var.iter().any(|&v| v < 0.0) {
                return Err(Error::Corrupt(format!("negative variance in {name}")));
            }
            layers.push(LayerStats {
                shape: mean.shape.clone(),
                mean: c.f64s(&format!("{name}.mean"))?.to_vec(),
                var,
                name,
            });
        }
        Ok(ActivationStats {
            layers,
            count,
            model_checksum,
        })
    }
}

/// Per-element statistics of every norm layer's post-affine output over
/// `images`, with frozen normalization statistics.
pub fn collect_clear_stats<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    batch_size: usize,
) -> Result<ActivationStats> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("statistics images"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut acc: Vec<Option<(Vec<usize>, Welford)>> = vec![None; model.norms().len()];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size) {
        let mut pass = model.pass(Regime::Eval, false);
        let x = model.input(&mut pass, images.select(chunk))?;
        model.forward(&mut pass, x)?;
        for &(ni, var) in pass.norm_outputs() {
            let value = pass.tape.value(var);
            let (shape, w) = acc[ni].get_or_insert_with(|| {
                (value.shape()[1..].to_vec(), Welford::new(value.item_len()))
            });
            debug_assert_eq!(&value.shape()[1..], &shape[..]);
            for i in 0..chunk.len() {
                w.push(value.row(i));
            }
        }
    }
    let layers = acc
        .into_iter()
        .enumerate()
        .map(|(ni, a)| {
            let (shape, w) = a.expect("every norm layer runs in a full forward pass");
            LayerStats {
                name: model.norms()[ni].name.clone(),
                shape,
                mean: w.mean().to_vec(),
                var: w.variance(),
            }
        })
        .collect();
    Ok(ActivationStats {
        layers,
        count: n as u64,
        model_checksum: model.backbone_checksum(),
    })
}

/// Sum over `norms` of the per-element L1 distance between the batch mean
/// and population variance of each layer output and the stored values,
/// each averaged over elements. `pass` must contain a forward pass that
/// reached all of `norms`.
pub fn alignment_loss<T: Real>(
    model: &Model<T>,
    pass: &mut Pass<T>,
    stats: &ActivationStats,
    norms: &[usize],
) -> Result<Var> {
    if stats.model_checksum != model.backbone_checksum() {
        return Err(Error::ChecksumMismatch {
            expected: model.backbone_checksum(),
            found: stats.model_checksum,
        });
    }
    if norms.is_empty() {
        return Err(Error::LayerMismatch("no layers selected".into()));
    }
    let mut total: Option<Var> = None;
    for &ni in norms {
        let name = &model
            .norms()
            .get(ni)
            .ok_or_else(|| Error::LayerMismatch(format!("norm index {ni} out of range")))?
            .name;
        let y = pass.norm_output(ni).ok_or_else(|| {
            Error::LayerMismatch(format!("{name} not reached by the forward pass"))
        })?;
        let st = stats
            .layer(name)
            .ok_or_else(|| Error::LayerMismatch(format!("{name} missing from statistics")))?;
        let shape = pass.tape.shape(y).to_vec();
        if shape[1..] != st.shape[..] {
            return Err(Error::shape("alignment statistics", &shape[1..], &st.shape));
        }
        if shape[0] < 2 {
            return Err(Error::invalid(format!(
                "alignment loss needs a batch of at least 2, got {}",
                shape[0]
            )));
        }
        let target = |v: &[f64]| {
            Tensor::new(
                st.shape.clone(),
                v.iter().map(|&x| T::from_f64(x)).collect(),
            )
        };
        let mu_hat = pass.tape.constant(target(&st.mean)?);
        let var_hat = pass.tape.constant(target(&st.var)?);
        let mu = pass.tape.batch_mean(y)?;
        let var = pass.tape.batch_var(y)?;
        let dm = pass.tape.sub(mu, mu_hat)?;
        let dm = pass.tape.abs(dm)?;
        let lm = pass.tape.mean(dm)?;
        let dv = pass.tape.sub(var, var_hat)?;
        let dv = pass.tape.abs(dv)?;
        let lv = pass.tape.mean(dv)?;
        let layer = pass.tape.add(lm, lv)?;
        total = Some(match total {
            Some(t) => pass.tape.add(t, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("norms is non-empty"))
}
