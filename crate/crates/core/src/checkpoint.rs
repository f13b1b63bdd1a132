//! Model checkpoints: configuration echo, every named parameter and the
//! frozen running statistics, as 32-bit blobs.

use std::path::Path;

use serde_json::json;

use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};

pub fn model_to_container(model: &Model<f32>) -> Result<Container> {
    let mut c = Container::new(
        "model",
        json!({
            "config": model.config(),
            "backbone_checksum": model.backbone_checksum().to_string(),
        }),
    );
    for p in model.params() {
        c.push(Blob::f32(
            &p.name,
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
        ));
    }
    for n in model.norms() {
        c.push(Blob::f32(
            format!("{}.running_mean", n.name),
            vec![n.channels],
            n.running_mean.clone(),
        ));
        c.push(Blob::f32(
            format!("{}.running_var", n.name),
            vec![n.channels],
            n.running_var.clone(),
        ));
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<Model<f32>> {
    c.expect_kind("model")?;
    let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
    let mut model = build_model::<f32>(&config, 0)?;
    for p in model.params_mut() {
        let blob = c.blob(&p.name)?;
        if blob.shape != p.tensor.shape() {
            return Err(Error::shape(
                "checkpoint parameter",
                &blob.shape,
                p.tensor.shape(),
            ));
        }
        p.tensor.data_mut().copy_from_slice(c.f32s(&p.name)?);
    }
    for n in model.norms_mut() {
        let mean = c.f32s(&format!("{}.running_mean", n.name))?;
        let var = c.f32s(&format!("{}.running_var", n.name))?;
        if mean.len() != n.channels || var.len() != n.channels {
            return Err(Error::shape(
                "checkpoint statistics",
                &[n.channels],
                &[mean.len(), var.len()],
            ));
        }
        n.running_mean.copy_from_slice(mean);
        n.running_var.copy_from_slice(var);
    }
    let stored: Option<u64> = c.meta["backbone_checksum"]
        .as_str()
        .and_then(|s| s.parse().ok());
    if let Some(expected) = stored {
        if expected != model.backbone_checksum() {
            return Err(Error::ChecksumMismatch {
                expected,
                found: model.backbone_checksum(),
            });
        }
    }
    Ok(model)
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    model_to_container(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    model_from_container(&Container::load(path)?)
}

/// Element bytes of a full checkpoint.
pub fn checkpoint_payload_bytes(model: &Model<f32>) -> Result<usize> {
    Ok(model_to_container(model)?.payload_bytes(|_| true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = build_model::<f32>(&ModelConfig::default(), 4).unwrap();
        m.norms_mut()[2].running_mean[1] = 0.25;
        m.norms_mut()[2].running_var[0] = 3.5;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.full_checksum(), m.full_checksum());
        let x = Tensor::full(vec![2, 3, 32, 32], 0.3f32);
        assert!(back.logits(&x).unwrap().bitwise_eq(&m.logits(&x).unwrap()));
    }

    #[test]
    fn wrong_kind_is_refused() {
        let c = Container::new("bank", serde_json::Value::Null);
        assert!(model_from_container(&c).is_err());
    }
}
