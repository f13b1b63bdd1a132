//! `root/<class-name>/*.png` datasets with 8-bit RGB pixels mapped
//! linearly to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};

use super::{Condition, Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_directory_dataset(dataset: &Dataset, root: &Path, class_names: &[&str]) -> Result<()> {
    let [c, h, w] = dataset.image_shape();
    if c != 3 {
        return Err(Error::invalid(format!(
            "PNG export needs 3 channels, got {c}"
        )));
    }
    if class_names.len() < dataset.num_classes {
        return Err(Error::invalid("fewer class names than classes"));
    }
    for name in &class_names[..dataset.num_classes] {
        fs::create_dir_all(root.join(name))?;
    }
    for i in 0..dataset.len() {
        let px = dataset.image(i);
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |ci: usize| {
                let v = px[ci * h * w + y as usize * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        });
        let path = root
            .join(class_names[dataset.labels[i]])
            .join(format!("{i:06}.png"));
        img.save(&path).map_err(|e| Error::BadImage {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads every PNG under `root/<class>/`, classes labelled by their
/// position in `class_names`. Files are read in sorted order.
pub fn load_directory_dataset(
    root: &Path,
    class_names: &[&str],
    size: (usize, usize),
    condition: Condition,
) -> Result<Dataset> {
    let (h, w) = size;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = class_names
            .iter()
            .position(|c| *c == name)
            .ok_or(Error::UnknownClass(name))?;
        for path in sorted_entries(&dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let bad = |reason: String| Error::BadImage {
                path: path.clone(),
                reason,
            };
            let img = ImageReader::open(&path)
                .map_err(|e| bad(e.to_string()))?
                .decode()
                .map_err(|e| bad(e.to_string()))?
                .to_rgb8();
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(bad(format!(
                    "size {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            let base = data.len();
            data.resize(base + 3 * h * w, 0.0);
            for (x, y, p) in img.enumerate_pixels() {
                for ci in 0..3 {
                    data[base + ci * h * w + y as usize * w + x as usize] = p.0[ci] as f32 / 255.0;
                }
            }
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("image directory"));
    }
    Ok(Dataset {
        images: Tensor::new(vec![labels.len(), 3, h, w], data)?,
        labels,
        num_classes: class_names.len(),
        condition,
        source: DatasetSource::Directory(root.to_path_buf()),
    })
}
