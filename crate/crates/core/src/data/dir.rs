//! On-disk dataset: one subdirectory per class holding QSF1 files, plus
//! `manifest.txt`:
//!
//! ```text
//! # qsf-manifest v1 kind=features
//! <class_id>\t<relative path>
//! ```
//!
//! Sample ids follow manifest line order.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::tensor_file::{load_tensor_file, save_tensor_file, DType, Tensor};
use super::{ClassId, Dataset, LabeledSample, Payload, PayloadKind, SampleId};
use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# qsf-manifest v1 kind=";

fn kind_name(kind: PayloadKind) -> &'static str {
    match kind {
        PayloadKind::Raster => "raster",
        PayloadKind::Features => "features",
    }
}

pub fn save_dataset_dir(dataset: &Dataset, root: &Path) -> Result<()> {
    let mut manifest = format!("{HEADER}{}\n", kind_name(dataset.kind()));
    for s in dataset.samples() {
        let rel = format!("{}/{}.qsf", s.class.0, s.id.0);
        let dir = root.join(s.class.0.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let map = s.payload.map();
        let (c, h, w) = map.shape();
        let tensor = Tensor::new(DType::F32, vec![c as u32, h as u32, w as u32], map.to_chw())?;
        save_tensor_file(&root.join(&rel), &tensor)?;
        writeln!(manifest, "{}\t{rel}", s.class.0).expect("string write");
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset_dir(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let kind = match lines.next().and_then(|l| l.strip_prefix(HEADER)) {
        Some("raster") => PayloadKind::Raster,
        Some("features") => PayloadKind::Features,
        _ => {
            return Err(Error::Corrupt(format!(
                "{}: bad manifest header",
                path.display()
            )))
        }
    };
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (class, rel) = line
            .split_once('\t')
            .ok_or_else(|| Error::Corrupt(format!("manifest line {}: {line}", n + 2)))?;
        let class: u32 = class
            .trim()
            .parse()
            .map_err(|_| Error::Corrupt(format!("manifest line {}: bad class", n + 2)))?;
        let tensor = load_tensor_file(&root.join(rel.trim()))?;
        if tensor.dims.len() != 3 {
            return Err(Error::shape(
                "load_dataset_dir",
                format!("{rel}: expected rank 3, found {}", tensor.dims.len()),
            ));
        }
        let (c, h, w) = (
            tensor.dims[0] as usize,
            tensor.dims[1] as usize,
            tensor.dims[2] as usize,
        );
        let map = FeatureMap::from_chw(c, h, w, &tensor.values)?;
        let payload = match kind {
            PayloadKind::Raster => Payload::Raster(map),
            PayloadKind::Features => Payload::Features(map),
        };
        samples.push(LabeledSample {
            id: SampleId(samples.len() as u64),
            class: ClassId(class),
            payload: Arc::new(payload),
        });
    }
    Dataset::new(samples)
}
