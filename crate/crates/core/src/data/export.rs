//! Dataset artifacts: a JSON manifest, a flat little-endian `f64` pixel
//! file and a JSON file with per-record labels and generation factors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, GenerationRecord, LabeledImage, Provenance};
use crate::autodiff::Tensor;
use crate::digest::sha256_hex;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub n_records: usize,
    pub n_classes: usize,
    pub n_concept_values: usize,
    pub image_shape: [usize; 3],
    pub pixels_file: String,
    pub pixels_sha256: String,
    pub records_file: String,
    pub records_sha256: String,
    pub notes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    class_label: usize,
    concept_label: usize,
    marker: Option<bool>,
    record: GenerationRecord,
}

/// Write `<stem>.manifest.json`, `<stem>.pixels.bin` and
/// `<stem>.records.json` into `dir`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut pixels = Vec::with_capacity(dataset.len() * dataset.input_dim() * 8);
    for r in &dataset.records {
        for v in r.pixels.data() {
            pixels.extend_from_slice(&v.to_le_bytes());
        }
    }
    let metas: Vec<RecordMeta> = dataset
        .records
        .iter()
        .map(|r| RecordMeta {
            class_label: r.class_label,
            concept_label: r.concept_label,
            marker: r.marker,
            record: r.record.clone(),
        })
        .collect();
    let records = serde_json::to_vec(&metas)?;
    let pixels_file = format!("{stem}.pixels.bin");
    let records_file = format!("{stem}.records.json");
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        provenance: dataset.provenance.clone(),
        n_records: dataset.len(),
        n_classes: dataset.n_classes,
        n_concept_values: dataset.n_concept_values,
        image_shape: dataset.image_shape,
        pixels_sha256: sha256_hex(&pixels),
        records_sha256: sha256_hex(&records),
        pixels_file: pixels_file.clone(),
        records_file: records_file.clone(),
        notes: vec!["sampled colours are clipped to [0, 1]".into()],
    };
    std::fs::write(dir.join(&pixels_file), &pixels)?;
    std::fs::write(dir.join(&records_file), &records)?;
    let path = dir.join(format!("{stem}.manifest.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Reload a dataset, verifying both checksums.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Corrupt(format!(
            "format version {} is not supported",
            manifest.format_version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let pixels = std::fs::read(dir.join(&manifest.pixels_file))?;
    if sha256_hex(&pixels) != manifest.pixels_sha256 {
        return Err(DataError::Corrupt(format!(
            "{} checksum mismatch",
            manifest.pixels_file
        )));
    }
    let records = std::fs::read(dir.join(&manifest.records_file))?;
    if sha256_hex(&records) != manifest.records_sha256 {
        return Err(DataError::Corrupt(format!(
            "{} checksum mismatch",
            manifest.records_file
        )));
    }
    let metas: Vec<RecordMeta> = serde_json::from_slice(&records)?;
    let dim: usize = manifest.image_shape.iter().product();
    if metas.len() != manifest.n_records || pixels.len() != manifest.n_records * dim * 8 {
        return Err(DataError::Corrupt("record count does not match payload".into()));
    }
    let records = metas
        .into_iter()
        .zip(pixels.chunks_exact(dim * 8))
        .map(|(m, bytes)| {
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(LabeledImage {
                pixels: Tensor::new(manifest.image_shape.to_vec(), data)?,
                class_label: m.class_label,
                concept_label: m.concept_label,
                marker: m.marker,
                record: m.record,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Dataset {
        records,
        n_classes: manifest.n_classes,
        n_concept_values: manifest.n_concept_values,
        image_shape: manifest.image_shape,
        provenance: manifest.provenance,
    })
}
