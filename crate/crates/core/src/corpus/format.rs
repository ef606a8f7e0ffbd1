//! Bundle directory layout.
//!
//! ```text
//! manifest.json    magic, version, d, counts, image ids, class table, provenance
//! samples.f32      per image (1 + M) x d little-endian f32, [CLS] row first
//! labels.u32       one little-endian u32 class id per image
//! attributes.f32   per class (num_attributes + 1) x d f32, [EOS] row first
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassAttributeSet, EmbeddingBundle, Split, TokenEmbeddings};
use crate::linalg::Matrix;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.f32";
pub const LABELS_FILE: &str = "labels.u32";
pub const ATTRIBUTES_FILE: &str = "attributes.f32";

const MAGIC: &str = "OTCIL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PatchCounts {
    Constant(usize),
    PerSample(Vec<usize>),
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassEntry {
    class_id: u32,
    class_name: String,
    num_attributes: usize,
    attribute_texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    d: usize,
    num_samples: usize,
    num_classes: usize,
    #[serde(rename = "M_per_sample")]
    m_per_sample: PatchCounts,
    image_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<Vec<Split>>,
    class_table: Vec<ClassEntry>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes `bundle` as a bundle directory at `dir`, creating it if needed.
///
/// Payloads are stored as `f32`; values that are not exactly representable are
/// rounded.
pub fn write_bundle(bundle: &EmbeddingBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    // Re-validate: the bundle may have been assembled field by field.
    let bundle = EmbeddingBundle::with_splits(
        bundle.dim,
        bundle.samples.clone(),
        bundle.classes.clone(),
        bundle.splits.clone(),
        bundle.provenance.clone(),
    )?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let counts: Vec<usize> = bundle.samples.iter().map(|s| s.patch_count()).collect();
    let m_per_sample = match counts.first() {
        Some(&m) if counts.iter().all(|&c| c == m) => PatchCounts::Constant(m),
        Some(_) => PatchCounts::PerSample(counts),
        None => PatchCounts::PerSample(Vec::new()),
    };
    let manifest = Manifest {
        magic: MAGIC.into(),
        version: VERSION,
        d: bundle.dim,
        num_samples: bundle.samples.len(),
        num_classes: bundle.classes.len(),
        m_per_sample,
        image_ids: bundle.samples.iter().map(|s| s.image_id.clone()).collect(),
        splits: bundle.splits.clone(),
        class_table: bundle
            .classes
            .iter()
            .map(|c| ClassEntry {
                class_id: c.class_id,
                class_name: c.class_name.clone(),
                num_attributes: c.attribute_texts.len(),
                attribute_texts: c.attribute_texts.clone(),
            })
            .collect(),
        provenance: bundle.provenance.clone(),
    };

    let mut samples = Vec::new();
    let mut labels = Vec::with_capacity(bundle.samples.len() * 4);
    for s in &bundle.samples {
        push_f32(&mut samples, &s.cls);
        push_f32(&mut samples, s.patches.as_slice());
        labels.extend_from_slice(&s.label.to_le_bytes());
    }
    let mut attributes = Vec::new();
    for c in &bundle.classes {
        push_f32(&mut attributes, &c.eos_embedding);
        push_f32(&mut attributes, c.attribute_embeddings.as_slice());
    }

    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(SAMPLES_FILE), &samples)?;
    write_atomic(&dir.join(LABELS_FILE), &labels)?;
    write_atomic(&dir.join(ATTRIBUTES_FILE), &attributes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Checks a blob's byte length against the expected row count.
fn check_blob(file: &str, bytes: &[u8], rows: usize, d: usize) -> Result<()> {
    let expected = rows * d * 4;
    if bytes.len() == expected {
        return Ok(());
    }
    if rows > 0 && bytes.len().is_multiple_of(rows * 4) {
        return Err(Error::format(
            file,
            0,
            format!(
                "dimension mismatch: manifest d={d} but blob holds rows of d={}",
                bytes.len() / (rows * 4)
            ),
        ));
    }
    Err(Error::format(
        file,
        bytes.len().min(expected) as u64,
        format!("blob length mismatch: expected {expected} bytes, found {}", bytes.len()),
    ))
}

fn decode_f32(file: &str, bytes: &[u8], start_value: usize, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    for i in start_value..start_value + count {
        let raw = [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
        let v = f32::from_le_bytes(raw);
        if !v.is_finite() {
            return Err(Error::format(file, 4 * i as u64, format!("non-finite value {v}")));
        }
        out.push(v as f64);
    }
    Ok(out)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let dir = dir.as_ref();
    let manifest_bytes = read(&dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::format(MANIFEST_FILE, e.column() as u64, e.to_string()))?;
    if manifest.magic != MAGIC {
        return Err(Error::format(
            MANIFEST_FILE,
            0,
            format!("magic mismatch: expected {MAGIC:?}, found {:?}", manifest.magic),
        ));
    }
    if manifest.version != VERSION {
        return Err(Error::format(
            MANIFEST_FILE,
            0,
            format!("version mismatch: expected {VERSION}, found {}", manifest.version),
        ));
    }
    let d = manifest.d;
    if d == 0 {
        return Err(Error::format(MANIFEST_FILE, 0, "d must be positive"));
    }
    let n = manifest.num_samples;
    if manifest.image_ids.len() != n {
        return Err(Error::format(
            MANIFEST_FILE,
            0,
            format!("{} image ids for {n} samples", manifest.image_ids.len()),
        ));
    }
    if manifest.class_table.len() != manifest.num_classes {
        return Err(Error::format(
            MANIFEST_FILE,
            0,
            format!(
                "class table has {} entries, num_classes is {}",
                manifest.class_table.len(),
                manifest.num_classes
            ),
        ));
    }
    let patch_counts = match manifest.m_per_sample {
        PatchCounts::Constant(m) => vec![m; n],
        PatchCounts::PerSample(v) if v.len() == n => v,
        PatchCounts::PerSample(v) => {
            return Err(Error::format(
                MANIFEST_FILE,
                0,
                format!("M_per_sample lists {} counts for {n} samples", v.len()),
            ))
        }
    };
    if let Some(i) = patch_counts.iter().position(|&m| m == 0) {
        return Err(Error::format(MANIFEST_FILE, i as u64, "sample has no patch tokens"));
    }

    let labels_bytes = read(&dir.join(LABELS_FILE))?;
    check_blob(LABELS_FILE, &labels_bytes, n, 1)?;
    let labels: Vec<u32> = labels_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let samples_bytes = read(&dir.join(SAMPLES_FILE))?;
    let sample_rows: usize = patch_counts.iter().map(|m| m + 1).sum();
    check_blob(SAMPLES_FILE, &samples_bytes, sample_rows, d)?;
    let mut samples = Vec::with_capacity(n);
    let mut cursor = 0;
    for (i, &m) in patch_counts.iter().enumerate() {
        let cls = decode_f32(SAMPLES_FILE, &samples_bytes, cursor, d)?;
        let patches = decode_f32(SAMPLES_FILE, &samples_bytes, cursor + d, m * d)?;
        cursor += (m + 1) * d;
        samples.push(TokenEmbeddings {
            image_id: manifest.image_ids[i].clone(),
            label: labels[i],
            cls,
            patches: Matrix::from_vec(m, d, patches)?,
        });
    }

    let attr_bytes = read(&dir.join(ATTRIBUTES_FILE))?;
    let attr_rows: usize = manifest.class_table.iter().map(|c| c.num_attributes + 1).sum();
    check_blob(ATTRIBUTES_FILE, &attr_bytes, attr_rows, d)?;
    let mut classes = Vec::with_capacity(manifest.class_table.len());
    let mut cursor = 0;
    for (i, entry) in manifest.class_table.into_iter().enumerate() {
        if entry.attribute_texts.len() != entry.num_attributes {
            return Err(Error::format(
                MANIFEST_FILE,
                i as u64,
                format!(
                    "class {} lists {} attribute texts but num_attributes is {}",
                    entry.class_id,
                    entry.attribute_texts.len(),
                    entry.num_attributes
                ),
            ));
        }
        let eos = decode_f32(ATTRIBUTES_FILE, &attr_bytes, cursor, d)?;
        let rows = decode_f32(ATTRIBUTES_FILE, &attr_bytes, cursor + d, entry.num_attributes * d)?;
        cursor += (entry.num_attributes + 1) * d;
        classes.push(ClassAttributeSet {
            class_id: entry.class_id,
            class_name: entry.class_name,
            attribute_texts: entry.attribute_texts,
            attribute_embeddings: Matrix::from_vec(entry.num_attributes, d, rows)?,
            eos_embedding: eos,
        });
    }

    EmbeddingBundle::with_splits(d, samples, classes, manifest.splits, manifest.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EmbeddingBundle {
        let d = 4;
        let class = |id: u32| ClassAttributeSet {
            class_id: id,
            class_name: format!("class{id}"),
            attribute_texts: vec!["x".into(), "y".into()],
            attribute_embeddings: Matrix::from_vec(2, d, (0..8).map(|v| v as f64 + id as f64).collect()).unwrap(),
            eos_embedding: vec![0.5, -0.25, 1.0, id as f64],
        };
        let sample = |i: usize, label: u32| TokenEmbeddings {
            image_id: format!("img{i}"),
            label,
            cls: vec![i as f64, 1.0, -1.0, 0.125],
            patches: Matrix::from_vec(3, d, (0..12).map(|v| (v * i) as f64 * 0.5).collect()).unwrap(),
        };
        EmbeddingBundle::new(
            d,
            vec![sample(0, 3), sample(1, 5), sample(2, 3)],
            vec![class(3), class(5)],
            BTreeMap::from([("encoder".to_string(), "toy".to_string())]),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_toy_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy();
        write_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.samples().len(), 3);
        assert_eq!(loaded.classes().len(), 2);
        assert_eq!(loaded, b);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&toy(), dir.path()).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("blob length mismatch"), "{err}");
        assert!(err.contains(SAMPLES_FILE), "{err}");
    }

    #[test]
    fn attribute_rows_of_wrong_width_are_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&toy(), dir.path()).unwrap();
        // 2 classes x 3 rows of d=8 instead of d=4.
        fs::write(dir.path().join(ATTRIBUTES_FILE), vec![0u8; 2 * 3 * 8 * 4]).unwrap();
        let err = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Io { .. })));
        write_bundle(&toy(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"OTCIL\"", "\"NOPE\"");
        fs::write(&path, text).unwrap();
        assert!(load_bundle(dir.path())
            .unwrap_err()
            .to_string()
            .contains("magic mismatch"));
    }

    #[test]
    fn non_finite_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&toy(), dir.path()).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("offset 8") && err.contains("non-finite"), "{err}");
    }

    #[test]
    fn empty_sample_list_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(4, vec![], toy().classes()[..1].to_vec(), BTreeMap::new()).unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert!(loaded.samples().is_empty());
        assert_eq!(loaded.classes().len(), 1);
    }

    #[test]
    fn duplicate_ids_are_refused_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = toy();
        b.samples[1].image_id = "img0".into();
        assert!(write_bundle(&b, dir.path()).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }
}
