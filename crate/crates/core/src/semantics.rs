//! Class prototypes and the visual sample sets sent out for attribute
//! generation.
//!
//! Everything here reads only frozen `[CLS]` features. Ties are broken by the
//! lexicographically smallest image id and means are summed in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::format::write_atomic;
use crate::corpus::EmbeddingBundle;
use crate::linalg::cosine_distance;
use crate::{Error, Result};

pub const DEFAULT_DIVERSE_SAMPLES: usize = 3;

const PROMPT_TEMPLATE: &str = "What are the key visual features for identifying a [CLASS] in these images? Focus on the most discriminative attributes.";

/// The attribute-generation question with the class name filled in.
pub fn attribute_prompt(class_name: &str) -> String {
    PROMPT_TEMPLATE.replace("[CLASS]", class_name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualSampleSet {
    pub class_id: u32,
    pub representative_id: String,
    pub diverse_ids: Vec<String>,
    pub prototype: Vec<f64>,
}

impl VisualSampleSet {
    /// Representative first, then the diverse samples.
    pub fn image_ids(&self) -> Vec<String> {
        std::iter::once(self.representative_id.clone())
            .chain(self.diverse_ids.iter().cloned())
            .collect()
    }
}

/// Arithmetic mean of `features`, summed in the given order.
pub fn class_prototype<F: AsRef<[f64]>>(features: &[F]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty class".into()))?;
    let mut mean = vec![0.0; first.as_ref().len()];
    for f in features {
        let f = f.as_ref();
        if f.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: f.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Member closest to the prototype in cosine distance.
pub fn representative_sample<F: AsRef<[f64]>>(class_features: &[(&str, F)], prototype: &[f64]) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for (id, f) in class_features {
        let dist = cosine_distance(f.as_ref(), prototype)?;
        let better = match best {
            None => true,
            Some((bd, bid)) => dist < bd || (dist == bd && *id < bid),
        };
        if better {
            best = Some((dist, id));
        }
    }
    best.map(|(_, id)| id.to_string())
        .ok_or_else(|| Error::InvalidArgument("empty class".into()))
}

/// Up to `n` members other than the representative, by descending cosine
/// distance to the representative.
pub fn diverse_set<F: AsRef<[f64]>>(
    class_features: &[(&str, F)],
    representative_id: &str,
    n: usize,
) -> Result<Vec<String>> {
    let rep = class_features
        .iter()
        .find(|(id, _)| *id == representative_id)
        .ok_or_else(|| Error::InvalidArgument(format!("representative {representative_id:?} not in class")))?;
    let mut scored = Vec::with_capacity(class_features.len());
    for (id, f) in class_features {
        if *id == representative_id {
            continue;
        }
        scored.push((cosine_distance(f.as_ref(), rep.1.as_ref())?, *id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect())
}

/// One sample set per class id in `session_classes`, built from the `[CLS]`
/// features of `sample_indices` (typically the session's training samples).
pub fn build_visual_sample_sets(
    bundle: &EmbeddingBundle,
    sample_indices: &[usize],
    session_classes: &[u32],
    n: usize,
) -> Result<Vec<VisualSampleSet>> {
    let mut out = Vec::with_capacity(session_classes.len());
    for &class_id in session_classes {
        let class_index = bundle
            .class_index(class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {class_id}")))?;
        let members: Vec<(&str, &[f64])> = sample_indices
            .iter()
            .filter(|&&i| bundle.sample_class_index(i) == class_index)
            .map(|&i| {
                let s = &bundle.samples()[i];
                (s.image_id.as_str(), s.cls.as_slice())
            })
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(class_id));
        }
        let features: Vec<&[f64]> = members.iter().map(|(_, f)| *f).collect();
        let prototype = class_prototype(&features)?;
        let representative_id = representative_sample(&members, &prototype)?;
        let diverse_ids = diverse_set(&members, &representative_id, n)?;
        out.push(VisualSampleSet {
            class_id,
            representative_id,
            diverse_ids,
            prototype,
        });
    }
    Ok(out)
}

/// One entry of `attribute_requests.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRequest {
    pub class_id: u32,
    pub class_name: String,
    pub image_ids: Vec<String>,
    pub prompt: String,
}

pub fn attribute_requests(sample_sets: &[VisualSampleSet], bundle: &EmbeddingBundle) -> Result<Vec<AttributeRequest>> {
    sample_sets
        .iter()
        .map(|set| {
            let class = bundle
                .class_index(set.class_id)
                .map(|i| &bundle.classes()[i])
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class {}", set.class_id)))?;
            Ok(AttributeRequest {
                class_id: set.class_id,
                class_name: class.class_name.clone(),
                image_ids: set.image_ids(),
                prompt: attribute_prompt(&class.class_name),
            })
        })
        .collect()
}

pub fn emit_attribute_manifest(
    sample_sets: &[VisualSampleSet],
    bundle: &EmbeddingBundle,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let requests = attribute_requests(sample_sets, bundle)?;
    let mut json = serde_json::to_vec_pretty(&requests)?;
    json.push(b'\n');
    write_atomic(out_path.as_ref(), &json)
}
