//! Embedding data model, bundle files, synthetic corpora and task schedules.

pub(crate) mod format;
mod schedule;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub use format::{load_bundle, write_atomic, write_bundle, MANIFEST_FILE};
pub use schedule::{split_tasks, TaskSchedule};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Token embeddings of one image: the `[CLS]` row and `M` patch rows.
///
/// Values are held as `f64` but are always representable as `f32`, which is
/// the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub image_id: String,
    pub label: u32,
    pub cls: Vec<f64>,
    pub patches: Matrix,
}

impl TokenEmbeddings {
    pub fn patch_count(&self) -> usize {
        self.patches.rows()
    }
}

/// Attribute texts of one class with their embeddings and the embedding of
/// the class-name prompt (`[EOS]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAttributeSet {
    pub class_id: u32,
    pub class_name: String,
    pub attribute_texts: Vec<String>,
    pub attribute_embeddings: Matrix,
    pub eos_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A validated corpus: samples, per-class attribute sets and provenance.
///
/// Class ids are remapped to dense indices `0..C` following the order of the
/// class table; [`EmbeddingBundle::class_index`] and
/// [`EmbeddingBundle::sample_class_index`] expose that mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    dim: usize,
    samples: Vec<TokenEmbeddings>,
    classes: Vec<ClassAttributeSet>,
    splits: Option<Vec<Split>>,
    provenance: BTreeMap<String, String>,
    class_lookup: HashMap<u32, usize>,
    sample_classes: Vec<usize>,
}

impl EmbeddingBundle {
    pub fn new(
        dim: usize,
        samples: Vec<TokenEmbeddings>,
        classes: Vec<ClassAttributeSet>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        Self::with_splits(dim, samples, classes, None, provenance)
    }

    pub fn with_splits(
        dim: usize,
        samples: Vec<TokenEmbeddings>,
        classes: Vec<ClassAttributeSet>,
        splits: Option<Vec<Split>>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidBundle("dimension must be positive".into()));
        }
        let mut class_lookup = HashMap::with_capacity(classes.len());
        for (i, class) in classes.iter().enumerate() {
            validate_class(dim, class)?;
            if class_lookup.insert(class.class_id, i).is_some() {
                return Err(Error::InvalidBundle(format!("duplicate class id {}", class.class_id)));
            }
        }
        let mut ids = HashSet::with_capacity(samples.len());
        let mut sample_classes = Vec::with_capacity(samples.len());
        for sample in &samples {
            validate_sample(dim, sample)?;
            if !ids.insert(sample.image_id.as_str()) {
                return Err(Error::InvalidBundle(format!(
                    "duplicate image id {:?}",
                    sample.image_id
                )));
            }
            let index = class_lookup.get(&sample.label).ok_or_else(|| {
                Error::InvalidBundle(format!(
                    "label {} of image {:?} has no attribute set",
                    sample.label, sample.image_id
                ))
            })?;
            sample_classes.push(*index);
        }
        if let Some(splits) = &splits {
            if splits.len() != samples.len() {
                return Err(Error::InvalidBundle(format!(
                    "{} split entries for {} samples",
                    splits.len(),
                    samples.len()
                )));
            }
        }
        Ok(Self {
            dim,
            samples,
            classes,
            splits,
            provenance,
            class_lookup,
            sample_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[TokenEmbeddings] {
        &self.samples
    }

    pub fn classes(&self) -> &[ClassAttributeSet] {
        &self.classes
    }

    pub fn splits(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Dense index of a class id.
    pub fn class_index(&self, class_id: u32) -> Option<usize> {
        self.class_lookup.get(&class_id).copied()
    }

    /// Dense class index of sample `i`.
    pub fn sample_class_index(&self, i: usize) -> usize {
        self.sample_classes[i]
    }

    /// Sample indices of each dense class, in manifest order.
    pub fn samples_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, &c) in self.sample_classes.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Train/test partition as sorted sample index lists.
    ///
    /// Uses the bundle's own split marks when present; otherwise each class's
    /// samples are shuffled with a seeded stream and `floor(count / 5)` of them
    /// become test samples (an 80/20 split).
    pub fn train_test_split(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        if let Some(splits) = &self.splits {
            let train = (0..splits.len()).filter(|&i| splits[i] == Split::Train).collect();
            let test = (0..splits.len()).filter(|&i| splits[i] == Split::Test).collect();
            return (train, test);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, mut members) in self.samples_by_class().into_iter().enumerate() {
            let class_id = self.classes[c].class_id;
            let mut r = rng::stream(seed, Stream::TrainTestSplit, &[class_id as u64]);
            rng::shuffle(&mut members, &mut r);
            let n_test = members.len() / 5;
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidBundle(format!("non-finite value in {what}")))
    }
}

fn validate_sample(dim: usize, sample: &TokenEmbeddings) -> Result<()> {
    if sample.cls.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: sample.cls.len(),
        });
    }
    if sample.patches.rows() == 0 {
        return Err(Error::InvalidBundle(format!(
            "image {:?} has no patch tokens",
            sample.image_id
        )));
    }
    if sample.patches.cols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: sample.patches.cols(),
        });
    }
    check_finite(&sample.cls, &sample.image_id)?;
    check_finite(sample.patches.as_slice(), &sample.image_id)
}

fn validate_class(dim: usize, class: &ClassAttributeSet) -> Result<()> {
    if class.eos_embedding.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: class.eos_embedding.len(),
        });
    }
    if class.attribute_embeddings.rows() > 0 && class.attribute_embeddings.cols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: class.attribute_embeddings.cols(),
        });
    }
    if class.attribute_texts.len() != class.attribute_embeddings.rows() {
        return Err(Error::InvalidBundle(format!(
            "class {} has {} attribute texts but {} embeddings",
            class.class_id,
            class.attribute_texts.len(),
            class.attribute_embeddings.rows()
        )));
    }
    let what = format!("class {}", class.class_id);
    check_finite(&class.eos_embedding, &what)?;
    check_finite(class.attribute_embeddings.as_slice(), &what)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(id: u32, dim: usize) -> ClassAttributeSet {
        ClassAttributeSet {
            class_id: id,
            class_name: format!("c{id}"),
            attribute_texts: vec!["a".into()],
            attribute_embeddings: Matrix::filled(1, dim, 1.0),
            eos_embedding: vec![1.0; dim],
        }
    }

    fn sample(id: &str, label: u32, dim: usize) -> TokenEmbeddings {
        TokenEmbeddings {
            image_id: id.into(),
            label,
            cls: vec![1.0; dim],
            patches: Matrix::filled(2, dim, 0.5),
        }
    }

    #[test]
    fn rejects_duplicate_image_ids() {
        let err = EmbeddingBundle::new(
            2,
            vec![sample("a", 0, 2), sample("a", 0, 2)],
            vec![class(0, 2)],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate image id"));
    }

    #[test]
    fn rejects_label_without_attribute_set() {
        let err = EmbeddingBundle::new(2, vec![sample("a", 7, 2)], vec![class(0, 2)], BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("no attribute set"));
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut s = sample("a", 0, 2);
        s.cls[1] = f64::NAN;
        assert!(EmbeddingBundle::new(2, vec![s], vec![class(0, 2)], BTreeMap::new()).is_err());
    }

    #[test]
    fn labels_map_to_dense_indices() {
        let b = EmbeddingBundle::new(
            2,
            vec![sample("a", 40, 2), sample("b", 7, 2)],
            vec![class(7, 2), class(40, 2)],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(b.sample_class_index(0), 1);
        assert_eq!(b.sample_class_index(1), 0);
        assert_eq!(b.class_index(40), Some(1));
    }

    #[test]
    fn default_split_is_eighty_twenty_per_class() {
        let samples: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), (i % 2) as u32, 2)).collect();
        let b = EmbeddingBundle::new(2, samples, vec![class(0, 2), class(1, 2)], BTreeMap::new()).unwrap();
        let (train, test) = b.train_test_split(1993);
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(b.train_test_split(1993), (train, test));
    }
}
