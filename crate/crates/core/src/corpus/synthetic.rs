//! Seeded synthetic corpora standing in for encoder features.
//!
//! Classes come in families of [`FAMILY_SIZE`] consecutive ids. Each class
//! owns `attributes_per_class` random unit attribute directions, all but one
//! of which it shares with the rest of its family, so that siblings differ in
//! a single trait, as fine-grained categories do.
//! Half of an image's patches (at least one) are class-relevant: each is one
//! of the class's attribute directions, cycled from a random starting offset,
//! plus isotropic Gaussian noise of total scale `noise_scale`. The remaining
//! patches mix a small set of background directions shared by all classes.
//! The `[CLS]` row is the normalized mean of the class-relevant patches.
//!
//! The `[EOS]` row of a class is the normalized mean of its attribute
//! directions displaced by a shared offset and a per-class perturbation, so
//! that raw `[CLS]`/`[EOS]` cosines are informative but imperfect, as with a
//! real image/text modality gap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ClassAttributeSet, EmbeddingBundle, TokenEmbeddings};
use crate::linalg::{normalized, Matrix};
use crate::rng::{self, EngineRng, Stream};
use crate::{Error, Result};

pub const FAMILY_SIZE: usize = 4;
const BACKGROUND_DIRECTIONS: usize = 4;
const TEXT_OFFSET_SCALE: f64 = 0.6;
const TEXT_PERTURBATION_SCALE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub patches: usize,
    pub attributes_per_class: usize,
    pub noise_scale: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("per_class", self.per_class),
            ("dim", self.dim),
            ("patches", self.patches),
            ("attributes_per_class", self.attributes_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument("noise_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut EngineRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng::standard_normal(rng)).collect()
}

fn unit(rng: &mut EngineRng, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = normalized(&gaussian(rng, dim, 1.0)) {
            return v;
        }
    }
}

fn to_f32_precision(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn mean(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        for (acc, x) in m.iter_mut().zip(r) {
            *acc += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= rows.len() as f64);
    m
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let d = spec.dim;
    let mut r = rng::stream(seed, Stream::Synthetic, &[]);
    let noise_per_coord = spec.noise_scale / (d as f64).sqrt();

    let background: Vec<Vec<f64>> = (0..BACKGROUND_DIRECTIONS).map(|_| unit(&mut r, d)).collect();
    let text_offset: Vec<f64> = unit(&mut r, d).into_iter().map(|x| x * TEXT_OFFSET_SCALE).collect();

    let mut classes = Vec::with_capacity(spec.num_classes);
    let mut directions = Vec::with_capacity(spec.num_classes);
    let shared = spec.attributes_per_class - 1;
    let mut family: Vec<Vec<f64>> = Vec::new();
    for c in 0..spec.num_classes {
        if c % FAMILY_SIZE == 0 {
            family = (0..shared).map(|_| unit(&mut r, d)).collect();
        }
        let mut attrs = family.clone();
        attrs.push(unit(&mut r, d));
        let centre = normalized(&mean(&attrs, d)).unwrap_or_else(|_| attrs[0].clone());
        let perturbation = gaussian(&mut r, d, TEXT_PERTURBATION_SCALE / (d as f64).sqrt());
        let mut eos = normalized(&add(&add(&centre, &text_offset), &perturbation))?;
        to_f32_precision(&mut eos);
        let mut rows = attrs.clone();
        rows.iter_mut().for_each(|row| to_f32_precision(row));
        classes.push(ClassAttributeSet {
            class_id: c as u32,
            class_name: format!("class_{c:03}"),
            attribute_texts: (0..spec.attributes_per_class)
                .map(|j| format!("attribute {j} of class_{c:03}"))
                .collect(),
            attribute_embeddings: Matrix::from_rows(&rows)?,
            eos_embedding: eos,
        });
        directions.push(attrs);
    }

    let relevant = (spec.patches / 2).max(1);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (c, attrs) in directions.iter().enumerate() {
        for i in 0..spec.per_class {
            let offset = rng::uniform_index(&mut r, attrs.len());
            let mut patches = Vec::with_capacity(spec.patches);
            for k in 0..relevant {
                let dir = &attrs[(offset + k) % attrs.len()];
                patches.push(add(dir, &gaussian(&mut r, d, noise_per_coord)));
            }
            for _ in relevant..spec.patches {
                let mut bg = vec![0.0; d];
                for dir in &background {
                    let w = rng::uniform_f64(&mut r);
                    bg.iter_mut().zip(dir).for_each(|(b, x)| *b += w * x);
                }
                let bg = normalized(&bg).unwrap_or_else(|_| background[0].clone());
                patches.push(add(&bg, &gaussian(&mut r, d, noise_per_coord)));
            }
            let mut cls = normalized(&mean(&patches[..relevant], d))?;
            rng::shuffle(&mut patches, &mut r);
            to_f32_precision(&mut cls);
            patches.iter_mut().for_each(|p| to_f32_precision(p));
            samples.push(TokenEmbeddings {
                image_id: format!("c{c:03}_{i:04}"),
                label: c as u32,
                cls,
                patches: Matrix::from_rows(&patches)?,
            });
        }
    }

    let provenance = BTreeMap::from([
        ("encoder".to_string(), "synthetic".to_string()),
        ("seed".to_string(), seed.to_string()),
        ("spec".to_string(), serde_json::to_string(spec)?),
    ]);
    EmbeddingBundle::new(d, samples, classes, provenance)
}
