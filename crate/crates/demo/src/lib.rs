//! Browser bindings for the alignment engine. Every export returns a JSON
//! string; errors are thrown as plain strings.

use otcil::alignment::{
    discriminative_scores, local_score, select_patches, similarity_matrix, sinkhorn, transport_cost,
};
use otcil::corpus::{generate_synthetic, SyntheticSpec};
use otcil::linalg::Matrix;
use otcil::replay::{record_statistics, GaussianSampler};
use otcil::rng::{self, rng_from_seed};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const PATCH_GRID: usize = 4;
const DIM: usize = 16;
const ATTRIBUTES: usize = 5;
const MAX_ITER: usize = 1000;
const TOL: f64 = 1e-9;

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

#[derive(Serialize)]
struct PlanView {
    plan: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    violation: f64,
}

/// Entropic transport plan for a row-major `rows × cols` cost matrix with
/// uniform marginals.
#[wasm_bindgen]
pub fn transport_plan(cost: Vec<f64>, row_count: usize, cols: usize, lambda: f64) -> Result<String, String> {
    if row_count * cols != cost.len() {
        return Err(format!(
            "expected {} cost entries, got {}",
            row_count * cols,
            cost.len()
        ));
    }
    let cost = Matrix::from_vec(row_count, cols, cost).map_err(|e| e.to_string())?;
    let p = sinkhorn(&cost, lambda, TOL, MAX_ITER).map_err(|e| e.to_string())?;
    to_json(&PlanView {
        violation: p.marginal_violation(),
        plan: rows(&p.plan),
        iterations: p.iterations,
        converged: p.converged,
    })
}

#[derive(Serialize)]
struct Correspondence {
    patch: usize,
    attribute: usize,
    weight: f64,
}

#[derive(Serialize)]
struct ClassView {
    class_id: u32,
    class_name: String,
    scores: Vec<f64>,
    selected: Vec<usize>,
    plan: Vec<Vec<f64>>,
    sigma: f64,
    top: Vec<Correspondence>,
}

#[derive(Serialize)]
struct AlignmentView {
    grid: usize,
    label: u32,
    attributes: usize,
    classes: Vec<ClassView>,
}

/// Draws one synthetic image of class 0 and aligns its patches to the
/// attributes of every class (two classes from the same family plus one
/// unrelated class). Shows the selected patches, plans and the three
/// strongest correspondences per class.
#[wasm_bindgen]
pub fn patch_alignment(seed: u32, noise: f64, k: usize, lambda: f64) -> Result<String, String> {
    let spec = SyntheticSpec {
        num_classes: 5,
        per_class: 1,
        dim: DIM,
        patches: PATCH_GRID * PATCH_GRID,
        attributes_per_class: ATTRIBUTES,
        noise_scale: noise,
    };
    let bundle = generate_synthetic(&spec, u64::from(seed)).map_err(|e| e.to_string())?;
    let image = &bundle.samples()[0];
    let mut classes = Vec::new();
    for class in bundle.classes().iter().filter(|c| [0, 1, 4].contains(&c.class_id)) {
        let sim = similarity_matrix(&image.patches, &class.attribute_embeddings, class.class_id)
            .map_err(|e| e.to_string())?;
        let scores = discriminative_scores(&sim);
        let selected = select_patches(&scores, k);
        let n = sim.attribute_count();
        let picked: Vec<f64> = selected
            .indices
            .iter()
            .flat_map(|&m| sim.values.row(m).to_vec())
            .collect();
        let sim_selected = Matrix::from_vec(selected.indices.len(), n, picked).map_err(|e| e.to_string())?;
        let plan = sinkhorn(&transport_cost(&sim_selected), lambda, TOL, MAX_ITER).map_err(|e| e.to_string())?;
        let sigma = local_score(&plan.plan, &sim_selected).map_err(|e| e.to_string())?;
        let mut top: Vec<Correspondence> = (0..selected.indices.len())
            .flat_map(|r| {
                let (plan, indices) = (&plan.plan, &selected.indices);
                (0..n).map(move |a| Correspondence {
                    patch: indices[r],
                    attribute: a,
                    weight: plan[(r, a)],
                })
            })
            .collect();
        top.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        top.truncate(3);
        classes.push(ClassView {
            class_id: class.class_id,
            class_name: class.class_name.clone(),
            scores,
            selected: selected.indices,
            plan: rows(&plan.plan),
            sigma,
            top,
        });
    }
    to_json(&AlignmentView {
        grid: PATCH_GRID,
        label: image.label,
        attributes: ATTRIBUTES,
        classes,
    })
}

#[derive(Serialize)]
struct ReplayView {
    real: Vec<[f64; 2]>,
    pseudo: Vec<[f64; 2]>,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

/// Fits a Gaussian to 60 correlated 2-D points and draws `count` pseudo
/// features from it.
#[wasm_bindgen]
pub fn replay_samples(seed: u32, count: usize, correlation: f64, diagonal: bool) -> Result<String, String> {
    if !(-1.0..=1.0).contains(&correlation) {
        return Err("correlation must lie in [-1, 1]".into());
    }
    let mut r = rng_from_seed(u64::from(seed));
    let side = (1.0 - correlation * correlation).sqrt();
    let real: Vec<[f64; 2]> = (0..60)
        .map(|_| {
            let (a, b) = (rng::standard_normal(&mut r), rng::standard_normal(&mut r));
            [1.0 + a, -0.5 + 0.6 * (correlation * a + side * b)]
        })
        .collect();
    let stats = record_statistics(0, &real).map_err(|e| e.to_string())?;
    let sampler = GaussianSampler::new(&stats, 1e-4, diagonal).map_err(|e| e.to_string())?;
    let pseudo = (0..count)
        .map(|_| {
            let v = sampler.sample(&mut r);
            [v[0], v[1]]
        })
        .collect();
    to_json(&ReplayView {
        real,
        pseudo,
        mean: stats.mean.clone(),
        covariance: rows(&stats.covariance),
    })
}
