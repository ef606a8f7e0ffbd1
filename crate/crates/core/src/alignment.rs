//! Patch/attribute alignment: cosine similarity, class-aware patch scores,
//! top-K selection, entropic optimal transport and the local logits built
//! from transport-weighted similarity.

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassAttributeSet, TokenEmbeddings};
use crate::linalg::{cosine, dot, log_sum_exp, norm, softmax, Matrix};
use crate::projectors::ProjectorStack;
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_N: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Cosine similarities between `M` patches and `N` attributes of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub class_id: u32,
    pub values: Matrix,
}

impl SimilarityMatrix {
    pub fn patch_count(&self) -> usize {
        self.values.rows()
    }

    pub fn attribute_count(&self) -> usize {
        self.values.cols()
    }
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.row_iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm)
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn similarity_matrix(patches: &Matrix, attributes: &Matrix, class_id: u32) -> Result<SimilarityMatrix> {
    if patches.cols() != attributes.cols() {
        return Err(Error::DimensionMismatch {
            expected: patches.cols(),
            actual: attributes.cols(),
        });
    }
    let pn = row_norms(patches)?;
    let an = row_norms(attributes)?;
    let mut values = Matrix::zeros(patches.rows(), attributes.rows());
    for m in 0..patches.rows() {
        for n in 0..attributes.rows() {
            values[(m, n)] = dot(patches.row(m), attributes.row(n)) / (pn[m] * an[n]);
        }
    }
    Ok(SimilarityMatrix { class_id, values })
}

/// Mean similarity of each patch to the class's attributes.
pub fn discriminative_scores(sim: &SimilarityMatrix) -> Vec<f64> {
    let n = sim.attribute_count() as f64;
    sim.values.row_iter().map(|r| r.iter().sum::<f64>() / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPatches {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// The `k` highest scores in descending order, smaller index first on ties.
/// Asking for more patches than exist returns all of them.
pub fn select_patches(q: &[f64], k: usize) -> SelectedPatches {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    order.truncate(k.min(q.len()));
    SelectedPatches {
        scores: order.iter().map(|&i| q[i]).collect(),
        indices: order,
    }
}

/// `1 - sim`, entry-wise.
pub fn transport_cost(sim_selected: &Matrix) -> Matrix {
    let data = sim_selected.as_slice().iter().map(|s| 1.0 - s).collect();
    Matrix::from_vec(sim_selected.rows(), sim_selected.cols(), data).expect("same shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Largest deviation of a row sum from `1/K` or a column sum from `1/N`.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.plan)
    }
}

fn marginal_violation(plan: &Matrix) -> f64 {
    let (k, n) = (plan.rows(), plan.cols());
    let mut worst: f64 = 0.0;
    for r in plan.row_iter() {
        worst = worst.max((r.iter().sum::<f64>() - 1.0 / k as f64).abs());
    }
    for j in 0..n {
        let col: f64 = (0..k).map(|i| plan[(i, j)]).sum();
        worst = worst.max((col - 1.0 / n as f64).abs());
    }
    worst
}

/// Entropy-regularized transport with uniform marginals `1/K` and `1/N`.
///
/// Runs Sinkhorn's alternating projections on the dual potentials `f`, `g` in
/// the log domain, so the plan `exp((f_k + g_n - C_kn) / λ)` never
/// under- or overflows for small `λ`. Stops once both marginals are within
/// `tol` in the max norm, or after `max_iter` iterations with
/// `converged = false`.
pub fn sinkhorn(cost: &Matrix, lambda: f64, tol: f64, max_iter: usize) -> Result<TransportPlan> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    let (k, n) = (cost.rows(), cost.cols());
    if k == 0 || n == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    if !cost.is_finite() {
        return Err(Error::SinkhornFailure);
    }
    let log_a = -(k as f64).ln();
    let log_b = -(n as f64).ln();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; n];
    let mut plan = Matrix::zeros(k, n);

    for iteration in 1..=max_iter {
        for i in 0..k {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[(i, j)]) / lambda));
            f[i] = lambda * (log_a - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..k).map(|i| (f[i] - cost[(i, j)]) / lambda));
            g[j] = lambda * (log_b - lse);
        }
        for i in 0..k {
            for j in 0..n {
                plan[(i, j)] = ((f[i] + g[j] - cost[(i, j)]) / lambda).exp();
            }
        }
        if !plan.is_finite() {
            return Err(Error::SinkhornFailure);
        }
        if marginal_violation(&plan) <= tol {
            return Ok(TransportPlan {
                plan,
                iterations: iteration,
                converged: true,
            });
        }
    }
    Ok(TransportPlan {
        plan,
        iterations: max_iter,
        converged: false,
    })
}

/// `Σ_{k,n} Π(k,n) · sim(k,n)`.
pub fn local_score(plan: &Matrix, sim_selected: &Matrix) -> Result<f64> {
    if plan.rows() != sim_selected.rows() || plan.cols() != sim_selected.cols() {
        return Err(Error::DimensionMismatch {
            expected: plan.rows() * plan.cols(),
            actual: sim_selected.rows() * sim_selected.cols(),
        });
    }
    Ok(dot(plan.as_slice(), sim_selected.as_slice()))
}

/// How selected patches are matched to attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalAlignment {
    /// Sinkhorn transport plan.
    Transport,
    /// Uniform plan `1/(KN)`.
    Uniform,
    /// Each patch takes its best attribute: `mean_k max_n sim(k, n)`.
    NaiveMatch,
}

/// Which score ranks patches before the top-K cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSelection {
    /// Mean similarity to the class's attributes.
    Semantic,
    /// Seeded uniform scores.
    Random,
    /// Similarity to the class-name prompt (`[EOS]`).
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub k: usize,
    pub n: usize,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub alignment: LocalAlignment,
    pub selection: PatchSelection,
    /// Temperature of the softmax over local scores.
    pub temperature: f64,
    /// Seed for [`PatchSelection::Random`].
    pub selection_seed: u64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            n: DEFAULT_N,
            lambda: DEFAULT_LAMBDA,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            alignment: LocalAlignment::Transport,
            selection: PatchSelection::Semantic,
            temperature: 1.0,
            selection_seed: 1993,
        }
    }
}

/// Draws `n` distinct attribute rows out of `available` for a class.
pub fn sample_attribute_rows(available: usize, n: usize, seed: u64, class_id: u32, round: u64) -> Result<Vec<usize>> {
    if available < n {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} has {available} attributes, {n} required"
        )));
    }
    let mut rows: Vec<usize> = (0..available).collect();
    let mut r = rng::stream(seed, Stream::AttributeDraw, &[class_id as u64, round]);
    for i in 0..n {
        let j = i + rng::uniform_index(&mut r, available - i);
        rows.swap(i, j);
    }
    rows.truncate(n);
    Ok(rows)
}

/// The attribute rows and prompt of one candidate class, raw and adapted by
/// the local textual stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTexts {
    pub class_id: u32,
    pub raw_attributes: Matrix,
    pub attributes: Matrix,
    pub raw_prompt: Vec<f64>,
    pub prompt: Vec<f64>,
}

pub fn prepare_class_texts(class: &ClassAttributeSet, rows: &[usize], textual: &ProjectorStack) -> Result<ClassTexts> {
    let chosen: Vec<&[f64]> = rows
        .iter()
        .map(|&r| {
            (r < class.attribute_embeddings.rows())
                .then(|| class.attribute_embeddings.row(r))
                .ok_or_else(|| Error::InvalidArgument(format!("attribute row {r} out of range")))
        })
        .collect::<Result<_>>()?;
    let raw_attributes = Matrix::from_rows(&chosen)?;
    Ok(ClassTexts {
        class_id: class.class_id,
        attributes: textual.adapt_batch(&raw_attributes)?,
        raw_attributes,
        prompt: textual.adapt_feature(&class.eos_embedding)?,
        raw_prompt: class.eos_embedding.clone(),
    })
}

/// Forward record of one image against one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub class_id: u32,
    pub selected: SelectedPatches,
    /// `K x N` similarities of the selected patches.
    pub sim_selected: Matrix,
    /// `K x N` weights with `sigma = <weights, sim_selected>`.
    pub weights: Matrix,
    pub sigma: f64,
    pub converged: bool,
}

fn image_key(image_id: &str) -> u64 {
    // FNV-1a
    image_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Aligns adapted patches with one class's adapted attributes.
pub fn align_class(patches: &Matrix, texts: &ClassTexts, image_id: &str, cfg: &LocalConfig) -> Result<ClassAlignment> {
    let sim = similarity_matrix(patches, &texts.attributes, texts.class_id)?;
    let q = match cfg.selection {
        PatchSelection::Semantic => discriminative_scores(&sim),
        PatchSelection::Random => {
            let mut r = rng::stream(
                cfg.selection_seed,
                Stream::RandomSelection,
                &[image_key(image_id), texts.class_id as u64],
            );
            (0..patches.rows()).map(|_| rng::uniform_f64(&mut r)).collect()
        }
        PatchSelection::Prompt => patches
            .row_iter()
            .map(|p| cosine(p, &texts.prompt))
            .collect::<Result<_>>()?,
    };
    let selected = select_patches(&q, cfg.k);
    let (k, n) = (selected.indices.len(), sim.attribute_count());
    let mut sim_selected = Matrix::zeros(k, n);
    for (row, &m) in selected.indices.iter().enumerate() {
        sim_selected.row_mut(row).copy_from_slice(sim.values.row(m));
    }
    let (weights, converged) = match cfg.alignment {
        LocalAlignment::Transport => {
            let plan = sinkhorn(&transport_cost(&sim_selected), cfg.lambda, cfg.tol, cfg.max_iter)?;
            (plan.plan, plan.converged)
        }
        LocalAlignment::Uniform => (Matrix::filled(k, n, 1.0 / (k * n) as f64), true),
        LocalAlignment::NaiveMatch => {
            let mut w = Matrix::zeros(k, n);
            for row in 0..k {
                let best = crate::linalg::argmax(sim_selected.row(row));
                w[(row, best)] = 1.0 / k as f64;
            }
            (w, true)
        }
    };
    let sigma = local_score(&weights, &sim_selected)?;
    Ok(ClassAlignment {
        class_id: texts.class_id,
        selected,
        sim_selected,
        weights,
        sigma,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLogits {
    pub patches: Matrix,
    pub alignments: Vec<ClassAlignment>,
    pub sigma: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LocalLogits {
    pub fn nonconverged(&self) -> usize {
        self.alignments.iter().filter(|a| !a.converged).count()
    }
}

/// Local scores of one image against every candidate class and their softmax.
pub fn local_logits(
    image: &TokenEmbeddings,
    candidates: &[ClassTexts],
    visual: &ProjectorStack,
    cfg: &LocalConfig,
) -> Result<LocalLogits> {
    let patches = visual.adapt_batch(&image.patches)?;
    local_logits_adapted(patches, &image.image_id, candidates, cfg)
}

pub(crate) fn local_logits_adapted(
    patches: Matrix,
    image_id: &str,
    candidates: &[ClassTexts],
    cfg: &LocalConfig,
) -> Result<LocalLogits> {
    let alignments: Vec<ClassAlignment> = candidates
        .iter()
        .map(|t| align_class(&patches, t, image_id, cfg))
        .collect::<Result<_>>()?;
    let sigma: Vec<f64> = alignments.iter().map(|a| a.sigma).collect();
    let scaled: Vec<f64> = sigma.iter().map(|s| s / cfg.temperature).collect();
    Ok(LocalLogits {
        patches,
        alignments,
        probs: softmax(&scaled),
        sigma,
    })
}
