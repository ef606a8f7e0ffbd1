//! Task-specific affine projectors whose outputs are summed across tasks.
//!
//! For a stack holding projectors `1..=b`, the adapted feature is
//! `Σ_i (W_i v + c_i)`. Only the most recent projector is trainable; older
//! ones are frozen and never written again. Task 1 starts at the identity,
//! later tasks start at zero so that opening a task leaves every output
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Decoder, Encoder};
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    VisualLocal,
    TextualLocal,
    VisualGlobal,
    TextualGlobal,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::VisualLocal,
        Branch::TextualLocal,
        Branch::VisualGlobal,
        Branch::TextualGlobal,
    ];

    pub(crate) fn code(self) -> u8 {
        match self {
            Branch::VisualLocal => 0,
            Branch::TextualLocal => 1,
            Branch::VisualGlobal => 2,
            Branch::TextualGlobal => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub task_index: u32,
    pub frozen: bool,
}

impl Projector {
    /// `out += W v + c`.
    pub fn apply_acc(&self, v: &[f64], out: &mut [f64]) {
        self.weight.mul_vec_acc(v, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorStack {
    branch: Branch,
    dim: usize,
    projectors: Vec<Projector>,
}

impl ProjectorStack {
    pub fn new(branch: Branch, dim: usize) -> Self {
        Self {
            branch,
            dim,
            projectors: Vec::new(),
        }
    }

    pub fn from_parts(branch: Branch, dim: usize, projectors: Vec<Projector>) -> Result<Self> {
        for (i, p) in projectors.iter().enumerate() {
            if p.weight.rows() != dim || p.weight.cols() != dim || p.bias.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: p.bias.len(),
                });
            }
            if p.task_index as usize != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "projector {i} has task index {}",
                    p.task_index
                )));
            }
            if !p.frozen && i + 1 != projectors.len() {
                return Err(Error::InvalidArgument(
                    "only the last projector may be trainable".into(),
                ));
            }
        }
        Ok(Self {
            branch,
            dim,
            projectors,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    pub fn len(&self) -> usize {
        self.projectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projectors.is_empty()
    }

    /// Freezes every projector and appends a trainable one for the next task.
    pub fn begin_task(&mut self) {
        for p in &mut self.projectors {
            p.frozen = true;
        }
        let task_index = self.projectors.len() as u32 + 1;
        let weight = if task_index == 1 {
            Matrix::identity(self.dim)
        } else {
            Matrix::zeros(self.dim, self.dim)
        };
        self.projectors.push(Projector {
            weight,
            bias: vec![0.0; self.dim],
            task_index,
            frozen: false,
        });
    }

    /// Freezes the last projector without opening a new task.
    pub fn freeze_all(&mut self) {
        for p in &mut self.projectors {
            p.frozen = true;
        }
    }

    /// The unfrozen projector, if any.
    pub fn trainable_mut(&mut self) -> Option<&mut Projector> {
        self.projectors.last_mut().filter(|p| !p.frozen)
    }

    pub fn trainable(&self) -> Option<&Projector> {
        self.projectors.last().filter(|p| !p.frozen)
    }

    /// The stack as it stood after task `tasks`: the first `tasks` projectors,
    /// all frozen.
    pub fn truncated(&self, tasks: usize) -> Self {
        let mut projectors = self.projectors[..tasks.min(self.projectors.len())].to_vec();
        projectors.iter_mut().for_each(|p| p.frozen = true);
        Self {
            branch: self.branch,
            dim: self.dim,
            projectors,
        }
    }

    /// `Σ_i (W_i v + c_i)`, summed in task order.
    pub fn adapt_feature(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if self.projectors.is_empty() {
            return Err(Error::InvalidArgument("projector stack is empty".into()));
        }
        let mut out = vec![0.0; self.dim];
        for p in &self.projectors {
            p.apply_acc(v, &mut out);
        }
        Ok(out)
    }

    /// Row-wise [`adapt_feature`](Self::adapt_feature).
    pub fn adapt_batch(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: rows.cols(),
            });
        }
        let mut out = Matrix::zeros(rows.rows(), self.dim);
        for i in 0..rows.rows() {
            let adapted = self.adapt_feature(rows.row(i))?;
            out.row_mut(i).copy_from_slice(&adapted);
        }
        Ok(out)
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.branch.code());
        enc.u32(self.dim as u32);
        enc.u32(self.projectors.len() as u32);
        for p in &self.projectors {
            enc.u32(p.task_index);
            enc.u8(p.frozen as u8);
            enc.f64s(p.weight.as_slice());
            enc.f64s(&p.bias);
        }
    }

    pub(crate) fn decode(dec: &mut Decoder) -> Result<Self> {
        let code = dec.u8()?;
        let branch =
            Branch::from_code(code).ok_or_else(|| Error::CorruptCheckpoint(format!("unknown branch code {code}")))?;
        let dim = dec.u32()? as usize;
        let count = dec.u32()? as usize;
        let mut projectors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let task_index = dec.u32()?;
            let frozen = dec.u8()? != 0;
            let weight = Matrix::from_vec(dim, dim, dec.f64s(dim * dim)?)?;
            let bias = dec.f64s(dim)?;
            projectors.push(Projector {
                weight,
                bias,
                task_index,
                frozen,
            });
        }
        Self::from_parts(branch, dim, projectors).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    /// Serialized parameters with magic, version and CRC32.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    /// Rebuilds a stack from [`snapshot`](Self::snapshot) bytes, requiring
    /// dimension `dim`.
    pub fn restore(bytes: &[u8], dim: usize) -> Result<Self> {
        let mut dec = checkpoint::open(bytes)?;
        let stack = Self::decode(&mut dec)?;
        dec.finish()?;
        if stack.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: stack.dim,
            });
        }
        Ok(stack)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::{self, rng_from_seed};

    fn random_stack(seed: u64, dim: usize, tasks: usize) -> ProjectorStack {
        let mut r = rng_from_seed(seed);
        let mut s = ProjectorStack::new(Branch::VisualLocal, dim);
        for _ in 0..tasks {
            s.begin_task();
            let p = s.trainable_mut().unwrap();
            p.weight
                .as_mut_slice()
                .iter_mut()
                .for_each(|w| *w = rng::standard_normal(&mut r));
            p.bias.iter_mut().for_each(|b| *b = rng::standard_normal(&mut r));
        }
        s
    }

    fn random_vec(seed: u64, dim: usize) -> Vec<f64> {
        let mut r = rng_from_seed(seed);
        (0..dim).map(|_| rng::standard_normal(&mut r)).collect()
    }

    #[test]
    fn begin_task_initialization() {
        let mut s = ProjectorStack::new(Branch::TextualGlobal, 4);
        s.begin_task();
        assert_eq!(s.len(), 1);
        assert_eq!(s.projectors()[0].weight, Matrix::identity(4));
        assert!(!s.projectors()[0].frozen);
        assert_eq!(
            s.adapt_feature(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );

        s.begin_task();
        s.begin_task();
        assert_eq!(s.len(), 3);
        assert!(s.projectors()[0].frozen && s.projectors()[1].frozen);
        assert_eq!(s.projectors()[2].weight, Matrix::zeros(4, 4));
        assert!(s.trainable().is_some());
    }

    #[test]
    fn second_zero_projector_adds_nothing() {
        let mut s = ProjectorStack::new(Branch::VisualLocal, 3);
        s.begin_task();
        let before = s.adapt_feature(&[1.0, 2.0, 3.0]).unwrap();
        s.begin_task();
        assert_eq!(s.adapt_feature(&[1.0, 2.0, 3.0]).unwrap(), before);
        assert_eq!(before, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adapt_matches_per_projector_sum() {
        let s = random_stack(4, 5, 3);
        let v = random_vec(8, 5);
        let got = s.adapt_feature(&v).unwrap();
        let mut expected = vec![0.0; 5];
        for p in s.projectors() {
            for i in 0..5 {
                let mut acc = p.bias[i];
                for j in 0..5 {
                    acc += p.weight[(i, j)] * v[j];
                }
                expected[i] += acc;
            }
        }
        for i in 0..5 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_row_loop() {
        let s = random_stack(1, 16, 2);
        let rows: Vec<Vec<f64>> = (0..64).map(|i| random_vec(100 + i, 16)).collect();
        let batch = s.adapt_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = s.adapt_feature(row).unwrap();
            for j in 0..16 {
                assert!((batch[(i, j)] - single[j]).abs() <= 1e-12);
            }
        }
        let one = s.adapt_batch(&Matrix::from_rows(&rows[..1]).unwrap()).unwrap();
        assert_eq!(one.row(0), s.adapt_feature(&rows[0]).unwrap().as_slice());
        let mut swapped = rows.clone();
        swapped.swap(0, 1);
        let out = s.adapt_batch(&Matrix::from_rows(&swapped).unwrap()).unwrap();
        assert_eq!(out.row(0), batch.row(1));
        assert_eq!(out.row(1), batch.row(0));
    }

    #[test]
    fn dimension_mismatch() {
        let s = random_stack(1, 4, 1);
        assert!(matches!(s.adapt_feature(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let s = random_stack(2, 4, 3);
        let bytes = s.snapshot();
        let r = ProjectorStack::restore(&bytes, 4).unwrap();
        assert_eq!(r, s);
        let v = random_vec(3, 4);
        assert_eq!(
            r.adapt_feature(&v)
                .unwrap()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>(),
            s.adapt_feature(&v)
                .unwrap()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        );
        assert!(matches!(
            ProjectorStack::restore(&bytes, 8),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut corrupt = bytes.clone();
        corrupt[20] ^= 0x40;
        assert!(matches!(
            ProjectorStack::restore(&corrupt, 4),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn frozen_projectors_survive_later_training() {
        let mut s = random_stack(6, 4, 1);
        s.begin_task();
        let frozen = s.truncated(1).snapshot();
        let p = s.trainable_mut().unwrap();
        p.weight.as_mut_slice().iter_mut().for_each(|w| *w += 0.5);
        p.bias[0] = 3.0;
        assert_eq!(s.truncated(1).snapshot(), frozen);
    }

    #[test]
    fn stacks_are_independent() {
        let a = random_stack(1, 3, 1);
        let mut b = a.clone();
        let v = [0.2, -0.1, 0.9];
        let before = a.adapt_feature(&v).unwrap();
        b.trainable_mut().unwrap().bias[1] = 10.0;
        assert_eq!(a.adapt_feature(&v).unwrap(), before);
    }

    proptest! {
        #[test]
        fn affine_identity(seed in any::<u64>()) {
            let s = random_stack(seed, 6, 3);
            let u = random_vec(seed ^ 1, 6);
            let v = random_vec(seed ^ 2, 6);
            let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
            let lhs = s.adapt_feature(&sum).unwrap();
            let zero = s.adapt_feature(&[0.0; 6]).unwrap();
            let fu = s.adapt_feature(&u).unwrap();
            let fv = s.adapt_feature(&v).unwrap();
            for i in 0..6 {
                prop_assert!((lhs[i] + zero[i] - fu[i] - fv[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn opening_a_task_preserves_outputs(seed in any::<u64>(), tasks in 1usize..4) {
            let mut s = random_stack(seed, 5, tasks);
            let probes: Vec<Vec<f64>> = (0..8).map(|i| random_vec(seed.wrapping_add(i), 5)).collect();
            let before: Vec<Vec<f64>> = probes.iter().map(|p| s.adapt_feature(p).unwrap()).collect();
            s.begin_task();
            for (p, b) in probes.iter().zip(&before) {
                prop_assert_eq!(&s.adapt_feature(p).unwrap(), b);
            }
        }
    }
}
