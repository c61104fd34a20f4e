//! Label-consistent final layer.
//!
//! The joint problem
//! `‖V − D Z‖² + μ‖T − M Z‖²` (and, with a discriminative code `H`,
//! `+ μ‖H − W Z‖²`) is a plain dictionary-learning problem on the stacked
//! data `[V; √μ·T; √μ·H]` with the stacked dictionary `[D; √μ·M; √μ·W]`.
//! After training, the data block is renormalized to unit atoms and the scale
//! moves into the classifier blocks and the codes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dict_layer::{train_layer, LayerSpec};
use crate::error::{Error, Result};
use crate::numerics::{solve_normal_equations, Matrix, ZERO_COLUMN_TOL};

/// One-hot targets, `C × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix(Matrix);

impl TargetMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }
}

/// Builds one-hot targets for labels in `0..classes`.
pub fn build_targets(labels: &[usize], classes: usize) -> Result<TargetMatrix> {
    let mut t = Matrix::zeros(classes, labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelDomain {
                index: i,
                value: l as i64,
            });
        }
        t.set(l, i, 1.0);
    }
    Ok(TargetMatrix(t))
}

/// Class owning each final-layer atom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomAllocation {
    class_of_atom: Vec<usize>,
    classes: usize,
}

impl AtomAllocation {
    pub fn new(class_of_atom: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(bad) = class_of_atom.iter().find(|c| **c >= classes) {
            return Err(Error::InvalidSpec(format!(
                "atom assigned to class {bad}, but there are only {classes} classes"
            )));
        }
        Ok(Self {
            class_of_atom,
            classes,
        })
    }

    /// Contiguous blocks whose sizes differ by at most one; the first
    /// `atoms mod classes` classes get the extra atom.
    pub fn uniform(atoms: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidSpec("at least one class is required".into()));
        }
        let base = atoms / classes;
        let extra = atoms % classes;
        let mut class_of_atom = Vec::with_capacity(atoms);
        for c in 0..classes {
            let n = base + usize::from(c < extra);
            class_of_atom.extend(core::iter::repeat(c).take(n));
        }
        Self::new(class_of_atom, classes)
    }

    pub fn class_of_atom(&self) -> &[usize] {
        &self.class_of_atom
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn atoms(&self) -> usize {
        self.class_of_atom.len()
    }

    pub fn atoms_of(&self, class: usize) -> usize {
        self.class_of_atom.iter().filter(|c| **c == class).count()
    }
}

/// Binary `K × n` code: `H[k, i] = 1` iff atom `k` belongs to the class of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeCode(Matrix);

impl DiscriminativeCode {
    /// Wraps an arbitrary binary `K × n` matrix, for codes that do not follow
    /// the label pattern.
    pub fn from_matrix(h: Matrix, allocation: &AtomAllocation) -> Result<Self> {
        if h.rows() != allocation.atoms() {
            return Err(Error::ShapeMismatch {
                context: "discriminative code rows vs allocated atoms",
                left: h.shape(),
                right: (allocation.atoms(), h.cols()),
            });
        }
        if let Some(pos) = h.as_slice().iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidSpec(format!(
                "discriminative code entry ({}, {}) is not 0 or 1",
                pos / h.cols(),
                pos % h.cols()
            )));
        }
        Ok(Self(h))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn build_discriminative_code(
    labels: &[usize],
    allocation: &AtomAllocation,
) -> Result<DiscriminativeCode> {
    let atoms = allocation.atoms();
    let mut h = Matrix::zeros(atoms, labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l >= allocation.classes() {
            return Err(Error::LabelDomain {
                index: i,
                value: l as i64,
            });
        }
        if allocation.atoms_of(l) == 0 {
            return Err(Error::AllocationGap { class: l });
        }
        for (k, &c) in allocation.class_of_atom().iter().enumerate() {
            if c == l {
                h.set(k, i, 1.0);
            }
        }
    }
    Ok(DiscriminativeCode(h))
}

/// Trained final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLayerModel {
    /// `d × K`, unit-norm columns.
    pub dictionary: Matrix,
    /// `C × K` linear classifier.
    pub classifier: Matrix,
    /// `K × K` label-consistency map (second variant only).
    pub consistency: Option<Matrix>,
    pub mu: f64,
    pub allocation: Option<AtomAllocation>,
}

impl FinalLayerModel {
    pub fn atoms(&self) -> usize {
        self.dictionary.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier.rows()
    }

    /// `‖V − DZ‖² + μ‖T − MZ‖² (+ μ‖H − WZ‖²)`, without the ridge term.
    pub fn fidelity(
        &self,
        v: &Matrix,
        t: &TargetMatrix,
        h: Option<&DiscriminativeCode>,
        z: &Matrix,
    ) -> f64 {
        let mut f = v.sub(&self.dictionary.matmul(z)).sum_sq()
            + self.mu * t.as_matrix().sub(&self.classifier.matmul(z)).sum_sq();
        if let (Some(h), Some(w)) = (h, &self.consistency) {
            f += self.mu * h.as_matrix().sub(&w.matmul(z)).sum_sq();
        }
        f
    }
}

/// A trained final layer with its training codes and the stacked objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayerFit {
    pub model: FinalLayerModel,
    /// Training codes, rescaled to match the unit-norm data dictionary.
    pub codes: Matrix,
    pub loss_trace: Vec<f64>,
}

fn check_columns(v: &Matrix, other: &Matrix, context: &'static str) -> Result<()> {
    if v.cols() != other.cols() {
        return Err(Error::ShapeMismatch {
            context,
            left: v.shape(),
            right: other.shape(),
        });
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidSpec(format!("mu must be finite and >= 0, got {mu}")));
    }
    Ok(())
}

/// Stacked data `[V; √μ·blocks...]`.
pub fn stack_training_data(v: &Matrix, mu: f64, blocks: &[&Matrix]) -> Matrix {
    let w = libm::sqrt(mu);
    let scaled: Vec<Matrix> = blocks.iter().map(|b| b.scale(w)).collect();
    let mut all: Vec<&Matrix> = vec![v];
    all.extend(scaled.iter());
    Matrix::vstack(&all)
}

/// Splits a stacked dictionary trained on `[V; √μ·B₁; √μ·B₂; ...]` into a
/// unit-norm data dictionary and unscaled label maps, moving the column
/// scales into the codes.
fn unstack(
    stacked: &Matrix,
    codes: &Matrix,
    data_rows: usize,
    block_rows: &[usize],
    mu: f64,
) -> Result<(Matrix, Vec<Matrix>, Matrix)> {
    let top = stacked.row_block(0, data_rows);
    let scales: Vec<f64> = top.column_sq_norms().into_iter().map(libm::sqrt).collect();
    if let Some(column) = scales.iter().position(|s| *s <= ZERO_COLUMN_TOL) {
        return Err(Error::DegenerateAtom { column });
    }
    let dictionary = Matrix::from_fn(top.rows(), top.cols(), |r, c| top.get(r, c) / scales[c]);
    let w = libm::sqrt(mu);
    let mut maps = Vec::with_capacity(block_rows.len());
    let mut start = data_rows;
    for &rows in block_rows {
        let block = stacked.row_block(start, start + rows);
        maps.push(Matrix::from_fn(rows, block.cols(), |r, c| {
            block.get(r, c) / (w * scales[c])
        }));
        start += rows;
    }
    let codes = Matrix::from_fn(codes.rows(), codes.cols(), |r, c| codes.get(r, c) * scales[r]);
    Ok((dictionary, maps, codes))
}

/// `argmin_M ‖B − M Z‖² + ridge·‖M‖²`, used when `μ = 0` leaves the label maps
/// out of the stacked problem.
fn fit_map(target: &Matrix, codes: &Matrix, ridge: f64) -> Result<Matrix> {
    let sol = solve_normal_equations(&codes.matmul_tr(codes), &codes.matmul_tr(target), ridge)?;
    Ok(sol.transpose())
}

fn train_stacked(
    v: &Matrix,
    blocks: &[&Matrix],
    mu: f64,
    spec: &LayerSpec,
) -> Result<(Matrix, Vec<Matrix>, Matrix, Vec<f64>)> {
    check_mu(mu)?;
    let stacked = stack_training_data(v, mu, blocks);
    let layer = train_layer(&stacked, spec)?;
    let rows: Vec<usize> = blocks.iter().map(|b| b.rows()).collect();
    if mu > 0.0 {
        let (d, maps, z) = unstack(&layer.dictionary, &layer.codes, v.rows(), &rows, mu)?;
        Ok((d, maps, z, layer.loss_trace))
    } else {
        // The label rows are identically zero: the data block already has unit
        // atoms and the maps are fitted to the learned codes afterwards.
        let d = layer.dictionary.row_block(0, v.rows());
        let z = layer.codes;
        let maps = blocks
            .iter()
            .map(|b| fit_map(b, &z, spec.ridge))
            .collect::<Result<Vec<_>>>()?;
        Ok((d, maps, z, layer.loss_trace))
    }
}

/// Dictionary plus linear classifier: `‖V − DZ‖² + μ‖T − MZ‖²`.
pub fn train_lcksvd1(
    v: &Matrix,
    targets: &TargetMatrix,
    mu: f64,
    spec: &LayerSpec,
) -> Result<FinalLayerFit> {
    check_columns(v, targets.as_matrix(), "train_lcksvd1")?;
    let (dictionary, mut maps, codes, loss_trace) =
        train_stacked(v, &[targets.as_matrix()], mu, spec)?;
    let classifier = maps.remove(0);
    Ok(FinalLayerFit {
        model: FinalLayerModel {
            dictionary,
            classifier,
            consistency: None,
            mu,
            allocation: None,
        },
        codes,
        loss_trace,
    })
}

/// Adds the label-consistency term: `‖V − DZ‖² + μ(‖T − MZ‖² + ‖H − WZ‖²)`.
pub fn train_lcksvd2(
    v: &Matrix,
    targets: &TargetMatrix,
    code: &DiscriminativeCode,
    allocation: &AtomAllocation,
    mu: f64,
    spec: &LayerSpec,
) -> Result<FinalLayerFit> {
    check_columns(v, targets.as_matrix(), "train_lcksvd2")?;
    check_columns(v, code.as_matrix(), "train_lcksvd2")?;
    if code.as_matrix().rows() != spec.atoms || allocation.atoms() != spec.atoms {
        return Err(Error::ShapeMismatch {
            context: "train_lcksvd2: discriminative code rows vs atoms",
            left: code.as_matrix().shape(),
            right: (spec.atoms, allocation.atoms()),
        });
    }
    let (dictionary, mut maps, codes, loss_trace) =
        train_stacked(v, &[targets.as_matrix(), code.as_matrix()], mu, spec)?;
    let consistency = maps.pop();
    let classifier = maps.remove(0);
    Ok(FinalLayerFit {
        model: FinalLayerModel {
            dictionary,
            classifier,
            consistency,
            mu,
            allocation: Some(allocation.clone()),
        },
        codes,
        loss_trace,
    })
}

/// Predicted class per column (argmax of `M Z`, lowest index on ties) and the scores.
pub fn classify(model: &FinalLayerModel, z: &Matrix) -> Result<(Vec<usize>, Matrix)> {
    if z.rows() != model.atoms() {
        return Err(Error::ShapeMismatch {
            context: "classify",
            left: model.classifier.shape(),
            right: z.shape(),
        });
    }
    let scores = model.classifier.matmul(z);
    Ok((argmax_columns(&scores), scores))
}

pub(crate) fn argmax_columns(scores: &Matrix) -> Vec<usize> {
    (0..scores.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..scores.rows() {
                if scores.get(r, c) > scores.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict_layer::objective;
    use crate::numerics::{seeded_gaussian, RngSeed};

    #[test]
    fn targets() {
        let t = build_targets(&[0, 1, 0], 2).unwrap();
        assert_eq!(
            t.as_matrix(),
            &Matrix::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]).unwrap()
        );
        let t = build_targets(&[0, 0], 1).unwrap();
        assert_eq!(t.as_matrix().as_slice(), &[1.0, 1.0]);
        assert_eq!(
            build_targets(&[5], 3),
            Err(Error::LabelDomain { index: 0, value: 5 })
        );
    }

    #[test]
    fn uniform_allocation_is_balanced() {
        let a = AtomAllocation::uniform(7, 3).unwrap();
        assert_eq!(a.class_of_atom(), &[0, 0, 0, 1, 1, 2, 2]);
        for atoms in 1..20 {
            for classes in 1..6 {
                let a = AtomAllocation::uniform(atoms, classes).unwrap();
                let counts: Vec<usize> = (0..classes).map(|c| a.atoms_of(c)).collect();
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                assert!(max - min <= 1);
                assert_eq!(counts.iter().sum::<usize>(), atoms);
            }
        }
    }

    #[test]
    fn discriminative_code_pattern() {
        let a = AtomAllocation::new(vec![0, 0, 1, 1], 2).unwrap();
        let h = build_discriminative_code(&[0, 1], &a).unwrap();
        assert_eq!(h.as_matrix().column(0), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(h.as_matrix().column(1), vec![0.0, 0.0, 1.0, 1.0]);

        let one = AtomAllocation::uniform(3, 1).unwrap();
        let h = build_discriminative_code(&[0, 0], &one).unwrap();
        assert!(h.as_matrix().as_slice().iter().all(|v| *v == 1.0));

        let gap = AtomAllocation::uniform(2, 3).unwrap();
        assert_eq!(
            build_discriminative_code(&[2], &gap),
            Err(Error::AllocationGap { class: 2 })
        );
    }

    #[test]
    fn classify_examples() {
        let model = FinalLayerModel {
            dictionary: Matrix::identity(3),
            classifier: Matrix::identity(3),
            consistency: None,
            mu: 1.0,
            allocation: None,
        };
        let z = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.5]]).unwrap();
        let (labels, scores) = classify(&model, &z).unwrap();
        assert_eq!(labels, vec![1, 0]);
        assert_eq!(scores.shape(), (3, 2));
        assert!(classify(&model, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn unstack_moves_scale_into_maps_and_codes() {
        let v = seeded_gaussian(4, 9, RngSeed(1));
        let t = build_targets(&[0, 1, 2, 0, 1, 2, 0, 1, 2], 3).unwrap();
        let mu = 2.0;
        let mut spec = LayerSpec::new(3);
        spec.max_iters = 5;
        let stacked = stack_training_data(&v, mu, &[t.as_matrix()]);
        let layer = train_layer(&stacked, &spec).unwrap();
        let fit = train_lcksvd1(&v, &t, mu, &spec).unwrap();
        let direct = objective(&stacked, &layer.dictionary, &layer.codes, 0.0);
        let split = fit.model.fidelity(&v, &t, None, &fit.codes);
        assert!((direct - split).abs() <= 1e-9 * direct.max(1.0), "{direct} vs {split}");
        for n in fit.model.dictionary.column_sq_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
