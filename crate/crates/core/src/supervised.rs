//! Supervised dictionary layers.
//!
//! Two formulations:
//! - a binary logistic layer, `‖X − DZ‖² + ridge·‖Z‖² + λ Σᵢ log(1 + exp(−yᵢ(θᵀzᵢ + b)))`;
//! - class-specific plus shared dictionaries with a hard support mask and a
//!   mutual incoherence penalty between the class dictionaries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dict_layer::{
    canonicalize_signs, code_least_squares, initial_dictionary, mod_raw, objective,
    repair_and_normalize, TrainedLayer,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngSeed};

/// Backtracking halvings tried before a gradient step is abandoned.
const MAX_BACKTRACKS: usize = 40;

/// Incoherence step length relative to the gradient norm.
const INCOHERENCE_STEP: f64 = 0.1;

/// `log(1 + exp(−m))`, linear once `−m > 30`.
fn softplus_neg(m: f64) -> f64 {
    if -m > 30.0 {
        -m
    } else {
        libm::log1p(libm::exp(-m))
    }
}

/// `σ(−m) = 1 / (1 + exp(m))`, the magnitude of `d/dm log(1 + exp(−m))`.
fn sigmoid_neg(m: f64) -> f64 {
    if m >= 0.0 {
        let e = libm::exp(-m);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + libm::exp(m))
    }
}

fn check_binary(y: &[i64]) -> Result<()> {
    match y.iter().position(|v| *v != 1 && *v != -1) {
        Some(index) => Err(Error::LabelDomain {
            index,
            value: y[index],
        }),
        None => Ok(()),
    }
}

/// Mean logistic loss `log(1 + exp(−yᵢ sᵢ))` for labels in `{−1, +1}`.
pub fn logistic_loss(y: &[i64], scores: &[f64]) -> Result<f64> {
    check_binary(y)?;
    if y.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            context: "logistic_loss",
            left: (1, y.len()),
            right: (1, scores.len()),
        });
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = y
        .iter()
        .zip(scores)
        .map(|(&yi, &s)| softplus_neg(yi as f64 * s))
        .sum();
    Ok(total / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticLayerSpec {
    pub atoms: usize,
    /// Weight of the classification term.
    pub lambda: f64,
    /// Gradient step as a fraction of the inverse Lipschitz bound.
    pub step: f64,
    /// Gradient steps per block and outer iteration.
    pub inner_iters: usize,
    pub max_iters: usize,
    pub ridge: f64,
    pub tol: f64,
    pub seed: RngSeed,
}

impl LogisticLayerSpec {
    pub fn new(atoms: usize, lambda: f64) -> Self {
        Self {
            atoms,
            lambda,
            step: 1.0,
            inner_iters: 10,
            max_iters: 50,
            ridge: 1e-8,
            tol: 1e-6,
            seed: RngSeed(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidSpec(msg));
        if self.atoms == 0 {
            return bad("a layer needs at least one atom".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad(format!("step must be positive, got {}", self.step));
        }
        if self.inner_iters == 0 || self.max_iters == 0 {
            return bad("inner_iters and max_iters must be positive".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be finite and >= 0, got {}", self.ridge));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        Ok(())
    }
}

/// Logistic layer: dictionary, codes and the linear decision `θᵀz + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDictionary {
    pub layer: TrainedLayer,
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl LogisticDictionary {
    /// `sign(θᵀz + b)` per code column, `+1` on zero.
    pub fn predict_codes(&self, z: &Matrix) -> Vec<i64> {
        scores(z, &self.theta, self.bias)
            .into_iter()
            .map(|s| if s >= 0.0 { 1 } else { -1 })
            .collect()
    }
}

fn scores(z: &Matrix, theta: &[f64], b: f64) -> Vec<f64> {
    let mut s = vec![b; z.cols()];
    for (k, t) in theta.iter().enumerate() {
        for (si, v) in s.iter_mut().zip(z.row(k)) {
            *si += t * v;
        }
    }
    s
}

/// Inputs of the logistic objective that stay fixed during training.
#[derive(Debug, Clone, Copy)]
pub struct LogisticProblem<'a> {
    pub x: &'a Matrix,
    pub y: &'a [i64],
    pub lambda: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticGradients {
    pub z: Matrix,
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl LogisticProblem<'_> {
    /// `‖X − DZ‖² + ridge·‖Z‖² + λ Σᵢ log(1 + exp(−yᵢ(θᵀzᵢ + b)))`.
    pub fn objective(&self, d: &Matrix, z: &Matrix, theta: &[f64], b: f64) -> f64 {
        objective(self.x, d, z, self.ridge) + self.lambda * self.classification(z, theta, b)
    }

    fn classification(&self, z: &Matrix, theta: &[f64], b: f64) -> f64 {
        scores(z, theta, b)
            .iter()
            .zip(self.y)
            .map(|(s, &yi)| softplus_neg(yi as f64 * s))
            .sum()
    }

    /// `λ · ∂ℓ/∂sᵢ` for every sample.
    fn score_weights(&self, z: &Matrix, theta: &[f64], b: f64) -> Vec<f64> {
        scores(z, theta, b)
            .iter()
            .zip(self.y)
            .map(|(s, &yi)| {
                let yi = yi as f64;
                -self.lambda * yi * sigmoid_neg(yi * s)
            })
            .collect()
    }

    /// Gradients of [`Self::objective`] with respect to `Z`, `θ` and `b`.
    pub fn gradients(&self, d: &Matrix, z: &Matrix, theta: &[f64], b: f64) -> LogisticGradients {
        let g = self.score_weights(z, theta, b);
        let residual = self.x.sub(&d.matmul(z));
        let mut gz = d.tr_matmul(&residual).scale(-2.0).add(&z.scale(2.0 * self.ridge));
        for (k, t) in theta.iter().enumerate() {
            for (v, gi) in gz.row_mut(k).iter_mut().zip(&g) {
                *v += t * gi;
            }
        }
        let gtheta = (0..z.rows())
            .map(|k| z.row(k).iter().zip(&g).map(|(a, b)| a * b).sum())
            .collect();
        LogisticGradients {
            z: gz,
            theta: gtheta,
            bias: g.iter().sum(),
        }
    }

    fn z_steps(&self, d: &Matrix, z: &mut Matrix, theta: &[f64], b: f64, spec: &LogisticLayerSpec) {
        let theta_sq: f64 = theta.iter().map(|t| t * t).sum();
        let lipschitz = 2.0 * libm::sqrt(d.tr_matmul(d).sum_sq())
            + self.lambda * theta_sq / 4.0
            + 2.0 * self.ridge;
        let mut current = self.objective(d, z, theta, b);
        for _ in 0..spec.inner_iters {
            let grad = self.gradients(d, z, theta, b).z;
            let mut step = spec.step / lipschitz;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let cand = z.sub(&grad.scale(step));
                let value = self.objective(d, &cand, theta, b);
                if value <= current {
                    *z = cand;
                    current = value;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }

    fn theta_steps(&self, d: &Matrix, z: &Matrix, theta: &mut Vec<f64>, b: &mut f64, spec: &LogisticLayerSpec) {
        let lipschitz = self.lambda * (z.sum_sq() + z.cols() as f64) / 4.0;
        if lipschitz <= 0.0 {
            return;
        }
        let mut current = self.classification(z, theta, *b);
        for _ in 0..spec.inner_iters {
            let grad = self.gradients(d, z, theta, *b);
            let mut step = spec.step / lipschitz;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let cand: Vec<f64> = theta.iter().zip(&grad.theta).map(|(t, g)| t - step * g).collect();
                let cand_b = *b - step * grad.bias;
                let value = self.classification(z, &cand, cand_b);
                if value <= current {
                    *theta = cand;
                    *b = cand_b;
                    current = value;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }
}

/// Trains the logistic layer by block-coordinate descent: dictionary by MOD,
/// codes from the better of the ridge least-squares solution and the rescaled
/// previous codes followed by gradient steps, then gradient steps on `θ, b`.
pub fn train_supervised_logistic(
    x: &Matrix,
    y: &[i64],
    spec: &LogisticLayerSpec,
) -> Result<LogisticDictionary> {
    spec.validate()?;
    check_binary(y)?;
    if x.cols() != y.len() {
        return Err(Error::ShapeMismatch {
            context: "train_supervised_logistic",
            left: x.shape(),
            right: (1, y.len()),
        });
    }
    if x.cols() == 0 {
        return Err(Error::InvalidSpec("training data has no samples".into()));
    }
    let problem = LogisticProblem {
        x,
        y,
        lambda: spec.lambda,
        ridge: spec.ridge,
    };
    let mut d = initial_dictionary(x, spec.atoms, spec.seed, false);
    let mut z = code_least_squares(&d, x, spec.ridge)?;
    let mut theta = vec![0.0; spec.atoms];
    let mut b = 0.0;
    problem.theta_steps(&d, &z, &mut theta, &mut b, spec);
    let mut trace = vec![problem.objective(&d, &z, &theta, b)];

    for iter in 0..spec.max_iters {
        let prev = *trace.last().expect("trace starts non-empty");

        let mut d_new = mod_raw(x, &z, spec.ridge)?;
        let scales = repair_and_normalize(&mut d_new, x, &z, &d);
        let mut z_kept = z.clone();
        let mut theta_new = theta.clone();
        for (k, s) in scales.iter().enumerate() {
            for v in z_kept.row_mut(k) {
                *v *= s;
            }
            theta_new[k] /= s;
        }
        let flips = canonicalize_signs(&mut d_new, Some(&mut z_kept));
        for (t, f) in theta_new.iter_mut().zip(&flips) {
            if *f {
                *t = -*t;
            }
        }

        let z_ls = code_least_squares(&d_new, x, spec.ridge)?;
        let mut z_new = if problem.objective(&d_new, &z_ls, &theta_new, b)
            <= problem.objective(&d_new, &z_kept, &theta_new, b)
        {
            z_ls
        } else {
            z_kept
        };
        problem.z_steps(&d_new, &mut z_new, &theta_new, b, spec);
        let mut b_new = b;
        problem.theta_steps(&d_new, &z_new, &mut theta_new, &mut b_new, spec);

        let cur = problem.objective(&d_new, &z_new, &theta_new, b_new);
        if !(cur <= prev) {
            log::debug!("logistic sweep {iter} raised the objective ({prev} -> {cur}); keeping previous state");
            trace.push(prev);
            break;
        }
        d = d_new;
        z = z_new;
        theta = theta_new;
        b = b_new;
        trace.push(cur);
        if prev <= 0.0 || (prev - cur) / prev < spec.tol {
            break;
        }
    }
    Ok(LogisticDictionary {
        layer: TrainedLayer {
            dictionary: d,
            codes: z,
            loss_trace: trace,
        },
        theta,
        bias: b,
    })
}

/// `Σ_{i≠j} ‖DᵢᵀDⱼ‖²` and its gradients `4 Σ_{j≠i} Dⱼ Dⱼᵀ Dᵢ`.
pub fn incoherence_penalty(dicts: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if let Some(first) = dicts.first() {
        if let Some(bad) = dicts.iter().find(|d| d.rows() != first.rows()) {
            return Err(Error::ShapeMismatch {
                context: "incoherence_penalty",
                left: first.shape(),
                right: bad.shape(),
            });
        }
    }
    let mut penalty = 0.0;
    let mut grads: Vec<Matrix> = dicts.iter().map(|d| Matrix::zeros(d.rows(), d.cols())).collect();
    for (i, di) in dicts.iter().enumerate() {
        for (j, dj) in dicts.iter().enumerate() {
            if i == j {
                continue;
            }
            let cross = dj.tr_matmul(di);
            penalty += cross.sum_sq();
            grads[i] = grads[i].add(&dj.matmul(&cross).scale(4.0));
        }
    }
    Ok((penalty, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDictSpec {
    pub classes: usize,
    pub atoms_per_class: usize,
    pub shared_atoms: usize,
    /// Weight of the incoherence penalty.
    pub eta: f64,
    pub ridge: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: RngSeed,
}

impl ClassDictSpec {
    pub fn new(classes: usize, atoms_per_class: usize, shared_atoms: usize) -> Self {
        Self {
            classes,
            atoms_per_class,
            shared_atoms,
            eta: 0.0,
            ridge: 1e-8,
            tol: 1e-6,
            max_iters: 100,
            seed: RngSeed(0),
        }
    }

    pub fn total_atoms(&self) -> usize {
        self.classes * self.atoms_per_class + self.shared_atoms
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            classes: self.classes,
            atoms_per_class: self.atoms_per_class,
            shared_atoms: self.shared_atoms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidSpec(msg));
        if self.classes == 0 || self.atoms_per_class == 0 {
            return bad("classes and atoms_per_class must be positive".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be finite and >= 0, got {}", self.ridge));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return bad("tol and max_iters must be positive".into());
        }
        Ok(())
    }
}

/// Row layout of class-dictionary codes: class 0 block, ..., class C−1 block, shared block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub classes: usize,
    pub atoms_per_class: usize,
    pub shared_atoms: usize,
}

impl BlockLayout {
    pub fn total_atoms(&self) -> usize {
        self.classes * self.atoms_per_class + self.shared_atoms
    }

    pub fn class_block(&self, class: usize) -> Range<usize> {
        class * self.atoms_per_class..(class + 1) * self.atoms_per_class
    }

    pub fn shared_block(&self) -> Range<usize> {
        let start = self.classes * self.atoms_per_class;
        start..start + self.shared_atoms
    }

    /// Atom indices a sample of `class` may use.
    pub fn support(&self, class: usize) -> Vec<usize> {
        self.class_block(class).chain(self.shared_block()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDictModel {
    pub layout: BlockLayout,
    pub per_class: Vec<Matrix>,
    /// `d × shared_atoms`, possibly with zero columns.
    pub shared: Matrix,
    /// Training codes in block layout.
    pub codes: Matrix,
    pub loss_trace: Vec<f64>,
}

impl ClassDictModel {
    /// All atoms side by side in block layout.
    pub fn dictionary(&self) -> Matrix {
        let mut blocks: Vec<&Matrix> = self.per_class.iter().collect();
        blocks.push(&self.shared);
        Matrix::hstack(&blocks)
    }

    /// Class whose blocks (own plus shared) reconstruct each column best.
    pub fn classify_by_residual(&self, x: &Matrix, ridge: f64) -> Result<Vec<usize>> {
        Ok(masked_codes_by_residual(&self.dictionary(), &self.layout, x, ridge)?.0)
    }
}

/// Ridge codes restricted to the blocks of each column's class.
pub fn masked_codes(
    d: &Matrix,
    layout: &BlockLayout,
    x: &Matrix,
    labels: &[usize],
    ridge: f64,
) -> Result<Matrix> {
    let mut z = Matrix::zeros(layout.total_atoms(), x.cols());
    for class in 0..layout.classes {
        let cols: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        if cols.is_empty() {
            continue;
        }
        let support = layout.support(class);
        let sub_d = d.select_columns(&support);
        let codes = code_least_squares(&sub_d, &x.select_columns(&cols), ridge)?;
        for (a, &row) in support.iter().enumerate() {
            for (b, &col) in cols.iter().enumerate() {
                z.set(row, col, codes.get(a, b));
            }
        }
    }
    Ok(z)
}

/// For every column, picks the class whose masked code reconstructs it with
/// the smallest residual (lowest class on ties) and returns that code.
pub fn masked_codes_by_residual(
    d: &Matrix,
    layout: &BlockLayout,
    x: &Matrix,
    ridge: f64,
) -> Result<(Vec<usize>, Matrix)> {
    if d.rows() != x.rows() || d.cols() != layout.total_atoms() {
        return Err(Error::ShapeMismatch {
            context: "masked_codes_by_residual",
            left: d.shape(),
            right: x.shape(),
        });
    }
    let n = x.cols();
    let mut best_class = vec![0usize; n];
    let mut best_res = vec![f64::INFINITY; n];
    for class in 0..layout.classes {
        let sub_d = d.select_columns(&layout.support(class));
        let codes = code_least_squares(&sub_d, x, ridge)?;
        let res = x.sub(&sub_d.matmul(&codes)).column_sq_norms();
        for i in 0..n {
            if res[i] < best_res[i] {
                best_res[i] = res[i];
                best_class[i] = class;
            }
        }
    }
    let z = masked_codes(d, layout, x, &best_class, ridge)?;
    Ok((best_class, z))
}

fn class_objective(x: &Matrix, d: &Matrix, z: &Matrix, spec: &ClassDictSpec, classes: &[Matrix]) -> Result<f64> {
    // With the hard support mask both fidelity terms coincide.
    let mut value = 2.0 * objective(x, d, z, spec.ridge);
    if spec.eta > 0.0 {
        value += spec.eta * incoherence_penalty(classes)?.0;
    }
    Ok(value)
}

fn split_blocks(d: &Matrix, layout: &BlockLayout) -> (Vec<Matrix>, Matrix) {
    let per_class = (0..layout.classes)
        .map(|c| {
            let r = layout.class_block(c);
            d.column_block(r.start, r.end)
        })
        .collect();
    let s = layout.shared_block();
    (per_class, d.column_block(s.start, s.end))
}

/// Trains class-specific dictionaries `D₁…D_C` and a shared dictionary `D_S`.
///
/// Samples of class `i` are coded on `[Dᵢ, D_S]` only. The dictionary step
/// solves each class block on its own samples (with the shared contribution
/// removed), then the shared block on what the class blocks leave, then takes
/// one normalized gradient step on the incoherence penalty when `η > 0`.
pub fn train_class_discriminative(
    x: &Matrix,
    labels: &[usize],
    spec: &ClassDictSpec,
) -> Result<ClassDictModel> {
    spec.validate()?;
    if x.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "train_class_discriminative",
            left: x.shape(),
            right: (1, labels.len()),
        });
    }
    if let Some(index) = labels.iter().position(|l| *l >= spec.classes) {
        return Err(Error::LabelDomain {
            index,
            value: labels[index] as i64,
        });
    }
    for class in 0..spec.classes {
        if !labels.contains(&class) {
            return Err(Error::ClassCoverage { class });
        }
    }
    let layout = spec.layout();
    let members: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| (0..labels.len()).filter(|i| labels[*i] == c).collect())
        .collect();
    let shared = layout.shared_block();

    let mut d = initial_dictionary(x, layout.total_atoms(), spec.seed, false);
    let mut z = masked_codes(&d, &layout, x, labels, spec.ridge)?;
    let mut trace = vec![class_objective(x, &d, &z, spec, &split_blocks(&d, &layout).0)?];

    for iter in 0..spec.max_iters {
        let prev = *trace.last().expect("trace starts non-empty");
        let mut raw = d.clone();
        let d_shared = d.column_block(shared.start, shared.end);
        let z_shared = z.row_block(shared.start, shared.end);

        for (class, cols) in members.iter().enumerate() {
            let block = layout.class_block(class);
            let x_c = x.select_columns(cols);
            let zs_c = z_shared.select_columns(cols);
            let target = x_c.sub(&d_shared.matmul(&zs_c));
            let z_c = z.row_block(block.start, block.end).select_columns(cols);
            let update = mod_raw(&target, &z_c, spec.ridge)?;
            for (a, col) in block.clone().enumerate() {
                raw.set_column(col, &update.column(a));
            }
        }
        if !shared.is_empty() {
            let mut class_fit = Matrix::zeros(x.rows(), x.cols());
            for class in 0..layout.classes {
                let block = layout.class_block(class);
                class_fit = class_fit.add(
                    &raw.column_block(block.start, block.end)
                        .matmul(&z.row_block(block.start, block.end)),
                );
            }
            let update = mod_raw(&x.sub(&class_fit), &z_shared, spec.ridge)?;
            for (a, col) in shared.clone().enumerate() {
                raw.set_column(col, &update.column(a));
            }
        }
        if spec.eta > 0.0 {
            let (classes, _) = split_blocks(&raw, &layout);
            let (_, grads) = incoherence_penalty(&classes)?;
            let norm = libm::sqrt(grads.iter().map(Matrix::sum_sq).sum::<f64>());
            if norm > 0.0 {
                let step = INCOHERENCE_STEP / norm;
                for (class, g) in grads.iter().enumerate() {
                    let block = layout.class_block(class);
                    for (a, col) in block.enumerate() {
                        let moved: Vec<f64> = raw
                            .column(col)
                            .iter()
                            .zip(g.column(a))
                            .map(|(v, gv)| v - step * gv)
                            .collect();
                        raw.set_column(col, &moved);
                    }
                }
            }
        }
        repair_and_normalize(&mut raw, x, &z, &d);
        canonicalize_signs(&mut raw, None);
        let z_new = masked_codes(&raw, &layout, x, labels, spec.ridge)?;
        let cur = class_objective(x, &raw, &z_new, spec, &split_blocks(&raw, &layout).0)?;

        if spec.eta == 0.0 && !(cur <= prev) {
            log::debug!("class sweep {iter} raised the objective ({prev} -> {cur}); keeping previous state");
            trace.push(prev);
            break;
        }
        d = raw;
        z = z_new;
        trace.push(cur);
        if prev <= 0.0 || libm::fabs(prev - cur) / prev < spec.tol {
            break;
        }
    }
    let (per_class, shared) = split_blocks(&d, &layout);
    Ok(ClassDictModel {
        layout,
        per_class,
        shared,
        codes: z,
        loss_trace: trace,
    })
}
