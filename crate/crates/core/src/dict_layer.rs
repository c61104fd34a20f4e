//! Single-layer dictionary learning by alternating minimization.
//!
//! A layer fits `X ≈ D Z` with unit-norm atoms (columns of `D`). Each sweep
//! updates the dictionary (method of optimal directions or multiplicative
//! updates), renormalizes the atoms and recomputes the codes. The objective
//! `‖X − DZ‖²_F + ridge·‖Z‖²_F` is recorded after every code step; a sweep
//! that would increase it is rolled back and ends training, so the recorded
//! trace never increases.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    normalize_columns, seeded_gaussian, solve_normal_equations, Matrix, RngSeed, ZERO_COLUMN_TOL,
};

/// Denominator guard of the multiplicative updates.
pub const MULTIPLICATIVE_EPS: f64 = 1e-12;

/// Multiplicative code updates performed per code step.
const MULTIPLICATIVE_CODE_SWEEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionarySolver {
    /// Method of optimal directions: `D = X Zᵀ (Z Zᵀ + ridge·I)⁻¹`.
    #[default]
    Mod,
    /// Nonnegative multiplicative updates for both `D` and `Z`.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coder {
    /// Dense ridge least-squares codes.
    #[default]
    RidgeLs,
    /// Orthogonal matching pursuit with at most `sparsity` atoms per sample.
    Omp,
}

/// Hyperparameters of one dictionary layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub atoms: usize,
    pub solver: DictionarySolver,
    pub coder: Coder,
    /// Nonzeros per code column when `coder` is OMP.
    pub sparsity: usize,
    pub ridge: f64,
    pub max_iters: usize,
    /// Training stops once the relative objective change drops below this.
    pub tol: f64,
    pub seed: RngSeed,
}

impl LayerSpec {
    pub fn new(atoms: usize) -> Self {
        Self {
            atoms,
            solver: DictionarySolver::Mod,
            coder: Coder::RidgeLs,
            sparsity: atoms.clamp(1, 5),
            ridge: 1e-8,
            max_iters: 100,
            tol: 1e-6,
            seed: RngSeed(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidSpec(msg));
        if self.atoms == 0 {
            return bad("a layer needs at least one atom".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be finite and >= 0, got {}", self.ridge));
        }
        if self.coder == Coder::Omp && !(1..=self.atoms).contains(&self.sparsity) {
            return bad(format!(
                "sparsity {} must lie in 1..={}",
                self.sparsity, self.atoms
            ));
        }
        if self.solver == DictionarySolver::Multiplicative && self.coder != Coder::RidgeLs {
            return bad("the multiplicative solver computes its own nonnegative codes; use coder ridge_ls".into());
        }
        Ok(())
    }
}

/// Result of [`train_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLayer {
    /// `d × K`, unit-norm columns.
    pub dictionary: Matrix,
    /// `K × n` training codes from the last code step.
    pub codes: Matrix,
    /// Objective after the initial code step and after every accepted sweep.
    pub loss_trace: Vec<f64>,
}

/// `‖X − DZ‖²_F + ridge·‖Z‖²_F`.
pub fn objective(x: &Matrix, d: &Matrix, z: &Matrix, ridge: f64) -> f64 {
    x.sub(&d.matmul(z)).sum_sq() + ridge * z.sum_sq()
}

fn check_rows(context: &'static str, d: &Matrix, x: &Matrix) -> Result<()> {
    if d.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            context,
            left: d.shape(),
            right: x.shape(),
        });
    }
    Ok(())
}

/// Ridge least-squares codes: `argmin_Z ‖X − DZ‖² + ridge·‖Z‖²`.
pub fn code_least_squares(d: &Matrix, x: &Matrix, ridge: f64) -> Result<Matrix> {
    check_rows("code_least_squares", d, x)?;
    solve_normal_equations(&d.tr_matmul(d), &d.tr_matmul(x), ridge)
}

/// Orthogonal matching pursuit on every column of `x`.
///
/// Each round picks the atom with the largest `|dⱼᵀ r|` (lowest index on
/// ties), refits all selected coefficients by least squares and updates the
/// residual. Atoms are assumed unit-norm. A column stops early once its
/// residual is numerically orthogonal to every atom, or when the selected
/// atoms become linearly dependent.
pub fn sparse_code_omp(d: &Matrix, x: &Matrix, sparsity: usize) -> Result<Matrix> {
    check_rows("sparse_code_omp", d, x)?;
    let k = d.cols();
    if sparsity > k {
        return Err(Error::InvalidSpec(format!(
            "sparsity {sparsity} exceeds the {k} available atoms"
        )));
    }
    let gram = d.tr_matmul(d);
    let corr0 = d.tr_matmul(x);
    let x_norms = x.column_sq_norms();
    let n = x.cols();
    let mut z = Matrix::zeros(k, n);

    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    let mut corr = vec![0.0; k];
    for i in 0..n {
        support.clear();
        for (j, c) in corr.iter_mut().enumerate() {
            *c = corr0.get(j, i);
        }
        let floor = 1e-14 * libm::sqrt(x_norms[i]);
        let mut coef: Vec<f64> = Vec::new();
        for _ in 0..sparsity {
            let mut best = None;
            let mut best_val = floor;
            for (j, c) in corr.iter().enumerate() {
                if c.abs() > best_val && !support.contains(&j) {
                    best_val = c.abs();
                    best = Some(j);
                }
            }
            let Some(j) = best else { break };
            support.push(j);
            let s = support.len();
            let sub_gram = Matrix::from_fn(s, s, |a, b| gram.get(support[a], support[b]));
            let rhs = Matrix::from_fn(s, 1, |a, _| corr0.get(support[a], i));
            match solve_normal_equations(&sub_gram, &rhs, 0.0) {
                Ok(sol) => coef = sol.into_vec(),
                Err(Error::SolverSingular { .. }) => {
                    support.pop();
                    break;
                }
                Err(e) => return Err(e),
            }
            for (jj, c) in corr.iter_mut().enumerate() {
                let fitted: f64 = support
                    .iter()
                    .zip(&coef)
                    .map(|(&a, &w)| gram.get(jj, a) * w)
                    .sum();
                *c = corr0.get(jj, i) - fitted;
            }
        }
        for (&j, &w) in support.iter().zip(&coef) {
            z.set(j, i, w);
        }
    }
    Ok(z)
}

pub(crate) fn mod_raw(x: &Matrix, z: &Matrix, ridge: f64) -> Result<Matrix> {
    if x.cols() != z.cols() {
        return Err(Error::ShapeMismatch {
            context: "update_dictionary_mod",
            left: x.shape(),
            right: z.shape(),
        });
    }
    let dt = solve_normal_equations(&z.matmul_tr(z), &z.matmul_tr(x), ridge)?;
    Ok(dt.transpose())
}

/// Method of optimal directions: `D = X Zᵀ (Z Zᵀ + ridge·I)⁻¹`, columns then
/// normalized.
pub fn update_dictionary_mod(x: &Matrix, z: &Matrix, ridge: f64) -> Result<Matrix> {
    Ok(normalize_columns(&mod_raw(x, z, ridge)?)?.0)
}

pub(crate) fn require_nonnegative(name: &'static str, m: &Matrix) -> Result<()> {
    match m.as_slice().iter().position(|v| *v < 0.0) {
        Some(pos) => Err(Error::NonNegativityViolation {
            matrix: name,
            row: pos / m.cols(),
            col: pos % m.cols(),
        }),
        None => Ok(()),
    }
}

/// One multiplicative dictionary update before normalization:
/// `D ⊙ (X Zᵀ) ⊘ (D Z Zᵀ + ε)`.
pub fn multiplicative_dictionary_step(x: &Matrix, z: &Matrix, d_prev: &Matrix) -> Result<Matrix> {
    if x.cols() != z.cols() || d_prev.rows() != x.rows() || d_prev.cols() != z.rows() {
        return Err(Error::ShapeMismatch {
            context: "update_dictionary_multiplicative",
            left: x.shape(),
            right: d_prev.shape(),
        });
    }
    require_nonnegative("data", x)?;
    require_nonnegative("codes", z)?;
    require_nonnegative("dictionary", d_prev)?;
    let num = x.matmul_tr(z);
    let den = d_prev.matmul(&z.matmul_tr(z));
    Ok(Matrix::from_fn(d_prev.rows(), d_prev.cols(), |r, c| {
        d_prev.get(r, c) * num.get(r, c) / (den.get(r, c) + MULTIPLICATIVE_EPS)
    }))
}

/// [`multiplicative_dictionary_step`] followed by column normalization.
pub fn update_dictionary_multiplicative(x: &Matrix, z: &Matrix, d_prev: &Matrix) -> Result<Matrix> {
    Ok(normalize_columns(&multiplicative_dictionary_step(x, z, d_prev)?)?.0)
}

fn multiplicative_codes(d: &Matrix, x: &Matrix, z0: Matrix, ridge: f64) -> Matrix {
    let gram = d.tr_matmul(d);
    let num = d.tr_matmul(x);
    let mut z = z0;
    for _ in 0..MULTIPLICATIVE_CODE_SWEEPS {
        let den = gram.matmul(&z);
        for ((v, n), g) in z.data_mut().iter_mut().zip(num.as_slice()).zip(den.as_slice()) {
            *v *= n / (g + ridge * *v + MULTIPLICATIVE_EPS);
        }
    }
    z
}

/// Seeded Gaussian dictionary with unit-norm columns. Rows on which `x` is
/// identically zero start at zero (they can only add reconstruction error);
/// `nonnegative` takes absolute values for the multiplicative solver.
pub fn initial_dictionary(x: &Matrix, atoms: usize, seed: RngSeed, nonnegative: bool) -> Matrix {
    let raw = seeded_gaussian(x.rows(), atoms, seed);
    let raw = if nonnegative { raw.map(f64::abs) } else { raw };
    let mut zero_rows = vec![true; x.rows()];
    for (r, z) in zero_rows.iter_mut().enumerate() {
        *z = x.row(r).iter().all(|v| *v == 0.0);
    }
    let masked = Matrix::from_fn(x.rows(), atoms, |r, c| {
        if zero_rows[r] {
            0.0
        } else {
            raw.get(r, c)
        }
    });
    let mut out = masked;
    let norms = out.column_sq_norms();
    for (c, n) in norms.iter().enumerate() {
        if libm::sqrt(*n) <= ZERO_COLUMN_TOL {
            out.set_column(c, &raw.column(c));
        }
    }
    // A d × K Gaussian column is zero with probability 0.
    normalize_columns(&out).expect("gaussian initial dictionary has a zero column").0
}

/// Flips every atom so that its largest-magnitude entry (lowest row on ties)
/// is positive, and flips the matching code rows.
pub(crate) fn canonicalize_signs(d: &mut Matrix, z: Option<&mut Matrix>) -> Vec<bool> {
    let mut flips = vec![false; d.cols()];
    for (c, flip) in flips.iter_mut().enumerate() {
        let mut best = 0.0f64;
        for r in 0..d.rows() {
            let v = d.get(r, c);
            if v.abs() > best.abs() {
                best = v;
            }
        }
        *flip = best < 0.0;
    }
    for r in 0..d.rows() {
        for (v, f) in d.row_mut(r).iter_mut().zip(&flips) {
            if *f {
                *v = -*v;
            }
        }
    }
    if let Some(z) = z {
        for (row, f) in flips.iter().enumerate() {
            if *f {
                for v in z.row_mut(row) {
                    *v = -*v;
                }
            }
        }
    }
    flips
}

/// Replaces near-zero columns of an unnormalized dictionary update with the
/// worst-reconstructed data columns (largest residual, lowest index first),
/// then normalizes. Returns the column scales that were divided out.
pub(crate) fn repair_and_normalize(
    raw: &mut Matrix,
    x: &Matrix,
    z: &Matrix,
    previous: &Matrix,
) -> Vec<f64> {
    let norms: Vec<f64> = raw.column_sq_norms().into_iter().map(libm::sqrt).collect();
    let max_norm = norms.iter().fold(0.0f64, |m, v| m.max(*v));
    let dead: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n <= ZERO_COLUMN_TOL || **n <= 1e-10 * max_norm)
        .map(|(j, _)| j)
        .collect();
    if !dead.is_empty() {
        let residual = x.sub(&raw.matmul(z)).column_sq_norms();
        let data_norms = x.column_sq_norms();
        let mut order: Vec<usize> = (0..x.cols()).filter(|i| data_norms[*i] > 0.0).collect();
        // Stable sort keeps the lowest index first among equal residuals.
        order.sort_by(|a, b| residual[*b].total_cmp(&residual[*a]));
        let mut next = order.into_iter();
        for j in dead {
            match next.next() {
                Some(i) => raw.set_column(j, &x.column(i)),
                None => raw.set_column(j, &previous.column(j)),
            }
        }
    }
    let norms: Vec<f64> = raw.column_sq_norms().into_iter().map(libm::sqrt).collect();
    for r in 0..raw.rows() {
        for (v, s) in raw.row_mut(r).iter_mut().zip(&norms) {
            *v /= s;
        }
    }
    norms
}

fn code_step(d: &Matrix, x: &Matrix, spec: &LayerSpec, warm: Option<Matrix>) -> Result<Matrix> {
    match (spec.solver, spec.coder) {
        (DictionarySolver::Multiplicative, _) => {
            let z0 = match warm {
                Some(z) => z,
                None => d.tr_matmul(x),
            };
            Ok(multiplicative_codes(d, x, z0, spec.ridge))
        }
        (DictionarySolver::Mod, Coder::RidgeLs) => code_least_squares(d, x, spec.ridge),
        (DictionarySolver::Mod, Coder::Omp) => sparse_code_omp(d, x, spec.sparsity),
    }
}

/// Learns a dictionary for `x` (`d × n`, one sample per column).
pub fn train_layer(x: &Matrix, spec: &LayerSpec) -> Result<TrainedLayer> {
    spec.validate()?;
    if x.cols() == 0 {
        return Err(Error::InvalidSpec("training data has no samples".into()));
    }
    let multiplicative = spec.solver == DictionarySolver::Multiplicative;
    if multiplicative {
        require_nonnegative("data", x)?;
    }
    let mut d = initial_dictionary(x, spec.atoms, spec.seed, multiplicative);
    let mut z = code_step(&d, x, spec, None)?;
    let mut trace = vec![objective(x, &d, &z, spec.ridge)];

    for iter in 0..spec.max_iters {
        let prev = *trace.last().expect("trace starts non-empty");
        let (d_new, z_new) = if multiplicative {
            let mut raw = multiplicative_dictionary_step(x, &z, &d)?;
            let scales = repair_and_normalize(&mut raw, x, &z, &d);
            let mut warm = z.clone();
            for (row, s) in scales.iter().enumerate() {
                for v in warm.row_mut(row) {
                    *v *= s;
                }
            }
            let z_new = code_step(&raw, x, spec, Some(warm))?;
            (raw, z_new)
        } else {
            let mut raw = mod_raw(x, &z, spec.ridge)?;
            repair_and_normalize(&mut raw, x, &z, &d);
            canonicalize_signs(&mut raw, None);
            let z_new = code_step(&raw, x, spec, None)?;
            (raw, z_new)
        };
        let cur = objective(x, &d_new, &z_new, spec.ridge);
        if !(cur <= prev) {
            log::debug!("sweep {iter} raised the objective ({prev} -> {cur}); keeping previous state");
            trace.push(prev);
            break;
        }
        d = d_new;
        z = z_new;
        trace.push(cur);
        if prev <= 0.0 || (prev - cur) / prev < spec.tol {
            break;
        }
    }
    Ok(TrainedLayer {
        dictionary: d,
        codes: z,
        loss_trace: trace,
    })
}
