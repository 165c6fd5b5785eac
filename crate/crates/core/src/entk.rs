//! Empirical NTK assembly.
//!
//! For a model `f: ℝᵈ → ℝᶜ` with parameters `θ`, the eNTK between two inputs
//! is the `C × C` matrix `K(x₁, x₂) = J(x₁) J(x₂)ᵀ` with `J = ∂f/∂θ`. Over a
//! set of `N` points it is reduced to a symmetric matrix in one of three
//! ways ([`Collapse`]): a single class block, the class trace, or the full
//! `NC × NC` flattened kernel with row `class · N + datum`.
//!
//! Both architectures have closed forms; the modular MLP kernels are built
//! from hidden activations without materialising any Jacobian.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{matrix_to_csv, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::io::{f64_from_le_bytes, f64_le_bytes, sha256_hex, write_atomic};
use crate::linalg::{
    cholesky, eigh_descending, eigh_topk_operator, eigvalsh_descending, orthonormalize_rows,
    Matrix, SolverTag, Spectrum, SymMatrix, SymOperator, TopkOptions,
};
use crate::models::{
    modmlp_forward, modmlp_forward_batch, modmlp_jacobian, tms_forward, tms_jacobian,
    ImportanceSpec, LayerSelection, ModMlpParams, ModelParams, TmsParams,
};
use crate::scalar::Real;

/// Dense kernels above this dimension need an explicit override.
pub const DEFAULT_DENSE_CAP: usize = 6000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    PerClass(usize),
    Flattened,
    ClassTrace,
}

/// Which points of a dataset the kernel is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Every row of the dataset (the full lattice for modular addition).
    #[default]
    Full,
    Train,
    Test,
}

impl EvalSet {
    pub fn select<T: Real>(&self, ds: &Dataset<T>) -> Result<Dataset<T>> {
        match (self, ds.split()) {
            (EvalSet::Full, _) => {
                let mut all = ds.clone();
                all.meta.split = None;
                Ok(all)
            }
            (EvalSet::Train, Some(s)) => Ok(ds.select(&s.train_idx)),
            (EvalSet::Test, Some(s)) => Ok(ds.select(&s.test_idx)),
            (EvalSet::Train, None) => Ok(ds.clone()),
            (EvalSet::Test, None) => {
                Err(Error::InvalidArgument("dataset has no test split".into()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub collapse: Collapse,
    pub layers: LayerSelection,
    /// Importance-rescaling exponent; class `i` Jacobian rows are scaled by
    /// `I_i^{β/2}`.
    pub beta: f64,
    pub importance: ImportanceSpec,
    /// Centre Jacobians over the evaluation set, i.e. `K ← H K H` with
    /// `H = I − 11ᵀ/N` applied within every class block.
    pub center: bool,
    pub eval_set: EvalSet,
    pub checkpoint: Option<usize>,
}

impl KernelSpec {
    /// Class-trace, all layers, centred, full lattice.
    pub fn modadd_default() -> Self {
        Self {
            collapse: Collapse::ClassTrace,
            layers: LayerSelection::All,
            beta: 0.0,
            importance: ImportanceSpec::default(),
            center: true,
            eval_set: EvalSet::Full,
            checkpoint: None,
        }
    }

    /// Flattened, uncentred, on the training set.
    pub fn tms_default() -> Self {
        Self {
            collapse: Collapse::Flattened,
            center: false,
            eval_set: EvalSet::Train,
            ..Self::modadd_default()
        }
    }

    pub fn with_layers(mut self, layers: LayerSelection) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_collapse(mut self, collapse: Collapse) -> Self {
        self.collapse = collapse;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_center(mut self, center: bool) -> Self {
        self.center = center;
        self
    }

    pub fn at_checkpoint(mut self, epoch: usize) -> Self {
        self.checkpoint = Some(epoch);
        self
    }

    pub fn validate<T: Real>(&self, params: &ModelParams<T>, n_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        match params {
            ModelParams::Tms(_) if self.layers != LayerSelection::All => {
                return Err(Error::InvalidArgument(
                    "layer selection applies to the modular MLP only".into(),
                ))
            }
            ModelParams::ModMlp(_) if self.beta != 0.0 => {
                return Err(Error::InvalidArgument(
                    "importance rescaling applies to TMS only".into(),
                ))
            }
            _ => {}
        }
        if let Collapse::PerClass(c) = self.collapse {
            if c >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range (C = {n_classes})"
                )));
            }
        }
        Ok(())
    }

    fn class_scales<T: Real>(&self, n_classes: usize) -> Vec<T> {
        let w = self.importance.weights::<f64>(n_classes);
        w.into_iter()
            .map(|i| T::lit(i.powf(self.beta / 2.0)))
            .collect()
    }
}

/// An assembled kernel with its provenance.
#[derive(Clone, Debug)]
pub struct KernelMatrix<T> {
    pub spec: KernelSpec,
    pub matrix: SymMatrix<T>,
    pub n_data: usize,
    pub n_classes: usize,
}

impl<T: Real> KernelMatrix<T> {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Row of `(datum, class)`; for non-flattened kernels the class is ignored.
    pub fn index_map(&self, datum: usize, class: usize) -> usize {
        flat_index(self.spec.collapse, self.n_data, datum, class)
    }

    /// Diagonal `N × N` block `(i, i)` of a flattened kernel.
    pub fn class_block(&self, i: usize, j: usize) -> Result<Matrix<T>> {
        if self.spec.collapse != Collapse::Flattened {
            return Err(Error::InvalidArgument(
                "class blocks exist only for flattened kernels".into(),
            ));
        }
        let n = self.n_data;
        Ok(Matrix::from_fn(n, n, |a, b| {
            self.matrix.get(i * n + a, j * n + b)
        }))
    }

    /// `λ_min / λ_max` (negative values indicate loss of semi-definiteness).
    pub fn psd_ratio(&self) -> Result<T> {
        let vals = eigvalsh_descending(&self.matrix)?;
        let top = vals.first().copied().unwrap_or(T::zero());
        let bottom = vals.last().copied().unwrap_or(T::zero());
        Ok(if top > T::zero() {
            bottom / top
        } else {
            T::zero()
        })
    }
}

pub fn flat_index(collapse: Collapse, n_data: usize, datum: usize, class: usize) -> usize {
    match collapse {
        Collapse::Flattened => class * n_data + datum,
        _ => datum,
    }
}

/// `C × C` eNTK block between two inputs, restricted to `layers`.
pub fn entk_block<T: Real>(
    params: &ModelParams<T>,
    x1: &[T],
    x2: &[T],
    layers: LayerSelection,
) -> Result<Matrix<T>> {
    match params {
        ModelParams::Tms(p) => {
            if layers != LayerSelection::All {
                return Err(Error::InvalidArgument(
                    "layer selection applies to the modular MLP only".into(),
                ));
            }
            tms_block(p, x1, x2)
        }
        ModelParams::ModMlp(p) => modmlp_block(p, x1, x2, layers),
    }
}

/// `K_ij = g_i g'_j [G_ij (x₁·x₂) + x₁_j (G x₂)_i + x₂_i (G x₁)_j + δ_ij (h₁·h₂ + 1)]`
/// with `G = WᵀW`, `h = Wx` and ReLU gates `g`.
fn tms_block<T: Real>(p: &TmsParams<T>, x1: &[T], x2: &[T]) -> Result<Matrix<T>> {
    let g1 = crate::models::tms_gates(p, x1)?;
    let g2 = crate::models::tms_gates(p, x2)?;
    let n = p.features();
    let gram = p.gram();
    let gx1 = gram.matvec(x1);
    let gx2 = gram.matvec(x2);
    let h1 = p.w.matvec(x1);
    let h2 = p.w.matvec(x2);
    let x12 = crate::linalg::dot(x1, x2);
    let h12 = crate::linalg::dot(&h1, &h2);
    Ok(Matrix::from_fn(n, n, |i, j| {
        if g1[i] == T::zero() || g2[j] == T::zero() {
            return T::zero();
        }
        let mut v = gram[(i, j)] * x12 + x1[j] * gx2[i] + x2[i] * gx1[j];
        if i == j {
            v += h12 + T::one();
        }
        v
    }))
}

/// Layer 1: `4 (x₁·x₂) Σ_k W2_ik W2_jk h₁_k h₂_k`; layer 2: `δ_ij Σ_k h₁_k² h₂_k²`.
fn modmlp_block<T: Real>(
    p: &ModMlpParams<T>,
    x1: &[T],
    x2: &[T],
    layers: LayerSelection,
) -> Result<Matrix<T>> {
    let h1 = p.w1.matvec(x1);
    let h2 = p.w1.matvec(x2);
    if x2.len() != x1.len() {
        return Err(Error::Shape("inputs differ in length".into()));
    }
    let c = p.p();
    let mut out = Matrix::zeros(c, c);
    if layers != LayerSelection::Layer2 {
        let x12 = T::lit(4.0) * crate::linalg::dot(x1, x2);
        if x12 != T::zero() {
            let hh: Vec<T> = h1.iter().zip(&h2).map(|(&a, &b)| a * b).collect();
            for i in 0..c {
                let wi: Vec<T> = p.w2.row(i).iter().zip(&hh).map(|(&w, &h)| w * h).collect();
                for j in 0..c {
                    out[(i, j)] += x12 * crate::linalg::dot(&wi, p.w2.row(j));
                }
            }
        }
    }
    if layers != LayerSelection::Layer1 {
        let q: T = h1.iter().zip(&h2).map(|(&a, &b)| a * a * b * b).sum();
        for i in 0..c {
            out[(i, i)] += q;
        }
    }
    Ok(out)
}

/// Central-difference Jacobians contracted into a `C × C` block; a test
/// oracle for [`entk_block`].
pub fn finite_diff_kernel_oracle<T: Real>(
    params: &ModelParams<T>,
    x1: &[T],
    x2: &[T],
    h: f64,
    layers: LayerSelection,
) -> Result<Matrix<T>> {
    let j1 = finite_diff_jacobian(params, x1, h, layers)?;
    let j2 = finite_diff_jacobian(params, x2, h, layers)?;
    j1.matmul_nt(&j2)
}

/// `C × P_layer` Jacobian by central differences.
pub fn finite_diff_jacobian<T: Real>(
    params: &ModelParams<T>,
    x: &[T],
    h: f64,
    layers: LayerSelection,
) -> Result<Matrix<T>> {
    let range = match params {
        ModelParams::Tms(p) => {
            if layers != LayerSelection::All {
                return Err(Error::InvalidArgument(
                    "layer selection applies to the modular MLP only".into(),
                ));
            }
            0..p.n_params()
        }
        ModelParams::ModMlp(p) => p.layer_range(layers),
    };
    let arch = params.arch();
    let shapes = params.shapes();
    let base = params.flatten();
    let eval = |flat: &[T]| -> Result<Vec<T>> {
        match ModelParams::unflatten(arch, &shapes, flat)? {
            ModelParams::Tms(p) => tms_forward(&p, x),
            ModelParams::ModMlp(p) => modmlp_forward(&p, x),
        }
    };
    let c = eval(&base)?.len();
    let hh = T::lit(h);
    let mut jac = Matrix::zeros(c, range.len());
    let mut work = base.clone();
    for (col, mu) in range.enumerate() {
        work[mu] = base[mu] + hh;
        let plus = eval(&work)?;
        work[mu] = base[mu] - hh;
        let minus = eval(&work)?;
        work[mu] = base[mu];
        for i in 0..c {
            jac[(i, col)] = (plus[i] - minus[i]) / (hh + hh);
        }
    }
    Ok(jac)
}

/// Explicit Jacobian rows for every `(class, datum)`, row `class · N + datum`,
/// with importance rescaling and optional centring applied. `NC × P`.
pub fn jacobian_factor<T: Real>(
    params: &ModelParams<T>,
    ds: &Dataset<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    let n = ds.len();
    let c = ds.n_classes();
    spec.validate(params, c)?;
    let scales = spec.class_scales::<T>(c);
    let per_datum: Vec<Matrix<T>> = (0..n)
        .into_par_iter()
        .map(|a| match params {
            ModelParams::Tms(p) => tms_jacobian(p, ds.inputs.row(a)),
            ModelParams::ModMlp(p) => modmlp_jacobian(p, ds.inputs.row(a), spec.layers),
        })
        .collect::<Result<_>>()?;
    let width = per_datum.first().map_or(0, Matrix::cols);
    let mut factor = Matrix::zeros(n * c, width);
    for (a, jac) in per_datum.iter().enumerate() {
        for i in 0..c {
            let s = scales[i];
            for (dst, &src) in factor.row_mut(i * n + a).iter_mut().zip(jac.row(i)) {
                *dst = s * src;
            }
        }
    }
    if spec.center {
        let nf = T::from_count(n.max(1));
        for i in 0..c {
            let mut mean = vec![T::zero(); width];
            for a in 0..n {
                for (m, &v) in mean.iter_mut().zip(factor.row(i * n + a)) {
                    *m += v;
                }
            }
            for a in 0..n {
                for (v, &m) in factor.row_mut(i * n + a).iter_mut().zip(&mean) {
                    *v -= m / nf;
                }
            }
        }
    }
    Ok(factor)
}

/// Assembles a dense kernel, refusing dimensions above [`DEFAULT_DENSE_CAP`].
pub fn assemble_kernel<T: Real>(
    params: &ModelParams<T>,
    ds: &Dataset<T>,
    spec: &KernelSpec,
) -> Result<KernelMatrix<T>> {
    assemble_kernel_capped(params, ds, spec, Some(DEFAULT_DENSE_CAP))
}

/// Dimension of the kernel a spec produces on `ds`.
pub fn kernel_dim<T: Real>(ds: &Dataset<T>, spec: &KernelSpec) -> usize {
    match spec.collapse {
        Collapse::Flattened => ds.len() * ds.n_classes(),
        _ => ds.len(),
    }
}

/// As [`assemble_kernel`] with an explicit cap (`None` disables it).
pub fn assemble_kernel_capped<T: Real>(
    params: &ModelParams<T>,
    ds: &Dataset<T>,
    spec: &KernelSpec,
    cap: Option<usize>,
) -> Result<KernelMatrix<T>> {
    check_dataset(params, ds)?;
    spec.validate(params, ds.n_classes())?;
    let dim = kernel_dim(ds, spec);
    if let Some(cap) = cap {
        if dim > cap {
            return Err(Error::KernelTooLarge { dim, cap });
        }
    }
    let raw = match params {
        ModelParams::Tms(_) => {
            let factor = jacobian_factor(
                params,
                ds,
                &KernelSpec {
                    center: false,
                    ..spec.clone()
                },
            )?;
            tms_dense(&factor, ds.len(), ds.n_classes(), spec.collapse)?
        }
        ModelParams::ModMlp(p) => modmlp_dense(p, ds, spec)?,
    };
    let asym = SymMatrix::relative_asymmetry(&raw);
    if asym > T::lit(1e-10) {
        log::warn!(
            "assembled kernel asymmetry {:e} exceeds 1e-10",
            asym.to_f64_lossy()
        );
    }
    let mut matrix = SymMatrix::new(raw)?;
    if spec.center {
        matrix = center_blocks(&matrix, ds.len());
    }
    Ok(KernelMatrix {
        spec: spec.clone(),
        matrix,
        n_data: ds.len(),
        n_classes: ds.n_classes(),
    })
}

fn check_dataset<T: Real>(params: &ModelParams<T>, ds: &Dataset<T>) -> Result<()> {
    match (params, ds.kind()) {
        (ModelParams::Tms(p), DatasetKind::Tms { n }) if p.features() == n => Ok(()),
        (ModelParams::ModMlp(p), DatasetKind::Modadd { p: q }) if p.p() == q => Ok(()),
        (ModelParams::Tms(_), k) => Err(Error::WrongDatasetKind {
            expected: "tms",
            found: k.name(),
        }),
        (ModelParams::ModMlp(_), k) => Err(Error::WrongDatasetKind {
            expected: "modadd",
            found: k.name(),
        }),
    }
}

/// Double-centres every `n × n` block.
fn center_blocks<T: Real>(m: &SymMatrix<T>, n: usize) -> SymMatrix<T> {
    let dim = m.dim();
    if n == 0 || dim == n {
        return m.double_centered();
    }
    let blocks = dim / n;
    let nf = T::from_count(n);
    // Row means within each column block, per row: rm[r][bj].
    let mut rm = vec![T::zero(); dim * blocks];
    for r in 0..dim {
        let row = m.as_matrix().row(r);
        for bj in 0..blocks {
            rm[r * blocks + bj] = row[bj * n..(bj + 1) * n].iter().copied().sum::<T>() / nf;
        }
    }
    let mut grand = vec![T::zero(); blocks * blocks];
    for bi in 0..blocks {
        for bj in 0..blocks {
            grand[bi * blocks + bj] =
                (0..n).map(|a| rm[(bi * n + a) * blocks + bj]).sum::<T>() / nf;
        }
    }
    SymMatrix::from_upper_fn(dim, |r, c| {
        let (bi, bj) = (r / n, c / n);
        m.get(r, c) - rm[r * blocks + bj] - rm[c * blocks + bi] + grand[bi * blocks + bj]
    })
}

fn tms_dense<T: Real>(
    factor: &Matrix<T>,
    n: usize,
    c: usize,
    collapse: Collapse,
) -> Result<Matrix<T>> {
    let block_rows = |i: usize| -> Vec<usize> { (i * n..(i + 1) * n).collect() };
    match collapse {
        Collapse::Flattened => factor.matmul_nt(factor),
        Collapse::PerClass(i) => {
            let fi = factor.select_rows(&block_rows(i));
            fi.matmul_nt(&fi)
        }
        Collapse::ClassTrace => {
            let mut acc = Matrix::zeros(n, n);
            for i in 0..c {
                let fi = factor.select_rows(&block_rows(i));
                acc = acc.add(&fi.matmul_nt(&fi)?)?;
            }
            Ok(acc)
        }
    }
}

/// Closed-form modular-MLP kernels from hidden activations `H = X W1ᵀ`.
fn modmlp_dense<T: Real>(
    p: &ModMlpParams<T>,
    ds: &Dataset<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    let (h, _) = modmlp_forward_batch(p, &ds.inputs)?;
    let n = ds.len();
    let c = p.p();
    let x = &ds.inputs;
    let xx = x.matmul_nt(x)?;
    let use1 = spec.layers != LayerSelection::Layer2;
    let use2 = spec.layers != LayerSelection::Layer1;
    let h2 = h.map(|v| v * v);
    let four = T::lit(4.0);

    // 4 (XXᵀ) ∘ (H diag(w) Hᵀ) for non-negative weights w.
    let layer1_weighted = |w: &[T]| -> Result<Matrix<T>> {
        let root: Vec<T> = w.iter().map(|&v| v.sqrt()).collect();
        let u = Matrix::from_fn(n, h.cols(), |a, k| h[(a, k)] * root[k]);
        Ok(u.matmul_nt(&u)?.hadamard(&xx)?.scale(four))
    };

    match spec.collapse {
        Collapse::ClassTrace | Collapse::PerClass(_) => {
            let w: Vec<T> = match spec.collapse {
                Collapse::PerClass(i) => p.w2.row(i).iter().map(|&v| v * v).collect(),
                _ => (0..p.n_hid())
                    .map(|k| (0..c).map(|i| p.w2[(i, k)] * p.w2[(i, k)]).sum())
                    .collect(),
            };
            let mut k = Matrix::zeros(n, n);
            if use1 {
                k = k.add(&layer1_weighted(&w)?)?;
            }
            if use2 {
                let mult = match spec.collapse {
                    Collapse::ClassTrace => T::from_count(c),
                    _ => T::one(),
                };
                k = k.add(&h2.matmul_nt(&h2)?.scale(mult))?;
            }
            Ok(k)
        }
        Collapse::Flattened => {
            let dim = n * c;
            let mut k = Matrix::zeros(dim, dim);
            let q = if use2 { Some(h2.matmul_nt(&h2)?) } else { None };
            let u: Vec<Matrix<T>> = (0..c)
                .map(|i| Matrix::from_fn(n, h.cols(), |a, kk| h[(a, kk)] * p.w2[(i, kk)]))
                .collect();
            for i in 0..c {
                for j in i..c {
                    let mut block = Matrix::zeros(n, n);
                    if use1 {
                        block = u[i].matmul_nt(&u[j])?.hadamard(&xx)?.scale(four);
                    }
                    if i == j {
                        if let Some(q) = &q {
                            block = block.add(q)?;
                        }
                    }
                    for a in 0..n {
                        for b in 0..n {
                            k[(i * n + a, j * n + b)] = block[(a, b)];
                            k[(j * n + b, i * n + a)] = block[(a, b)];
                        }
                    }
                }
            }
            Ok(k)
        }
    }
}

/// `K = F Fᵀ` kept in factored form (`F` is `dim × P`).
#[derive(Clone, Debug)]
pub struct FactoredKernel<T> {
    pub spec: KernelSpec,
    pub factor: Matrix<T>,
    pub n_data: usize,
    pub n_classes: usize,
}

impl<T: Real> FactoredKernel<T> {
    /// Flattened kernel factor for any model (TMS, or small modular MLPs).
    pub fn new(params: &ModelParams<T>, ds: &Dataset<T>, spec: &KernelSpec) -> Result<Self> {
        check_dataset(params, ds)?;
        if spec.collapse != Collapse::Flattened {
            return Err(Error::InvalidArgument(
                "factored kernels are flattened".into(),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            factor: jacobian_factor(params, ds, spec)?,
            n_data: ds.len(),
            n_classes: ds.n_classes(),
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn to_dense(&self) -> Result<KernelMatrix<T>> {
        Ok(KernelMatrix {
            spec: self.spec.clone(),
            matrix: SymMatrix::new(self.factor.matmul_nt(&self.factor)?)?,
            n_data: self.n_data,
            n_classes: self.n_classes,
        })
    }

    /// Top-`k` eigenpairs through the `P × P` dual problem `FᵀF = UΛUᵀ`,
    /// `V = F U Λ^{-1/2}`. Exact when `k ≤ rank F`; eigenvectors beyond the
    /// rank are an arbitrary orthonormal completion with eigenvalue 0.
    pub fn top_eigenpairs(&self, k: usize) -> Result<Spectrum<T>> {
        let dim = self.dim();
        if k == 0 || k > dim {
            return Err(Error::InvalidArgument(format!(
                "k = {k} must lie in 1..={dim}"
            )));
        }
        let gram = SymMatrix::new(self.factor.tr_matmul(&self.factor)?)?;
        let dual = eigh_descending(&gram)?;
        let top = dual
            .eigenvalues
            .first()
            .copied()
            .unwrap_or(T::zero())
            .max(T::zero());
        let floor = top * T::epsilon() * T::from_count(gram.dim().max(1)) * T::lit(10.0);
        let mut rows = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for i in 0..k {
            let lam = dual.eigenvalues.get(i).copied().unwrap_or(T::zero());
            if lam > floor {
                let u = dual.vector(i);
                let inv = T::one() / lam.sqrt();
                rows.push(
                    self.factor
                        .matvec(&u)
                        .into_iter()
                        .map(|v| v * inv)
                        .collect::<Vec<T>>(),
                );
                values.push(lam);
            } else {
                rows.push(vec![T::zero(); dim]);
                values.push(T::zero());
            }
        }
        let block = Matrix::from_rows(&rows)?;
        let mut seed = 0u64;
        let mut refill = |d: usize| -> Vec<T> {
            seed += 1;
            (0..d)
                .map(|i| {
                    T::lit((((i as u64 + 1) * 2654435761 + seed * 40503) % 1000) as f64 - 499.5)
                })
                .collect()
        };
        let q = orthonormalize_rows(&block, Some(&mut refill));
        let mut vectors = q.transpose();
        crate::linalg::canonicalize_signs(&mut vectors);
        Ok(Spectrum {
            eigenvalues: values,
            eigenvectors: vectors,
            solver: SolverTag::Iterative,
        })
    }
}

impl<T: Real> SymOperator<T> for FactoredKernel<T> {
    fn dim(&self) -> usize {
        self.factor.rows()
    }

    fn apply_rows(&self, block: &Matrix<T>) -> Matrix<T> {
        let t = block.matmul(&self.factor).expect("block width");
        t.matmul_nt(&self.factor).expect("factor width")
    }
}

/// Spectrum of a kernel: dense when `k` is `None` or the matrix is small,
/// block subspace iteration otherwise.
pub fn kernel_spectrum<T: Real>(kernel: &KernelMatrix<T>, k: Option<usize>) -> Result<Spectrum<T>> {
    match k {
        Some(k) if k < kernel.dim() && kernel.dim() > 2000 => eigh_topk_operator(
            &kernel.matrix,
            k,
            &TopkOptions {
                max_iter: 2000,
                tol: 1e-9,
                ..Default::default()
            },
        ),
        _ => eigh_descending(&kernel.matrix),
    }
}

/// Kernel regression `f = K_test,train (K_train,train + ridge·I)⁻¹ Y`.
///
/// `ridge = None` uses `1e-8 · trace(K)/dim`. A numerically singular system
/// is reported with a suggested ridge.
pub fn ntk_predict<T: Real>(
    k_train_train: &SymMatrix<T>,
    k_test_train: &Matrix<T>,
    y_train: &Matrix<T>,
    ridge: Option<f64>,
) -> Result<Matrix<T>> {
    let n = k_train_train.dim();
    if k_test_train.cols() != n || y_train.rows() != n {
        return Err(Error::Shape(format!(
            "train kernel {n}x{n}, cross kernel {:?}, labels {:?}",
            k_test_train.shape(),
            y_train.shape()
        )));
    }
    let ridge = match ridge {
        Some(r) if r < 0.0 => {
            return Err(Error::InvalidArgument(format!(
                "ridge must be >= 0, got {r}"
            )))
        }
        Some(r) => T::lit(r),
        None => T::lit(1e-8) * k_train_train.trace() / T::from_count(n.max(1)),
    };
    let reg = k_train_train.map_entries(|i, j, v| if i == j { v + ridge } else { v });
    let alpha = cholesky(&reg)?.solve(y_train)?;
    k_test_train.matmul(&alpha)
}

/// Cross kernel between two point sets (rows of `x_rows` vs rows of
/// `x_cols`), collapsed like `spec` (class trace / per class only).
pub fn cross_kernel<T: Real>(
    params: &ModelParams<T>,
    x_rows: &Matrix<T>,
    x_cols: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    if spec.collapse == Collapse::Flattened {
        return Err(Error::InvalidArgument(
            "cross kernels support class_trace and per_class".into(),
        ));
    }
    if spec.center {
        return Err(Error::InvalidArgument("cross kernels are uncentred".into()));
    }
    let rows: Vec<Vec<T>> = (0..x_rows.rows())
        .into_par_iter()
        .map(|a| {
            (0..x_cols.rows())
                .map(|b| {
                    let blk = entk_block(params, x_rows.row(a), x_cols.row(b), spec.layers)?;
                    Ok(match spec.collapse {
                        Collapse::PerClass(c) => blk[(c, c)],
                        _ => (0..blk.rows()).map(|i| blk[(i, i)]).sum(),
                    })
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KernelSidecar {
    spec: KernelSpec,
    dim: usize,
    n_data: usize,
    n_classes: usize,
    sha256: String,
}

/// Writes `<stem>.bin` (row-major little-endian f64), `<stem>.json` and,
/// for `dim ≤ 2000`, `<stem>.csv`.
pub fn save_kernel<T: Real>(dir: &Path, stem: &str, kernel: &KernelMatrix<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = f64_le_bytes(
        kernel
            .matrix
            .as_matrix()
            .as_slice()
            .iter()
            .map(|v| v.to_f64_lossy()),
    );
    let side = KernelSidecar {
        spec: kernel.spec.clone(),
        dim: kernel.dim(),
        n_data: kernel.n_data,
        n_classes: kernel.n_classes,
        sha256: sha256_hex(&bytes),
    };
    write_atomic(&dir.join(format!("{stem}.bin")), &bytes)?;
    write_atomic(
        &dir.join(format!("{stem}.json")),
        &serde_json::to_vec_pretty(&side)?,
    )?;
    if kernel.dim() <= 2000 {
        write_atomic(
            &dir.join(format!("{stem}.csv")),
            &matrix_to_csv(kernel.matrix.as_matrix())?,
        )?;
    }
    Ok(())
}

pub fn load_kernel<T: Real>(dir: &Path, stem: &str) -> Result<KernelMatrix<T>> {
    let bin = dir.join(format!("{stem}.bin"));
    let side: KernelSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(&bin)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: bin.display().to_string(),
        reason: reason.into(),
    };
    if sha256_hex(&bytes) != side.sha256 {
        return Err(corrupt("checksum mismatch"));
    }
    let values = f64_from_le_bytes(&bytes).ok_or_else(|| corrupt("not a whole number of f64"))?;
    if values.len() != side.dim * side.dim {
        return Err(corrupt("size does not match sidecar"));
    }
    let m = Matrix::from_vec(side.dim, side.dim, values.into_iter().map(T::lit).collect())?;
    Ok(KernelMatrix {
        spec: side.spec,
        matrix: SymMatrix::new(m)?,
        n_data: side.n_data,
        n_classes: side.n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_modadd_dataset, gen_tms_dataset};
    use crate::models::ground_truth_weights;
    use crate::training::{init_params, ArchSpec};

    fn close(a: &Matrix<f64>, b: &Matrix<f64>, rtol: f64) -> bool {
        let scale = a.max_abs().max(b.max_abs()).max(1e-300);
        a.sub(b).unwrap().max_abs() <= rtol * scale
    }

    #[test]
    fn tms_block_matches_explicit_contraction() {
        let ds = gen_tms_dataset::<f64>(5, 4, 0.2, 3).unwrap();
        let mut params = init_params::<f64>(ArchSpec::Tms { m: 3, n: 5 }, 1);
        if let ModelParams::Tms(p) = &mut params {
            p.b = vec![0.1, -0.05, 0.2, 0.0, 0.05];
        }
        let p = params.as_tms().unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let (x1, x2) = (ds.inputs.row(a), ds.inputs.row(b));
                let blk = entk_block(&params, x1, x2, LayerSelection::All).unwrap();
                let explicit = tms_jacobian(p, x1)
                    .unwrap()
                    .matmul_nt(&tms_jacobian(p, x2).unwrap())
                    .unwrap();
                assert!(close(&blk, &explicit, 1e-10));
            }
        }
    }

    #[test]
    fn modadd_layer_sum_and_sparsity() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 5, n_hid: 12 }, 2);
        let (x1, x2) = (ds.inputs.row(6), ds.inputs.row(18)); // (1,1) and (3,3)
        let l1 = entk_block(&params, x1, x2, LayerSelection::Layer1).unwrap();
        assert!(l1.as_slice().iter().all(|&v| v == 0.0));
        let x3 = ds.inputs.row(8); // (1,3)
        let all = entk_block(&params, x1, x3, LayerSelection::All).unwrap();
        let sum = entk_block(&params, x1, x3, LayerSelection::Layer1)
            .unwrap()
            .add(&entk_block(&params, x1, x3, LayerSelection::Layer2).unwrap())
            .unwrap();
        assert!(close(&all, &sum, 1e-14));
    }

    #[test]
    fn modadd_dense_matches_blocks() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 5, n_hid: 12 }, 5);
        for layers in [
            LayerSelection::All,
            LayerSelection::Layer1,
            LayerSelection::Layer2,
        ] {
            for collapse in [
                Collapse::ClassTrace,
                Collapse::PerClass(2),
                Collapse::Flattened,
            ] {
                let spec = KernelSpec::modadd_default()
                    .with_center(false)
                    .with_layers(layers)
                    .with_collapse(collapse);
                let k = assemble_kernel(&params, &ds, &spec).unwrap();
                for a in [0usize, 7, 24] {
                    for b in [0usize, 3, 13] {
                        let blk = entk_block(&params, ds.inputs.row(a), ds.inputs.row(b), layers)
                            .unwrap();
                        let (expected, got) = match collapse {
                            Collapse::ClassTrace => {
                                ((0..5).map(|i| blk[(i, i)]).sum::<f64>(), k.matrix.get(a, b))
                            }
                            Collapse::PerClass(c) => (blk[(c, c)], k.matrix.get(a, b)),
                            Collapse::Flattened => (
                                blk[(1, 3)],
                                k.matrix.get(k.index_map(a, 1), k.index_map(b, 3)),
                            ),
                        };
                        assert!((expected - got).abs() <= 1e-10 * expected.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn tms_collapses_agree() {
        let ds = gen_tms_dataset::<f64>(4, 6, 0.3, 8).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Tms { m: 2, n: 4 }, 8);
        let flat = assemble_kernel(&params, &ds, &KernelSpec::tms_default()).unwrap();
        let trace = assemble_kernel(
            &params,
            &ds,
            &KernelSpec::tms_default().with_collapse(Collapse::ClassTrace),
        )
        .unwrap();
        let mut sum = Matrix::zeros(6, 6);
        for c in 0..4 {
            let pc = assemble_kernel(
                &params,
                &ds,
                &KernelSpec::tms_default().with_collapse(Collapse::PerClass(c)),
            )
            .unwrap();
            assert!(close(
                &flat.class_block(c, c).unwrap(),
                pc.matrix.as_matrix(),
                1e-12
            ));
            sum = sum.add(pc.matrix.as_matrix()).unwrap();
        }
        assert!(close(&sum, trace.matrix.as_matrix(), 1e-12));
    }

    #[test]
    fn rescaling_scales_blocks() {
        let ds = gen_tms_dataset::<f64>(4, 5, 0.3, 1).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Tms { m: 2, n: 4 }, 2);
        let raw = assemble_kernel(&params, &ds, &KernelSpec::tms_default()).unwrap();
        let zero =
            assemble_kernel(&params, &ds, &KernelSpec::tms_default().with_beta(0.0)).unwrap();
        assert_eq!(raw.matrix, zero.matrix);
        let one = assemble_kernel(&params, &ds, &KernelSpec::tms_default().with_beta(1.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let f = 0.8f64.powf((i + j) as f64 / 2.0);
                let expected = raw.class_block(i, j).unwrap().scale(f);
                assert!(close(&one.class_block(i, j).unwrap(), &expected, 1e-12));
            }
        }
    }

    #[test]
    fn centring_matches_centred_jacobians() {
        let ds = gen_modadd_dataset::<f64>(4).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 4, n_hid: 6 }, 1);
        let spec = KernelSpec::modadd_default().with_collapse(Collapse::Flattened);
        let dense = assemble_kernel(&params, &ds, &spec).unwrap();
        let factored = FactoredKernel::new(&params, &ds, &spec)
            .unwrap()
            .to_dense()
            .unwrap();
        assert!(close(
            dense.matrix.as_matrix(),
            factored.matrix.as_matrix(),
            1e-10
        ));
    }

    #[test]
    fn factored_dual_spectrum_matches_dense() {
        let ds = gen_tms_dataset::<f64>(6, 20, 0.5, 4).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Tms { m: 2, n: 6 }, 4);
        let spec = KernelSpec::tms_default().with_beta(0.3);
        let fk = FactoredKernel::new(&params, &ds, &spec).unwrap();
        let dense = fk.to_dense().unwrap();
        let full = eigh_descending(&dense.matrix).unwrap();
        let top = fk.top_eigenpairs(10).unwrap();
        for i in 0..10 {
            assert!((top.eigenvalues[i] - full.eigenvalues[i]).abs() <= 1e-9 * full.eigenvalues[0]);
        }
        assert!(top.max_residual(&dense.matrix) <= 1e-8 * full.eigenvalues[0]);
        let it = eigh_topk_operator(&fk, 5, &TopkOptions::default()).unwrap();
        for i in 0..5 {
            assert!((it.eigenvalues[i] - full.eigenvalues[i]).abs() <= 1e-6 * full.eigenvalues[0]);
        }
    }

    #[test]
    fn fd_oracle_agrees() {
        let ds = gen_modadd_dataset::<f64>(3).unwrap();
        let params: ModelParams<f64> = ground_truth_weights::<f64>(3, 4, 0).unwrap().into();
        let fd = finite_diff_kernel_oracle(
            &params,
            ds.inputs.row(1),
            ds.inputs.row(5),
            1e-5,
            LayerSelection::All,
        )
        .unwrap();
        let cf = entk_block(
            &params,
            ds.inputs.row(1),
            ds.inputs.row(5),
            LayerSelection::All,
        )
        .unwrap();
        assert!(close(&fd, &cf, 1e-6));
        let zero: ModelParams<f64> = ModMlpParams::zeros(3, 4).into();
        let z = finite_diff_kernel_oracle(
            &zero,
            ds.inputs.row(1),
            ds.inputs.row(5),
            1e-5,
            LayerSelection::All,
        )
        .unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cap_is_enforced() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 5, n_hid: 4 }, 0);
        let spec = KernelSpec::modadd_default().with_collapse(Collapse::Flattened);
        assert!(matches!(
            assemble_kernel_capped(&params, &ds, &spec, Some(100)),
            Err(Error::KernelTooLarge { dim: 125, cap: 100 })
        ));
    }

    #[test]
    fn predictor_identities() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 5, n_hid: 64 }, 3);
        let spec = KernelSpec::modadd_default().with_center(false);
        let k = assemble_kernel(&params, &ds, &spec).unwrap();
        let pred = ntk_predict(&k.matrix, k.matrix.as_matrix(), &ds.labels, Some(0.0)).unwrap();
        assert!(close(&pred, &ds.labels, 1e-6));
        let cross = cross_kernel(&params, &ds.inputs, &ds.inputs, &spec).unwrap();
        assert!(close(&cross, k.matrix.as_matrix(), 1e-10));

        let eye = SymMatrix::new(Matrix::identity(3)).unwrap();
        let kt = Matrix::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let out = ntk_predict(&eye, &kt, &y, Some(0.0)).unwrap();
        assert!((out[(0, 0)] - 6.5f64).abs() < 1e-12);

        let singular = SymMatrix::from_upper_fn(3, |_, _| 1.0);
        assert!(matches!(
            ntk_predict(&singular, &kt, &y, Some(0.0)),
            Err(Error::SingularKernel { .. })
        ));
    }

    #[test]
    fn kernel_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_modadd_dataset::<f64>(3).unwrap();
        let params: ModelParams<f64> = init_params(ArchSpec::Modmlp { p: 3, n_hid: 5 }, 0);
        let k =
            assemble_kernel(&params, &ds, &KernelSpec::modadd_default().at_checkpoint(7)).unwrap();
        save_kernel(dir.path(), "k", &k).unwrap();
        let back = load_kernel::<f64>(dir.path(), "k").unwrap();
        assert_eq!(back.matrix, k.matrix);
        assert_eq!(back.spec, k.spec);
        assert!(dir.path().join("k.csv").exists());
    }
}
