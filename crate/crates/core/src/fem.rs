//! Bilinear (Q1) finite elements on the unit square: structured meshes,
//! weighted inner products, and assembly of the sparse operators used by the
//! discrete parabolic systems.
//!
//! All operators are assembled with 2x2 Gauss quadrature per cell, which is
//! exact for products of Q1 functions with a Q1 coefficient. Homogeneous
//! Dirichlet conditions are enforced by row/column constraint on the full
//! node set (constrained rows/cols: identity on the diagonal, zero
//! elsewhere), so state and parameter DoF layouts stay identical.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Which bilinear form the parameter enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeKind {
    /// a(q; v, w) = (grad v, grad w) + (q v, w)
    Reaction,
    /// a(q; v, w) = (q grad v, grad w)
    Diffusion,
}

/// Uniform quadrilateral mesh of (0,1)^2 with (n_c+1)^2 nodes.
///
/// Nodes are numbered lexicographically: `idx = iy * (n_c + 1) + ix`, node
/// coordinates are `(ix * h, iy * h)` with `h = 1 / n_c`.
#[derive(Debug, Clone)]
pub struct Mesh {
    cells_per_side: usize,
    boundary: Vec<bool>,
}

impl Mesh {
    /// Builds a uniform mesh; rejects fewer than 2 cells per side.
    pub fn build(cells_per_side: usize) -> Result<Self> {
        if cells_per_side < 2 {
            return Err(Error::MeshTooCoarse(cells_per_side));
        }
        let nps = cells_per_side + 1;
        let mut boundary = vec![false; nps * nps];
        for iy in 0..nps {
            for ix in 0..nps {
                if ix == 0 || iy == 0 || ix == cells_per_side || iy == cells_per_side {
                    boundary[iy * nps + ix] = true;
                }
            }
        }
        Ok(Self {
            cells_per_side,
            boundary,
        })
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn nodes_per_side(&self) -> usize {
        self.cells_per_side + 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_per_side() * self.nodes_per_side()
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_side * self.cells_per_side
    }

    /// Mesh width; `h * cells_per_side == 1` by construction.
    pub fn h(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }

    pub fn node_coords(&self, idx: usize) -> (f64, f64) {
        let nps = self.nodes_per_side();
        let (ix, iy) = (idx % nps, idx / nps);
        (ix as f64 * self.h(), iy as f64 * self.h())
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.boundary[idx]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn n_boundary_nodes(&self) -> usize {
        self.boundary.iter().filter(|&&b| b).count()
    }

    /// The four corner nodes of cell (cx, cy), lexicographic local order:
    /// (0,0), (1,0), (0,1), (1,1).
    pub fn cell_nodes(&self, cx: usize, cy: usize) -> [usize; 4] {
        let nps = self.nodes_per_side();
        let base = cy * nps + cx;
        [base, base + 1, base + nps, base + nps + 1]
    }

    /// Nodal interpolation of a function given on (x, y).
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_fn(self.n_nodes(), |i, _| {
            let (x, y) = self.node_coords(i);
            f(x, y)
        })
    }
}

// Q1 shape functions on the reference cell [0,1]^2, lexicographic corner
// order (0,0), (1,0), (0,1), (1,1).
fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        (1.0 - xi) * (1.0 - eta),
        xi * (1.0 - eta),
        (1.0 - xi) * eta,
        xi * eta,
    ]
}

fn shape_grad(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [-eta, 1.0 - xi],
        [eta, xi],
    ]
}

/// 2-point Gauss rule on [0,1]: nodes (1 ± 1/sqrt(3))/2, weights 1/2.
const GAUSS_PTS: [f64; 2] = [
    0.5 - 0.288_675_134_594_812_9,
    0.5 + 0.288_675_134_594_812_9,
];
const GAUSS_WTS: [f64; 2] = [0.5, 0.5];

pub(crate) fn element_mass(h: f64) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (gx, wx) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
        for (gy, wy) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
            let n = shape(*gx, *gy);
            let w = wx * wy * h * h;
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] += w * n[i] * n[j];
                }
            }
        }
    }
    m
}

pub(crate) fn element_stiffness() -> [[f64; 4]; 4] {
    // Gradients scale with 1/h, the cell area with h^2; h cancels in 2D.
    let mut k = [[0.0; 4]; 4];
    for (gx, wx) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
        for (gy, wy) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
            let g = shape_grad(*gx, *gy);
            let w = wx * wy;
            for i in 0..4 {
                for j in 0..4 {
                    k[i][j] += w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
        }
    }
    k
}

pub(crate) fn element_weighted_mass(h: f64, c: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (gx, wx) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
        for (gy, wy) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
            let n = shape(*gx, *gy);
            let cq: f64 = (0..4).map(|a| c[a] * n[a]).sum();
            let w = wx * wy * h * h * cq;
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] += w * n[i] * n[j];
                }
            }
        }
    }
    m
}

pub(crate) fn element_weighted_stiffness(c: [f64; 4]) -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for (gx, wx) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
        for (gy, wy) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
            let n = shape(*gx, *gy);
            let g = shape_grad(*gx, *gy);
            let cq: f64 = (0..4).map(|a| c[a] * n[a]).sum();
            let w = wx * wy * cq;
            for i in 0..4 {
                for j in 0..4 {
                    k[i][j] += w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
        }
    }
    k
}

/// Sparse operator with an explicit symmetry flag.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    mat: CsrMatrix<f64>,
    symmetric: bool,
}

impl SparseOperator {
    pub fn from_coo(coo: &CooMatrix<f64>, symmetric: bool) -> Self {
        Self {
            mat: CsrMatrix::from(coo),
            symmetric,
        }
    }

    pub fn nrows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mat.ncols()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn csr(&self) -> &CsrMatrix<f64> {
        &self.mat
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let res = &self.mat * v;
        DVector::from_column_slice(res.as_slice())
    }

    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.mat * m
    }

    /// a^T M b.
    pub fn quadratic(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.apply(b).dot(a)
    }

    pub fn max_abs(&self) -> f64 {
        self.mat
            .values()
            .iter()
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Largest relative deviation from entrywise symmetry.
    pub fn symmetry_defect(&self) -> f64 {
        let t = self.mat.transpose();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let diff = &self.mat - &t;
        diff.values()
            .iter()
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
            / scale
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols());
        for (i, j, v) in self.mat.triplet_iter() {
            d[(i, j)] += *v;
        }
        d
    }

    pub fn transpose(&self) -> SparseOperator {
        Self {
            mat: self.mat.transpose(),
            symmetric: self.symmetric,
        }
    }

    pub fn scaled(&self, s: f64) -> SparseOperator {
        let mut mat = self.mat.clone();
        for v in mat.values_mut() {
            *v *= s;
        }
        Self {
            mat,
            symmetric: self.symmetric,
        }
    }

    pub fn add(&self, other: &SparseOperator) -> SparseOperator {
        Self {
            mat: &self.mat + &other.mat,
            symmetric: self.symmetric && other.symmetric,
        }
    }

    /// Sparse Cholesky factorization; requires symmetric positive definite.
    pub fn cholesky(&self) -> Result<SparseChol> {
        let csc = CscMatrix::from(&self.mat);
        let chol =
            CscCholesky::factor(&csc).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SparseChol {
            chol,
            dim: self.nrows(),
        })
    }
}

/// Cached sparse Cholesky factorization.
pub struct SparseChol {
    chol: CscCholesky<f64>,
    dim: usize,
}

impl SparseChol {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let sol = self.chol.solve(rhs);
        DVector::from_column_slice(sol.as_slice())
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

fn assemble_filtered(
    mesh: &Mesh,
    local: impl Fn(usize, usize, [usize; 4]) -> [[f64; 4]; 4],
    keep: impl Fn(usize, usize) -> bool,
    unit_diag_on_dropped: bool,
    symmetric: bool,
) -> SparseOperator {
    let n = mesh.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    for cy in 0..mesh.cells_per_side() {
        for cx in 0..mesh.cells_per_side() {
            let nodes = mesh.cell_nodes(cx, cy);
            let el = local(cx, cy, nodes);
            for i in 0..4 {
                for j in 0..4 {
                    if keep(nodes[i], nodes[j]) {
                        coo.push(nodes[i], nodes[j], el[i][j]);
                    }
                }
            }
        }
    }
    if unit_diag_on_dropped {
        for idx in 0..n {
            if mesh.is_boundary(idx) {
                coo.push(idx, idx, 1.0);
            }
        }
    }
    SparseOperator::from_coo(&coo, symmetric)
}

/// L2 Gram matrix over all nodes (used for M_H, M_C and the L2 parameter
/// product). Symmetric positive definite; all entries sum to |Omega| = 1.
pub fn assemble_mass(mesh: &Mesh) -> SparseOperator {
    let el = element_mass(mesh.h());
    assemble_filtered(mesh, |_, _, _| el, |_, _| true, false, true)
}

/// Stiffness matrix, optionally weighted by the Q1 interpolant of a nodal
/// coefficient field. Unconstrained (no boundary treatment).
pub fn assemble_stiffness(mesh: &Mesh, coefficient: Option<&DVector<f64>>) -> Result<SparseOperator> {
    if let Some(c) = coefficient {
        if c.len() != mesh.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_nodes(),
                got: c.len(),
                context: "stiffness coefficient field",
            });
        }
        Ok(assemble_filtered(
            mesh,
            |_, _, nodes| element_weighted_stiffness(nodes.map(|n| c[n])),
            |_, _| true,
            false,
            true,
        ))
    } else {
        let el = element_stiffness();
        Ok(assemble_filtered(mesh, |_, _, _| el, |_, _| true, false, true))
    }
}

/// H1 Gram matrix: mass + stiffness. Used as M_V and, for the H1 parameter
/// space, as M_Q.
pub fn assemble_h1_product(mesh: &Mesh) -> SparseOperator {
    let m = assemble_mass(mesh);
    let k = assemble_stiffness(mesh, None).expect("unweighted stiffness cannot fail");
    m.add(&k)
}

/// Mass matrix weighted by the Q1 interpolant of `c`, unconstrained.
pub fn assemble_weighted_mass(mesh: &Mesh, c: &DVector<f64>) -> Result<SparseOperator> {
    if c.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: c.len(),
            context: "weighted mass coefficient field",
        });
    }
    Ok(assemble_filtered(
        mesh,
        |_, _, nodes| element_weighted_mass(mesh.h(), nodes.map(|n| c[n])),
        |_, _| true,
        false,
        true,
    ))
}

/// Parameter-affine spatial operator A(q) = A_0 + sum_j q_j A_j with
/// homogeneous Dirichlet constraints baked in.
///
/// The constant part carries the identity rows/columns for boundary nodes;
/// the q-dependent part is zeroed there, so `evaluate` yields a constrained
/// operator for every q. Individual components A_j are assembled lazily and
/// cached; only cross-checks and tests ever materialize them.
pub struct AffineOperator {
    kind: PdeKind,
    mesh: Mesh,
    a0: SparseOperator,
    components: Mutex<HashMap<usize, Arc<SparseOperator>>>,
}

impl AffineOperator {
    fn new(kind: PdeKind, mesh: &Mesh) -> Self {
        let interior = |mesh: &Mesh, i: usize, j: usize| !mesh.is_boundary(i) && !mesh.is_boundary(j);
        let a0 = match kind {
            PdeKind::Reaction => {
                let el = element_stiffness();
                assemble_filtered(
                    mesh,
                    |_, _, _| el,
                    |i, j| interior(mesh, i, j),
                    true,
                    true,
                )
            }
            // Pure transport by q: the constant part is just the Dirichlet identity.
            PdeKind::Diffusion => {
                assemble_filtered(mesh, |_, _, _| [[0.0; 4]; 4], |_, _| false, true, true)
            }
        };
        Self {
            kind,
            mesh: mesh.clone(),
            a0,
            components: Mutex::new(HashMap::new()),
        }
    }

    pub fn kind(&self) -> PdeKind {
        self.kind
    }

    /// Constant part A_0 (Dirichlet-constrained).
    pub fn constant_part(&self) -> &SparseOperator {
        &self.a0
    }

    /// The q-weighted part of A(q), boundary rows/columns zeroed.
    pub fn weighted_part(&self, q: &DVector<f64>) -> Result<SparseOperator> {
        if q.len() != self.mesh.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.n_nodes(),
                got: q.len(),
                context: "affine operator parameter",
            });
        }
        let mesh = &self.mesh;
        let keep = |i: usize, j: usize| !mesh.is_boundary(i) && !mesh.is_boundary(j);
        let op = match self.kind {
            PdeKind::Reaction => assemble_filtered(
                mesh,
                |_, _, nodes| element_weighted_mass(mesh.h(), nodes.map(|n| q[n])),
                keep,
                false,
                true,
            ),
            PdeKind::Diffusion => assemble_filtered(
                mesh,
                |_, _, nodes| element_weighted_stiffness(nodes.map(|n| q[n])),
                keep,
                false,
                true,
            ),
        };
        Ok(op)
    }

    /// A(q) = A_0 + weighted part, assembled directly.
    pub fn evaluate(&self, q: &DVector<f64>) -> Result<SparseOperator> {
        Ok(self.a0.add(&self.weighted_part(q)?))
    }

    /// Affine component A_j (weight = j-th nodal basis function), cached.
    pub fn component(&self, j: usize) -> Arc<SparseOperator> {
        let mut cache = self.components.lock().unwrap();
        if let Some(c) = cache.get(&j) {
            return Arc::clone(c);
        }
        let mut e = DVector::zeros(self.mesh.n_nodes());
        e[j] = 1.0;
        let comp = Arc::new(self.weighted_part(&e).expect("basis weight has mesh size"));
        cache.insert(j, Arc::clone(&comp));
        comp
    }

    /// Evaluation through the affine decomposition A_0 + sum_j q_j A_j.
    /// Cross-check path; `evaluate` is the fast route.
    pub fn evaluate_via_components(&self, q: &DVector<f64>) -> Result<SparseOperator> {
        if q.len() != self.mesh.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.n_nodes(),
                got: q.len(),
                context: "affine operator parameter",
            });
        }
        let mut acc = self.a0.clone();
        for j in 0..q.len() {
            if q[j] != 0.0 {
                acc = acc.add(&self.component(j).scaled(q[j]));
            }
        }
        Ok(acc)
    }
}

/// A(q; v, w) = (grad v, grad w) + (q v, w), Dirichlet-constrained.
pub fn assemble_reaction_affine(mesh: &Mesh) -> AffineOperator {
    AffineOperator::new(PdeKind::Reaction, mesh)
}

/// A(q; v, w) = (q grad v, grad w), Dirichlet-constrained.
pub fn assemble_diffusion_affine(mesh: &Mesh) -> AffineOperator {
    AffineOperator::new(PdeKind::Diffusion, mesh)
}

/// Parameter-to-state coupling B(u): column j holds A(q_j) u restricted to
/// the q-dependent part, with boundary rows zeroed. For every direction d,
/// B(u) d = A(d) u - A(0) u.
pub fn assemble_coupling(mesh: &Mesh, kind: PdeKind, u: &DVector<f64>) -> Result<SparseOperator> {
    if u.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: u.len(),
            context: "coupling state vector",
        });
    }
    let n = mesh.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    for cy in 0..mesh.cells_per_side() {
        for cx in 0..mesh.cells_per_side() {
            let nodes = mesh.cell_nodes(cx, cy);
            let uc = nodes.map(|n| u[n]);
            // el[i][j] = integral of q_j * (u-dependent form) against phi_i
            let mut el = [[0.0; 4]; 4];
            for (gx, wx) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
                for (gy, wy) in GAUSS_PTS.iter().zip(GAUSS_WTS) {
                    let nsh = shape(*gx, *gy);
                    let g = shape_grad(*gx, *gy);
                    match kind {
                        PdeKind::Reaction => {
                            let uq: f64 = (0..4).map(|a| uc[a] * nsh[a]).sum();
                            let w = wx * wy * mesh.h() * mesh.h() * uq;
                            for i in 0..4 {
                                for j in 0..4 {
                                    el[i][j] += w * nsh[i] * nsh[j];
                                }
                            }
                        }
                        PdeKind::Diffusion => {
                            let ugx: f64 = (0..4).map(|a| uc[a] * g[a][0]).sum();
                            let ugy: f64 = (0..4).map(|a| uc[a] * g[a][1]).sum();
                            let w = wx * wy;
                            for i in 0..4 {
                                for j in 0..4 {
                                    el[i][j] += w * nsh[j] * (ugx * g[i][0] + ugy * g[i][1]);
                                }
                            }
                        }
                    }
                }
            }
            for i in 0..4 {
                if mesh.is_boundary(nodes[i]) {
                    continue;
                }
                for j in 0..4 {
                    coo.push(nodes[i], nodes[j], el[i][j]);
                }
            }
        }
    }
    Ok(SparseOperator::from_coo(&coo, false))
}
