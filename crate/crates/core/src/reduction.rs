//! POD and hierarchical approximate POD with weighted inner products,
//! orthonormal basis extension, and the enrichment policies that grow the
//! reduced parameter and state spaces.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fem::SparseOperator;
use crate::fom::{FomProblem, Observation, ParameterField, StateTrajectory};

/// Relative eigenvalue floor below which snapshot directions are treated as
/// numerical noise rather than content.
const EIGENVALUE_FLOOR: f64 = 1e-14;

/// Default relative deflation tolerance for orthogonalization.
pub const DEFLATION_TOL: f64 = 1e-10;

fn m_inner(m: &SparseOperator, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    m.quadratic(a, b)
}

/// One Gram-Schmidt sweep of `v` against the columns of `basis`.
fn project_out(basis: &DMatrix<f64>, m: &SparseOperator, v: &mut DVector<f64>) {
    for j in 0..basis.ncols() {
        let col = basis.column(j).into_owned();
        let c = m_inner(m, &col, v);
        *v -= col * c;
    }
}

/// Proper orthogonal decomposition by the method of snapshots.
///
/// Returns M-orthonormal modes spanning the snapshot set up to a total
/// squared projection error below `eps^2`, with the minimal mode count for
/// that bound. All-zero snapshot sets give an empty mode set.
pub fn pod(snapshots: &DMatrix<f64>, m: &SparseOperator, eps: f64) -> DMatrix<f64> {
    let n = snapshots.nrows();
    let cols = snapshots.ncols();
    if cols == 0 {
        return DMatrix::zeros(n, 0);
    }
    let weighted = m.apply_mat(snapshots);
    let mut gram = snapshots.transpose() * &weighted;
    // symmetrize against round-off before the eigensolve
    gram = (&gram + gram.transpose()) * 0.5;
    let eig = gram.symmetric_eigen();

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let floor = EIGENVALUE_FLOOR * lambda_max;
    let clipped: Vec<f64> = order
        .iter()
        .map(|&i| {
            let l = eig.eigenvalues[i];
            if l > floor {
                l
            } else {
                0.0
            }
        })
        .collect();

    let total: f64 = clipped.iter().sum();
    let mut rank = 0usize;
    let mut tail = total;
    while rank < cols && tail >= eps * eps && clipped[rank] > 0.0 {
        tail -= clipped[rank];
        rank += 1;
    }

    let mut modes = DMatrix::zeros(n, rank);
    for (out_idx, &src) in order.iter().take(rank).enumerate() {
        let coeff = eig.eigenvectors.column(src);
        let mut mode = DVector::zeros(n);
        for (c, s) in coeff.iter().zip(snapshots.column_iter()) {
            mode += s * *c;
        }
        mode /= clipped[out_idx].sqrt();
        modes.set_column(out_idx, &mode);
    }
    // one re-orthonormalization sweep keeps near-degenerate modes clean
    let mut out = DMatrix::zeros(n, rank);
    let mut kept = 0usize;
    for j in 0..rank {
        let mut v = modes.column(j).into_owned();
        let lead = out.columns(0, kept).into_owned();
        project_out(&lead, m, &mut v);
        let norm = m_inner(m, &v, &v).max(0.0).sqrt();
        if norm > 0.0 {
            v /= norm;
            out.set_column(kept, &v);
            kept += 1;
        }
    }
    out.columns(0, kept).into_owned()
}

/// Hierarchical approximate POD over snapshot chunks (flat two-level tree,
/// typically one trajectory per chunk).
///
/// Local tolerances are budgeted so the combined squared projection error
/// stays below `eps^2`: the leaves share eps^2/4 and the root pass gets
/// eps^2/4, which bounds the total by (eps/2 + eps/2)^2. A single chunk
/// degenerates to a plain POD.
pub fn hapod(chunks: &[DMatrix<f64>], m: &SparseOperator, eps: f64) -> DMatrix<f64> {
    let nonempty: Vec<&DMatrix<f64>> = chunks.iter().filter(|c| c.ncols() > 0).collect();
    match nonempty.len() {
        0 => DMatrix::zeros(chunks.first().map_or(0, |c| c.nrows()), 0),
        1 => pod(nonempty[0], m, eps),
        n_chunks => {
            let leaf_eps = (eps * eps / (4.0 * n_chunks as f64)).sqrt();
            let mut scaled: Vec<DVector<f64>> = Vec::new();
            for chunk in &nonempty {
                let modes = pod(chunk, m, leaf_eps);
                // forward sigma-scaled modes so the root sees leaf energies
                let weighted = m.apply_mat(&modes);
                for j in 0..modes.ncols() {
                    let mut acc = DVector::zeros(chunk.nrows());
                    for s in chunk.column_iter() {
                        let c = s.dot(&weighted.column(j));
                        acc += s * c;
                    }
                    // acc = sum_e <e, phi_j>_M e; its coefficient on phi_j is sigma^2
                    let sigma2 = acc.dot(&weighted.column(j)).max(0.0);
                    scaled.push(modes.column(j) * sigma2.sqrt());
                }
            }
            let nrows = nonempty[0].nrows();
            let mut gathered = DMatrix::zeros(nrows, scaled.len());
            for (j, v) in scaled.iter().enumerate() {
                gathered.set_column(j, v);
            }
            pod(&gathered, m, 0.5 * eps)
        }
    }
}

/// Extends an M-orthonormal basis by new vectors, dropping candidates whose
/// post-projection norm falls below `deflation_tol` relative to their
/// original norm. Existing columns are never touched (nested bases).
pub fn orthogonalize_extend(
    basis: &DMatrix<f64>,
    new_vectors: &DMatrix<f64>,
    m: &SparseOperator,
    deflation_tol: f64,
) -> DMatrix<f64> {
    let n = basis.nrows().max(new_vectors.nrows());
    let mut out = DMatrix::zeros(n, basis.ncols() + new_vectors.ncols());
    out.columns_mut(0, basis.ncols()).copy_from(basis);
    let mut kept = basis.ncols();
    for j in 0..new_vectors.ncols() {
        let mut v = new_vectors.column(j).into_owned();
        let orig = m_inner(m, &v, &v).max(0.0).sqrt();
        if orig == 0.0 {
            continue;
        }
        let lead = out.columns(0, kept).into_owned();
        project_out(&lead, m, &mut v);
        project_out(&lead, m, &mut v);
        let norm = m_inner(m, &v, &v).max(0.0).sqrt();
        if norm < deflation_tol * orig {
            continue;
        }
        v /= norm;
        out.set_column(kept, &v);
        kept += 1;
    }
    out.columns(0, kept).into_owned()
}

/// Everything the trust-region driver needs after the initial basis build.
pub struct InitialBases {
    pub basis_q: DMatrix<f64>,
    pub basis_v: DMatrix<f64>,
    pub u0: StateTrajectory,
    pub p0: StateTrajectory,
    pub g0: ParameterField,
    pub j0: f64,
    /// Number of parameter modes retained from the initial snapshots.
    pub q_init_count: usize,
}

/// Builds the initial reduced spaces from {q_center, q0, grad J(q0)} and
/// {u(q0), p(q0)}. The initial guess is appended verbatim afterwards so the
/// starting iterate is exactly representable.
pub fn init_bases(
    problem: &FomProblem,
    q0: &ParameterField,
    q_center: &ParameterField,
    data: &Observation,
    eps_pod: f64,
) -> Result<InitialBases> {
    let u0 = problem.solve_primal(q0)?;
    let p0 = problem.solve_adjoint(q0, &u0, data)?;
    let g0 = problem.gradient_from_states(q0, &u0, &p0)?;
    let j0 = problem.objective_from_state(&u0, data);

    let mq = problem.q_product();
    let q_chunks = [
        q_center.coeffs().clone(),
        q0.coeffs().clone(),
        g0.coeffs().clone(),
    ];
    let modes = hapod(&q_chunks, mq, eps_pod);
    let basis_q = orthogonalize_extend(&modes, q0.coeffs(), mq, DEFLATION_TOL);
    let q_init_count = basis_q.ncols();

    let mv = problem.v_product();
    let v_chunks = [u0.coeffs().clone(), p0.coeffs().clone()];
    let basis_v = hapod(&v_chunks, mv, eps_pod);

    Ok(InitialBases {
        basis_q,
        basis_v,
        u0,
        p0,
        g0,
        j0,
        q_init_count,
    })
}

pub struct EnrichedBases {
    pub basis_q: DMatrix<f64>,
    pub basis_v: DMatrix<f64>,
    pub q_added: usize,
    pub v_added: usize,
}

/// Enrichment after an accepted iterate: the parameter basis grows by the
/// gradient snapshots at the new iterate (appended directly when the field
/// is stationary, POD modes of the per-step gradients otherwise) plus the
/// iterate itself; the state basis grows by POD modes of the new primal and
/// adjoint trajectories.
pub fn enrich_after_acceptance(
    problem: &FomProblem,
    basis_q: &DMatrix<f64>,
    basis_v: &DMatrix<f64>,
    g_new: &ParameterField,
    q_new: &ParameterField,
    u_new: &StateTrajectory,
    p_new: &StateTrajectory,
    eps_pod: f64,
) -> EnrichedBases {
    let mq = problem.q_product();
    let q_candidates = if g_new.is_stationary() {
        g_new.coeffs().clone()
    } else {
        hapod(&[g_new.coeffs().clone()], mq, eps_pod)
    };
    let mut bq = orthogonalize_extend(basis_q, &q_candidates, mq, DEFLATION_TOL);
    bq = orthogonalize_extend(&bq, q_new.coeffs(), mq, DEFLATION_TOL);

    let mv = problem.v_product();
    let v_modes = hapod(&[u_new.coeffs().clone(), p_new.coeffs().clone()], mv, eps_pod);
    let bv = orthogonalize_extend(basis_v, &v_modes, mv, DEFLATION_TOL);

    EnrichedBases {
        q_added: bq.ncols() - basis_q.ncols(),
        v_added: bv.ncols() - basis_v.ncols(),
        basis_q: bq,
        basis_v: bv,
    }
}

/// What triggered a failure re-enrichment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// The current iterate left the trust region.
    NotInTrustRegion,
    /// The Cauchy point failed the full-order decay condition.
    AgcDecay,
}

/// Re-enrichment after a trust-region failure with a tightened tolerance.
/// For `NotInTrustRegion` the parameter snapshots are the lifted iterate,
/// for `AgcDecay` the full-order gradient there; the state side always
/// receives the primal and adjoint trajectories.
#[allow(clippy::too_many_arguments)]
pub fn enrich_on_failure(
    problem: &FomProblem,
    basis_q: &DMatrix<f64>,
    basis_v: &DMatrix<f64>,
    kind: FailureKind,
    q_lift: &ParameterField,
    g_h: &ParameterField,
    u_h: &StateTrajectory,
    p_h: &StateTrajectory,
    eps_pod: f64,
) -> EnrichedBases {
    let mq = problem.q_product();
    let q_snaps = match kind {
        FailureKind::NotInTrustRegion => q_lift.coeffs().clone(),
        FailureKind::AgcDecay => g_h.coeffs().clone(),
    };
    let q_modes = hapod(&[q_snaps], mq, eps_pod);
    let bq = orthogonalize_extend(basis_q, &q_modes, mq, DEFLATION_TOL);

    let mv = problem.v_product();
    let v_modes = hapod(&[u_h.coeffs().clone(), p_h.coeffs().clone()], mv, eps_pod);
    let bv = orthogonalize_extend(basis_v, &v_modes, mv, DEFLATION_TOL);

    EnrichedBases {
        q_added: bq.ncols() - basis_q.ncols(),
        v_added: bv.ncols() - basis_v.ncols(),
        basis_q: bq,
        basis_v: bv,
    }
}

/// Max-norm deviation of Psi^T M Psi from the identity.
pub fn orthonormality_defect(basis: &DMatrix<f64>, m: &SparseOperator) -> f64 {
    if basis.ncols() == 0 {
        return 0.0;
    }
    let gram = basis.transpose() * m.apply_mat(basis);
    let mut defect: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((gram[(i, j)] - target).abs());
        }
    }
    defect
}

/// Total squared M-weighted projection error of the snapshots onto the
/// span of an M-orthonormal basis. Direct evaluation used by the tolerance
/// contract checks.
pub fn projection_error_sq(
    snapshots: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    m: &SparseOperator,
) -> f64 {
    let mut total = 0.0;
    for j in 0..snapshots.ncols() {
        let s = snapshots.column(j).into_owned();
        let coeff = basis.transpose() * m.apply(&s);
        let recon = basis * coeff;
        let diff = s - recon;
        total += m_inner(m, &diff, &diff).max(0.0);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_h1_product, assemble_mass, Mesh};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mesh_and_mass(nc: usize) -> (Mesh, SparseOperator) {
        let mesh = Mesh::build(nc).unwrap();
        let m = assemble_mass(&mesh);
        (mesh, m)
    }

    fn projector(basis: &DMatrix<f64>, m: &SparseOperator) -> DMatrix<f64> {
        basis * (basis.transpose() * m.to_dense())
    }

    #[test]
    fn pod_single_snapshot_normalizes() {
        let (mesh, m) = mesh_and_mass(3);
        let s = mesh.interpolate(|x, y| x * y + 1.0);
        let snaps = DMatrix::from_column_slice(s.len(), 1, s.as_slice());
        let modes = pod(&snaps, &m, 1e-12);
        assert_eq!(modes.ncols(), 1);
        let norm_m = m.quadratic(&modes.column(0).into_owned(), &modes.column(0).into_owned());
        assert!((norm_m - 1.0).abs() < 1e-12);
        let scaled = &s / m.quadratic(&s, &s).sqrt();
        let diff = (modes.column(0) - &scaled).abs().max();
        let diff_neg = (modes.column(0) + &scaled).abs().max();
        assert!(diff.min(diff_neg) < 1e-12);
    }

    #[test]
    fn pod_zero_snapshots_empty() {
        let (_, m) = mesh_and_mass(3);
        let snaps = DMatrix::zeros(16, 4);
        assert_eq!(pod(&snaps, &m, 1e-10).ncols(), 0);
    }

    #[test]
    fn pod_rank3_set_gives_three_modes() {
        let (_, m) = mesh_and_mass(3);
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dirs = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mut snaps = DMatrix::zeros(n, 8);
        for j in 0..8 {
            let c = DVector::from_fn(3, |_, _| rng.gen_range(0.5..2.0));
            snaps.set_column(j, &(&dirs * c));
        }
        // residual energy of a rank-2 basis is the third eigenvalue; any
        // eps below sqrt(lambda_3) forces exactly three modes
        let weighted = m.apply_mat(&snaps);
        let gram = snaps.transpose() * &weighted;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let eps = (eig[2] * 0.5).sqrt();
        let modes = pod(&snaps, &m, eps);
        assert_eq!(modes.ncols(), 3);
        assert!(projection_error_sq(&snaps, &modes, &m) < eps * eps);
    }

    #[test]
    fn pod_tolerance_contract_fuzz() {
        let (_, m) = mesh_and_mass(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let cols = rng.gen_range(1..10);
            let snaps = DMatrix::from_fn(16, cols, |_, _| rng.gen_range(-2.0..2.0));
            let energy: f64 = (0..cols)
                .map(|j| {
                    let c = snaps.column(j).into_owned();
                    m.quadratic(&c, &c)
                })
                .sum();
            let eps = (energy * rng.gen_range(1e-8..0.5)).sqrt();
            let modes = pod(&snaps, &m, eps);
            let err = projection_error_sq(&snaps, &modes, &m);
            assert!(err < eps * eps, "trial {trial}: {err} vs {}", eps * eps);
            assert!(orthonormality_defect(&modes, &m) < 1e-10);
        }
    }

    #[test]
    fn hapod_single_chunk_matches_pod() {
        let (_, m) = mesh_and_mass(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let snaps = DMatrix::from_fn(16, 6, |_, _| rng.gen_range(-1.0..1.0));
        let eps = 1e-3;
        let p1 = pod(&snaps, &m, eps);
        let p2 = hapod(&[snaps.clone()], &m, eps);
        assert_eq!(p1.ncols(), p2.ncols());
        let diff = (projector(&p1, &m) - projector(&p2, &m)).abs().max();
        assert!(diff < 1e-10, "projector difference {diff}");
    }

    #[test]
    fn hapod_two_chunks_span_rank3_space() {
        let (_, m) = mesh_and_mass(3);
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dirs = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let make = |rng: &mut ChaCha8Rng, cols: usize| {
            let mut snaps = DMatrix::zeros(n, cols);
            for j in 0..cols {
                let c = DVector::from_fn(3, |_, _| rng.gen_range(0.5..2.0));
                snaps.set_column(j, &(&dirs * c));
            }
            snaps
        };
        let c1 = make(&mut rng, 4);
        let c2 = make(&mut rng, 5);
        let modes = hapod(&[c1.clone(), c2.clone()], &m, 1e-7);
        assert_eq!(modes.ncols(), 3);
        let full = pod(
            &DMatrix::from_columns(
                &c1.column_iter()
                    .chain(c2.column_iter())
                    .map(|c| c.into_owned())
                    .collect::<Vec<_>>(),
            ),
            &m,
            1e-7,
        );
        let diff = (projector(&modes, &m) - projector(&full, &m)).abs().max();
        assert!(diff < 1e-9, "projector difference {diff}");
    }

    #[test]
    fn hapod_tolerance_contract_fuzz() {
        let (_, m) = mesh_and_mass(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..100 {
            let n_chunks = rng.gen_range(1..4);
            let chunks: Vec<DMatrix<f64>> = (0..n_chunks)
                .map(|_| {
                    let cols = rng.gen_range(1..6);
                    DMatrix::from_fn(16, cols, |_, _| rng.gen_range(-2.0..2.0))
                })
                .collect();
            let energy: f64 = chunks
                .iter()
                .flat_map(|c| c.column_iter())
                .map(|c| {
                    let v = c.into_owned();
                    m.quadratic(&v, &v)
                })
                .sum();
            let eps = (energy * rng.gen_range(1e-8..0.5)).sqrt();
            let modes = hapod(&chunks, &m, eps);
            assert!(modes.ncols() <= chunks.iter().map(|c| c.ncols()).sum::<usize>());
            let all = DMatrix::from_columns(
                &chunks
                    .iter()
                    .flat_map(|c| c.column_iter().map(|v| v.into_owned()))
                    .collect::<Vec<_>>(),
            );
            let err = projection_error_sq(&all, &modes, &m);
            assert!(err < eps * eps, "trial {trial}: {err} vs {}", eps * eps);
        }
    }

    #[test]
    fn orthogonalize_deflates_in_span_vectors() {
        let (mesh, m) = mesh_and_mass(3);
        let v = mesh.interpolate(|x, _| 1.0 + x);
        let snaps = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let basis = pod(&snaps, &m, 1e-14);
        let extended = orthogonalize_extend(&basis, &(snaps.clone() * 2.5), &m, DEFLATION_TOL);
        assert_eq!(extended.ncols(), basis.ncols());
        // and nestedness: the original column is untouched
        assert_eq!(extended.column(0), basis.column(0));
    }

    #[test]
    fn orthogonalize_repeated_extensions_stay_orthonormal() {
        let (_, m) = mesh_and_mass(4);
        let h1 = assemble_h1_product(&Mesh::build(4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for gram in [m, h1] {
            let mut basis = DMatrix::zeros(25, 0);
            for _ in 0..10 {
                let new = DMatrix::from_fn(25, 2, |_, _| rng.gen_range(-1.0..1.0));
                basis = orthogonalize_extend(&basis, &new, &gram, DEFLATION_TOL);
            }
            assert!(orthonormality_defect(&basis, &gram) <= 1e-10);
        }
    }

    #[test]
    fn init_bases_contains_background_exactly() {
        use crate::fem::PdeKind;
        use crate::fom::{exact_parameter, FomProblem, ParamSpace};
        let p = FomProblem::new(
            Mesh::build(6).unwrap(),
            PdeKind::Reaction,
            ParamSpace::L2,
            4,
            (1e-3, 1e3),
        )
        .unwrap();
        let q_exact = exact_parameter(1, p.mesh(), 4).unwrap();
        let data = p.make_noisy_data(&q_exact, 1e-4, 5).unwrap();
        let q0 = ParameterField::constant(p.n_param_dofs(), 3.0);
        let init = init_bases(&p, &q0, &q0, &data, 1e-12).unwrap();
        // stationary run: background+guess coincide, gradient adds one more
        assert!(init.q_init_count <= 3);
        assert!(init.basis_v.ncols() <= 2 * p.n_steps());
        // q0 is exactly representable
        let mq = p.q_product();
        let err = projection_error_sq(q0.coeffs(), &init.basis_q, mq);
        assert!(err < 1e-20, "representation defect {err}");
        assert!(orthonormality_defect(&init.basis_q, mq) < 1e-10);
        assert!(orthonormality_defect(&init.basis_v, p.v_product()) < 1e-10);
    }
}
