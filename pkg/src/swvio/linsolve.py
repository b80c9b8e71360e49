"""Damped normal equations, Schur elimination, and column Cholesky.

The normal equations A dx = b are kept in four blocks: U (feature block,
diagonal by the 1-DoF anchored inverse-depth parameterization), W (state x
feature cross block), V (state block: visual pose terms plus IMU and
prior), and the stacked rhs (b_s, b_f).  The X block is never stored: it
is W^T by construction.

Schur elimination accumulates S = V - W U^-1 W^T as one rank-1 update per
feature; inverting U is n_f scalar divisions.  Cholesky is the
column-wise Evaluate/Update algorithm; per-iteration operation counts are
recorded from the actual slice sizes so the (i, i(i-1)/2) law is checked
against performed work, not a formula.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import KF_DIM, POSE_DIM, Ordering, WindowProblem
from .factors import VisualJacobianBlocks, visual_jacobians, imu_jacobian

EPS_PD = 1e-12


class SingularAssembly(Exception):
    """A feature column has no usable information (U entry <= 0)."""

    def __init__(self, feature_id):
        super().__init__(f"feature {feature_id}: U entry <= 0 after damping")
        self.feature_id = feature_id


class NotPositiveDefinite(Exception):
    """Cholesky hit a pivot <= eps_pd; caller should raise damping."""

    def __init__(self, column, pivot):
        super().__init__(f"pivot {pivot:.3g} <= eps at column {column}")
        self.column = column
        self.pivot = pivot


@dataclass
class Jacobians:
    visual: VisualJacobianBlocks
    imu: list


def evaluate_jacobians(window: WindowProblem) -> Jacobians:
    vis = visual_jacobians(window)
    imus = [imu_jacobian(f, window.keyframe_by_id(f.kf_i),
                         window.keyframe_by_id(f.kf_j), window.gravity)
            for f in window.imu_factors]
    return Jacobians(visual=vis, imu=imus)


@dataclass
class SchurBlocks:
    """Partitioned damped normal equations.

    tags records which keyframe pairs (a <= b) received contributions per
    factor class ("camera" / "imu_prior"); camera fill produced later by
    Schur elimination is included through the co-observation sets.
    """
    U: np.ndarray               # diagonal of the feature block, length n_f
    W: np.ndarray               # n_s x n_f
    V: np.ndarray               # n_s x n_s
    b_s: np.ndarray
    b_f: np.ndarray
    ordering: Ordering
    V_camera: np.ndarray = None  # visual-class share of V (incl. its damping)
    tags: dict = field(default_factory=dict)


@dataclass
class SchurCounters:
    """Operation counts of one Schur elimination."""
    n_features: int = 0
    n_states: int = 0
    u_inverse_divisions: int = 0
    scale_mults: int = 0        # scaling W columns by 1/U_f
    outer_macs: int = 0         # rank-1 accumulation into S
    rhs_macs: int = 0           # W @ (U^-1 b_f)
    rhs_mults: int = 0          # U^-1 * b_f


def assemble(window: WindowProblem, jacobians: Jacobians, damping: float) -> SchurBlocks:
    """Accumulate J^T J and -J^T r into (U, W, V, b) and apply Marquardt
    damping mu*diag(A) to the U and V diagonals."""
    ordering = Ordering(window)
    n_s, n_f = ordering.n_s, ordering.n_f
    U = np.zeros(n_f)
    W = np.zeros((n_s, n_f))
    V = np.zeros((n_s, n_s))
    V_cam = np.zeros((n_s, n_s))
    b_s = np.zeros(n_s)
    b_f = np.zeros(n_f)
    camera_pairs = set()
    imu_prior_pairs = set()

    feat_kfs = {f.id: {f.anchor_kf} for f in window.features}
    for ob in jacobians.visual.blocks:
        fi = ordering.feat_col(ob.feature_id)
        sa = ordering.pose_slice(ob.anchor_kf)
        so = ordering.pose_slice(ob.kf_id)
        Ja, Jo, Jl, r = ob.J_pose_anchor, ob.J_pose_obs, ob.J_invdepth, ob.residual
        U[fi] += float(Jl[:, 0] @ Jl[:, 0])
        W[sa, fi] += Ja.T @ Jl[:, 0]
        W[so, fi] += Jo.T @ Jl[:, 0]
        for tgt in (V, V_cam):
            tgt[sa, sa] += Ja.T @ Ja
            tgt[so, so] += Jo.T @ Jo
            tgt[sa, so] += Ja.T @ Jo
            tgt[so, sa] += Jo.T @ Ja
        b_f[fi] += -float(Jl[:, 0] @ r)
        b_s[sa] += -(Ja.T @ r)
        b_s[so] += -(Jo.T @ r)
        feat_kfs[ob.feature_id].add(ob.kf_id)

    # every pair of keyframes sharing a feature carries camera structure,
    # either directly or through the Schur fill
    for kfs in feat_kfs.values():
        ids = sorted(kfs)
        for i, a in enumerate(ids):
            for b in ids[i:]:
                camera_pairs.add((a, b))

    for jac in jacobians.imu:
        Jw, rw = jac.whitened()
        si = ordering.kf_slice(jac.kf_i)
        sj = ordering.kf_slice(jac.kf_j)
        Ji, Jj = Jw[:, :KF_DIM], Jw[:, KF_DIM:]
        V[si, si] += Ji.T @ Ji
        V[sj, sj] += Jj.T @ Jj
        V[si, sj] += Ji.T @ Jj
        V[sj, si] += Jj.T @ Ji
        b_s[si] += -(Ji.T @ rw)
        b_s[sj] += -(Jj.T @ rw)
        imu_prior_pairs.update({(jac.kf_i, jac.kf_i), (jac.kf_j, jac.kf_j),
                                (jac.kf_i, jac.kf_j)})

    if window.prior is not None:
        Jp, r0 = window.prior.sqrt_form()
        delta = np.concatenate([
            window.keyframe_by_id(sid).error_from(lin)
            for sid, lin in zip(window.prior.state_ids, window.prior.lin_states)
        ]) if window.prior.state_ids else np.zeros(0)
        r_p = Jp @ delta - r0
        H = Jp.T @ Jp
        g = -(Jp.T @ r_p)
        ids = list(window.prior.state_ids)
        for ia, a in enumerate(ids):
            sa = ordering.kf_slice(a)
            b_s[sa] += g[KF_DIM * ia:KF_DIM * (ia + 1)]
            for ib, b in enumerate(ids):
                blk = H[KF_DIM * ia:KF_DIM * (ia + 1), KF_DIM * ib:KF_DIM * (ib + 1)]
                V[sa, ordering.kf_slice(b)] += blk
                if ia <= ib and np.max(np.abs(blk)) > 0.0:
                    imu_prior_pairs.add((a, b))

    U *= (1.0 + damping)
    V_cam[np.diag_indices(n_s)] += damping * np.diag(V_cam).copy()
    V[np.diag_indices(n_s)] += damping * np.diag(V).copy()
    for fid in ordering.feat_ids:
        if U[ordering.feat_col(fid)] <= 0.0:
            raise SingularAssembly(fid)

    return SchurBlocks(U=U, W=W, V=V, b_s=b_s, b_f=b_f, ordering=ordering,
                       V_camera=V_cam,
                       tags={"camera": camera_pairs, "imu_prior": imu_prior_pairs})


def schur_eliminate(blocks: SchurBlocks):
    """(S, b_prime, counters): S = V - W U^-1 W^T via one rank-1 update
    per feature; U inversion is elementwise (n_f divisions, never cubic).
    S is symmetrized after accumulation."""
    S, bp, counters = schur_eliminate_blocks(blocks.U, blocks.W, blocks.V,
                                             blocks.b_s, blocks.b_f)
    return S, bp, counters


def schur_eliminate_blocks(U, W, V, b_s, b_f):
    """Kernel shared with marginalization: eliminate a diagonal block."""
    n_f = U.shape[0]
    n_s = V.shape[0]
    if np.any(U <= 0.0):
        raise SingularAssembly(int(np.argmax(U <= 0.0)))
    c = SchurCounters(n_features=n_f, n_states=n_s)

    u_inv = 1.0 / U
    c.u_inverse_divisions += n_f

    S = V.copy()
    for f in range(n_f):
        w = W[:, f]
        scaled = w * u_inv[f]
        c.scale_mults += n_s
        S -= np.outer(scaled, w)
        c.outer_macs += n_s * n_s
    S = 0.5 * (S + S.T)

    t = u_inv * b_f
    c.rhs_mults += n_f
    bp = b_s - W @ t
    c.rhs_macs += n_s * n_f
    return S, bp, c


@dataclass
class CholeskyFactor:
    L: np.ndarray
    evaluate_ops: list          # ops per iteration, i = n..1
    update_ops: list

    def reconstruction_error(self, S) -> float:
        return float(np.max(np.abs(self.L @ self.L.T - S)))


def cholesky(S: np.ndarray, eps_pd: float = EPS_PD) -> CholeskyFactor:
    """Right-looking column Cholesky with the Evaluate/Update split.

    At the iteration with i remaining columns, Evaluate produces column j
    (one sqrt + i-1 divisions = i ops) and Update applies the rank-1
    correction to the trailing symmetric half (i(i-1)/2 ops).  Counts are
    taken from the executed slice sizes.
    """
    n = S.shape[0]
    A = S.copy()
    L = np.zeros_like(A)
    evaluate_ops = []
    update_ops = []
    for j in range(n):
        i = n - j                       # remaining columns
        pivot = A[j, j]
        if pivot <= eps_pd:
            raise NotPositiveDefinite(j, float(pivot))
        # Evaluate: i-th column of L
        L[j, j] = np.sqrt(pivot)
        col = A[j + 1:, j] / L[j, j]
        L[j + 1:, j] = col
        evaluate_ops.append(1 + col.shape[0])
        # Update: trailing symmetric half (lower triangle incl. diagonal)
        ops = 0
        for k in range(j + 1, n):
            A[k, j + 1:k + 1] -= col[k - j - 1] * col[:k - j]
            ops += k - j
        update_ops.append(ops)
    return CholeskyFactor(L=L, evaluate_ops=evaluate_ops, update_ops=update_ops)


def forward_substitution(L, b):
    """Solve L y = b for lower-triangular L."""
    y = np.array(b, dtype=float, copy=True)
    n = L.shape[0]
    for i in range(n):
        y[i] = (y[i] - L[i, :i] @ y[:i]) / L[i, i]
    return y


def back_substitution(L, y):
    """Solve L^T x = y for lower-triangular L."""
    x = np.array(y, dtype=float, copy=True)
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


def forward_substitution_matrix(L, B):
    """Solve L Y = B columnwise for a matrix rhs."""
    Y = np.array(B, dtype=float, copy=True)
    n = L.shape[0]
    for i in range(n):
        Y[i] = (Y[i] - L[i, :i] @ Y[:i]) / L[i, i]
    return Y


def solve(blocks: SchurBlocks, chol: CholeskyFactor, b_prime: np.ndarray):
    """Back-substitute the state step, then the feature step
    dx_f = U^-1 (b_f - W^T dx_s)."""
    y = forward_substitution(chol.L, b_prime)
    dx_s = back_substitution(chol.L, y)
    dx_f = (blocks.b_f - blocks.W.T @ dx_s) / blocks.U
    return dx_s, dx_f


def dense_system(blocks: SchurBlocks):
    """Materialize the full damped system (for oracles and residual
    checks): A over [keyframe states | features], rhs b."""
    n_s = blocks.V.shape[0]
    n_f = blocks.U.shape[0]
    A = np.zeros((n_s + n_f, n_s + n_f))
    A[:n_s, :n_s] = blocks.V
    A[:n_s, n_s:] = blocks.W
    A[n_s:, :n_s] = blocks.W.T
    A[n_s:, n_s:] = np.diag(blocks.U)
    b = np.concatenate([blocks.b_s, blocks.b_f])
    return A, b
