"""Stochastic optimizers over the decomposed loss, with their projections.

Three step rules share the per-sample split from :mod:`stochgp.objective`:

* ``minimax_step``: the log-determinant coupling is relaxed through an
  auxiliary surrogate matrix A constrained to dominate the noise floor, with
  the constraint A = sum of per-sample information terms enforced by a
  penalty paired against a dual matrix B on the unit Frobenius ball;
  alternating projected gradient steps descend in (theta, A) and ascend in B.
  The dual gradient is evaluated at the freshly updated primal point.
* ``scgd_step``: a two-rate compositional method that tracks the full
  information matrix with an exponentially weighted average and linearizes
  the log-determinant at the tracked value. The parameter step uses the
  incoming tracker; the tracker then averages toward the rescaled batch
  estimate at the pre-step parameters.
* ``bsgd_step``: the biased baseline that differentiates the batch-restricted
  loss directly, deliberately without the dataset-over-batch rescaling of the
  information sum, so its descent direction does not average to the full
  gradient for small batches.

Per-batch stochastic gradients of the penalty objective are unbiased: the
batch estimate is (n/s) times the sum over a uniformly drawn batch of s
sample terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from stochgp._linalg import (
    NotPositiveDefiniteError,
    chol_solve,
    gram,
    spd_inverse,
    symmetrize,
    tri_inverse_lower,
    try_chol_lower,
)
from stochgp.data import IndexBatch
from stochgp.features import FeatureMap
from stochgp.objective import (
    HyperParams,
    ThetaGrad,
    _linearized_core,
    info_matrix,
    logdet_psd,
    sample_info_term,
    sample_loss_term,
)

__all__ = [
    "AugmentedState",
    "MinimaxConfig",
    "SCGDState",
    "Schedule",
    "bsgd_step",
    "load_checkpoint",
    "minimax_batch_grads",
    "minimax_init",
    "minimax_sample_objective",
    "minimax_step",
    "project_dual_ball",
    "project_primal",
    "save_checkpoint",
    "scgd_init",
    "scgd_step",
    "schedule_at",
]

TRACKER_FLOOR = 1e-10


def _square_f64(A: np.ndarray, d: int, name: str) -> np.ndarray:
    A = np.ascontiguousarray(np.asarray(A, dtype=np.float64))
    if A.shape != (d, d):
        raise ValueError("%s must be %d x %d, got %s" % (name, d, d, A.shape))
    if not np.all(np.isfinite(A)):
        raise ValueError("%s contains non-finite entries" % name)
    return A


@dataclass(frozen=True)
class AugmentedState:
    """Primal state of the penalty method: parameters plus the surrogate matrix."""

    theta: HyperParams
    info_surrogate: np.ndarray

    def __post_init__(self):
        A = _square_f64(self.info_surrogate, self.theta.d, "info_surrogate")
        object.__setattr__(self, "info_surrogate", A)


@dataclass(frozen=True)
class SCGDState:
    """Compositional-method state: parameters, tracked information matrix, step count."""

    theta: HyperParams
    tracked_info: np.ndarray
    step: int = 0

    def __post_init__(self):
        F = _square_f64(self.tracked_info, self.theta.d, "tracked_info")
        object.__setattr__(self, "tracked_info", F)
        if self.step < 0:
            raise ValueError("step must be non-negative")


@dataclass(frozen=True)
class MinimaxConfig:
    """Step sizes, penalty weight, and feasible-set bounds for the penalty method.

    Zero rates and zero penalty are admitted so degenerate cases stay
    expressible in tests; production runs use strictly positive values.
    """

    primal_rate: float
    dual_rate: float
    penalty: float = 1.0
    sigma_min: float = 1e-3
    coord_bound: float = 1e6
    eig_bound: float = 1e6
    batch_size: int = 32
    share_batch: bool = False

    def __post_init__(self):
        if self.primal_rate < 0 or self.dual_rate < 0:
            raise ValueError("step sizes must be non-negative")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.coord_bound <= 0 or self.eig_bound <= 0:
            raise ValueError("bounds must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class Schedule:
    """Step-size schedule: constant, or the polynomial decay (t^-3/4, t^-1/2)."""

    kind: str
    a0: float
    b0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ValueError("kind must be 'constant' or 'polynomial'")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("base rates must be positive")
        if self.kind == "constant" and self.b0 > 1.0:
            raise ValueError("constant averaging weight must lie in (0, 1]")


def schedule_at(s: Schedule, t: int) -> tuple[float, float]:
    """Rates (a_t, b_t) at iteration t >= 1; the averaging weight is capped at 1."""
    if t < 1:
        raise ValueError("iteration index starts at 1")
    if s.kind == "constant":
        return s.a0, s.b0
    return s.a0 * float(t) ** -0.75, min(1.0, s.b0 * float(t) ** -0.5)


def _indices(batch) -> np.ndarray:
    if isinstance(batch, IndexBatch):
        return batch.indices
    return np.asarray(batch, dtype=np.int64)


def _surrogate_norm(A: np.ndarray) -> float:
    norm = float(np.linalg.norm(A))
    if norm == 0.0:
        raise ValueError("surrogate matrix is zero; its norm divides the penalty term")
    return norm


def minimax_sample_objective(
    fmap: FeatureMap,
    zeta: AugmentedState,
    dual: np.ndarray,
    x: np.ndarray,
    y: float,
    n_total: int,
    penalty: float,
) -> float:
    """One sample's share of the penalized objective.

    loss_term + (1/n) logdet(A) + penalty * <B, A/n - info_term> / ||A||_F.
    Summed over the whole dataset this telescopes to the full loss when
    A equals the assembled information matrix, for any B.
    """
    A = zeta.info_surrogate
    norm = _surrogate_norm(A)
    n = int(n_total)
    g = sample_loss_term(fmap, zeta.theta, x, y, n)
    C = A / n - sample_info_term(fmap, zeta.theta, x, n)
    return g + logdet_psd(A) / n + penalty * float(np.sum(dual * C)) / norm


def minimax_batch_grads(
    fmap: FeatureMap,
    zeta: AugmentedState,
    dual: np.ndarray,
    X_batch: np.ndarray,
    y_batch: np.ndarray,
    n_total: int,
    penalty: float,
) -> tuple[ThetaGrad, np.ndarray, np.ndarray]:
    """Gradients of (n/s) * sum over the batch of the penalized sample objective.

    Returns (theta blocks, surrogate-matrix block, dual block). The surrogate
    block is symmetrized since A ranges over symmetric matrices; the dual
    block is penalty * (A - (n/s) * batch info sum) / ||A||_F.
    """
    theta = zeta.theta
    A = zeta.info_surrogate
    B = _square_f64(dual, theta.d, "dual")
    norm = _surrogate_norm(A)
    n = int(n_total)
    X_batch = np.asarray(X_batch, dtype=np.float64)
    s = X_batch.shape[0]

    batch = fmap.forward(theta.feature_params, X_batch)
    M = (-penalty / norm) * B
    g_theta = _linearized_core(fmap, theta, batch, y_batch, M, n).scaled(n / s)

    info_sum = gram(batch.Z)
    info_sum[np.diag_indices_from(info_sum)] += s * theta.noise_variance / n

    g_dual = (penalty / norm) * (A - (n / s) * info_sum)

    inner = float(np.sum(B * ((s / n) * A - info_sum)))
    g_A = (
        spd_inverse(A)
        + (penalty / norm) * B
        - (penalty * (n / s) * inner / norm**3) * A
    )
    return g_theta, symmetrize(g_A), g_dual


def _dual_grad_only(
    fmap: FeatureMap,
    zeta: AugmentedState,
    X_batch: np.ndarray,
    n_total: int,
    penalty: float,
) -> np.ndarray:
    # ascent direction for B needs only the batch information sum
    A = zeta.info_surrogate
    norm = _surrogate_norm(A)
    n = int(n_total)
    s = X_batch.shape[0]
    Z = fmap.forward(zeta.theta.feature_params, X_batch).Z
    info_sum = gram(Z)
    info_sum[np.diag_indices_from(info_sum)] += s * zeta.theta.noise_variance / n
    return (penalty / norm) * (A - (n / s) * info_sum)


def project_dual_ball(B: np.ndarray) -> np.ndarray:
    """Radial projection onto the unit Frobenius ball; interior points pass through."""
    norm = float(np.linalg.norm(B))
    if norm <= 1.0:
        return B
    return B / norm


def project_primal(
    zeta: AugmentedState,
    sigma_min: float,
    coord_bound: float = 1e6,
    eig_bound: float = 1e6,
) -> AugmentedState:
    """Sequential projection onto the primal feasible set.

    Order matters: (1) clamp the noise variance to [sigma_min^2, coord_bound];
    (2) clamp every weight and feature-map coordinate to [-coord_bound,
    coord_bound]; (3) symmetrize the surrogate and clamp its eigenvalues to
    [clamped noise variance, eig_bound]. This is a composition of per-block
    projections, not the Euclidean projection onto the joint set (the
    surrogate's feasible cone depends on the clamped noise), so it is
    non-expansive within each block for a fixed feasible set but not jointly;
    its fixed points are exactly the feasible states.

    The eigendecomposition is skipped when a Cholesky certificate shows the
    shifted surrogate is already positive definite and the Frobenius norm
    (an upper bound on the top eigenvalue) clears the eigenvalue cap.
    """
    theta = zeta.theta
    s2 = min(max(theta.noise_variance, sigma_min * sigma_min), coord_bound)
    w = np.clip(theta.weights, -coord_bound, coord_bound)
    alpha = theta.feature_params
    flat = alpha.flat
    clipped = np.clip(flat, -coord_bound, coord_bound)
    if not np.array_equal(clipped, flat):
        alpha = alpha.with_flat(clipped)

    A = symmetrize(zeta.info_surrogate)
    shifted = A.copy()
    shifted[np.diag_indices_from(shifted)] -= s2
    if try_chol_lower(shifted) is None or float(np.linalg.norm(A)) > eig_bound:
        vals, vecs = np.linalg.eigh(A)
        np.clip(vals, s2, eig_bound, out=vals)
        A = symmetrize((vecs * vals) @ vecs.T)
    return AugmentedState(HyperParams(w, alpha, s2), A)


def minimax_init(
    fmap: FeatureMap,
    theta: HyperParams,
    X: np.ndarray,
    batch_indices: Sequence[int] | np.ndarray | None = None,
) -> tuple[AugmentedState, np.ndarray]:
    """Initial (primal state, dual matrix).

    The surrogate starts at the assembled information matrix from one full
    pass, or at the rescaled batch estimate when ``batch_indices`` is given
    (streaming mode, no full pass over the data). The dual starts at zero.
    """
    d = fmap.output_dim
    if batch_indices is None:
        A = info_matrix(fmap, theta, X)
    else:
        idx = _indices(batch_indices)
        n = np.asarray(X).shape[0]
        Z = fmap.forward(theta.feature_params, np.asarray(X, dtype=np.float64)[idx]).Z
        A = (n / idx.size) * gram(Z)
        A[np.diag_indices_from(A)] += theta.noise_variance
    return AugmentedState(theta, A), np.zeros((d, d))


def minimax_step(
    fmap: FeatureMap,
    zeta: AugmentedState,
    dual: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    batch_primal,
    batch_dual,
    cfg: MinimaxConfig,
) -> tuple[AugmentedState, np.ndarray]:
    """One alternating update: primal descent, project; dual ascent, project.

    The primal gradient is taken at the incoming state on ``batch_primal``;
    the dual gradient is taken at the *updated* primal state on
    ``batch_dual``. Callers wanting a single shared batch pass the same
    indices twice.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    idx1 = _indices(batch_primal)
    idx2 = _indices(batch_dual)
    theta = zeta.theta

    g_theta, g_A, _ = minimax_batch_grads(
        fmap, zeta, dual, X[idx1], y[idx1], n, cfg.penalty
    )
    a = cfg.primal_rate
    raw = AugmentedState(
        HyperParams(
            theta.weights - a * g_theta.weights,
            theta.feature_params.with_flat(
                theta.feature_params.flat - a * g_theta.feature_params
            ),
            theta.noise_variance - a * g_theta.noise_variance,
        ),
        zeta.info_surrogate - a * g_A,
    )
    zeta_next = project_primal(raw, cfg.sigma_min, cfg.coord_bound, cfg.eig_bound)

    g_dual = _dual_grad_only(fmap, zeta_next, X[idx2], n, cfg.penalty)
    dual_next = project_dual_ball(dual + cfg.dual_rate * g_dual)
    return zeta_next, dual_next


def scgd_init(fmap: FeatureMap, theta: HyperParams, X: np.ndarray) -> SCGDState:
    """Start the tracker at the exactly assembled information matrix."""
    return SCGDState(theta, info_matrix(fmap, theta, X), 0)


def _floor_spd(F: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(F)
    np.clip(vals, floor, None, out=vals)
    return symmetrize((vecs * vals) @ vecs.T)


def scgd_step(
    fmap: FeatureMap,
    state: SCGDState,
    X: np.ndarray,
    y: np.ndarray,
    batch,
    a_t: float,
    b_t: float,
    sigma_min: float = 1e-3,
) -> SCGDState:
    """One compositional update.

    Parameters move against the gradient of the batch loss linearized at the
    tracked information matrix (applied through its Cholesky factor, never an
    explicit inverse); the tracker then takes a convex step toward the
    rescaled batch information sum evaluated at the pre-step parameters.
    """
    if not 0.0 < b_t <= 1.0:
        raise ValueError("averaging weight must lie in (0, 1]")
    if a_t < 0.0:
        raise ValueError("step size must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    idx = _indices(batch)
    s = idx.size
    theta = state.theta
    d = fmap.output_dim
    s2 = theta.noise_variance
    w = theta.weights

    F = state.tracked_info
    L = try_chol_lower(F)
    if L is None:
        # the convex tracker update keeps this positive definite in exact
        # arithmetic; restore the floor and retry before giving up
        F = _floor_spd(F, TRACKER_FLOOR)
        L = try_chol_lower(F)
        if L is None:
            raise NotPositiveDefiniteError(
                0, "tracked information matrix at iteration %d" % state.step
            )

    fb = fmap.forward(theta.feature_params, X[idx])
    Z = fb.Z
    r = Z @ w - y[idx]

    solved = chol_solve(L, Z.T).T  # row i holds (tracker^{-1} phi_i)^T
    upstream = (2.0 / s2) * r[:, None] * w[None, :] + 2.0 * solved
    g_alpha = fmap.backward(theta.feature_params, fb, upstream)
    g_w = (2.0 / s2) * (Z.T @ r) + (2.0 * s / n) * w
    # the factor from the certificate path carries garbage above the diagonal
    Li = np.tril(tri_inverse_lower(L))
    trace_inv = float(np.sum(Li * Li))
    g_s2 = -float(r @ r) / (s2 * s2) + s * (n - d) / (n * s2) + s * trace_inv / n

    theta_next = HyperParams(
        w - a_t * g_w,
        theta.feature_params.with_flat(theta.feature_params.flat - a_t * g_alpha),
        max(s2 - a_t * g_s2, sigma_min * sigma_min),
    )

    batch_info = (n / s) * gram(Z)
    batch_info[np.diag_indices_from(batch_info)] += s2
    tracked = symmetrize((1.0 - b_t) * F + b_t * batch_info)
    return SCGDState(theta_next, tracked, state.step + 1)


def bsgd_step(
    fmap: FeatureMap,
    theta: HyperParams,
    X: np.ndarray,
    y: np.ndarray,
    batch,
    a_t: float,
    sigma_min: float = 1e-3,
) -> HyperParams:
    """One step against the gradient of the batch-restricted loss.

    The weight matrix is the inverse of the *unscaled* batch information sum,
    which is the source of this method's small-batch bias.
    """
    if a_t < 0.0:
        raise ValueError("step size must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    idx = _indices(batch)
    if idx.size == 0:
        raise ValueError("batch must be non-empty")
    s = idx.size

    fb = fmap.forward(theta.feature_params, X[idx])
    info_sum = gram(fb.Z)
    info_sum[np.diag_indices_from(info_sum)] += s * theta.noise_variance / n
    M = spd_inverse(info_sum)
    g = _linearized_core(fmap, theta, fb, y[idx], M, n)
    return HyperParams(
        theta.weights - a_t * g.weights,
        theta.feature_params.with_flat(
            theta.feature_params.flat - a_t * g.feature_params
        ),
        max(theta.noise_variance - a_t * g.noise_variance, sigma_min * sigma_min),
    )


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    *,
    kind: str,
    theta: HyperParams,
    matrix: np.ndarray,
    dual: np.ndarray | None = None,
    step: int = 0,
    rng_state: dict | None = None,
) -> None:
    """Serialize an optimizer state to a versioned npz blob with a text header.

    ``matrix`` is the surrogate or tracker; ``dual`` only applies to the
    penalty method; ``rng_state`` is a generator's bit-generator state dict.
    """
    header = json.dumps(
        {"format": "stochgp-checkpoint", "version": CHECKPOINT_VERSION, "kind": kind}
    )
    np.savez(
        path,
        header=np.array(header),
        weights=theta.weights,
        feature_flat=theta.feature_params.flat,
        noise_variance=np.float64(theta.noise_variance),
        matrix=np.asarray(matrix, dtype=np.float64),
        dual=np.zeros(0) if dual is None else np.asarray(dual, dtype=np.float64),
        step=np.int64(step),
        rng_state=np.array(json.dumps(rng_state) if rng_state else ""),
    )


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`; feature params come back as a flat vector."""
    with np.load(path) as blob:
        header = json.loads(str(blob["header"]))
        if header.get("format") != "stochgp-checkpoint":
            raise ValueError("not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %r" % header.get("version"))
        rng_raw = str(blob["rng_state"])
        return {
            "kind": header["kind"],
            "weights": blob["weights"],
            "feature_flat": blob["feature_flat"],
            "noise_variance": float(blob["noise_variance"]),
            "matrix": blob["matrix"],
            "dual": blob["dual"] if blob["dual"].size else None,
            "step": int(blob["step"]),
            "rng_state": json.loads(rng_raw) if rng_raw else None,
        }
