"""Online adaptation engine: affine adapter, gradient decoupling, batch pipeline.

One session owns the mutable state (adapter parameters, source-like queue) and
consumes the query stream strictly in order, one gradient step per batch. The
gallery and its centroids stay frozen. The update gradient is optionally
decoupled against the general direction, the gradient of the KL divergence
between frozen source predictions and current predictions, so adaptation never
opposes what the source model already knows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidKError,
    InvalidSpecError,
    LengthMismatchError,
    UnknownBaselineError,
)
from .gallery import CentroidSet, Gallery, build_centroids
from .losses import (
    ForwardState,
    LossBreakdown,
    _em_grad,
    _kl_grad,
    _pl_grad,
    affine_normalize,
    forward_state,
    param_grad,
    total_loss_and_grad,
)
from .refine import (
    QueueEntry,
    SourceLikeQueue,
    build_candidate_sets,
    estimate_constraints,
    source_likeness,
    update_queue,
)

_BASELINES = ("tent", "pl", "none")


@dataclass(frozen=True)
class AdapterParams:
    """Per-dimension scale and shift applied to raw queries before normalization."""

    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "AdapterParams":
        return cls(gamma=np.ones(dim), beta=np.zeros(dim))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.beta])

    @classmethod
    def from_flat(cls, theta: np.ndarray) -> "AdapterParams":
        theta = np.asarray(theta, dtype=np.float64)
        dim = theta.size // 2
        return cls(gamma=theta[:dim].copy(), beta=theta[dim:].copy())

    @property
    def dim(self) -> int:
        return self.gamma.size


@dataclass(frozen=True)
class GeneralDirection:
    """Gradient of the source-vs-current KL divergence, plus its value."""

    grad: np.ndarray
    kl_value: float


@dataclass(frozen=True)
class DecoupledGradient:
    """Split of the task gradient against the general direction."""

    g_parallel: np.ndarray
    g_perp: np.ndarray
    g_hat: np.ndarray
    w_d: float


@dataclass(frozen=True)
class SessionConfig:
    tau: float = 0.02
    k: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    decouple: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidSpecError(f"tau must be > 0, got {self.tau}")
        if self.k < 1:
            raise InvalidSpecError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise InvalidSpecError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise InvalidSpecError(f"learning rate must be > 0, got {self.lr}")


@dataclass
class BatchDiagnostics:
    """Per-batch report record; fields without a value for the method are None."""

    step: int
    objective: float | None = None
    d_kl: float | None = None
    w_d: float | None = None
    angle_deg: float | None = None
    active_count: int | None = None
    delta_s: float | None = None
    e_b: float | None = None
    uniformity: float | None = None
    gap: float | None = None


@dataclass
class BatchResult:
    rankings: np.ndarray
    breakdown: LossBreakdown | None
    diagnostics: BatchDiagnostics


def forward_adapter(params: AdapterParams, raw: np.ndarray) -> np.ndarray:
    """Adapted, unit-normalized query embeddings for a batch of raw vectors."""
    _, _, z = affine_normalize(params.gamma, params.beta, raw)
    return z


def kl_general(state: ForwardState, src_probs: list) -> GeneralDirection:
    """General direction: KL of current predictions from frozen source ones.

    Both prediction lists must share candidate supports per query.
    """
    val, dz = _kl_grad(state, src_probs)
    return GeneralDirection(grad=param_grad(state, dz).flat(), kl_value=val)


def decouple(g_d: np.ndarray, g_r: np.ndarray, kl: float) -> DecoupledGradient:
    """Refine the task gradient so it never conflicts with the general direction.

    The parallel component is kept only when it agrees with ``g_r``; the whole
    update is damped by w_d = exp(-kl). With no general direction defined
    (``g_r`` numerically zero) the damped task gradient passes through.
    """
    g_d = np.asarray(g_d, dtype=np.float64)
    g_r = np.asarray(g_r, dtype=np.float64)
    if g_d.shape != g_r.shape:
        raise LengthMismatchError(f"gradient shapes differ: {g_d.shape} vs {g_r.shape}")
    w_d = float(np.exp(-max(kl, 0.0)))
    denom = float(np.dot(g_r, g_r))
    if denom < 1e-24:
        g_parallel = np.zeros_like(g_d)
        return DecoupledGradient(
            g_parallel=g_parallel, g_perp=g_d.copy(), g_hat=w_d * g_d, w_d=w_d
        )
    dot = float(np.dot(g_d, g_r))
    g_parallel = (dot / denom) * g_r
    g_perp = g_d - g_parallel
    if dot >= 0:
        g_hat = w_d * (g_perp + g_parallel)
    else:
        g_hat = w_d * g_perp
    return DecoupledGradient(g_parallel=g_parallel, g_perp=g_perp, g_hat=g_hat, w_d=w_d)


def sgd_step(params: AdapterParams, grad: np.ndarray, lr: float) -> AdapterParams:
    """One plain gradient step on the flattened [gamma..., beta...] vector."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size != 2 * params.dim:
        raise LengthMismatchError(
            f"gradient length {grad.size} does not match 2*dim={2 * params.dim}"
        )
    return AdapterParams.from_flat(params.flat() - lr * grad)


def _angle_degrees(a: np.ndarray, b: np.ndarray) -> float | None:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-24 or nb < 1e-24:
        return None
    c = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return math.degrees(math.acos(c))


class AdaptationSession:
    """Owner of the adapter state for one ordered query stream.

    Batches must be fed sequentially; any error raised mid-batch leaves the
    parameters (and queue) exactly as they were before the call.
    """

    def __init__(
        self,
        gallery: Gallery,
        config: SessionConfig,
        centroids: CentroidSet | None = None,
    ):
        if gallery.size < config.k + 1:
            raise InvalidKError(
                f"gallery of {gallery.size} items cannot serve k={config.k}"
            )
        self.gallery = gallery
        self.config = config
        self.centroids = (
            centroids
            if centroids is not None
            else build_centroids(gallery, config.k, config.seed)
        )
        self.params = AdapterParams.identity(gallery.dim)
        self.source_params = AdapterParams.identity(gallery.dim)
        self.queue = SourceLikeQueue(capacity=config.batch_size)
        self.step = 0

    # -- internals ---------------------------------------------------------

    def _rank_full_gallery(self, params: AdapterParams, raw: np.ndarray) -> np.ndarray:
        z = forward_adapter(params, raw)
        sims = z @ self.gallery.items.T
        return np.argsort(-sims, axis=1, kind="stable").astype(np.int64)

    def _forward_and_candidates(self, params: AdapterParams, raw: np.ndarray):
        z = forward_adapter(params, raw)
        cands = build_candidate_sets(z, self.gallery, self.centroids, self.config.k)
        cand_embs = [c.candidate_embeddings for c in cands]
        state = forward_state(params.gamma, params.beta, raw, cand_embs, self.config.tau)
        return state, cands

    def _batch_metrics(self, z: np.ndarray) -> tuple[float, float]:
        center = z.mean(axis=0)
        uniformity = float(np.linalg.norm(z - center, axis=1).mean())
        gap = float(np.linalg.norm(center - self.gallery.items.mean(axis=0)))
        return uniformity, gap

    # -- public pipeline ----------------------------------------------------

    def adapt_batch(self, raw: np.ndarray) -> BatchResult:
        """Full robust-objective step: refine, estimate, step, re-rank."""
        raw = np.asarray(raw, dtype=np.float64)
        state, cands = self._forward_and_candidates(self.params, raw)
        src_state = forward_state(
            self.source_params.gamma,
            self.source_params.beta,
            raw,
            state.cand_embs,
            self.config.tau,
        )

        positives = np.stack([c.candidate_embeddings[0] for c in cands])
        q_center = state.z.mean(axis=0)
        g_center = positives.mean(axis=0)
        entries = [
            QueueEntry(
                query_emb=state.z[i].copy(),
                positive_emb=positives[i].copy(),
                score_s=source_likeness(state.z[i], positives[i], q_center, g_center),
                entropy_at_enqueue=float(state.entropies[i]),
            )
            for i in range(state.batch_size)
        ]
        queue = update_queue(self.queue, entries)
        constraints = estimate_constraints(queue)

        breakdown, grad = total_loss_and_grad(state, constraints)
        g_d = grad.flat()

        general = kl_general(state, src_state.probs)
        dec = decouple(g_d, general.grad, general.kl_value)
        g_hat = dec.g_hat if self.config.decouple else g_d

        new_params = sgd_step(self.params, g_hat, self.config.lr)
        rankings = self._rank_full_gallery(new_params, raw)

        uniformity, gap = self._batch_metrics(forward_adapter(new_params, raw))
        diagnostics = BatchDiagnostics(
            step=self.step,
            objective=breakdown.l_total,
            d_kl=general.kl_value,
            w_d=dec.w_d,
            angle_deg=_angle_degrees(g_d, general.grad),
            active_count=breakdown.active_count,
            delta_s=constraints.gap_source,
            e_b=constraints.entropy_threshold,
            uniformity=uniformity,
            gap=gap,
        )

        # Mutate only after the whole pipeline succeeded.
        self.params = new_params
        self.queue = queue
        self.step += 1
        return BatchResult(rankings=rankings, breakdown=breakdown, diagnostics=diagnostics)

    def run_baseline(self, raw: np.ndarray, kind: str) -> BatchResult:
        """Tent- or pseudo-label-style step, or plain ranking with no update."""
        if kind not in _BASELINES:
            raise UnknownBaselineError(f"unknown baseline {kind!r}")
        raw = np.asarray(raw, dtype=np.float64)

        if kind == "none":
            rankings = self._rank_full_gallery(self.params, raw)
            uniformity, gap = self._batch_metrics(forward_adapter(self.params, raw))
            diagnostics = BatchDiagnostics(step=self.step, uniformity=uniformity, gap=gap)
            self.step += 1
            return BatchResult(rankings=rankings, breakdown=None, diagnostics=diagnostics)

        state, _ = self._forward_and_candidates(self.params, raw)
        if kind == "tent":
            val, dz = _em_grad(state)
        else:
            src_state = forward_state(
                self.source_params.gamma,
                self.source_params.beta,
                raw,
                state.cand_embs,
                self.config.tau,
            )
            labels = np.array([int(np.argmax(p)) for p in src_state.probs])
            val, dz = _pl_grad(state, labels)

        grad = param_grad(state, dz)
        new_params = sgd_step(self.params, grad.flat(), self.config.lr)
        rankings = self._rank_full_gallery(new_params, raw)
        uniformity, gap = self._batch_metrics(forward_adapter(new_params, raw))
        diagnostics = BatchDiagnostics(
            step=self.step, objective=val, uniformity=uniformity, gap=gap
        )

        self.params = new_params
        self.step += 1
        return BatchResult(rankings=rankings, breakdown=None, diagnostics=diagnostics)
