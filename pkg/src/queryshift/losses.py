"""Adaptation objectives with analytic parameter gradients.

The learnable surface is a per-dimension affine head (scale ``gamma``, shift
``beta``) applied to raw query vectors before L2 normalization. Every loss
here is differentiated exactly through that head: normalization Jacobian,
cosine scores, tempered softmax, entropy, and batch means. Filter weights,
the entropy threshold, the gap constraint, and hard-negative indices are
treated as constants of the step (no gradient flows through them).

A central finite-difference oracle doubles as the verification gate for all
analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyBatchError,
    NonPositiveThresholdError,
    SizeMismatchError,
    SupportMismatchError,
    TooFewCandidatesError,
    ZeroVectorError,
)
from .refine import ConstraintEstimates
from .vectors import EPS_NORM, EPS_PROB, clamped_log, softmax_temp


@dataclass(frozen=True)
class ParamGradient:
    """Gradient with respect to the adapter's (gamma, beta)."""

    d_gamma: np.ndarray
    d_beta: np.ndarray

    def flat(self) -> np.ndarray:
        """Flattened [gamma..., beta...] layout."""
        return np.concatenate([self.d_gamma, self.d_beta])


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of the robust objective; the total is their sum."""

    l_u: float
    l_g: float
    l_rem: float
    l_rhm: float
    l_total: float
    active_count: int


@dataclass(frozen=True)
class ConsistencyPair:
    """Positive and hardest-negative consistencies for one query."""

    c_pos: float
    c_hardneg: float
    hardneg_slot: int


@dataclass
class ForwardState:
    """Recorded forward pass of one batch through the adapter.

    Candidate embeddings are frozen snapshots; re-evaluating a loss at
    perturbed parameters keeps them (and all other discrete choices) fixed.
    """

    raw: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    pre_norm: np.ndarray
    norms: np.ndarray
    z: np.ndarray
    cand_embs: list
    scores: list
    probs: list
    entropies: np.ndarray
    tau: float

    @property
    def batch_size(self) -> int:
        return self.raw.shape[0]

    @property
    def dim(self) -> int:
        return self.raw.shape[1]


def affine_normalize(gamma: np.ndarray, beta: np.ndarray, raw: np.ndarray):
    """Apply the affine head and unit-normalize rows.

    Returns (pre_norm, norms, z). Raises ZeroVectorError if any adapted row
    vanishes.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw queries contain non-finite entries")
    pre = gamma[None, :] * raw + beta[None, :]
    norms = np.linalg.norm(pre, axis=1)
    if np.any(norms <= EPS_NORM):
        raise ZeroVectorError("adapter output row has near-zero norm")
    return pre, norms, pre / norms[:, None]


def forward_state(
    gamma: np.ndarray,
    beta: np.ndarray,
    raw: np.ndarray,
    cand_embs: list,
    tau: float,
) -> ForwardState:
    """Run the batch forward pass against frozen candidate embeddings."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    pre, norms, z = affine_normalize(gamma, beta, raw)
    scores = [c @ z[i] for i, c in enumerate(cand_embs)]
    probs = [softmax_temp(s, tau) for s in scores]
    entropies = np.array([-(p * clamped_log(p)).sum() for p in probs])
    return ForwardState(
        raw=np.asarray(raw, dtype=np.float64),
        gamma=gamma,
        beta=beta,
        pre_norm=pre,
        norms=norms,
        z=z,
        cand_embs=list(cand_embs),
        scores=scores,
        probs=probs,
        entropies=entropies,
        tau=tau,
    )


def param_grad(state: ForwardState, dz: np.ndarray) -> ParamGradient:
    """Back-propagate a gradient w.r.t. z through normalization to (gamma, beta).

    The Jacobian of z = u / ||u|| is (I - z z^T) / ||u||, applied exactly.
    """
    proj = dz - state.z * np.sum(state.z * dz, axis=1, keepdims=True)
    du = proj / state.norms[:, None]
    return ParamGradient(
        d_gamma=np.sum(du * state.raw, axis=0),
        d_beta=np.sum(du, axis=0),
    )


# ---------------------------------------------------------------------------
# Loss values (public contracts)
# ---------------------------------------------------------------------------

def loss_uniformity(z: np.ndarray) -> float:
    """Mean of exp(-distance to the batch center); 1 means a collapsed batch."""
    val, _ = _uniformity_grad(np.asarray(z, dtype=np.float64))
    return val


def loss_gap(z_q: np.ndarray, z_pos: np.ndarray, delta_s: float) -> float:
    """Squared difference between the batch query-positive gap and ``delta_s``."""
    z_q = np.asarray(z_q, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    if z_q.shape[0] != z_pos.shape[0]:
        raise SizeMismatchError("query and positive batches differ in size")
    if z_q.shape[0] == 0:
        raise EmptyBatchError("gap loss needs a non-empty batch")
    val, _ = _gap_grad(z_q, z_pos.mean(axis=0), delta_s)
    return val


def rem_weights(entropies: np.ndarray, e_b: float) -> np.ndarray:
    """Per-query filter weights max(1 - E/E_B, 0)."""
    if not e_b > 0:
        raise NonPositiveThresholdError(f"entropy threshold must be > 0, got {e_b}")
    return np.maximum(1.0 - np.asarray(entropies, dtype=np.float64) / e_b, 0.0)


def loss_rem(preds, e_b: float):
    """Weighted entropy over the unfiltered queries.

    Returns (loss, weights). Normalized by the count of nonzero weights; a
    fully filtered batch yields exactly zero.
    """
    entropies = np.array([p.entropy for p in preds])
    w = rem_weights(entropies, e_b)
    n_act = int(np.count_nonzero(w))
    if n_act == 0:
        return 0.0, w
    return float((w * entropies).sum() / n_act), w


def loss_rhm(preds, pairs, e_b: float) -> float:
    """Weighted positive-vs-hard-negative margin, sharing loss_rem's filtering."""
    entropies = np.array([p.entropy for p in preds])
    w = rem_weights(entropies, e_b)
    n_act = int(np.count_nonzero(w))
    if n_act == 0:
        return 0.0
    h = np.array([np.log(pr.c_hardneg) - np.log(pr.c_pos) for pr in pairs])
    return float((w * h).sum() / n_act)


def consistency_pair(q: np.ndarray, cs) -> ConsistencyPair:
    """Consistency of the positive and of the most-confusable negative.

    Cosines are mapped to [0, 1] via c = (1 + cos) / 2 and clamped away from
    zero; the hard negative is the argmax-consistency slot >= 1 (ties go to
    the lowest slot).
    """
    if len(cs) < 2:
        raise TooFewCandidatesError("need a positive and at least one negative")
    q = np.asarray(q, dtype=np.float64)
    cos = np.clip(cs.candidate_embeddings @ q, -1.0, 1.0)
    c = np.clip((1.0 + cos) / 2.0, EPS_PROB, 1.0)
    slot = 1 + int(np.argmax(c[1:]))
    return ConsistencyPair(c_pos=float(c[0]), c_hardneg=float(c[slot]), hardneg_slot=slot)


def loss_em(preds) -> float:
    """Plain mean entropy across the batch (entropy-minimization baseline)."""
    if len(preds) == 0:
        raise EmptyBatchError("entropy loss needs at least one prediction")
    return float(np.mean([p.entropy for p in preds]))


# ---------------------------------------------------------------------------
# Analytic gradients w.r.t. z (chained to parameters via param_grad)
# ---------------------------------------------------------------------------

def _uniformity_grad(z: np.ndarray):
    if z.ndim != 2 or z.shape[0] == 0:
        raise EmptyBatchError("uniformity loss needs a non-empty batch")
    b = z.shape[0]
    center = z.mean(axis=0)
    diff = z - center
    r = np.linalg.norm(diff, axis=1)
    e = np.exp(-r)
    val = float(e.mean())
    # Unit direction of each row from the center; zero at the center itself.
    d = np.zeros_like(z)
    mask = r > EPS_NORM
    d[mask] = diff[mask] / r[mask, None]
    weighted = e[:, None] * d
    dz = -(weighted - weighted.mean(axis=0)[None, :]) / b
    return val, dz


def _gap_grad(z: np.ndarray, pos_mean: np.ndarray, delta_s: float):
    b = z.shape[0]
    gap_vec = z.mean(axis=0) - pos_mean
    delta_t = float(np.linalg.norm(gap_vec))
    val = (delta_t - delta_s) ** 2
    dz = np.zeros_like(z)
    if delta_t > EPS_NORM:
        common = 2.0 * (delta_t - delta_s) * gap_vec / (delta_t * b)
        dz += common[None, :]
    return float(val), dz


def _entropy_score_grads(state: ForwardState) -> list:
    """dE_i/ds_i for every query; the probability clamp zeroes dead terms."""
    out = []
    for p in state.probs:
        lnp = clamped_log(p)
        g = -(lnp + (p > EPS_PROB).astype(np.float64))
        out.append(p * (g - float(np.dot(p, g))) / state.tau)
    return out


def _dz_from_score_grads(state: ForwardState, ds_list: list) -> np.ndarray:
    dz = np.zeros_like(state.z)
    for i, ds in enumerate(ds_list):
        dz[i] = ds @ state.cand_embs[i]
    return dz


def _rem_grad(state: ForwardState, w: np.ndarray, n_act: int):
    val = 0.0 if n_act == 0 else float((w * state.entropies).sum() / n_act)
    dz = np.zeros_like(state.z)
    if n_act == 0:
        return val, dz
    ds_list = _entropy_score_grads(state)
    for i in range(state.batch_size):
        if w[i] != 0.0:
            dz[i] = (w[i] / n_act) * (ds_list[i] @ state.cand_embs[i])
    return val, dz


def consistency_from_scores(scores: np.ndarray):
    """Map raw cosine scores to clamped consistencies and pick the hard slot."""
    c = np.clip((1.0 + np.clip(scores, -1.0, 1.0)) / 2.0, EPS_PROB, 1.0)
    slot = 1 + int(np.argmax(c[1:]))
    return c, slot


def _rhm_grad(state: ForwardState, w: np.ndarray, n_act: int, slots: list):
    dz = np.zeros_like(state.z)
    if n_act == 0:
        return 0.0, dz
    total = 0.0
    for i in range(state.batch_size):
        c, _ = consistency_from_scores(state.scores[i])
        slot = slots[i]
        h = float(np.log(c[slot]) - np.log(c[0]))
        total += w[i] * h
        if w[i] == 0.0:
            continue
        raw_c = (1.0 + np.clip(state.scores[i], -1.0, 1.0)) / 2.0
        act_pos = 1.0 if EPS_PROB < raw_c[0] < 1.0 else 0.0
        act_hard = 1.0 if EPS_PROB < raw_c[slot] < 1.0 else 0.0
        dz[i] = (w[i] / n_act) * (
            act_hard / (2.0 * c[slot]) * state.cand_embs[i][slot]
            - act_pos / (2.0 * c[0]) * state.cand_embs[i][0]
        )
    return float(total / n_act), dz


def _em_grad(state: ForwardState):
    val = float(state.entropies.mean())
    ds_list = _entropy_score_grads(state)
    dz = _dz_from_score_grads(state, ds_list) / state.batch_size
    return val, dz


def _kl_grad(state: ForwardState, src_probs: list):
    """Mean KL from frozen source predictions to current ones, with gradient."""
    if len(src_probs) != state.batch_size:
        raise SupportMismatchError("source predictions do not cover the batch")
    b = state.batch_size
    val = 0.0
    ds_list = []
    for i in range(b):
        q = np.asarray(src_probs[i], dtype=np.float64)
        p = state.probs[i]
        if q.shape != p.shape:
            raise SupportMismatchError(
                f"candidate support differs for query {i}: {q.shape} vs {p.shape}"
            )
        val += float(np.sum(q * (clamped_log(q) - clamped_log(p))))
        live = (p > EPS_PROB).astype(np.float64)
        s_live = float(np.dot(q, live))
        ds_list.append((p * s_live - q * live) / (b * state.tau))
    dz = _dz_from_score_grads(state, ds_list)
    return val / b, dz


def _pl_grad(state: ForwardState, labels: np.ndarray):
    """Cross-entropy against fixed pseudo-labels, with gradient."""
    b = state.batch_size
    val = 0.0
    ds_list = []
    for i in range(b):
        p = state.probs[i]
        y = int(labels[i])
        val -= float(clamped_log(p[y : y + 1])[0])
        live = 1.0 if p[y] > EPS_PROB else 0.0
        ds = live * p.copy()
        ds[y] -= live
        ds_list.append(ds / (b * state.tau))
    dz = _dz_from_score_grads(state, ds_list)
    return val / b, dz


def hard_negative_slots(state: ForwardState) -> list:
    """Argmax-consistency negative slot per query, frozen for the step."""
    slots = []
    for s in state.scores:
        if s.shape[0] < 2:
            raise TooFewCandidatesError("need a positive and at least one negative")
        _, slot = consistency_from_scores(s)
        slots.append(slot)
    return slots


def positives_mean(state: ForwardState) -> np.ndarray:
    """Mean of the per-query positive embeddings (candidate slot 0)."""
    return np.mean([c[0] for c in state.cand_embs], axis=0)


def total_loss_and_grad(state: ForwardState, constraints: ConstraintEstimates):
    """Robust objective value and its analytic gradient over (gamma, beta).

    The four terms are uniformity, gap, filtered entropy, and filtered hard
    mining. Filter weights come from the queue-estimated entropy threshold;
    a non-positive threshold filters everything (the consistency terms and
    their gradients vanish instead of faulting).
    """
    e_b = constraints.entropy_threshold
    if e_b > 0:
        w = rem_weights(state.entropies, e_b)
    else:
        w = np.zeros(state.batch_size)
    n_act = int(np.count_nonzero(w))

    l_u, dz_u = _uniformity_grad(state.z)
    l_g, dz_g = _gap_grad(state.z, positives_mean(state), constraints.gap_source)
    l_rem, dz_rem = _rem_grad(state, w, n_act)
    if n_act == 0:
        l_rhm, dz_rhm = 0.0, np.zeros_like(state.z)
    else:
        l_rhm, dz_rhm = _rhm_grad(state, w, n_act, hard_negative_slots(state))

    breakdown = LossBreakdown(
        l_u=l_u,
        l_g=l_g,
        l_rem=l_rem,
        l_rhm=l_rhm,
        l_total=l_u + l_g + l_rem + l_rhm,
        active_count=n_act,
    )
    grad = param_grad(state, dz_u + dz_g + dz_rem + dz_rhm)
    return breakdown, grad


# ---------------------------------------------------------------------------
# Finite-difference oracle and the gradient verification gate
# ---------------------------------------------------------------------------

def finite_diff_grad(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step size h={h} outside [1e-7, 1e-3]")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for j in range(params.size):
        plus = params.copy()
        minus = params.copy()
        plus[j] += h
        minus[j] -= h
        grad[j] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(
        float(np.max(np.abs(analytic), initial=0.0)),
        float(np.max(np.abs(numeric), initial=0.0)),
        1e-8,
    )
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _gradcheck_instance(seed: int, dim: int, b: int, k: int, n: int, tau: float):
    """Seeded random instance: gallery, candidates, a generic adapter point."""
    from .gallery import Gallery, build_centroids
    from .refine import build_candidate_sets
    from .vectors import l2_normalize_rows

    rng = np.random.default_rng(seed)
    gallery = Gallery(l2_normalize_rows(rng.standard_normal((n, dim))))
    k_eff = min(k, max(1, n - 1))
    cents = build_centroids(gallery, k_eff, seed)
    raw = rng.standard_normal((b, dim))
    gamma = 1.0 + 0.1 * rng.standard_normal(dim)
    beta = 0.1 * rng.standard_normal(dim)

    _, _, z = affine_normalize(gamma, beta, raw)
    cands = build_candidate_sets(z, gallery, cents, k_eff)
    cand_embs = [c.candidate_embeddings for c in cands]
    state = forward_state(gamma, beta, raw, cand_embs, tau)

    src_gamma = np.ones(dim)
    src_beta = np.zeros(dim)
    src_state = forward_state(src_gamma, src_beta, raw, cand_embs, tau)

    delta_t = float(np.linalg.norm(state.z.mean(axis=0) - positives_mean(state)))
    delta_s = max(0.0, delta_t - 0.3)
    e_b = 1.2 * float(np.median(state.entropies))
    if e_b <= 0:
        e_b = 1e-3
    return state, src_state, cand_embs, raw, delta_s, e_b


def gradient_check(
    seed: int = 0,
    dims=(16,),
    instances: int = 20,
    b: int = 8,
    k: int = 4,
    n: int = 48,
    tau: float = 0.5,
    h: float = 1e-5,
    perturb: float = 0.0,
) -> dict:
    """Compare every analytic gradient against central finite differences.

    Returns a report with the max relative error per loss target over all
    seeded instances. ``perturb`` deliberately offsets the analytic gradients
    (negative-control hook used by the tests).
    """
    targets = ("uniformity", "gap", "rem", "rhm", "em", "kl", "total")
    worst = {t: 0.0 for t in targets}

    for dim in dims:
        for inst in range(instances):
            state, src_state, cand_embs, raw, delta_s, e_b = _gradcheck_instance(
                seed * 10_000 + inst, dim, b, k, n, tau
            )
            w = rem_weights(state.entropies, e_b)
            n_act = int(np.count_nonzero(w))
            slots = hard_negative_slots(state)
            pos_mean = positives_mean(state)
            src_probs = src_state.probs

            def restate(theta):
                return forward_state(theta[:dim], theta[dim:], raw, cand_embs, tau)

            def make_value(term):
                def value(theta):
                    st = restate(theta)
                    if term == "uniformity":
                        return _uniformity_grad(st.z)[0]
                    if term == "gap":
                        return _gap_grad(st.z, pos_mean, delta_s)[0]
                    if term == "rem":
                        return _rem_grad(st, w, n_act)[0]
                    if term == "rhm":
                        return _rhm_grad(st, w, n_act, slots)[0]
                    if term == "em":
                        return _em_grad(st)[0]
                    if term == "kl":
                        return _kl_grad(st, src_probs)[0]
                    total = (
                        _uniformity_grad(st.z)[0]
                        + _gap_grad(st.z, pos_mean, delta_s)[0]
                        + _rem_grad(st, w, n_act)[0]
                        + _rhm_grad(st, w, n_act, slots)[0]
                    )
                    return total

                return value

            analytic = {
                "uniformity": _uniformity_grad(state.z)[1],
                "gap": _gap_grad(state.z, pos_mean, delta_s)[1],
                "rem": _rem_grad(state, w, n_act)[1],
                "rhm": _rhm_grad(state, w, n_act, slots)[1],
                "em": _em_grad(state)[1],
                "kl": _kl_grad(state, src_probs)[1],
            }
            analytic["total"] = (
                analytic["uniformity"] + analytic["gap"] + analytic["rem"] + analytic["rhm"]
            )

            theta0 = np.concatenate([state.gamma, state.beta])
            for term in targets:
                ga = param_grad(state, analytic[term]).flat()
                if perturb:
                    ga = ga + perturb
                gn = finite_diff_grad(make_value(term), theta0, h)
                err = _relative_error(ga, gn)
                worst[term] = max(worst[term], err)

    max_err = max(worst.values())
    return {
        "targets": worst,
        "max_relative_error": max_err,
        "tolerance": 1e-4,
        "passed": bool(max_err < 1e-4),
    }
