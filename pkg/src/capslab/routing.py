"""The four routing procedures mapping lower-capsule votes to higher capsules.

All four consume/produce the same shapes: votes [B, n_lower, n_higher, P, P]
(plus lower activations [B, n_lower]) in, poses [B, n_higher, P, P] and
activations [B, n_higher] in [0, 1] out. Iterative algorithms are unrolled on
the active tape, so gradients flow through every iteration.

Conventions pinned here (and mirrored by the straight-line oracles in
``capslab.oracles``):

* dynamic: agreement logits start at zero; couplings are a softmax over the
  higher index; the weighted vote sum is squashed, agreement is the
  vote/output dot product, and the output activation is the squashed norm.
* em: posteriors start uniform; each iteration takes an activation-weighted
  mean of votes (M-step) then recomputes posteriors from squared vote-to-mean
  distances (E-step, skipped after the final M-step). Activation is
  sigmoid(beta_a - beta_u * cost) with cost the weighted mean squared
  distance to the cluster mean.
* vb: responsibilities start at exactly 1/n_higher; each iteration reweights
  them by the lower activations, refits a diagonal Gaussian mixture with unit
  pseudo-count priors, and recomputes responsibilities from expected
  log-likelihoods. Activation is
  sigmoid(beta_a - (beta_u + E[ln pi] + E[ln det Lambda])).
* self-routing: no iteration; each lower capsule produces its own coefficient
  logits from a learned map of its pose, and higher poses/activations are
  activation-gated weighted averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

ALGORITHMS = ("dynamic", "em", "vb", "self_routing")


@dataclass
class RoutingConfig:
    algorithm: str = "dynamic"
    iterations: int = 3
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown routing algorithm {self.algorithm!r}; "
                f"expected one of {ALGORITHMS}"
            )
        if self.iterations < 1:
            raise ConfigurationError("routing iterations must be >= 1")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")


@dataclass
class VoteField:
    """Votes from every lower capsule to every higher capsule.

    votes: [B, n_lower, n_higher, P, P]; lower_activations: [B, n_lower].
    """

    votes: Tensor
    lower_activations: Tensor

    def __post_init__(self):
        v, a = self.votes, self.lower_activations
        if v.ndim != 5 or v.shape[-1] != v.shape[-2]:
            raise ShapeError(
                f"votes must be [B,n_lower,n_higher,P,P], got {v.shape}"
            )
        if a.shape != v.shape[:2]:
            raise ShapeError(
                f"lower_activations {a.shape} do not match votes {v.shape}"
            )
        if v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeError(f"need at least one capsule per side: {v.shape}")

    @property
    def n_lower(self) -> int:
        return self.votes.shape[1]

    @property
    def n_higher(self) -> int:
        return self.votes.shape[2]

    @property
    def pose_dim(self) -> int:
        return self.votes.shape[-1]


@dataclass
class VBPosterior:
    """Mixture posterior snapshot: mixing pi [B,n_higher], means mu
    [B,n_higher,D], diagonal precisions lam [B,n_higher,D]."""

    pi: np.ndarray
    mu: np.ndarray
    lam: np.ndarray


@dataclass
class RoutingState:
    """Diagnostics snapshot of the final (and initial) soft assignments;
    numpy copies, off the tape."""

    couplings: np.ndarray
    initial_couplings: np.ndarray | None = None
    posterior: VBPosterior | None = None


@dataclass
class RoutingOutput:
    poses: Tensor  # [B, n_higher, P, P]
    activations: Tensor  # [B, n_higher], entries in [0, 1]
    state: RoutingState | None = None


@dataclass
class SelfRoutingParams:
    """Per lower-capsule-type maps: route [n_lower, D, n_higher] producing
    coefficient logits, pose [n_lower, n_higher, P, P] producing votes."""

    route: Tensor
    pose: Tensor


@dataclass
class RoutingTelemetry:
    """Counts stabilizer interventions (VB precision clamps). Reset between
    runs; single-threaded by the concurrency model."""

    precision_clamps: int = 0

    def reset(self):
        self.precision_clamps = 0


telemetry = RoutingTelemetry()


def squash(v: Tensor, axis: int = -1, epsilon: float = 1e-8) -> Tensor:
    """Shrink vectors to norm < 1: v * |v| / (1 + |v|^2), zero-safe."""
    n2 = T.tsum(T.square(v), axis=axis, keepdims=True)
    n = T.sqrt(n2 + epsilon * epsilon)
    return T.mul(v, T.div(n, n2 + 1.0))


def _vec_norm(v: Tensor, epsilon: float) -> Tensor:
    return T.sqrt(T.tsum(T.square(v), axis=-1) + epsilon * epsilon)


def _flatten_votes(field: VoteField) -> tuple[Tensor, int, int, int]:
    b, nl, nh, p, _ = field.votes.shape
    return T.reshape(field.votes, (b, nl, nh, p * p)), nl, nh, p


def dynamic_route(field: VoteField, cfg: RoutingConfig) -> RoutingOutput:
    """Iterative routing by agreement over softmax couplings."""
    v, nl, nh, p = _flatten_votes(field)
    b = v.shape[0]
    logits = Tensor(np.zeros((b, nl, nh)))
    c = out = None
    for it in range(cfg.iterations):
        c = T.softmax(logits, axis=2)
        s = T.einsum("bij,bijd->bjd", c, v)
        out = squash(s, axis=-1, epsilon=cfg.epsilon)
        if it < cfg.iterations - 1:
            logits = T.add(logits, T.einsum("bijd,bjd->bij", v, out))
    acts = _vec_norm(out, cfg.epsilon)
    return RoutingOutput(
        poses=T.reshape(out, (b, nh, p, p)),
        activations=acts,
        state=RoutingState(couplings=c.values.copy()),
    )


def em_route(
    field: VoteField, cfg: RoutingConfig, beta_a: Tensor, beta_u: Tensor
) -> RoutingOutput:
    """Expectation-maximization clustering of votes, activation-weighted."""
    v, nl, nh, p = _flatten_votes(field)
    b = v.shape[0]
    eps = cfg.epsilon
    a_low = T.reshape(field.lower_activations, (b, nl, 1))
    r_post = Tensor(np.full((b, nl, nh), 1.0 / nh))
    r_w = n = mu = None
    for it in range(cfg.iterations):
        r_w = T.mul(r_post, a_low)
        n = T.tsum(r_w, axis=1)  # [b, nh]
        mu = T.div(T.einsum("bij,bijd->bjd", r_w, v), T.reshape(n + eps, (b, nh, 1)))
        if it < cfg.iterations - 1:
            r_post = T.softmax(T.neg(T.sq_dist(v, mu)), axis=2)
    d2 = T.sq_dist(v, mu)
    cost = T.div(T.einsum("bij,bij->bj", r_w, d2), n + eps)
    acts = T.logistic(T.sub(beta_a, T.mul(beta_u, cost)))
    return RoutingOutput(
        poses=T.reshape(mu, (b, nh, p, p)),
        activations=acts,
        state=RoutingState(couplings=r_post.values.copy()),
    )


def vb_route(
    field: VoteField, cfg: RoutingConfig, beta_a: Tensor, beta_u: Tensor
) -> RoutingOutput:
    """Variational-Bayes diagonal Gaussian-mixture routing."""
    v, nl, nh, p = _flatten_votes(field)
    b = v.shape[0]
    eps = cfg.epsilon
    a_low = T.reshape(field.lower_activations, (b, nl, 1))
    gamma_init = np.full((b, nl, nh), 1.0 / nh)
    gamma = Tensor(gamma_init)
    mu = e_ln_pi = e_ln_det = lam = pi = None
    for _ in range(cfg.iterations):
        g_w = T.mul(gamma, a_low)
        n = T.tsum(g_w, axis=1)  # [b, nh]
        n_safe = T.reshape(n + eps, (b, nh, 1))
        mu = T.div(T.einsum("bij,bijd->bjd", g_w, v), n_safe)
        s = T.div(T.weighted_sq_dev(g_w, v, mu), n_safe)
        n_col = T.reshape(n, (b, nh, 1))
        lam_raw = T.div(n_col + 1.0, T.add(T.mul(n_col, s), Tensor(1.0)))
        telemetry.precision_clamps += int(np.sum(lam_raw.values < eps))
        lam = T.maximum_const(lam_raw, eps)
        pi = T.div(n + 1.0, T.tsum(n, axis=1, keepdims=True) + float(nh))
        e_ln_pi = T.log(pi)
        e_ln_det = T.tsum(T.log(lam), axis=-1)  # [b, nh]
        log_resp = T.add(
            T.reshape(e_ln_pi + 0.5 * e_ln_det, (b, 1, nh)),
            T.mul(T.sq_dist(v, mu, weights=lam), Tensor(-0.5)),
        )
        gamma = T.softmax(log_resp, axis=2)
    acts = T.logistic(T.sub(beta_a, T.add(beta_u, T.add(e_ln_pi, e_ln_det))))
    return RoutingOutput(
        poses=T.reshape(mu, (b, nh, p, p)),
        activations=acts,
        state=RoutingState(
            couplings=gamma.values.copy(),
            initial_couplings=gamma_init,
            posterior=VBPosterior(
                pi=pi.values.copy(), mu=mu.values.copy(), lam=lam.values.copy()
            ),
        ),
    )


def self_route(
    poses: Tensor,
    activations: Tensor,
    params: SelfRoutingParams,
    cfg: RoutingConfig,
) -> RoutingOutput:
    """Single-pass routing: each lower capsule predicts its own coefficients.

    poses [B, n_lower, P, P], activations [B, n_lower]. Coefficients are a
    softmax over learned logits; higher activations are the coefficient- and
    activation-weighted vote mass normalized by total lower activation, which
    keeps them in [0, 1].
    """
    if poses.ndim != 4 or poses.shape[-1] != poses.shape[-2]:
        raise ShapeError(f"poses must be [B,n_lower,P,P], got {poses.shape}")
    b, nl, p, _ = poses.shape
    nh = params.route.shape[-1]
    eps = cfg.epsilon
    u = T.reshape(poses, (b, nl, p * p))
    logits = T.einsum("bid,idj->bij", u, params.route)
    c = T.softmax(logits, axis=2)
    votes = T.einsum("bipq,ijqr->bijpr", poses, params.pose)
    vflat = T.reshape(votes, (b, nl, nh, p * p))
    ca = T.mul(c, T.reshape(activations, (b, nl, 1)))
    ca_sum = T.tsum(ca, axis=1)  # [b, nh]
    acts = T.div(ca_sum, T.tsum(activations, axis=1, keepdims=True) + eps)
    v_out = T.div(
        T.einsum("bij,bijd->bjd", ca, vflat), T.reshape(ca_sum + eps, (b, nh, 1))
    )
    return RoutingOutput(
        poses=T.reshape(v_out, (b, nh, p, p)),
        activations=acts,
        state=RoutingState(couplings=c.values.copy()),
    )
