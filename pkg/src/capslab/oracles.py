"""Independent reference implementations used to cross-check the fast paths.

Everything here is deliberately written as unoptimized straight-line loops
over plain numpy scalars/vectors, sharing no code with the production ops.
The test suite and the ``selftest`` CLI subcommand compare production outputs
against these, and use the finite-difference checker to validate every
backward rule.
"""

from __future__ import annotations

import numpy as np

from .tensor import ComputationTape, Tensor


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(build_loss, params, step=1e-5, floor=1e-7):
    """Max elementwise relative error between tape gradients and central
    finite differences of ``build_loss`` w.r.t. every tensor in ``params``.

    ``build_loss`` must recompute the scalar loss from the params' current
    values on each call. Relative error uses ``floor`` as an absolute
    denominator floor so near-zero gradients do not blow up the ratio.
    """
    with ComputationTape() as tape:
        loss = build_loss()
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = [
        np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        for p in params
    ]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.values.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(build_loss().values)
            flat[idx] = orig - step
            down = float(build_loss().values)
            flat[idx] = orig
            fd = (up - down) / (2.0 * step)
            a = ana.reshape(-1)[idx]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# convolution


def conv2d_naive(x, k, stride=1, padding=0):
    """Direct six-loop cross-correlation of [N,C,H,W] with [O,C,K,K]."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b, ci, i * stride + u, j * stride + v]
                                    * k[f, ci, u, v]
                                )
                    out[b, f, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# routing (same pinned equations as capslab.routing, re-derived by hand)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softmax_last(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def squash_oracle(v, epsilon=1e-8):
    v = np.asarray(v, dtype=np.float64)
    n2 = float(np.dot(v, v))
    n = np.sqrt(n2 + epsilon * epsilon)
    return v * (n / (1.0 + n2))


def dynamic_route_oracle(votes, iterations=3, epsilon=1e-8):
    """votes [B, n_l, n_h, D] -> (poses [B,n_h,D], acts [B,n_h],
    couplings trace: list per iteration of [B,n_l,n_h])."""
    votes = np.asarray(votes, dtype=np.float64)
    bsz, nl, nh, d = votes.shape
    poses = np.zeros((bsz, nh, d))
    acts = np.zeros((bsz, nh))
    trace = [np.zeros((bsz, nl, nh)) for _ in range(iterations)]
    for b in range(bsz):
        logits = np.zeros((nl, nh))
        v = None
        for it in range(iterations):
            c = np.zeros((nl, nh))
            for i in range(nl):
                c[i] = _softmax_last(logits[i])
            trace[it][b] = c
            v = np.zeros((nh, d))
            for j in range(nh):
                s = np.zeros(d)
                for i in range(nl):
                    s += c[i, j] * votes[b, i, j]
                v[j] = squash_oracle(s, epsilon)
            if it < iterations - 1:
                for i in range(nl):
                    for j in range(nh):
                        logits[i, j] += float(np.dot(votes[b, i, j], v[j]))
        poses[b] = v
        for j in range(nh):
            acts[b, j] = np.sqrt(float(np.dot(v[j], v[j])) + epsilon * epsilon)
    return poses, acts, trace


def em_route_oracle(votes, lower_acts, iterations=3, beta_a=1.0, beta_u=0.5,
                    epsilon=1e-8):
    votes = np.asarray(votes, dtype=np.float64)
    lower_acts = np.asarray(lower_acts, dtype=np.float64)
    bsz, nl, nh, d = votes.shape
    poses = np.zeros((bsz, nh, d))
    acts = np.zeros((bsz, nh))
    trace = []
    for b in range(bsz):
        r = np.full((nl, nh), 1.0 / nh)
        batch_trace = [r.copy()]
        mu = rw = n = None
        for it in range(iterations):
            rw = np.zeros((nl, nh))
            for i in range(nl):
                for j in range(nh):
                    rw[i, j] = r[i, j] * lower_acts[b, i]
            n = rw.sum(axis=0)
            mu = np.zeros((nh, d))
            for j in range(nh):
                s = np.zeros(d)
                for i in range(nl):
                    s += rw[i, j] * votes[b, i, j]
                mu[j] = s / (n[j] + epsilon)
            if it < iterations - 1:
                r = np.zeros((nl, nh))
                for i in range(nl):
                    neg_d2 = np.zeros(nh)
                    for j in range(nh):
                        diff = votes[b, i, j] - mu[j]
                        neg_d2[j] = -float(np.dot(diff, diff))
                    r[i] = _softmax_last(neg_d2)
                batch_trace.append(r.copy())
        for j in range(nh):
            cost = 0.0
            for i in range(nl):
                diff = votes[b, i, j] - mu[j]
                cost += rw[i, j] * float(np.dot(diff, diff))
            cost /= n[j] + epsilon
            acts[b, j] = float(_sigmoid(beta_a - beta_u * cost))
        poses[b] = mu
        trace.append(batch_trace)
    return poses, acts, trace


def vb_route_oracle(votes, lower_acts, iterations=3, beta_a=0.0, beta_u=0.0,
                    epsilon=1e-8):
    votes = np.asarray(votes, dtype=np.float64)
    lower_acts = np.asarray(lower_acts, dtype=np.float64)
    bsz, nl, nh, d = votes.shape
    poses = np.zeros((bsz, nh, d))
    acts = np.zeros((bsz, nh))
    trace = []
    for b in range(bsz):
        gamma = np.full((nl, nh), 1.0 / nh)
        batch_trace = [gamma.copy()]
        mu = e_ln_pi = e_ln_det = None
        for _ in range(iterations):
            gw = np.zeros((nl, nh))
            for i in range(nl):
                for j in range(nh):
                    gw[i, j] = gamma[i, j] * lower_acts[b, i]
            n = gw.sum(axis=0)
            mu = np.zeros((nh, d))
            s = np.zeros((nh, d))
            lam = np.zeros((nh, d))
            for j in range(nh):
                acc = np.zeros(d)
                for i in range(nl):
                    acc += gw[i, j] * votes[b, i, j]
                mu[j] = acc / (n[j] + epsilon)
                dev = np.zeros(d)
                for i in range(nl):
                    diff = votes[b, i, j] - mu[j]
                    dev += gw[i, j] * diff * diff
                s[j] = dev / (n[j] + epsilon)
                lam[j] = np.maximum((n[j] + 1.0) / (n[j] * s[j] + 1.0), epsilon)
            pi = (n + 1.0) / (n.sum() + nh)
            e_ln_pi = np.log(pi)
            e_ln_det = np.log(lam).sum(axis=1)
            gamma = np.zeros((nl, nh))
            for i in range(nl):
                logp = np.zeros(nh)
                for j in range(nh):
                    diff = votes[b, i, j] - mu[j]
                    logp[j] = (
                        e_ln_pi[j]
                        + 0.5 * e_ln_det[j]
                        - 0.5 * float(np.dot(lam[j], diff * diff))
                    )
                gamma[i] = _softmax_last(logp)
            batch_trace.append(gamma.copy())
        for j in range(nh):
            acts[b, j] = float(_sigmoid(beta_a - (beta_u + e_ln_pi[j] + e_ln_det[j])))
        poses[b] = mu
        trace.append(batch_trace)
    return poses, acts, trace


def self_route_oracle(poses, lower_acts, w_route, w_pose, epsilon=1e-8):
    """poses [B,n_l,P,P], lower_acts [B,n_l], w_route [n_l,D,n_h],
    w_pose [n_l,n_h,P,P]."""
    poses = np.asarray(poses, dtype=np.float64)
    lower_acts = np.asarray(lower_acts, dtype=np.float64)
    bsz, nl, p, _ = poses.shape
    nh = w_route.shape[-1]
    d = p * p
    out_poses = np.zeros((bsz, nh, d))
    out_acts = np.zeros((bsz, nh))
    couplings = np.zeros((bsz, nl, nh))
    for b in range(bsz):
        c = np.zeros((nl, nh))
        for i in range(nl):
            u = poses[b, i].reshape(d)
            logits = np.zeros(nh)
            for j in range(nh):
                logits[j] = float(np.dot(u, w_route[i, :, j]))
            c[i] = _softmax_last(logits)
        couplings[b] = c
        a_total = lower_acts[b].sum()
        for j in range(nh):
            ca_sum = 0.0
            vote_sum = np.zeros(d)
            for i in range(nl):
                ca = c[i, j] * lower_acts[b, i]
                ca_sum += ca
                vote = (poses[b, i] @ w_pose[i, j]).reshape(d)
                vote_sum += ca * vote
            out_acts[b, j] = ca_sum / (a_total + epsilon)
            out_poses[b, j] = vote_sum / (ca_sum + epsilon)
    return out_poses.reshape(bsz, nh, p, p), out_acts, couplings


# ---------------------------------------------------------------------------
# diagnostics


class StoreEverythingMean:
    """Keeps every observed activation batch and averages at the end; the
    memory-hungry counterpart of the streaming ledger."""

    def __init__(self):
        self.batches = []

    def observe(self, activations):
        a = np.asarray(activations, dtype=np.float64)
        self.batches.append(a.reshape(-1, a.shape[-1]))

    def averages(self):
        stacked = np.concatenate(self.batches, axis=0)
        return stacked.mean(axis=0)
