"""Pull/push contrastive objectives on per-pixel instance embeddings.

All three losses use cosine similarity against *unnormalised* mask means and
return ``(loss, grad)`` where ``grad`` has the shape of the feature array.
Pair sums run over ordered centroid pairs ``(i, j)``, ``i != j``, and are
divided by the number of centroids.  The hinge subgradient at zero is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabeledFeatureSet",
    "Margins",
    "cross_pull_loss",
    "gradient_check",
    "hinge_clearance",
    "intra_pull_loss",
    "optimize_toy_embeddings",
    "push_loss",
    "random_feature_set",
    "total_loss",
]


@dataclass(frozen=True)
class Margins:
    m_pull: float = 0.9
    m_push: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.m_pull <= 1.0:
            raise ValueError("m_pull must lie in (0, 1]")
        if not 0.0 <= self.m_push < 1.0:
            raise ValueError("m_push must lie in [0, 1)")
        if not self.m_push < self.m_pull:
            raise ValueError("m_push must be smaller than m_pull")


@dataclass(eq=False)
class LabeledFeatureSet:
    """Pixel features with their mask, and per-mask view and identity labels."""

    features: np.ndarray
    mask_of: np.ndarray
    view_of: np.ndarray
    identity_of: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask_of = np.asarray(self.mask_of, dtype=np.int64)
        self.view_of = np.asarray(self.view_of, dtype=np.int64)
        self.identity_of = np.asarray(self.identity_of, dtype=np.int64)
        if len(self.features) and np.any(np.bincount(self.mask_of, minlength=self.n_masks) == 0):
            raise ValueError("every mask needs at least one pixel")

    @property
    def n_masks(self) -> int:
        return len(self.identity_of)

    def with_features(self, features: np.ndarray) -> LabeledFeatureSet:
        return LabeledFeatureSet(features, self.mask_of, self.view_of, self.identity_of)

    def centroids(self) -> np.ndarray:
        return _centroids(self.features, self.mask_of, self.n_masks)[0]


def _centroids(f, mask_of, n_masks):
    counts = np.bincount(mask_of, minlength=n_masks).astype(np.float64)
    sums = np.zeros((n_masks, f.shape[1]))
    np.add.at(sums, mask_of, f)
    return sums / counts[:, None], counts


def _cos_and_grads(u, v):
    """Row-wise cosine of ``u`` and ``v`` and its gradients w.r.t. each."""
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    uh, vh = u / nu, v / nv
    c = np.sum(uh * vh, axis=-1)
    gu = (vh - c[..., None] * uh) / nu
    gv = (uh - c[..., None] * vh) / nv
    return c, gu, gv


def _scatter_centroid_grad(g_mu, lfs: LabeledFeatureSet, counts):
    return g_mu[lfs.mask_of] / counts[lfs.mask_of, None]


def intra_pull_loss(lfs: LabeledFeatureSet, margins: Margins) -> tuple[float, np.ndarray]:
    """Mean over masks of the mean hinge ``max(0, m_pull - cos(f_p, mu))``."""
    f = lfs.features
    if len(f) == 0:
        return 0.0, np.zeros_like(f)
    mu, counts = _centroids(f, lfs.mask_of, lfs.n_masks)
    c, g_f, g_mu = _cos_and_grads(f, mu[lfs.mask_of])
    active = (margins.m_pull - c) > 0
    w = 1.0 / (counts[lfs.mask_of] * lfs.n_masks)
    loss = float(np.sum(w * np.where(active, margins.m_pull - c, 0.0)))
    coef = -(w * active)[:, None]
    grad = coef * g_f
    g_mu_acc = np.zeros_like(mu)
    np.add.at(g_mu_acc, lfs.mask_of, coef * g_mu)
    grad += _scatter_centroid_grad(g_mu_acc, lfs, counts)
    return loss, grad


def _pair_loss(lfs: LabeledFeatureSet, same_identity: bool, margin: float, sign: float):
    f = lfs.features
    if len(f) == 0:
        return 0.0, np.zeros_like(f)
    mu, counts = _centroids(f, lfs.mask_of, lfs.n_masks)
    n = lfs.n_masks
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    same = lfs.identity_of[ii] == lfs.identity_of[jj]
    keep = same if same_identity else ~same
    ii, jj = ii[keep], jj[keep]
    if len(ii) == 0:
        return 0.0, np.zeros_like(f)
    c, gi, gj = _cos_and_grads(mu[ii], mu[jj])
    arg = sign * (c - margin)
    active = arg > 0
    loss = float(np.sum(np.where(active, arg, 0.0)) / n)
    coef = (sign * active / n)[:, None]
    g_mu = np.zeros_like(mu)
    np.add.at(g_mu, ii, coef * gi)
    np.add.at(g_mu, jj, coef * gj)
    return loss, _scatter_centroid_grad(g_mu, lfs, counts)


def cross_pull_loss(lfs: LabeledFeatureSet, margins: Margins) -> tuple[float, np.ndarray]:
    """``sum max(0, m_pull - cos(mu_i, mu_j)) / |P|`` over same-identity pairs."""
    return _pair_loss(lfs, True, margins.m_pull, -1.0)


def push_loss(lfs: LabeledFeatureSet, margins: Margins) -> tuple[float, np.ndarray]:
    """``sum max(0, cos(mu_i, mu_j) - m_push) / |P|`` over different-identity pairs."""
    return _pair_loss(lfs, False, margins.m_push, 1.0)


def total_loss(lfs: LabeledFeatureSet, margins: Margins) -> tuple[float, np.ndarray]:
    total, grad = 0.0, np.zeros_like(lfs.features)
    for fn in (intra_pull_loss, cross_pull_loss, push_loss):
        loss, g = fn(lfs, margins)
        total += loss
        grad += g
    return total, grad


LOSSES = {"intra_pull": intra_pull_loss, "cross_pull": cross_pull_loss, "push": push_loss}


def hinge_clearance(lfs: LabeledFeatureSet, margins: Margins) -> float:
    """Smallest distance of any hinge argument from its kink at zero."""
    mu, _ = _centroids(lfs.features, lfs.mask_of, lfs.n_masks)
    c_pix, _, _ = _cos_and_grads(lfs.features, mu[lfs.mask_of])
    args = [margins.m_pull - c_pix]
    ii, jj = np.nonzero(~np.eye(lfs.n_masks, dtype=bool))
    if len(ii):
        c, _, _ = _cos_and_grads(mu[ii], mu[jj])
        same = lfs.identity_of[ii] == lfs.identity_of[jj]
        args.append(np.where(same, margins.m_pull - c, c - margins.m_push))
    return float(np.min(np.abs(np.concatenate(args))))


def gradient_check(lfs: LabeledFeatureSet, margins: Margins, h: float = 1e-6) -> dict[str, float]:
    """Max-norm relative error between analytic and central-difference gradients."""
    out = {}
    f0 = lfs.features
    for name, fn in LOSSES.items():
        _, g = fn(lfs, margins)
        fd = np.zeros_like(f0)
        for idx in np.ndindex(f0.shape):
            fp, fm = f0.copy(), f0.copy()
            fp[idx] += h
            fm[idx] -= h
            fd[idx] = (fn(lfs.with_features(fp), margins)[0]
                       - fn(lfs.with_features(fm), margins)[0]) / (2 * h)
        scale = max(np.max(np.abs(g)), np.max(np.abs(fd)))
        out[name] = float(np.max(np.abs(g - fd)) / scale) if scale > 0 else 0.0
    return out


def _normalize_rows(f):
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def optimize_toy_embeddings(lfs: LabeledFeatureSet, margins: Margins, steps: int = 500,
                            lr: float = 0.5) -> LabeledFeatureSet:
    """Projected gradient descent on the summed losses.

    Features are renormalised after every step; a step that raises the loss
    is rejected and the learning rate halved.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = _normalize_rows(lfs.features)
    loss, grad = total_loss(lfs.with_features(f), margins)
    for _ in range(steps):
        if loss == 0.0:
            break
        cand = _normalize_rows(f - lr * grad)
        cand_loss, cand_grad = total_loss(lfs.with_features(cand), margins)
        if cand_loss <= loss:
            f, loss, grad = cand, cand_loss, cand_grad
        else:
            lr *= 0.5
            if lr < 1e-12:
                break
    return lfs.with_features(f)


def random_feature_set(rng: np.random.Generator, n_identities: int = 3, n_views: int = 2,
                       pixels_per_mask: int = 5, dim: int = 8) -> LabeledFeatureSet:
    """Random unit features, one mask per (identity, view)."""
    mask_of, view_of, identity_of = [], [], []
    m = 0
    for ident in range(n_identities):
        for view in range(n_views):
            mask_of += [m] * pixels_per_mask
            view_of.append(view)
            identity_of.append(ident)
            m += 1
    f = _normalize_rows(rng.normal(size=(len(mask_of), dim)))
    return LabeledFeatureSet(f, mask_of, view_of, identity_of)
