"""Training objectives over a batch of embeddings, with analytic gradients.

A ``Batch`` carries, per sample: the embedding z (row of ``z``), an
integer relation label, and the K frozen description vectors of that
sample's relation.  Four per-sample objectives are defined on top of it:

* ``scl_loss``   -- supervised contrastive loss over the batch, using
  exp(cos/tau) scores with a shared denominator over all other samples.
* ``hsmt_loss``  -- hardest-pair margin term
  -log(1 + exp(d(z_x, p*)) - exp(d(z_x, n*))) where p* is the farthest
  positive and n* the nearest negative (Euclidean distance), clamped
  below at 1e-6 before the log.
* ``hm_loss``    -- description-anchored hard-example mining: per
  description vector k, positives farther (in cosine distance from the
  anchor description) than the closest negative are pulled in
  quadratically, negatives closer than the farthest positive are pushed
  out against a margin m.
* ``mi_loss``    -- InfoNCE-style bound contrasting bilinear scores
  z^T W d of the sample's own K descriptions against the descriptions
  of the batch negatives, computed in log-space.

Every loss returns its value together with d(value)/d(z) for the whole
batch (and d(value)/dW where W participates).  Description vectors are
constants: no gradient ever flows into them.  Degenerate inputs (no
positive partner, no negatives, empty mined sets) contribute zero with
an explicit flag rather than raising, so a trainer can skip them while
still counting how often they occur.  ``joint_loss`` averages the
beta-weighted sum of the four terms over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from fcre.geometry import euclidean, euclidean_gradients


@dataclass
class HyperParams:
    """All tunables of the training and inference pipeline.

    ``epochs_current``/``epochs_memory`` may be zero (frozen-encoder
    runs are legitimate baselines); every other constraint is enforced
    by ``validate``.
    """

    tau: float = 0.1
    margin: float = 0.5
    beta_sc: float = 1.0
    beta_st: float = 1.0
    beta_hm: float = 0.5
    beta_mi: float = 2.0
    alpha: float = 0.4
    epsilon: float = 60.0
    k_desc: int = 7
    memory_size: int = 1
    epochs_current: int = 10
    epochs_memory: int = 10
    learning_rate: float = 1e-3

    def validate(self) -> "HyperParams":
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.margin <= 1.0:
            raise ValueError(f"margin must lie in (0, 1], got {self.margin}")
        betas = (self.beta_sc, self.beta_st, self.beta_hm, self.beta_mi)
        if any(b < 0.0 for b in betas):
            raise ValueError(f"loss weights must be non-negative, got {betas}")
        if all(b == 0.0 for b in betas):
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.k_desc < 1:
            raise ValueError(f"k_desc must be >= 1, got {self.k_desc}")
        if self.memory_size < 1:
            raise ValueError(f"memory_size must be >= 1, got {self.memory_size}")
        if self.epochs_current < 0 or self.epochs_memory < 0:
            raise ValueError("epoch counts must be >= 0")
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        return self


@dataclass
class Batch:
    """Embeddings, labels, and per-sample description vectors.

    ``descriptions[i]`` holds the K description vectors of sample i's
    relation, shape (K, d).  K must be uniform across the batch, which
    the array shape enforces.
    """

    z: np.ndarray  # (B, d)
    labels: np.ndarray  # (B,)
    descriptions: np.ndarray  # (B, K, d)

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.descriptions = np.asarray(self.descriptions, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError(f"z must be (B, d), got shape {self.z.shape}")
        b, d = self.z.shape
        if b < 1:
            raise ValueError("batch must contain at least one sample")
        if self.labels.shape != (b,):
            raise ValueError(
                f"labels must have shape ({b},), got {self.labels.shape}"
            )
        if self.descriptions.ndim != 3 or self.descriptions.shape[0] != b:
            raise ValueError(
                f"descriptions must be (B, K, d), got {self.descriptions.shape}"
            )
        if self.descriptions.shape[2] != d:
            raise ValueError(
                f"description dim {self.descriptions.shape[2]} != embedding dim {d}"
            )
        if self.descriptions.shape[1] < 1:
            raise ValueError("need at least one description vector per sample")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("z contains non-finite entries")
        if not np.all(np.isfinite(self.descriptions)):
            raise ValueError("descriptions contain non-finite entries")

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.z.shape[1]

    @property
    def k_desc(self) -> int:
        return self.descriptions.shape[1]

    def positives(self, x: int) -> np.ndarray:
        """Indices u != x with the same label as x."""
        self._check_index(x)
        mask = self.labels == self.labels[x]
        mask[x] = False
        return np.flatnonzero(mask)

    def negatives(self, x: int) -> np.ndarray:
        """Indices with a different label than x."""
        self._check_index(x)
        return np.flatnonzero(self.labels != self.labels[x])

    def _check_index(self, x: int) -> None:
        if not 0 <= x < self.size:
            raise ValueError(f"sample index {x} out of range for batch of {self.size}")


class MiningSets(NamedTuple):
    """Hard-example selection for one sample and one description index."""

    k: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    hard_positives: tuple[int, ...]
    hard_negatives: tuple[int, ...]


class SclResult(NamedTuple):
    value: float
    grad_z: np.ndarray
    no_positive: bool


class HsmtResult(NamedTuple):
    value: float
    grad_z: np.ndarray
    no_pair: bool
    clamped: bool


class HmResult(NamedTuple):
    value: float
    grad_z: np.ndarray
    no_pair: bool


class MiResult(NamedTuple):
    value: float
    grad_z_x: np.ndarray
    grad_w: np.ndarray
    no_negative: bool


class JointResult(NamedTuple):
    value: float
    grad_z: np.ndarray
    grad_w: np.ndarray
    no_positive_count: int
    no_pair_count: int
    clamped_count: int


def _row_norms(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    if np.any(norms == 0.0):
        idx = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"{what} {idx} has zero norm; cosine is undefined")
    return norms


def _cosines_to(anchor: np.ndarray, rows: np.ndarray, what: str) -> np.ndarray:
    """cos(anchor, rows[i]) for every row, with zero-norm rejection."""
    an = math.sqrt(float(np.dot(anchor, anchor)))
    if an == 0.0:
        raise ValueError("anchor has zero norm; cosine is undefined")
    norms = _row_norms(rows, what)
    vals = (rows @ anchor) / (norms * an)
    return np.clip(vals, -1.0, 1.0)


def scl_loss(batch: Batch, x: int, tau: float) -> SclResult:
    """Supervised contrastive loss for sample x.

    L = -sum_{p in P(x)} log( exp(cos(z_x,z_p)/tau) /
                              sum_{u != x} exp(cos(z_x,z_u)/tau) )

    The denominator runs over every other batch sample, positives
    included.  Returns zero with ``no_positive`` set when x has no
    same-label partner.
    """
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if batch.size < 2:
        raise ValueError("scl_loss needs a batch of at least two samples")
    grad = np.zeros_like(batch.z)
    pos = batch.positives(x)
    if pos.size == 0:
        return SclResult(0.0, grad, True)

    others = np.flatnonzero(np.arange(batch.size) != x)
    zx = batch.z[x]
    zu = batch.z[others]
    cos_vals = _cosines_to(zx, zu, "batch sample")
    s = cos_vals / tau
    shift = float(np.max(s))
    w = np.exp(s - shift)
    total = float(np.sum(w))
    log_total = shift + math.log(total)

    pos_mask = batch.labels[others] == batch.labels[x]
    n_pos = int(np.count_nonzero(pos_mask))
    value = n_pos * log_total - float(np.sum(s[pos_mask]))

    # dL/ds_u = n_pos * softmax_u - [u is positive]
    coeff = (n_pos * (w / total) - pos_mask.astype(np.float64)) / tau

    xn = math.sqrt(float(np.dot(zx, zx)))
    un = np.sqrt(np.einsum("ij,ij->i", zu, zu))
    x_hat = zx / xn
    u_hat = zu / un[:, None]
    cos_col = cos_vals[:, None]
    dcos_dzu = (x_hat[None, :] - cos_col * u_hat) / un[:, None]
    dcos_dzx = (u_hat - cos_col * x_hat[None, :]) / xn

    grad[others] += coeff[:, None] * dcos_dzu
    grad[x] += coeff @ dcos_dzx
    return SclResult(float(value), grad, False)


def hsmt_loss(batch: Batch, x: int) -> HsmtResult:
    """Hardest-pair margin loss for sample x.

    With p* the positive farthest from z_x and n* the negative nearest
    to z_x (Euclidean), the loss is
    -log(max(1 + exp(d(z_x,z_p*)) - exp(d(z_x,z_n*)), 1e-6)).
    Only the selected pair receives gradient; when the clamp is active
    the gradient is zero everywhere.  Missing positives or negatives
    yield zero with ``no_pair`` set.
    """
    if batch.size < 2:
        raise ValueError("hsmt_loss needs a batch of at least two samples")
    grad = np.zeros_like(batch.z)
    pos = batch.positives(x)
    neg = batch.negatives(x)
    if pos.size == 0 or neg.size == 0:
        return HsmtResult(0.0, grad, True, False)

    zx = batch.z[x]
    pos_dists = np.array([euclidean(zx, batch.z[p]) for p in pos])
    neg_dists = np.array([euclidean(zx, batch.z[n]) for n in neg])
    p_star = int(pos[np.argmax(pos_dists)])  # argmax takes first, i.e. lowest index
    n_star = int(neg[np.argmin(neg_dists)])
    dp = float(np.max(pos_dists))
    dn = float(np.min(neg_dists))

    exp_p = math.exp(dp)
    exp_n = math.exp(dn)
    arg = 1.0 + exp_p - exp_n
    floor = 1e-6
    if arg <= floor:
        return HsmtResult(-math.log(floor), grad, False, True)

    value = -math.log(arg)
    # dL/d(dp) = -exp_p / arg, dL/d(dn) = +exp_n / arg
    gp_x, gp_p = euclidean_gradients(zx, batch.z[p_star])
    gn_x, gn_n = euclidean_gradients(zx, batch.z[n_star])
    grad[x] += (-exp_p / arg) * gp_x + (exp_n / arg) * gn_x
    grad[p_star] += (-exp_p / arg) * gp_p
    grad[n_star] += (exp_n / arg) * gn_n
    return HsmtResult(value, grad, False, False)


def mine_hard(batch: Batch, x: int, k: int) -> MiningSets:
    """Mine hard examples for sample x against its k-th description.

    With dist(u) = 1 - cos(d_x^k, z_u): hard positives are positives
    farther than the closest negative, hard negatives are negatives
    closer than the farthest positive.  Both P(x) and N(x) must be
    non-empty.
    """
    pos = batch.positives(x)
    neg = batch.negatives(x)
    if pos.size == 0:
        raise ValueError(f"sample {x} has no positives to mine")
    if neg.size == 0:
        raise ValueError(f"sample {x} has no negatives to mine")
    if not 0 <= k < batch.k_desc:
        raise ValueError(f"description index {k} out of range for K={batch.k_desc}")

    anchor = batch.descriptions[x, k]
    pos_dist = 1.0 - _cosines_to(anchor, batch.z[pos], "batch sample")
    neg_dist = 1.0 - _cosines_to(anchor, batch.z[neg], "batch sample")
    closest_neg = float(np.min(neg_dist))
    farthest_pos = float(np.max(pos_dist))
    hard_pos = tuple(int(p) for p, dist in zip(pos, pos_dist) if dist > closest_neg)
    hard_neg = tuple(int(n) for n, dist in zip(neg, neg_dist) if dist < farthest_pos)
    return MiningSets(
        k=k,
        positives=tuple(int(p) for p in pos),
        negatives=tuple(int(n) for n in neg),
        hard_positives=hard_pos,
        hard_negatives=hard_neg,
    )


def hm_loss(batch: Batch, x: int, margin: float) -> HmResult:
    """Description-anchored hard-mining loss for sample x.

    Per description vector k:
      sum_{p in hard P} (1 - cos(d_x^k, z_p))^2
    + sum_{n in hard N} max(0, margin - 1 + cos(d_x^k, z_n))^2

    The anchor is the (constant) description vector, so z_x itself only
    receives gradient if it appears as somebody's mined example --
    never through its own anchor.  Empty P(x) or N(x) contributes zero.
    """
    if not 0.0 < margin <= 1.0:
        raise ValueError(f"margin must lie in (0, 1], got {margin}")
    grad = np.zeros_like(batch.z)
    pos = batch.positives(x)
    neg = batch.negatives(x)
    if pos.size == 0 or neg.size == 0:
        return HmResult(0.0, grad, True)

    value = 0.0
    for k in range(batch.k_desc):
        sets = mine_hard(batch, x, k)
        anchor = batch.descriptions[x, k]
        an = math.sqrt(float(np.dot(anchor, anchor)))
        if an == 0.0:
            raise ValueError("description anchor has zero norm")
        a_hat = anchor / an
        for p in sets.hard_positives:
            zp = batch.z[p]
            pn = math.sqrt(float(np.dot(zp, zp)))
            c = float(np.dot(a_hat, zp)) / pn
            t = 1.0 - c
            value += t * t
            dcos_dzp = (a_hat - c * (zp / pn)) / pn
            grad[p] += -2.0 * t * dcos_dzp
        for n in sets.hard_negatives:
            zn = batch.z[n]
            nn = math.sqrt(float(np.dot(zn, zn)))
            c = float(np.dot(a_hat, zn)) / nn
            t = margin - 1.0 + c
            if t > 0.0:
                value += t * t
                dcos_dzn = (a_hat - c * (zn / nn)) / nn
                grad[n] += 2.0 * t * dcos_dzn
    return HmResult(float(value), grad, False)


def mi_loss(batch: Batch, x: int, w_matrix: np.ndarray, tau: float) -> MiResult:
    """InfoNCE-style mutual-information bound for sample x.

    With h(z, d) = exp(z^T W d / tau):
    L = -log( sum_k h(z_x, d_x^k) /
              (sum_k h(z_x, d_x^k) + sum_{n in N(x)} sum_k h(z_x, d_n^k)) )

    Negatives contribute one block of K description terms per negative
    *sample* (duplicate relations count multiply).  Computed in
    log-space.  Returns zero (value and both gradients) when N(x) is
    empty.
    """
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    w_matrix = np.asarray(w_matrix, dtype=np.float64)
    d = batch.embed_dim
    if w_matrix.shape != (d, d):
        raise ValueError(f"W must be ({d}, {d}), got {w_matrix.shape}")
    grad_w = np.zeros_like(w_matrix)
    neg = batch.negatives(x)
    zx = batch.z[x]
    if neg.size == 0:
        return MiResult(0.0, np.zeros(d), grad_w, True)

    k = batch.k_desc
    own = batch.descriptions[x]  # (K, d)
    neg_desc = batch.descriptions[neg].reshape(-1, d)  # (|N|*K, d)
    all_desc = np.vstack([own, neg_desc])
    wt_zx = w_matrix.T @ zx
    scores = (all_desc @ wt_zx) / tau

    shift = float(np.max(scores))
    e = np.exp(scores - shift)
    s_all = float(np.sum(e))
    s_pos = float(np.sum(e[:k]))
    value = math.log(s_all) - math.log(s_pos)

    coeff = e / s_all
    coeff[:k] -= e[:k] / s_pos
    weighted = coeff @ all_desc  # sum_i coeff_i * d_i
    grad_zx = (w_matrix @ weighted) / tau
    grad_w = np.outer(zx, weighted) / tau
    return MiResult(float(value), grad_zx, grad_w, False)


def joint_loss(batch: Batch, hp: HyperParams, w_matrix: np.ndarray) -> JointResult:
    """Batch-mean of the beta-weighted sum of all four objectives.

    Linear in each beta; terms with beta == 0 are skipped entirely, so
    disabling a loss also disables its degenerate-input flags.
    """
    hp.validate()
    b = batch.size
    w_matrix = np.asarray(w_matrix, dtype=np.float64)
    total = 0.0
    grad_z = np.zeros_like(batch.z)
    grad_w = np.zeros_like(w_matrix)
    no_positive = 0
    no_pair = 0
    clamped = 0
    for x in range(b):
        if hp.beta_sc != 0.0:
            r = scl_loss(batch, x, hp.tau)
            total += hp.beta_sc * r.value
            grad_z += hp.beta_sc * r.grad_z
            no_positive += int(r.no_positive)
        if hp.beta_st != 0.0:
            r = hsmt_loss(batch, x)
            total += hp.beta_st * r.value
            grad_z += hp.beta_st * r.grad_z
            no_pair += int(r.no_pair)
            clamped += int(r.clamped)
        if hp.beta_hm != 0.0:
            r = hm_loss(batch, x, hp.margin)
            total += hp.beta_hm * r.value
            grad_z += hp.beta_hm * r.grad_z
        if hp.beta_mi != 0.0:
            r = mi_loss(batch, x, w_matrix, hp.tau)
            total += hp.beta_mi * r.value
            grad_z[x] += hp.beta_mi * r.grad_z_x
            grad_w += hp.beta_mi * r.grad_w
    scale = 1.0 / b
    return JointResult(
        value=total * scale,
        grad_z=grad_z * scale,
        grad_w=grad_w * scale,
        no_positive_count=no_positive,
        no_pair_count=no_pair,
        clamped_count=clamped,
    )
