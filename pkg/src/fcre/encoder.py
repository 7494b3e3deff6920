"""Two-layer tanh encoder, bilinear score matrix, and Adam updates.

The encoder maps a raw feature vector x (dim f) to an embedding
z = tanh(W2 @ tanh(W1 @ x + b1) + b2) of dim d.  Gradients are
hand-derived and returned as a flat vector in the canonical packing
order [W1, b1, W2, b2]; the optimizer operates on flat vectors only,
so callers may concatenate extra trainable blocks (the bilinear matrix)
onto the same parameter vector.  Batching is deliberately left to the
trainer: ``encode`` handles one sample, which keeps the gradient
bookkeeping explicit and testable.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, replace

import numpy as np

from fcre.geometry import as_embedding


@dataclass
class EncoderParams:
    """Weights of the two-layer tanh MLP."""

    w1: np.ndarray  # (hidden_dim, feature_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (embed_dim, hidden_dim)
    b2: np.ndarray  # (embed_dim,)

    def __post_init__(self) -> None:
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("weight matrices must be 2-D")
        h, f = self.w1.shape
        d, h2 = self.w2.shape
        if h2 != h:
            raise ValueError(
                f"layer shapes disagree: W1 is {h}x{f} but W2 expects {h2} hidden units"
            )
        if self.b1.shape != (h,) or self.b2.shape != (d,):
            raise ValueError("bias shapes do not match weight shapes")
        for name, block in ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2):
            if not np.all(np.isfinite(block)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def to_vector(self) -> np.ndarray:
        """Flatten all parameters in the order [W1, b1, W2, b2]."""
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    def with_vector(self, vec: np.ndarray) -> "EncoderParams":
        """Rebuild parameters of this shape from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(
                f"expected a flat vector of {self.n_params} entries, got {vec.shape}"
            )
        f, h, d = self.feature_dim, self.hidden_dim, self.embed_dim
        i = 0
        w1 = vec[i : i + h * f].reshape(h, f)
        i += h * f
        b1 = vec[i : i + h]
        i += h
        w2 = vec[i : i + d * h].reshape(d, h)
        i += d * h
        b2 = vec[i : i + d]
        return EncoderParams(w1=w1.copy(), b1=b1.copy(), w2=w2.copy(), b2=b2.copy())


def init_encoder(
    feature_dim: int, hidden_dim: int, embed_dim: int, rng: np.random.Generator
) -> EncoderParams:
    """Uniform init scaled by 1/sqrt(fan_in) for each layer."""
    for name, value in (
        ("feature_dim", feature_dim),
        ("hidden_dim", hidden_dim),
        ("embed_dim", embed_dim),
    ):
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    s1 = 1.0 / np.sqrt(feature_dim)
    s2 = 1.0 / np.sqrt(hidden_dim)
    return EncoderParams(
        w1=rng.uniform(-s1, s1, size=(hidden_dim, feature_dim)),
        b1=rng.uniform(-s1, s1, size=hidden_dim),
        w2=rng.uniform(-s2, s2, size=(embed_dim, hidden_dim)),
        b2=rng.uniform(-s2, s2, size=embed_dim),
    )


def encode(params: EncoderParams, features) -> np.ndarray:
    """Embed one feature vector; output entries lie in (-1, 1)."""
    x = as_embedding(features, name="features")
    if x.size != params.feature_dim:
        raise ValueError(
            f"features have {x.size} entries, encoder expects {params.feature_dim}"
        )
    hidden = np.tanh(params.w1 @ x + params.b1)
    return np.tanh(params.w2 @ hidden + params.b2)


def encode_backward(params: EncoderParams, features, grad_out) -> np.ndarray:
    """Chain ``grad_out`` (dL/dz) back to a flat parameter gradient.

    Returns d(loss)/d(params) packed in the same [W1, b1, W2, b2] order
    as ``EncoderParams.to_vector``.
    """
    x = as_embedding(features, name="features")
    if x.size != params.feature_dim:
        raise ValueError(
            f"features have {x.size} entries, encoder expects {params.feature_dim}"
        )
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (params.embed_dim,):
        raise ValueError(
            f"grad_out must have shape ({params.embed_dim},), got {grad_out.shape}"
        )
    hidden = np.tanh(params.w1 @ x + params.b1)
    z = np.tanh(params.w2 @ hidden + params.b2)
    dz_pre = grad_out * (1.0 - z * z)
    dw2 = np.outer(dz_pre, hidden)
    db2 = dz_pre
    dhidden = params.w2.T @ dz_pre
    dh_pre = dhidden * (1.0 - hidden * hidden)
    dw1 = np.outer(dh_pre, x)
    db1 = dh_pre
    return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


@dataclass
class BilinearForm:
    """Trainable d x d matrix W for bilinear scores z^T W d."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"bilinear matrix must be square, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("bilinear matrix contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def init_bilinear(
    embed_dim: int, rng: np.random.Generator, noise_scale: float = 0.01
) -> BilinearForm:
    """Identity plus small Gaussian noise; keeps early scores near cosine."""
    if int(embed_dim) < 1:
        raise ValueError(f"embed_dim must be >= 1, got {embed_dim}")
    noise = rng.standard_normal((embed_dim, embed_dim))
    return BilinearForm(matrix=np.eye(embed_dim) + noise_scale * noise)


@dataclass
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    step_count: int
    m: np.ndarray
    v: np.ndarray


def init_adam(
    n_params: int,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if n_params < 1:
        raise ValueError(f"n_params must be >= 1, got {n_params}")
    if not learning_rate > 0.0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    return AdamState(
        learning_rate=float(learning_rate),
        beta1=float(beta1),
        beta2=float(beta2),
        eps=float(eps),
        step_count=0,
        m=np.zeros(n_params),
        v=np.zeros(n_params),
    )


def step(opt: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction; returns new params and state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != opt.m.shape or grads.shape != opt.m.shape:
        raise ValueError(
            f"params/grads must match optimizer size {opt.m.shape}, "
            f"got {params.shape} and {grads.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise ValueError("gradient contains non-finite entries")
    t = opt.step_count + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    new_params = params - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    new_state = replace(opt, step_count=t, m=m, v=v)
    return new_params, new_state


def floats_to_b64(arr: np.ndarray) -> str:
    """Base64 of the little-endian float64 bytes; exact round-trip."""
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def floats_from_b64(payload: str, n: int) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != n:
        raise ValueError(f"payload holds {arr.size} floats, expected {n}")
    return arr.astype(np.float64)


def params_to_json_dict(params: EncoderParams) -> dict:
    """JSON-safe snapshot: shape header plus base64 float64 payload."""
    return {
        "feature_dim": params.feature_dim,
        "hidden_dim": params.hidden_dim,
        "embed_dim": params.embed_dim,
        "data": floats_to_b64(params.to_vector()),
    }


def params_from_json_dict(obj: dict) -> EncoderParams:
    """Inverse of ``params_to_json_dict``; exact float64 round-trip."""
    f = int(obj["feature_dim"])
    h = int(obj["hidden_dim"])
    d = int(obj["embed_dim"])
    n = h * f + h + d * h + d
    vec = floats_from_b64(obj["data"], n)
    template = EncoderParams(
        w1=np.zeros((h, f)), b1=np.zeros(h), w2=np.zeros((d, h)), b2=np.zeros(d)
    )
    return template.with_vector(vec)
