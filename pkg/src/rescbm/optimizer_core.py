"""Multinomial linear classifier, elastic-net penalty, analytic gradients,
Adam, and a central-difference gradient checker.

All optimization state is float64.  Gradients with respect to the classifier
*inputs* are exposed so callers can chain them through the cosine bottleneck
into learnable concept vectors.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class LinearClassifier:
    """weights: classes x inputs, bias: one value per class."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-d and bias 1-d")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"{self.weights.shape[0]} weight rows vs {self.bias.shape[0]} bias entries"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("classifier parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.weights.copy(), self.bias.copy())

    @classmethod
    def zeros(cls, n_classes: int, n_inputs: int) -> "LinearClassifier":
        return cls(np.zeros((n_classes, n_inputs)), np.zeros(n_classes))


@dataclass(frozen=True)
class RegularizerSpec:
    """Elastic-net strength and mix; the bias is never penalized."""

    lam: float = 1e-4
    l1_ratio: float = 0.5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")


def forward(clf: LinearClassifier, inputs: np.ndarray) -> np.ndarray:
    """logits = inputs @ weights.T + bias"""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[1] != clf.n_inputs:
        raise ValueError(f"input width {inputs.shape[1]} != classifier width {clf.n_inputs}")
    return inputs @ clf.weights.T + clf.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over samples of -log softmax(logits)[label], max-shifted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label index outside the logit width")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(log_norm - picked))


def elastic_net(clf: LinearClassifier, spec: RegularizerSpec) -> float:
    """lam * (l1_ratio * ||W||_1 + (1 - l1_ratio) * 0.5 * ||W||_2^2), bias excluded."""
    w = clf.weights
    return spec.lam * (
        spec.l1_ratio * float(np.abs(w).sum())
        + (1.0 - spec.l1_ratio) * 0.5 * float((w * w).sum())
    )


def elastic_net_gradient(clf: LinearClassifier, spec: RegularizerSpec) -> np.ndarray:
    """Subgradient with sign(0) = 0 for the L1 part."""
    w = clf.weights
    return spec.lam * (spec.l1_ratio * np.sign(w) + (1.0 - spec.l1_ratio) * w)


def gradients(
    clf: LinearClassifier,
    inputs: np.ndarray,
    labels: np.ndarray,
    spec: RegularizerSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of cross_entropy + elastic_net.

    Returns (grad weights, grad bias, grad inputs).  With P = softmax(logits)
    and Y the one-hot labels, G = (P - Y) / batch, so

        dL/dW = G.T @ X + d(penalty)/dW
        dL/db = column sums of G
        dL/dX = G @ W

    The input gradient is what lets callers chain into learnable vectors
    behind the bottleneck.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = inputs.shape[0]
    probs = softmax(forward(clf, inputs))
    probs[np.arange(n), labels] -= 1.0
    g = probs / n
    grad_w = g.T @ inputs + elastic_net_gradient(clf, spec)
    grad_b = g.sum(axis=0)
    grad_x = g @ clf.weights
    return grad_w, grad_b, grad_x


def cosine_backward(u: np.ndarray, f: np.ndarray, upstream: float) -> np.ndarray:
    """Gradient of upstream * cos(u, f) with respect to u."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    nu = np.linalg.norm(u)
    nf = np.linalg.norm(f)
    if nu == 0.0 or nf == 0.0:
        raise ValueError("cosine gradient undefined for zero-norm vectors")
    cos = float(u @ f) / (nu * nf)
    return upstream * (f / (nu * nf) - cos * u / (nu * nu))


def cosine_backward_rows(
    vectors: np.ndarray, features: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Sum of cosine_backward over samples, vectorized over vector rows.

    vectors: V x d, features: n x d, upstream: n x V gradient of the loss with
    respect to the cosine matrix cos(features_i, vectors_j).
    """
    vnorm = np.linalg.norm(vectors, axis=1)
    fnorm = np.linalg.norm(features, axis=1)
    if np.any(vnorm == 0.0) or np.any(fnorm == 0.0):
        raise ValueError("cosine gradient undefined for zero-norm vectors")
    fhat = features / fnorm[:, None]
    vhat = vectors / vnorm[:, None]
    cos = fhat @ vhat.T
    lift = upstream.T @ fhat                      # V x d
    pull = (upstream * cos).sum(axis=0)           # V
    return (lift - pull[:, None] * vhat) / vnorm[:, None]


@dataclass
class AdamState:
    """Moment estimates keyed like the parameter dict they track."""

    first_moment: dict
    second_moment: dict
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.step_count < 0:
            raise ValueError("step_count must be nonnegative")

    @classmethod
    def for_params(cls, params: dict, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter values in place.

    Parameters are replaced (not mutated) in the returned dict so callers can
    hold on to old values; the state's moments are updated in place.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for key, value in params.items():
        g = grads[key]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape mismatch for {key!r}")
        m = state.first_moment[key]
        v = state.second_moment[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        out[key] = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def save_classifier(clf: LinearClassifier, path) -> None:
    """Write a classifier to the binary container: weight rows, then biases."""
    from . import data_io

    if clf.n_inputs < 1:
        raise ValueError("refusing to write a zero-width classifier")
    payload = np.concatenate([clf.weights.ravel(), clf.bias]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(data_io.CLASSIFIER_MAGIC)
        fh.write(data_io._HEADER.pack(data_io.FORMAT_VERSION, 0, clf.n_classes, clf.n_inputs))
        fh.write(payload.tobytes())


def load_classifier(path) -> LinearClassifier:
    from . import data_io

    with open(path, "rb") as fh:
        raw = fh.read()
    magic = data_io.CLASSIFIER_MAGIC
    if raw[: len(magic)] != magic:
        raise data_io.BadMagicError(f"expected magic {magic!r}")
    offset = len(magic)
    if len(raw) < offset + data_io._HEADER.size:
        raise data_io.TruncatedPayloadError("file too short for the fixed header")
    version, _flags, classes, inputs = data_io._HEADER.unpack_from(raw, offset)
    if version != data_io.FORMAT_VERSION:
        raise data_io.FormatError(f"unsupported container version {version}")
    body = raw[offset + data_io._HEADER.size :]
    expected = 4 * (classes * inputs + classes)
    if len(body) < expected:
        raise data_io.TruncatedPayloadError(
            f"payload has {len(body)} bytes, header requires {expected}"
        )
    if len(body) > expected:
        raise data_io.PayloadSizeError(
            f"payload has {len(body)} bytes, header requires exactly {expected}"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise data_io.NonFiniteDataError("payload contains non-finite entries")
    weights = values[: classes * inputs].reshape(classes, inputs)
    bias = values[classes * inputs :]
    return LinearClassifier(weights, bias)


def finite_difference_check(loss_fn, params: dict, h: float = 1e-6) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    loss_fn(params) must return (loss, grads) with grads keyed like params.
    The error per coordinate is |fd - analytic| / max(1, |analytic|); the
    maximum over all coordinates of all parameters is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, analytic = loss_fn(params)
    worst = 0.0
    for key, value in params.items():
        flat = value.ravel()
        grad_flat = analytic[key].ravel()
        for i in range(flat.size):
            bumped = dict(params)
            plus = value.copy()
            plus.ravel()[i] = flat[i] + h
            bumped[key] = plus
            loss_plus, _ = loss_fn(bumped)
            minus = value.copy()
            minus.ravel()[i] = flat[i] - h
            bumped[key] = minus
            loss_minus, _ = loss_fn(bumped)
            fd = (loss_plus - loss_minus) / (2.0 * h)
            err = abs(fd - grad_flat[i]) / max(1.0, abs(grad_flat[i]))
            worst = max(worst, err)
    return worst
