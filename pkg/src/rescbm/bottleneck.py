"""Concept activations (dot or cosine) and per-concept standardization.

Fixed-bank concepts are standardized with dataset statistics frozen after
fitting.  Learnable vectors (the residual block and the discovered vector)
use batch statistics recomputed every step, because those vectors move and
frozen statistics would go stale; ``batch_standardize`` and its backward
pass live here for that purpose.
"""

from dataclasses import dataclass

import numpy as np

from .data_io import EmbeddingMatrix

DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class ActivationMatrix:
    """samples x concepts activation values plus provenance flags."""

    values: np.ndarray
    mode: str
    standardized: bool = False

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("activations must be a 2-d matrix")
        if self.mode not in ("dot", "cosine"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not np.all(np.isfinite(values)):
            raise ValueError("activations must be finite")
        if self.mode == "cosine" and not self.standardized:
            if values.size and (values.min() < -1.0 or values.max() > 1.0):
                raise ValueError("cosine activations must lie in [-1, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Standardizer:
    """Per-concept affine map to zero mean and unit standard deviation."""

    means: np.ndarray
    stds: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        stds = np.ascontiguousarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise ValueError("means and stds must be matching vectors")
        if np.any(stds < 0):
            raise ValueError("stds must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        means.flags.writeable = False
        stds.flags.writeable = False
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)


def concept_activations(
    features: EmbeddingMatrix, bank_rows: EmbeddingMatrix, mode: str = "cosine"
) -> ActivationMatrix:
    """Project features onto bank rows.

    Dot mode is features @ bank.T with unit-norm bank rows; cosine mode
    additionally divides each row by its feature norm.
    """
    if mode not in ("dot", "cosine"):
        raise ValueError(f"unknown mode {mode!r}")
    if features.dim != bank_rows.dim:
        raise ValueError(f"feature dim {features.dim} != bank dim {bank_rows.dim}")
    if not bank_rows.row_normalized:
        raise ValueError("bank rows must be unit-norm")
    values = features.data @ bank_rows.data.T
    if mode == "cosine":
        norms = np.linalg.norm(features.data, axis=1)
        if np.any(norms == 0.0):
            raise ValueError(
                f"zero-norm feature row {int(np.argmax(norms == 0.0))} in cosine mode"
            )
        values = np.clip(values / norms[:, None], -1.0, 1.0)
    return ActivationMatrix(values=values, mode=mode)


def cosine_values(features: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Raw cosine matrix between feature rows and (possibly unnormalized) vector rows."""
    fnorm = np.linalg.norm(features, axis=1)
    vnorm = np.linalg.norm(vectors, axis=1)
    if np.any(fnorm == 0.0) or np.any(vnorm == 0.0):
        raise ValueError("cosine of a zero-norm vector is undefined")
    return (features / fnorm[:, None]) @ (vectors / vnorm[:, None]).T


def fit_standardizer(acts: ActivationMatrix, epsilon: float = DEFAULT_EPSILON) -> Standardizer:
    """Per-column mean and population std; near-constant columns get std 1."""
    if acts.standardized:
        raise ValueError("activations are already standardized")
    if acts.n_samples < 2:
        raise ValueError("need at least 2 samples to fit a standardizer")
    means = acts.values.mean(axis=0)
    stds = acts.values.std(axis=0)
    stds = np.where(stds < epsilon, 1.0, stds)
    return Standardizer(means=means, stds=stds, epsilon=epsilon)


def apply_standardizer(acts: ActivationMatrix, s: Standardizer) -> ActivationMatrix:
    if acts.n_concepts != len(s.means):
        raise ValueError(f"{acts.n_concepts} columns vs standardizer for {len(s.means)}")
    values = (acts.values - s.means) / s.stds
    return ActivationMatrix(values=values, mode=acts.mode, standardized=True)


def invert_standardizer(acts: ActivationMatrix, s: Standardizer) -> ActivationMatrix:
    """Undo apply_standardizer; reconstructs the inputs."""
    if acts.n_concepts != len(s.means):
        raise ValueError(f"{acts.n_concepts} columns vs standardizer for {len(s.means)}")
    if not acts.standardized:
        raise ValueError("activations are not standardized")
    values = acts.values * s.stds + s.means
    if acts.mode == "cosine":
        values = np.clip(values, -1.0, 1.0)
    return ActivationMatrix(values=values, mode=acts.mode, standardized=False)


def batch_standardize(values: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Standardize columns with this batch's own statistics (n = 1 is legal)."""
    values = np.asarray(values, dtype=np.float64)
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    sd = np.where(sd < epsilon, 1.0, sd)
    return (values - mu) / sd


def batch_standardize_backward(
    values: np.ndarray, upstream: np.ndarray, epsilon: float = DEFAULT_EPSILON
) -> np.ndarray:
    """Gradient of a loss through batch_standardize, column by column.

    The batch mean and std are functions of the inputs, so for column x with
    population std sigma and standardized values xhat:

        dL/dx = (g - mean(g) - xhat * mean(g * xhat)) / sigma

    where g is the upstream gradient.  Columns caught by the constant-column
    rule (std < epsilon, replaced by 1) only backpropagate the mean shift.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    constant = sd < epsilon
    sd = np.where(constant, 1.0, sd)
    xhat = (values - mu) / sd
    g_mean = upstream.mean(axis=0)
    gx_mean = (upstream * xhat).mean(axis=0)
    grad = (upstream - g_mean - xhat * gx_mean) / sd
    if np.any(constant):
        grad[:, constant] = (upstream - g_mean)[:, constant]
    return grad
