"""Residual concept-bottleneck training.

The trainer alternates two updates per batch: the first trains the base
concept classifier on the fixed-bank activations alone; the second freezes
it and trains the residual head together with the learnable residual
vectors on the combined prediction.  With no residual vectors the second
update vanishes and the run is exactly plain post-hoc bottleneck training
(same seed, same schedule, bit-identical parameters).

Also houses the hybrid baseline (linear residual head on raw features),
the zero-shot baseline, checkpoint files, and the stratified split shared
with the evaluation harness.
"""

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data_io
from .bottleneck import (
    DEFAULT_EPSILON,
    ActivationMatrix,
    Standardizer,
    apply_standardizer,
    batch_standardize,
    batch_standardize_backward,
    concept_activations,
    cosine_values,
    fit_standardizer,
)
from .concept_bank import ConceptBank
from .data_io import EmbeddingMatrix
from .optimizer_core import (
    AdamState,
    LinearClassifier,
    RegularizerSpec,
    adam_step,
    cosine_backward_rows,
    cross_entropy,
    elastic_net,
    elastic_net_gradient,
    forward,
    softmax,
)

_STREAM_RESIDUAL_INIT = 21
_STREAM_BATCH_ORDER = 22
_STREAM_SPLIT = 23


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for both training passes and the discovery loop."""

    lam: float = 1e-4
    l1_ratio: float = 0.5
    n_residual: int = 10
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    epsilon: float = DEFAULT_EPSILON
    val_fraction: float = 0.2
    patience: int = 0  # 0 disables early stopping
    alpha: float = 0.1
    top_m: int = 5
    noise_scale: float = 0.01
    discovery_epochs: int = 100
    discovery_learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_residual < 0:
            raise ValueError("n_residual must be nonnegative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly inside (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.alpha < 0 or self.top_m < 1:
            raise ValueError("alpha must be nonnegative, top_m positive")

    @property
    def regularizer(self) -> RegularizerSpec:
        return RegularizerSpec(lam=self.lam, l1_ratio=self.l1_ratio)


@dataclass
class TrainTrace:
    pass1_losses: list = field(default_factory=list)
    pass2_losses: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    seed: int = 0
    wall_clock: float = 0.0


@dataclass
class ResidualModel:
    """Base bank classifier plus a learnable residual block."""

    base_bank: ConceptBank
    psi_c: LinearClassifier
    residual_vectors: np.ndarray  # n_residual x dim; zero rows when exhausted
    psi_r: LinearClassifier
    base_standardizer: Standardizer | None
    config: TrainingConfig

    def __post_init__(self):
        self.residual_vectors = np.ascontiguousarray(
            self.residual_vectors, dtype=np.float64
        )
        if self.residual_vectors.ndim != 2:
            raise ValueError("residual_vectors must be 2-d (possibly with 0 rows)")
        if self.psi_c.n_inputs != len(self.base_bank):
            raise ValueError("psi_c width must equal the bank size")
        if self.psi_r.n_inputs != self.residual_vectors.shape[0]:
            raise ValueError("psi_r width must equal the residual vector count")
        if self.psi_c.n_classes != self.psi_r.n_classes:
            raise ValueError("class counts must agree")

    @property
    def n_residual(self) -> int:
        return self.residual_vectors.shape[0]

    @property
    def n_classes(self) -> int:
        return self.psi_c.n_classes


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int):
    """Deterministic per-class split; returns sorted (train_idx, val_idx)."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, _STREAM_SPLIT])
    train, val = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        perm = members[rng.permutation(len(members))]
        n_val = max(1, int(round(len(members) * val_fraction)))
        val.extend(perm[:n_val])
        train.extend(perm[n_val:])
    if not train:
        raise ValueError("split left no training samples")
    return np.sort(np.array(train)), np.sort(np.array(val))


def _accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(predicted == truth))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def base_objective(params: dict, acts_std: np.ndarray, labels: np.ndarray, reg: RegularizerSpec):
    """Cross-entropy of the base classifier on fixed activations, plus its penalty."""
    clf = LinearClassifier(params["w"], params["b"])
    logits = forward(clf, acts_std)
    loss = cross_entropy(logits, labels) + elastic_net(clf, reg)
    n = len(labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    return loss, {
        "w": g.T @ acts_std + elastic_net_gradient(clf, reg),
        "b": g.sum(axis=0),
    }


def residual_objective(
    params: dict,
    offset_logits: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    reg: RegularizerSpec,
    epsilon: float = DEFAULT_EPSILON,
):
    """Combined-prediction loss over the residual head and vectors.

    offset_logits is the frozen base part of the prediction.  The residual
    activations are batch-standardized cosines, so the gradient chains
    through the batch statistics and the cosine bottleneck into the vectors.
    Only the head's weights are penalized.
    """
    u = params["u"]
    clf = LinearClassifier(params["w"], params["b"])
    cos = cosine_values(features, u)
    r_std = batch_standardize(cos, epsilon)
    logits = offset_logits + forward(clf, r_std)
    loss = cross_entropy(logits, labels) + elastic_net(clf, reg)
    n = len(labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    g_rstd = g @ clf.weights
    g_cos = batch_standardize_backward(cos, g_rstd, epsilon)
    return loss, {
        "w": g.T @ r_std + elastic_net_gradient(clf, reg),
        "b": g.sum(axis=0),
        "u": cosine_backward_rows(u, features, g_cos),
    }


def offset_linear_objective(
    params: dict,
    offset_logits: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    reg: RegularizerSpec,
):
    """Linear head on given inputs added to frozen offset logits (hybrid baseline)."""
    clf = LinearClassifier(params["w"], params["b"])
    logits = offset_logits + forward(clf, inputs)
    loss = cross_entropy(logits, labels) + elastic_net(clf, reg)
    n = len(labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    return loss, {
        "w": g.T @ inputs + elastic_net_gradient(clf, reg),
        "b": g.sum(axis=0),
    }


def init_residual_model(
    bank: ConceptBank, n_classes: int, config: TrainingConfig
) -> ResidualModel:
    """Fresh model: zero classifiers, unit-norm random residual vectors."""
    d = config.n_residual
    if d > 0:
        rng = np.random.default_rng([config.seed, _STREAM_RESIDUAL_INIT])
        u = rng.standard_normal((d, bank.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    else:
        u = np.zeros((0, bank.dim))
    return ResidualModel(
        base_bank=bank,
        psi_c=LinearClassifier.zeros(n_classes, len(bank)),
        residual_vectors=u,
        psi_r=LinearClassifier.zeros(n_classes, d),
        base_standardizer=None,
        config=config,
    )


def _residual_val_logits(params_r, u, features_val, offset_val, epsilon):
    cos = cosine_values(features_val, u)
    r_std = batch_standardize(cos, epsilon)
    return offset_val + r_std @ params_r["w"].T + params_r["b"]


def _run_two_pass_training(model: ResidualModel, features, labels, train_idx, val_idx):
    """The shared loop behind train_pcbm and train_residual."""
    cfg = model.config
    reg = cfg.regularizer
    y = np.asarray(labels, dtype=np.int64)
    feats = features.data

    acts = concept_activations(features, model.base_bank.embeddings, "cosine")
    std = fit_standardizer(
        ActivationMatrix(acts.values[train_idx], mode="cosine"), cfg.epsilon
    )
    acts_std = apply_standardizer(acts, std).values

    params_c = {"w": model.psi_c.weights.copy(), "b": model.psi_c.bias.copy()}
    adam_c = AdamState.for_params(params_c, cfg.learning_rate)
    d = model.n_residual
    if d > 0:
        params_r = {
            "w": model.psi_r.weights.copy(),
            "b": model.psi_r.bias.copy(),
            "u": model.residual_vectors.copy(),
        }
        adam_r = AdamState.for_params(params_r, cfg.learning_rate)
    else:
        params_r = None

    batch_rng = np.random.default_rng([cfg.seed, _STREAM_BATCH_ORDER])
    trace = TrainTrace(seed=cfg.seed)
    start = time.perf_counter()
    best_acc, since_best = -1.0, 0

    for _ in range(cfg.epochs):
        p1_losses, p2_losses = [], []
        for batch in _batches(len(train_idx), cfg.batch_size, batch_rng):
            idx = train_idx[batch]
            loss1, grads1 = base_objective(params_c, acts_std[idx], y[idx], reg)
            params_c = adam_step(adam_c, params_c, grads1)
            p1_losses.append(loss1)
            if d > 0:
                offset = acts_std[idx] @ params_c["w"].T + params_c["b"]
                loss2, grads2 = residual_objective(
                    params_r, offset, feats[idx], y[idx], reg, cfg.epsilon
                )
                params_r = adam_step(adam_r, params_r, grads2)
                p2_losses.append(loss2)
        trace.pass1_losses.append(float(np.mean(p1_losses)))
        trace.pass2_losses.append(float(np.mean(p2_losses)) if p2_losses else float("nan"))

        offset_val = acts_std[val_idx] @ params_c["w"].T + params_c["b"]
        if d > 0:
            logits_val = _residual_val_logits(
                params_r, params_r["u"], feats[val_idx], offset_val, cfg.epsilon
            )
        else:
            logits_val = offset_val
        acc = _accuracy(np.argmax(logits_val, axis=1), y[val_idx])
        trace.val_accuracy.append(acc)
        if cfg.patience > 0:
            if acc > best_acc:
                best_acc, since_best = acc, 0
            else:
                since_best += 1
                if since_best > cfg.patience:
                    break

    trace.wall_clock = time.perf_counter() - start
    psi_c = LinearClassifier(params_c["w"], params_c["b"])
    if d > 0:
        psi_r = LinearClassifier(params_r["w"], params_r["b"])
        u = params_r["u"]
    else:
        psi_r = LinearClassifier.zeros(model.n_classes, 0)
        u = np.zeros((0, model.base_bank.dim))
    trained = ResidualModel(
        base_bank=model.base_bank,
        psi_c=psi_c,
        residual_vectors=u,
        psi_r=psi_r,
        base_standardizer=std,
        config=cfg,
    )
    return trained, trace


def _resolve_split(labels, config, train_idx, val_idx):
    if (train_idx is None) != (val_idx is None):
        raise ValueError("pass both train_idx and val_idx or neither")
    if train_idx is None:
        return stratified_split(labels, config.val_fraction, config.seed)
    return np.asarray(train_idx, dtype=np.int64), np.asarray(val_idx, dtype=np.int64)


def train_pcbm(
    features: EmbeddingMatrix,
    labels: np.ndarray,
    bank: ConceptBank,
    config: TrainingConfig,
    train_idx=None,
    val_idx=None,
):
    """Train the base concept classifier alone on standardized cosine activations.

    Returns (psi_c, standardizer, trace).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if features.rows != len(labels):
        raise ValueError("features and labels are misaligned")
    if len(bank) == 0:
        raise ValueError("bank is empty")
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two classes to train")
    train_idx, val_idx = _resolve_split(labels, config, train_idx, val_idx)
    fresh = init_residual_model(bank, int(labels.max()) + 1, replace(config, n_residual=0))
    trained, trace = _run_two_pass_training(fresh, features, labels, train_idx, val_idx)
    return trained.psi_c, trained.base_standardizer, trace


def train_residual(
    model: ResidualModel,
    features: EmbeddingMatrix,
    labels: np.ndarray,
    train_idx=None,
    val_idx=None,
):
    """Two updates per batch: base classifier first, then the frozen-base
    combined update of the residual head and vectors.  Returns (model, trace)."""
    labels = np.asarray(labels, dtype=np.int64)
    if features.rows != len(labels):
        raise ValueError("features and labels are misaligned")
    train_idx, val_idx = _resolve_split(labels, model.config, train_idx, val_idx)
    return _run_two_pass_training(model, features, labels, train_idx, val_idx)


def predict(
    model: ResidualModel, features: EmbeddingMatrix, include_residual: bool = True
):
    """Returns (logits, predicted labels); ties go to the lower class index."""
    if model.base_standardizer is None:
        raise ValueError("model has no fitted standardizer; train it first")
    if features.dim != model.base_bank.dim:
        raise ValueError("feature dim does not match the bank")
    acts = concept_activations(features, model.base_bank.embeddings, "cosine")
    acts_std = apply_standardizer(acts, model.base_standardizer).values
    logits = forward(model.psi_c, acts_std)
    if include_residual and model.n_residual > 0:
        cos = cosine_values(features.data, model.residual_vectors)
        r_std = batch_standardize(cos, model.config.epsilon)
        logits = logits + forward(model.psi_r, r_std)
    return logits, np.argmax(logits, axis=1)


def train_pcbm_h(
    features: EmbeddingMatrix,
    labels: np.ndarray,
    model: ResidualModel,
    config: TrainingConfig,
    train_idx=None,
    val_idx=None,
):
    """Hybrid baseline: linear head on raw features added to the frozen base
    prediction.  Returns (head, trace); the model's psi_c is untouched."""
    labels = np.asarray(labels, dtype=np.int64)
    if model.base_standardizer is None:
        raise ValueError("train the base classifier first")
    train_idx, val_idx = _resolve_split(labels, config, train_idx, val_idx)
    reg = config.regularizer
    feats = features.data
    acts = concept_activations(features, model.base_bank.embeddings, "cosine")
    acts_std = apply_standardizer(acts, model.base_standardizer).values
    offset_all = forward(model.psi_c, acts_std)
    psi_c_before = (model.psi_c.weights.copy(), model.psi_c.bias.copy())

    params = {
        "w": np.zeros((model.n_classes, features.dim)),
        "b": np.zeros(model.n_classes),
    }
    adam = AdamState.for_params(params, config.learning_rate)
    batch_rng = np.random.default_rng([config.seed, _STREAM_BATCH_ORDER])
    trace = TrainTrace(seed=config.seed)
    start = time.perf_counter()
    for _ in range(config.epochs):
        losses = []
        for batch in _batches(len(train_idx), config.batch_size, batch_rng):
            idx = train_idx[batch]
            loss, grads = offset_linear_objective(
                params, offset_all[idx], feats[idx], labels[idx], reg
            )
            params = adam_step(adam, params, grads)
            losses.append(loss)
        trace.pass1_losses.append(float(np.mean(losses)))
        trace.pass2_losses.append(float("nan"))
        logits_val = offset_all[val_idx] + feats[val_idx] @ params["w"].T + params["b"]
        trace.val_accuracy.append(_accuracy(np.argmax(logits_val, axis=1), labels[val_idx]))
    trace.wall_clock = time.perf_counter() - start

    assert np.array_equal(model.psi_c.weights, psi_c_before[0])
    assert np.array_equal(model.psi_c.bias, psi_c_before[1])
    return LinearClassifier(params["w"], params["b"]), trace


def zero_shot(features: EmbeddingMatrix, class_name_embeddings: EmbeddingMatrix) -> np.ndarray:
    """Argmax cosine between each feature and the class-name embeddings."""
    if features.dim != class_name_embeddings.dim:
        raise ValueError("dimension mismatch")
    cos = cosine_values(features.data, class_name_embeddings.data)
    return np.argmax(cos, axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: a manifest naming one container file per piece.
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "checkpoint.txt"


def save_checkpoint(model: ResidualModel, directory) -> Path:
    """Write bank, classifiers, vectors, and standardizer under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if model.base_standardizer is None:
        raise ValueError("refusing to checkpoint an untrained model")

    from .optimizer_core import save_classifier

    data_io.save_token_list(model.base_bank.tokens, directory / "bank_tokens.txt")
    data_io.save_embedding_matrix(
        model.base_bank.embeddings, directory / "bank_embeddings.emb"
    )
    save_classifier(model.psi_c, directory / "psi_c.clf")
    if model.n_residual > 0:
        save_classifier(model.psi_r, directory / "psi_r.clf")
        data_io.save_embedding_matrix(
            EmbeddingMatrix(model.residual_vectors), directory / "residual_vectors.emb"
        )
    s = model.base_standardizer
    data_io.save_embedding_matrix(
        EmbeddingMatrix(np.vstack([s.means, s.stds])), directory / "standardizer.emb"
    )

    cfg = model.config
    lines = [
        "bank_tokens = bank_tokens.txt",
        "bank_embeddings = bank_embeddings.emb",
        "psi_c = psi_c.clf",
        "standardizer = standardizer.emb",
    ]
    if model.n_residual > 0:
        lines += ["psi_r = psi_r.clf", "residual_vectors = residual_vectors.emb"]
    for key in (
        "lam",
        "l1_ratio",
        "n_residual",
        "batch_size",
        "epochs",
        "learning_rate",
        "epsilon",
        "val_fraction",
        "patience",
        "alpha",
        "top_m",
        "noise_scale",
        "discovery_epochs",
        "discovery_learning_rate",
        "seed",
    ):
        lines.append(f"config.{key} = {getattr(cfg, key)!r}")
    manifest = directory / _MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_checkpoint(path) -> ResidualModel:
    """Rebuild a model from a checkpoint manifest (or its directory)."""
    from .concept_bank import build_bank
    from .optimizer_core import load_classifier

    path = Path(path)
    manifest = path / _MANIFEST_NAME if path.is_dir() else path
    entries = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{manifest}:{lineno}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()

    base = manifest.parent
    for required in ("bank_tokens", "bank_embeddings", "psi_c", "standardizer"):
        if required not in entries:
            raise ValueError(f"{manifest}: missing {required!r}")
    tokens = data_io.load_token_list(base / entries["bank_tokens"])
    bank = build_bank(tokens, data_io.load_embedding_matrix(base / entries["bank_embeddings"]))
    psi_c = load_classifier(base / entries["psi_c"])
    std_rows = data_io.load_embedding_matrix(base / entries["standardizer"]).data

    kwargs = {}
    for key, value in entries.items():
        if key.startswith("config."):
            name = key[len("config.") :]
            raw = value
            if name in (
                "n_residual",
                "batch_size",
                "epochs",
                "patience",
                "top_m",
                "seed",
                "discovery_epochs",
            ):
                kwargs[name] = int(raw)
            else:
                kwargs[name] = float(raw)
    config = TrainingConfig(**kwargs)
    std = Standardizer(std_rows[0], std_rows[1], epsilon=config.epsilon)

    if "residual_vectors" in entries:
        u = data_io.load_embedding_matrix(base / entries["residual_vectors"]).data
        psi_r = load_classifier(base / entries["psi_r"])
    else:
        u = np.zeros((0, bank.dim))
        psi_r = LinearClassifier.zeros(psi_c.n_classes, 0)
    return ResidualModel(
        base_bank=bank,
        psi_c=psi_c,
        residual_vectors=u,
        psi_r=psi_r,
        base_standardizer=std,
        config=config,
    )
