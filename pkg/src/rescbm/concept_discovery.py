"""Incremental concept discovery.

Each round converts one learnable residual vector into a real candidate
concept: a fresh discovered vector starts at the bank mean plus noise, gets
a one-input classifier whose weights come from class-name cosines, and is
optimized against cross-entropy plus a similarity pull toward the candidate
bank.  The per-batch schedule mirrors residual training: the first update
moves the base classifier, the discovered classifier, and the discovered
vector; the second freezes all three and moves the shrunken residual block.
After the round's budget the vector snaps to its nearest candidate, whose
true embedding (not the optimized vector) joins the bank.
"""

from dataclasses import dataclass

import numpy as np

from .bottleneck import (
    DEFAULT_EPSILON,
    batch_standardize,
    batch_standardize_backward,
    cosine_values,
)
from .concept_bank import ConceptBank, append_concept, nearest_candidates
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
    softmax,
)
from .residual_trainer import (
    ResidualModel,
    TrainingConfig,
    _accuracy,
    _batches,
    _resolve_split,
    predict,
    residual_objective,
)
from .bottleneck import Standardizer, apply_standardizer, concept_activations

_STREAM_VECTOR_INIT = 31
_STREAM_DISCOVERY_BATCH = 32


@dataclass
class DiscoveryState:
    """Working set for one discovery round."""

    v_d: np.ndarray
    psi_d: LinearClassifier
    shrunk_residual: np.ndarray
    psi_r_shrunk: LinearClassifier
    candidate_pool: ConceptBank
    alpha: float
    top_m: int
    round_index: int = 0

    def __post_init__(self):
        self.v_d = np.ascontiguousarray(self.v_d, dtype=np.float64)
        if self.psi_r_shrunk.n_inputs != self.shrunk_residual.shape[0]:
            raise ValueError("shrunk classifier width must match the shrunk block")
        if len(self.candidate_pool) == 0:
            raise ValueError("candidate pool is empty")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 1 <= self.top_m <= len(self.candidate_pool):
            raise ValueError("top_m outside [1, pool size]")


@dataclass(frozen=True)
class SnapRecord:
    round_index: int
    token: str
    cosine: float
    accuracy_before: float
    accuracy_after: float

    def __post_init__(self):
        if not -1.0 <= self.cosine <= 1.0:
            raise ValueError("cosine outside [-1, 1]")


SNAP_HISTORY_HEADER = "round_index,token,cosine,accuracy_before,accuracy_after"


def save_snap_history(history, path) -> None:
    """One record per round: round, token, cosine, accuracy before and after."""
    lines = [SNAP_HISTORY_HEADER]
    for rec in history:
        if "," in rec.token or "\n" in rec.token:
            raise ValueError(f"snap token {rec.token!r} cannot be serialized")
        lines.append(
            f"{rec.round_index},{rec.token},{rec.cosine!r},"
            f"{rec.accuracy_before!r},{rec.accuracy_after!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snap_history(path) -> list:
    with open(path, encoding="utf-8") as fh:
        rows = [r.strip() for r in fh if r.strip()]
    if not rows or rows[0] != SNAP_HISTORY_HEADER:
        raise ValueError(f"{path}: unexpected snap history header")
    out = []
    for row in rows[1:]:
        ri, token, cosv, before, after = row.split(",")
        out.append(SnapRecord(int(ri), token, float(cosv), float(before), float(after)))
    return out


def init_discovered_vector(base_bank: ConceptBank, noise_scale: float, seed) -> np.ndarray:
    """Bank-mean embedding plus isotropic noise of the given scale."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    mean = base_bank.embeddings.data.mean(axis=0)
    rng = np.random.default_rng(seed)
    return mean + noise_scale * rng.standard_normal(base_bank.dim)


def init_discovered_classifier(
    v_d: np.ndarray, class_name_embeddings: EmbeddingMatrix
) -> LinearClassifier:
    """One-input classifier with language-prior weights: cos(v_d, class k)."""
    v_d = np.asarray(v_d, dtype=np.float64)
    if v_d.shape[0] != class_name_embeddings.dim:
        raise ValueError("dimension mismatch")
    weights = cosine_values(class_name_embeddings.data, v_d[None, :])
    return LinearClassifier(weights, np.zeros(class_name_embeddings.rows))


def concept_similarity_loss(v_d: np.ndarray, candidate_pool: ConceptBank, top_m: int) -> float:
    """One minus the mean of the top-m cosines to the pool; lies in [0, 2]."""
    matches = nearest_candidates(v_d, candidate_pool, top_m)
    return 1.0 - float(np.mean(matches.similarities))


def snap_to_candidate(v_d: np.ndarray, candidate_pool: ConceptBank, exclude=()):
    """The pool entry most similar to the vector (ties to the lower index).

    Entries whose token is in ``exclude`` are skipped, so a vector never
    re-discovers something the bank already names.  Returns
    (token, embedding row, cosine); the row is the candidate's true
    embedding, which is what may enter a bank.
    """
    ranked = nearest_candidates(v_d, candidate_pool, len(candidate_pool))
    exclude = set(exclude)
    for idx, sim in zip(ranked.indices, ranked.similarities):
        token = candidate_pool.tokens[idx]
        if token in exclude:
            continue
        return token, candidate_pool.embeddings.data[idx].copy(), sim
    raise ValueError("every pool candidate is excluded")


def discovery_pass1_objective(
    params: dict,
    acts_std: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    frozen_top_rows: np.ndarray,
    alpha: float,
    reg: RegularizerSpec,
    epsilon: float = DEFAULT_EPSILON,
):
    """Loss and gradients for the first discovery update.

    Optimizes the base classifier (wc, bc), the discovered classifier
    (wd, bd), and the discovered vector (v).  The similarity pull uses a
    top-m row set frozen by the caller, which is the subgradient choice
    that makes these gradients exact for a fixed ranking.
    """
    v = params["v"]
    clf_c = LinearClassifier(params["wc"], params["bc"])
    clf_d = LinearClassifier(params["wd"], params["bd"])
    cos_d = cosine_values(features, v[None, :])
    cd_std = batch_standardize(cos_d, epsilon)
    logits = acts_std @ clf_c.weights.T + clf_c.bias + cd_std @ clf_d.weights.T + clf_d.bias

    m = frozen_top_rows.shape[0]
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        raise ValueError("discovered vector is all-zero")
    sims = frozen_top_rows @ (v / vnorm)
    l_sim = 1.0 - float(np.mean(sims))
    loss = (
        cross_entropy(logits, labels)
        + alpha * l_sim
        + elastic_net(clf_c, reg)
        + elastic_net(clf_d, reg)
    )

    n = len(labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    g_cd = g @ clf_d.weights
    g_cos = batch_standardize_backward(cos_d, g_cd, epsilon)
    grad_v = cosine_backward_rows(v[None, :], features, g_cos)[0]
    sim_upstream = np.full((m, 1), -alpha / m)
    grad_v += cosine_backward_rows(v[None, :], frozen_top_rows, sim_upstream)[0]
    return loss, {
        "wc": g.T @ acts_std + elastic_net_gradient(clf_c, reg),
        "bc": g.sum(axis=0),
        "wd": g.T @ cd_std + elastic_net_gradient(clf_d, reg),
        "bd": g.sum(axis=0),
        "v": grad_v,
    }


def _subset_bank(bank: ConceptBank, keep_tokens) -> ConceptBank:
    keep = [i for i, t in enumerate(bank.tokens) if t in keep_tokens]
    tokens = tuple(bank.tokens[i] for i in keep)
    from .concept_bank import letter_count

    data = bank.embeddings.data[keep]
    avg = float(np.mean([letter_count(t) for t in tokens]))
    return ConceptBank(tokens, EmbeddingMatrix(data, row_normalized=True), avg)


def init_discovery_state(
    model: ResidualModel,
    candidate_pool: ConceptBank,
    class_name_embeddings: EmbeddingMatrix,
    round_index: int = 0,
) -> DiscoveryState:
    """Remove the most influential residual vector and set up the round.

    The vector whose residual-head column has the largest L2 norm goes
    first: the block's strongest contributor is the one most worth naming.
    """
    if model.n_residual < 1:
        raise ValueError("model has no residual vectors left to convert")
    cfg = model.config
    col_norms = np.linalg.norm(model.psi_r.weights, axis=0)
    removed = int(np.argmax(col_norms))
    shrunk_u = np.delete(model.residual_vectors, removed, axis=0)
    shrunk_w = np.delete(model.psi_r.weights, removed, axis=1)
    v_d = init_discovered_vector(
        model.base_bank, cfg.noise_scale, [cfg.seed, _STREAM_VECTOR_INIT, round_index]
    )
    psi_d = init_discovered_classifier(v_d, class_name_embeddings)
    return DiscoveryState(
        v_d=v_d,
        psi_d=psi_d,
        shrunk_residual=shrunk_u,
        psi_r_shrunk=LinearClassifier(shrunk_w, model.psi_r.bias.copy()),
        candidate_pool=candidate_pool,
        alpha=cfg.alpha,
        top_m=min(cfg.top_m, len(candidate_pool)),
        round_index=round_index,
    )


def discovery_round(
    model: ResidualModel,
    state: DiscoveryState,
    features: EmbeddingMatrix,
    labels: np.ndarray,
    train_idx=None,
    val_idx=None,
):
    """Run one optimize-and-snap round; returns (updated model, SnapRecord)."""
    cfg = model.config
    reg = cfg.regularizer
    y = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx = _resolve_split(y, cfg, train_idx, val_idx)
    feats = features.data
    if model.base_standardizer is None:
        raise ValueError("model must be trained before discovery")

    val_features = EmbeddingMatrix(feats[val_idx])
    _, before_pred = predict(model, val_features, include_residual=True)
    accuracy_before = _accuracy(before_pred, y[val_idx])

    acts = concept_activations(features, model.base_bank.embeddings, "cosine")
    acts_std = apply_standardizer(acts, model.base_standardizer).values

    # the discovered vector and its classifier learn at the (faster)
    # discovery rate so fresh errors flow to them first; the base classifier
    # keeps its ordinary rate and only fine-tunes around them
    params1 = {
        "wc": model.psi_c.weights.copy(),
        "bc": model.psi_c.bias.copy(),
        "wd": state.psi_d.weights.copy(),
        "bd": state.psi_d.bias.copy(),
        "v": state.v_d.copy(),
    }
    slow_keys = ("wc", "bc")
    adam1_slow = AdamState.for_params(
        {k: params1[k] for k in slow_keys}, cfg.learning_rate
    )
    adam1_fast = AdamState.for_params(
        {k: v for k, v in params1.items() if k not in slow_keys},
        cfg.discovery_learning_rate,
    )
    d_rest = state.shrunk_residual.shape[0]
    if d_rest > 0:
        params2 = {
            "w": state.psi_r_shrunk.weights.copy(),
            "b": state.psi_r_shrunk.bias.copy(),
            "u": state.shrunk_residual.copy(),
        }
        adam2 = AdamState.for_params(params2, cfg.learning_rate)
    else:
        params2 = None

    pool_rows = state.candidate_pool.embeddings.data
    batch_rng = np.random.default_rng(
        [cfg.seed, _STREAM_DISCOVERY_BATCH, state.round_index]
    )
    for _ in range(cfg.discovery_epochs):
        for batch in _batches(len(train_idx), cfg.batch_size, batch_rng):
            idx = train_idx[batch]
            # ranking refreshed per step, then held fixed inside the step
            top = nearest_candidates(params1["v"], state.candidate_pool, state.top_m)
            frozen_rows = pool_rows[list(top.indices)]
            _, grads1 = discovery_pass1_objective(
                params1, acts_std[idx], feats[idx], y[idx],
                frozen_rows, state.alpha, reg, cfg.epsilon,
            )
            slow = adam_step(
                adam1_slow,
                {k: params1[k] for k in slow_keys},
                {k: grads1[k] for k in slow_keys},
            )
            fast = adam_step(
                adam1_fast,
                {k: v for k, v in params1.items() if k not in slow_keys},
                {k: v for k, v in grads1.items() if k not in slow_keys},
            )
            params1 = {**slow, **fast}
            if d_rest > 0:
                cos_d = cosine_values(feats[idx], params1["v"][None, :])
                cd_std = batch_standardize(cos_d, cfg.epsilon)
                offset = (
                    acts_std[idx] @ params1["wc"].T + params1["bc"]
                    + cd_std @ params1["wd"].T + params1["bd"]
                )
                _, grads2 = residual_objective(
                    params2, offset, feats[idx], y[idx], reg, cfg.epsilon
                )
                params2 = adam_step(adam2, params2, grads2)

    token, row, cos_snap = snap_to_candidate(
        params1["v"], state.candidate_pool, exclude=model.base_bank.tokens
    )
    new_bank = append_concept(model.base_bank, token, row)

    # standardizer gains exactly one column, fit on the training activations
    # of the snapped concept; existing columns stay frozen
    new_col = cosine_values(feats[train_idx], row[None, :])[:, 0]
    mu = float(new_col.mean())
    sd = float(new_col.std())
    if sd < cfg.epsilon:
        sd = 1.0
    old_std = model.base_standardizer
    new_std = Standardizer(
        np.append(old_std.means, mu), np.append(old_std.stds, sd), old_std.epsilon
    )

    new_wc = np.hstack([params1["wc"], params1["wd"]])
    new_bc = params1["bc"] + params1["bd"]
    if d_rest > 0:
        psi_r = LinearClassifier(params2["w"], params2["b"])
        u = params2["u"]
    else:
        psi_r = LinearClassifier.zeros(model.n_classes, 0)
        u = np.zeros((0, model.base_bank.dim))
    updated = ResidualModel(
        base_bank=new_bank,
        psi_c=LinearClassifier(new_wc, new_bc),
        residual_vectors=u,
        psi_r=psi_r,
        base_standardizer=new_std,
        config=cfg,
    )
    _, after_pred = predict(updated, val_features, include_residual=True)
    record = SnapRecord(
        round_index=state.round_index,
        token=token,
        cosine=cos_snap,
        accuracy_before=accuracy_before,
        accuracy_after=_accuracy(after_pred, y[val_idx]),
    )
    return updated, record


def run_incremental_discovery(
    model: ResidualModel,
    candidate_bank: ConceptBank,
    features: EmbeddingMatrix,
    labels: np.ndarray,
    train_idx=None,
    val_idx=None,
    class_name_embeddings: EmbeddingMatrix | None = None,
):
    """Convert every residual vector, one round each; returns (model, history).

    Without explicit class-name embeddings the language prior falls back to
    per-class feature centroids from the training split, which live in the
    same embedding space.
    """
    cfg = model.config
    y = np.asarray(labels, dtype=np.int64)
    rounds = model.n_residual
    if rounds == 0:
        return model, []
    train_idx, val_idx = _resolve_split(y, cfg, train_idx, val_idx)

    if class_name_embeddings is None:
        feats = features.data
        overall = feats[train_idx].mean(axis=0)
        rows = []
        for cls in range(model.n_classes):
            members = feats[train_idx][y[train_idx] == cls]
            rows.append(members.mean(axis=0) if len(members) else overall)
        class_name_embeddings = EmbeddingMatrix(np.stack(rows))

    pool_tokens = set(candidate_bank.tokens) - set(model.base_bank.tokens)
    if not pool_tokens:
        raise ValueError("candidate pool exhausted before discovery began")
    pool = _subset_bank(candidate_bank, pool_tokens)

    history = []
    for round_index in range(rounds):
        state = init_discovery_state(model, pool, class_name_embeddings, round_index)
        model, record = discovery_round(
            model, state, features, labels, train_idx, val_idx
        )
        history.append(record)
        remaining = set(pool.tokens) - {record.token}
        if remaining:
            pool = _subset_bank(pool, remaining)
        elif round_index + 1 < rounds:
            raise ValueError("candidate pool exhausted mid-run")

    # every merge except the last is re-polished by the following rounds'
    # base-classifier updates; finish by fitting the completed bank the same
    # way, so the returned model is the one a completed bank would deploy
    from dataclasses import replace

    from .residual_trainer import _run_two_pass_training

    polish = replace(model, config=replace(cfg, n_residual=0))
    model, _ = _run_two_pass_training(polish, features, labels, train_idx, val_idx)
    return model, history
