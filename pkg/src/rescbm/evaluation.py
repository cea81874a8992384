"""Metrics, the few-shot harness, the brute-force discovery oracle, and reports."""

from dataclasses import dataclass, field

import numpy as np

from .concept_bank import ConceptBank, append_concept
from .concept_discovery import SnapRecord
from .data_io import EmbeddingMatrix, LabelTable
from .residual_trainer import TrainingConfig, stratified_split, train_pcbm

_STREAM_FEWSHOT = 41


def accuracy(predicted, truth) -> float:
    """Fraction of exact matches."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    if predicted.size == 0:
        raise ValueError("cannot score an empty prediction")
    return float(np.mean(predicted == truth))


def cue(acc: float, n_concepts: int, avg_letters: float) -> float:
    """Accuracy yield per unit of concept description length, scaled by 10000.

    cue = 10000 * acc / (n_concepts * avg_letters); larger is more efficient.
    """
    if not 0.0 <= acc <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    if n_concepts < 1:
        raise ValueError("need at least one concept")
    if avg_letters <= 0:
        raise ValueError("average letter count must be positive")
    return 10000.0 * acc / (n_concepts * avg_letters)


def few_shot_split(labels, k: int, seed: int) -> np.ndarray:
    """Exactly k training indices per class, drawn without replacement.

    Splits with the same seed are nested across k (each class's permutation
    is fixed and the first k entries are taken), so growing k only ever adds
    samples.  Everything not returned is for evaluation.
    """
    if isinstance(labels, LabelTable):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng([seed, _STREAM_FEWSHOT])
    picked = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has only {len(members)} samples, needs {k}")
        perm = members[rng.permutation(len(members))]
        picked.extend(perm[:k])
    return np.sort(np.array(picked))


def oracle_best_single_addition(
    features: EmbeddingMatrix,
    labels: np.ndarray,
    base_bank: ConceptBank,
    candidate_bank: ConceptBank,
    config: TrainingConfig,
):
    """Brute force over single-concept additions to the base bank.

    Trains one classifier per candidate outside the base bank and ranks the
    candidates by validation accuracy, descending.  Ties break on the token
    string so the ranking is invariant to candidate storage order.  Returns
    (candidate indices, their validation accuracies) in rank order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx = stratified_split(labels, config.val_fraction, config.seed)
    base_tokens = set(base_bank.tokens)
    entries = []
    for idx, token in enumerate(candidate_bank.tokens):
        if token in base_tokens:
            continue
        grown = append_concept(base_bank, token, candidate_bank.embeddings.data[idx])
        _, _, trace = train_pcbm(features, labels, grown, config, train_idx, val_idx)
        entries.append((idx, token, trace.val_accuracy[-1]))
    entries.sort(key=lambda e: (-e[2], e[1]))
    indices = np.array([e[0] for e in entries], dtype=np.int64)
    accs = np.array([e[2] for e in entries])
    return indices, accs


@dataclass(frozen=True)
class RunReport:
    """Everything a finished run claims about itself; cue must be recomputable."""

    accuracy: float
    n_concepts: int
    avg_letters: float
    cue: float
    seed: int
    config: dict = field(default_factory=dict)
    snap_history: tuple = ()
    snap_history_ref: str = ""

    def __post_init__(self):
        for name in ("accuracy", "n_concepts", "avg_letters", "cue", "seed"):
            if getattr(self, name) is None:
                raise ValueError(f"report field {name!r} is missing")
        expected = cue(self.accuracy, self.n_concepts, self.avg_letters)
        if abs(expected - self.cue) > 1e-9:
            raise ValueError(
                f"cue {self.cue!r} not recomputable from fields (expected {expected!r})"
            )
        object.__setattr__(self, "snap_history", tuple(self.snap_history))


_SNAP_HEADER = "round_index,token,cosine,accuracy_before,accuracy_after"


def emit_report(report: RunReport, path) -> None:
    """Write the report as stable key-value text plus a snap-record table."""
    lines = [
        f"accuracy = {report.accuracy!r}",
        f"n_concepts = {report.n_concepts!r}",
        f"avg_letters = {report.avg_letters!r}",
        f"cue = {report.cue!r}",
        f"seed = {report.seed!r}",
        f"snap_history_ref = {report.snap_history_ref}",
    ]
    for key in sorted(report.config):
        lines.append(f"config.{key} = {report.config[key]!r}")
    lines.append("[snaps]")
    lines.append(_SNAP_HEADER)
    for rec in report.snap_history:
        if "," in rec.token or "\n" in rec.token:
            raise ValueError(f"snap token {rec.token!r} cannot be serialized")
        lines.append(
            f"{rec.round_index},{rec.token},{rec.cosine!r},"
            f"{rec.accuracy_before!r},{rec.accuracy_after!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_report(path) -> RunReport:
    """Read a report back; values reproduce the written ones exactly."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    head, _, tail = text.partition("[snaps]")
    entries = {}
    for line in head.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed report line {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    for required in ("accuracy", "n_concepts", "avg_letters", "cue", "seed"):
        if required not in entries:
            raise ValueError(f"{path}: report missing field {required!r}")
    config = {}
    for key, value in entries.items():
        if key.startswith("config."):
            config[key[len("config.") :]] = _parse_scalar(value)
    snaps = []
    rows = [r for r in tail.strip().splitlines() if r.strip()]
    if rows:
        if rows[0].strip() != _SNAP_HEADER:
            raise ValueError(f"{path}: unexpected snap table header {rows[0]!r}")
        for row in rows[1:]:
            ri, token, cosv, before, after = row.split(",")
            snaps.append(
                SnapRecord(int(ri), token, float(cosv), float(before), float(after))
            )
    return RunReport(
        accuracy=float(entries["accuracy"]),
        n_concepts=int(entries["n_concepts"]),
        avg_letters=float(entries["avg_letters"]),
        cue=float(entries["cue"]),
        seed=int(entries["seed"]),
        config=config,
        snap_history=tuple(snaps),
        snap_history_ref=entries.get("snap_history_ref", ""),
    )


def _parse_scalar(text: str):
    for parser in (int, float):
        try:
            return parser(text)
        except ValueError:
            continue
    if text.strip().startswith("'") or text.strip().startswith('"'):
        return text.strip()[1:-1]
    return text
