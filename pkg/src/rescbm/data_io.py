"""On-disk formats, dataset loading, and the synthetic-task generator.

Binary embedding container (little-endian throughout):

    magic    11 bytes  b"RESCBM-EMB\\x00"
    version  1 byte    currently 1
    flags    1 byte    bit0 = rows are L2-normalized
    rows     u32
    dim      u32
    payload  rows * dim float32, row-major

Payload precision is 32-bit; everything in memory is 64-bit.  The same
container (with magic b"RESCBM-CLF\\x00") stores linear classifiers as
``rows = classes`` weight rows followed by one bias value per class.
"""

import csv
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .concept_bank import ConceptBank

EMBEDDING_MAGIC = b"RESCBM-EMB\x00"
CLASSIFIER_MAGIC = b"RESCBM-CLF\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<BBII")  # version, flags, rows, dim

UNIT_NORM_TOL = 1e-6


class FormatError(ValueError):
    """Base class for embedding-container violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic string."""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload is complete."""


class PayloadSizeError(FormatError):
    """Payload length disagrees with the header's rows x dim."""


class NonFiniteDataError(FormatError):
    """Payload contains NaN or infinity."""


class NormalizationFlagError(FormatError):
    """Header claims unit rows but a row's L2 norm is off."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense rows x dim real matrix; immutable after construction."""

    data: np.ndarray
    row_normalized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-d matrix, got ndim={data.ndim}")
        rows, dim = data.shape
        if rows < 1 or dim < 1:
            raise ValueError(f"matrix must be at least 1x1, got {rows}x{dim}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteDataError("matrix entries must be finite")
        if self.row_normalized:
            norms = np.linalg.norm(data, axis=1)
            bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
            if np.any(bad):
                i = int(np.argmax(bad))
                raise NormalizationFlagError(
                    f"row {i} has norm {norms[i]:.9f}, expected 1 within {UNIT_NORM_TOL}"
                )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def save_embedding_matrix(m: EmbeddingMatrix, path) -> None:
    """Write ``m`` to the binary container; refuses invalid matrices."""
    payload = np.asarray(m.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteDataError("refusing to write non-finite entries")
    flags = 1 if m.row_normalized else 0
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(_HEADER.pack(FORMAT_VERSION, flags, m.rows, m.dim))
        fh.write(payload.tobytes(order="C"))


def load_embedding_matrix(path) -> EmbeddingMatrix:
    """Read a binary embedding container, verifying every header claim."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return _decode_container(raw, EMBEDDING_MAGIC)


def _decode_container(raw: bytes, magic: bytes, extra_per_row: int = 0) -> EmbeddingMatrix:
    if raw[: len(magic)] != magic:
        raise BadMagicError(f"expected magic {magic!r}")
    offset = len(magic)
    if len(raw) < offset + _HEADER.size:
        raise TruncatedPayloadError("file too short for the fixed header")
    version, flags, rows, dim = _HEADER.unpack_from(raw, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if rows < 1 or dim < 1:
        raise FormatError(f"header declares degenerate shape {rows}x{dim}")
    body = raw[offset + _HEADER.size :]
    expected = 4 * rows * (dim + extra_per_row)
    if len(body) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(body)} bytes, header requires {expected}"
        )
    if len(body) > expected:
        raise PayloadSizeError(
            f"payload has {len(body)} bytes, header requires exactly {expected}"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteDataError("payload contains non-finite entries")
    data = values.reshape(rows, dim + extra_per_row)
    # EmbeddingMatrix re-checks the unit-norm claim and raises
    # NormalizationFlagError if the flag lies.
    return EmbeddingMatrix(data=data, row_normalized=bool(flags & 1))


def load_token_list(path) -> list[str]:
    """One token per line, trimmed; empty lines dropped, duplicates rejected."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.strip() for line in fh]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise ValueError(f"no tokens in {path}")
    seen = set()
    for t in tokens:
        if t in seen:
            raise ValueError(f"duplicate token {t!r} in {path}")
        seen.add(t)
    return tokens


def save_token_list(tokens, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tokens:
            fh.write(t + "\n")


@dataclass(frozen=True)
class LabelTable:
    """Sample identifiers with class indices into an ordered class list."""

    sample_ids: tuple
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) != len(self.sample_ids):
            raise ValueError("labels must be one index per sample id")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError("label index outside the class list")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.sample_ids)


def load_label_table(path, class_names) -> LabelTable:
    """CSV ``sample_id,label_name`` with a header row; names mapped to indices."""
    index = {name: i for i, name in enumerate(class_names)}
    sample_ids: list[str] = []
    labels: list[int] = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["sample_id", "label_name"]:
            raise ValueError(f"{path}: expected header 'sample_id,label_name'")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            sid, name = row[0].strip(), row[1].strip()
            if sid in seen:
                raise ValueError(f"{path}: duplicate sample_id {sid!r}")
            seen.add(sid)
            if name not in index:
                raise ValueError(f"{path}: unknown class name {name!r}")
            sample_ids.append(sid)
            labels.append(index[name])
    return LabelTable(tuple(sample_ids), np.array(labels, dtype=np.int64), tuple(class_names))


def save_label_table(table: LabelTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label_name"])
        for sid, lab in zip(table.sample_ids, table.labels):
            writer.writerow([sid, table.class_names[lab]])


# ---------------------------------------------------------------------------
# Synthetic tasks
#
# Desk-scale stand-in for real embedding datasets.  Candidate concepts are
# random unit directions; each sample mixes a handful of "relevant" concepts
# (nonnegative coefficients) plus faint background concepts and isotropic
# noise.  Labels come from a fixed sparse linear rule over standardized
# cosine activations of the relevant concepts, with the planted (missing)
# concepts given decisive weight, so a classifier restricted to the base
# concepts is measurably worse than one that also sees the planted ones.
# The rule's standardization constants are frozen from a probe draw and
# samples with a thin top-two score margin are redrawn, which keeps the
# task linearly separable in activation space with real margin.  Candidate
# embeddings share a cone around a random center direction, matching how
# text embeddings of real encoders cluster; isotropic candidates would make
# the sign of a learned direction unidentifiable.
# ---------------------------------------------------------------------------

_STREAM_GEOMETRY = 11
_STREAM_RULE = 12
_STREAM_SAMPLE = 13
_STREAM_PROBE = 14

_BASE_RULE_SCALE = 1.0
_PLANTED_RULE_SCALE = 4.0
_TRACE_SCALE = 0.45
_NOISE_SCALE = 0.03
_CONE_SPREAD = 0.6
_OWN_DIRECTION = 0.35
_SIMPLEX_JITTER = 0.1
_PLANTED_MIX_CAP = 0.25
_SCORE_MARGIN = 1.0
_CLASS_PRIOR_DECAY = 0.6
_MAX_REDRAWS = 200
_PROBE_SAMPLES = 512


@dataclass(frozen=True)
class SyntheticTask:
    """A generated classification task whose concept bank is complete by construction."""

    features: EmbeddingMatrix
    labels: LabelTable
    candidate_bank: "ConceptBank"
    base_token_indices: tuple
    planted_missing: tuple
    generator_seed: int
    rule_weights: np.ndarray = field(repr=False, default=None)
    rule_stats: tuple = field(repr=False, default=None)

    @property
    def relevant_indices(self) -> tuple:
        """Base then planted candidate indices, the label rule's column order."""
        return tuple(self.base_token_indices) + tuple(self.planted_missing)


def synthetic_task_labels(
    features: np.ndarray,
    candidate_rows: np.ndarray,
    relevant_indices,
    rule_weights: np.ndarray,
    rule_stats,
) -> np.ndarray:
    """Apply the generator's label rule to arbitrary storage of the candidates.

    Relabeling candidate indices consistently leaves the output unchanged,
    which is exactly the storage-order invariance the generator promises.
    """
    rel = candidate_rows[np.asarray(relevant_indices, dtype=np.int64)]
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    acts = (features / norms) @ rel.T
    mu, sd = rule_stats
    scores = ((acts - mu) / sd) @ rule_weights.T
    return np.argmax(scores, axis=1)


def _draw_feature(rng, rel_rows, dim):
    n_rel = rel_rows.shape[0]
    n_active = int(rng.integers(1, min(3, n_rel) + 1))
    active = rng.choice(n_rel, size=n_active, replace=False)
    coeff = np.abs(rng.normal(1.0, 0.3, size=n_active))
    f = coeff @ rel_rows[active]
    # every relevant concept leaves a weak trace, so activation level alone
    # never substitutes for reading the right direction
    f = f + (_TRACE_SCALE * np.abs(rng.standard_normal(n_rel))) @ rel_rows
    return f + _NOISE_SCALE * rng.standard_normal(dim)


def generate_synthetic_task(
    n_samples: int,
    dim: int,
    n_candidates: int,
    n_base: int,
    n_planted: int,
    n_classes: int,
    seed: int,
) -> SyntheticTask:
    """Deterministically generate a task; pure function of its arguments."""
    from .concept_bank import build_bank

    if n_base + n_planted > n_candidates:
        raise ValueError("n_base + n_planted must not exceed n_candidates")
    if dim < n_classes:
        raise ValueError("dim must be at least n_classes")
    if n_samples < 1 or n_classes < 2 or n_base < 1:
        raise ValueError("need at least 1 sample, 2 classes, and 1 base concept")

    geom = np.random.default_rng([seed, _STREAM_GEOMETRY])
    center = geom.standard_normal(dim)
    center /= np.linalg.norm(center)
    spread = _CONE_SPREAD * geom.standard_normal((n_candidates, dim))

    n_rel = n_base + n_planted
    chosen = geom.choice(n_candidates, size=n_rel, replace=False)
    base_idx = tuple(int(i) for i in np.sort(chosen[:n_base]))
    planted_idx = tuple(int(i) for i in np.sort(chosen[n_base:]))
    rel_order = np.array(base_idx + planted_idx, dtype=np.int64)

    dev = spread - np.outer(spread @ center, center)
    others = np.setdiff1d(np.arange(n_candidates), rel_order)

    # planted concepts mark mutually exclusive classes, so their directions
    # are contrastive: spread them over a near-simplex in a shared plane
    # instead of letting them land at arbitrary mutual angles
    if n_planted >= 2:
        plane = geom.standard_normal((2, dim))
        plane -= np.outer(plane @ center, center)
        plane[0] /= np.linalg.norm(plane[0])
        plane[1] -= (plane[1] @ plane[0]) * plane[0]
        plane[1] /= np.linalg.norm(plane[1])
        angles = 2.0 * np.pi * np.arange(n_planted) / n_planted
        for p, idx in enumerate(planted_idx):
            keep = np.linalg.norm(dev[idx])
            jitter = dev[idx] - (dev[idx] @ plane[0]) * plane[0]
            jitter -= (jitter @ plane[1]) * plane[1]
            direction = (
                np.cos(angles[p]) * plane[0]
                + np.sin(angles[p]) * plane[1]
                + _SIMPLEX_JITTER * jitter / np.linalg.norm(jitter)
            )
            dev[idx] = keep * direction / np.linalg.norm(direction)

    # non-task candidates are sparse mixtures of the task concepts plus a
    # little of their own direction: candidate banks describe one visual
    # world, so unrelated-but-plausible concepts overlap the task span
    # instead of pointing at arbitrary directions of the embedding space
    rel_dev = dev[rel_order]
    for j in others:
        own = dev[j]
        n_mix = int(geom.integers(2, min(4, n_rel) + 1))
        parts = geom.choice(n_rel, size=n_mix, replace=False)
        if n_base >= n_mix:
            extra_planted = np.flatnonzero(parts >= n_base)[1:]
            for slot in extra_planted:
                free = np.setdiff1d(np.arange(n_base), parts)
                parts[slot] = geom.choice(free)
        weights = geom.dirichlet(np.full(n_mix, 1.2))
        # tokens are distinct concepts, not synonyms: no candidate may be a
        # near-duplicate of a planted concept, or "found the missing concept"
        # stops being a well-posed question
        planted_parts = parts >= n_base
        weights[planted_parts] = np.minimum(weights[planted_parts], _PLANTED_MIX_CAP)
        weights /= weights.sum()
        mixed = weights @ rel_dev[parts]
        mixed = mixed / np.linalg.norm(mixed) + _OWN_DIRECTION * own / np.linalg.norm(own)
        dev[j] = mixed / np.linalg.norm(mixed) * np.linalg.norm(own)
    cand = center + dev
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    rel_rows = cand[rel_order]

    rule_rng = np.random.default_rng([seed, _STREAM_RULE])
    rule_base = rule_rng.standard_normal((n_classes, n_base)) * _BASE_RULE_SCALE
    rule_base *= rule_rng.random((n_classes, n_base)) < 0.6
    for k in range(n_classes):
        if not rule_base[k].any():
            rule_base[k, int(rule_rng.integers(n_base))] = _BASE_RULE_SCALE
    # each planted concept is the decisive marker of one class, so any single
    # planted concept carries class information the base bank cannot express;
    # markers go to the most frequent classes, which staggers how much each
    # one matters and keeps single additions individually measurable
    rule_planted = np.zeros((n_classes, n_planted))
    for p in range(n_planted):
        rule_planted[p % n_classes, p] = _PLANTED_RULE_SCALE
    rule = np.ascontiguousarray(np.concatenate([rule_base, rule_planted], axis=1))
    rule.flags.writeable = False
    priors = _CLASS_PRIOR_DECAY ** np.arange(n_classes)
    priors /= priors.sum()

    # standardization constants come from a probe draw, never the dataset, so
    # each sample's label depends on that sample alone
    probe_rng = np.random.default_rng([seed, _STREAM_PROBE])
    probe = np.stack(
        [_draw_feature(probe_rng, rel_rows, dim) for _ in range(_PROBE_SAMPLES)]
    )
    probe_acts = (probe / np.linalg.norm(probe, axis=1, keepdims=True)) @ rel_rows.T
    mu = probe_acts.mean(axis=0)
    sd = probe_acts.std(axis=0)
    sd[sd < 1e-12] = 1.0
    mu.flags.writeable = False
    sd.flags.writeable = False

    features = np.zeros((n_samples, dim))
    labels = np.zeros(n_samples, dtype=np.int64)
    for i in range(n_samples):
        rng_i = np.random.default_rng([seed, _STREAM_SAMPLE, i])
        target = int(rng_i.choice(n_classes, p=priors))
        for _ in range(_MAX_REDRAWS):
            f = _draw_feature(rng_i, rel_rows, dim)
            f /= np.linalg.norm(f)  # encoders emit unit-norm representations
            acts = f @ rel_rows.T
            scores = ((acts - mu) / sd) @ rule.T
            top2 = np.partition(scores, -2)[-2:]
            if top2[1] - top2[0] >= _SCORE_MARGIN and int(np.argmax(scores)) == target:
                break
        features[i] = f
        labels[i] = int(np.argmax(scores))

    class_names = tuple(f"class_{k}" for k in range(n_classes))
    table = LabelTable(
        tuple(f"sample_{i:05d}" for i in range(n_samples)),
        labels,
        class_names,
    )
    tokens = [f"concept_{j:03d}" for j in range(n_candidates)]
    bank = build_bank(tokens, EmbeddingMatrix(cand))
    return SyntheticTask(
        features=EmbeddingMatrix(features, row_normalized=True),
        labels=table,
        candidate_bank=bank,
        base_token_indices=base_idx,
        planted_missing=planted_idx,
        generator_seed=seed,
        rule_weights=rule,
        rule_stats=(mu, sd),
    )
