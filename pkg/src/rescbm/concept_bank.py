"""Concept-bank algebra: assembly, normalization, letter stats, ranked queries.

A bank pairs an ordered token list with unit-norm embedding rows.  Banks are
immutable; every mutation-shaped operation returns a new bank.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data_io import EmbeddingMatrix


def letter_count(token: str) -> int:
    """Alphabetic characters only; spaces, digits, hyphens, punctuation are free."""
    return sum(1 for ch in token if ch.isalpha())


@dataclass(frozen=True)
class ConceptBank:
    tokens: tuple
    embeddings: EmbeddingMatrix
    avg_letters: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) != self.embeddings.rows:
            raise ValueError(
                f"{len(self.tokens)} tokens but {self.embeddings.rows} embedding rows"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("bank tokens must be unique")
        if not self.embeddings.row_normalized:
            raise ValueError("bank embeddings must be row-normalized")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.dim


@dataclass(frozen=True)
class RankedMatches:
    """Candidate indices sorted by cosine similarity, descending."""

    indices: tuple
    similarities: tuple

    def __post_init__(self):
        sims = np.asarray(self.similarities)
        if np.any(np.diff(sims) > 0):
            raise ValueError("similarities must be non-increasing")
        if np.any(sims < -1.0) or np.any(sims > 1.0):
            raise ValueError("cosines must lie in [-1, 1]")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("indices must be distinct")


def assemble_base_bank(general, associated, candidate: ConceptBank) -> list[str]:
    """(general ∪ associated) filtered to candidate tokens, first-appearance order."""
    legal = set(candidate.tokens)
    out: list[str] = []
    seen = set()
    for token in list(general) + list(associated):
        if token in legal and token not in seen:
            out.append(token)
            seen.add(token)
    return out


def build_bank(tokens, embeddings: EmbeddingMatrix) -> ConceptBank:
    """Pair tokens with L2-normalized rows and compute the letter average."""
    tokens = list(tokens)
    if len(tokens) != embeddings.rows:
        raise ValueError(
            f"{len(tokens)} tokens but {embeddings.rows} embedding rows"
        )
    norms = np.linalg.norm(embeddings.data, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm embedding row at index {int(np.argmax(norms == 0.0))}")
    data = embeddings.data / norms[:, None]
    avg = float(np.mean([letter_count(t) for t in tokens]))
    return ConceptBank(
        tokens=tuple(tokens),
        embeddings=EmbeddingMatrix(data, row_normalized=True),
        avg_letters=avg,
    )


def nearest_candidates(query: np.ndarray, candidates: ConceptBank, m: int) -> RankedMatches:
    """Top-m cosine matches against the bank; ties broken by lower index."""
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.shape[0] != candidates.dim:
        raise ValueError(f"query dim {query.shape[0]} != bank dim {candidates.dim}")
    if not 1 <= m <= len(candidates):
        raise ValueError(f"m={m} outside [1, {len(candidates)}]")
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise ValueError("query vector is all-zero")
    sims = np.clip(candidates.embeddings.data @ (query / norm), -1.0, 1.0)
    # stable sort on the negated similarities keeps equal entries in index order
    order = np.argsort(-sims, kind="stable")[:m]
    return RankedMatches(
        indices=tuple(int(i) for i in order),
        similarities=tuple(float(sims[i]) for i in order),
    )


def append_concept(bank: ConceptBank, token: str, embedding_row: np.ndarray) -> ConceptBank:
    """New bank with one more normalized row; letter average recomputed."""
    if token in bank.tokens:
        raise ValueError(f"token {token!r} already in bank")
    row = np.asarray(embedding_row, dtype=np.float64).ravel()
    if row.shape[0] != bank.dim:
        raise ValueError(f"row dim {row.shape[0]} != bank dim {bank.dim}")
    norm = np.linalg.norm(row)
    if norm == 0.0:
        raise ValueError("zero-norm embedding row")
    data = np.vstack([bank.embeddings.data, row / norm])
    tokens = bank.tokens + (token,)
    avg = float(np.mean([letter_count(t) for t in tokens]))
    return ConceptBank(tokens, EmbeddingMatrix(data, row_normalized=True), avg)


def drop_concept(bank: ConceptBank, token: str) -> ConceptBank:
    """New bank without the given token."""
    if token not in bank.tokens:
        raise ValueError(f"token {token!r} not in bank")
    keep = [i for i, t in enumerate(bank.tokens) if t != token]
    if not keep:
        raise ValueError("cannot drop the last concept")
    tokens = tuple(bank.tokens[i] for i in keep)
    data = bank.embeddings.data[keep]
    avg = float(np.mean([letter_count(t) for t in tokens]))
    return ConceptBank(tokens, EmbeddingMatrix(data, row_normalized=True), avg)


def bank_size_lint(n_concepts: int, n_classes: int, dim: int) -> str:
    """Advisory check of the concept count against [ceil(log2 classes), dim).

    Returns "within", "below", or "above"; never blocks anything.
    """
    if n_concepts < 1 or n_classes < 1 or dim < 1:
        raise ValueError("all arguments must be positive")
    lower = math.ceil(math.log2(n_classes))
    if n_concepts < lower:
        return "below"
    if n_concepts >= dim:
        return "above"
    return "within"


def save_bank(bank: ConceptBank, manifest_path, tokens_path, embeddings_path) -> None:
    """Write the token/embedding pair plus a key-value manifest naming them."""
    from . import data_io
    from pathlib import Path

    data_io.save_token_list(bank.tokens, tokens_path)
    data_io.save_embedding_matrix(bank.embeddings, embeddings_path)
    manifest_dir = Path(manifest_path).parent
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(f"tokens = {Path(tokens_path).resolve().relative_to(manifest_dir.resolve())}\n")
        fh.write(f"embeddings = {Path(embeddings_path).resolve().relative_to(manifest_dir.resolve())}\n")


def load_bank(manifest_path) -> ConceptBank:
    """Load a bank named by a key-value manifest (paths relative to it)."""
    from . import data_io
    from pathlib import Path

    entries = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{manifest_path}: malformed manifest line {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    for required in ("tokens", "embeddings"):
        if required not in entries:
            raise ValueError(f"{manifest_path}: manifest missing {required!r}")
    base = Path(manifest_path).parent
    tokens = data_io.load_token_list(base / entries["tokens"])
    embeddings = data_io.load_embedding_matrix(base / entries["embeddings"])
    return build_bank(tokens, embeddings)
