"""Per-category semantic embeddings (the text side of the alignment).

Embeddings are inputs: either a CSV produced offline by some sentence encoder,
or deterministic orthonormal stand-ins for experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .tensor import Tensor, get_default_dtype

DEFAULT_TEXT_DIM = 768


@dataclass(frozen=True)
class CategoryDescription:
    name: str
    text: str = ""


@dataclass
class SemanticEmbeddings:
    categories: list[str]
    matrix: Tensor  # [n, D_text]; row i belongs to categories[i]

    def __post_init__(self):
        validate_names(self.categories)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.categories):
            raise ValidationError(
                f"{len(self.categories)} categories but matrix shape {self.matrix.shape}")
        if not np.isfinite(self.matrix.data).all():
            raise ValidationError("embedding matrix has non-finite entries")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.categories)

    def permuted(self, order) -> "SemanticEmbeddings":
        order = list(order)
        return SemanticEmbeddings([self.categories[i] for i in order],
                                  Tensor(self.matrix.data[order]))


def validate_names(names) -> None:
    seen = set()
    for name in names:
        if not name:
            raise ValidationError("empty category name")
        if name in seen:
            raise ValidationError(f"duplicate category name {name!r}")
        seen.add(name)


def load_embeddings(path) -> SemanticEmbeddings:
    """Read ``name,v0,...,v{D-1}`` rows; row order becomes category order."""
    path = Path(path)
    names, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) < 2:
                raise FormatError(f"{path}:{lineno}: row has no values")
            try:
                values = [float(v) for v in record[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from exc
            if rows and len(values) != len(rows[0]):
                raise FormatError(
                    f"{path}:{lineno}: ragged row with {len(values)} values, expected {len(rows[0])}")
            names.append(record[0].strip())
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no embedding rows")
    validate_names(names)
    matrix = np.array(rows, dtype=np.float64).astype(get_default_dtype())
    return SemanticEmbeddings(names, Tensor(matrix))


def save_embeddings(emb: SemanticEmbeddings, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for name, row in zip(emb.categories, emb.matrix.data):
            writer.writerow([name] + [format(float(v), ".9g") for v in row])


def make_test_embeddings(n: int, dim: int = DEFAULT_TEXT_DIM, seed: int = 0,
                         names=None) -> SemanticEmbeddings:
    """Orthonormal rows from Gram-Schmidt on seeded Gaussian draws."""
    if n > dim:
        raise ConfigError(f"cannot build {n} orthonormal rows in dimension {dim}")
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n, dim))
    basis = np.zeros_like(draws)
    for i, v in enumerate(draws):
        for _ in range(2):  # second pass restores orthogonality lost to rounding
            v = v - basis[:i].T @ (basis[:i] @ v)
        basis[i] = v / np.linalg.norm(v)
    names = list(names) if names is not None else [f"cat{i}" for i in range(n)]
    return SemanticEmbeddings(names, Tensor(basis.astype(get_default_dtype())))


def load_descriptions(path=None) -> list[CategoryDescription]:
    """Read ``name<TAB>description`` lines; defaults to the bundled vehicle asset."""
    if path is None:
        text = resources.files("lpanet").joinpath("data/descriptions.tsv").read_text("utf-8")
        source = "descriptions.tsv"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, _, desc = line.partition("\t")
        if not name.strip():
            raise FormatError(f"{source}:{lineno}: missing category name")
        out.append(CategoryDescription(name.strip(), desc.strip()))
    validate_names([d.name for d in out])
    return out
