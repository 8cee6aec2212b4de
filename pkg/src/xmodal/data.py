"""Embedding ingestion, class-disjoint X-shot splitting, synthetic corpora.

File formats (all little-endian):
  * embedding file: magic ``FLEXEMB1``, u32 n, u32 d, then n*d float32 row-major
  * labels file: UTF-8 text, one integer per line, n lines
  * attributes: an embedding file with one row per class, paired with an index
    text file listing the class id of each row
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    IngestError,
    MissingAttributeError,
    NonFiniteError,
)
from .util import stream

EMB_MAGIC = b"FLEXEMB1"

CORPUS_FILES = {
    "images": "images.femb",
    "texts": "texts.femb",
    "labels": "labels.txt",
    "attrs": "attrs.femb",
    "attr_ids": "attrs.idx",
}


def write_embedding_file(path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError(f"embedding matrix must be 2-D, got shape {X.shape}")
    n, d = X.shape
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", n, d))
        f.write(X.astype("<f4").tobytes(order="C"))


def read_embedding_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != EMB_MAGIC:
        raise FileFormatError(f"{path}: not an embedding file (bad magic)")
    n, d = struct.unpack("<II", raw[8:16])
    expected = 16 + 4 * n * d
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: expected {expected} bytes for {n}x{d} floats, got {len(raw)}"
        )
    X = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d).astype(np.float64)
    if not np.isfinite(X).all():
        raise NonFiniteError(f"{path}: embedding file contains NaN or Inf")
    return X


def _read_int_lines(path, what: str) -> list[int]:
    out = []
    with open(path, "r", encoding="utf8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                out.append(int(text))
            except ValueError as e:
                raise FileFormatError(f"{path}:{lineno}: bad {what} {text!r}") from e
    return out


def _write_int_lines(path, values) -> None:
    with open(path, "w", encoding="utf8") as f:
        for v in values:
            f.write(f"{int(v)}\n")


def _own_row(x) -> np.ndarray:
    if (
        isinstance(x, np.ndarray)
        and x.dtype == np.float64
        and x.ndim == 2
        and x.shape[0] == 1
        and not x.flags.writeable
    ):
        return x
    row = np.array(x, dtype=np.float64).reshape(1, -1)
    row.flags.writeable = False
    return row


@dataclass(frozen=True)
class Instance:
    """One paired sample: image feature, text feature, class attribute, label."""

    image_feat: np.ndarray
    text_feat: np.ndarray
    attr_feat: np.ndarray
    label: int


class Corpus:
    """Labeled instance collection plus the per-class attribute map."""

    def __init__(self, instances, class_attrs, name: str = "corpus"):
        self.instances: list[Instance] = list(instances)
        if not self.instances:
            raise IngestError("corpus has no instances")
        self.class_attrs: dict[int, np.ndarray] = {
            int(k): _own_row(v) for k, v in class_attrs.items()
        }
        self.name = name

        first = self.instances[0]
        d_v = first.image_feat.shape[1]
        d_t = first.text_feat.shape[1]
        d_a = first.attr_feat.shape[1]
        if not d_v == d_t == d_a:
            raise DimensionMismatchError(
                f"feature dims differ: image {d_v}, text {d_t}, attribute {d_a}"
            )
        self.dims = (d_v, d_t, d_a)

        for attr in self.class_attrs.values():
            if attr.shape[1] != d_a:
                raise DimensionMismatchError(
                    f"attribute dim {attr.shape[1]} does not match features ({d_a})"
                )
            if not np.isfinite(attr).all():
                raise NonFiniteError("class attribute contains NaN or Inf")

        for inst in self.instances:
            if inst.image_feat.shape != (1, d_v) or inst.text_feat.shape != (1, d_t):
                raise DimensionMismatchError(
                    f"instance features {inst.image_feat.shape}/{inst.text_feat.shape} "
                    f"do not match corpus dim {d_v}"
                )
            if not (
                np.isfinite(inst.image_feat).all() and np.isfinite(inst.text_feat).all()
            ):
                raise NonFiniteError("instance feature contains NaN or Inf")
            if inst.label not in self.class_attrs:
                raise MissingAttributeError(f"missing attribute for class {inst.label}")
            if not np.array_equal(inst.attr_feat, self.class_attrs[inst.label]):
                raise IngestError(
                    f"instance of class {inst.label} carries a different attribute "
                    "vector than the class map"
                )

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def dim(self) -> int:
        return self.dims[0]

    def classes(self) -> list[int]:
        return sorted(self.class_attrs.keys())

    def indices_by_class(self) -> dict[int, list[int]]:
        table: dict[int, list[int]] = {c: [] for c in self.classes()}
        for i, inst in enumerate(self.instances):
            table[inst.label].append(i)
        return table

    def _matrix(self, field: str, idx) -> np.ndarray:
        if idx is None:
            idx = range(len(self.instances))
        return np.vstack([getattr(self.instances[i], field) for i in idx])

    def image_matrix(self, idx=None) -> np.ndarray:
        return self._matrix("image_feat", idx)

    def text_matrix(self, idx=None) -> np.ndarray:
        return self._matrix("text_feat", idx)

    def attr_matrix(self, idx=None) -> np.ndarray:
        return self._matrix("attr_feat", idx)

    def labels(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = range(len(self.instances))
        return np.array([self.instances[i].label for i in idx], dtype=np.int64)


def make_corpus(images, texts, labels, class_attrs, name: str = "corpus") -> Corpus:
    """Assemble a Corpus from matrices; attribute rows come from class_attrs."""
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    labels = [int(x) for x in labels]
    if not images.shape[0] == texts.shape[0] == len(labels):
        raise DimensionMismatchError(
            f"row counts differ: images {images.shape[0]}, texts {texts.shape[0]}, "
            f"labels {len(labels)}"
        )
    attrs = {int(k): _own_row(v) for k, v in class_attrs.items()}
    instances = []
    for i, y in enumerate(labels):
        if y not in attrs:
            raise MissingAttributeError(f"missing attribute for class {y}")
        instances.append(
            Instance(
                image_feat=_own_row(images[i]),
                text_feat=_own_row(texts[i]),
                attr_feat=attrs[y],
                label=y,
            )
        )
    return Corpus(instances, attrs, name=name)


def load_corpus(
    image_path,
    text_path,
    labels_path,
    attrs_path,
    attr_ids_path,
    name: str | None = None,
) -> Corpus:
    images = read_embedding_file(image_path)
    texts = read_embedding_file(text_path)
    labels = _read_int_lines(labels_path, "label")
    attr_rows = read_embedding_file(attrs_path)
    attr_ids = _read_int_lines(attr_ids_path, "class id")

    if len(attr_ids) != attr_rows.shape[0]:
        raise DimensionMismatchError(
            f"attribute index lists {len(attr_ids)} classes but the attribute file "
            f"holds {attr_rows.shape[0]} rows"
        )
    if len(set(attr_ids)) != len(attr_ids):
        raise FileFormatError(f"{attr_ids_path}: duplicate class ids")
    if not images.shape[0] == texts.shape[0] == len(labels):
        raise DimensionMismatchError(
            f"row counts differ: images {images.shape[0]}, texts {texts.shape[0]}, "
            f"labels {len(labels)}"
        )
    class_attrs = {cid: attr_rows[i] for i, cid in enumerate(attr_ids)}
    return make_corpus(
        images, texts, labels, class_attrs, name=name or Path(image_path).stem
    )


def write_corpus(corpus: Corpus, out_dir) -> dict[str, str]:
    """Write a corpus as the five-file on-disk layout; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: str(out / v) for k, v in CORPUS_FILES.items()}
    write_embedding_file(paths["images"], corpus.image_matrix())
    write_embedding_file(paths["texts"], corpus.text_matrix())
    _write_int_lines(paths["labels"], corpus.labels())
    classes = corpus.classes()
    write_embedding_file(
        paths["attrs"], np.vstack([corpus.class_attrs[c] for c in classes])
    )
    _write_int_lines(paths["attr_ids"], classes)
    return paths


def load_corpus_dir(dir_path, name: str | None = None) -> Corpus:
    d = Path(dir_path)
    return load_corpus(
        d / CORPUS_FILES["images"],
        d / CORPUS_FILES["texts"],
        d / CORPUS_FILES["labels"],
        d / CORPUS_FILES["attrs"],
        d / CORPUS_FILES["attr_ids"],
        name=name or d.name,
    )


@dataclass(frozen=True)
class XShotSplit:
    """Index partition of a corpus for one (x_shot, seed) experiment cell."""

    x_shot: int
    seed: int
    query_fraction: float
    source_eval_fraction: float
    source_classes: tuple[int, ...]
    target_classes: tuple[int, ...]
    source_train: tuple[int, ...]
    source_query: tuple[int, ...]
    source_gallery: tuple[int, ...]
    target_train: tuple[int, ...]
    target_query: tuple[int, ...]
    target_gallery: tuple[int, ...]

    def describe(self) -> dict:
        return {
            "x_shot": self.x_shot,
            "seed": self.seed,
            "query_fraction": self.query_fraction,
            "source_eval_fraction": self.source_eval_fraction,
            "source_classes": list(self.source_classes),
            "target_classes": list(self.target_classes),
            "counts": {
                "source_train": len(self.source_train),
                "source_query": len(self.source_query),
                "source_gallery": len(self.source_gallery),
                "target_train": len(self.target_train),
                "target_query": len(self.target_query),
                "target_gallery": len(self.target_gallery),
            },
        }


def split_xshot(
    corpus: Corpus,
    x: int,
    seed: int,
    query_fraction: float = 0.5,
    source_eval_fraction: float = 0.25,
    shots_in_gallery: bool = False,
) -> XShotSplit:
    """Class-disjoint source/target split with exactly x target shots per class.

    Classes are shuffled by seed and halved into disjoint source/target sets.
    Per target class, exactly x instances (seeded, without replacement) form
    target_train; the remainder is split query/gallery by query_fraction.
    Source classes keep a held-out evaluation pool of source_eval_fraction per
    class, split the same way; the rest is source_train. The x-shot instances
    are excluded from the test gallery unless shots_in_gallery is set (which
    relaxes the partition-disjointness property).
    """
    if x < 0:
        raise ConfigError(f"x_shot must be non-negative, got {x}")
    if not 0.0 < query_fraction < 1.0:
        raise ConfigError(f"query_fraction must be in (0, 1), got {query_fraction}")
    if not 0.0 < source_eval_fraction < 1.0:
        raise ConfigError(
            f"source_eval_fraction must be in (0, 1), got {source_eval_fraction}"
        )
    classes = corpus.classes()
    if len(classes) < 2:
        raise ConfigError(f"need at least 2 classes to split, got {len(classes)}")

    rng = stream(seed, "split")
    order = [classes[i] for i in rng.permutation(len(classes))]
    n_source = (len(order) + 1) // 2
    if len(order) % 2:
        warnings.warn(
            f"odd class count {len(order)}: source gets {n_source} classes, "
            f"target {len(order) - n_source}",
            stacklevel=2,
        )
    source_classes = tuple(sorted(order[:n_source]))
    target_classes = tuple(sorted(order[n_source:]))

    by_class = corpus.indices_by_class()
    smallest_target = min(len(by_class[c]) for c in target_classes)
    if x > smallest_target:
        raise ConfigError(
            f"x_shot={x} exceeds the smallest target class size {smallest_target}"
        )

    target_train: list[int] = []
    target_query: list[int] = []
    target_gallery: list[int] = []
    for c in target_classes:
        idxs = np.array(by_class[c], dtype=np.int64)
        shuffled = idxs[rng.permutation(len(idxs))]
        shots = np.sort(shuffled[:x])
        pool = np.sort(shuffled[x:])
        n_q = int(query_fraction * len(pool))
        target_train.extend(int(i) for i in shots)
        target_query.extend(int(i) for i in pool[:n_q])
        target_gallery.extend(int(i) for i in pool[n_q:])
    if shots_in_gallery:
        target_gallery.extend(target_train)

    source_train: list[int] = []
    source_query: list[int] = []
    source_gallery: list[int] = []
    for c in source_classes:
        idxs = np.array(by_class[c], dtype=np.int64)
        shuffled = idxs[rng.permutation(len(idxs))]
        n_eval = int(source_eval_fraction * len(idxs))
        pool = np.sort(shuffled[:n_eval])
        train = np.sort(shuffled[n_eval:])
        n_q = int(query_fraction * len(pool))
        source_train.extend(int(i) for i in train)
        source_query.extend(int(i) for i in pool[:n_q])
        source_gallery.extend(int(i) for i in pool[n_q:])

    return XShotSplit(
        x_shot=x,
        seed=seed,
        query_fraction=query_fraction,
        source_eval_fraction=source_eval_fraction,
        source_classes=source_classes,
        target_classes=target_classes,
        source_train=tuple(sorted(source_train)),
        source_query=tuple(sorted(source_query)),
        source_gallery=tuple(sorted(source_gallery)),
        target_train=tuple(sorted(target_train)),
        target_query=tuple(sorted(target_query)),
        target_gallery=tuple(sorted(target_gallery)),
    )


def _unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _quantize_f32(X: np.ndarray) -> np.ndarray:
    # keep values exactly representable in the float32 file format so a
    # write/load round-trip reproduces the corpus bit for bit
    return X.astype(np.float32).astype(np.float64)


def synth_corpus(
    n_classes: int,
    per_class: int,
    dim: int,
    modality_gap: float = 0.5,
    noise_sigma: float = 0.25,
    seed: int = 0,
    unit_norm: bool = True,
    proto_rank: int | None = None,
    name: str = "synthetic",
) -> Corpus:
    """Desk-scale stand-in for pretrained embeddings.

    Each class gets a unit-norm prototype that doubles as its attribute
    vector. Image features are noisy copies of the prototype; text features
    additionally carry a fixed modality-offset direction scaled by
    modality_gap. Deterministic in seed.

    proto_rank confines every prototype to a shared random subspace, which
    correlates classes the way pretrained class embeddings are correlated;
    None draws them isotropically (near-orthogonal at high dim).
    """
    if n_classes < 1 or per_class < 1:
        raise ConfigError("n_classes and per_class must be positive")
    if dim < 2:
        raise ConfigError(f"dim must be at least 2, got {dim}")
    if noise_sigma <= 0:
        raise ConfigError(f"noise_sigma must be positive, got {noise_sigma}")

    rng = stream(seed, "synth")
    if proto_rank is not None:
        if not 2 <= proto_rank <= dim:
            raise ConfigError(f"proto_rank must be in [2, {dim}], got {proto_rank}")
        basis, _ = np.linalg.qr(rng.standard_normal((dim, proto_rank)))
        weights = rng.standard_normal((n_classes, proto_rank))
        protos = _unit_rows(weights @ basis.T)
    else:
        protos = _unit_rows(rng.standard_normal((n_classes, dim)))
    gap_dir = rng.standard_normal(dim)
    gap_dir = gap_dir / np.linalg.norm(gap_dir)

    n = n_classes * per_class
    eps_img = rng.standard_normal((n, dim)) * noise_sigma
    eps_txt = rng.standard_normal((n, dim)) * noise_sigma

    base = np.repeat(protos, per_class, axis=0)
    images = base + eps_img
    texts = base + modality_gap * gap_dir + eps_txt
    if unit_norm:
        images = _unit_rows(images)
        texts = _unit_rows(texts)

    images = _quantize_f32(images)
    texts = _quantize_f32(texts)
    attrs = {c: _quantize_f32(protos[c : c + 1])[0] for c in range(n_classes)}
    labels = np.repeat(np.arange(n_classes), per_class)
    return make_corpus(images, texts, labels, attrs, name=name)
