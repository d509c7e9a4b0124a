"""Synthetic generators, record types and stream loading.

Points files are comma-separated with a header ``id,x1,...,xd[,gold]``::

    id,x1,x2,gold
    0,-12.5,3.25,4
    1,-11.9,2.75,4

Fragment files hold one JSON object per line::

    {"id": "f17", "attributes": {"name": "Ada Lovelace"}, "gold_entity": "Q7259"}
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .core import Partition


@dataclass
class PointRecord:
    id: object
    payload: np.ndarray
    gold_label: Optional[int] = None

    def __post_init__(self):
        self.payload = np.asarray(self.payload, dtype=float)


@dataclass
class FragmentRecord:
    id: object
    attributes: dict
    gold_entity: Optional[str] = None

    def __post_init__(self):
        if "name" in self.attributes and not str(self.attributes["name"]):
            raise ValueError(f"fragment {self.id!r} has an empty name")

    @property
    def payload(self) -> dict:
        return self.attributes

    @property
    def gold_label(self) -> Optional[str]:
        return self.gold_entity


Record = Union[PointRecord, FragmentRecord]


@dataclass(frozen=True)
class GmmGenConfig:
    alpha_dp: float = 20.0
    K: int = 100
    n: int = 700
    n_groups: int = 16
    a: float = 2.0
    b: float = 0.5
    mu: float = 0.0
    lam: float = 0.0002
    perturb_divisor: float = 125.0
    dims: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha_dp", "a", "b", "lam", "perturb_divisor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("K", "n", "n_groups", "dims"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def stick_breaking_sizes(alpha_dp: float, K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Cluster sizes from a K-stick truncated stick-breaking draw (zeros kept)."""
    if K < 1 or n < 1:
        raise ValueError("K and n must be positive")
    v = rng.beta(1.0, alpha_dp, size=K)
    v[-1] = 1.0  # close the truncation so the weights sum to one
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v[:-1])])
    pi = v * remaining
    return rng.multinomial(n, pi / pi.sum())


def gen_gmm(cfg: GmmGenConfig = GmmGenConfig()) -> list[PointRecord]:
    """Hierarchical Gaussian mixture: group centres, perturbed cluster means, isotropic noise."""
    return sample_gmm(cfg)[0]


def sample_gmm(cfg: GmmGenConfig = GmmGenConfig()) -> tuple[list[PointRecord], dict]:
    """Like :func:`gen_gmm`, also returning the latent draws keyed by gold label.

    The second value has ``centres`` (n_groups x dims), and per gold label
    ``means``, ``variances`` and ``groups``.
    """
    rng = np.random.default_rng(cfg.seed)
    sizes = stick_breaking_sizes(cfg.alpha_dp, cfg.K, cfg.n, rng)
    centres = rng.normal(cfg.mu, 1.0 / np.sqrt(cfg.lam), size=(cfg.n_groups, cfg.dims))
    precision = rng.gamma(cfg.a, 1.0 / cfg.b, size=cfg.K)
    sigma2 = 1.0 / precision
    group = rng.integers(cfg.n_groups, size=cfg.K)
    means = centres[group] + rng.normal(size=(cfg.K, cfg.dims)) * np.sqrt(
        sigma2 / (cfg.perturb_divisor * cfg.lam))[:, None]
    records: list[PointRecord] = []
    label = 0
    for k in range(cfg.K):
        if sizes[k] == 0:
            continue
        pts = means[k] + rng.normal(size=(sizes[k], cfg.dims)) * np.sqrt(sigma2[k])
        for p in pts:
            records.append(PointRecord(len(records), p, label))
        label += 1
    order = rng.permutation(len(records))
    shuffled = [PointRecord(i, records[j].payload, records[j].gold_label) for i, j in enumerate(order)]
    used = sizes > 0
    latent = {"centres": centres, "means": means[used], "variances": sigma2[used], "groups": group[used]}
    return shuffled, latent


def gen_circles(seed: int = 0, n_clusters: int = 15, radius: float = 0.6, half_width: float = 5.0,
                size_range: tuple[int, int] = (10, 30)) -> list[PointRecord]:
    """Points scattered on circles around uniformly placed centres."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-half_width, half_width, size=(n_clusters, 2))
    sizes = rng.integers(size_range[0], size_range[1] + 1, size=n_clusters)
    records: list[PointRecord] = []
    for k in range(n_clusters):
        theta = rng.uniform(0.0, 2 * np.pi, size=sizes[k])
        pts = centres[k] + radius * np.column_stack([np.cos(theta), np.sin(theta)])
        for p in pts:
            records.append(PointRecord(len(records), p, k))
    order = rng.permutation(len(records))
    return [PointRecord(i, records[j].payload, records[j].gold_label) for i, j in enumerate(order)]


def gold_partition(records: Sequence[Record]) -> Optional[Partition]:
    """Gold clustering over positional ids, or None if any record lacks a label."""
    labels = [r.gold_label for r in records]
    if any(g is None for g in labels):
        return None
    return Partition.from_labels(labels)


def write_points(records: Sequence[PointRecord], path_or_buf) -> None:
    with _open_w(path_or_buf) as fh:
        dims = len(records[0].payload) if records else 0
        with_gold = bool(records) and all(r.gold_label is not None for r in records)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"x{d + 1}" for d in range(dims)] + (["gold"] if with_gold else []))
        for r in records:
            row = [r.id] + [repr(float(v)) for v in r.payload]
            if with_gold:
                row.append(r.gold_label)
            w.writerow(row)


def write_fragments(records: Sequence[FragmentRecord], path_or_buf) -> None:
    with _open_w(path_or_buf) as fh:
        for r in records:
            rec = {"id": r.id, "attributes": r.attributes}
            if r.gold_entity is not None:
                rec["gold_entity"] = r.gold_entity
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class _open_w:
    def __init__(self, target):
        self.target = target
        self.fh = None

    def __enter__(self):
        if isinstance(self.target, (str, Path)):
            self.fh = open(self.target, "w", newline="")
            return self.fh
        return self.target

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


class DataFormatError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def read_points(lines: Iterable[str]) -> list[PointRecord]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return []
    header = [h.strip() for h in header]
    if not header or header[0] != "id":
        raise DataFormatError("header must start with 'id'", 1)
    has_gold = header[-1] == "gold"
    dims = len(header) - 1 - int(has_gold)
    if dims < 1:
        raise DataFormatError("no coordinate columns", 1)
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            payload = [float(v) for v in row[1:1 + dims]]
            gold = int(row[-1]) if has_gold else None
        except ValueError as exc:
            raise DataFormatError(str(exc), lineno) from None
        out.append(PointRecord(_parse_id(row[0]), payload, gold))
    return out


def read_fragments(lines: Iterable[str], require_name: bool = False) -> list[FragmentRecord]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(exc.msg, lineno) from None
        if not isinstance(rec, dict) or "id" not in rec or not isinstance(rec.get("attributes"), dict):
            raise DataFormatError("record needs 'id' and an 'attributes' object", lineno)
        if require_name and not rec["attributes"].get("name"):
            raise DataFormatError(f"fragment {rec['id']!r} has no 'name' attribute", lineno)
        try:
            out.append(FragmentRecord(rec["id"], rec["attributes"], rec.get("gold_entity")))
        except ValueError as exc:
            raise DataFormatError(str(exc), lineno) from None
    return out


@dataclass
class Stream:
    """Records in arrival order; record ``k`` has positional id ``k``."""

    records: list
    original_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def payloads(self) -> list:
        return [r.payload for r in self.records]

    def gold(self) -> Optional[Partition]:
        return gold_partition(self.records)


def shuffle_records(records: Sequence[Record], seed: Optional[int]) -> list:
    if seed is None:
        return list(records)
    order = np.random.default_rng(seed).permutation(len(records))
    return [records[k] for k in order]


def load_stream(path, kind: str = "points", shuffle_seed: Optional[int] = None,
                require_name: bool = False) -> Stream:
    """Read a dataset, optionally shuffle it, and reassign ids to arrival order."""
    text = Path(path).read_text() if not isinstance(path, io.TextIOBase) else path.read()
    lines = text.splitlines()
    if kind == "points":
        records = read_points(lines)
    elif kind == "fragments":
        records = read_fragments(lines, require_name=require_name)
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    return make_stream(records, shuffle_seed)


def make_stream(records: Sequence[Record], shuffle_seed: Optional[int] = None) -> Stream:
    ordered = shuffle_records(records, shuffle_seed)
    original = [r.id for r in ordered]
    if len(set(map(str, original))) != len(original):
        raise DataFormatError("duplicate record ids")
    renum = []
    for k, r in enumerate(ordered):
        if isinstance(r, PointRecord):
            renum.append(PointRecord(k, r.payload, r.gold_label))
        else:
            renum.append(FragmentRecord(k, r.attributes, r.gold_entity))
    return Stream(renum, original)
