"""Cluster likelihood models.

A model scores an unordered collection of payloads by its marginal likelihood
with cluster parameters integrated out.  Models never see ``Cluster`` objects
directly: they are handed a *store* (built once per dataset with
:meth:`LikelihoodModel.make_store`) and lists of member ids.  The
:class:`LikelihoodCache` binds a model to a store and memoises per cluster.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import Counter
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .core import Cluster, DataId

LOG_2PI = math.log(2 * math.pi)


class LikelihoodModel:
    """Base class.  Subclasses implement ``make_store`` and ``log_marginal_many``."""

    model_id: str = "abstract"

    def make_store(self, payloads: Sequence[Any]) -> Any:
        raise NotImplementedError

    def log_marginal_many(self, store: Any, clusters: Sequence[Sequence[DataId]]) -> np.ndarray:
        raise NotImplementedError

    def log_marginal(self, store: Any, members: Sequence[DataId]) -> float:
        if len(members) == 0:
            return 0.0
        return float(self.log_marginal_many(store, [members])[0])

    def __repr__(self) -> str:
        return self.model_id


class UnitModel(LikelihoodModel):
    """log p(c) = 0 for every cluster; isolates the prior in tests."""

    model_id = "unit"

    def make_store(self, payloads):
        return len(payloads)

    def log_marginal_many(self, store, clusters):
        return np.zeros(len(clusters))


class NigGaussianModel(LikelihoodModel):
    """Gaussian clusters with a Normal-inverse-Gamma prior on each dimension.

    Per dimension: sigma^2 ~ InvGamma(a, b) (shape/rate), mu | sigma^2 ~ N(mu0, sigma^2/lam).
    Dimensions are independent, so the marginal is a sum over dimensions.
    """

    def __init__(self, mu0: float | Sequence[float] = 0.0, lam: float = 1.0,
                 a: float = 1.0, b: float = 1.0, dims: Optional[int] = None):
        if not (lam > 0 and a > 0 and b > 0):
            raise ValueError("lam, a and b must be positive")
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        if dims is not None:
            if mu0.size == 1:
                mu0 = np.full(dims, mu0[0])
            elif mu0.size != dims:
                raise ValueError("mu0 length does not match dims")
        self.mu0 = mu0
        self.lam = float(lam)
        self.a = float(a)
        self.b = float(b)
        self.dims = dims
        mu_str = ",".join(f"{v:.17g}" for v in mu0)
        self.model_id = f"nig(mu0=[{mu_str}],lambda={self.lam:.17g},a={self.a:.17g},b={self.b:.17g})"
        self._const = self.a * math.log(self.b) - math.lgamma(self.a) + 0.5 * math.log(self.lam)

    def make_store(self, payloads):
        x = np.asarray(payloads, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.dims is not None and x.shape[1] != self.dims:
            raise TypeError(f"expected {self.dims}-dimensional points, got {x.shape[1]}")
        if self.mu0.size not in (1, x.shape[1]):
            raise TypeError("mu0 dimensionality does not match the data")
        return np.ascontiguousarray(x)

    def log_marginal_many(self, store, clusters):
        out = np.zeros(len(clusters))
        lens = np.fromiter((len(c) for c in clusters), dtype=np.int64, count=len(clusters))
        nz = np.flatnonzero(lens)
        if nz.size == 0:
            return out
        lens_nz = lens[nz]
        idx = np.fromiter(
            (i for k in nz for i in clusters[k]), dtype=np.int64, count=int(lens_nz.sum())
        )
        x = store[idx]
        starts = np.zeros(nz.size, dtype=np.int64)
        np.cumsum(lens_nz[:-1], out=starts[1:])
        n = lens_nz.astype(float)[:, None]
        mean = np.add.reduceat(x, starts, axis=0) / n
        dev = x - np.repeat(mean, lens_nz, axis=0)
        ss = np.add.reduceat(dev * dev, starts, axis=0)
        lam_n = self.lam + n
        a_n = self.a + 0.5 * n
        b_n = self.b + 0.5 * ss + 0.5 * self.lam * n * (mean - self.mu0) ** 2 / lam_n
        per_dim = (
            self._const
            + gammaln(a_n)
            - a_n * np.log(b_n)
            - 0.5 * np.log(lam_n)
            - 0.5 * n * LOG_2PI
        )
        out[nz] = per_dim.sum(axis=1)
        return out


BOS = "<s>"
EOS = "</s>"
OTHER = "<unk>"


class DirichletBigramModel(LikelihoodModel):
    """Character bigram model with a Dirichlet prior on each history's next-char distribution.

    Names are framed as BOS c1 ... cn EOS.  Transition counts are pooled over
    every name in the cluster and scored as a Dirichlet-multinomial per history.
    """

    def __init__(self, alphabet: Sequence[str], pseudo_counts: np.ndarray,
                 rescale_c: float = 1.0, casefold: bool = True):
        symbols = list(alphabet)
        for special in (OTHER, BOS, EOS):
            if special not in symbols:
                symbols.append(special)
        if len(set(symbols)) != len(symbols):
            raise ValueError("alphabet contains duplicates")
        pc = np.asarray(pseudo_counts, dtype=float)
        size = len(symbols)
        if pc.shape != (size, size):
            raise ValueError(f"pseudo_counts must have shape {(size, size)}, got {pc.shape}")
        if not np.all(pc > 0):
            raise ValueError("all pseudo-counts must be positive")
        if not (0 < rescale_c <= 1):
            raise ValueError("rescale_c must lie in (0, 1]")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        self.pseudo_counts = pc
        self.rescale_c = float(rescale_c)
        self.casefold = casefold
        self._log_alpha_gamma = gammaln(pc)
        self._row_tot = pc.sum(axis=1)
        digest = hashlib.sha1(
            "\x00".join(symbols).encode() + pc.tobytes() + bytes([casefold])
        ).hexdigest()[:12]
        self.model_id = f"bigram(n_symbols={size},c={self.rescale_c:.6g},h={digest})"

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, name: str) -> np.ndarray:
        """Transition codes ``h * size + i`` for a framed name."""
        if self.casefold:
            name = name.casefold()
        other = self.index[OTHER]
        seq = [self.index[BOS]] + [self.index.get(ch, other) for ch in name] + [self.index[EOS]]
        seq = np.asarray(seq, dtype=np.int64)
        return seq[:-1] * self.size + seq[1:]

    def make_store(self, payloads):
        store = []
        for p in payloads:
            if isinstance(p, str):
                name = p
            else:
                try:
                    name = p["name"]
                except (KeyError, TypeError):
                    raise TypeError("bigram model needs a 'name' attribute on every payload") from None
            if not isinstance(name, str) or not name:
                raise TypeError("name must be a non-empty string")
            store.append(self.encode(name))
        return store

    def _score_codes(self, codes: np.ndarray) -> float:
        pairs, counts = np.unique(codes, return_counts=True)
        h = pairs // self.size
        i = pairs % self.size
        alpha = self.pseudo_counts[h, i]
        ll = float(np.sum(gammaln(alpha + counts) - self._log_alpha_gamma[h, i]))
        n_h = np.bincount(h, weights=counts, minlength=self.size)
        hist = np.flatnonzero(n_h)
        a_h = self._row_tot[hist]
        ll += float(np.sum(gammaln(a_h) - gammaln(a_h + n_h[hist])))
        return ll

    def log_marginal_many(self, store, clusters):
        out = np.zeros(len(clusters))
        for k, members in enumerate(clusters):
            if len(members):
                out[k] = self._score_codes(np.concatenate([store[i] for i in members]))
        return out


def fit_bigram_pseudocounts(corpus: Sequence[str], rescale_c: float = 1.0,
                            alphabet: Optional[Sequence[str]] = None,
                            casefold: bool = True) -> DirichletBigramModel:
    """Plus-one smoothed transition counts, scaled by ``rescale_c``.

    Without an explicit alphabet, every character seen in the corpus is used.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if not (0 < rescale_c <= 1):
        raise ValueError("rescale_c must lie in (0, 1]")
    names = [s.casefold() if casefold else s for s in corpus]
    if alphabet is None:
        alphabet = sorted({ch for s in names for ch in s})
    symbols = list(alphabet) + [s for s in (OTHER, BOS, EOS) if s not in alphabet]
    index = {s: i for i, s in enumerate(symbols)}
    counts = np.zeros((len(symbols), len(symbols)))
    other = index[OTHER]
    for s in names:
        seq = [index[BOS]] + [index.get(ch, other) for ch in s] + [index[EOS]]
        for h, i in zip(seq[:-1], seq[1:]):
            counts[h, i] += 1
    return DirichletBigramModel(symbols, rescale_c * (1.0 + counts), rescale_c, casefold)


class ScaledModel(LikelihoodModel):
    """Adds ``|c| * log_scale_per_point + log_scale_per_cluster`` to every non-empty cluster.

    The per-cluster constant is the likelihood-side equivalent of multiplying
    the concentration by ``exp(log_scale_per_cluster)``.  The per-point term
    multiplies every partition of a fixed dataset by the same factor.
    """

    def __init__(self, inner: LikelihoodModel, log_scale_per_point: float = 0.0,
                 log_scale_per_cluster: float = 0.0):
        self.inner = inner
        self.log_scale_per_point = float(log_scale_per_point)
        self.log_scale_per_cluster = float(log_scale_per_cluster)
        self.model_id = (
            f"scaled({inner.model_id},point={self.log_scale_per_point:.17g},"
            f"cluster={self.log_scale_per_cluster:.17g})"
        )

    def make_store(self, payloads):
        return self.inner.make_store(payloads)

    def log_marginal_many(self, store, clusters):
        base = self.inner.log_marginal_many(store, clusters)
        sizes = np.fromiter((len(c) for c in clusters), dtype=float, count=len(clusters))
        return base + sizes * self.log_scale_per_point + (sizes > 0) * self.log_scale_per_cluster


def alpha_equivalent_scale(alpha: float, target_alpha: float) -> float:
    """Per-cluster log scale that makes a run at ``alpha`` behave like ``target_alpha``."""
    return math.log(target_alpha) - math.log(alpha)


def fit_nig_evidence(clusters: Iterable[np.ndarray], mu0: float = 0.0) -> NigGaussianModel:
    """Choose (lambda, a, b) maximising the summed marginal likelihood of labelled clusters."""
    from scipy.optimize import minimize

    arrays = [np.atleast_2d(np.asarray(c, dtype=float)) for c in clusters]
    store = np.concatenate(arrays)
    members, start = [], 0
    for arr in arrays:
        members.append(range(start, start + len(arr)))
        start += len(arr)

    def neg(theta):
        lam, a, b = np.exp(theta)
        model = NigGaussianModel(mu0, lam, a, b)
        return -float(model.log_marginal_many(store, members).sum())

    res = minimize(neg, np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 4000})
    lam, a, b = np.exp(res.x)
    return NigGaussianModel(mu0, lam, a, b)


class LikelihoodCache:
    """Memoised cluster scorer for one model over one dataset.

    ``misses`` counts underlying model evaluations and is the single source of
    truth for evaluation budgets.  Dict reads and writes are atomic in CPython,
    so concurrent lookups are safe; a racing double insert stores the same value.
    """

    def __init__(self, model: LikelihoodModel, store: Any, maxsize: Optional[int] = None):
        self.model = model
        self.store = store
        self.maxsize = maxsize
        self._table: dict[Cluster, float] = {}
        self._lock = threading.Lock()
        self.misses = 0
        self.hits = 0

    @classmethod
    def for_payloads(cls, model: LikelihoodModel, payloads: Sequence[Any], **kw) -> "LikelihoodCache":
        return cls(model, model.make_store(payloads), **kw)

    @property
    def model_id(self) -> str:
        return self.model.model_id

    def __len__(self) -> int:
        return len(self._table)

    def _insert(self, clusters, values):
        with self._lock:
            if self.maxsize is not None and len(self._table) + len(clusters) > self.maxsize:
                self._table.clear()
            self.misses += len(clusters)
            for c, v in zip(clusters, values):
                self._table[c] = v

    def log_marginal(self, cluster: Optional[Cluster]) -> float:
        if cluster is None:
            return 0.0
        v = self._table.get(cluster)
        if v is not None:
            self.hits += 1
            return v
        v = float(self.model.log_marginal_many(self.store, [cluster.members])[0])
        self._insert([cluster], [v])
        return v

    def log_marginals(self, clusters: Sequence[Cluster]) -> np.ndarray:
        """Batch lookup; all misses go to the model in one call."""
        out = np.empty(len(clusters))
        table = self._table
        miss_pos: list[int] = []
        miss_clusters: list[Cluster] = []
        pending: dict[Cluster, int] = {}
        for k, c in enumerate(clusters):
            v = table.get(c)
            if v is None:
                if c in pending:
                    miss_pos.append(k)
                    continue
                pending[c] = len(miss_clusters)
                miss_clusters.append(c)
                miss_pos.append(k)
            else:
                out[k] = v
        self.hits += len(clusters) - len(miss_pos)
        if miss_clusters:
            vals = self.model.log_marginal_many(self.store, [c.members for c in miss_clusters])
            self._insert(miss_clusters, vals.tolist())
            for k in miss_pos:
                out[k] = vals[pending[clusters[k]]]
        return out

    def log_predictive(self, x: DataId, cluster: Optional[Cluster]) -> float:
        """log p(x | cluster) = log p(cluster + x) - log p(cluster)."""
        if cluster is None:
            return self.log_marginal(Cluster.singleton(x))
        if x in cluster:
            raise ValueError(f"{x} is already a member of {cluster}")
        return self.log_marginal(cluster.add(x)) - self.log_marginal(cluster)

    def counts(self) -> Counter:
        return Counter(misses=self.misses, hits=self.hits)


def log_marginal(model: LikelihoodModel, cluster: Optional[Cluster], payload_store: Any) -> float:
    if cluster is None:
        return 0.0
    return model.log_marginal(payload_store, cluster.members)


def log_predictive(model: LikelihoodModel, x: DataId, cluster: Optional[Cluster],
                   payload_store: Any) -> float:
    if cluster is None:
        return model.log_marginal(payload_store, [x])
    if x in cluster:
        raise ValueError(f"{x} is already a member of {cluster}")
    return log_marginal(model, cluster.add(x), payload_store) - log_marginal(model, cluster, payload_store)


def model_from_config(cfg: dict, corpus: Optional[Sequence[str]] = None) -> LikelihoodModel:
    """Build a model from a config mapping (see the README for keys)."""
    kind = cfg.get("kind", "nig")
    if kind == "nig":
        model: LikelihoodModel = NigGaussianModel(
            cfg.get("mu0", 0.0), cfg.get("lambda", 1.0), cfg.get("a", 1.0), cfg.get("b", 1.0),
            cfg.get("dims"),
        )
    elif kind == "bigram":
        if corpus is None:
            path = cfg.get("corpus_path")
            if path is None:
                raise ValueError("bigram model needs 'corpus_path'")
            with open(path, encoding="utf-8") as fh:
                corpus = [line.rstrip("\n") for line in fh if line.strip()]
        model = fit_bigram_pseudocounts(
            corpus, cfg.get("rescale_c", 1.0), cfg.get("alphabet"), cfg.get("casefold", True)
        )
    elif kind == "unit":
        model = UnitModel()
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    point = cfg.get("log_scale_per_point", 0.0)
    per_cluster = cfg.get("log_scale_per_cluster", 0.0)
    if point or per_cluster:
        model = ScaledModel(model, point, per_cluster)
    return model
