"""Trial data model: clusters, datasets, weights, feature summaries, CSV I/O."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyFile,
    InconsistentClusterConstant,
    IndexOutOfRange,
    InvalidDataset,
    MissingColumn,
    NonBinary,
    NonPositiveWeight,
)
from .expr import Expression


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Cluster:
    """One randomized cluster.

    ``indiv_covariates`` is an ``(N, d_X)`` matrix; ``cluster_covariates`` is
    stored once per cluster. Arrays are copied and frozen on construction.
    """

    id: str
    cluster_covariates: np.ndarray
    indiv_covariates: np.ndarray
    assignment: int
    uptake: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        v = np.array(self.cluster_covariates, dtype=float).reshape(-1)
        x = np.array(self.indiv_covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        d = np.array(self.uptake)
        y = np.array(self.outcome, dtype=float).reshape(-1)
        n = len(y)
        if n < 1:
            raise InvalidDataset(f"cluster {self.id!r} is empty")
        if x.shape[0] != n or d.shape != (n,):
            raise InvalidDataset(
                f"cluster {self.id!r}: rows(X)={x.shape[0]}, len(D)={d.size}, len(Y)={n} disagree"
            )
        if self.assignment not in (0, 1):
            raise NonBinary("a", f"cluster {self.id!r} has assignment {self.assignment!r}")
        if not np.all((d == 0) | (d == 1)):
            raise NonBinary("d", f"cluster {self.id!r}")
        if not np.all(np.isfinite(y)):
            raise InvalidDataset(f"cluster {self.id!r} has non-finite outcomes")
        object.__setattr__(self, "cluster_covariates", _readonly(v))
        object.__setattr__(self, "indiv_covariates", _readonly(x))
        object.__setattr__(self, "uptake", _readonly(d.astype(np.int8)))
        object.__setattr__(self, "outcome", _readonly(y))
        object.__setattr__(self, "assignment", int(self.assignment))

    @property
    def size(self) -> int:
        return len(self.outcome)

    def same_as(self, other: "Cluster") -> bool:
        return (
            self.id == other.id
            and self.assignment == other.assignment
            and np.array_equal(self.cluster_covariates, other.cluster_covariates)
            and np.array_equal(self.indiv_covariates, other.indiv_covariates)
            and np.array_equal(self.uptake, other.uptake)
            and np.array_equal(self.outcome, other.outcome)
        )


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Ordered, immutable collection of clusters with the known assignment probability."""

    clusters: tuple[Cluster, ...]
    pi: float

    def __post_init__(self):
        clusters = tuple(self.clusters)
        object.__setattr__(self, "clusters", clusters)
        if not 0.0 < float(self.pi) < 1.0:
            raise InvalidDataset(f"pi must lie in (0, 1), got {self.pi}")
        if len(clusters) < 2:
            raise InvalidDataset("a trial needs at least 2 clusters")
        arms = {c.assignment for c in clusters}
        if arms != {0, 1}:
            raise InvalidDataset("both assignment arms must be represented")
        dx = {c.indiv_covariates.shape[1] for c in clusters}
        dv = {c.cluster_covariates.shape[0] for c in clusters}
        if len(dx) != 1 or len(dv) != 1:
            raise InvalidDataset("covariate dimensions differ across clusters")

    @property
    def K(self) -> int:
        return len(self.clusters)

    @property
    def d_x(self) -> int:
        return self.clusters[0].indiv_covariates.shape[1]

    @property
    def d_v(self) -> int:
        return self.clusters[0].cluster_covariates.shape[0]

    @cached_property
    def sizes(self) -> np.ndarray:
        return _readonly(np.array([c.size for c in self.clusters], dtype=np.int64))

    @cached_property
    def assignments(self) -> np.ndarray:
        return _readonly(np.array([c.assignment for c in self.clusters], dtype=np.int8))

    def resample(self, indices: Sequence[int]) -> "TrialDataset":
        """Dataset made of the clusters at ``indices`` (repeats allowed).

        Repeated clusters receive distinct ids so the result is a valid trial;
        member data are shared, not copied.
        """
        seen: dict[str, int] = {}
        out = []
        for i in indices:
            c = self.clusters[int(i)]
            k = seen.get(c.id, 0)
            seen[c.id] = k + 1
            out.append(c if k == 0 else _relabel(c, f"{c.id}#{k}"))
        return TrialDataset(tuple(out), self.pi)

    def same_as(self, other: "TrialDataset") -> bool:
        return (
            self.pi == other.pi
            and self.K == other.K
            and all(a.same_as(b) for a, b in zip(self.clusters, other.clusters))
        )


def _relabel(c: Cluster, new_id: str) -> Cluster:
    clone = object.__new__(Cluster)
    for name in ("cluster_covariates", "indiv_covariates", "assignment", "uptake", "outcome"):
        object.__setattr__(clone, name, getattr(c, name))
    object.__setattr__(clone, "id", new_id)
    return clone


# --- weights ----------------------------------------------------------------

@dataclass(frozen=True)
class WeightSpec:
    """Cluster weight W as a function of (N, V).

    ``kind`` is ``cluster_average`` (W=1), ``individual_average`` (W=N) or
    ``custom``; custom weights take ``custom_fn(N, V)`` or an expression over
    ``N`` and ``v_1..v_dV``.
    """

    kind: str = "cluster_average"
    custom_fn: Callable[[int, np.ndarray], float] | None = None
    expr: str | None = None

    def __post_init__(self):
        if self.kind not in ("cluster_average", "individual_average", "custom"):
            raise ConfigError(f"unknown weight kind {self.kind!r}")
        if self.kind == "custom" and self.custom_fn is None:
            if self.expr is None:
                raise ConfigError("custom weight needs custom_fn or expr")
            parsed = Expression(self.expr)
            bad = [n for n in parsed.names if n != "N" and not re.fullmatch(r"v_\d+", n)]
            if bad:
                raise ConfigError(f"weight expression may only use N and v_k, found {bad}")

            def fn(N, V, _e=parsed):
                env = {"N": float(N)}
                env.update({f"v_{k + 1}": float(x) for k, x in enumerate(np.atleast_1d(V))})
                return float(_e(env))

            object.__setattr__(self, "custom_fn", fn)

    @classmethod
    def parse(cls, text: str) -> "WeightSpec":
        text = text.strip()
        if text in ("cluster", "cluster_average"):
            return cls("cluster_average")
        if text in ("individual", "individual_average"):
            return cls("individual_average")
        if text.startswith("custom:"):
            return cls("custom", expr=text[len("custom:"):])
        raise ConfigError(f"cannot parse weight {text!r}")

    def describe(self) -> str:
        if self.kind == "cluster_average":
            return "cluster"
        if self.kind == "individual_average":
            return "individual"
        return f"custom:{self.expr}" if self.expr else "custom:<callable>"


def eval_weight(spec: WeightSpec, N: int, V: Iterable[float] = ()) -> float:
    if N < 1:
        raise InvalidDataset(f"cluster size must be positive, got {N}")
    if spec.kind == "cluster_average":
        return 1.0
    if spec.kind == "individual_average":
        return float(N)
    w = float(spec.custom_fn(N, np.asarray(V, dtype=float)))
    if not (w > 0.0) or not math.isfinite(w):
        raise NonPositiveWeight(f"custom weight returned {w} for N={N}")
    return w


# --- features ---------------------------------------------------------------

FEATURE_MODES = ("own", "own_plus_peer_mean")


@dataclass(frozen=True)
class FeatureSummary:
    """How the variable-length X_i is summarized into a per-individual S_ij."""

    mode: str = "own"

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigError(f"feature summary must be one of {FEATURE_MODES}, got {self.mode!r}")


def feature_names(d_x: int, d_v: int, summary: FeatureSummary) -> tuple[str, ...]:
    names = [f"x_{k + 1}" for k in range(d_x)]
    if summary.mode == "own_plus_peer_mean":
        names += [f"xbar_{k + 1}" for k in range(d_x)]
    names += [f"v_{k + 1}" for k in range(d_v)]
    return tuple(names + ["N"])


def cluster_features(cluster: Cluster, summary: FeatureSummary) -> np.ndarray:
    """All rows S_ij ⊕ V ⊕ N of one cluster, shape ``(N, q)``."""
    x = cluster.indiv_covariates
    n = cluster.size
    blocks = [x]
    if summary.mode == "own_plus_peer_mean":
        if n == 1:
            # leave-one-out set is empty: zero-fill
            blocks.append(np.zeros_like(x))
        else:
            blocks.append((x.sum(axis=0, keepdims=True) - x) / (n - 1))
    blocks.append(np.broadcast_to(cluster.cluster_covariates, (n, cluster.cluster_covariates.size)))
    blocks.append(np.full((n, 1), float(n)))
    return np.hstack(blocks)


def build_features(cluster: Cluster, summary: FeatureSummary, j: int) -> np.ndarray:
    """Feature vector of individual ``j`` (1-based) in ``cluster``."""
    if not 1 <= j <= cluster.size:
        raise IndexOutOfRange(f"individual index {j} outside 1..{cluster.size}")
    return cluster_features(cluster, summary)[j - 1]


# Feature-surface transforms applied to the base feature matrix before the
# nuisance design is built. Keyed by name so specs stay serializable.
FEATURE_TRANSFORMS: dict[str, Callable[[np.ndarray, tuple[str, ...]], np.ndarray]] = {
    "identity": lambda feats, names: feats,
}


def register_transform(name: str, fn: Callable[[np.ndarray, tuple[str, ...]], np.ndarray]) -> None:
    FEATURE_TRANSFORMS[name] = fn


@dataclass(frozen=True, eq=False)
class IndividualData:
    """Flat, individual-level view of a dataset used by all estimators."""

    cluster: np.ndarray  # cluster index 0..K-1 per individual
    A: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    features: np.ndarray
    names: tuple[str, ...]
    W: np.ndarray  # per cluster
    N: np.ndarray  # per cluster
    pi: float
    wn: np.ndarray = field(init=False)  # W_i / N_i per individual

    def __post_init__(self):
        object.__setattr__(self, "wn", self.W[self.cluster] / self.N[self.cluster])

    @property
    def K(self) -> int:
        return len(self.W)

    @property
    def n(self) -> int:
        return len(self.Y)

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.names.index(name)]

    def cluster_sum(self, values: np.ndarray) -> np.ndarray:
        """Per-cluster (W/N)·Σ_j values, in cluster order."""
        return np.bincount(self.cluster, weights=self.wn * values, minlength=self.K)

    @cached_property
    def cluster_rows(self) -> tuple[np.ndarray, ...]:
        order = np.argsort(self.cluster, kind="stable")
        bounds = np.cumsum(np.bincount(self.cluster, minlength=self.K))[:-1]
        return tuple(np.split(order, bounds))

    def resample(self, indices: Sequence[int]) -> "IndividualData":
        """Clusters at ``indices`` (repeats allowed), each keeping all its members."""
        indices = np.asarray(indices, dtype=np.int64)
        rows = np.concatenate([self.cluster_rows[i] for i in indices])
        sizes = np.array([len(self.cluster_rows[i]) for i in indices])
        return IndividualData(
            cluster=np.repeat(np.arange(len(indices)), sizes),
            A=self.A[rows],
            D=self.D[rows],
            Y=self.Y[rows],
            features=self.features[rows],
            names=self.names,
            W=self.W[indices],
            N=self.N[indices],
            pi=self.pi,
        )

    def subset_clusters(self, mask: np.ndarray) -> "IndividualData":
        """Rows belonging to clusters where ``mask`` (length K) is true; clusters re-indexed."""
        keep = np.flatnonzero(mask)
        remap = np.full(self.K, -1)
        remap[keep] = np.arange(len(keep))
        rows = mask[self.cluster]
        return IndividualData(
            cluster=remap[self.cluster[rows]],
            A=self.A[rows],
            D=self.D[rows],
            Y=self.Y[rows],
            features=self.features[rows],
            names=self.names,
            W=self.W[keep],
            N=self.N[keep],
            pi=self.pi,
        )


def flatten(
    dataset: TrialDataset,
    summary: FeatureSummary = FeatureSummary(),
    weight: WeightSpec = WeightSpec(),
) -> IndividualData:
    clusters = dataset.clusters
    sizes = dataset.sizes
    feats = np.vstack([cluster_features(c, summary) for c in clusters])
    W = np.array([eval_weight(weight, c.size, c.cluster_covariates) for c in clusters])
    return IndividualData(
        cluster=np.repeat(np.arange(len(clusters)), sizes),
        A=np.repeat(dataset.assignments.astype(float), sizes),
        D=np.concatenate([c.uptake for c in clusters]).astype(float),
        Y=np.concatenate([c.outcome for c in clusters]),
        features=feats,
        names=feature_names(dataset.d_x, dataset.d_v, summary),
        W=W,
        N=sizes.astype(float),
        pi=float(dataset.pi),
    )


# --- CSV ingestion ----------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column map for :func:`load_csv`.

    ``x`` and ``v`` list covariate columns; when left as ``None`` every column
    named ``x_<k>`` / ``v_<k>`` is used, ordered by ``k``.
    """

    cluster_id: str = "cluster_id"
    a: str = "a"
    d: str = "d"
    y: str = "y"
    x: tuple[str, ...] | None = None
    v: tuple[str, ...] | None = None

    @classmethod
    def from_mapping(cls, m: Mapping[str, object]) -> "CsvSchema":
        kw = dict(m)
        for key in ("x", "v"):
            if isinstance(kw.get(key), str):
                kw[key] = tuple(s.strip() for s in str(kw[key]).split(",") if s.strip())
            elif kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _numbered(header: Sequence[str], prefix: str) -> tuple[str, ...]:
    pat = re.compile(rf"{prefix}_(\d+)$")
    found = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
    return tuple(h for _, h in sorted(found))


def _parse_binary(value: str, column: str, line: int) -> int:
    try:
        f = float(value)
    except ValueError:
        raise NonBinary(column, f"line {line}: {value!r}") from None
    if f not in (0.0, 1.0):
        raise NonBinary(column, f"line {line}: {value!r}")
    return int(f)


def load_csv(path: str | Path, schema: CsvSchema | None = None, pi: float = 0.5) -> TrialDataset:
    """Read a trial CSV into a validated :class:`TrialDataset`.

    Rows are grouped by cluster id in order of first appearance; row order
    within a cluster is preserved.
    """
    return TrialDataset(load_clusters(path, schema), pi)


def load_clusters(path: str | Path, schema: CsvSchema | None = None) -> tuple[Cluster, ...]:
    """Row-level validation and grouping of a trial CSV, without trial-level checks."""
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise EmptyFile(f"{path} has no header")
        header = [h.strip() for h in header]
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyFile(f"{path} has no data rows")
    xcols = schema.x if schema.x is not None else _numbered(header, "x")
    vcols = schema.v if schema.v is not None else _numbered(header, "v")
    needed = [schema.cluster_id, schema.a, schema.d, schema.y, *xcols, *vcols]
    missing = [c for c in needed if c not in header]
    if missing:
        raise MissingColumn(f"missing columns: {missing}")
    pos = {h: i for i, h in enumerate(header)}

    groups: dict[str, list] = {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) < len(header):
            raise InvalidDataset(f"line {lineno}: expected {len(header)} fields, got {len(r)}")
        cid = r[pos[schema.cluster_id]].strip()
        a = _parse_binary(r[pos[schema.a]], "a", lineno)
        d = _parse_binary(r[pos[schema.d]], "d", lineno)
        try:
            y = float(r[pos[schema.y]])
            x = [float(r[pos[c]]) for c in xcols]
            v = [float(r[pos[c]]) for c in vcols]
        except ValueError as exc:
            raise InvalidDataset(f"line {lineno}: {exc}") from None
        if not math.isfinite(y):
            raise InvalidDataset(f"line {lineno}: outcome must be finite")
        g = groups.get(cid)
        if g is None:
            groups[cid] = [a, v, [x], [d], [y]]
        else:
            if g[0] != a:
                raise InconsistentClusterConstant(f"assignment varies within cluster {cid!r} (line {lineno})")
            if g[1] != v:
                raise InconsistentClusterConstant(
                    f"cluster covariates vary within cluster {cid!r} (line {lineno})"
                )
            g[2].append(x)
            g[3].append(d)
            g[4].append(y)

    return tuple(
        Cluster(
            id=cid,
            cluster_covariates=np.array(v, dtype=float),
            indiv_covariates=np.array(xs, dtype=float).reshape(len(ys), len(xcols)),
            assignment=a,
            uptake=np.array(ds),
            outcome=np.array(ys, dtype=float),
        )
        for cid, (a, v, xs, ds, ys) in groups.items()
    )


def write_csv(dataset: TrialDataset, path: str | Path) -> None:
    """Write ``dataset`` in the canonical column layout accepted by :func:`load_csv`."""
    header = ["cluster_id", "a", "d", "y"]
    header += [f"x_{k + 1}" for k in range(dataset.d_x)]
    header += [f"v_{k + 1}" for k in range(dataset.d_v)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in dataset.clusters:
            v = [repr(float(t)) for t in c.cluster_covariates]
            for j in range(c.size):
                w.writerow(
                    [c.id, c.assignment, int(c.uptake[j]), repr(float(c.outcome[j]))]
                    + [repr(float(t)) for t in c.indiv_covariates[j]]
                    + v
                )
