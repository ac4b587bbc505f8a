"""Graph data model, dataset bundle loading and the CSR primitives.

Everything here works in double precision.  A :class:`Graph` holds the
unweighted, symmetric adjacency ``A`` without self loops; propagation
operators (``Ã`` or a sparsified diffusion matrix) are plain
:class:`SparseMatrix` values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SPLIT_TAGS = ("none", "train", "val", "test")
SPLIT_CODES = {tag: code for code, tag in enumerate(SPLIT_TAGS)}


class GraphFormatError(ValueError):
    """Raised when a dataset bundle is missing files or is malformed."""


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed sparse row matrix.

    ``col_idx`` is strictly increasing inside each row and all values are
    finite.  Instances are treated as immutable.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if rp.shape != (self.rows + 1,) or rp[0] != 0 or rp[-1] != len(ci):
            raise ValueError("row_ptr inconsistent with rows / nnz")
        if len(v) != len(ci):
            raise ValueError("col_idx and values differ in length")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if len(ci):
            if ci.min() < 0 or ci.max() >= self.cols:
                raise ValueError("column index out of range")
            # strictly increasing within a row: every in-row step is positive
            steps = np.diff(ci)
            row_start = np.zeros(len(ci), dtype=bool)
            row_start[rp[:-1][rp[:-1] < len(ci)]] = True
            if np.any(steps[~row_start[1:]] <= 0):
                raise ValueError("col_idx must be strictly increasing within each row")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite value in sparse matrix")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    @classmethod
    def from_scipy(cls, m: sp.spmatrix) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(
            rows=m.shape[0],
            cols=m.shape[1],
            row_ptr=m.indptr.astype(np.int64),
            col_idx=m.indices.astype(np.int64),
            values=m.data.astype(np.float64),
        )

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(
            rows=n,
            cols=n,
            row_ptr=np.arange(n + 1, dtype=np.int64),
            col_idx=np.arange(n, dtype=np.int64),
            values=np.ones(n),
        )

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=self.shape
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy().T)

    def is_symmetric(self) -> bool:
        if self.rows != self.cols:
            return False
        t = self.transpose()
        return (
            np.array_equal(t.row_ptr, self.row_ptr)
            and np.array_equal(t.col_idx, self.col_idx)
            and np.array_equal(t.values, self.values)
        )

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.to_scipy().sum(axis=1)).ravel()


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph.

    ``labels`` uses ``-1`` for unlabeled nodes and ``split`` stores codes
    from :data:`SPLIT_CODES`.  ``node_ids`` is set on induced subgraphs and
    maps each local node back to its id in the parent graph.
    """

    adjacency: SparseMatrix
    features: np.ndarray
    labels: np.ndarray | None = None
    split: np.ndarray | None = None
    num_classes: int | None = None
    node_ids: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        n = self.adjacency.rows
        if self.adjacency.cols != n:
            raise ValueError("adjacency must be square")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got {self.features.shape}")
        for name in ("labels", "split", "node_ids"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")

    @property
    def num_nodes(self) -> int:
        return self.adjacency.rows

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def mask(self, tag: str) -> np.ndarray:
        if self.split is None:
            raise ValueError("graph carries no split assignment")
        return self.split == SPLIT_CODES[tag]

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(
            self.adjacency, features, self.labels, self.split, self.num_classes, self.node_ids
        )

    def with_split(self, split: np.ndarray) -> "Graph":
        return Graph(
            self.adjacency, self.features, self.labels, split, self.num_classes, self.node_ids
        )


def adjacency_from_edges(num_nodes: int, edges: np.ndarray) -> SparseMatrix:
    """Build a 0/1 symmetric adjacency: symmetrize, dedupe, drop self loops."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise GraphFormatError("edge endpoint out of range")
    edges = edges[edges[:, 0] != edges[:, 1]]
    u = np.concatenate([edges[:, 0], edges[:, 1]])
    v = np.concatenate([edges[:, 1], edges[:, 0]])
    m = sp.csr_matrix((np.ones(len(u)), (u, v)), shape=(num_nodes, num_nodes))
    m.sum_duplicates()
    m.data[:] = 1.0
    return SparseMatrix.from_scipy(m)


def graph_from_edges(
    num_nodes: int,
    edges,
    features: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    split: np.ndarray | None = None,
) -> Graph:
    """Convenience constructor, mostly for tests and synthetic data."""
    if features is None:
        features = np.ones((num_nodes, 1))
    num_classes = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0
    if split is not None:
        split = np.asarray(split)
        if split.dtype.kind in "US":
            split = np.array([SPLIT_CODES[str(t)] for t in split])
        split = split.astype(np.int8)
    return Graph(
        adjacency_from_edges(num_nodes, np.asarray(edges, dtype=np.int64)),
        np.asarray(features, dtype=np.float64),
        labels,
        split,
        num_classes,
    )


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise GraphFormatError(f"missing file: {path}")
    with path.open() as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for ln in _read_lines(path):
        parts = ln.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"{path.name}: expected 'key<TAB>value', got {ln!r}")
        meta[parts[0].strip()] = parts[1].strip()
    for key in ("num_nodes", "num_features"):
        if key not in meta:
            raise GraphFormatError(f"{path.name}: missing key {key}")
    return meta


def load_graph_bundle(directory: str | Path) -> Graph:
    """Load a dataset bundle directory (graph/features/meta[/labels/split].tsv)."""
    d = Path(directory)
    if not d.is_dir():
        raise GraphFormatError(f"dataset directory not found: {d}")
    meta = _read_meta(d / "meta.tsv")
    try:
        n = int(meta["num_nodes"])
        f = int(meta["num_features"])
        num_classes = int(meta["num_classes"]) if "num_classes" in meta else None
    except ValueError as exc:
        raise GraphFormatError(f"meta.tsv: {exc}") from None

    edges = []
    for ln in _read_lines(d / "graph.tsv"):
        parts = ln.split("\t")
        if len(parts) < 2:
            raise GraphFormatError(f"graph.tsv: bad edge line {ln!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise GraphFormatError(f"graph.tsv: non-integer endpoint in {ln!r}") from None
    adjacency = adjacency_from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2))

    feat_lines = _read_lines(d / "features.tsv")
    if len(feat_lines) != n:
        raise GraphFormatError(f"features.tsv: expected {n} rows, got {len(feat_lines)}")
    features = np.empty((n, f))
    for i, ln in enumerate(feat_lines):
        toks = ln.split("\t")
        if len(toks) != f:
            raise GraphFormatError(f"features.tsv line {i}: expected {f} values, got {len(toks)}")
        try:
            features[i] = [float(t) for t in toks]
        except ValueError:
            raise GraphFormatError(f"features.tsv line {i}: non-numeric token") from None
    if not np.all(np.isfinite(features)):
        raise GraphFormatError("features.tsv: non-finite value")

    labels = None
    if (d / "labels.tsv").exists():
        lab_lines = _read_lines(d / "labels.tsv")
        if len(lab_lines) != n:
            raise GraphFormatError(f"labels.tsv: expected {n} rows, got {len(lab_lines)}")
        try:
            labels = np.array([int(t) for t in lab_lines], dtype=np.int64)
        except ValueError:
            raise GraphFormatError("labels.tsv: non-integer label") from None
        if labels.min() < -1:
            raise GraphFormatError("labels.tsv: labels must be >= -1")
        if num_classes is not None and labels.max() >= num_classes:
            raise GraphFormatError("labels.tsv: label exceeds num_classes")
        if num_classes is None:
            num_classes = int(labels.max()) + 1

    split = None
    if (d / "split.tsv").exists():
        split_lines = _read_lines(d / "split.tsv")
        if len(split_lines) != n:
            raise GraphFormatError(f"split.tsv: expected {n} rows, got {len(split_lines)}")
        try:
            split = np.array([SPLIT_CODES[t.strip()] for t in split_lines], dtype=np.int8)
        except KeyError as exc:
            raise GraphFormatError(f"split.tsv: unknown tag {exc}") from None

    return Graph(adjacency, features, labels, split, num_classes)


def write_graph_bundle(g: Graph, directory: str | Path) -> None:
    """Inverse of :func:`load_graph_bundle` (each undirected edge written once)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    coo = sp.triu(g.adjacency.to_scipy(), k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with (d / "graph.tsv").open("w") as fh:
        for r, c in zip(coo.row[order], coo.col[order]):
            fh.write(f"{r}\t{c}\n")
    write_matrix_tsv(g.features, d / "features.tsv")
    with (d / "meta.tsv").open("w") as fh:
        fh.write(f"num_nodes\t{g.num_nodes}\nnum_features\t{g.num_features}\n")
        if g.num_classes is not None:
            fh.write(f"num_classes\t{g.num_classes}\n")
    if g.labels is not None:
        (d / "labels.tsv").write_text("".join(f"{int(v)}\n" for v in g.labels))
    if g.split is not None:
        (d / "split.tsv").write_text("".join(f"{SPLIT_TAGS[int(v)]}\n" for v in g.split))


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_matrix_tsv(matrix: np.ndarray, path: str | Path) -> None:
    """Write a dense matrix in features.tsv layout (round-trips exactly)."""
    with Path(path).open("w") as fh:
        for row in np.asarray(matrix, dtype=np.float64):
            fh.write("\t".join(_fmt(v) for v in row))
            fh.write("\n")


def read_matrix_tsv(path: str | Path) -> np.ndarray:
    rows = [[float(t) for t in ln.split("\t")] for ln in _read_lines(Path(path))]
    return np.array(rows, dtype=np.float64)


def degree_vector(g: Graph) -> np.ndarray:
    """Degree of each node in ``A`` (self loops excluded)."""
    return np.diff(g.adjacency.row_ptr).astype(np.float64)


def symmetric_renormalize(g: Graph | SparseMatrix) -> SparseMatrix:
    """``Ã = D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``.

    Each value is computed once per unordered pair so the result is exactly
    symmetric.
    """
    adj = g.adjacency if isinstance(g, Graph) else g
    n = adj.rows
    a = adj.to_scipy() + sp.identity(n, format="csr")
    a = sp.csr_matrix(a)
    a.sum_duplicates()
    a.sort_indices()
    deg = np.asarray(a.sum(axis=1)).ravel()
    rows = np.repeat(np.arange(n), np.diff(a.indptr))
    lo = np.minimum(rows, a.indices)
    hi = np.maximum(rows, a.indices)
    vals = a.data / np.sqrt(deg[lo] * deg[hi])
    out = sp.csr_matrix((vals, a.indices, a.indptr), shape=(n, n))
    return SparseMatrix.from_scipy(out)


def spmm(s: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """CSR · dense product.

    Rows are reduced sequentially in stored column order, so repeated calls
    give bitwise-identical results.  Output dtype follows ``x``.
    """
    x = np.asarray(x)
    if x.ndim != 2 or s.cols != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {s.shape} @ {x.shape}")
    m = _cached_scipy(s, x.dtype)
    return np.asarray(m @ x)


_SCIPY_CACHE: dict[tuple[int, str], tuple[SparseMatrix, sp.csr_matrix]] = {}


def _cached_scipy(s: SparseMatrix, dtype) -> sp.csr_matrix:
    # operators are reused every epoch; avoid rebuilding the scipy view
    key = (id(s), np.dtype(dtype).str)
    hit = _SCIPY_CACHE.get(key)
    if hit is not None and hit[0] is s:
        return hit[1]
    if np.dtype(dtype).kind != "f":
        dtype = np.float64
    m = sp.csr_matrix(
        (s.values.astype(dtype), s.col_idx.astype(np.int32), s.row_ptr.astype(np.int32)),
        shape=s.shape,
    )
    if len(_SCIPY_CACHE) > 64:
        _SCIPY_CACHE.clear()
    _SCIPY_CACHE[key] = (s, m)
    return m
