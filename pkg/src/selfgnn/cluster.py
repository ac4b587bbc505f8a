"""Cluster-batched training for graphs too large for one dense diffusion.

The graph is cut into ``k`` balanced clusters, the clusters are shuffled and
dealt into ``b`` batches, and each batch is treated as a graph of its own:
its induced subgraph gets its own augmentation (and diffusion), and the
training loop cycles through batches in a seeded order.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path

from .diffusion import track_dense_allocations
from .evaluation import ProbeConfig
from .graph import Graph, GraphFormatError, SparseMatrix
from .seeding import substream
from .trainer import AugSpec, Batch, TrainConfig, TrainResult, fit_batches, make_views


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.assignment)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("assignment must be a nonempty vector")
        if a.min() < 0:
            raise ValueError("cluster ids must be >= 0")
        present = np.unique(a)
        if len(present) != a.max() + 1:
            raise ValueError("cluster ids must be contiguous with no empty cluster")

    @property
    def num_clusters(self) -> int:
        return int(self.assignment.max()) + 1

    @property
    def num_nodes(self) -> int:
        return len(self.assignment)

    def clusters(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == c) for c in range(self.num_clusters)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clusters)


def _allocate_seeds(sizes: np.ndarray, k: int) -> np.ndarray:
    """Seeds per component.

    Only components of at least ``N / k`` nodes get seeds (largest-remainder
    shares of ``k``, never above the component size); smaller ones are
    packed into existing clusters later.  If those components hold fewer
    than ``k`` nodes, the next largest components are admitted too.
    """
    n = sizes.sum()
    by_size = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    eligible = [i for i in by_size if sizes[i] * k >= n]
    for i in by_size[len(eligible):]:
        if sizes[eligible].sum() >= k:
            break
        eligible.append(i)
    seeds = np.zeros(len(sizes), dtype=int)
    sub = sizes[eligible]
    exact = k * sub / sub.sum()
    share = np.minimum(np.floor(exact).astype(int), sub)
    rest = k - share.sum()
    order = sorted(range(len(sub)), key=lambda j: (-(exact[j] - share[j]), -sub[j], j))
    while rest > 0:
        for j in order:
            if rest and share[j] < sub[j]:
                share[j] += 1
                rest -= 1
    seeds[eligible] = share
    return seeds


def _farthest_seeds(adj: sp.csr_matrix, nodes: np.ndarray, s: int, rng) -> list[int]:
    """Greedy farthest-first seed set inside one connected component."""
    sub = adj[nodes][:, nodes]
    first = int(rng.integers(len(nodes)))
    chosen = [first]
    dist = shortest_path(sub, unweighted=True, indices=first)
    for _ in range(s - 1):
        dist_c = np.where(np.isin(np.arange(len(nodes)), chosen), -1.0, dist)
        nxt = int(np.argmax(dist_c))
        chosen.append(nxt)
        dist = np.minimum(dist, shortest_path(sub, unweighted=True, indices=nxt))
    return [int(nodes[i]) for i in chosen]


def partition_graph(g: Graph, k: int, seed: int = 0) -> Partition:
    """Balanced multi-source BFS growth.

    Components of at least ``N / k`` nodes receive seeds in proportion to
    their size, and clusters grow round-robin from farthest-first seeds up
    to ``ceil(component size / seeds)`` nodes.  When growth stalls, the
    smallest cluster bordering unclaimed nodes takes the next one.  Seedless
    components join the smallest cluster, and a border-shifting pass pulls
    sizes towards ``N / k``.
    """
    n = g.num_nodes
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    rng = substream(seed, "partition")
    adj = g.adjacency.to_scipy()
    ncomp, comp = connected_components(adj, directed=False)
    comp_nodes = [np.flatnonzero(comp == c) for c in range(ncomp)]
    seeds_per = _allocate_seeds(np.array([len(c) for c in comp_nodes]), k)

    assign = np.full(n, -1, dtype=np.int64)
    sizes: list[int] = []
    indptr, indices = adj.indptr, adj.indices
    next_id = 0
    for nodes, s in zip(comp_nodes, seeds_per):
        if s == 0:
            continue
        cap = math.ceil(len(nodes) / s)
        seeds = _farthest_seeds(adj, nodes, int(s), rng)
        queues = []
        for v in seeds:
            assign[v] = next_id
            sizes.append(1)
            queues.append((next_id, deque(indices[indptr[v]:indptr[v + 1]])))
            next_id += 1
        active = True
        while active:
            active = False
            for cid, q in queues:
                if sizes[cid] >= cap:
                    continue
                while q:
                    v = int(q.popleft())
                    if assign[v] < 0:
                        assign[v] = cid
                        sizes[cid] += 1
                        q.extend(indices[indptr[v]:indptr[v + 1]])
                        active = True
                        break
        # growth stalled under the cap: the smallest cluster that still
        # borders unclaimed nodes takes the next one
        heap = [(sizes[cid], cid) for cid, _ in queues]
        heapq.heapify(heap)
        qmap = dict(queues)
        while heap:
            size, cid = heapq.heappop(heap)
            q = qmap[cid]
            while q and assign[q[0]] >= 0:
                q.popleft()
            if not q:
                continue
            v = int(q.popleft())
            assign[v] = cid
            sizes[cid] += 1
            q.extend(indices[indptr[v]:indptr[v + 1]])
            heapq.heappush(heap, (sizes[cid], cid))
    # components that received no seed
    for nodes in sorted((c for c, s in zip(comp_nodes, seeds_per) if s == 0), key=lambda c: (-len(c), c[0])):
        cid = int(np.argmin(sizes))
        assign[nodes] = cid
        sizes[cid] += len(nodes)
    _rebalance(assign, np.array(sizes), indptr, indices, n / k)
    return Partition(assign)


def _rebalance(assign, sizes, indptr, indices, target: float, passes: int = 200) -> None:
    """Shift border nodes from larger to adjacent smaller clusters.

    A node moves when its cluster is at least two nodes bigger than the
    smallest neighbouring cluster and would not become empty.  Passes stop
    once every size lies within 30% of the target or nothing moves.
    """
    lo, hi = 0.7 * target, 1.3 * target
    for _ in range(passes):
        if sizes.min() >= lo and sizes.max() <= hi:
            return
        moved = False
        for v in range(len(assign)):
            a = assign[v]
            if sizes[a] <= 1:
                continue
            nbr = assign[indices[indptr[v]:indptr[v + 1]]]
            nbr = nbr[nbr != a]
            if nbr.size == 0:
                continue
            b = min(np.unique(nbr), key=lambda c: (sizes[c], c))
            if sizes[a] - sizes[b] >= 2 and (sizes[a] > hi or sizes[b] < lo):
                assign[v] = b
                sizes[a] -= 1
                sizes[b] += 1
                moved = True
        if not moved:
            return


def load_partition(path: str | Path, num_nodes: int | None = None) -> Partition:
    """Read N lines of cluster ids (e.g. converted METIS output)."""
    try:
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        ids = np.array([int(x) for x in lines], dtype=np.int64)
    except FileNotFoundError as exc:
        raise GraphFormatError(f"partition file not found: {path}") from exc
    except ValueError as exc:
        raise GraphFormatError(f"non-integer cluster id in {path}: {exc}") from exc
    if num_nodes is not None and len(ids) != num_nodes:
        raise GraphFormatError(f"partition file has {len(ids)} lines, graph has {num_nodes} nodes")
    try:
        return Partition(ids)
    except ValueError as exc:
        raise GraphFormatError(f"invalid partition in {path}: {exc}") from exc


def write_partition(p: Partition, path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(c)}\n" for c in p.assignment))


def merge_clusters(p: Partition, b: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle clusters and deal them round-robin into ``b`` sorted node sets."""
    k = p.num_clusters
    if not 1 <= b <= k:
        raise ValueError(f"need 1 <= b <= k, got b={b}, k={k}")
    order = substream(seed, "merge").permutation(k)
    clusters = p.clusters()
    return [np.sort(np.concatenate([clusters[c] for c in order[i::b]])) for i in range(b)]


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` relabelled ``0..len(nodes)-1`` in the given order."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("node set is empty")
    if nodes.min() < 0 or nodes.max() >= g.num_nodes:
        raise ValueError("node id out of range")
    if len(np.unique(nodes)) != len(nodes):
        raise ValueError("node set contains duplicates")
    adj = g.adjacency.to_scipy()[nodes][:, nodes].tocsr()
    adj.sort_indices()
    parent = g.node_ids[nodes] if g.node_ids is not None else nodes.copy()
    return Graph(
        SparseMatrix.from_scipy(adj),
        g.features[nodes],
        None if g.labels is None else g.labels[nodes],
        None if g.split is None else g.split[nodes],
        g.num_classes,
        parent,
    )


def default_batches(k: int) -> int:
    return max(1, k // 4)


def cluster_batches(g: Graph, spec: AugSpec, groups: list[np.ndarray], dtype) -> list[Batch]:
    """Per-group augmentation (diffusion computed once and kept)."""
    batches = []
    for nodes in groups:
        sub = induced_subgraph(g, nodes)
        views = make_views(sub, spec)
        batches.append(Batch.prepare(views, spec, dtype, node_ids=nodes))
    return batches


def train_clustered(g: Graph, spec: AugSpec, cfg: TrainConfig, k: int, b: int | None = None,
                    probe_cfg: ProbeConfig = ProbeConfig(), partition: Partition | None = None,
                    callback=None) -> TrainResult:
    """Cluster-batched training; ``meta`` records batch sizes and peak dense allocation."""
    part = partition if partition is not None else partition_graph(g, k, cfg.seed)
    if part.num_nodes != g.num_nodes:
        raise ValueError("partition does not match the graph")
    b = default_batches(part.num_clusters) if b is None else b
    groups = merge_clusters(part, b, cfg.seed)
    with track_dense_allocations() as counter:
        batches = cluster_batches(g, spec, groups, cfg.model_config(1).dtype)
    widths = {bt.width for bt in batches}
    if len(widths) != 1:
        raise ValueError(f"batches disagree on feature width: {sorted(widths)}")
    result = fit_batches(g, batches, cfg, probe_cfg, callback)
    result.meta.update(
        batches=batches,
        partition=part,
        batch_sizes=[len(x) for x in groups],
        peak_dense=counter.peak,
        dense_allocations=counter.count,
    )
    return result
