"""Convert the raw LINQS Cora release (cora.content / cora.cites) to a bundle.

The raw files ship inside the ``pgl`` wheel on PyPI (``pgl/data/cora``)::

    pip download --no-deps pgl==2.2.6 -d /tmp/pgl
    python3 -c "import zipfile,glob; zipfile.ZipFile(glob.glob('/tmp/pgl/*.whl')[0]).extractall('/tmp/pgl/x')"
    python3 scripts/make_cora_bundle.py /tmp/pgl/x/pgl/data/cora data/cora

Nodes keep the order of cora.content, classes are numbered by sorted class
name.  The split follows the Planetoid recipe (20 labeled nodes per class for
training, 500 validation, 1000 test) drawn with a fixed seed, since the
original Planetoid index files are not part of the raw release.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from selfgnn.graph import SPLIT_CODES, graph_from_edges, write_graph_bundle


def planetoid_style_split(labels: np.ndarray, seed: int, per_class: int = 20,
                          num_val: int = 500, num_test: int = 1000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    split = np.full(len(labels), SPLIT_CODES["none"], dtype=np.int8)
    train = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        train.extend(rng.choice(idx, per_class, replace=False))
    split[np.array(train)] = SPLIT_CODES["train"]
    rest = rng.permutation(np.flatnonzero(split == SPLIT_CODES["none"]))
    split[rest[:num_val]] = SPLIT_CODES["val"]
    split[rest[num_val:num_val + num_test]] = SPLIT_CODES["test"]
    return split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raw_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ids, feats, names = [], [], []
    with (args.raw_dir / "cora.content").open() as fh:
        for line in fh:
            toks = line.split()
            ids.append(toks[0])
            feats.append([float(t) for t in toks[1:-1]])
            names.append(toks[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])

    edges = []
    with (args.raw_dir / "cora.cites").open() as fh:
        for line in fh:
            a, b = line.split()
            if a in index and b in index:
                edges.append((index[a], index[b]))

    g = graph_from_edges(len(ids), edges, np.array(feats), labels)
    g = g.with_split(planetoid_style_split(labels, args.seed))
    write_graph_bundle(g, args.out_dir)
    print(f"nodes={g.num_nodes} edges={g.num_edges} features={g.num_features} "
          f"classes={g.num_classes}")


if __name__ == "__main__":
    main()
