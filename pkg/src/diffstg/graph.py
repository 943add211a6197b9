"""Graph container, GCN normalisation and the graph-convolution primitive."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T


def normalize_adjacency(A) -> np.ndarray:
    """Return D^{-1/2} (A + I) D^{-1/2} with D_ii the row sums of A + I."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {list(A.shape)}")
    if np.any(A < 0):
        raise ValueError("adjacency has negative entries")
    if not np.all(np.isfinite(A)):
        raise ValueError("adjacency has non-finite entries")
    A_hat = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(A_hat.sum(axis=1))
    return d[:, None] * A_hat * d[None, :]


@dataclass(frozen=True)
class Graph:
    A: np.ndarray
    A_gcn: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        A_gcn = normalize_adjacency(A)
        A_gcn.setflags(write=False)
        object.__setattr__(self, "A_gcn", A_gcn)

    @property
    def V(self) -> int:
        return self.A.shape[0]

    def permute(self, perm) -> "Graph":
        perm = np.asarray(perm)
        return Graph(self.A[np.ix_(perm, perm)])


def ring_graph(V: int) -> Graph:
    """Undirected cycle on V nodes with unit weights."""
    A = np.zeros((V, V))
    for i in range(V):
        A[i, (i + 1) % V] = A[i, (i - 1) % V] = 1.0
    if V == 1:
        A[:] = 0.0
    return Graph(A)


def graph_conv(H: T.Tensor, graph: Graph, W: T.Tensor, activation: str = "identity",
               aggregate: bool = True) -> T.Tensor:
    """sigma(A_gcn H W) for node features H of shape [..., V, C].

    ``aggregate=False`` replaces A_gcn by the identity (the spatial ablation).
    """
    if H.ndim < 2 or H.shape[-2] != graph.V:
        raise T.ShapeError(f"graph_conv: features {list(H.shape)} do not have V={graph.V} rows")
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] != H.shape[-1]:
        raise T.ShapeError(f"graph_conv: weight {list(W.shape)} incompatible with features {list(H.shape)}")
    out = H
    if aggregate:
        out = T.matmul(T.Tensor(graph.A_gcn, dtype=H.dtype), out)
    out = T.matmul(out, W)
    if activation == "relu":
        return T.relu(out)
    if activation != "identity":
        raise ValueError(f"unknown gcn activation {activation!r}")
    return out


def read_adjacency_csv(path: str | Path) -> Graph:
    """Read a graph from CSV.

    First line is either ``dense`` (followed by V rows of V weights) or
    ``edges`` (followed by ``src,dst,weight`` rows, nodes numbered 0..V-1; an
    optional ``nodes,V`` row fixes V when the highest ids are isolated).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty adjacency file")
    kind = rows[0][0].strip().lower()
    body = rows[1:]
    if kind == "dense":
        try:
            A = np.array([[float(c) for c in r] for r in body])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric dense entry ({exc})") from None
        return Graph(A)
    if kind == "edges":
        n_nodes = None
        edges = []
        for lineno, r in enumerate(body, start=2):
            if r[0].strip().lower() == "nodes":
                n_nodes = int(r[1])
                continue
            if r[0].strip().lower() == "src":
                continue
            if len(r) != 3:
                raise ValueError(f"{path}:{lineno}: expected src,dst,weight")
            edges.append((int(r[0]), int(r[1]), float(r[2])))
        if n_nodes is None:
            n_nodes = 1 + max(max(s, d) for s, d, _ in edges) if edges else 0
        A = np.zeros((n_nodes, n_nodes))
        for s, d, w in edges:
            if not (0 <= s < n_nodes and 0 <= d < n_nodes):
                raise ValueError(f"{path}: edge ({s},{d}) outside 0..{n_nodes - 1}")
            A[s, d] = w
        return Graph(A)
    raise ValueError(f"{path}: header must be 'dense' or 'edges', got {rows[0][0]!r}")


def write_adjacency_csv(graph: Graph, path: str | Path, fmt: str = "edges") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if fmt == "dense":
            w.writerow(["dense"])
            w.writerows([[repr(float(x)) for x in row] for row in graph.A])
        else:
            w.writerow(["edges"])
            w.writerow(["nodes", graph.V])
            for s, d in zip(*np.nonzero(graph.A)):
                w.writerow([int(s), int(d), repr(float(graph.A[s, d]))])
