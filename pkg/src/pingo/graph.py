"""Batched graph bookkeeping shared by the backbones and integrators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .physics import SystemState, complete_graph, edge_products
from .tensor import index_select, segment_sum


@dataclass
class GraphBatch:
    """B systems of N particles flattened to B*N nodes.

    ``receivers``/``senders`` index flattened nodes, so the aggregation
    over the neighbours j of node i is a segment sum over ``receivers``.
    """

    n_systems: int
    n_bodies: int
    receivers: np.ndarray
    senders: np.ndarray
    h: np.ndarray  # (B*N, d) raw node attributes
    edge_attr: np.ndarray  # (B*E, 1)
    _matrices: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.n_systems * self.n_bodies

    @property
    def n_edges(self) -> int:
        return self.receivers.shape[0]

    def incidence(self, which: str) -> sp.csr_matrix:
        """(B*N x B*E) 0/1 matrix mapping edges onto their receiver or sender node."""
        if which not in self._matrices:
            idx = self.receivers if which == "receivers" else self.senders
            e = idx.shape[0]
            self._matrices[which] = sp.csr_matrix(
                (np.ones(e), (idx, np.arange(e))), shape=(self.n_nodes, e)
            )
        return self._matrices[which]

    def gather_receivers(self, x):
        return index_select(x, self.receivers, self.incidence("receivers"))

    def gather_senders(self, x):
        return index_select(x, self.senders, self.incidence("senders"))

    def aggregate(self, x):
        """sum_j x_ij for every receiver i."""
        return segment_sum(x, self.receivers, self.n_nodes, self.incidence("receivers"))

    @classmethod
    def build(cls, h: np.ndarray, edges: np.ndarray | None = None, edge_attr: np.ndarray | None = None):
        """``h`` is (B, N, d); ``edge_attr`` is (B, E) or None for h_i*h_j."""
        h = np.asarray(h, dtype=np.float64)
        if h.ndim == 2:
            h = h[None]
        b, n, d = h.shape
        if edges is None:
            edges = complete_graph(n)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edge_attr is None:
            edge_attr = edge_products(h, edges)
        edge_attr = np.asarray(edge_attr, dtype=np.float64).reshape(b, -1)
        offsets = (np.arange(b) * n)[:, None]
        receivers = (edges[None, :, 0] + offsets).reshape(-1)
        senders = (edges[None, :, 1] + offsets).reshape(-1)
        return cls(b, n, receivers, senders, h.reshape(b * n, d), edge_attr.reshape(-1, 1))

    @classmethod
    def from_states(cls, states: list[SystemState]) -> "GraphBatch":
        edges = states[0].edges
        for s in states[1:]:
            if not np.array_equal(s.edges, edges):
                raise ValueError("all states in a batch must share the same edge list")
        return cls.build(
            np.stack([s.h for s in states]), edges, np.stack([s.edge_attr for s in states])
        )
