"""Markov blanket estimation for every feature."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .exceptions import InvalidSpec, MnrError
from .select import bic_select, screen_cap_default, top_k

logger = logging.getLogger(__name__)


@dataclass
class BlanketMap:
    """``neighbors[j]`` is the sorted 0-based estimate of feature j's blanket."""

    neighbors: list[np.ndarray]
    method: str
    cap: int
    failed_nodes: tuple[int, ...] = ()

    @property
    def p(self) -> int:
        return len(self.neighbors)

    def __getitem__(self, j) -> np.ndarray:
        return self.neighbors[j]

    def validate(self):
        for j, nb in enumerate(self.neighbors):
            if j in set(nb.tolist()):
                raise InvalidSpec(f"feature {j} lists itself as a neighbor")
            if nb.size and (nb.min() < 0 or nb.max() >= self.p):
                raise InvalidSpec(f"neighbor index out of range for feature {j}")
            if nb.size > self.cap:
                raise InvalidSpec(f"feature {j} has {nb.size} neighbors, cap is {self.cap}")

    def union(self, features) -> np.ndarray:
        out = set()
        for j in features:
            out.update(self.neighbors[j].tolist())
        return np.array(sorted(out), dtype=int)

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "cap": self.cap,
            "neighbors": [[int(k) for k in nb] for nb in self.neighbors],
        })

    @classmethod
    def from_json(cls, text: str) -> "BlanketMap":
        d = json.loads(text)
        bm = cls([np.array(nb, dtype=int) for nb in d["neighbors"]], d["method"], int(d["cap"]))
        bm.validate()
        return bm


def blanket_cap_default(n: int) -> int:
    return max(1, int(math.floor(math.sqrt(n))) - 1)


def _corr(X) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    sd = np.sqrt((Xc ** 2).sum(axis=0))
    sd[sd == 0] = 1.0
    Xn = Xc / sd
    return Xn.T @ Xn


def _corr_neighbors(C, j, cap):
    a = np.abs(C[j]).copy()
    a[j] = -np.inf
    return np.sort(top_k(a, cap)).astype(int)


def corr_screen_blankets(X, cap: int) -> BlanketMap:
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    cap = min(cap, p - 1)
    C = _corr(X)
    return BlanketMap([_corr_neighbors(C, j, cap) for j in range(p)], "corr_screen", cap)


def _node_fit(X, C, j, screen_cap, cap):
    n, p = X.shape
    a = np.abs(C[j]).copy()
    a[j] = -np.inf
    cand = np.sort(top_k(a, min(screen_cap, p - 1)))
    node = Dataset(X[:, cand], X[:, j], "gaussian", standardized=True)
    coef, _, _, _ = bic_select(node, np.ascontiguousarray(node.X), "lasso")
    nz = np.flatnonzero(coef)
    if nz.size > cap:
        nz = nz[top_k(np.abs(coef[nz]), cap)]
    return cand[nz], np.abs(coef[nz])


def nodewise_blankets(X, cap: int, screen_cap: int | None = None, nodes=None) -> BlanketMap:
    """Nodewise Lasso (SIS pre-screen, BIC lambda), symmetrized by union.

    The union can push a node past ``cap``; such nodes lose their weakest
    (lowest |correlation|) edges, from both endpoints, so the relation stays
    symmetric. ``nodes`` restricts the
    regressions to a subset of features (the rest start empty and only pick
    up partners through symmetrization).
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < 3:
        raise InvalidSpec("nodewise regression needs n >= 3")
    screen_cap = screen_cap_default(n) if screen_cap is None else screen_cap
    cap = min(cap, p - 1)
    C = _corr(X)
    sets = [set() for _ in range(p)]
    failed = []
    todo = range(p) if nodes is None else nodes
    for j in todo:
        try:
            nb, _ = _node_fit(X, C, j, screen_cap, cap)
        except MnrError as exc:
            logger.warning("nodewise regression failed for feature %d (%s); using correlation screening", j, exc)
            failed.append(j)
            nb = _corr_neighbors(C, j, cap)
        sets[j].update(int(k) for k in nb)
    for j in range(p):
        for k in list(sets[j]):
            sets[k].add(j)
    # trim over-full nodes by dropping their weakest edges from both ends
    for j in sorted(range(p), key=lambda i: -len(sets[i])):
        while len(sets[j]) > cap:
            k = min(sets[j], key=lambda i: (abs(C[j, i]), -i))
            sets[j].discard(k)
            sets[k].discard(j)
    neighbors = [np.array(sorted(s), dtype=int) for s in sets]
    return BlanketMap(neighbors, "nodewise", cap, tuple(failed))


def estimate_blankets(X, method: str = "nodewise", cap: int | None = None, nodes=None) -> BlanketMap:
    n = X.shape[0]
    cap = blanket_cap_default(n) if cap is None else cap
    if method == "nodewise":
        return nodewise_blankets(X, cap, nodes=nodes)
    if method in ("corr_screen", "corr"):
        return corr_screen_blankets(X, cap)
    raise InvalidSpec(f"unknown blanket method {method!r}")
