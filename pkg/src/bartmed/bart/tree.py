"""A single regression tree bound to a training design, plus one-step moves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .model import BartConfig, CutGrid

MOVES = {"grow": K.MOVE_GROW, "prune": K.MOVE_PRUNE, "change": K.MOVE_CHANGE}


@dataclass
class DecisionTree:
    """Binary tree over binned covariates.

    Branch nodes send a row left when ``x[var] <= cutpoint``. ``leaf_of`` maps
    every training row to the slot of the leaf that contains it.
    """

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    mu: np.ndarray
    leaf_of: np.ndarray
    grid: CutGrid
    xb: np.ndarray

    @classmethod
    def stump(cls, x: np.ndarray, grid: CutGrid | None = None, capacity: int = 63,
              value: float = 0.0) -> "DecisionTree":
        x = np.asarray(x, dtype=np.float64)
        grid = grid or CutGrid.from_data(x)
        var = np.full(capacity, K.FREE, dtype=np.int64)
        var[0] = K.LEAF
        mu = np.zeros(capacity)
        mu[0] = value
        return cls(var=var, cut=np.zeros(capacity, dtype=np.int64),
                   left=np.full(capacity, -1, dtype=np.int64),
                   right=np.full(capacity, -1, dtype=np.int64),
                   parent=np.full(capacity, -1, dtype=np.int64),
                   depth=np.zeros(capacity, dtype=np.int64), mu=mu,
                   leaf_of=np.zeros(x.shape[0], dtype=np.int64), grid=grid,
                   xb=grid.bin(x))

    def copy(self) -> "DecisionTree":
        return DecisionTree(self.var.copy(), self.cut.copy(), self.left.copy(),
                            self.right.copy(), self.parent.copy(), self.depth.copy(),
                            self.mu.copy(), self.leaf_of.copy(), self.grid, self.xb)

    @property
    def leaves(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.var == K.LEAF)]

    @property
    def branches(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.var >= 0)]

    def max_depth(self) -> int:
        return int(self.depth[self.var != K.FREE].max())

    def cutpoint(self, node: int) -> float:
        return float(self.grid.cuts[self.var[node]][self.cut[node]])

    def grow(self, leaf: int, var: int, cut: int, values=(0.0, 0.0)) -> tuple[int, int]:
        """Split ``leaf`` on ``x[var] <= cuts[var][cut]``; returns the child slots."""
        if self.var[leaf] != K.LEAF:
            raise ValueError(f"node {leaf} is not a leaf")
        free = np.flatnonzero(self.var == K.FREE)
        if len(free) < 2:
            raise ValueError("tree capacity exhausted")
        a, b = int(free[0]), int(free[1])
        self.var[leaf], self.cut[leaf] = var, cut
        self.left[leaf], self.right[leaf] = a, b
        for child, value in ((a, values[0]), (b, values[1])):
            self.var[child] = K.LEAF
            self.parent[child] = leaf
            self.depth[child] = self.depth[leaf] + 1
            self.left[child] = self.right[child] = -1
            self.mu[child] = value
        rows = self.leaf_of == leaf
        goes_left = self.xb[:, var] <= cut
        self.leaf_of[rows & goes_left] = a
        self.leaf_of[rows & ~goes_left] = b
        return a, b

    def prune(self, node: int, value: float = 0.0) -> None:
        """Collapse a branch whose children are both leaves."""
        a, b = int(self.left[node]), int(self.right[node])
        if self.var[node] < 0 or self.var[a] != K.LEAF or self.var[b] != K.LEAF:
            raise ValueError(f"node {node} does not have two leaf children")
        self.leaf_of[(self.leaf_of == a) | (self.leaf_of == b)] = node
        self.var[node] = K.LEAF
        self.left[node] = self.right[node] = -1
        self.mu[node] = value
        for child in (a, b):
            self.var[child] = K.FREE
            self.parent[child] = -1

    def route(self, x: np.ndarray) -> np.ndarray:
        """Leaf slot reached by every row of raw covariates ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0], dtype=np.int64)
        for i, row in enumerate(x):
            node = 0
            while self.var[node] >= 0:
                if row[self.var[node]] <= self.cutpoint(node):
                    node = self.left[node]
                else:
                    node = self.right[node]
            out[i] = node
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.mu[self.route(x)]

    def check(self) -> None:
        """Raise AssertionError if the structural invariants do not hold."""
        for j in self.branches:
            a, b = self.left[j], self.right[j]
            assert self.var[a] != K.FREE and self.var[b] != K.FREE
            assert self.parent[a] == j and self.parent[b] == j
            assert self.depth[a] == self.depth[j] + 1
        leaves = set(self.leaves)
        assert set(np.unique(self.leaf_of)) <= leaves
        for i in range(self.xb.shape[0]):
            node = 0
            while self.var[node] >= 0:
                node = self.left[node] if self.xb[i, self.var[node]] <= self.cut[node] \
                    else self.right[node]
            assert node == self.leaf_of[i]
        # every leaf describes a non-empty cell of the covariate grid
        for leaf in leaves:
            for v, n_cuts in enumerate(self.grid.counts):
                lo, hi = K.node_range(self.var, self.cut, self.parent, self.left,
                                      leaf, v, n_cuts)
                assert lo <= hi


def sample_tree_move(tree: DecisionTree, residuals, config: BartConfig | None = None,
                     rng=None, *, sigma: float = 1.0, tau: float | None = None,
                     move: str | None = None, use_likelihood: bool = True,
                     draw_leaves: bool = True) -> tuple[DecisionTree, bool]:
    """Propose one grow, prune or change move and accept or reject it.

    Returns the updated copy of ``tree`` and whether the proposal was accepted.
    Leaf values are then drawn from their conditional posterior.
    """
    cfg = config or BartConfig(n_trees=1)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    resid = np.ascontiguousarray(residuals, dtype=np.float64)
    if tau is None:
        tau = 0.5 / (cfg.k * np.sqrt(cfg.trees_for("continuous")))
    out = tree.copy()
    cap = len(out.var)
    stack = np.zeros(cap + 2, dtype=np.int64)
    node_n = np.zeros(cap, dtype=np.int64)
    node_s = np.zeros(cap)
    new_leaf = np.zeros(len(resid), dtype=np.int64)
    in_sub = np.zeros(cap, dtype=np.bool_)
    forced = -1 if move is None else MOVES[move]
    min_leaf = cfg.min_leaf if use_likelihood else 0
    _, accepted = K.tree_step(out.var, out.cut, out.left, out.right, out.parent,
                              out.depth, out.mu, out.leaf_of, out.xb, out.grid.counts,
                              resid, sigma**2, tau**2, cfg.alpha, cfg.beta, cfg.p_grow,
                              cfg.p_prune, min_leaf, use_likelihood, forced, rng, stack,
                              node_n, node_s, new_leaf, in_sub)
    if draw_leaves:
        K.draw_leaves(out.var, out.mu, out.leaf_of, resid, sigma**2, tau**2,
                      use_likelihood, rng, node_n, node_s)
    return out, bool(accepted)
