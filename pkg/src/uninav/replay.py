"""Experience replay: a uniform FIFO memory and a proportional prioritized
memory backed by a sum tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    grid: np.ndarray  # (3, 80, 60) float32
    speed: float
    action: int
    reward: float
    next_grid: np.ndarray
    next_speed: float
    terminal: bool


@dataclass
class Batch:
    grids: np.ndarray
    speeds: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_grids: np.ndarray
    next_speeds: np.ndarray
    terminals: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_transitions(cls, items, indices, weights) -> "Batch":
        return cls(
            grids=np.stack([t.grid for t in items]),
            speeds=np.array([t.speed for t in items], dtype=np.float32),
            actions=np.array([t.action for t in items], dtype=np.int64),
            rewards=np.array([t.reward for t in items], dtype=np.float64),
            next_grids=np.stack([t.next_grid for t in items]),
            next_speeds=np.array([t.next_speed for t in items], dtype=np.float32),
            terminals=np.array([t.terminal for t in items], dtype=bool),
            indices=np.asarray(indices, dtype=np.int64),
            weights=np.asarray(weights, dtype=np.float64),
        )


class SumTree:
    """Complete binary tree over ``2**depth`` leaves stored in one array.

    Node 1 is the root; node i has children 2i and 2i+1; leaf j lives at
    ``capacity + j``.  Parents are recomputed from their children (never
    patched with deltas), so internal sums carry no accumulated drift.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def get(self, idx):
        return self.nodes[self.capacity + np.asarray(idx)]

    def set(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("priorities must be finite and non-negative")
        if np.any((idx < 0) | (idx >= self.capacity)):
            raise IndexError("leaf index out of range")
        node = idx + self.capacity
        self.nodes[node] = values
        node = np.unique(node >> 1)
        while node[0] >= 1:
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1]
            if node[0] == 1:
                break
            node = np.unique(node >> 1)

    def find(self, mass) -> np.ndarray:
        """Leaf index whose prefix-sum interval contains each ``mass`` value."""
        mass = np.array(mass, dtype=np.float64, ndmin=1)
        node = np.ones(mass.shape, dtype=np.int64)
        while node[0] < self.capacity:
            left = 2 * node
            go_right = mass >= self.nodes[left]
            mass = np.where(go_right, mass - self.nodes[left], mass)
            node = np.where(go_right, left + 1, left)
        return node - self.capacity


class ReplayMemory:
    """Uniform FIFO replay."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self.items: list[Transition | None] = [None] * capacity
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> int:
        slot = self.cursor
        self.items[slot] = t
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def sample(self, k: int, rng: np.random.Generator, beta: float = 1.0) -> Batch:
        if self.size < k:
            raise ValueError(f"cannot sample {k} transitions from {self.size}")
        idx = rng.integers(0, self.size, size=k)
        return Batch.from_transitions([self.items[i] for i in idx], idx, np.ones(k))

    def update_priorities(self, indices, td_errors) -> None:
        pass


class PrioritizedMemory(ReplayMemory):
    """Proportional prioritization: P(i) = p_i^alpha / sum_k p_k^alpha.

    The tree stores ``p_i ** alpha``; raw priorities are kept alongside so new
    transitions can enter at the current maximum priority.
    """

    def __init__(self, capacity: int = 10_000, alpha: float = 0.6, eps: float = 1e-2):
        super().__init__(capacity)
        if alpha < 0 or eps <= 0:
            raise ValueError("need alpha >= 0 and eps > 0")
        self.alpha, self.eps = alpha, eps
        self.tree = SumTree(capacity)
        self.priority = np.zeros(capacity, dtype=np.float64)

    def max_priority(self) -> float:
        return float(self.priority[:self.size].max()) if self.size else 1.0

    def push(self, t: Transition, priority: float | None = None) -> int:
        p = self.max_priority() if priority is None else float(priority)
        slot = super().push(t)
        self.priority[slot] = p
        self.tree.set(slot, p ** self.alpha)
        return slot

    def set_priorities(self, indices, priorities) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if np.any(indices >= self.size):
            raise IndexError("priority update for an empty slot")
        priorities = np.asarray(priorities, dtype=np.float64)
        self.priority[indices] = priorities
        self.tree.set(indices, priorities ** self.alpha)

    def update_priorities(self, indices, td_errors) -> None:
        self.set_priorities(indices, np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps)

    def probabilities(self) -> np.ndarray:
        leaves = self.tree.leaves()[:self.size]
        return leaves / leaves.sum()

    def sample_indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Stratified draw: one uniform point in each of k equal mass segments."""
        if self.size < k:
            raise ValueError(f"cannot sample {k} transitions from {self.size}")
        total = self.tree.total
        seg = total / k
        mass = (np.arange(k) + rng.random(k)) * seg
        mass = np.minimum(mass, np.nextafter(total, 0.0))
        idx = self.tree.find(mass)
        # round-off can walk past the last filled leaf
        return np.minimum(idx, self.size - 1)

    def importance_weights(self, indices, beta: float) -> np.ndarray:
        probs = self.tree.get(indices) / self.tree.total
        w = (self.size * probs) ** (-beta)
        return w / w.max()

    def sample(self, k: int, rng: np.random.Generator, beta: float = 0.4) -> Batch:
        idx = self.sample_indices(k, rng)
        w = self.importance_weights(idx, beta)
        return Batch.from_transitions([self.items[i] for i in idx], idx, w)
