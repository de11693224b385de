"""Latency tables, rank correlation, and device-set partitioning.

Devices are partitioned into low-mutual-correlation source/target pools by
building a complete graph whose edge weights are negative Spearman
correlations, bisecting it with Kernighan-Lin (minimizing the cut weight
pushes correlated devices onto opposite sides), and pruning each side down to
the requested sizes by repeatedly dropping the device with the highest total
cross-side correlation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConstantInput,
    InsufficientOverlap,
    LengthMismatch,
    ParseError,
    SideTooSmall,
    TooFewDevices,
)
from .rng import rng_for


class LatencyTable:
    """(arch_id, device_id, latency_ms) records, indexed both ways."""

    def __init__(self):
        self._by_device: dict[str, dict[str, float]] = {}

    def add(self, arch_id: str, device_id: str, latency_ms: float) -> None:
        if latency_ms <= 0:
            raise ValueError(f"latency must be positive, got {latency_ms} for {arch_id}/{device_id}")
        rows = self._by_device.setdefault(device_id, {})
        if arch_id in rows:
            raise ValueError(f"duplicate measurement for ({arch_id}, {device_id})")
        rows[arch_id] = float(latency_ms)

    def devices(self) -> list[str]:
        return list(self._by_device)

    def archs_for(self, device_id: str) -> list[str]:
        return list(self._by_device.get(device_id, {}))

    def latency(self, arch_id: str, device_id: str) -> float:
        return self._by_device[device_id][arch_id]

    def has(self, arch_id: str, device_id: str) -> bool:
        return arch_id in self._by_device.get(device_id, {})

    def __len__(self) -> int:
        return sum(len(r) for r in self._by_device.values())

    def shared_archs(self, device_a: str, device_b: str) -> list[str]:
        rows_a = self._by_device.get(device_a, {})
        rows_b = self._by_device.get(device_b, {})
        return sorted(a for a in rows_a if a in rows_b)

    def vectors(self, device_a: str, device_b: str) -> tuple[np.ndarray, np.ndarray]:
        """Latency vectors over the two devices' shared archs, sorted by id."""
        shared = self.shared_archs(device_a, device_b)
        xa = np.array([self._by_device[device_a][s] for s in shared])
        xb = np.array([self._by_device[device_b][s] for s in shared])
        return xa, xb

    def subset(self, device_ids: Iterable[str] | None = None, arch_ids: Iterable[str] | None = None) -> "LatencyTable":
        device_set = None if device_ids is None else set(device_ids)
        arch_set = None if arch_ids is None else set(arch_ids)
        out = LatencyTable()
        for device, rows in self._by_device.items():
            if device_set is not None and device not in device_set:
                continue
            for arch, lat in rows.items():
                if arch_set is not None and arch not in arch_set:
                    continue
                out.add(arch, device, lat)
        return out

    def merged_with(self, other: "LatencyTable") -> "LatencyTable":
        out = LatencyTable()
        for table in (self, other):
            for device, rows in table._by_device.items():
                for arch, lat in rows.items():
                    out.add(arch, device, lat)
        return out

    def save_csv(self, path) -> None:
        """Write `arch_id,device_id,latency_ms` sorted by (device, arch)."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write("arch_id,device_id,latency_ms\n")
            for device in sorted(self._by_device):
                rows = self._by_device[device]
                for arch in sorted(rows):
                    fh.write(f"{arch},{device},{repr(rows[arch])}\n")

    @classmethod
    def load_csv(cls, path) -> "LatencyTable":
        path = Path(path)
        table = cls()
        with path.open("r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "arch_id,device_id,latency_ms":
                raise ParseError(f"{path}: unexpected header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise ParseError(f"{path}:{lineno}: expected 3 columns")
                try:
                    table.add(parts[0], parts[1], float(parts[2]))
                except ValueError as e:
                    raise ParseError(f"{path}:{lineno}: {e}") from None
        return table


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    """Average-fractional ranks (ties get the mean of their rank range)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    sorted_x = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"{x.shape} vs {y.shape}")
    if len(x) < 2:
        raise LengthMismatch("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ConstantInput("rank correlation undefined for constant input")
    rx = _fractional_ranks(x)
    ry = _fractional_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def correlation_matrix(table: LatencyTable, devices: Sequence[str]) -> np.ndarray:
    """Pairwise Spearman over each pair's shared archs; diagonal is 1."""
    k = len(devices)
    corr = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            xa, xb = table.vectors(devices[i], devices[j])
            if len(xa) < 2:
                raise InsufficientOverlap(
                    f"devices {devices[i]!r} and {devices[j]!r} share {len(xa)} archs (need >= 2)"
                )
            corr[i, j] = corr[j, i] = spearman(xa, xb)
    return corr


@dataclass(frozen=True)
class CorrelationGraph:
    """Complete device graph weighted by negative Spearman correlation."""

    devices: tuple[str, ...]
    weights: np.ndarray  # symmetric, zero diagonal, entries = -correlation

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.devices), len(self.devices)):
            raise ValueError("weight matrix shape does not match device count")
        if not np.allclose(w, w.T):
            raise ValueError("weight matrix must be symmetric")
        w = w.copy()
        np.fill_diagonal(w, 0.0)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def correlations(self) -> np.ndarray:
        corr = -self.weights.copy()
        np.fill_diagonal(corr, 1.0)
        return corr

    @classmethod
    def from_latency_table(cls, table: LatencyTable, devices: Sequence[str] | None = None) -> "CorrelationGraph":
        devices = sorted(table.devices()) if devices is None else list(devices)
        corr = correlation_matrix(table, devices)
        return cls(devices=tuple(devices), weights=-corr)


@dataclass(frozen=True)
class DeviceSplit:
    """Disjoint source/target device pools plus the achieved objective."""

    source: tuple[str, ...]
    target: tuple[str, ...]
    objective: float  # mean source<->target correlation

    def to_json(self) -> str:
        return json.dumps(
            {"source": list(self.source), "target": list(self.target), "objective": self.objective},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DeviceSplit":
        obj = json.loads(text)
        return cls(tuple(obj["source"]), tuple(obj["target"]), float(obj["objective"]))


def cut_weight(weights: np.ndarray, side_a: Sequence[int], side_b: Sequence[int]) -> float:
    """Total weight of edges crossing the bipartition."""
    ia = np.asarray(list(side_a), dtype=np.intp)
    ib = np.asarray(list(side_b), dtype=np.intp)
    return float(weights[np.ix_(ia, ib)].sum())


def _kl_pass(weights: np.ndarray, side: np.ndarray) -> tuple[np.ndarray, float]:
    """One Kernighan-Lin pass: best prefix of greedy locked pair swaps."""
    n = weights.shape[0]
    side = side.copy()
    locked = np.zeros(n, dtype=bool)
    swaps: list[tuple[int, int]] = []
    gains: list[float] = []
    # D[v] = external - internal cost of v under the current side labels
    for _ in range(n // 2):
        ext = np.zeros(n)
        for v in range(n):
            same = side == side[v]
            ext[v] = weights[v, ~same].sum() - weights[v, same].sum()
        best = None
        for a in range(n):
            if locked[a] or not side[a]:
                continue
            for b in range(n):
                if locked[b] or side[b]:
                    continue
                gain = ext[a] + ext[b] - 2.0 * weights[a, b]
                if best is None or gain > best[0]:
                    best = (gain, a, b)
        if best is None:
            break
        gain, a, b = best
        side[a], side[b] = side[b], side[a]
        locked[a] = locked[b] = True
        swaps.append((a, b))
        gains.append(gain)
    if not gains:
        return side, 0.0
    prefix = np.cumsum(gains)
    k = int(np.argmax(prefix))
    best_gain = float(prefix[k])
    # Sub-epsilon "gains" are rounding noise on exactly-zero swap cycles and
    # would spin the pass loop forever.
    if best_gain <= 1e-12:
        for a, b in reversed(swaps):
            side[a], side[b] = side[b], side[a]
        return side, 0.0
    for a, b in reversed(swaps[k + 1 :]):
        side[a], side[b] = side[b], side[a]
    return side, best_gain


def kl_bisect(graph: CorrelationGraph, seed: int, restarts: int = 8) -> tuple[list[str], list[str]]:
    """Balanced bipartition locally minimizing cut weight.

    Weights are negative correlations, so minimizing the cut maximizes the
    correlation severed between the two sides and leaves each side internally
    decorrelated. Odd device counts are handled with a phantom zero-weight
    vertex. Several seeded restarts are run and the best final cut kept.
    """
    devices = graph.devices
    n = len(devices)
    if n < 2:
        raise TooFewDevices(f"need >= 2 devices, got {n}")
    weights = graph.weights
    padded = n % 2 == 1
    if padded:
        weights = np.pad(weights, ((0, 1), (0, 1)))
        n += 1

    best_side, best_cut = None, np.inf
    for r in range(restarts):
        rng = rng_for("kl", seed, r)
        side = np.zeros(n, dtype=bool)
        side[rng.permutation(n)[: n // 2]] = True
        prev_cut = _cut_of(weights, side)
        for _ in range(200):  # gains are bounded away from 0, so this never binds
            side, gain = _kl_pass(weights, side)
            new_cut = _cut_of(weights, side)
            assert new_cut <= prev_cut + 1e-9, "KL pass must not worsen the cut"
            if gain <= 0:
                break
            prev_cut = new_cut
        if new_cut < best_cut - 1e-12:
            best_cut, best_side = new_cut, side
    side = best_side
    idx_a = [i for i in range(len(devices)) if side[i]]
    idx_b = [i for i in range(len(devices)) if not side[i]]
    return [devices[i] for i in idx_a], [devices[i] for i in idx_b]


def _cut_of(weights: np.ndarray, side: np.ndarray) -> float:
    ia = np.flatnonzero(side)
    ib = np.flatnonzero(~side)
    return float(weights[np.ix_(ia, ib)].sum())


def prune_to_sizes(
    bipartite: tuple[Sequence[str], Sequence[str]],
    m: int,
    n: int,
    graph: CorrelationGraph,
) -> DeviceSplit:
    """Trim a bipartition to exactly (m, n) devices.

    While a side is oversized, remove from it the device with the highest
    total correlation to the current opposite side (ties to the
    lexicographically smallest device_id). The first side becomes the source
    pool; if the sides only fit the requested sizes after swapping roles,
    they are swapped.
    """
    side_a, side_b = list(bipartite[0]), list(bipartite[1])
    if len(side_a) < m or len(side_b) < n:
        if len(side_b) >= m and len(side_a) >= n:
            side_a, side_b = side_b, side_a
        else:
            raise SideTooSmall(
                f"sides of sizes ({len(side_a)}, {len(side_b)}) cannot provide ({m}, {n})"
            )
    index = {d: i for i, d in enumerate(graph.devices)}
    corr = graph.correlations

    def cross_corr(device: str, other_side: list[str]) -> float:
        i = index[device]
        return float(sum(corr[i, index[o]] for o in other_side))

    while len(side_a) > m or len(side_b) > n:
        if len(side_a) > m:
            victim = max(sorted(side_a), key=lambda d: cross_corr(d, side_b))
            side_a.remove(victim)
        if len(side_b) > n:
            victim = max(sorted(side_b), key=lambda d: cross_corr(d, side_a))
            side_b.remove(victim)

    objective = float(
        np.mean([corr[index[a], index[b]] for a in side_a for b in side_b])
    )
    return DeviceSplit(source=tuple(side_a), target=tuple(side_b), objective=objective)
