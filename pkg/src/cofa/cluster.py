"""Complete-linkage agglomerative clustering of levels, tree cutting, and
dendrogram export (Newick, merge table)."""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cofrequency import DistanceMatrix


@dataclass(frozen=True)
class Dendrogram:
    """Merge history. Ids below ``n_levels`` are levels; merge ``i`` creates
    cluster id ``n_levels + i``."""

    merges: tuple  # of (a, b, height)
    level_names: tuple

    @property
    def n_levels(self) -> int:
        return len(self.level_names)

    def members(self) -> dict[int, frozenset]:
        out = {i: frozenset([i]) for i in range(self.n_levels)}
        for k, (a, b, _) in enumerate(self.merges):
            out[self.n_levels + k] = out[a] | out[b]
        return out

    def clusters(self) -> dict[frozenset, float]:
        """Every merged cluster (as a set of level names) with its height."""
        members = self.members()
        return {frozenset(self.level_names[i] for i in members[self.n_levels + k]): h
                for k, (_, _, h) in enumerate(self.merges)}

    @property
    def heights(self) -> np.ndarray:
        return np.array([h for _, _, h in self.merges])


def complete_linkage(d: DistanceMatrix) -> Dendrogram:
    """Agglomerate by minimal complete-linkage distance.

    Ties go to the lexicographically smallest pair of clusters, each cluster
    being identified by its smallest level index.
    """
    n = d.n_levels
    if n < 2:
        raise ValueError("need at least two levels")
    D = np.array(d.d, dtype=np.float64)
    if not np.allclose(D, D.T, equal_nan=False):
        raise ValueError("distance matrix must be symmetric")
    # active clusters keyed by their smallest level index
    dist = D.copy()
    np.fill_diagonal(dist, np.inf)
    active = list(range(n))  # smallest level index of each active cluster, kept sorted
    cid = {i: i for i in range(n)}  # smallest level index -> cluster id
    merges = []
    for step in range(n - 1):
        best = np.inf
        pair = None
        for ai, a in enumerate(active):
            for b in active[ai + 1:]:
                if dist[a, b] < best:
                    best = dist[a, b]
                    pair = (a, b)
        a, b = pair
        merges.append((cid[a], cid[b], float(best)))
        # merged cluster keeps key a (a < b)
        new = np.maximum(dist[a], dist[b])
        dist[a, :] = new
        dist[:, a] = new
        dist[a, a] = np.inf
        dist[b, :] = np.inf
        dist[:, b] = np.inf
        active.remove(b)
        cid[a] = n + step
        del cid[b]
    return Dendrogram(tuple(merges), d.level_names)


@dataclass(frozen=True)
class ClusterAssignment:
    groups: tuple  # group index (1-based) per level, aligned with level_names
    level_names: tuple
    k: int

    @property
    def mapping(self) -> dict[str, int]:
        return dict(zip(self.level_names, self.groups))

    def members(self, group: int) -> list[str]:
        return [lv for lv, g in zip(self.level_names, self.groups) if g == group]

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "group"])
        for lv, g in zip(self.level_names, self.groups):
            w.writerow([lv, g])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ClusterAssignment":
        rows = list(csv.reader(ln for ln in text.splitlines() if not ln.startswith("#")))[1:]
        names = tuple(r[0] for r in rows)
        groups = tuple(int(r[1]) for r in rows)
        return cls(groups, names, len(set(groups)))


def cut_tree(dg: Dendrogram, k: int) -> ClusterAssignment:
    """Undo the last ``k - 1`` merges; groups numbered by first appearance
    in level order."""
    n = dg.n_levels
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    members = dg.members()
    for a, b, _ in dg.merges[: n - k]:
        ra = find(min(members[a]))
        rb = find(min(members[b]))
        parent[max(ra, rb)] = min(ra, rb)
    label: dict[int, int] = {}
    groups = []
    for i in range(n):
        groups.append(label.setdefault(find(i), len(label) + 1))
    return ClusterAssignment(tuple(groups), dg.level_names, k)


# ---------------------------------------------------------------------------
# Newick

_NEEDS_QUOTE = re.compile(r"[\s(),:;\[\]']")


def _quote(name: str) -> str:
    if _NEEDS_QUOTE.search(name) or not name:
        return "'" + name.replace("'", "''") + "'"
    return name


def export_newick(dg: Dendrogram) -> str:
    """Newick text; a child's branch length is its parent's merge height
    minus its own (levels sit at height 0)."""
    n = dg.n_levels
    height = {i: 0.0 for i in range(n)}
    for k, (_, _, h) in enumerate(dg.merges):
        height[n + k] = h

    def render(node: int) -> str:
        if node < n:
            return _quote(dg.level_names[node])
        a, b, _ = dg.merges[node - n]
        parts = [f"{render(c)}:{height[node] - height[c]!r}" for c in (a, b)]
        return "(" + ",".join(parts) + ")"

    if not dg.merges:
        return _quote(dg.level_names[0]) + ";"
    return render(n + len(dg.merges) - 1) + ";"


def parse_newick(text: str) -> Dendrogram:
    """Parse the binary Newick produced by :func:`export_newick`.

    Merge heights are recovered from branch lengths (the distance from a
    node down to its leftmost level); leaves are numbered in order of
    appearance.
    """
    s = re.sub(r"^\s*(\[[^\]]*\]\s*)*", "", text).strip()  # leading [comments]
    pos = 0

    def parse_name():
        nonlocal pos
        if s[pos] == "'":
            pos += 1
            out = []
            while True:
                if s[pos] == "'":
                    if pos + 1 < len(s) and s[pos + 1] == "'":
                        out.append("'")
                        pos += 2
                        continue
                    pos += 1
                    break
                out.append(s[pos])
                pos += 1
            return "".join(out)
        start = pos
        while s[pos] not in "(),:;":
            pos += 1
        return s[start:pos]

    def parse_length():
        nonlocal pos
        if s[pos] != ":":
            return 0.0
        pos += 1
        start = pos
        while s[pos] not in ",);":
            pos += 1
        return float(s[start:pos])

    leaves: list[str] = []
    internal = []  # (left subtree, right subtree, height)

    def parse_node():
        # returns (kind, ref, height) where ref is a leaf index or internal index
        nonlocal pos
        if s[pos] == "(":
            pos += 1
            kids = []
            while True:
                node = parse_node()
                length = parse_length()
                kids.append((node, length))
                if s[pos] == ",":
                    pos += 1
                    continue
                if s[pos] == ")":
                    pos += 1
                    break
                raise ValueError(f"unexpected {s[pos]!r} at {pos}")
            if len(kids) != 2:
                raise ValueError("only binary trees are supported")
            (left, llen), (right, _) = kids
            h = left[2] + llen
            internal.append((left, right, h))
            return ("node", len(internal) - 1, h)
        leaves.append(parse_name())
        return ("leaf", len(leaves) - 1, 0.0)

    parse_node()
    if s[pos] != ";":
        raise ValueError("Newick string must end with ';'")
    n = len(leaves)
    # merges in order of increasing height; children always precede parents
    order = sorted(range(len(internal)), key=lambda i: (internal[i][2], i))
    new_id = {}
    merges = []
    for k, i in enumerate(order):
        left, right, h = internal[i]
        ids = [c[1] if c[0] == "leaf" else new_id[c[1]] for c in (left, right)]
        merges.append((ids[0], ids[1], h))
        new_id[i] = n + k
    return Dendrogram(tuple(merges), tuple(leaves))


def merge_table_csv(dg: Dendrogram, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "a", "b", "height", "a_members", "b_members"])
    members = dg.members()
    for k, (a, b, h) in enumerate(dg.merges):
        names = [";".join(dg.level_names[i] for i in sorted(members[c])) for c in (a, b)]
        w.writerow([k, a, b, repr(float(h)), *names])
    return buf.getvalue()


def adjusted_rand_index(a: Sequence, b: Sequence) -> float:
    """Chance-corrected agreement of two labelings of the same items."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)

    def c2(x):
        return (x * (x - 1) // 2).sum()

    n = len(a)
    index = c2(table)
    ra, rb = c2(table.sum(axis=1)), c2(table.sum(axis=0))
    expected = ra * rb / (n * (n - 1) / 2)
    max_index = 0.5 * (ra + rb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
