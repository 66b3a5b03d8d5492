from __future__ import annotations
import itertools
import logging

import numpy as np

from ccbif.interval import Box, disjoint
from ccbif.polysys import PAIRS

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-9


class GroupElement:
    """A relabelling of bodies acting on distance (6) or Dziobek (8) coordinates.

    ``permutation`` holds sigma with (Phi x)_k = x_sigma(k) on the six
    distances; lambda0 and mu are always fixed.
    """

    __slots__ = ("group", "label", "permutation")

    def __init__(self, group, label, permutation):
        if sorted(permutation) != list(range(6)):
            raise ValueError(f"{permutation} is not a permutation of the six distances")
        self.group = group
        self.label = label
        self.permutation = tuple(permutation)

    def __repr__(self):
        return f"GroupElement({self.group}:{self.label})"

    def __eq__(self, other):
        return isinstance(other, GroupElement) and self.permutation == other.permutation

    def __hash__(self):
        return hash(self.permutation)

    @property
    def dziobek_permutation(self):
        return (0, 1) + tuple(2 + k for k in self.permutation)

    def permutation_for(self, size):
        if size == 6:
            return self.permutation
        if size == 8:
            return self.dziobek_permutation
        raise ValueError(f"group acts on 6 or 8 coordinates, got {size}")

    def __call__(self, x):
        return act(self, x)


class Group:
    __slots__ = ("name", "elements", "subgroups")

    def __init__(self, name, permutations, subgroups):
        self.name = name
        self.elements = {label: GroupElement(name, label, p) for label, p in permutations.items()}
        self.subgroups = tuple(subgroups)

    def __repr__(self):
        return f"Group({self.name})"

    def __iter__(self):
        return iter(self.elements.values())

    def __len__(self):
        return len(self.elements)

    @property
    def order(self):
        return len(self.elements)

    @property
    def identity(self):
        return self.elements["E"]

    def element(self, label):
        try:
            return self.elements[label]
        except KeyError:
            raise ValueError(f"{self.name} has no element {label!r}") from None

    def by_permutation(self, permutation):
        for g in self:
            if g.permutation == tuple(permutation):
                return g
        raise ValueError(f"permutation {permutation} is not in {self.name}")

    def compose(self, g, h):
        """g o h, the action of applying h first and then g."""
        g, h = self._element(g), self._element(h)
        return self.by_permutation(tuple(h.permutation[g.permutation[k]] for k in range(6)))

    def inverse(self, g):
        g = self._element(g)
        return next(h for h in self if self.compose(g, h) == self.identity)

    def _element(self, g):
        return self.element(g) if isinstance(g, str) else g

    def cayley_table(self):
        return {g.label: {h.label: self.compose(g, h).label for h in self} for g in self}

    def subgroup(self, label):
        for name, members in self.subgroups:
            if name == label:
                return [self.elements[m] for m in members]
        raise ValueError(f"{self.name} has no listed subgroup {label!r}")


def _subgroup_label(group_name, members):
    if len(members) == 1:
        return "trivial"
    if group_name and len(members) in (4, 6):
        return group_name
    return "{" + ",".join(members) + "}"


def _listed(name, member_sets):
    return [(_subgroup_label(name, m), tuple(m)) for m in member_sets]


D6 = Group(
    "D6",
    {
        "E": (0, 1, 2, 3, 4, 5),
        "g1": (1, 0, 2, 3, 5, 4),
        "g2": (3, 1, 5, 0, 4, 2),
        "g3": (0, 3, 4, 1, 2, 5),
        "g4": (1, 3, 5, 0, 2, 4),
        "g5": (3, 0, 4, 1, 5, 2),
    },
    _listed("D6", [("E",), ("E", "g1"), ("E", "g2"), ("E", "g3"), ("E", "g4", "g5"),
                   ("E", "g1", "g2", "g3", "g4", "g5")]),
)

KLEIN4 = Group(
    "Klein4",
    {
        "E": (0, 1, 2, 3, 4, 5),
        "h1": (0, 3, 4, 1, 2, 5),
        "h2": (0, 2, 1, 4, 3, 5),
        "h3": (0, 4, 3, 2, 1, 5),
    },
    _listed("Klein4", [("E",), ("E", "h1"), ("E", "h2"), ("E", "h3"), ("E", "h1", "h2", "h3")]),
)

GROUPS = {"D6": D6, "Klein4": KLEIN4}


def group_for(pattern):
    if pattern == "three-equal":
        return D6
    if pattern == "two-pairs":
        return KLEIN4
    raise ValueError(f"no symmetry group for mass pattern {pattern!r}")


def get_group(name):
    try:
        return GROUPS[name]
    except KeyError:
        raise ValueError(f"unknown group {name!r}") from None


def act(g, x):
    if isinstance(x, Box):
        perm = g.permutation_for(len(x))
        return Box([x[k] for k in perm])
    if isinstance(x, np.ndarray):
        return x[list(g.permutation_for(x.shape[-1]))] if x.ndim == 1 else x[..., list(g.permutation_for(x.shape[-1]))]
    perm = g.permutation_for(len(x))
    return [x[k] for k in perm]


class EquivarianceReport:
    __slots__ = ("group", "kind", "permutations", "offending")

    def __init__(self, group, kind, permutations, offending):
        self.group = group
        self.kind = kind
        self.permutations = permutations
        self.offending = offending

    @property
    def equivariant(self):
        return not self.offending

    def __bool__(self):
        return self.equivariant

    def to_json(self):
        return {
            "group": self.group,
            "system": self.kind,
            "equivariant": self.equivariant,
            "permutations": {k: list(v) for k, v in self.permutations.items()},
            "offending": [[g, i] for g, i in self.offending],
        }


def check_equivariance(system, group):
    """Exact check that F(Phi_g x) is a permutation of F(x) for every g."""
    permutations, offending = {}, []
    size = system.dimension
    for g in group:
        perm = tuple(g.permutation_for(size)) + (system.parameter_index,)
        lookup = {eq: j for j, eq in enumerate(system.equations)}
        image = []
        for i, eq in enumerate(system.equations):
            j = lookup.get(eq.permute(perm))
            if j is None:
                offending.append((g.label, i))
            image.append(j)
        if all(j is not None for j in image):
            permutations[g.label] = tuple(image)
    if offending:
        logger.info("%s system is not %s-equivariant at %d equations", system.kind, group.name, len(offending))
    return EquivarianceReport(group.name, system.kind, permutations, offending)


class IsotropyTag:
    __slots__ = ("group", "label", "elements", "tolerance")

    def __init__(self, group, label, elements, tolerance):
        self.group = group
        self.label = label
        self.elements = tuple(elements)
        self.tolerance = tolerance

    def __str__(self):
        return self.label

    def __repr__(self):
        return f"IsotropyTag({self.group}:{self.label})"

    def __eq__(self, other):
        if isinstance(other, str):
            return self.label == other
        return isinstance(other, IsotropyTag) and (self.group, self.label) == (other.group, other.label)

    def __hash__(self):
        return hash((self.group, self.label))

    @property
    def order(self):
        return len(self.elements)

    def involution(self):
        """The non-identity element of an order-two isotropy, else None."""
        if self.order != 2:
            return None
        return next(g for g in self.elements if g.label != "E")

    def to_json(self):
        return {"group": self.group, "label": self.label, "tolerance": self.tolerance}


def _fixes(g, x, tol):
    image = act(g, x)
    if isinstance(x, Box):
        return not any(disjoint(a, b) for a, b in zip(image, x))
    return float(np.max(np.abs(np.asarray(image, dtype=float) - np.asarray(x, dtype=float)))) <= tol


def isotropy(x, group, tol=DEFAULT_TOLERANCE):
    """Largest listed subgroup fixing ``x``; boxes are compared by overlap."""
    fixing = {g.label for g in group if _fixes(g, x, tol)}
    best = None
    for label, members in group.subgroups:
        if set(members) <= fixing and (best is None or len(members) > len(best[1])):
            best = (label, members)
    label, members = best
    return IsotropyTag(group.name, label, [group.elements[m] for m in members], None if isinstance(x, Box) else tol)


class UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = {x: 0 for x in items}
        self.size = {x: 1 for x in items}

    def find(self, x):
        y = self.parent[x]
        if self.parent[y] != y:
            y = self.parent[x] = self.find(y)
        return y

    def union(self, x, y):
        x, y = self.find(x), self.find(y)
        if x == y:
            return
        if self.rank[x] < self.rank[y]:
            x, y = y, x
        elif self.rank[x] == self.rank[y]:
            self.rank[x] += 1
        self.parent[y] = x
        self.size[x] += self.size[y]
        del self.rank[y]

    def reps(self):
        return set(self.rank)

    def __len__(self):
        return len(self.rank)


class Orbit:
    __slots__ = ("representative", "size", "members")

    def __init__(self, representative, size, members):
        self.representative = representative
        self.size = size
        self.members = members

    def __repr__(self):
        return f"Orbit(size={self.size}, members={self.members})"


def _distinct(points, tol):
    kept = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in kept):
            kept.append(p)
    return kept


def orbit_dedup(solutions, group, tol=DEFAULT_TOLERANCE):
    """Partition float solutions into group orbits.

    Each orbit is represented by the lexicographically smallest image of its
    members; its size counts the distinct images of that representative.
    """
    points = [np.asarray(s, dtype=float) for s in solutions]
    uf = UnionFind(range(len(points)))
    for g in group:
        for i, x in enumerate(points):
            image = act(g, x)
            for j, y in enumerate(points):
                if j != i and np.max(np.abs(image - y)) <= tol:
                    uf.union(i, j)
    groups = {}
    for i in range(len(points)):
        groups.setdefault(uf.find(i), []).append(i)
    orbits = []
    for members in groups.values():
        images = [act(g, points[i]) for i in members for g in group]
        rep = min(images, key=lambda p: tuple(np.round(p, 12)))
        size = len(_distinct([act(g, rep) for g in group], tol))
        orbits.append(Orbit(rep, size, sorted(members)))
    orbits.sort(key=lambda o: tuple(np.round(o.representative, 12)))
    return orbits


def orbit_points(x, group, tol=DEFAULT_TOLERANCE):
    return _distinct([act(g, np.asarray(x, dtype=float)) for g in group], tol)


def relabel(r, bodies):
    """Distances after renaming bodies: new r_ij = old r_{pi(i) pi(j)}; ``bodies`` is pi on 1..4."""
    if sorted(bodies) != [1, 2, 3, 4]:
        raise ValueError(f"{bodies} is not a permutation of the four bodies")
    pi = dict(zip((1, 2, 3, 4), bodies))
    r = list(r)
    out = []
    for i, j in PAIRS:
        a, b = sorted((pi[i], pi[j]))
        out.append(r[PAIRS.index((a, b))])
    return np.asarray(out, dtype=float)


def relabellings():
    return list(itertools.permutations((1, 2, 3, 4)))
