"""Semantic class hierarchy and least-common-ancestor queries.

The hierarchy is a rooted tree with exactly two levels below the root::

    object
      vehicle     -> car, truck, ...
      pedestrian  -> adult, child, ...
      movable     -> barrier, traffic-cone, ...

Leaves are the fine classes that get evaluated; the middle level holds the
coarse superclasses.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import yaml


class HierarchyError(ValueError):
    """Base class for hierarchy validation failures."""


class CycleError(HierarchyError):
    pass


class DuplicateClassError(HierarchyError):
    pass


class DuplicateParentError(DuplicateClassError):
    """A class is listed under more than one parent."""


class DepthError(HierarchyError):
    pass


class MultipleRootsError(HierarchyError):
    pass


class NoFineClassesError(HierarchyError):
    pass


class UnknownClassError(KeyError):
    def __init__(self, name: str, what: str = "class"):
        super().__init__(name)
        self.name = name
        self.what = what

    def __str__(self) -> str:
        return f"unknown {self.what}: {self.name!r}"


FINE_DEPTH = 2


NUSCENES_TREE: dict[str, list[str]] = {
    "vehicle": [
        "car",
        "truck",
        "trailer",
        "bus",
        "construction-vehicle",
        "bicycle",
        "motorcycle",
        "emergency-vehicle",
    ],
    "pedestrian": [
        "adult",
        "child",
        "construction-worker",
        "police-officer",
        "stroller",
        "wheelchair",
        "personal-mobility",
    ],
    "movable": [
        "barrier",
        "traffic-cone",
        "pushable-pullable",
        "debris",
    ],
}

PRESETS: dict[str, dict] = {
    "nuscenes": {"root": "object", "children": NUSCENES_TREE},
}


@dataclass(frozen=True)
class ClassHierarchy:
    """Immutable depth-2 class tree.

    Build it with :meth:`from_parents` or :func:`load_hierarchy`; the
    constructor expects an already-validated parent map.
    """

    root: str
    parent: Mapping[str, str]
    nodes: tuple[str, ...] = field(repr=False)
    fine_classes: tuple[str, ...] = field(repr=False)
    coarse_classes: tuple[str, ...] = field(repr=False)
    _children: Mapping[str, tuple[str, ...]] = field(repr=False, compare=False)

    @classmethod
    def from_parents(cls, parent: Mapping[str, str], nodes: Iterable[str] | None = None) -> "ClassHierarchy":
        """Validate a child -> parent map and build the hierarchy.

        ``nodes`` may list extra nodes (e.g. a root with no children); every
        name that appears in ``parent`` is included automatically.
        """
        order: list[str] = []
        seen: set[str] = set()

        def _add(name: str) -> None:
            if not isinstance(name, str) or not name:
                raise HierarchyError(f"class names must be non-empty strings, got {name!r}")
            if name not in seen:
                seen.add(name)
                order.append(name)

        for name in nodes or ():
            _add(name)
        for child, par in parent.items():
            _add(par)
            _add(child)

        roots = [n for n in order if n not in parent]
        if not roots:
            raise CycleError("no root: every class has a parent, so the parent map contains a cycle")

        children: dict[str, list[str]] = {n: [] for n in order}
        for child, par in parent.items():
            children[par].append(child)

        # Walk up from every node; revisiting a node on the same path means a cycle.
        for start in order:
            path = {start}
            cur = start
            while cur in parent:
                cur = parent[cur]
                if cur in path:
                    raise CycleError(f"cycle through {cur!r}")
                path.add(cur)

        if len(roots) > 1:
            raise MultipleRootsError(f"expected exactly one root, found {sorted(roots)}")
        root = roots[0]

        depth = {root: 0}
        stack = [root]
        while stack:
            node = stack.pop()
            for ch in children[node]:
                depth[ch] = depth[node] + 1
                stack.append(ch)

        leaves = [n for n in order if n != root and not children[n]]
        if not leaves:
            raise NoFineClassesError("hierarchy has no fine classes")
        for leaf in leaves:
            if depth[leaf] != FINE_DEPTH:
                raise DepthError(
                    f"fine class {leaf!r} is at depth {depth[leaf]}, expected {FINE_DEPTH}"
                )
        coarse = [n for n in order if depth[n] == 1]

        return cls(
            root=root,
            parent=MappingProxyType(dict(parent)),
            nodes=tuple(order),
            fine_classes=tuple(leaves),
            coarse_classes=tuple(coarse),
            _children=MappingProxyType({k: tuple(v) for k, v in children.items()}),
        )

    @classmethod
    def from_document(cls, doc: Mapping) -> "ClassHierarchy":
        """Build from a ``{"root": ..., "children": {coarse: [fine, ...]}}`` mapping."""
        if not isinstance(doc, Mapping):
            raise HierarchyError("hierarchy document must be a mapping")
        root = doc.get("root")
        if isinstance(root, (list, tuple)):
            if len(root) != 1:
                raise MultipleRootsError(f"expected exactly one root, found {list(root)}")
            root = root[0]
        if not isinstance(root, str) or not root:
            raise HierarchyError("'root' must be a non-empty string")
        tree = doc.get("children") or {}
        if not isinstance(tree, Mapping):
            raise HierarchyError("'children' must map coarse class -> list of fine classes")

        parent: dict[str, str] = {}

        def _link(child: str, par: str) -> None:
            if child in parent:
                if parent[child] == par:
                    raise DuplicateClassError(f"class {child!r} listed twice under {par!r}")
                raise DuplicateParentError(
                    f"class {child!r} has two parents: {parent[child]!r} and {par!r}"
                )
            parent[child] = par

        for coarse, fines in tree.items():
            if coarse == root:
                raise CycleError(f"root {root!r} listed as its own child")
            _link(coarse, root)
            if not isinstance(fines, (list, tuple)):
                raise HierarchyError(f"children of {coarse!r} must be a list")
            for fine in fines:
                if fine in tree or fine == root:
                    # A fine class that is also a coarse class (or the root) closes a loop
                    # or pushes some leaf below depth 2.
                    if fine == root or fine == coarse:
                        raise CycleError(f"class {fine!r} is its own ancestor")
                    raise DepthError(f"class {fine!r} is listed as both coarse and fine")
                _link(fine, coarse)
        return cls.from_parents(parent, nodes=[root])

    # -- queries ---------------------------------------------------------

    def __contains__(self, name: object) -> bool:
        return name in self._children

    def is_fine(self, name: str) -> bool:
        return name in self._children and name != self.root and not self._children[name]

    def children(self, name: str) -> tuple[str, ...]:
        self._require(name)
        return self._children[name]

    def coarse_of(self, fine: str) -> str:
        self._require_fine(fine)
        return self.parent[fine]

    def depth(self, name: str) -> int:
        self._require(name)
        d = 0
        while name in self.parent:
            name = self.parent[name]
            d += 1
        return d

    def ancestors(self, name: str) -> list[str]:
        """Path from ``name`` up to the root, inclusive of both."""
        self._require(name)
        path = [name]
        while name in self.parent:
            name = self.parent[name]
            path.append(name)
        return path

    def lca(self, a: str, b: str) -> str:
        up_a = self.ancestors(a)
        up_b = set(self.ancestors(b))
        for node in up_a:
            if node in up_b:
                return node
        raise AssertionError("tree has a single root")  # pragma: no cover

    def _require(self, name: str) -> None:
        if name not in self._children:
            raise UnknownClassError(name)

    def _require_fine(self, name: str) -> None:
        if not self.is_fine(name):
            if name in self._children:
                raise UnknownClassError(name, "fine class")
            raise UnknownClassError(name)


def lca_distance(h: ClassHierarchy, a: str, b: str) -> int:
    """Steps from ``a`` up to its least common ancestor with ``b``.

    0 for identical classes, 1 for siblings under one coarse class, 2 when the
    only shared ancestor is the root.
    """
    h._require_fine(a)
    h._require_fine(b)
    return h.depth(a) - h.depth(h.lca(a, b))


def siblings(h: ClassHierarchy, c: str) -> frozenset[str]:
    """Other fine classes under the same coarse parent."""
    h._require_fine(c)
    return frozenset(d for d in h.children(h.parent[c]) if d != c)


def load_hierarchy(source: str | Path | Mapping = "nuscenes") -> ClassHierarchy:
    """Load a hierarchy from a preset name, a JSON/YAML file, or a mapping."""
    if isinstance(source, Mapping):
        return ClassHierarchy.from_document(source)
    if isinstance(source, str) and source in PRESETS:
        return ClassHierarchy.from_document(PRESETS[source])
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no hierarchy preset or file named {str(source)!r}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        doc = json.loads(text)
    else:
        doc = yaml.safe_load(text)
    return ClassHierarchy.from_document(doc)


def hierarchy_document(h: ClassHierarchy) -> dict:
    return {"root": h.root, "children": {c: list(h.children(c)) for c in h.coarse_classes}}


class Bucket(str, enum.Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


DEFAULT_MANY_THRESHOLD = 50_000
DEFAULT_FEW_THRESHOLD = 5_000


@dataclass(frozen=True)
class CardinalityBuckets:
    """Per-class instance counts plus the Many/Few cut points.

    count > many_threshold is Many, count < few_threshold is Few, and
    everything in between (both ends inclusive) is Medium.
    """

    counts: Mapping[str, int]
    many_threshold: int = DEFAULT_MANY_THRESHOLD
    few_threshold: int = DEFAULT_FEW_THRESHOLD

    def __post_init__(self):
        if self.few_threshold > self.many_threshold:
            raise ValueError("few_threshold must not exceed many_threshold")

    def bucket_of(self, count: int) -> Bucket:
        if count < 0:
            raise ValueError(f"negative instance count {count}")
        if count > self.many_threshold:
            return Bucket.MANY
        if count < self.few_threshold:
            return Bucket.FEW
        return Bucket.MEDIUM


def bucket_classes(buckets: CardinalityBuckets, classes: Iterable[str] | None = None) -> dict[str, Bucket]:
    """Assign every class to Many/Medium/Few.

    ``classes`` lists the classes to assign (e.g. a hierarchy's fine classes);
    ones missing from ``buckets.counts`` count as 0.
    """
    names = list(classes) if classes is not None else list(buckets.counts)
    for name, count in buckets.counts.items():
        if count < 0:
            raise ValueError(f"negative instance count {count} for class {name!r}")
    return {name: buckets.bucket_of(int(buckets.counts.get(name, 0))) for name in names}
