"""
Represents and validates the category hierarchy (a rooted tree of
labelled categories with uniform leaf depth) and label paths through it.
"""
import json
import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .schemas import TaxonomyRecord

logger = logging.getLogger(__name__)

LabelPath = Tuple[str, ...]


class TaxonomyError(ValueError):
    """
    Raised when a hierarchy violates a structural invariant.
    `node_id` names the offending node.
    """

    def __init__(self, kind: str, node_id: str, message: str):
        super().__init__(f"{message} (node={node_id!r})")
        self.kind = kind
        self.node_id = node_id


class MalformedPathError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    """
    Immutable category hierarchy.

    Level 0 holds only the root, which is never classified; levels 1..L
    are the classification levels and every leaf sits at level L.
    """
    root: str
    labels: Mapping[str, str]
    parents: Mapping[str, Optional[str]]
    level_of: Mapping[str, int]
    level_count: int

    @property
    def nodes(self) -> List[str]:
        return sorted(self.labels)

    @property
    def edges(self) -> List[Tuple[str, str]]:
        return sorted(
            (parent, child) for child, parent in self.parents.items() if parent is not None
        )

    def label_of(self, node_id: str) -> str:
        return self.labels[node_id]

    def parent_of(self, node_id: str) -> Optional[str]:
        return self.parents[node_id]

    def children_of(self, node_id: str) -> List[str]:
        return sorted(c for c, p in self.parents.items() if p == node_id)

    def is_edge(self, parent: str, child: str) -> bool:
        return self.parents.get(child) == parent and parent is not None

    def level_sizes(self) -> List[int]:
        """
        Number of categories N_l at each level 1..L.
        """
        return [len(categories_at(self, level)) for level in range(1, self.level_count + 1)]

    def export_records(self) -> List[TaxonomyRecord]:
        """
        Canonical record list, ordered by (level, id).
        """
        ordered = sorted(self.labels, key=lambda n: (self.level_of[n], n))
        return [
            TaxonomyRecord(id=n, label=self.labels[n], parent=self.parents[n])
            for n in ordered
        ]


def build_taxonomy(
    edge_list: Iterable[Tuple[str, str]],
    labels: Mapping[str, str],
    root: str,
) -> Taxonomy:
    """
    Build and validate a Taxonomy from parent-child edges.

    Checks, in order: missing or empty labels, nodes with two parents,
    cycles, nodes unreachable from the root, and non-uniform leaf depth.
    Each failure raises TaxonomyError naming the offending node.
    """
    from .corpus import tokenize

    edges = list(edge_list)
    if not edges:
        raise ValueError("edge list must be non-empty")

    node_ids = {root}
    for parent, child in edges:
        node_ids.update((parent, child))

    for node in sorted(node_ids):
        if node not in labels:
            raise TaxonomyError("missing_label", node, "no label text for node")
        if not tokenize(labels[node]):
            raise TaxonomyError("empty_label", node, "label text has no tokens")

    parents: Dict[str, Optional[str]] = {n: None for n in node_ids}
    for parent, child in edges:
        existing = parents[child]
        if existing is not None and existing != parent:
            raise TaxonomyError("two_parents", child, f"node has parents {existing!r} and {parent!r}")
        parents[child] = parent

    for node in sorted(node_ids):
        seen = {node}
        current = parents[node]
        while current is not None:
            if current in seen:
                raise TaxonomyError("cycle", current, "cycle detected")
            seen.add(current)
            current = parents[current]

    children: Dict[str, List[str]] = {n: [] for n in node_ids}
    for child, parent in parents.items():
        if parent is not None:
            children[parent].append(child)

    level_of: Dict[str, int] = {root: 0}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for child in sorted(children[node]):
            level_of[child] = level_of[node] + 1
            queue.append(child)

    for node in sorted(node_ids):
        if node not in level_of:
            raise TaxonomyError("unreachable", node, "node is not reachable from the root")

    leaf_levels = {level_of[n] for n in node_ids if not children[n]}
    level_count = max(leaf_levels)
    for node in sorted(node_ids):
        if not children[node] and level_of[node] != level_count:
            raise TaxonomyError(
                "non_uniform_depth",
                node,
                f"leaf at level {level_of[node]}, expected level {level_count}",
            )

    return Taxonomy(
        root=root,
        labels={n: labels[n] for n in sorted(node_ids)},
        parents={n: parents[n] for n in sorted(node_ids)},
        level_of={n: level_of[n] for n in sorted(node_ids)},
        level_count=level_count,
    )


def categories_at(tax: Taxonomy, level: int) -> List[str]:
    """
    Categories of one classification level in lexicographic id order.
    This order is the class-index mapping of that level's classifier.
    """
    if level < 1 or level > tax.level_count:
        raise ValueError(f"level must be in 1..{tax.level_count}, got {level}")
    return sorted(n for n, lvl in tax.level_of.items() if lvl == level)


def class_index(tax: Taxonomy, level: int) -> Dict[str, int]:
    return {node: i for i, node in enumerate(categories_at(tax, level))}


def check_path_shape(tax: Taxonomy, path: Sequence[str]) -> None:
    if len(path) != tax.level_count:
        raise MalformedPathError(
            f"path has length {len(path)}, taxonomy has {tax.level_count} levels"
        )
    for position, node in enumerate(path, start=1):
        if tax.level_of.get(node) != position:
            raise MalformedPathError(f"node {node!r} is not a level-{position} category")


def validate_path(tax: Taxonomy, path: Sequence[str]) -> bool:
    """
    True iff every consecutive pair of the path (starting from the root)
    is a taxonomy edge. Raises MalformedPathError on wrong length or levels.
    """
    check_path_shape(tax, path)
    full = [tax.root, *path]
    return all(tax.is_edge(p, c) for p, c in zip(full, full[1:]))


def taxonomy_from_records(records: Iterable[TaxonomyRecord]) -> Taxonomy:
    records = list(records)
    roots = [r.id for r in records if r.parent is None]
    if len(roots) != 1:
        raise TaxonomyError("root", ",".join(sorted(roots)) or "-", "exactly one root record required")
    labels: Dict[str, str] = {}
    for r in records:
        if r.id in labels:
            raise TaxonomyError("duplicate_id", r.id, "node id appears in more than one record")
        labels[r.id] = r.label
    edges = [(r.parent, r.id) for r in records if r.parent is not None]
    return build_taxonomy(edges, labels, roots[0])


def read_taxonomy(path: str) -> Taxonomy:
    """
    Load a taxonomy from a JSON-lines file of {"id", "label", "parent"} records.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Taxonomy file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        records = [TaxonomyRecord.model_validate_json(line) for line in f if line.strip()]

    tax = taxonomy_from_records(records)
    logger.info(
        "Loaded taxonomy",
        extra={"path": str(path), "levels": tax.level_count, "level_sizes": tax.level_sizes()},
    )
    return tax


def write_taxonomy(path: str, tax: Taxonomy) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in tax.export_records():
            f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
