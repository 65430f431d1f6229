"""Knowledge-graph storage, split loading, and the Levi transform."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import IntegrityError, ParseError

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class EntityNode:
    entity: int


@dataclass(frozen=True)
class RelationNode:
    relation: int


LeviNode = Union[EntityNode, RelationNode]


@dataclass
class LeviGraph:
    """Rewrite of a triple set where every triple becomes its own relation node.

    A triple (h, r, t) contributes one relation node with exactly two directed
    edges, head -> relation and relation -> tail, so ``node_count`` is the
    number of distinct entities plus the number of triples and ``edge_count``
    is twice the number of triples. Entity nodes occupy indexes
    ``[0, entity_node_count)``; relation nodes follow in triple order.
    """

    nodes: list[LeviNode]
    edges: list[tuple[int, int]]
    entity_node_count: int

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def attention_mask(self) -> np.ndarray:
        """Boolean [n, n] mask: symmetrized adjacency plus the diagonal.

        The diagonal is included so every node (isolated entities included)
        attends at least to itself.
        """
        n = len(self.nodes)
        mask = np.eye(n, dtype=bool)
        for u, v in self.edges:
            mask[u, v] = True
            mask[v, u] = True
        return mask

    def to_triples(self) -> list[Triple]:
        """Recover the original triples from relation-node incidence."""
        incoming: dict[int, list[int]] = {}
        outgoing: dict[int, list[int]] = {}
        for u, v in self.edges:
            outgoing.setdefault(u, []).append(v)
            incoming.setdefault(v, []).append(u)
        triples = []
        for j in range(self.entity_node_count, len(self.nodes)):
            node = self.nodes[j]
            heads = incoming.get(j, [])
            tails = outgoing.get(j, [])
            if len(heads) != 1 or len(tails) != 1:
                raise ValueError(f"relation node {j} is not incident to exactly one head and one tail")
            h = self.nodes[heads[0]]
            t = self.nodes[tails[0]]
            if not isinstance(h, EntityNode) or not isinstance(t, EntityNode):
                raise ValueError(f"relation node {j} touches a non-entity node")
            triples.append((h.entity, node.relation, t.entity))
        return triples


def triple_transform(triples: Sequence[Triple], extra_entities: Iterable[int] = ()) -> LeviGraph:
    """Build the Levi graph of a triple set.

    Entity nodes are ordered by ascending entity id; relation nodes follow in
    the order the triples were given. ``extra_entities`` adds isolated entity
    nodes (sampled nodes whose induced edges were dropped must stay present).
    """
    ids = {h for h, _, _ in triples} | {t for _, _, t in triples} | set(extra_entities)
    ordered = sorted(ids)
    index = {e: i for i, e in enumerate(ordered)}
    nodes: list[LeviNode] = [EntityNode(e) for e in ordered]
    edges: list[tuple[int, int]] = []
    for h, r, t in triples:
        j = len(nodes)
        nodes.append(RelationNode(r))
        edges.append((index[h], j))
        edges.append((j, index[t]))
    return LeviGraph(nodes=nodes, edges=edges, entity_node_count=len(ordered))


def neighborhood(levi: LeviGraph, node: int) -> frozenset[int]:
    """Indexes adjacent to ``node`` ignoring edge direction (self excluded)."""
    if not 0 <= node < levi.node_count:
        raise IndexError(f"node {node} out of range for {levi.node_count} nodes")
    adjacent = set()
    for u, v in levi.edges:
        if u == node:
            adjacent.add(v)
        elif v == node:
            adjacent.add(u)
    return frozenset(adjacent)


class KnowledgeGraph:
    """A directed multigraph of (head, relation, tail) triples with adjacency indexes."""

    def __init__(self, entity_count: int, relation_count: int, triples: Iterable[Triple]):
        self.entity_count = int(entity_count)
        self.relation_count = int(relation_count)
        self.triples: list[Triple] = [(int(h), int(r), int(t)) for h, r, t in triples]
        seen: set[Triple] = set()
        for i, (h, r, t) in enumerate(self.triples):
            if not (0 <= h < self.entity_count and 0 <= t < self.entity_count):
                raise IntegrityError(f"triple {i}: entity id out of range in {(h, r, t)}")
            if not 0 <= r < self.relation_count:
                raise IntegrityError(f"triple {i}: relation id out of range in {(h, r, t)}")
            if (h, r, t) in seen:
                raise IntegrityError(f"duplicate triple {(h, r, t)}")
            seen.add((h, r, t))
        self._triple_set = seen
        self.out_index: list[list[int]] = [[] for _ in range(self.entity_count)]
        self.in_index: list[list[int]] = [[] for _ in range(self.entity_count)]
        for i, (h, _, t) in enumerate(self.triples):
            self.out_index[h].append(i)
            self.in_index[t].append(i)
        self._csr: dict[str, tuple[np.ndarray, ...]] = {}

    def __len__(self) -> int:
        return len(self.triples)

    def has_triple(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._triple_set

    def successors(self, head: int, relation: int) -> set[int]:
        return {self.triples[i][2] for i in self.out_index[head] if self.triples[i][1] == relation}

    def predecessors(self, tail: int, relation: int) -> set[int]:
        return {self.triples[i][0] for i in self.in_index[tail] if self.triples[i][1] == relation}

    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if "hrt" not in self._csr:
            if self.triples:
                arr = np.asarray(self.triples, dtype=np.int64)
            else:
                arr = np.zeros((0, 3), dtype=np.int64)
            self._csr["hrt"] = (arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())
        return self._csr["hrt"]

    @staticmethod
    def _build_csr(sources: np.ndarray, targets: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(sources, kind="stable")
        counts = np.bincount(sources, minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return indptr, targets[order].astype(np.int64)

    def csr_undirected(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR over unique undirected neighbors (for uniform-neighbor walks)."""
        if "und_unique" not in self._csr:
            heads, _, tails = self._arrays()
            src = np.concatenate([heads, tails])
            dst = np.concatenate([tails, heads])
            pairs = np.unique(np.stack([src, dst], axis=1), axis=0) if src.size else np.zeros((0, 2), dtype=np.int64)
            self._csr["und_unique"] = self._build_csr(pairs[:, 0], pairs[:, 1], self.entity_count)
        return self._csr["und_unique"]

    def csr_undirected_multi(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR over undirected incidences with multiplicity (for edge counting)."""
        if "und_multi" not in self._csr:
            heads, _, tails = self._arrays()
            src = np.concatenate([heads, tails])
            dst = np.concatenate([tails, heads])
            self._csr["und_multi"] = self._build_csr(src, dst, self.entity_count)
        return self._csr["und_multi"]

    def csr_in(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over incoming triples grouped by tail: (indptr, heads, relations)."""
        if "in" not in self._csr:
            heads, rels, tails = self._arrays()
            order = np.argsort(tails, kind="stable")
            counts = np.bincount(tails, minlength=self.entity_count)
            indptr = np.zeros(self.entity_count + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            self._csr["in"] = (indptr, heads[order].astype(np.int64), rels[order].astype(np.int64))
        return self._csr["in"]

    def csr_out(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over outgoing triples grouped by head: (indptr, tails, relations)."""
        if "out" not in self._csr:
            heads, rels, tails = self._arrays()
            order = np.argsort(heads, kind="stable")
            counts = np.bincount(heads, minlength=self.entity_count)
            indptr = np.zeros(self.entity_count + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            self._csr["out"] = (indptr, tails[order].astype(np.int64), rels[order].astype(np.int64))
        return self._csr["out"]


@dataclass
class SplitDataset:
    """Cumulative train/valid/test graphs over one vocabulary.

    ``valid`` contains every train triple plus the validation increment;
    ``test`` contains everything. Vocabularies are optional (id-only datasets).
    """

    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph
    entities: list[str] | None = None
    relations: list[str] | None = None

    @property
    def entity_count(self) -> int:
        return self.train.entity_count

    @property
    def relation_count(self) -> int:
        return self.train.relation_count


def read_vocab(path: Path) -> list[str]:
    tokens = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            token = raw.rstrip("\n")
            if not token:
                raise ParseError(path, lineno, "empty vocabulary token")
            if token in seen:
                raise ParseError(path, lineno, f"duplicate vocabulary token {token!r}")
            seen.add(token)
            tokens.append(token)
    return tokens


def read_triples(
    path: Path,
    entity_ids: dict[str, int] | None = None,
    relation_ids: dict[str, int] | None = None,
) -> list[Triple]:
    """Parse a head<TAB>relation<TAB>tail file.

    Tokens are looked up in the vocabularies when given, otherwise they must be
    integer literals.
    """

    def resolve(token: str, table: dict[str, int] | None, kind: str, lineno: int) -> int:
        if table is not None:
            if token not in table:
                raise ParseError(path, lineno, f"unknown {kind} token {token!r}")
            return table[token]
        try:
            return int(token)
        except ValueError:
            raise ParseError(path, lineno, f"{kind} token {token!r} is not an integer and no vocabulary was given") from None

    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            h = resolve(fields[0], entity_ids, "entity", lineno)
            r = resolve(fields[1], relation_ids, "relation", lineno)
            t = resolve(fields[2], entity_ids, "entity", lineno)
            triples.append((h, r, t))
    return triples


def build_split(
    parts: dict[str, list[Triple]],
    entity_count: int,
    relation_count: int,
    entities: list[str] | None = None,
    relations: list[str] | None = None,
) -> SplitDataset:
    """Assemble cumulative graphs from train/valid/test triple lists.

    Accepts either disjoint increments (each split adds new triples) or
    already-cumulative lists (train subset of valid subset of test); anything
    else raises :class:`IntegrityError`.
    """
    train_set = set(parts["train"])
    valid_set = set(parts["valid"])
    test_set = set(parts["test"])
    if train_set <= valid_set <= test_set:
        cumulative = {
            "train": parts["train"],
            "valid": parts["valid"],
            "test": parts["test"],
        }
    elif not (train_set & valid_set) and not (train_set & test_set) and not (valid_set & test_set):
        cumulative = {
            "train": parts["train"],
            "valid": parts["train"] + parts["valid"],
            "test": parts["train"] + parts["valid"] + parts["test"],
        }
    else:
        raise IntegrityError("split files are neither cumulative nor disjoint increments")

    return SplitDataset(
        train=KnowledgeGraph(entity_count, relation_count, cumulative["train"]),
        valid=KnowledgeGraph(entity_count, relation_count, cumulative["valid"]),
        test=KnowledgeGraph(entity_count, relation_count, cumulative["test"]),
        entities=entities,
        relations=relations,
    )


def load_split(directory: str | Path) -> SplitDataset:
    """Load train/valid/test triple files plus optional vocabularies."""
    d = Path(directory)
    entities = relations = None
    ent_map = rel_map = None
    if (d / "entities.txt").exists():
        entities = read_vocab(d / "entities.txt")
        ent_map = {tok: i for i, tok in enumerate(entities)}
    if (d / "relations.txt").exists():
        relations = read_vocab(d / "relations.txt")
        rel_map = {tok: i for i, tok in enumerate(relations)}

    parts = {}
    for name in ("train", "valid", "test"):
        path = d / f"{name}.txt"
        if not path.exists():
            raise FileNotFoundError(f"missing split file {path}")
        parts[name] = read_triples(path, ent_map, rel_map)

    if entities is not None:
        entity_count = len(entities)
    else:
        ids = [e for tri in parts.values() for h, _, t in tri for e in (h, t)]
        if not ids:
            raise IntegrityError("dataset has no triples and no entity vocabulary")
        entity_count = max(ids) + 1
    if relations is not None:
        relation_count = len(relations)
    else:
        ids = [r for tri in parts.values() for _, r, _ in tri]
        relation_count = (max(ids) + 1) if ids else 0

    return build_split(parts, entity_count, relation_count, entities, relations)


def write_vocab(path: Path, tokens: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(f"{token}\n")


def write_triples(path: Path, triples: Sequence[Triple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_token_triples(
    path: Path, triples: Sequence[Triple], entities: Sequence[str], relations: Sequence[str]
) -> None:
    """Write triples using vocabulary tokens, the form ``load_split`` resolves
    whenever vocabulary files sit next to the triple files."""
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{entities[h]}\t{relations[r]}\t{entities[t]}\n")
