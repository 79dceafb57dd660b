"""The stage-by-level aggregation lattice: geometry, gated edges, pruning.

Stage 0 is the encoder column holding all resolution levels; each later
stage holds one level fewer, down to the single full-resolution output
node. A connection is legal from a shallower encoder node to a deeper one
inside stage 0, and from any node of stage i to any node of stage i+1.
Every legal connection carries one learnable gate logit; the gate value is
its sigmoid.

Pruning keeps a connection when its gate value reaches the threshold, then
repeatedly deletes nodes left without any kept connection into their next
stage (removing all connections touching them) until nothing changes, and
optionally repairs stem-to-output connectivity by re-adding, per dead-end
node reachable from the stem, its single strongest outgoing connection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Tensor, record

Node = tuple[int, int]          # (stage, level)
EdgeKey = tuple[Node, Node]

GRAPH_SCHEMA = "agg_graph_v1"


@dataclass(frozen=True)
class GridGeometry:
    """Triangular node lattice: stage i holds levels 0 .. levels-1-i."""

    levels: int = 4

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"grid.levels must be >= 2, got {self.levels}")

    @property
    def stages(self) -> int:
        return self.levels

    @property
    def stem(self) -> Node:
        return (0, 0)

    @property
    def output(self) -> Node:
        return (self.levels - 1, 0)

    def stage_levels(self, stage: int) -> range:
        return range(self.levels - stage)

    def nodes(self) -> list[Node]:
        return [(i, j) for i in range(self.stages) for j in self.stage_levels(i)]

    def is_node(self, n: Node) -> bool:
        i, j = n
        return 0 <= i < self.stages and 0 <= j < self.levels - i

    def legal_edges(self) -> list[EdgeKey]:
        """All searchable connections, ordered by destination then source."""
        edges: list[EdgeKey] = []
        for dst in self.nodes():
            edges.extend((src, dst) for src in self.in_sources(dst))
        return edges

    def in_sources(self, dst: Node) -> list[Node]:
        i, j = dst
        if i == 0:
            return [(0, k) for k in range(j)]
        return [(i - 1, k) for k in self.stage_levels(i - 1)]

    def unet_template_edges(self) -> list[EdgeKey]:
        """Fixed U-Net style wiring: encoder chain plus same-level and
        one-coarser skips into each later-stage node."""
        edges: list[EdgeKey] = [((0, j - 1), (0, j)) for j in range(1, self.levels)]
        for i in range(1, self.stages):
            for j in self.stage_levels(i):
                edges.append(((i - 1, j), (i, j)))
                edges.append(((i - 1, j + 1), (i, j)))
        return edges


def sparsity_penalty(betas: Tensor) -> Tensor:
    """Mean over connections of -(sigmoid(beta) - 0.5)^2, in [-0.25, 0].

    Maximal exactly at beta = 0; its gradient pushes every gate toward 0
    or 1 under minimization of the (negated-into-loss) objective.
    """
    from .ops import _sigmoid

    if len(betas.shape) != 1:
        raise ConfigError(f"sparsity_penalty expects a 1-d logit vector, got {betas.shape}")
    s = _sigmoid(betas.data)
    n = betas.shape[0]
    val = np.array([np.mean(-((s - 0.5) ** 2))])
    tracked = betas.grad_id is not None

    def backward(g):
        if not tracked:
            return (None,)
        return ((-2.0 * (s - 0.5)) * s * (1.0 - s) * (g.reshape(()) / n),)

    return record("sparsity_penalty", [betas], val, backward)


@dataclass(frozen=True)
class PruneConfig:
    tau: float = 0.75
    fallback_connectivity: bool = True

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"prune.tau must be in (0, 1), got {self.tau}")


@dataclass
class PruneResult:
    kept: list[EdgeKey]
    dropped: list[EdgeKey]
    fallback_added: list[EdgeKey]
    nodes: list[Node]


def _reachable(start: Node, kept: set[EdgeKey]) -> set[Node]:
    seen = {start}
    frontier = [start]
    while frontier:
        n = frontier.pop()
        for (s, d) in kept:
            if s == n and d not in seen:
                seen.add(d)
                frontier.append(d)
    return seen


def prune(geometry: GridGeometry, gates: dict[EdgeKey, float],
          cfg: PruneConfig) -> PruneResult:
    """Threshold the gates, cascade dead-node deletion, optionally repair.

    ``gates`` maps present connections to their gate values; pruning a
    previously pruned graph is supported (and idempotent). Deletion runs to
    the unique maximal fixpoint: a non-output node survives only while it
    keeps a connection into its next stage.
    """
    present = list(gates)
    order = {e: i for i, e in enumerate(geometry.legal_edges())}
    for e in present:
        if e not in order:
            raise ConfigError(f"prune: connection {e} is not legal for levels={geometry.levels}")
    kept = {e for e in present if gates[e] >= cfg.tau}
    alive = set(geometry.nodes())
    changed = True
    while changed:
        changed = False
        for n in sorted(alive):
            if n == geometry.output:
                continue
            if not any(s == n and d[0] == n[0] + 1 for (s, d) in kept):
                alive.discard(n)
                doomed = {e for e in kept if n in e}
                if doomed:
                    kept -= doomed
                changed = True
    fallback_added: list[EdgeKey] = []
    if cfg.fallback_connectivity:
        out_by_src: dict[Node, list[EdgeKey]] = {}
        for e in present:
            out_by_src.setdefault(e[0], []).append(e)
        while geometry.output not in _reachable(geometry.stem, kept):
            reach = _reachable(geometry.stem, kept)
            dead_ends = [n for n in sorted(reach)
                         if n != geometry.output
                         and not any(s == n for (s, d) in kept)]
            added = 0
            for n in dead_ends:
                cands = out_by_src.get(n, [])
                if not cands:
                    continue
                best = max(cands, key=lambda e: (gates[e], -order[e]))
                kept.add(best)
                fallback_added.append(best)
                added += 1
            if not added:
                break
    node_set = {geometry.output}
    for (s, d) in kept:
        node_set.add(s)
        node_set.add(d)
    return PruneResult(
        kept=sorted(kept, key=order.get),
        dropped=sorted((e for e in present if e not in kept), key=order.get),
        fallback_added=sorted(set(fallback_added), key=order.get),
        nodes=sorted(node_set),
    )


def _node_id(n: Node) -> str:
    return f"{n[0]},{n[1]}"


def _parse_node(s: str) -> Node:
    a, b = s.split(",")
    return (int(a), int(b))


@dataclass
class DerivedGraph:
    """Pruned discrete architecture: surviving nodes with chosen operators,
    kept connections with their final gate values."""

    levels: int
    rank: int
    base_channels: int
    num_classes: int
    in_channels: int
    decoder_mode: str
    nodes: dict[Node, list[str]]              # node -> chosen op names (empty for stem)
    edges: list[dict]                         # {src, dst, gate, origin}
    tau: float
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def edge_keys(self) -> list[EdgeKey]:
        return [(tuple(e["src"]), tuple(e["dst"])) for e in self.edges]

    def to_json(self) -> str:
        doc = {
            "schema": GRAPH_SCHEMA,
            "levels": self.levels,
            "rank": self.rank,
            "base_channels": self.base_channels,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "decoder_mode": self.decoder_mode,
            "tau": self.tau,
            "config_hash": self.config_hash,
            "nodes": [{"stage": n[0], "level": n[1], "ops": ops}
                      for n, ops in sorted(self.nodes.items())],
            "edges": self.edges,
            "meta": self.meta,
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DerivedGraph":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"derived graph is not valid JSON: {e}") from None
        if doc.get("schema") != GRAPH_SCHEMA:
            raise FormatError(f"unknown graph schema {doc.get('schema')!r}, "
                              f"expected {GRAPH_SCHEMA!r}")
        nodes = {(n["stage"], n["level"]): list(n["ops"]) for n in doc["nodes"]}
        edges = [{"src": tuple(e["src"]), "dst": tuple(e["dst"]),
                  "gate": float(e["gate"]), "origin": e["origin"]}
                 for e in doc["edges"]]
        return cls(levels=doc["levels"], rank=doc["rank"],
                   base_channels=doc["base_channels"], num_classes=doc["num_classes"],
                   in_channels=doc["in_channels"], decoder_mode=doc["decoder_mode"],
                   nodes=nodes, edges=edges, tau=doc["tau"],
                   config_hash=doc.get("config_hash", ""), meta=doc.get("meta", {}))

    def to_dot(self) -> str:
        lines = ["digraph derived {", "  rankdir=LR;"]
        for n, ops in sorted(self.nodes.items()):
            label = _node_id(n) if not ops else f"{_node_id(n)}\\n{'+'.join(ops)}"
            lines.append(f'  "{_node_id(n)}" [label="{label}"];')
        for e in self.edges:
            src, dst = tuple(e["src"]), tuple(e["dst"])
            style = ' style=dashed' if e["origin"] == "fallback" else ""
            lines.append(f'  "{_node_id(src)}" -> "{_node_id(dst)}" '
                         f'[label="{e["gate"]:.3f}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"
