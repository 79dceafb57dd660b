"""Supernet assembly over the aggregation grid, and its derived networks.

The supernet instantiates one search block per grid node (the stem node is
a plain convolution), one gate logit per legal connection, a per-connection
alignment transform (repeated 2x resampling plus an optional 1x1 channel
projection), and a 1x1 segmentation head at full resolution. A derived
network is the same machinery restricted to the chosen operators and kept
connections, with gates fixed at 1; parameter names are shared so weights
copy across one-to-one.

Feature widths double per level: level j carries base_channels * 2**j
channels at extent input/2**j. Aggregation for an encoder node happens at
the level above it (its block then halves extents); plain decoder nodes
aggregate at their own level; expansion-mode decoder nodes aggregate one
level below and their block doubles extents back.
"""

from __future__ import annotations

import numpy as np

from .blocks import CandidateSet, MixedOp, SearchBlock
from .errors import ConfigError
from .grid import (
    DerivedGraph, EdgeKey, GridGeometry, Node, PruneConfig, prune,
    sparsity_penalty,
)
from .ops import ConvSpec, conv, instance_norm, interpolate, relu, sigmoid
from .tensor import Tape, Tensor, gather, weighted_sum


def _edge_name(e: EdgeKey) -> str:
    (si, sj), (di, dj) = e
    return f"edge_{si}.{sj}-{di}.{dj}"


def _node_name(n: Node) -> str:
    return f"node{n[0]}_{n[1]}"


class ParamStore:
    """Named parameter arrays with roles, in canonical construction order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.roles: dict[str, str] = {}

    def add(self, name: str, arr: np.ndarray, role: str) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = np.ascontiguousarray(arr, dtype=np.float64)
        self.roles[name] = role

    def names(self, role: str | None = None) -> list[str]:
        if role is None:
            return list(self.params)
        return [n for n, r in self.roles.items() if r == role]

    def bind(self, tape: Tape, trainable: set[str]) -> dict[str, Tensor]:
        """Leaves for trainable roles, off-tape constants for the rest."""
        return {name: (tape.leaf(arr) if self.roles[name] in trainable else Tensor(arr))
                for name, arr in self.params.items()}

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, arr in self.params.items():
            src = other.params.get(name)
            if src is None:
                raise ConfigError(f"source store misses parameter {name}")
            if src.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src


def _init_param(rng: np.random.Generator, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


_LAYER_KINDS = {
    "encoder": ("normal", "reduction"),
    "decoder": ("normal", "normal"),
    "decoder_expansion": ("normal", "expansion"),
}
_FIXED_OPS = {"normal": "conv3", "reduction": "max_pool", "expansion": "transpose_conv"}


class _SegNet:
    """Shared structure for the supernet and derived networks."""

    def __init__(self, *, rank: int, levels: int, base_channels: int,
                 in_channels: int, num_classes: int, decoder_mode: str = "normal"):
        if rank not in (2, 3):
            raise ConfigError(f"grid.rank must be 2 or 3, got {rank}")
        if decoder_mode not in ("normal", "expansion"):
            raise ConfigError(f"grid.decoder_mode must be 'normal' or 'expansion', "
                              f"got {decoder_mode!r}")
        if base_channels < 1:
            raise ConfigError(f"grid.base_channels must be >= 1, got {base_channels}")
        self.rank = rank
        self.geometry = GridGeometry(levels)
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.decoder_mode = decoder_mode
        self.stem_spec = ConvSpec.same(rank, in_channels, base_channels, 3)
        self.head_spec = ConvSpec.same(rank, base_channels, num_classes, 1)
        self.blocks: dict[Node, SearchBlock] = {}
        self.store = ParamStore()

    def width(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def block_position(self, node: Node) -> str:
        if node[0] == 0:
            return "encoder"
        return "decoder_expansion" if self.decoder_mode == "expansion" else "decoder"

    def agg_level(self, node: Node) -> int:
        """Level at which a node's inputs are aggregated (block input level)."""
        i, j = node
        if i == 0:
            return j - 1
        return j + 1 if self.decoder_mode == "expansion" else j

    def _make_block(self, node: Node, choose: dict[int, str] | None,
                    searchable: bool) -> SearchBlock:
        position = self.block_position(node)
        kinds = _LAYER_KINDS[position]
        ch = self.width(self.agg_level(node))
        layers = []
        for li, kind in enumerate(kinds):
            restrict = None
            if choose is not None:
                restrict = choose[li]
            elif not searchable:
                restrict = _FIXED_OPS[kind]
            cset = CandidateSet.build(kind, self.rank, ch, restrict=restrict)
            layers.append(MixedOp(f"{_node_name(node)}/layer{li}", cset))
        out_ch = self.width(node[1])
        proj = None if ch == out_ch else ConvSpec.same(self.rank, ch, out_ch, 1)
        return SearchBlock(_node_name(node), (layers[0], layers[1]), proj)

    def _add_block_params(self, rng: np.random.Generator, block: SearchBlock) -> None:
        for name, shape, role in block.param_items():
            kind = "zeros" if role == "arch" or name.endswith("/b") else "uniform"
            self.store.add(name, _init_param(rng, shape, kind), role)

    def _edge_proj_spec(self, e: EdgeKey) -> ConvSpec | None:
        src_level = e[0][1]
        dst_level = self.agg_level(e[1])
        if src_level == dst_level:
            return None
        return ConvSpec.same(self.rank, self.width(src_level), self.width(dst_level), 1)

    def _add_edge_params(self, rng: np.random.Generator, e: EdgeKey) -> None:
        spec = self._edge_proj_spec(e)
        if spec is not None:
            name = _edge_name(e)
            self.store.add(f"{name}/proj/w", _init_param(rng, spec.weight_shape, "uniform"),
                           "weight")
            self.store.add(f"{name}/proj/b", np.zeros(spec.out_channels), "weight")

    def _align(self, h: Tensor, e: EdgeKey, params: dict[str, Tensor]) -> Tensor:
        src_level = e[0][1]
        dst_level = self.agg_level(e[1])
        diff = src_level - dst_level
        for _ in range(diff):
            h = interpolate(h, 2.0)
        for _ in range(-diff):
            h = interpolate(h, 0.5)
        spec = self._edge_proj_spec(e)
        if spec is not None:
            name = _edge_name(e)
            h = conv(h, params[f"{name}/proj/w"], params[f"{name}/proj/b"], spec)
        return h

    def _stem(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        return relu(instance_norm(conv(x, params["stem/w"], None, self.stem_spec)))

    def _head(self, h: Tensor, params: dict[str, Tensor]) -> Tensor:
        return conv(h, params["head/w"], params["head/b"], self.head_spec)

    def _zero_agg(self, node: Node, x: Tensor) -> Tensor:
        lvl = self.agg_level(node)
        spatial = tuple(e // (2 ** lvl) for e in x.shape[2:])
        return Tensor(np.zeros((x.shape[0], self.width(lvl), *spatial)))

    def _check_input(self, x: Tensor) -> None:
        if len(x.shape) != self.rank + 2 or x.shape[1] != self.in_channels:
            raise ConfigError(f"input shape {x.shape} does not match rank={self.rank}, "
                              f"in_channels={self.in_channels}")
        need = 2 ** (self.geometry.levels - 1)
        if any(e % need for e in x.shape[2:]):
            raise ConfigError(f"input extents {x.shape[2:]} must be divisible by {need}")


class Supernet(_SegNet):
    """Over-parameterized network holding all candidates and connections."""

    def __init__(self, *, rank: int, levels: int, base_channels: int,
                 in_channels: int = 1, num_classes: int = 2,
                 sbb: bool = True, mssa: bool = True,
                 decoder_mode: str = "normal", seed: int = 0):
        super().__init__(rank=rank, levels=levels, base_channels=base_channels,
                         in_channels=in_channels, num_classes=num_classes,
                         decoder_mode=decoder_mode)
        self.sbb = sbb
        self.mssa = mssa
        self.edges: list[EdgeKey] = (self.geometry.legal_edges() if mssa
                                     else self.geometry.unet_template_edges())
        self.edge_index = {e: i for i, e in enumerate(self.edges)}
        self._in_edges: dict[Node, list[EdgeKey]] = {}
        for e in self.edges:
            self._in_edges.setdefault(e[1], []).append(e)

        rng = np.random.default_rng(seed)
        self.store.add("stem/w", _init_param(rng, self.stem_spec.weight_shape, "uniform"),
                       "weight")
        for node in self.geometry.nodes():
            if node == self.geometry.stem:
                continue
            block = self._make_block(node, None, searchable=sbb)
            self.blocks[node] = block
            self._add_block_params(rng, block)
        for e in self.edges:
            self._add_edge_params(rng, e)
        if mssa:
            self.store.add("beta", np.zeros(len(self.edges)), "arch")
        self.store.add("head/w", _init_param(rng, self.head_spec.weight_shape, "uniform"),
                       "weight")
        self.store.add("head/b", np.zeros(num_classes), "weight")

    # -- forward ---------------------------------------------------------

    def forward(self, params: dict[str, Tensor], x: Tensor,
                harden: "HardenSpec | None" = None) -> Tensor:
        """Segmentation logits at full resolution.

        ``harden`` replaces softmax mixture weights by exact one-hot
        vectors and gate values by exact 0/1 indicators, for derivation
        equivalence checks.
        """
        self._check_input(x)
        beta = params.get("beta")
        feats: dict[Node, Tensor] = {self.geometry.stem: self._stem(x, params)}
        for node in sorted(self.geometry.nodes()):
            if node == self.geometry.stem:
                continue
            in_edges = self._in_edges.get(node, [])
            if not in_edges:
                agg = self._zero_agg(node, x)
            else:
                aligned = [self._align(feats[e[0]], e, params) for e in in_edges]
                if harden is not None:
                    w = Tensor(np.array([1.0 if e in harden.kept else 0.0
                                         for e in in_edges]))
                elif beta is not None:
                    w = sigmoid(gather(beta, [self.edge_index[e] for e in in_edges]))
                else:
                    w = Tensor(np.ones(len(in_edges)))
                agg = weighted_sum(w, aligned)
            overrides = (None, None)
            if harden is not None:
                overrides = harden.layer_overrides(self.blocks[node])
            feats[node] = self.blocks[node].forward(agg, params, overrides)
        return self._head(feats[self.geometry.output], params)

    def connection_penalty(self, params: dict[str, Tensor]) -> Tensor:
        """Discretization pressure on the gates; zero when gates are fixed."""
        beta = params.get("beta")
        if beta is None:
            return Tensor(np.zeros(1))
        return sparsity_penalty(beta)

    # -- inspection ------------------------------------------------------

    def gate_values(self) -> dict[EdgeKey, float]:
        if not self.mssa:
            return {e: 1.0 for e in self.edges}
        from .ops import _sigmoid
        s = _sigmoid(self.store.params["beta"])
        return {e: float(s[i]) for e, i in self.edge_index.items()}

    def mean_gate(self) -> float:
        return float(np.mean(list(self.gate_values().values())))

    def alpha_entropy(self) -> float:
        ents = []
        for name in self.store.names("arch"):
            if not name.endswith("/alpha"):
                continue
            a = self.store.params[name]
            e = np.exp(a - a.max())
            p = e / e.sum()
            ents.append(float(-(p * np.log(p)).sum()))
        return float(np.mean(ents)) if ents else 0.0

    def chosen_ops(self) -> dict[Node, list[str]]:
        out: dict[Node, list[str]] = {self.geometry.stem: []}
        for node, block in self.blocks.items():
            ops = []
            for layer in block.layers:
                alpha = self.store.params.get(f"{layer.name}/alpha")
                ops.append(layer.select(alpha))
            out[node] = ops
        return out

    def candidate_manifest(self) -> dict:
        layers = {}
        for node, block in self.blocks.items():
            for layer in block.layers:
                layers[layer.name] = list(layer.set.names)
        return {
            "mixed_layers": layers,
            "edge_order": [f"{_edge_name(e)}" for e in self.edges],
            "gates_learnable": self.mssa,
        }

    def derive(self, cfg: PruneConfig, config_hash: str = "") -> DerivedGraph:
        """Discrete architecture: argmax operators plus thresholded gates."""
        gates = self.gate_values()
        if self.mssa:
            result = prune(self.geometry, gates, cfg)
            kept, fallback = result.kept, set(result.fallback_added)
            nodes = result.nodes
        else:
            kept, fallback = list(self.edges), set()
            nodes = sorted(self.geometry.nodes())
        ops = self.chosen_ops()
        meta = {"mssa": self.mssa, "sbb": self.sbb,
                "dropped": [[list(e[0]), list(e[1])]
                            for e in self.edges if e not in set(kept)]}
        return DerivedGraph(
            levels=self.geometry.levels, rank=self.rank,
            base_channels=self.base_channels, num_classes=self.num_classes,
            in_channels=self.in_channels, decoder_mode=self.decoder_mode,
            nodes={n: ops.get(n, []) for n in nodes},
            edges=[{"src": list(e[0]), "dst": list(e[1]), "gate": gates[e],
                    "origin": "fallback" if e in fallback else
                              ("fixed" if not self.mssa else "kept")}
                   for e in kept],
            tau=cfg.tau, config_hash=config_hash)


class HardenSpec:
    """Exact one-hot operator choices and 0/1 gates for a supernet forward."""

    def __init__(self, kept: set[EdgeKey], ops: dict[Node, list[str]]):
        self.kept = kept
        self.ops = ops

    @classmethod
    def from_graph(cls, graph: DerivedGraph) -> "HardenSpec":
        return cls(set(graph.edge_keys()), dict(graph.nodes))

    def layer_overrides(self, block: SearchBlock):
        node_ops = self.ops.get(_block_node(block), None)
        overrides = []
        for li, layer in enumerate(block.layers):
            if not layer.searchable:
                overrides.append(None)
                continue
            names = layer.set.names
            chosen = node_ops[li] if node_ops else names[0]
            onehot = np.zeros(len(names))
            onehot[names.index(chosen)] = 1.0
            overrides.append(onehot)
        return (overrides[0], overrides[1])


def _block_node(block: SearchBlock) -> Node:
    stage, level = block.name.removeprefix("node").split("_")
    return (int(stage), int(level))


class DerivedNetwork(_SegNet):
    """Discrete network rebuilt from a derived graph; gates are all 1."""

    def __init__(self, graph: DerivedGraph, seed: int = 0):
        super().__init__(rank=graph.rank, levels=graph.levels,
                         base_channels=graph.base_channels,
                         in_channels=graph.in_channels,
                         num_classes=graph.num_classes,
                         decoder_mode=graph.decoder_mode)
        self.graph = graph
        self.edges: list[EdgeKey] = graph.edge_keys()
        self._in_edges: dict[Node, list[EdgeKey]] = {}
        for e in self.edges:
            self._in_edges.setdefault(e[1], []).append(e)

        rng = np.random.default_rng(seed)
        self.store.add("stem/w", _init_param(rng, self.stem_spec.weight_shape, "uniform"),
                       "weight")
        for node in sorted(graph.nodes):
            if node == self.geometry.stem:
                continue
            ops = graph.nodes[node]
            block = self._make_block(node, {0: ops[0], 1: ops[1]}, searchable=False)
            self.blocks[node] = block
            self._add_block_params(rng, block)
        for e in self.edges:
            self._add_edge_params(rng, e)
        self.store.add("head/w", _init_param(rng, self.head_spec.weight_shape, "uniform"),
                       "weight")
        self.store.add("head/b", np.zeros(graph.num_classes), "weight")

    def forward(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        self._check_input(x)
        feats: dict[Node, Tensor] = {}
        if self.geometry.stem in self.graph.nodes:
            feats[self.geometry.stem] = self._stem(x, params)
        for node in sorted(self.graph.nodes):
            if node == self.geometry.stem:
                continue
            in_edges = self._in_edges.get(node, [])
            if not in_edges:
                agg = self._zero_agg(node, x)
            else:
                aligned = [self._align(feats[e[0]], e, params) for e in in_edges]
                agg = weighted_sum(Tensor(np.ones(len(in_edges))), aligned)
            feats[node] = self.blocks[node].forward(agg, params)
        return self._head(feats[self.geometry.output], params)
