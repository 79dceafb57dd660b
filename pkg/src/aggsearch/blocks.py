"""Searchable building blocks: mixed operators over fixed candidate sets.

Each block has two layers. A layer is a mixed operator: the softmax of a
learnable logit vector weights the outputs of all candidates, every
candidate owning private weights. At derivation time the argmax candidate
is selected (ties to the lowest index, invariant under uniform logit
shifts).

Candidate sets by layer kind, in fixed serialized order:

* normal: conv3, conv3_flat, conv5, conv_sep, conv3_double, conv3_dil2,
  conv5_dil2. In rank-3 mode conv3_flat is the in-plane (3,3,1) kernel and
  conv_sep the separable (3,3,1)+(1,1,3) pair; rank 2 uses their planar
  analogues (conv3_flat -> 3x3 with its own weights, conv_sep -> (1,3)+(3,1)).
* reduction (halves extents): max_pool, avg_pool, conv3_stride2.
* expansion (doubles extents): transpose_conv, interp_linear.

Conv-type candidates run conv -> instance norm -> relu per stage; pooling
and interpolation are bare. All candidates of a set preserve the channel
count, so mixed outputs always share one shape; blocks project channels to
the destination width with a trailing 1x1 convolution where needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError
from .ops import ConvSpec, conv, instance_norm, interpolate, pool, relu, transpose_conv
from .tensor import Tensor, weighted_sum

NORMAL_CANDIDATES = ("conv3", "conv3_flat", "conv5", "conv_sep",
                     "conv3_double", "conv3_dil2", "conv5_dil2")
REDUCTION_CANDIDATES = ("max_pool", "avg_pool", "conv3_stride2")
EXPANSION_CANDIDATES = ("transpose_conv", "interp_linear")


@dataclass(frozen=True)
class Candidate:
    """One selectable operator: an optional conv chain or a fixed resampler."""

    name: str
    kind: str                      # conv | pool_max | pool_avg | transpose | interp
    specs: tuple[ConvSpec, ...] = ()

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(f"w{i}", s.weight_shape) for i, s in enumerate(self.specs)]

    def forward(self, x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
        if self.kind == "conv":
            h = x
            for i, spec in enumerate(self.specs):
                h = relu(instance_norm(conv(h, params[f"{prefix}/w{i}"], None, spec)))
            return h
        if self.kind == "pool_max":
            return pool(x, "max", 2)
        if self.kind == "pool_avg":
            return pool(x, "avg", 2)
        if self.kind == "transpose":
            h = transpose_conv(x, params[f"{prefix}/w0"], self.specs[0])
            return relu(instance_norm(h))
        if self.kind == "interp":
            return interpolate(x, 2.0)
        raise ShapeError(f"unknown candidate kind {self.kind!r}")


def _conv_cand(name: str, rank: int, ch: int, kernels, dilation=1, stride=1) -> Candidate:
    specs = tuple(ConvSpec.same(rank, ch, ch, k, stride=stride if i == 0 else 1,
                                dilation=dilation)
                  for i, k in enumerate(kernels))
    return Candidate(name, "conv", specs)


def normal_candidates(rank: int, channels: int) -> tuple[Candidate, ...]:
    c = channels
    if rank == 3:
        flat, sep = [(3, 3, 1)], [(3, 3, 1), (1, 1, 3)]
    else:
        flat, sep = [(3, 3)], [(1, 3), (3, 1)]
    return (
        _conv_cand("conv3", rank, c, [3]),
        _conv_cand("conv3_flat", rank, c, flat),
        _conv_cand("conv5", rank, c, [5]),
        _conv_cand("conv_sep", rank, c, sep),
        _conv_cand("conv3_double", rank, c, [3, 3]),
        _conv_cand("conv3_dil2", rank, c, [3], dilation=2),
        _conv_cand("conv5_dil2", rank, c, [5], dilation=2),
    )


def reduction_candidates(rank: int, channels: int) -> tuple[Candidate, ...]:
    return (
        Candidate("max_pool", "pool_max"),
        Candidate("avg_pool", "pool_avg"),
        _conv_cand("conv3_stride2", rank, channels, [3], stride=2),
    )


def expansion_candidates(rank: int, channels: int) -> tuple[Candidate, ...]:
    tspec = ConvSpec(rank, channels, channels, (2,) * rank, (2,) * rank,
                     (1,) * rank, (0,) * rank)
    return (
        Candidate("transpose_conv", "transpose", (tspec,)),
        Candidate("interp_linear", "interp"),
    )


_FACTORIES = {
    "normal": normal_candidates,
    "reduction": reduction_candidates,
    "expansion": expansion_candidates,
}


@dataclass(frozen=True)
class CandidateSet:
    """Ordered candidates of one layer kind at a fixed rank and width."""

    layer_kind: str
    candidates: tuple[Candidate, ...]

    @classmethod
    def build(cls, layer_kind: str, rank: int, channels: int,
              restrict: str | None = None) -> "CandidateSet":
        """Full set for a kind, or a single-op set when the search is off."""
        cands = _FACTORIES[layer_kind](rank, channels)
        if restrict is not None:
            cands = tuple(c for c in cands if c.name == restrict)
            if not cands:
                raise ShapeError(f"no candidate {restrict!r} in {layer_kind} set")
        return cls(layer_kind, cands)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.candidates)


def select_candidate(alpha: np.ndarray) -> int:
    """Argmax over logits; ties break to the lowest index."""
    return int(np.argmax(alpha))


class MixedOp:
    """Softmax-weighted sum of all candidate outputs of one layer.

    With a single candidate (search disabled) the layer is that operator
    directly and carries no logits.
    """

    def __init__(self, name: str, cset: CandidateSet):
        self.name = name
        self.set = cset

    @property
    def searchable(self) -> bool:
        return len(self.set.candidates) > 1

    def param_items(self) -> list[tuple[str, tuple[int, ...], str]]:
        """(full name, shape, role) for every parameter of this layer."""
        items: list[tuple[str, tuple[int, ...], str]] = []
        if self.searchable:
            items.append((f"{self.name}/alpha", (len(self.set.candidates),), "arch"))
        for cand in self.set.candidates:
            for suffix, shape in cand.param_shapes():
                items.append((f"{self.name}/{cand.name}/{suffix}", shape, "weight"))
        return items

    def forward(self, x: Tensor, params: Mapping[str, Tensor],
                weights_override: Sequence[float] | None = None) -> Tensor:
        from .ops import softmax

        if not self.searchable:
            cand = self.set.candidates[0]
            return cand.forward(x, params, f"{self.name}/{cand.name}")
        outs = [c.forward(x, params, f"{self.name}/{c.name}")
                for c in self.set.candidates]
        if weights_override is not None:
            w = Tensor(np.asarray(weights_override, dtype=np.float64))
        else:
            w = softmax(params[f"{self.name}/alpha"])
        return weighted_sum(w, outs)

    def select(self, alpha: np.ndarray | None) -> str:
        if not self.searchable:
            return self.set.candidates[0].name
        return self.set.candidates[select_candidate(alpha)].name


class SearchBlock:
    """Two mixed layers plus an optional trailing 1x1 channel projection.

    Encoder blocks are normal+reduction and project to double width;
    plain decoder blocks are normal+normal with no projection; expansion
    decoder blocks are normal+expansion and project to half width.
    """

    def __init__(self, name: str, layers: tuple[MixedOp, MixedOp],
                 proj: ConvSpec | None):
        self.name = name
        self.layers = layers
        self.proj = proj

    def param_items(self) -> list[tuple[str, tuple[int, ...], str]]:
        items = []
        for layer in self.layers:
            items.extend(layer.param_items())
        if self.proj is not None:
            items.append((f"{self.name}/proj/w", self.proj.weight_shape, "weight"))
            items.append((f"{self.name}/proj/b", (self.proj.out_channels,), "weight"))
        return items

    def forward(self, x: Tensor, params: Mapping[str, Tensor],
                overrides: tuple[Sequence[float] | None, Sequence[float] | None] = (None, None),
                ) -> Tensor:
        h = self.layers[0].forward(x, params, overrides[0])
        h = self.layers[1].forward(h, params, overrides[1])
        if self.proj is not None:
            h = conv(h, params[f"{self.name}/proj/w"], params[f"{self.name}/proj/b"],
                     self.proj)
        return h
