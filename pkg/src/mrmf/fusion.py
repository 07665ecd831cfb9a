"""Coarse-model adjustment and layer-group fusion.

A model is split at its flatten layer: the bottom group (input side, through
flatten) holds convolution/pooling/normalisation layers whose parameter shapes
do not depend on input resolution; the top group holds the fully connected
layers. Only the first fully connected layer changes shape with resolution.
Fusion takes the bottom group from the coarse model and the top group
(including that first FC layer) from the dense model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FusionMismatchError, ShapeError
from .nn.layers import AvgPoolND, Flatten, FullyConnected, Layer, make_layer
from .nn.model import Model


@dataclass(frozen=True)
class ShapeTrace:
    shapes: tuple          # output shape of every layer
    flatten_index: int
    flatten_size: int


@dataclass(frozen=True)
class LayerGroups:
    bottom: tuple
    top: tuple


def propagate_shapes(layers: list[Layer], input_shape) -> ShapeTrace:
    shape = tuple(int(v) for v in input_shape)
    shapes, flat = [], None
    for i, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"{layer.kind}: {exc}", layer=i) from None
        shapes.append(shape)
        if isinstance(layer, Flatten) and flat is None:
            flat = i
    size = shapes[flat][0] if flat is not None else None
    return ShapeTrace(tuple(shapes), flat, size)


def _first_fc(layers) -> int:
    return next(i for i, l in enumerate(layers) if isinstance(l, FullyConnected))


def _clone_spec(layer: Layer, **override) -> Layer:
    hp = dict(layer.hyperparams())
    hp.update(override)
    return make_layer(layer.kind, **hp)


def adjust_model(reference: Model, coarse_input_shape, seed: int, check_factors: bool = True) -> Model:
    """Same architecture as ``reference`` for a coarser input; freshly initialised.

    Only the first fully connected layer's in-features change, to the
    flattened size the unchanged convolution stack produces on the coarse
    input.
    """
    coarse = tuple(int(v) for v in coarse_input_shape)
    ref = reference.input_shape
    if len(coarse) != len(ref) or coarse[-1] != ref[-1]:
        raise ShapeError(f"coarse input {coarse} must keep the rank and channel count of {ref}")
    if check_factors:
        for axis, (n, c) in enumerate(zip(ref[:-1], coarse[:-1])):
            if c < 1 or n % c:
                raise ShapeError(f"coarse extent {c} on spatial axis {axis} is not an integer reduction of {n}")

    fc = _first_fc(reference.layers)
    head = [_clone_spec(l) for l in reference.layers[:fc]]
    trace = propagate_shapes(head, coarse)
    layers = head + [_clone_spec(reference.layers[fc], in_features=trace.flatten_size)]
    layers += [_clone_spec(l) for l in reference.layers[fc + 1:]]
    return Model(layers, coarse).init(seed)


def split_layer_groups(model: Model) -> LayerGroups:
    f = model.flatten_index
    return LayerGroups(tuple(range(f + 1)), tuple(range(f + 1, len(model.layers))))


def _copy_arrays(src: Layer, dst: Layer) -> None:
    dst.params = {k: v.copy() for k, v in src.params.items()}
    dst.buffers = {k: v.copy() for k, v in src.buffers.items()}


def fuse(coarse: Model, dense: Model, reinit_first_fc: bool = False, seed: int | None = None) -> Model:
    """Bottom group from ``coarse``, top group from ``dense``, at ``dense`` resolution.

    ``reinit_first_fc`` replaces the first fully connected layer with fresh
    weights drawn from ``seed`` instead of copying it from the dense model.
    """
    if len(coarse.layers) != len(dense.layers):
        raise FusionMismatchError(f"layer counts differ: coarse has {len(coarse.layers)}, dense has {len(dense.layers)}")
    for i, (a, b) in enumerate(zip(coarse.layers, dense.layers)):
        if a.kind != b.kind:
            raise FusionMismatchError(f"layer kinds differ ({a.kind} vs {b.kind})", layer=i)

    groups = split_layer_groups(dense)
    for i in groups.bottom:
        a, b = coarse.layers[i], dense.layers[i]
        if not a.same_spec(b):
            raise FusionMismatchError(f"bottom-group hyperparameters differ: {a!r} vs {b!r}", layer=i)
        for name, shape in b.param_shapes().items():
            got = a.params[name].shape
            if got != b.params[name].shape:
                raise FusionMismatchError(f"{name} shape {got} != {b.params[name].shape}", layer=i)

    fused = Model([_clone_spec(l) for l in dense.layers], dense.input_shape)
    for i in groups.bottom:
        _copy_arrays(coarse.layers[i], fused.layers[i])
    for i in groups.top:
        _copy_arrays(dense.layers[i], fused.layers[i])
    if reinit_first_fc:
        fc = _first_fc(fused.layers)
        fused.layers[fc].init_params(np.random.default_rng(seed))
    return fused


def provenance(fused: Model, coarse: Model, dense: Model) -> list[tuple[int, str, str]]:
    """For each parameterised layer of ``fused``: which source it equals bitwise."""
    out = []
    for i, layer in enumerate(fused.layers):
        if not layer.params:
            continue
        def same(other):
            o = other.layers[i]
            return all(
                name in o.params and o.params[name].shape == arr.shape and np.array_equal(o.params[name], arr)
                for name, arr in layer.params.items()
            )
        hits = [name for name, m in (("coarse", coarse), ("dense", dense)) if len(m.layers) == len(fused.layers) and same(m)]
        out.append((i, layer.kind, "+".join(hits) if hits else "neither"))
    return out


def with_input_pooling(model: Model, factors, original_shape) -> Model:
    """Prepend an average pool with kernel = stride = ``factors`` (pooling inside the model).

    The returned model shares its layer objects with ``model``, so training it
    trains ``model``.
    """
    factors = tuple(int(k) for k in factors)
    pool = AvgPoolND(factors, factors)
    expected = tuple(n // k for n, k in zip(original_shape[:-1], factors)) + (original_shape[-1],)
    if expected != model.input_shape or any(n % k for n, k in zip(original_shape[:-1], factors)):
        raise ShapeError(f"pooling {tuple(original_shape)} by {factors} does not produce {model.input_shape}")
    return Model([pool] + model.layers, original_shape)


def strip_input_pooling(model: Model) -> Model:
    first = model.layers[0]
    if not isinstance(first, AvgPoolND):
        raise ShapeError("model has no leading pooling layer", layer=0)
    shape = first.output_shape(model.input_shape)
    return Model(model.layers[1:], shape)


def first_fc_shape(model: Model) -> tuple:
    layer = model.layers[_first_fc(model.layers)]
    return (layer.in_features, layer.out_features)


def flattened_size(model: Model, input_shape=None) -> int:
    return math.prod(model.shapes(input_shape)[model.flatten_index])
