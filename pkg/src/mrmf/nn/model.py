"""Sequential model: an ordered list of layers plus the per-sample input shape."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from ..errors import CacheError, ShapeError
from .layers import BatchNorm, ConvND, AvgPoolND, Flatten, FullyConnected, Layer, make_layer

_BOTTOM_KINDS = (ConvND, AvgPoolND, BatchNorm)


@dataclass
class ForwardCache:
    model_id: int
    generation: int
    train: bool
    layer_caches: list


class Model:
    """Layers applied in order to channel-last inputs of shape ``input_shape``.

    Exactly one :class:`Flatten` is required; convolution, pooling and
    normalisation layers sit before it and fully connected layers after it.
    ``generation`` is bumped by every parameter update so that stale forward
    caches are rejected by :meth:`backward`.
    """

    def __init__(self, layers: list[Layer], input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.generation = 0
        self._validate()

    def _validate(self):
        if len(self.input_shape) < 1 or min(self.input_shape) < 1:
            raise ShapeError(f"invalid input shape {self.input_shape}")
        flats = [i for i, layer in enumerate(self.layers) if isinstance(layer, Flatten)]
        if len(flats) != 1:
            raise ShapeError(f"model needs exactly one flatten layer, found {len(flats)}")
        f = flats[0]
        for i, layer in enumerate(self.layers):
            if i < f and isinstance(layer, FullyConnected):
                raise ShapeError("fully connected layer before flatten", layer=i)
            if i > f and isinstance(layer, _BOTTOM_KINDS):
                raise ShapeError(f"{layer.kind} layer after flatten", layer=i)
        if f == len(self.layers) - 1 or not any(isinstance(l, FullyConnected) for l in self.layers[f + 1:]):
            raise ShapeError("model needs at least one fully connected layer after flatten")
        self.shapes()

    @property
    def flatten_index(self) -> int:
        return next(i for i, layer in enumerate(self.layers) if isinstance(layer, Flatten))

    def shapes(self, input_shape=None) -> list[tuple]:
        """Per-layer output shapes, raising :class:`ShapeError` at the first failing layer."""
        shape = self.input_shape if input_shape is None else tuple(input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(str(exc), layer=i) from None
            out.append(shape)
        return out

    @property
    def output_size(self) -> int:
        return self.shapes()[-1][0]

    def init(self, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)
        self.generation += 1
        return self

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def state_arrays(self):
        """Parameters and buffers in a fixed order, for checksums and copies."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]
            for name in sorted(layer.buffers):
                yield i, name, layer.buffers[name]

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for i, name, arr in self.state_arrays():
            h.update(f"{i}:{name}:{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        clone.generation = 0
        return clone

    def flops_per_sample(self) -> int:
        total, shape = 0, self.input_shape
        for layer in self.layers:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total

    def _check_batch(self, batch):
        if batch.ndim != len(self.input_shape) + 1 or batch.shape[0] < 1:
            raise ShapeError(f"batch of shape {batch.shape} does not match input shape {self.input_shape}", layer=0)
        if tuple(batch.shape[1:]) != self.input_shape:
            # Identify the first layer that cannot accept the offered shape.
            self.shapes(batch.shape[1:])
            raise ShapeError(f"batch sample shape {tuple(batch.shape[1:])} != model input shape {self.input_shape}", layer=0)

    def forward(self, batch, train=True, comm=None):
        """Run the batch through every layer; returns ``(output, cache)``.

        In eval mode batch normalisation uses its running statistics and the
        returned cache cannot be used for :meth:`backward`.
        """
        x = np.asarray(batch, dtype=np.float64)
        self._check_batch(x)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train, comm)
            caches.append(c)
        return x, ForwardCache(id(self), self.generation, bool(train), caches)

    def backward(self, cache: ForwardCache, loss_grad, comm=None) -> list[dict]:
        if cache is None or not isinstance(cache, ForwardCache):
            raise CacheError("backward needs the cache returned by forward")
        if not cache.train:
            raise CacheError("backward needs a cache from a train-mode forward pass")
        if cache.model_id != id(self) or cache.generation != self.generation:
            raise CacheError("stale forward cache: the model changed since the forward pass")
        dy = np.asarray(loss_grad, dtype=np.float64)
        grads: list[dict] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(dy, cache.layer_caches[i], comm)
        return grads

    def __call__(self, batch):
        return self.forward(batch, train=False)[0]

    def __repr__(self):
        body = ", ".join(repr(l) for l in self.layers)
        return f"Model(input_shape={self.input_shape}, layers=[{body}])"


def forward(model: Model, batch, mode: str = "train", comm=None):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return model.forward(batch, train=(mode == "train"), comm=comm)


def backward(model: Model, caches: ForwardCache, loss_grad, comm=None) -> list[dict]:
    return model.backward(caches, loss_grad, comm)


def build_model(specs: list[dict], input_shape, seed: int | None = None) -> Model:
    """Build a model from layer dicts, inferring input channel/feature counts.

    Each dict has a ``kind`` key plus that layer's hyperparameters, except
    ``in_channels``/``in_features``/``channels`` which come from shape
    propagation when omitted.
    """
    shape = tuple(int(v) for v in input_shape)
    layers = []
    for i, spec in enumerate(specs):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        if kind in ("conv", "avgpool"):
            for key in ("kernel", "stride", "padding"):
                if isinstance(spec.get(key), int):
                    spec[key] = (spec[key],) * (len(shape) - 1)
        if kind == "conv":
            spec.setdefault("in_channels", shape[-1])
        elif kind == "fc":
            spec.setdefault("in_features", math.prod(shape))
        elif kind == "batchnorm":
            spec.setdefault("channels", shape[-1])
        try:
            layer = make_layer(kind, **spec)
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(str(exc), layer=i) from None
        except (TypeError, ValueError) as exc:
            raise ShapeError(f"bad layer spec {kind!r}: {exc}", layer=i) from None
        layers.append(layer)
    model = Model(layers, input_shape)
    if seed is not None:
        model.init(seed)
    return model
