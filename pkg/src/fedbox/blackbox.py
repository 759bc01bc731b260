"""A surrogate foundation model sealed behind a logit-only, query-counted surface.

Once sealed, the network's parameters are unreachable through the public API:
callers get batched logits and nothing else, and every queried row is counted.
The checkpoint file scrambles the weight payload with a seed-derived keystream
so raw parameter bytes never sit in plain view on disk.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

import numpy as np

from . import nets
from .nets import Array, DenseNet
from .seeds import mix64

_SCRAMBLE_TAG = 0x5EA1ED


def _keystream(seed: int, length: int) -> np.ndarray:
    rng = np.random.default_rng(mix64(seed, _SCRAMBLE_TAG))
    return rng.integers(0, 256, size=length, dtype=np.uint8)


class SealedModel:
    """Frozen network exposing only ``query`` and a monotone query counter."""

    def __init__(self, net: DenseNet, seed: int):
        self.__net = net.copy()
        self._seed = seed
        self._count = 0
        self._lock = threading.Lock()

    @property
    def input_dim(self) -> int:
        return self.__net.input_dim

    @property
    def logit_dim(self) -> int:
        return self.__net.output_dim

    @property
    def query_count(self) -> int:
        return self._count

    def query(self, batch: Array) -> Array:
        """Batched logits; increments the counter by the number of rows."""
        batch = np.asarray(batch, dtype=np.float64)
        out = nets.forward(self.__net, batch)
        with self._lock:
            self._count += batch.shape[0]
        return out

    def public_header(self) -> dict:
        """Everything loggable about the model; contains no parameters."""
        return {
            "input_dim": self.input_dim,
            "logit_dim": self.logit_dim,
            "arch_dims": list(self.__net.dims),
            "activations": [l.activation for l in self.__net.layers],
            "seed": self._seed,
            "query_count": self._count,
        }

    def save(self, path: str | Path) -> None:
        header = self.public_header()
        del header["query_count"]
        payload = nets.serialize_params(self.__net)
        scrambled = np.frombuffer(payload, dtype=np.uint8) ^ _keystream(
            self._seed, len(payload)
        )
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(scrambled.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SealedModel":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            scrambled = np.frombuffer(fh.read(), dtype=np.uint8)
        payload = (scrambled ^ _keystream(header["seed"], len(scrambled))).tobytes()
        net = nets.init_dense(
            header["arch_dims"], header["activations"], np.random.default_rng(0)
        )
        nets.load_params(net, payload)
        return cls(net, header["seed"])


def seal(net: DenseNet, seed: int = 0) -> SealedModel:
    """Seal a copy of ``net``; later mutation of the original has no effect."""
    return SealedModel(net, seed)


def pretrain_and_seal(
    features: Array,
    labels: Array,
    arch_dims: tuple[int, ...],
    epochs: int,
    lr: float,
    seed: int,
) -> tuple[SealedModel, float]:
    """Train a dense classifier on the source task, then seal it.

    Returns the sealed model together with its accuracy on the source data,
    for the run log. ``epochs`` counts full-batch Adam steps; with epochs=0
    the sealed net is the random initialization.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise ValueError("source data is empty")
    rng = np.random.default_rng(seed)
    dims = (features.shape[1],) + tuple(arch_dims)
    activations = ["tanh"] * (len(dims) - 2) + ["identity"]
    net = nets.init_dense(dims, activations, rng)
    state = nets.AdamState.for_net(net)
    for _ in range(epochs):
        logits = nets.forward(net, features)
        _, grad = nets.softmax_cross_entropy(logits, labels)
        bundle = nets.backward(net, features, grad)
        nets.adam_step(net, bundle, state, lr)
    preds = nets.forward(net, features).argmax(axis=1)
    accuracy = float(np.mean(preds == labels))
    return seal(net, seed), accuracy
