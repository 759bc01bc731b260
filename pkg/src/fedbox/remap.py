"""Per-client linear head remapping sealed-model logits onto the task classes.

The head is the only trainable part behind the black box, so it takes ordinary
first-order cross-entropy steps. It is client-private: the federation layer
never puts it on the wire, which the message audit enforces.
"""

from __future__ import annotations

import numpy as np

from . import adapter, nets
from .adapter import AutoEncoder, ClientEmbedding
from .blackbox import SealedModel
from .nets import AdamState, Array, DenseNet, Layer


def init_remap_head(source_dim: int, num_classes: int) -> DenseNet:
    """Zero-initialized single linear layer from source logits to task classes."""
    return DenseNet([Layer(np.zeros((source_dim, num_classes)), np.zeros(num_classes))])


def remap_logits(head: DenseNet, source_logits: Array) -> Array:
    return nets.forward(head, source_logits)


def remap_train_step(
    head: DenseNet,
    source_logits: Array,
    labels: Array,
    lr: float,
    opt_state: AdamState | None = None,
) -> float:
    """One cross-entropy step on the head; everything upstream stays frozen."""
    logits = remap_logits(head, source_logits)
    loss, grad = nets.softmax_cross_entropy(logits, labels)
    bundle = nets.backward(head, source_logits, grad)
    if opt_state is None:
        nets.sgd_step(head, bundle, lr)
    else:
        nets.adam_step(head, bundle, opt_state, lr)
    return loss


def pipeline_logits(
    head: DenseNet,
    ae: AutoEncoder,
    emb: ClientEmbedding,
    sealed: SealedModel,
    x: Array,
) -> Array:
    """Full composed pipeline: encode, concat, decode, sealed query, remap."""
    return remap_logits(head, sealed.query(adapter.reconstruct(ae, emb, x)))


def predict(
    head: DenseNet,
    ae: AutoEncoder,
    emb: ClientEmbedding,
    sealed: SealedModel,
    x: Array,
) -> Array:
    """Argmax class labels; ties go to the lowest class index."""
    return pipeline_logits(head, ae, emb, sealed, x).argmax(axis=1)


def evaluate(
    head: DenseNet,
    ae: AutoEncoder,
    emb: ClientEmbedding,
    sealed: SealedModel,
    x: Array,
    labels: Array,
) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of the composed pipeline on (x, labels)."""
    logits = pipeline_logits(head, ae, emb, sealed, x)
    loss = float(nets.cross_entropy_per_row(logits, labels).mean())
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, acc
