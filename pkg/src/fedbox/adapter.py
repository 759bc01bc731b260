"""Auto-encoder input adaptation with a per-client embedding.

The encoder compresses an input to d1 dims, a client-owned d2-dim embedding is
concatenated on (in that order), and the decoder maps the joint vector back to
the input space. After the unsupervised pretraining phase the decoder is frozen
for good; its arrays are made read-only so any later write attempt fails hard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import AdamState, Array, DenseNet


class FrozenDecoderError(RuntimeError):
    """An update touched the decoder after it was frozen."""


@dataclass
class ClientEmbedding:
    """Per-client personalization vector; never leaves the client."""

    values: Array

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("embedding must be a flat vector")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ClientEmbedding":
        return ClientEmbedding(self.values.copy())


@dataclass
class AutoEncoder:
    encoder: DenseNet  # input_dim -> d1
    decoder: DenseNet  # d1 + d2 -> input_dim
    d1: int
    d2: int
    decoder_frozen: bool = False

    def __post_init__(self) -> None:
        if self.encoder.output_dim != self.d1:
            raise nets.ShapeError(
                f"encoder output {self.encoder.output_dim} != d1 {self.d1}"
            )
        if self.decoder.input_dim != self.d1 + self.d2:
            raise nets.ShapeError(
                f"decoder input {self.decoder.input_dim} != d1+d2 {self.d1 + self.d2}"
            )
        if self.decoder.output_dim != self.encoder.input_dim:
            raise nets.ShapeError(
                f"decoder output {self.decoder.output_dim} != "
                f"encoder input {self.encoder.input_dim}"
            )

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    def copy(self) -> "AutoEncoder":
        ae = AutoEncoder(self.encoder.copy(), self.decoder.copy(), self.d1, self.d2)
        if self.decoder_frozen:
            freeze_decoder(ae)
        return ae


def build_autoencoder(
    input_dim: int, d1: int, d2: int, hidden: int, rng: np.random.Generator
) -> AutoEncoder:
    """Default architecture: 3-layer relu encoder, 3-layer decoder ending in tanh."""
    encoder = nets.init_dense(
        (input_dim, hidden, hidden, d1), ("relu", "relu", "identity"), rng
    )
    decoder = nets.init_dense(
        (d1 + d2, hidden, hidden, input_dim), ("relu", "relu", "tanh"), rng
    )
    return AutoEncoder(encoder, decoder, d1, d2)


def encode(ae: AutoEncoder, x: Array) -> Array:
    return nets.forward(ae.encoder, x)


def concat_embedding(z: Array, emb: ClientEmbedding) -> Array:
    """[z, embedding] per row, embedding broadcast across the batch."""
    z = np.asarray(z, dtype=np.float64)
    tiled = np.broadcast_to(emb.values, (z.shape[0], emb.dim))
    return np.concatenate([z, tiled], axis=1)


def decode(ae: AutoEncoder, z_tilde: Array) -> Array:
    """Pure decoder forward; safe on a frozen decoder."""
    return nets.forward(ae.decoder, z_tilde)


def reconstruct(ae: AutoEncoder, emb: ClientEmbedding, x: Array) -> Array:
    return decode(ae, concat_embedding(encode(ae, x), emb))


def freeze_decoder(ae: AutoEncoder) -> None:
    """Make the decoder immutable; any subsequent in-place write raises."""
    ae.decoder_frozen = True
    for layer in ae.decoder.layers:
        layer.weight.flags.writeable = False
        layer.bias.flags.writeable = False


@dataclass
class PretrainState:
    """Adam moments for the joint encoder/decoder/embedding pretraining update."""

    encoder: AdamState
    decoder: AdamState
    emb_m: Array
    emb_v: Array
    emb_t: int = 0

    @classmethod
    def for_client(cls, ae: AutoEncoder, emb: ClientEmbedding) -> "PretrainState":
        return cls(
            AdamState.for_net(ae.encoder),
            AdamState.for_net(ae.decoder),
            np.zeros_like(emb.values),
            np.zeros_like(emb.values),
        )


def pretrain_step(
    ae: AutoEncoder,
    emb: ClientEmbedding,
    batch: Array,
    lr: float,
    state: PretrainState | None = None,
    train_embedding: bool = True,
) -> float:
    """One reconstruction-MSE update of encoder, decoder, and embedding.

    With ``state`` the update is Adam, otherwise plain SGD. The embedding
    receives gradients through the concatenation (rows share one embedding,
    so its gradient is the column sum over the batch).
    """
    if ae.decoder_frozen:
        raise FrozenDecoderError("pretraining is a phase-1 operation; decoder is frozen")
    batch = np.asarray(batch, dtype=np.float64)
    z = encode(ae, batch)
    z_tilde = concat_embedding(z, emb)
    recon = decode(ae, z_tilde)
    loss, grad = nets.mse_loss(recon, batch)
    dec_grads = nets.backward(ae.decoder, z_tilde, grad)
    enc_grads = nets.backward(ae.encoder, batch, dec_grads.input_grad[:, : ae.d1])
    emb_grad = dec_grads.input_grad[:, ae.d1 :].sum(axis=0)
    if state is None:
        nets.sgd_step(ae.encoder, enc_grads, lr)
        nets.sgd_step(ae.decoder, dec_grads, lr)
        if train_embedding:
            emb.values -= lr * emb_grad
    else:
        nets.adam_step(ae.encoder, enc_grads, state.encoder, lr)
        nets.adam_step(ae.decoder, dec_grads, state.decoder, lr)
        if train_embedding:
            state.emb_t += 1
            state.emb_m = 0.9 * state.emb_m + 0.1 * emb_grad
            state.emb_v = 0.999 * state.emb_v + 0.001 * emb_grad**2
            m_hat = state.emb_m / (1.0 - 0.9**state.emb_t)
            v_hat = state.emb_v / (1.0 - 0.999**state.emb_t)
            emb.values -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    return loss
