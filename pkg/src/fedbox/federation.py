"""Federated protocol: round schedules, uniform aggregation, message ledger.

Round structure follows the three-phase recipe. Phase 1 exchanges the whole
auto-encoder each round; the main phase exchanges encoders only, with each
round running local zeroth-order surgery, then upload / aggregate / distribute,
then local head training against the freshly aggregated encoder. The client
embedding and the remap head never touch the wire.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import adapter, nets, remap, zoo
from .adapter import AutoEncoder, ClientEmbedding, PretrainState
from .blackbox import SealedModel
from .nets import AdamState, Array, DenseNet
from .seeds import TAG_SAMPLER, mix64
from .zoo import ZOConfig


@dataclass
class CommRecord:
    round: int
    direction: str  # "up" | "down"
    component: str  # "autoencoder" | "encoder"
    client: int
    nbytes: int
    payload: bytes | None = None


@dataclass
class CommLedger:
    keep_payloads: bool = False
    records: list[CommRecord] = field(default_factory=list)

    def record(
        self, round_: int, direction: str, component: str, client: int, message: bytes
    ) -> None:
        self.records.append(
            CommRecord(
                round_,
                direction,
                component,
                client,
                len(message),
                message if self.keep_payloads else None,
            )
        )

    def total_bytes(self, component: str | None = None) -> int:
        return sum(
            r.nbytes for r in self.records if component is None or r.component == component
        )


@dataclass
class ClientState:
    client_id: int
    ae: AutoEncoder
    emb: ClientEmbedding
    head: DenseNet
    train_x: Array
    train_y: Array
    val_x: Array
    val_y: Array
    test_x: Array
    test_y: Array
    rng: np.random.Generator
    pretrain_state: PretrainState | None = None
    enc_opt: AdamState | None = None
    head_opt: AdamState | None = None


@dataclass
class ServerState:
    round: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)
    global_autoencoder: AutoEncoder | None = None


def aggregate(params_list: Sequence[Array]) -> Array:
    """Elementwise arithmetic mean of same-length parameter vectors."""
    if len(params_list) == 0:
        raise ValueError("cannot aggregate an empty parameter list")
    arrays = [np.asarray(p, dtype=np.float64) for p in params_list]
    for i, p in enumerate(arrays[1:], start=1):
        if p.shape != arrays[0].shape:
            raise ValueError(
                f"parameter vector {i} has shape {p.shape}, expected {arrays[0].shape}"
            )
    return np.mean(np.stack(arrays), axis=0)


def _map_clients(
    fn: Callable[[ClientState], object],
    clients: Sequence[ClientState],
    parallel: bool,
) -> list:
    """Run per-client work, serially or on a thread pool; output order is by index."""
    if not parallel or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=min(8, len(clients))) as pool:
        return list(pool.map(fn, clients))


def _serialize_autoencoder(ae: AutoEncoder) -> bytes:
    return nets.serialize_params(ae.encoder) + nets.serialize_params(ae.decoder)


def encoder_message_bytes(ae: AutoEncoder) -> int:
    return len(nets.serialize_params(ae.encoder))


def make_sampler(global_seed: int) -> np.random.Generator:
    return np.random.default_rng(mix64(global_seed, TAG_SAMPLER))


def sample_participants(
    sampler: np.random.Generator, n_clients: int, m: int
) -> list[int]:
    """Uniform without replacement; full participation skips the RNG draw."""
    if m >= n_clients:
        return list(range(n_clients))
    return sorted(int(i) for i in sampler.choice(n_clients, size=m, replace=False))


def run_pretrain_phase(
    clients: Sequence[ClientState],
    server: ServerState,
    sampler: np.random.Generator,
    rounds: int,
    local_epochs: int,
    lr: float,
    participants_per_round: int | None = None,
    train_embedding: bool = True,
    parallel: bool = False,
    on_round_end: Callable[[int], None] | None = None,
) -> AutoEncoder | None:
    """Phase-1 rounds: local reconstruction training, full auto-encoder FedAvg.

    Returns the final aggregated auto-encoder (None when rounds == 0); the
    final aggregate has already been distributed to that round's participants.
    Callers then distribute it everywhere and freeze the decoders.
    """
    m = participants_per_round or len(clients)
    final_global: AutoEncoder | None = None
    for r in range(1, rounds + 1):
        server.round += 1
        part = sample_participants(sampler, len(clients), m)
        active = [clients[i] for i in part]

        def local(client: ClientState) -> None:
            for _ in range(local_epochs):
                adapter.pretrain_step(
                    client.ae,
                    client.emb,
                    client.train_x,
                    lr,
                    client.pretrain_state,
                    train_embedding=train_embedding,
                )

        _map_clients(local, active, parallel)

        uploads = []
        for client in active:
            message = _serialize_autoencoder(client.ae)
            server.ledger.record(server.round, "up", "autoencoder", client.client_id, message)
            uploads.append(
                np.concatenate(
                    [
                        nets.get_flat_params(client.ae.encoder),
                        nets.get_flat_params(client.ae.decoder),
                    ]
                )
            )
        mean = aggregate(uploads)
        n_enc = clients[0].ae.encoder.param_count()
        for client in active:
            nets.set_flat_params(client.ae.encoder, mean[:n_enc])
            nets.set_flat_params(client.ae.decoder, mean[n_enc:])
            server.ledger.record(
                server.round, "down", "autoencoder", client.client_id,
                _serialize_autoencoder(client.ae),
            )
        final_global = active[0].ae.copy()
        server.global_autoencoder = final_global
        if on_round_end is not None:
            on_round_end(r)
    return final_global


def distribute_and_freeze(clients: Sequence[ClientState], reference: AutoEncoder) -> None:
    """Give every client the same encoder and decoder, then freeze the decoders."""
    enc = nets.get_flat_params(reference.encoder)
    dec = nets.get_flat_params(reference.decoder)
    for client in clients:
        nets.set_flat_params(client.ae.encoder, enc)
        nets.set_flat_params(client.ae.decoder, dec)
        adapter.freeze_decoder(client.ae)


def make_batch_loss(client: ClientState, sealed: SealedModel) -> zoo.BatchLoss:
    """Row-wise loss of decode -> sealed query -> remap head -> cross-entropy."""

    def loss_rows(z_rows: Array, labels: Array) -> Array:
        x_tilde = adapter.decode(client.ae, z_rows)
        logits = remap.remap_logits(client.head, sealed.query(x_tilde))
        return nets.cross_entropy_per_row(logits, labels)

    return loss_rows


def _sweep_window(client: ClientState, need_z: bool, need_emb: bool) -> Array:
    d1, d2 = client.ae.d1, client.emb.dim
    if need_z and need_emb:
        return np.arange(d1 + d2)
    if need_z:
        return np.arange(d1)
    return np.arange(d1, d1 + d2)


def estimate_batch_grads(
    client: ClientState,
    sealed: SealedModel,
    zo: ZOConfig,
    need_z: bool = True,
    need_emb: bool = True,
) -> tuple[Array, Array]:
    """Per-sample gradient estimates over z_tilde for the client's train batch."""
    z = adapter.encode(client.ae, client.train_x)
    z_mat = adapter.concat_embedding(z, client.emb)
    loss_rows = make_batch_loss(client, sealed)
    window = _sweep_window(client, need_z, need_emb)
    if zo.estimator == "rge":
        num_dirs = zo.coord_subset or len(window)
        grads = zoo.rge_gradient_batch(
            loss_rows, z_mat, client.train_y, zo.rho, num_dirs, client.rng, coords=window
        )
    else:
        if zo.coord_subset is not None and zo.coord_subset < len(window):
            window = np.sort(
                client.rng.choice(window, size=zo.coord_subset, replace=False)
            )
        grads = zoo.cge_gradient_batch(
            loss_rows, z_mat, client.train_y, zo.rho, coords=window
        )
    return grads[:, : client.ae.d1], grads[:, client.ae.d1 :]


def surgery_step(
    client: ClientState,
    sealed: SealedModel,
    zo: ZOConfig,
    update_encoder: bool = True,
    update_emb: bool = True,
) -> None:
    """One local zeroth-order step: estimate, update embedding, update encoder."""
    grad_z, grad_emb = estimate_batch_grads(
        client, sealed, zo, need_z=update_encoder, need_emb=update_emb
    )
    if update_emb:
        client.emb = zoo.update_embedding(client.emb, grad_emb.mean(axis=0), zo.gamma2)
    if update_encoder:
        zoo.update_encoder_chain(
            client.ae, client.train_x, grad_z, zo.gamma1, client.enc_opt
        )


def remap_step(client: ClientState, sealed: SealedModel, lr: float) -> float:
    """One local head update on the frozen pipeline's logits."""
    x_tilde = adapter.reconstruct(client.ae, client.emb, client.train_x)
    source_logits = sealed.query(x_tilde)
    return remap.remap_train_step(
        client.head, source_logits, client.train_y, lr, client.head_opt
    )


def _exchange_encoders(active: Sequence[ClientState], server: ServerState) -> None:
    uploads = []
    for client in active:
        message = nets.serialize_params(client.ae.encoder)
        server.ledger.record(server.round, "up", "encoder", client.client_id, message)
        uploads.append(nets.get_flat_params(client.ae.encoder))
    mean = aggregate(uploads)
    for client in active:
        nets.set_flat_params(client.ae.encoder, mean)
        server.ledger.record(
            server.round, "down", "encoder", client.client_id,
            nets.serialize_params(client.ae.encoder),
        )


def run_main_phase(
    clients: Sequence[ClientState],
    server: ServerState,
    sealed: SealedModel,
    sampler: np.random.Generator,
    rounds: int,
    zo: ZOConfig,
    lr_remap: float,
    order_variant: int = 1,
    local_epochs: int = 1,
    participants_per_round: int | None = None,
    skip_surgery: bool = False,
    skip_remap: bool = False,
    use_embedding: bool = True,
    parallel: bool = False,
    on_round_end: Callable[[int], None] | None = None,
) -> None:
    """Main-phase rounds under one of the three optimization orders.

    Order 1 (default): per round, a joint surgery step, encoder exchange, then
    a head step. Order 2: every round runs surgery only; the same number of
    local head epochs runs after the final round. Order 3: per round the
    encoder and the embedding are updated from two separate estimates, then
    the head. Sampled-out clients skip the whole round.
    """
    if order_variant not in (1, 2, 3):
        raise ValueError("order_variant must be 1, 2, or 3")
    m = participants_per_round or len(clients)
    for r in range(1, rounds + 1):
        server.round += 1
        part = sample_participants(sampler, len(clients), m)
        active = [clients[i] for i in part]

        if not skip_surgery:

            def local_surgery(client: ClientState) -> None:
                for _ in range(local_epochs):
                    if order_variant == 3:
                        surgery_step(client, sealed, zo, update_encoder=True, update_emb=False)
                        if use_embedding:
                            surgery_step(
                                client, sealed, zo, update_encoder=False, update_emb=True
                            )
                    else:
                        surgery_step(client, sealed, zo, update_emb=use_embedding)

            _map_clients(local_surgery, active, parallel)
            _exchange_encoders(active, server)

        if not skip_remap:
            if order_variant != 2:
                _map_clients(
                    lambda c: [remap_step(c, sealed, lr_remap) for _ in range(local_epochs)],
                    active,
                    parallel,
                )
            elif r == rounds:
                # order 2 defers head training; same per-client epoch budget
                _map_clients(
                    lambda c: [
                        remap_step(c, sealed, lr_remap)
                        for _ in range(rounds * local_epochs)
                    ],
                    active,
                    parallel,
                )
        if on_round_end is not None:
            on_round_end(r)


def fit_greedy_class_map(logits: Array, labels: Array, num_classes: int) -> Array:
    """Map each task class to its best source logit (highest class-mean logit).

    Classes absent from ``labels`` fall back to their own index modulo the
    source width. Collisions are allowed; this is a comparison floor, not a
    trained head.
    """
    mapping = np.arange(num_classes) % logits.shape[1]
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            mapping[c] = int(np.argmax(logits[mask].mean(axis=0)))
    return mapping


def mapped_scores(logits: Array, mapping: Array) -> Array:
    return logits[:, mapping]


def zero_shot_baseline(sealed: SealedModel, clients: Sequence[ClientState]) -> dict:
    """Accuracy of argmax over greedily mapped raw-input logits, per client.

    The class map is fitted one-shot on each client's validation split and
    evaluated on its train and test splits.
    """
    per_test, per_train, per_loss = [], [], []
    for client in clients:
        mapping = fit_greedy_class_map(
            sealed.query(client.val_x), client.val_y, client.head.output_dim
        )
        test_scores = mapped_scores(sealed.query(client.test_x), mapping)
        train_scores = mapped_scores(sealed.query(client.train_x), mapping)
        per_test.append(float(np.mean(test_scores.argmax(axis=1) == client.test_y)))
        per_train.append(float(np.mean(train_scores.argmax(axis=1) == client.train_y)))
        per_loss.append(
            float(nets.cross_entropy_per_row(train_scores, client.train_y).mean())
        )
    return {
        "per_client_test_acc": per_test,
        "avg_test_acc": float(np.mean(per_test)),
        "avg_train_acc": float(np.mean(per_train)),
        "avg_train_loss": float(np.mean(per_loss)),
    }
