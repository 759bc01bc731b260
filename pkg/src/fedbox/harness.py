"""Experiment runner: wires data, black box, clients, and phases; emits artifacts.

Each run writes metrics.csv (one row per round plus a baseline row), ledger.csv,
summary.json, a partition manifest, and checkpoints into its run directory.
All artifacts are deterministic functions of the config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import adapter, data, federation, nets, remap
from .blackbox import SealedModel, pretrain_and_seal
from .config import ConfigError, RunConfig
from .federation import ClientState, CommLedger, ServerState
from .seeds import (
    TAG_BLACKBOX,
    TAG_PARTITION,
    TAG_SERVER_INIT,
    TAG_SOURCE_DATA,
    TAG_TASK_DATA,
    client_seed,
    mix64,
)
from .zoo import ZOConfig

METRICS_COLUMNS = [
    "round",
    "phase",
    "avg_train_loss",
    "avg_train_acc",
    "avg_val_acc",
    "avg_test_acc",
    "per_client_test_acc",
    "cum_queries",
    "cum_comm_bytes",
]

SWEEP_PARAMS = {
    "rho": "rho",
    "gamma1": "gamma1",
    "gamma2": "gamma2",
    "alpha": "alpha",
    "train_frac": "train_frac",
    "T_main": "t_main",
    "t_main": "t_main",
}

ABLATION_VARIANTS = [
    ("zero_shot", {"t_pretrain": 0, "t_main": 0}),
    ("step3_only", {"skip_step1": True, "skip_step2": True}),
    ("step2_3", {"skip_step1": True}),
    ("full", {}),
    ("full_no_embedding", {"no_client_embedding": True}),
]

IMPROVEMENT_THRESHOLD_POINTS = 10.0


@dataclass
class RunResult:
    config: RunConfig
    run_dir: Path
    summary: dict
    metrics_rows: list[dict]
    server: ServerState
    clients: list[ClientState]
    sealed: SealedModel


def _load_task(cfg: RunConfig) -> data.LabeledDataset:
    if cfg.csv_path:
        return data.load_csv(cfg.csv_path)
    return data.synth_task(
        mix64(cfg.seed, TAG_TASK_DATA),
        cfg.n_samples,
        cfg.dim,
        cfg.num_classes,
        cfg.separation,
    )


def _build_blackbox(cfg: RunConfig, dim: int) -> tuple[SealedModel, float]:
    source = data.synth_task(
        mix64(cfg.seed, TAG_SOURCE_DATA),
        cfg.source_samples,
        dim,
        cfg.source_classes,
        cfg.separation,
    )
    return pretrain_and_seal(
        source.features,
        source.labels,
        tuple(cfg.bb_hidden) + (cfg.source_classes,),
        cfg.bb_epochs,
        cfg.bb_lr,
        mix64(cfg.seed, TAG_BLACKBOX),
    )


def _build_clients(
    cfg: RunConfig,
    task: data.LabeledDataset,
    partition: data.ClientPartition,
    logit_dim: int,
) -> list[ClientState]:
    server_rng = np.random.default_rng(mix64(cfg.seed, TAG_SERVER_INIT))
    base_ae = adapter.build_autoencoder(task.dim, cfg.d1, cfg.d2, cfg.ae_hidden, server_rng)
    clients = []
    for i in range(cfg.n_clients):
        ae = base_ae.copy()
        emb = adapter.ClientEmbedding(np.zeros(cfg.d2))
        head = remap.init_remap_head(logit_dim, task.num_classes)
        use_adam = cfg.optimizer == "adam"
        clients.append(
            ClientState(
                client_id=i,
                ae=ae,
                emb=emb,
                head=head,
                train_x=task.features[partition.train[i]],
                train_y=task.labels[partition.train[i]],
                val_x=task.features[partition.val[i]],
                val_y=task.labels[partition.val[i]],
                test_x=task.features[partition.test[i]],
                test_y=task.labels[partition.test[i]],
                rng=np.random.default_rng(client_seed(cfg.seed, i)),
                pretrain_state=adapter.PretrainState.for_client(ae, emb) if use_adam else None,
                enc_opt=nets.AdamState.for_net(ae.encoder) if use_adam else None,
                head_opt=nets.AdamState.for_net(head) if use_adam else None,
            )
        )
    return clients


def _evaluate_round(
    clients: Sequence[ClientState],
    sealed: SealedModel,
    phase: str,
) -> dict:
    """Per-round metrics averaged over all clients (observers, not participants)."""
    train_losses, train_accs, val_accs, test_accs = [], [], [], []
    for c in clients:
        if phase == "pretrain":
            recon = adapter.reconstruct(c.ae, c.emb, c.train_x)
            loss, _ = nets.mse_loss(recon, c.train_x)
            _, acc_tr = remap.evaluate(c.head, c.ae, c.emb, sealed, c.train_x, c.train_y)
        else:
            loss, acc_tr = remap.evaluate(c.head, c.ae, c.emb, sealed, c.train_x, c.train_y)
        _, acc_val = remap.evaluate(c.head, c.ae, c.emb, sealed, c.val_x, c.val_y)
        _, acc_te = remap.evaluate(c.head, c.ae, c.emb, sealed, c.test_x, c.test_y)
        train_losses.append(loss)
        train_accs.append(acc_tr)
        val_accs.append(acc_val)
        test_accs.append(acc_te)
    return {
        "avg_train_loss": float(np.mean(train_losses)),
        "avg_train_acc": float(np.mean(train_accs)),
        "avg_val_acc": float(np.mean(val_accs)),
        "avg_test_acc": float(np.mean(test_accs)),
        "per_client_test_acc": [float(a) for a in test_accs],
    }


def _format_cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "|".join(repr(float(v)) for v in value)
    return str(value)


def write_metrics_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row[col]) for col in METRICS_COLUMNS])


def write_ledger_csv(ledger: CommLedger, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "direction", "component", "client", "nbytes"])
        for r in ledger.records:
            writer.writerow([r.round, r.direction, r.component, r.client, r.nbytes])


def _save_checkpoints(run_dir: Path, clients: Sequence[ClientState], sealed: SealedModel) -> None:
    sealed.save(run_dir / "sealed_model.bin")
    ref = clients[0].ae
    blob = nets.serialize_params(ref.encoder) + nets.serialize_params(ref.decoder)
    (run_dir / "autoencoder.bin").write_bytes(blob)
    client_dir = run_dir / "clients"
    client_dir.mkdir(exist_ok=True)
    for c in clients:
        np.savez(
            client_dir / f"client_{c.client_id:02d}.npz",
            embedding=c.emb.values,
            head_weight=c.head.layers[0].weight,
            head_bias=c.head.layers[0].bias,
        )


def run(cfg: RunConfig, out_dir: str | Path) -> RunResult:
    """Execute one full experiment and write its artifacts into ``out_dir``."""
    cfg = cfg.normalized()
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    task = _load_task(cfg)
    if cfg.csv_path:
        cfg = dataclasses.replace(cfg, dim=task.dim, num_classes=task.num_classes)
    partition = data.partition_clients(
        task.labels, cfg.n_clients, cfg.alpha, cfg.train_frac, mix64(cfg.seed, TAG_PARTITION)
    )
    data.write_manifest(partition, cfg.seed, run_dir / "partition_manifest.json")

    sealed, source_acc = _build_blackbox(cfg, task.dim)
    clients = _build_clients(cfg, task, partition, sealed.logit_dim)
    server = ServerState(ledger=CommLedger(keep_payloads=cfg.keep_payloads))
    sampler = federation.make_sampler(cfg.seed)
    encoder_bytes = federation.encoder_message_bytes(clients[0].ae)

    rows: list[dict] = []

    def record(phase: str) -> None:
        stats = _evaluate_round(clients, sealed, phase)
        rows.append(
            {
                "round": len(rows),
                "phase": phase,
                **stats,
                "cum_queries": sealed.query_count,
                "cum_comm_bytes": server.ledger.total_bytes(),
            }
        )

    zs = federation.zero_shot_baseline(sealed, clients)
    zs_val = _evaluate_zero_shot_val(sealed, clients)
    rows.append(
        {
            "round": 0,
            "phase": "baseline",
            "avg_train_loss": zs["avg_train_loss"],
            "avg_train_acc": zs["avg_train_acc"],
            "avg_val_acc": zs_val,
            "avg_test_acc": zs["avg_test_acc"],
            "per_client_test_acc": zs["per_client_test_acc"],
            "cum_queries": sealed.query_count,
            "cum_comm_bytes": server.ledger.total_bytes(),
        }
    )

    final_ae = None
    if cfg.t_pretrain > 0:
        final_ae = federation.run_pretrain_phase(
            clients,
            server,
            sampler,
            rounds=cfg.t_pretrain,
            local_epochs=cfg.local_epochs,
            lr=cfg.lr_pretrain,
            participants_per_round=cfg.participants,
            train_embedding=not cfg.no_client_embedding,
            parallel=cfg.parallel_clients,
            on_round_end=lambda r: record("pretrain"),
        )
    federation.distribute_and_freeze(clients, final_ae or clients[0].ae)
    pretrain_bytes = server.ledger.total_bytes("autoencoder")

    zo = ZOConfig(
        rho=cfg.rho,
        gamma1=cfg.gamma1,
        gamma2=cfg.gamma2,
        coord_subset=cfg.coord_subset or None,
        estimator=cfg.estimator,
    )
    if cfg.t_main > 0:
        federation.run_main_phase(
            clients,
            server,
            sealed,
            sampler,
            rounds=cfg.t_main,
            zo=zo,
            lr_remap=cfg.lr_remap,
            order_variant=cfg.order,
            local_epochs=cfg.local_epochs,
            participants_per_round=cfg.participants,
            skip_surgery=cfg.skip_step2,
            skip_remap=cfg.skip_step3,
            use_embedding=not cfg.no_client_embedding,
            parallel=cfg.parallel_clients,
            on_round_end=lambda r: record("main"),
        )

    main_rows = [r for r in rows if r["phase"] == "main"]
    final_row = rows[-1]
    if main_rows:
        best = max(main_rows, key=lambda r: (r["avg_val_acc"], -r["round"]))
        best_validation = {
            "round": best["round"],
            "avg_val_acc": best["avg_val_acc"],
            "avg_test_acc": best["avg_test_acc"],
        }
    else:
        best_validation = {
            "round": final_row["round"],
            "avg_val_acc": final_row["avg_val_acc"],
            "avg_test_acc": final_row["avg_test_acc"],
        }

    summary = {
        "config": cfg.to_dict(),
        "source_accuracy": source_acc,
        "encoder_message_bytes": encoder_bytes,
        "zero_shot": {
            "avg_test_acc": zs["avg_test_acc"],
            "avg_train_acc": zs["avg_train_acc"],
            "per_client_test_acc": zs["per_client_test_acc"],
        },
        "final": {
            "avg_test_acc": final_row["avg_test_acc"],
            "avg_train_acc": final_row["avg_train_acc"],
            "avg_train_loss": final_row["avg_train_loss"],
            "avg_val_acc": final_row["avg_val_acc"],
            "per_client_test_acc": final_row["per_client_test_acc"],
        },
        "best_validation": best_validation,
        "improvement_delta_points": 100.0 * (final_row["avg_test_acc"] - zs["avg_test_acc"]),
        "improvement_threshold_points": IMPROVEMENT_THRESHOLD_POINTS,
        "totals": {
            "queries": sealed.query_count,
            "comm_bytes": server.ledger.total_bytes(),
            "pretrain_comm_bytes": pretrain_bytes,
            "main_comm_bytes": server.ledger.total_bytes("encoder"),
        },
    }

    write_metrics_csv(rows, run_dir / "metrics.csv")
    write_ledger_csv(server.ledger, run_dir / "ledger.csv")
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _save_checkpoints(run_dir, clients, sealed)
    return RunResult(cfg, run_dir, summary, rows, server, clients, sealed)


def _evaluate_zero_shot_val(sealed: SealedModel, clients: Sequence[ClientState]) -> float:
    accs = []
    for c in clients:
        mapping = federation.fit_greedy_class_map(
            sealed.query(c.val_x), c.val_y, c.head.output_dim
        )
        scores = federation.mapped_scores(sealed.query(c.val_x), mapping)
        accs.append(float(np.mean(scores.argmax(axis=1) == c.val_y)))
    return float(np.mean(accs))


def ablation_suite(base_cfg: RunConfig, out_dir: str | Path) -> list[dict]:
    """Run the five ablation variants and write one comparison table."""
    base_cfg = base_cfg.normalized()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table: list[dict] = []
    zs_acc = None
    for name, changes in ABLATION_VARIANTS:
        cfg = dataclasses.replace(base_cfg, **changes)
        result = run(cfg, out_dir / name)
        if name == "zero_shot":
            acc = result.summary["zero_shot"]["avg_test_acc"]
            train_acc = result.summary["zero_shot"]["avg_train_acc"]
            zs_acc = acc
        else:
            acc = result.summary["final"]["avg_test_acc"]
            train_acc = result.summary["final"]["avg_train_acc"]
        table.append(
            {
                "variant": name,
                "avg_test_acc": acc,
                "avg_train_acc": train_acc,
                "delta_vs_zero_shot": acc - (zs_acc if zs_acc is not None else 0.0),
            }
        )
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "avg_test_acc", "avg_train_acc", "delta_vs_zero_shot"])
        for row in table:
            writer.writerow(
                [
                    row["variant"],
                    repr(row["avg_test_acc"]),
                    repr(row["avg_train_acc"]),
                    repr(row["delta_vs_zero_shot"]),
                ]
            )
    return table


def sweep(cfg: RunConfig, param: str, values: Sequence, out_dir: str | Path) -> list[dict]:
    """Re-run the config at each value of one hyperparameter."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(
            f"unsupported sweep parameter {param!r}; choose from "
            f"{sorted(set(SWEEP_PARAMS) - {'t_main'})}"
        )
    field = SWEEP_PARAMS[param]
    field_type = {f.name: f.type for f in dataclasses.fields(RunConfig)}[field]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        typed = int(value) if field_type == "int" else float(value)
        variant = dataclasses.replace(cfg, **{field: typed}).normalized()
        result = run(variant, out_dir / f"{field}_{typed}")
        rows.append(
            {
                "param": field,
                "value": typed,
                "final_avg_test_acc": result.summary["final"]["avg_test_acc"],
                "zero_shot_avg_test_acc": result.summary["zero_shot"]["avg_test_acc"],
            }
        )
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "final_avg_test_acc", "zero_shot_avg_test_acc"])
        for row in rows:
            writer.writerow(
                [
                    row["param"],
                    row["value"],
                    repr(row["final_avg_test_acc"]),
                    repr(row["zero_shot_avg_test_acc"]),
                ]
            )
    return rows


def zero_shot_only(cfg: RunConfig) -> dict:
    """Build data and the sealed model, then report the zero-shot baseline."""
    cfg = cfg.normalized()
    task = _load_task(cfg)
    if cfg.csv_path:
        cfg = dataclasses.replace(cfg, dim=task.dim, num_classes=task.num_classes)
    partition = data.partition_clients(
        task.labels, cfg.n_clients, cfg.alpha, cfg.train_frac, mix64(cfg.seed, TAG_PARTITION)
    )
    sealed, source_acc = _build_blackbox(cfg, task.dim)
    clients = _build_clients(cfg, task, partition, sealed.logit_dim)
    out = federation.zero_shot_baseline(sealed, clients)
    out["source_accuracy"] = source_acc
    return out
