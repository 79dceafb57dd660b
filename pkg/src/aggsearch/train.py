"""Bi-level search training, derived-network retraining, checkpoints.

The search alternates per batch pair: a weight step minimizes cross-entropy
on a trainA batch with the architecture logits bound as constants, then an
architecture step minimizes cross-entropy plus the weighted discretization
penalty on a trainB batch with the network weights bound as constants.
Binding frozen groups off-tape makes the freeze contracts exact: a step
cannot touch what it never differentiates, and each group has its own
optimizer state.

trainA/trainB is a seeded shuffle split of the training set. Everything is
single-threaded and deterministic under the run seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample, batch_arrays, dice_per_class, flip_augment, mean_foreground_dice
from .errors import ConfigError, FormatError, NumericsError
from .grid import DerivedGraph
from .network import DerivedNetwork, Supernet
from .ops import cross_entropy
from .optim import Adam, AdamConfig
from .tensor import Tape, Tensor, load_tensor, save_tensor

CHECKPOINT_SCHEMA = "agg_checkpoint_v1"
MODEL_SCHEMA = "agg_model_v1"
METRIC_FIELDS = ("step", "loss_w", "loss_arch", "mean_gate", "alpha_entropy", "dice")


@dataclass(frozen=True)
class BiLevelConfig:
    epochs: int = 8
    batch_size: int = 2
    split_fraction: float = 0.5
    w_lr: float = 3e-4
    w_betas: tuple[float, float] = (0.9, 0.99)
    w_weight_decay: float = 0.0
    arch_lr: float = 3e-3
    arch_betas: tuple[float, float] = (0.9, 0.99)
    arch_weight_decay: float = 1e-3
    lambda_sparsity: float = 1.0
    arch_steps_per_w_step: int = 1
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"search.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"search.batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError(f"search.split_fraction must be in (0, 1), "
                              f"got {self.split_fraction}")
        if self.lambda_sparsity < 0:
            raise ConfigError(f"search.lambda_sparsity must be >= 0, "
                              f"got {self.lambda_sparsity}")
        if self.arch_steps_per_w_step < 1:
            raise ConfigError(f"search.arch_steps_per_w_step must be >= 1, "
                              f"got {self.arch_steps_per_w_step}")


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 16
    batch_size: int = 2
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"retrain.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"retrain.batch_size must be >= 1, got {self.batch_size}")


def split_indices(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded disjoint covering split; both sides non-empty."""
    if n < 2:
        raise ConfigError(f"need at least 2 training samples to split, got {n}")
    perm = np.random.default_rng([seed, 71]).permutation(n)
    k = min(max(int(round(n * fraction)), 1), n - 1)
    return sorted(int(i) for i in perm[:k]), sorted(int(i) for i in perm[k:])


def _epoch_batches(indices: list[int], batch_size: int,
                   rng: np.random.Generator) -> list[list[int]]:
    order = [indices[i] for i in rng.permutation(len(indices))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _finite_or_raise(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericsError(f"non-finite {what}: {value}")
    return value


class SearchRun:
    """Owns a supernet plus its two optimizers for one search."""

    def __init__(self, net: Supernet, cfg: BiLevelConfig, seed: int):
        self.net = net
        self.cfg = cfg
        self.seed = seed
        self.adam_w = Adam(AdamConfig(lr=cfg.w_lr, beta1=cfg.w_betas[0],
                                      beta2=cfg.w_betas[1],
                                      weight_decay=cfg.w_weight_decay))
        self.adam_arch = Adam(AdamConfig(lr=cfg.arch_lr, beta1=cfg.arch_betas[0],
                                         beta2=cfg.arch_betas[1],
                                         weight_decay=cfg.arch_weight_decay))
        self.step = 0
        self.history: list[dict] = []

    def _loss_step(self, samples: list[Sample], trainable: set[str],
                   with_penalty: bool, adam: Adam,
                   rng: np.random.Generator | None) -> float:
        images, labels = batch_arrays(samples)
        if rng is not None:
            images, labels = flip_augment(images, labels, rng)
        tape = Tape()
        params = self.net.store.bind(tape, trainable)
        logits = self.net.forward(params, Tensor(images))
        loss = cross_entropy(logits, labels)
        if with_penalty and self.cfg.lambda_sparsity:
            loss = loss + self.cfg.lambda_sparsity * self.net.connection_penalty(params)
        value = _finite_or_raise(loss.item(), "loss")
        grads = tape.backward(loss)
        names = [n for n in self.net.store.names() if self.net.store.roles[n] in trainable]
        adam.step({n: self.net.store.params[n] for n in names},
                  {n: grads[params[n].grad_id].data for n in names})
        return value

    def run(self, train: list[Sample], on_row=None) -> list[dict]:
        """Full bi-level search; returns (and stores) per-step metric rows."""
        cfg = self.cfg
        idx_a, idx_b = split_indices(len(train), cfg.split_fraction, self.seed)
        has_arch = bool(self.net.store.names("arch"))
        rng_batch = np.random.default_rng([self.seed, 11])
        rng_aug = np.random.default_rng([self.seed, 13]) if cfg.augment else None
        eval_ids = idx_b[:min(4, len(idx_b))]
        for epoch in range(cfg.epochs):
            batches_a = _epoch_batches(idx_a, cfg.batch_size, rng_batch)
            batches_b = _epoch_batches(idx_b, cfg.batch_size, rng_batch)
            bi = 0
            for batch_a in batches_a:
                loss_w = self._loss_step([train[i] for i in batch_a], {"weight"},
                                         False, self.adam_w, rng_aug)
                loss_arch = float("nan")
                if has_arch:
                    for _ in range(cfg.arch_steps_per_w_step):
                        batch_b = batches_b[bi % len(batches_b)]
                        bi += 1
                        loss_arch = self._loss_step([train[i] for i in batch_b],
                                                    {"arch"}, True, self.adam_arch,
                                                    rng_aug)
                self.step += 1
                row = {
                    "step": self.step,
                    "loss_w": loss_w,
                    "loss_arch": loss_arch,
                    "mean_gate": self.net.mean_gate(),
                    "alpha_entropy": self.net.alpha_entropy(),
                    "dice": self._quick_dice(train, eval_ids)
                            if (batch_a is batches_a[-1]) else float("nan"),
                }
                self.history.append(row)
                if on_row is not None:
                    on_row(row)
        return self.history

    def _quick_dice(self, train: list[Sample], ids: list[int]) -> float:
        if not ids:
            return float("nan")
        images, labels = batch_arrays([train[i] for i in ids])
        logits = self.net.forward(self.net.store.bind(Tape(), set()), Tensor(images))
        pred = np.argmax(logits.data, axis=1)
        return mean_foreground_dice(pred, labels, self.net.num_classes)


def predict_labels(net, images: np.ndarray) -> np.ndarray:
    logits = net.forward(net.store.bind(Tape(), set()), Tensor(images))
    return np.argmax(logits.data, axis=1)


def evaluate_dice(net, samples: list[Sample], batch_size: int = 2) -> dict:
    """Per-class and mean foreground Dice over a sample list."""
    preds, labels = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, labs = batch_arrays(chunk)
        preds.append(predict_labels(net, images))
        labels.append(labs)
    pred = np.concatenate(preds)
    truth = np.concatenate(labels)
    per_class = dice_per_class(pred, truth, net.num_classes)
    return {"per_class": per_class,
            "mean_foreground": float(np.mean(per_class[1:]))}


def retrain_derived(graph: DerivedGraph, train: list[Sample], val: list[Sample],
                    cfg: RetrainConfig, seed: int,
                    on_row=None) -> tuple[DerivedNetwork, list[dict], dict]:
    """Fresh-weights single-level training of a derived network.

    Returns the trained network, the metric rows, and the final validation
    Dice report. Rejects graphs whose output is unreachable from the stem.
    """
    net = DerivedNetwork(graph, seed=seed)
    reachable = _graph_reaches_output(graph)
    if not reachable:
        raise ConfigError("derived graph has no stem-to-output path; "
                          "retraining a disconnected architecture is refused")
    adam = Adam(AdamConfig(lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1],
                           weight_decay=cfg.weight_decay))
    rng_batch = np.random.default_rng([seed, 17])
    rng_aug = np.random.default_rng([seed, 19]) if cfg.augment else None
    rows: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch in _epoch_batches(list(range(len(train))), cfg.batch_size, rng_batch):
            images, labels = batch_arrays([train[i] for i in batch])
            if rng_aug is not None:
                images, labels = flip_augment(images, labels, rng_aug)
            tape = Tape()
            params = net.store.bind(tape, {"weight"})
            loss = cross_entropy(net.forward(params, Tensor(images)), labels)
            value = _finite_or_raise(loss.item(), "loss")
            grads = tape.backward(loss)
            adam.step(net.store.params,
                      {n: grads[params[n].grad_id].data for n in net.store.params})
            step += 1
            row = {"step": step, "loss_w": value, "loss_arch": float("nan"),
                   "mean_gate": 1.0, "alpha_entropy": 0.0, "dice": float("nan")}
            rows.append(row)
            if on_row is not None:
                on_row(row)
    report = evaluate_dice(net, val) if val else {"per_class": [], "mean_foreground": float("nan")}
    if rows and val:
        rows[-1]["dice"] = report["mean_foreground"]
    return net, rows, report


def _graph_reaches_output(graph: DerivedGraph) -> bool:
    edges = graph.edge_keys()
    stem, output = (0, 0), (graph.levels - 1, 0)
    seen, frontier = {stem}, [stem]
    while frontier:
        n = frontier.pop()
        for s, d in edges:
            if s == n and d not in seen:
                seen.add(d)
                frontier.append(d)
    return output in seen


# -- checkpoint / model directories --------------------------------------


def _save_arrays(directory: Path, prefix: str, arrays: dict[str, np.ndarray]) -> list[dict]:
    index = []
    for i, (name, arr) in enumerate(arrays.items()):
        fname = f"{prefix}_{i:04d}.agt"
        save_tensor(directory / fname, Tensor(arr))
        index.append({"name": name, "file": fname, "shape": list(arr.shape)})
    return index


def _load_arrays(directory: Path, index: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for entry in index:
        t = load_tensor(directory / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise FormatError(f"{entry['file']}: shape {t.shape} does not match "
                              f"manifest {entry['shape']}")
        out[entry["name"]] = t.data
    return out


def save_checkpoint(directory, run: SearchRun, config_doc: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    net = run.net
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "prng": "numpy-pcg64",
        "config": config_doc,
        "step": run.step,
        "adam_w_t": run.adam_w.t,
        "adam_arch_t": run.adam_arch.t,
        "candidates": net.candidate_manifest(),
        "roles": net.store.roles,
        "params": _save_arrays(d, "param", net.store.params),
        "adam_w": _save_arrays(d, "adamw", run.adam_w.state_arrays()),
        "adam_arch": _save_arrays(d, "adama", run.adam_arch.state_arrays()),
        "history_tail": run.history[-1] if run.history else None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _supernet_from_config(config_doc: dict) -> Supernet:
    task = config_doc["task"]
    grid = config_doc["grid"]
    search = config_doc["search"]
    return Supernet(rank=task["rank"], levels=grid["levels"],
                    base_channels=grid["base_channels"],
                    in_channels=1, num_classes=task["num_classes"],
                    sbb=search["sbb"], mssa=search["mssa"],
                    decoder_mode=grid["decoder_mode"], seed=config_doc["seed"])


def load_checkpoint(directory) -> tuple[Supernet, SearchRun, dict]:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FormatError(f"{d}: no checkpoint manifest.json")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{d}: corrupt manifest: {e}") from None
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{d}: unknown checkpoint schema {manifest.get('schema')!r}")
    config_doc = manifest["config"]
    net = _supernet_from_config(config_doc)
    params = _load_arrays(d, manifest["params"])
    if set(params) != set(net.store.params):
        raise FormatError(f"{d}: checkpoint parameters do not match the "
                          f"architecture built from its config")
    for name, arr in params.items():
        net.store.params[name][...] = arr
    search_cfg = BiLevelConfig(**config_doc["search_hyper"])
    run = SearchRun(net, search_cfg, seed=config_doc["seed"])
    run.step = manifest["step"]
    run.adam_w.load_state(manifest["adam_w_t"], _load_arrays(d, manifest["adam_w"]))
    run.adam_arch.load_state(manifest["adam_arch_t"], _load_arrays(d, manifest["adam_arch"]))
    return net, run, config_doc


def save_model(directory, net: DerivedNetwork, config_doc: dict, report: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": MODEL_SCHEMA,
        "config": config_doc,
        "dice": report,
        "params": _save_arrays(d, "param", net.store.params),
    }
    (d / "graph.json").write_text(net.graph.to_json())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(directory) -> tuple[DerivedNetwork, dict]:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FormatError(f"{d}: no model manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("schema") != MODEL_SCHEMA:
        raise FormatError(f"{d}: unknown model schema {manifest.get('schema')!r}")
    graph = DerivedGraph.from_json((d / "graph.json").read_text())
    net = DerivedNetwork(graph, seed=0)
    params = _load_arrays(d, manifest["params"])
    if set(params) != set(net.store.params):
        raise FormatError(f"{d}: model parameters do not match its graph")
    for name, arr in params.items():
        net.store.params[name][...] = arr
    return net, manifest
