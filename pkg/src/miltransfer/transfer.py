"""Transfer protocols: checkpoint container, initialization from pretrained
weights, frozen slide-embedding extraction, KNN evaluation, progressive
layer reset, and finetuning.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models, training
from .bagdata import DatasetManifest, TaskSpec
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .metrics import EvalResult, evaluate_records
from .models import ModelConfig, ModelParams
from .training import TrainConfig, TrainResult

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1

RESET_SPECS = ("attn", "lin3plus", "lin2plus", "all")


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ModelParams
    pretrain_task_id: str = ""
    train_summary: dict = field(default_factory=dict)
    created_at: str = ""
    format_version: int = CHECKPOINT_VERSION


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["fc_hidden_dims"] = list(d["fc_hidden_dims"])
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["fc_hidden_dims"] = tuple(d.get("fc_hidden_dims", ()))
    return ModelConfig(**d)


def config_digest(cfg: ModelConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoint container: magic, version byte, u64 header length, JSON header,
# then one concatenated float32-LE blob
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    schema = models.param_schema(ckpt.cfg)
    missing = [name for name, _ in schema if name not in ckpt.params]
    if missing:
        raise ShapeMismatchError(f"checkpoint params missing layers: {missing}")
    layers = []
    offset = 0
    blobs = []
    for name, shape in schema:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        if arr.shape != shape:
            raise ShapeMismatchError(f"layer {name!r}: shape {arr.shape} != schema {shape}")
        raw = arr.tobytes()
        layers.append({"name": name, "shape": list(shape),
                       "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "cfg": config_to_dict(ckpt.cfg),
        "cfg_digest": config_digest(ckpt.cfg),
        "pretrain_task_id": ckpt.pretrain_task_id,
        "train_summary": ckpt.train_summary,
        "created_at": ckpt.created_at or datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "layers": layers,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(b"".join(blobs))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 5)
    header_start = 13
    try:
        header = json.loads(data[header_start:header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    cfg = config_from_dict(header["cfg"])
    blob = data[header_start + header_len:]

    schema = dict(models.param_schema(cfg))
    params: ModelParams = {}
    seen = set()
    for layer in header["layers"]:
        name = layer["name"]
        shape = tuple(layer["shape"])
        if name not in schema:
            raise ShapeMismatchError(f"{path}: layer {name!r} not in {cfg.arch} schema")
        if shape != schema[name]:
            raise ShapeMismatchError(
                f"{path}: layer {name!r} stored shape {shape} != config shape {schema[name]}")
        start, length = layer["offset"], layer["length"]
        if length != int(np.prod(shape)) * 4 or start + length > len(blob):
            raise CheckpointFormatError(f"{path}: layer {name!r} has inconsistent extent")
        params[name] = np.frombuffer(blob[start:start + length], dtype="<f4").reshape(shape).copy()
        seen.add(name)
    missing = [name for name in schema if name not in seen]
    if missing:
        raise ShapeMismatchError(f"{path}: missing layers {missing}")
    return Checkpoint(cfg=cfg, params=params,
                      pretrain_task_id=header.get("pretrain_task_id", ""),
                      train_summary=header.get("train_summary", {}),
                      created_at=header.get("created_at", ""),
                      format_version=header["format_version"])


# ---------------------------------------------------------------------------
# initialization and layer reset
# ---------------------------------------------------------------------------

def _head_layers(cfg: ModelConfig) -> tuple[str, ...]:
    """Layers whose shape is tied to the task's class count."""
    if cfg.arch == "auxmil":
        return ("classifier.weight", "classifier.bias", "aux.head.weight", "aux.head.bias")
    return ("classifier.weight", "classifier.bias")


def init_from_pretrained(ckpt: Checkpoint, target: TaskSpec | int,
                         seed: int) -> tuple[ModelConfig, ModelParams]:
    """Copy every backbone layer from the checkpoint; the classifier head
    (and the aux head, whose shape is class-bound) is always freshly
    re-initialized for the target class count, even when the counts match.
    """
    n_classes = target.n_classes if isinstance(target, TaskSpec) else int(target)
    cfg = ckpt.cfg.retarget(n_classes)
    rng = np.random.default_rng(seed)
    heads = _head_layers(cfg)
    params: ModelParams = {}
    for name, shape in models.param_schema(cfg):
        if name in heads:
            params[name] = models.init_layer(rng, name, shape)
        else:
            src = ckpt.params.get(name)
            if src is None:
                raise ShapeMismatchError(
                    f"source checkpoint ({ckpt.cfg.arch}) lacks layer {name!r} "
                    f"required by {cfg.arch}")
            params[name] = src.copy()
    return cfg, params


def reset_layers(ckpt: Checkpoint, reset_spec: str, seed: int) -> ModelParams:
    """Replace the named pretrained layers with fresh initializer draws.

    ``attn``      attention layers only
    ``lin3plus``  third-and-later FC layers plus attention
    ``lin2plus``  second-and-later FC layers plus attention
    ``all``       every backbone layer (classifier heads excluded; they are
                  re-initialized downstream by init_from_pretrained)
    """
    if reset_spec not in RESET_SPECS:
        raise ConfigError(f"unknown reset spec {reset_spec!r}")
    cfg = ckpt.cfg
    if cfg.arch not in ("abmil", "auxmil"):
        raise ConfigError(f"reset_layers requires an attention-family model, got {cfg.arch}")
    n_fc = len(cfg.fc_dims()) - 1
    if reset_spec in ("lin2plus", "lin3plus") and n_fc < 3:
        raise ConfigError(f"reset spec {reset_spec!r} needs >= 3 FC layers, model has {n_fc}")

    heads = _head_layers(cfg)

    def selected(name: str) -> bool:
        if name in heads:
            return False
        if reset_spec == "all":
            return True
        if name.startswith("attn."):
            return True
        if name.startswith("fc."):
            idx = int(name.split(".")[1])
            if reset_spec == "lin3plus":
                return idx >= 2
            if reset_spec == "lin2plus":
                return idx >= 1
        return False

    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in models.param_schema(cfg):
        if selected(name):
            params[name] = models.init_layer(rng, name, shape)
        else:
            params[name] = ckpt.params[name].copy()
    return params


# ---------------------------------------------------------------------------
# frozen-embedding evaluation
# ---------------------------------------------------------------------------

def embed_bags(cfg: ModelConfig, params: ModelParams, manifest: DatasetManifest,
               split: str, features: dict[str, np.ndarray] | None = None):
    """Eval-mode slide embedding per bag, in manifest order.

    Returns (bag_ids, embeddings matrix, labels).
    """
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    rows, bag_ids, labels = [], [], []
    for e in entries:
        x = features[e.bag_id] if features is not None else manifest.load_features(e)
        out = models.forward(params, cfg, x)
        rows.append(np.asarray(out.embedding, dtype=np.float32))
        bag_ids.append(e.bag_id)
        labels.append(e.label)
    return bag_ids, np.stack(rows), np.asarray(labels, dtype=np.int64)


def knn_predict(train_embeddings: np.ndarray, train_labels: np.ndarray,
                query: np.ndarray, k: int, n_classes: int,
                distance: str = "euclidean"):
    """Per-query KNN vote.  Returns (predictions, positive-neighbor fraction).

    Majority vote; ties between classes broken by summed inverse distance,
    then by the lower class index.
    """
    if k > train_embeddings.shape[0]:
        raise DataError(f"k={k} exceeds {train_embeddings.shape[0]} train embeddings")
    if distance == "euclidean":
        d = np.sqrt(np.maximum(
            ((query[:, None, :] - train_embeddings[None, :, :]) ** 2).sum(-1), 0.0))
    elif distance == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        tn = train_embeddings / np.maximum(
            np.linalg.norm(train_embeddings, axis=1, keepdims=True), 1e-12)
        d = 1.0 - qn @ tn.T
    else:
        raise ConfigError(f"unknown distance {distance!r}")

    preds = np.zeros(query.shape[0], dtype=np.int64)
    pos_fraction = np.zeros(query.shape[0])
    for i in range(query.shape[0]):
        order = np.argsort(d[i], kind="stable")[:k]
        neigh_labels = train_labels[order]
        votes = np.bincount(neigh_labels, minlength=n_classes)
        best = votes.max()
        tied = np.flatnonzero(votes == best)
        if tied.size > 1:
            inv = np.zeros(n_classes)
            for c in tied:
                mask = neigh_labels == c
                inv[c] = (1.0 / (d[i][order][mask] + 1e-12)).sum()
            tied = tied[inv[tied] == inv[tied].max()]
        preds[i] = tied[0]
        pos_fraction[i] = (neigh_labels == 1).mean()
    return preds, pos_fraction


def knn_evaluate(train_embeddings, train_labels, test_embeddings, test_labels,
                 task: TaskSpec, k: int = 20, distance: str = "euclidean",
                 bag_ids=None, n_bootstrap: int = 1000, seed: int = 0,
                 context: dict | None = None) -> EvalResult:
    """Frozen-feature KNN transfer metric with bootstrap uncertainty.

    AUROC tasks score each bag by the fraction of its k neighbors in the
    positive class; other tasks use the majority-vote prediction.
    """
    preds, pos_fraction = knn_predict(np.asarray(train_embeddings),
                                      np.asarray(train_labels),
                                      np.asarray(test_embeddings), k,
                                      task.n_classes, distance)
    values = pos_fraction if task.metric == "auroc" else preds
    ids = list(bag_ids) if bag_ids is not None else [str(i) for i in range(len(preds))]
    ctx = {"protocol": "knn", "k": k, "distance": distance}
    ctx.update(context or {})
    return evaluate_records(task.metric, task.n_classes, ids, test_labels, values,
                            n_bootstrap=n_bootstrap, seed=seed, context=ctx)


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------

@dataclass
class TransferPlan:
    target: DatasetManifest
    source: Checkpoint | None = None          # None = random initialization
    model_cfg: ModelConfig | None = None      # required for random init
    mode: str = "finetune"
    reset_spec: str | None = None             # optional layer reset before transfer

    def __post_init__(self):
        if self.source is None and self.model_cfg is None:
            raise ConfigError("random-init plan needs a model_cfg")
        if self.mode not in ("finetune", "knn"):
            raise ConfigError(f"unknown transfer mode {self.mode!r}")
        if self.reset_spec is not None and self.source is None:
            raise ConfigError("reset_spec requires a pretrained source")


@dataclass
class FinetuneResult:
    cfg: ModelConfig
    result: TrainResult
    eval_result: EvalResult
    init_kind: str
    source_task: str
    target_task: str


def finetune(plan: TransferPlan, train_cfg: TrainConfig,
             features: dict[str, np.ndarray] | None = None,
             n_bootstrap: int = 1000) -> FinetuneResult:
    """Train on the plan's target task and evaluate on its test split.

    Pretrained sources keep every backbone layer (optionally after a reset)
    and re-initialize the classifier; a random source is exactly
    ``build_model`` followed by ``train``.
    """
    task = plan.target.task
    if plan.source is not None:
        src = plan.source
        if plan.reset_spec is not None:
            src = Checkpoint(cfg=src.cfg, params=reset_layers(src, plan.reset_spec, train_cfg.seed),
                             pretrain_task_id=src.pretrain_task_id)
        cfg, params = init_from_pretrained(src, task, seed=train_cfg.seed)
        init_kind = "pretrained" if plan.reset_spec is None else f"reset_{plan.reset_spec}"
        source_task = plan.source.pretrain_task_id
    else:
        cfg = plan.model_cfg.retarget(task.n_classes)
        params = models.build_model(cfg, seed=train_cfg.seed)
        init_kind = "random"
        source_task = "random"

    if features is None:
        features = training.load_split_features(plan.target)
    result = training.train(cfg, params, plan.target, train_cfg, features)
    metric_value, bag_ids, labels, values = training.evaluate_split(
        cfg, result.params, plan.target, "test", features)
    eval_result = evaluate_records(
        task.metric, task.n_classes, bag_ids, labels, values,
        n_bootstrap=n_bootstrap, seed=train_cfg.seed,
        context={"protocol": "finetune", "arch": cfg.arch, "init": init_kind,
                 "source_task": source_task, "target_task": task.task_id,
                 "seed": train_cfg.seed})
    return FinetuneResult(cfg=cfg, result=result, eval_result=eval_result,
                          init_kind=init_kind, source_task=source_task,
                          target_task=task.task_id)
