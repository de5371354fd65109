"""Representation analysis: activation capture, SVCCA layer stability,
attention and embedding export.

SVCCA centers both activation matrices, truncates each to the smallest
singular-vector basis holding the requested share of squared singular
mass, runs CCA between the truncated subspaces via whitening, and reports
the mean canonical correlation on a 0-100 scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .bagdata import DatasetManifest
from .errors import ConfigError, DataError
from .models import ModelConfig, ModelParams
from .transfer import Checkpoint

DEFAULT_SAMPLE_BUDGET = 5000


@dataclass
class ActivationDump:
    layer_name: str
    matrix: np.ndarray            # n_samples x layer_width, float32
    sample_ids: list[str]


@dataclass
class StabilityReport:
    layers: list[dict] = field(default_factory=list)  # {name, mean, std, n_components}
    n_samples: int = 0
    model_tag: str = ""
    sample_description: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "layers": self.layers,
            "n_samples": self.n_samples,
            "model_tag": self.model_tag,
            "sample_description": self.sample_description,
        }, indent=2, sort_keys=True)


def _capturable_layers(cfg: ModelConfig) -> list[str]:
    names = [f"fc.{i}" for i in range(len(cfg.fc_dims()) - 1)]
    if cfg.arch in ("abmil", "auxmil"):
        names.append("attn")
    return names


def sample_instances(manifest: DatasetManifest, split: str, max_instances: int,
                     seed: int, features: dict[str, np.ndarray] | None = None):
    """Deterministic subsample of up to max_instances (bag, instance) pairs
    across a split, in manifest order."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    if features is None:
        features = {e.bag_id: manifest.load_features(e) for e in entries}
    pairs = []
    for e in entries:
        for j in range(features[e.bag_id].shape[0]):
            pairs.append((e.bag_id, j))
    if len(pairs) > max_instances:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(pairs), size=max_instances, replace=False))
        pairs = [pairs[i] for i in idx]
    return pairs, features


def capture_activations(cfg: ModelConfig, params: ModelParams,
                        manifest: DatasetManifest, layer_names: list[str],
                        max_instances: int = DEFAULT_SAMPLE_BUDGET, seed: int = 0,
                        split: str = "test",
                        features: dict[str, np.ndarray] | None = None,
                        pairs=None) -> list[ActivationDump]:
    """Per-instance activations for the named layers on a seeded instance
    subsample.

    ``fc.{i}`` captures the post-ReLU layer output; ``attn`` captures the
    pre-softmax attention score (width 1), which stays comparable across
    bags of different sizes.
    """
    known = _capturable_layers(cfg)
    for name in layer_names:
        if name not in known:
            raise ConfigError(f"unknown activation layer {name!r}; available: {known}")
    if pairs is None:
        pairs, features = sample_instances(manifest, split, max_instances, seed, features)

    by_bag: dict[str, list[int]] = {}
    for bag_id, j in pairs:
        by_bag.setdefault(bag_id, []).append(j)

    rows: dict[str, list[np.ndarray]] = {name: [] for name in layer_names}
    order: list[str] = []
    for bag_id, inst_idx in by_bag.items():
        x = features[bag_id]
        out, cache = models._forward_cached(params, cfg, x, rng=None)
        idx = np.asarray(inst_idx)
        for name in layer_names:
            if name == "attn":
                scores = cache["attn"]["scores"][idx][:, None]
                rows[name].append(scores.astype(np.float32))
            else:
                layer = int(name.split(".")[1])
                # post-ReLU output of fc layer `layer` = input of layer+1,
                # or the final stack output for the last layer
                fc = cache["fc"]
                acts = fc[layer + 1]["inp"] if layer + 1 < len(fc) else cache["h"]
                rows[name].append(acts[idx].astype(np.float32))
        order.extend(f"{bag_id}:{j}" for j in inst_idx)

    return [ActivationDump(name, np.concatenate(rows[name], axis=0), list(order))
            for name in layer_names]


# ---------------------------------------------------------------------------
# SVCCA
# ---------------------------------------------------------------------------

def _svd_truncate(x: np.ndarray, variance_keep: float) -> np.ndarray:
    """Project centered activations onto the smallest singular basis
    carrying >= variance_keep of the squared singular mass."""
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    tiny = s.max() * max(x.shape) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int((s > tiny).sum())
    if rank == 0:
        return np.zeros((x.shape[0], 0))
    s = s[:rank]
    if variance_keep >= 1.0:
        keep = rank
    else:
        energy = np.cumsum(s ** 2) / np.sum(s ** 2)
        keep = int(np.searchsorted(energy, variance_keep) + 1)
    return u[:, :keep] * s[:keep]


def _inv_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    w = np.maximum(w, w.max() * 1e-12 if w.size else 0.0)
    return v @ np.diag(1.0 / np.sqrt(w)) @ v.T


def svcca(x: np.ndarray, y: np.ndarray, variance_keep: float = 0.99):
    """Mean canonical correlation between two activation spaces, 0-100.

    Returns (mean, per-component correlations).  Width-1 inputs reduce to
    100 * |Pearson r|.  Rank-0 (constant) input yields 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError("svcca needs two (n_samples x width) matrices with equal n_samples")
    n = x.shape[0]
    if n <= max(x.shape[1], y.shape[1]):
        raise DataError(f"svcca needs n_samples > max width, got n={n}, "
                        f"widths ({x.shape[1]}, {y.shape[1]})")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xr = _svd_truncate(xc, variance_keep)
    yr = _svd_truncate(yc, variance_keep)
    if xr.shape[1] == 0 or yr.shape[1] == 0:
        return 0.0, np.zeros(0)

    cxx = xr.T @ xr / (n - 1)
    cyy = yr.T @ yr / (n - 1)
    cxy = xr.T @ yr / (n - 1)
    m = _inv_sqrt(cxx) @ cxy @ _inv_sqrt(cyy)
    corrs = np.clip(np.linalg.svd(m, compute_uv=False), 0.0, 1.0)
    return float(100.0 * corrs.mean()), corrs


def layer_stability_report(before: Checkpoint, after_params: ModelParams,
                           manifest: DatasetManifest,
                           layer_names: list[str] | None = None,
                           max_instances: int = DEFAULT_SAMPLE_BUDGET,
                           seed: int = 0, variance_keep: float = 0.99,
                           split: str = "test", model_tag: str = "",
                           features: dict[str, np.ndarray] | None = None) -> StabilityReport:
    """SVCCA between each layer's activations under the checkpoint weights
    and under ``after_params``, on an identical instance sample."""
    cfg = before.cfg
    for name, shape in models.param_schema(cfg):
        if name not in after_params or after_params[name].shape != shape:
            raise DataError(f"after-params do not match the checkpoint architecture ({name})")
    if layer_names is None:
        layer_names = _capturable_layers(cfg)
    pairs, features = sample_instances(manifest, split, max_instances, seed, features)
    dumps_before = capture_activations(cfg, before.params, manifest, layer_names,
                                       features=features, pairs=pairs)
    dumps_after = capture_activations(cfg, after_params, manifest, layer_names,
                                      features=features, pairs=pairs)
    layers = []
    for db, da in zip(dumps_before, dumps_after):
        assert db.sample_ids == da.sample_ids
        mean, comps = svcca(db.matrix, da.matrix, variance_keep)
        layers.append({
            "name": db.layer_name,
            "mean": mean,
            "std": float(100.0 * comps.std()) if comps.size else 0.0,
            "n_components": int(comps.size),
        })
    return StabilityReport(layers=layers, n_samples=len(pairs), model_tag=model_tag,
                           sample_description=f"{split} split, seed {seed}")


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def attention_export(cfg: ModelConfig, params: ModelParams, manifest: DatasetManifest,
                     split: str, path: str | Path,
                     features: dict[str, np.ndarray] | None = None) -> None:
    """CSV of (bag_id, instance_index, attention_weight); weights of each
    bag sum to 1."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "instance_index", "attention_weight"])
        for e in entries:
            x = features[e.bag_id] if features is not None else manifest.load_features(e)
            att = models.attention_scores(params, cfg, x)
            for j, a in enumerate(att):
                writer.writerow([e.bag_id, j, f"{float(a):.8g}"])


def embedding_export(cfg: ModelConfig, params: ModelParams, manifest: DatasetManifest,
                     split: str, path: str | Path,
                     features: dict[str, np.ndarray] | None = None) -> None:
    """CSV of (bag_id, label, e_0..e_{D-1}) slide embeddings."""
    from .transfer import embed_bags
    bag_ids, emb, labels = embed_bags(cfg, params, manifest, split, features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "label"] + [f"e_{i}" for i in range(emb.shape[1])])
        for bag_id, label, row in zip(bag_ids, labels, emb):
            writer.writerow([bag_id, int(label)] + [f"{v:.8g}" for v in row])
