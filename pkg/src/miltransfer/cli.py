"""Experiment CLI.

Subcommands: generate, pretrain, transfer, knn, fewshot, svcca, reset,
scale-sweep, report.  Every command reads one JSON experiment config
(``config_version: 1``, documented in the README), writes EvalResult JSONs
under ``<output_dir>/results/``, and appends a deterministic run log.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, models, training, transfer
from .bagdata import (
    DatasetManifest,
    SynthTaskConfig,
    fewshot_sample,
    load_manifest,
    synth_generate,
)
from .errors import ConfigError, DataError, MilError, NumericError
from .metrics import EvalResult
from .models import ModelConfig
from .training import TrainConfig
from .transfer import Checkpoint, TransferPlan, config_digest

CONFIG_VERSION = 1


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    if cfg.get("config_version") != CONFIG_VERSION:
        raise ConfigError(f"config {path}: expected config_version {CONFIG_VERSION}")
    for key in ("output_dir", "seeds"):
        if key not in cfg:
            raise ConfigError(f"config {path}: missing {key!r}")
    if not cfg["seeds"]:
        raise ConfigError("config: seeds must be non-empty")
    cfg.setdefault("protocol", {})
    return cfg


def model_config(cfg: dict, n_classes: int, overrides: dict | None = None) -> ModelConfig:
    spec = dict(cfg.get("model") or {})
    spec.update(overrides or {})
    spec["n_classes"] = n_classes
    spec["fc_hidden_dims"] = tuple(spec.get("fc_hidden_dims", ()))
    try:
        return ModelConfig(**spec)
    except TypeError as exc:
        raise ConfigError(f"config: bad model section ({exc})") from exc


def train_config(cfg: dict, seed: int) -> TrainConfig:
    spec = dict(cfg.get("train") or {})
    spec["seed"] = seed
    try:
        return TrainConfig(**spec)
    except TypeError as exc:
        raise ConfigError(f"config: bad train section ({exc})") from exc


def data_root(cfg: dict) -> Path:
    data = cfg.get("data") or {}
    if "root" not in data:
        raise ConfigError("config: data.root is required")
    return Path(data["root"])


def task_manifest(cfg: dict, task_id: str) -> DatasetManifest:
    return load_manifest(data_root(cfg) / task_id / "manifest.csv")


def pretrain_task_id(cfg: dict) -> str:
    data = cfg.get("data") or {}
    if not data.get("pretrain"):
        raise ConfigError("config: data.pretrain is required for this command")
    return data["pretrain"]


def target_task_ids(cfg: dict) -> list[str]:
    data = cfg.get("data") or {}
    targets = data.get("targets") or []
    if not targets:
        raise ConfigError("config: data.targets is required for this command")
    return list(targets)


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, out_dir: Path, zoo_path: Path | None):
        self.out = Path(out_dir)
        self.results = self.out / "results"
        self.checkpoints = self.out / "checkpoints"
        self.logs = self.out / "logs"
        self.zoo_path = Path(zoo_path) if zoo_path else self.out / "zoo.json"

    def prepare(self):
        for d in (self.out, self.results, self.checkpoints, self.logs):
            d.mkdir(parents=True, exist_ok=True)

    def write_result(self, name: str, result: EvalResult) -> Path:
        path = self.results / f"{name}.json"
        path.write_text(result.to_json() + "\n")
        return path

    def log_run(self, command: str, cfg: dict, outputs: list[str]):
        entry = {
            "command": command,
            "seeds": cfg.get("seeds"),
            "outputs": sorted(outputs),
        }
        with open(self.logs / f"{command}.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _zoo_read(path: Path) -> dict:
    if not path.exists():
        return {"entries": []}
    return json.loads(path.read_text())


def zoo_update(path: Path, entry: dict):
    """Insert or replace a zoo entry under an exclusive advisory lock."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lock = path.with_suffix(".lock")
    with open(lock, "w") as lk:
        fcntl.flock(lk, fcntl.LOCK_EX)
        try:
            zoo = _zoo_read(path)
            zoo["entries"] = [e for e in zoo["entries"] if e["name"] != entry["name"]]
            zoo["entries"].append(entry)
            zoo["entries"].sort(key=lambda e: e["name"])
            path.write_text(json.dumps(zoo, indent=2, sort_keys=True) + "\n")
        finally:
            fcntl.flock(lk, fcntl.LOCK_UN)


def zoo_lookup(path: Path, name: str) -> Checkpoint:
    zoo = _zoo_read(path)
    for e in zoo["entries"]:
        if e["name"] == name:
            ckpt = transfer.load_checkpoint(e["checkpoint"])
            if config_digest(ckpt.cfg) != e["cfg_digest"]:
                raise DataError(f"zoo entry {name!r}: digest does not match checkpoint header")
            return ckpt
    raise DataError(f"zoo entry {name!r} not found in {path}")


def zoo_find(path: Path, arch: str, pretrain_task: str, seed: int) -> Checkpoint:
    return zoo_lookup(path, f"{arch}_{pretrain_task}_s{seed}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict, ws: Workspace) -> list[str]:
    synth = cfg.get("synthetic")
    if not synth:
        raise ConfigError("config: synthetic section is required for generate")
    shared = {k: synth[k] for k in
              ("feat_dim", "n_concepts", "witness_rate", "bag_size_range",
               "noise_sigma", "seed") if k in synth}
    shared["bag_size_range"] = tuple(shared.get("bag_size_range", (16, 32)))
    outputs = []
    root = data_root(cfg)
    for task in synth.get("tasks", []):
        task_cfg = SynthTaskConfig(
            task_id=task["task_id"],
            concepts_per_class=tuple(tuple(s) for s in task["concepts_per_class"]),
            n_bags_per_class=task["n_bags_per_class"],
            split_fractions=tuple(task.get("split_fractions", (0.6, 0.2, 0.2))),
            **shared,
        )
        manifest = synth_generate(task_cfg, root / task_cfg.task_id)
        outputs.append(str(root / task_cfg.task_id / "manifest.csv"))
        print(f"generated {task_cfg.task_id}: {len(manifest.entries)} bags "
              f"({task_cfg.n_classes} classes)")
    if not outputs:
        raise ConfigError("config: synthetic.tasks is empty")
    return outputs


def _pretrain_one(cfg: dict, ws: Workspace, seed: int, mcfg: ModelConfig,
                  manifest: DatasetManifest, features, name: str,
                  n_bootstrap: int) -> tuple[Checkpoint, Path]:
    params = models.build_model(mcfg, seed=seed)
    tcfg = train_config(cfg, seed)
    result = training.train(mcfg, params, manifest, tcfg, features)
    metric_value, bag_ids, labels, values = training.evaluate_split(
        mcfg, result.params, manifest, "test", features)
    from .metrics import evaluate_records
    eval_result = evaluate_records(
        manifest.task.metric, manifest.task.n_classes, bag_ids, labels, values,
        n_bootstrap=n_bootstrap, seed=seed,
        context={"protocol": "pretrain", "arch": mcfg.arch, "init": "scratch",
                 "source_task": manifest.task.task_id,
                 "target_task": manifest.task.task_id, "seed": seed})
    ckpt = Checkpoint(cfg=mcfg, params=result.params,
                      pretrain_task_id=manifest.task.task_id,
                      train_summary={"seed": seed, "epochs": len(result.history),
                                     "best_val": result.best_val_metric()})
    ckpt_path = ws.checkpoints / f"{name}.milc"
    transfer.save_checkpoint(ckpt, ckpt_path)
    (ws.checkpoints / f"{name}.history.jsonl").write_text(result.history_jsonl())
    ws.write_result(f"pretrain_{name}", eval_result)
    zoo_update(ws.zoo_path, {
        "name": name,
        "arch": mcfg.arch,
        "cfg_digest": config_digest(mcfg),
        "pretrain_task_id": manifest.task.task_id,
        "checkpoint": str(ckpt_path),
        "eval_summary": {"metric": eval_result.metric_name,
                         "value": eval_result.value, "std": eval_result.bootstrap_std},
    })
    print(f"pretrained {name}: test {eval_result.metric_name}="
          f"{eval_result.value:.4f} ({len(result.history)} epochs)")
    return ckpt, ckpt_path


def cmd_pretrain(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    manifest = task_manifest(cfg, task_id)
    features = training.load_split_features(manifest)
    mcfg = model_config(cfg, manifest.task.n_classes)
    n_boot = cfg["protocol"].get("n_bootstrap", 1000)
    outputs = []
    for seed in cfg["seeds"]:
        name = f"{mcfg.arch}_{task_id}_s{seed}"
        _, ckpt_path = _pretrain_one(cfg, ws, seed, mcfg, manifest, features, name, n_boot)
        outputs.append(str(ckpt_path))
    return outputs


def _finetune_pair(cfg: dict, ws: Workspace, ckpt: Checkpoint, target: DatasetManifest,
                   features, seed: int, n_boot: int, tag: str,
                   reset_spec: str | None = None, inits=("pretrained", "random")) -> list[str]:
    outputs = []
    arch = ckpt.cfg.arch
    tcfg = train_config(cfg, seed)
    for init in inits:
        if init == "random":
            plan = TransferPlan(target=target, model_cfg=ckpt.cfg)
        else:
            plan = TransferPlan(target=target, source=ckpt, reset_spec=reset_spec)
        fin = transfer.finetune(plan, tcfg, features, n_bootstrap=n_boot)
        name = f"{tag}_{arch}_{target.task.task_id}_{fin.init_kind}_s{seed}"
        outputs.append(str(ws.write_result(name, fin.eval_result)))
        print(f"{tag} {arch} -> {target.task.task_id} [{fin.init_kind}, seed {seed}]: "
              f"{fin.eval_result.metric_name}={fin.eval_result.value:.4f}")
    return outputs


def cmd_transfer(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    arch = (cfg.get("model") or {}).get("arch")
    if not arch:
        raise ConfigError("config: model.arch is required")
    n_boot = cfg["protocol"].get("n_bootstrap", 1000)
    outputs = []
    for target_id in target_task_ids(cfg):
        target = task_manifest(cfg, target_id)
        features = training.load_split_features(target)
        for seed in cfg["seeds"]:
            ckpt = zoo_find(ws.zoo_path, arch, task_id, seed)
            outputs += _finetune_pair(cfg, ws, ckpt, target, features, seed,
                                      n_boot, "transfer")
    return outputs


def cmd_knn(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    arch = (cfg.get("model") or {}).get("arch")
    proto = cfg["protocol"]
    k = proto.get("knn_k", 20)
    distance = proto.get("distance", "euclidean")
    n_boot = proto.get("n_bootstrap", 1000)
    outputs = []
    for target_id in target_task_ids(cfg):
        target = task_manifest(cfg, target_id)
        features = training.load_split_features(target)
        for seed in cfg["seeds"]:
            ckpt = zoo_find(ws.zoo_path, arch, task_id, seed)
            rand_params = models.build_model(ckpt.cfg, seed=seed)
            for init, params in (("pretrained", ckpt.params), ("random", rand_params)):
                _, train_emb, train_y = transfer.embed_bags(
                    ckpt.cfg, params, target, "train", features)
                test_ids, test_emb, test_y = transfer.embed_bags(
                    ckpt.cfg, params, target, "test", features)
                res = transfer.knn_evaluate(
                    train_emb, train_y, test_emb, test_y, target.task, k=k,
                    distance=distance, bag_ids=test_ids, n_bootstrap=n_boot, seed=seed,
                    context={"arch": ckpt.cfg.arch, "init": init, "seed": seed,
                             "source_task": task_id if init == "pretrained" else "random",
                             "target_task": target_id})
                name = f"knn_{arch}_{target_id}_{init}_s{seed}"
                outputs.append(str(ws.write_result(name, res)))
                print(f"knn {arch} -> {target_id} [{init}, seed {seed}]: "
                      f"{res.metric_name}={res.value:.4f}")
    return outputs


def cmd_fewshot(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    arch = (cfg.get("model") or {}).get("arch")
    proto = cfg["protocol"]
    shots = proto.get("k_shots", [4, 16, 32])
    n_boot = proto.get("n_bootstrap", 1000)
    outputs = []
    for target_id in target_task_ids(cfg):
        target = task_manifest(cfg, target_id)
        features = training.load_split_features(target)
        for k in shots:
            for seed in cfg["seeds"]:
                sub = fewshot_sample(target, k, seed)
                ckpt = zoo_find(ws.zoo_path, arch, task_id, seed)
                tcfg = train_config(cfg, seed)
                for init in ("pretrained", "random"):
                    plan = (TransferPlan(target=sub, source=ckpt) if init == "pretrained"
                            else TransferPlan(target=sub, model_cfg=ckpt.cfg))
                    fin = transfer.finetune(plan, tcfg, features, n_bootstrap=n_boot)
                    fin.eval_result.context["k_shot"] = k
                    name = f"fewshot{k}_{arch}_{target_id}_{init}_s{seed}"
                    outputs.append(str(ws.write_result(name, fin.eval_result)))
                    print(f"fewshot K={k} {arch} -> {target_id} [{init}, seed {seed}]: "
                          f"{fin.eval_result.metric_name}={fin.eval_result.value:.4f}")
    return outputs


def cmd_svcca(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    arch = (cfg.get("model") or {}).get("arch")
    proto = cfg["protocol"]
    max_instances = proto.get("max_instances", analysis.DEFAULT_SAMPLE_BUDGET)
    variance_keep = proto.get("variance_keep", 0.99)
    outputs = []
    for target_id in target_task_ids(cfg):
        target = task_manifest(cfg, target_id)
        features = training.load_split_features(target)
        for seed in cfg["seeds"]:
            ckpt = zoo_find(ws.zoo_path, arch, task_id, seed)
            tcfg = train_config(cfg, seed)
            for init in ("pretrained", "random"):
                if init == "pretrained":
                    start_cfg, start_params = transfer.init_from_pretrained(
                        ckpt, target.task, seed=seed)
                else:
                    start_cfg = ckpt.cfg.retarget(target.task.n_classes)
                    start_params = models.build_model(start_cfg, seed=seed)
                result = training.train(start_cfg, start_params, target, tcfg, features)
                before = Checkpoint(cfg=start_cfg, params=start_params)
                report = analysis.layer_stability_report(
                    before, result.params, target, max_instances=max_instances,
                    seed=seed, variance_keep=variance_keep, features=features,
                    model_tag=f"{arch}_{init}_s{seed}")
                path = ws.results / f"svcca_{arch}_{target_id}_{init}_s{seed}.json"
                path.write_text(report.to_json() + "\n")
                outputs.append(str(path))
                attn = next((l for l in report.layers if l["name"] == "attn"), None)
                print(f"svcca {arch} -> {target_id} [{init}, seed {seed}]: "
                      f"attn={attn['mean']:.1f}" if attn else "svcca done")
    return outputs


def cmd_reset(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    arch = (cfg.get("model") or {}).get("arch")
    proto = cfg["protocol"]
    specs = proto.get("reset_specs", ["attn", "all"])
    n_boot = proto.get("n_bootstrap", 1000)
    outputs = []
    for target_id in target_task_ids(cfg):
        target = task_manifest(cfg, target_id)
        features = training.load_split_features(target)
        for seed in cfg["seeds"]:
            ckpt = zoo_find(ws.zoo_path, arch, task_id, seed)
            outputs += _finetune_pair(cfg, ws, ckpt, target, features, seed,
                                      n_boot, "reset", inits=("pretrained",))
            for spec in specs:
                outputs += _finetune_pair(cfg, ws, ckpt, target, features, seed,
                                          n_boot, "reset", reset_spec=spec,
                                          inits=("pretrained",))
    return outputs


def cmd_scale_sweep(cfg: dict, ws: Workspace) -> list[str]:
    task_id = pretrain_task_id(cfg)
    proto = cfg["protocol"]
    rows = proto.get("scale_rows")
    if not rows:
        raise ConfigError("config: protocol.scale_rows is required for scale-sweep")
    n_boot = proto.get("n_bootstrap", 1000)
    manifest = task_manifest(cfg, task_id)
    pre_features = training.load_split_features(manifest)
    outputs = []
    for row in rows:
        for seed in cfg["seeds"]:
            mcfg = model_config(cfg, manifest.task.n_classes, overrides=row)
            n_params = models.param_count(mcfg)
            name = f"{mcfg.arch}_{task_id}_p{n_params}_s{seed}"
            ckpt, ckpt_path = _pretrain_one(cfg, ws, seed, mcfg, manifest,
                                            pre_features, name, n_boot)
            outputs.append(str(ckpt_path))
            for target_id in target_task_ids(cfg):
                target = task_manifest(cfg, target_id)
                features = training.load_split_features(target)
                tag = f"scale{n_params}"
                outputs += _finetune_pair(cfg, ws, ckpt, target, features, seed,
                                          n_boot, tag)
    return outputs


def cmd_report(cfg: dict, ws: Workspace) -> list[str]:
    paths = sorted(ws.results.glob("*.json"))
    records = []
    for path in paths:
        try:
            res = EvalResult.from_json(path.read_text())
        except (json.JSONDecodeError, KeyError):
            continue
        ctx = res.context
        if not ctx.get("target_task") or not ctx.get("init"):
            continue
        records.append({
            "task": ctx["target_task"], "arch": ctx.get("arch", "?"),
            "init": ctx["init"], "seed": ctx.get("seed"),
            "protocol": ctx.get("protocol", "?"),
            "k_shot": ctx.get("k_shot"),
            "metric": res.metric_name, "value": res.value, "std": res.bootstrap_std,
        })
    if not records:
        raise DataError(f"no evaluation results found under {ws.results}")

    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r["task"], r["arch"], r["init"]), []).append(r["value"])
    table = []
    for (task, arch, init), values in sorted(groups.items()):
        table.append({"task": task, "arch": arch, "init": init,
                      "mean": float(np.mean(values)), "n_runs": len(values)})

    # deltas recomputed from the raw per-run values, never cached arithmetic
    deltas = {}
    arch_gaps: dict[str, list[float]] = {}
    for (task, arch, init), values in groups.items():
        if init != "pretrained":
            continue
        base = groups.get((task, arch, "random"))
        if base:
            delta = float(np.mean(values) - np.mean(base))
            deltas[f"{task}/{arch}"] = delta
            arch_gaps.setdefault(arch, []).append(delta)
    average = {arch: float(np.mean(gaps)) for arch, gaps in sorted(arch_gaps.items())}

    report = {"rows": table, "deltas": dict(sorted(deltas.items())), "average_delta": average,
              "n_results": len(records)}
    report_path = ws.out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    csv_path = ws.out / "report.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("task,arch,init,mean,n_runs\n")
        for row in table:
            fh.write(f"{row['task']},{row['arch']},{row['init']},"
                     f"{row['mean']:.6f},{row['n_runs']}\n")
    for key, delta in sorted(deltas.items()):
        print(f"delta {key}: {delta:+.4f}")
    print(f"report written to {report_path}")
    return [str(report_path), str(csv_path)]


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "knn": cmd_knn,
    "fewshot": cmd_fewshot,
    "svcca": cmd_svcca,
    "reset": cmd_reset,
    "scale-sweep": cmd_scale_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miltransfer",
                                     description="MIL transfer experiment harness")
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--out", default=None, help="override config output_dir")
    parser.add_argument("--zoo", default=None, help="zoo manifest path")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seeds"] = [args.seed]
        out_dir = Path(args.out) if args.out else Path(cfg["output_dir"])
        ws = Workspace(out_dir, Path(args.zoo) if args.zoo else None)
        ws.prepare()
        outputs = COMMANDS[args.command](cfg, ws)
        ws.log_run(args.command, cfg, outputs)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except MilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
