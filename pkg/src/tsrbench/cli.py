"""Command line: generate, train, attribute, evaluate, report, run.

Every option can also come from a JSON config file (``--config``). Keys are
option names with underscores; a section named after the subcommand
overrides shared top-level keys, and explicit flags override both. The
resolved settings are written as ``config.json`` into each output directory.

Exit status: 0 on success, 2 for usage or configuration errors (including
missing inputs), 3 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import models as md
from . import saliency as sal
from . import synthgen as sg
from . import tsr as ts
from .errors import ContractError, DimensionError, FormatError, ParameterError

OUTPUT_ROOT_ENV = "TSRBENCH_OUTPUT_ROOT"
GATE_ACCURACY = 0.95

DEFAULTS = {
    "generate": {
        "family": "middle_box",
        "process": "gaussian",
        "features": 50,
        "steps": 50,
        "mu": 1.0,
        "n_train": 1000,
        "n_test": 300,
        "seed": 0,
        "process_params": {},
        "out": None,
    },
    "train": {
        "data": None,
        "arch": "tcn",
        "hidden": 64,
        "layers": None,
        "heads": 4,
        "kernel_size": 7,
        "dilations": None,
        "epochs": 100,
        "lr": 1e-3,
        "batch_size": 32,
        "optimizer": "adam",
        "early_stop": 0.99,
        "seed": 0,
        "out": None,
    },
    "attribute": {
        "data": None,
        "model": None,
        "methods": "grad",
        "tsr": "off",
        "tsr_variants": "tsr",
        "alpha": None,
        "alpha_quantile": None,
        "group_size": 5,
        "inner_mask": "cell",
        "mask_value": 0.0,
        "estimator": {},
        "split": "test",
        "limit": None,
        "seed": 0,
        "workers": None,
        "out": None,
    },
    "evaluate": {
        "data": None,
        "model": None,
        "saliency": None,
        "trials": 3,
        "seed": 0,
        "out": None,
    },
    "report": {
        "data": None,
        "saliency": None,
        "samples": "0,1,2,3",
        "out": None,
    },
}


class UsageError(Exception):
    """Bad command-line or config input; maps to exit status 2."""


# ---------------------------------------------------------------------------
# configuration


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def resolve(command: str, flags: dict, config: dict) -> dict:
    """Defaults, then shared config keys, then the command's section, then flags."""
    known = DEFAULTS[command]
    out = dict(known)
    shared = {k: v for k, v in config.items() if k in known and k not in DEFAULTS}
    section = config.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {command!r} must be an object")
    for source in (shared, section):
        unknown = set(source) - set(known)
        if unknown:
            raise UsageError(f"unknown {command} option(s) in config: {', '.join(sorted(unknown))}")
        out.update(source)
    out.update({k: v for k, v in flags.items() if k in known})
    return out


def _persist(out: Path, command: str, settings: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **settings}, indent=2, sort_keys=True, default=str))


def _csv_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _require(settings: dict, *keys) -> None:
    missing = [k for k in keys if settings.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _dataset_name(spec: sg.DatasetSpec) -> str:
    return f"{spec.shape.family.lower()}-{spec.process.kind.lower()}"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(s: dict) -> Path:
    try:
        spec = sg.DatasetSpec.create(
            family=str(s["family"]).upper(),
            process=str(s["process"]).upper(),
            N=int(s["features"]),
            T=int(s["steps"]),
            mu=float(s["mu"]),
            n_train=int(s["n_train"]),
            n_test=int(s["n_test"]),
            seed=int(s["seed"]),
            **dict(s.get("process_params") or {}),
        )
    except TypeError as exc:
        raise UsageError(f"invalid dataset options: {exc}") from exc
    out = Path(s["out"]) if s["out"] else output_root() / "data" / f"{_dataset_name(spec)}-s{spec.seed}"
    train, test = sg.generate_dataset(spec)
    sg.save_dataset(train, test, out)
    _persist(out, "generate", s)
    print(f"dataset {_dataset_name(spec)} -> {out}")
    print(f"informative fraction: train {train.informative_fraction():.4f}, test {test.informative_fraction():.4f}")
    return out


def cmd_train(s: dict) -> Path:
    _require(s, "data")
    train, test = sg.load_dataset(_existing(s["data"], "dataset"))
    dil = None if s["dilations"] is None else [int(v) for v in _csv_list(s["dilations"])]
    spec = md.ModelSpec(
        str(s["arch"]).upper(),
        train.spec.N,
        train.spec.T,
        hidden_size=int(s["hidden"]),
        layers=None if s["layers"] is None else int(s["layers"]),
        heads=int(s["heads"]),
        kernel_size=int(s["kernel_size"]),
        dilations=dil,
        seed=int(s["seed"]),
    )
    name = f"{_dataset_name(train.spec)}-{spec.architecture.lower()}-s{spec.seed}"
    out = Path(s["out"]) if s["out"] else output_root() / "models" / name
    model = md.build_model(spec)
    epochs = int(s["epochs"])
    if epochs < 0:
        raise UsageError("--epochs must be non-negative")
    if epochs > 0:
        cfg = md.TrainConfig(
            learning_rate=float(s["lr"]),
            epochs=epochs,
            batch_size=int(s["batch_size"]),
            optimizer=str(s["optimizer"]),
            seed=int(s["seed"]),
            early_stop_accuracy=float(s["early_stop"]),
        )
        md.train(model, train, test, cfg, log=lambda row: print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  test accuracy {row['accuracy']:.4f}"))
    md.save_model(model, out / "model")
    ev.write_csv(out / "history.csv", ("epoch", "loss", "accuracy"), model.history)
    acc = md.accuracy(model, test)
    passed = acc >= GATE_ACCURACY
    summary = {
        "architecture": spec.architecture,
        "dataset": _dataset_name(train.spec),
        "test_accuracy": acc,
        "epochs_run": len(model.history),
        "gate_accuracy": GATE_ACCURACY,
        "gate_passed": passed,
        "status": 0 if passed else 1,
        "seed": spec.seed,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _persist(out, "train", s)
    if not passed:
        print(f"warning: test accuracy {acc:.4f} is below the {GATE_ACCURACY:.2f} gate", file=sys.stderr)
    print(f"model -> {out}  (test accuracy {acc:.4f})")
    return out


def _model_dir(path) -> Path:
    p = _existing(path, "model")
    return p / "model" if (p / "model" / "model.json").exists() else p


def _split(train: sg.Dataset, test: sg.Dataset, split: str) -> sg.Dataset:
    if split not in sg.SPLITS:
        raise UsageError(f"--split must be one of {sg.SPLITS}")
    return train if split == "train" else test


def _estimator(s: dict) -> sal.EstimatorConfig:
    try:
        return sal.EstimatorConfig(**dict(s.get("estimator") or {}))
    except TypeError as exc:
        raise UsageError(f"invalid estimator options: {exc}") from exc


def _tsr_config(s: dict) -> ts.TsrConfig:
    return ts.TsrConfig(
        alpha=None if s["alpha"] is None else float(s["alpha"]),
        alpha_quantile=None if s["alpha_quantile"] is None else float(s["alpha_quantile"]),
        group_size=int(s["group_size"]),
        inner_mask=str(s["inner_mask"]),
        mask_value=float(s["mask_value"]),
    )


def _tag(variant: str | None, method: str) -> str:
    return method if variant is None else f"{variant.upper()}+{method}"


def cmd_attribute(s: dict) -> Path:
    _require(s, "data", "model")
    methods = [m.lower() for m in _csv_list(s["methods"])]
    bad = [m for m in methods if m not in sal.METHODS]
    if not methods or bad:
        raise UsageError(f"unknown method(s) {', '.join(bad) or '(none given)'}; valid names: {', '.join(sal.METHODS)}")
    tsr_on = str(s["tsr"]).lower() in ("on", "true", "1", "yes")
    variants = [v.lower() for v in _csv_list(s["tsr_variants"])] if tsr_on else []
    bad = [v for v in variants if v not in ts.WRAPPERS]
    if bad:
        raise UsageError(f"unknown TSR variant(s) {', '.join(bad)}; valid names: {', '.join(ts.WRAPPERS)}")
    train, test = sg.load_dataset(_existing(s["data"], "dataset"))
    data = _split(train, test, str(s["split"]))
    mdir = _model_dir(s["model"])
    model = md.load_model(mdir)
    idx = np.arange(len(data) if s["limit"] is None else min(int(s["limit"]), len(data)))
    X, labels = data.X[idx], data.labels[idx].astype(np.int64)
    est = _estimator(s)
    tcfg = _tsr_config(s)
    seed = int(s["seed"])
    workers = int(s["workers"] or os.cpu_count() or 1)
    oracle = sal.ModelOracle.from_model(model)
    out = Path(s["out"]) if s["out"] else output_root() / "saliency" / mdir.parent.name
    tags = []
    for method in methods:
        shape = X.shape[1:]
        values = sal.attribute(oracle, method, X, labels, est, seed=seed)
        calls = [sal.calls_per_map(method, est, shape)] * len(idx)
        tags.append(_write_maps(out, _tag(None, method), values, calls, method, None, s, est, tcfg, data, idx, {}))
        base = sal.batched(method, est, seed=seed)
        for variant in variants:
            wrap = ts.WRAPPERS[variant]

            def one(k, wrap=wrap, base=base):
                return wrap(oracle, base, X[k], int(labels[k]), tcfg)

            with ThreadPoolExecutor(max_workers=workers) as pool:
                maps = list(pool.map(one, range(len(idx))))
            extra = {
                "alpha": [m.info.get("alpha") for m in maps],
                "active_steps": [m.info.get("active_steps") for m in maps],
                "group_size": tcfg.group_size if variant == "tsrfg" else (1 if variant == "tsr" else None),
            }
            vals = np.stack([m.values for m in maps]) if maps else np.zeros(X.shape)
            tags.append(_write_maps(out, _tag(variant, method), vals, [m.relevance_calls for m in maps], method, variant, s, est, tcfg, data, idx, extra))
    (out / "index.json").write_text(json.dumps({"methods": tags}, indent=2))
    _persist(out, "attribute", s)
    print(f"saliency maps ({', '.join(tags)}) -> {out}")
    return out


def _write_maps(out, tag, values, calls, base, variant, s, est, tcfg, data, idx, extra) -> str:
    meta = {
        "method": tag,
        "base_method": base,
        "wrapper": variant,
        "estimator_config": est.to_dict(),
        "tsr_config": None if variant is None else {k: v for k, v in vars(tcfg).items() if k != "method_kwargs"},
        "seed": int(s["seed"]),
        "split": data.split,
        "sample_indices": [int(i) for i in idx],
        "sample_seeds": [int(v) for v in data.seeds[idx]],
        "target_classes": [int(v) for v in data.labels[idx]],
        "relevance_calls": [int(c) for c in calls],
        "relevance_calls_total": int(sum(calls)),
        **extra,
    }
    sal.save_saliency(out / tag, values, meta)
    return tag


def _load_all_saliency(root: Path) -> dict[str, tuple[np.ndarray, dict]]:
    root = _existing(root, "saliency directory")
    index = root / "index.json"
    if index.exists():
        tags = json.loads(index.read_text())["methods"]
    else:
        tags = sorted(p.name for p in root.iterdir() if (p / "saliency.json").exists())
    if not tags:
        raise UsageError(f"no saliency files found under {root}")
    out = {}
    for tag in tags:
        if not (root / tag / "saliency.json").exists():
            raise UsageError(f"missing saliency files for {tag} under {root}")
        out[tag] = sal.load_saliency(root / tag)
    return out


def _aligned(data: sg.Dataset, meta: dict, values: np.ndarray) -> sg.Dataset:
    if meta.get("split") != data.split:
        raise ContractError(f"saliency split {meta.get('split')!r} differs from {data.split!r}")
    sub = data.subset(np.asarray(meta["sample_indices"], dtype=np.int64))
    if values.shape != sub.X.shape:
        raise ContractError(f"saliency shape {values.shape} does not match data {sub.X.shape}")
    return sub


def cmd_evaluate(s: dict) -> Path:
    _require(s, "data", "model", "saliency")
    train, test = sg.load_dataset(_existing(s["data"], "dataset"))
    mdir = _model_dir(s["model"])
    model = md.load_model(mdir)
    maps = _load_all_saliency(Path(s["saliency"]))
    first_meta = next(iter(maps.values()))[1]
    data = _aligned(_split(train, test, first_meta.get("split", "test")), first_meta, next(iter(maps.values()))[0])
    trials, seed = int(s["trials"]), int(s["seed"])
    ds_name, arch = _dataset_name(train.spec), model.spec.architecture
    out = Path(s["out"]) if s["out"] else output_root() / "reports" / mdir.parent.name
    reports, rank_curves = [], {}
    sources = {}
    for tag, (values, meta) in maps.items():
        covered = _aligned(_split(train, test, meta.get("split", "test")), meta, values)
        if not np.array_equal(covered.seeds, data.seeds):
            raise ContractError(f"{tag} covers different samples than the other saliency files")
        if meta.get("base_method") != "random":
            sources[tag] = values
        reports.append(ev.evaluate_maps(model, data, values, tag, arch, ds_name, trials=trials, seed=seed))
        rank_curves[tag] = ev.saliency_rank_distribution(values)
    if "random" not in maps:
        rand = ev.random_baseline_maps(sources or {k: v for k, (v, _) in maps.items()}, seed=seed).astype(np.float32)
        reports.append(ev.evaluate_maps(model, data, rand, "random", arch, ds_name, trials=trials, seed=seed))
        rank_curves["random"] = ev.saliency_rank_distribution(rand)
    for r in reports:
        ev.write_curve_csv(r, out / "curves" / f"{ds_name}__{arch.lower()}__{r.method}.csv")
    ev.write_summary_csv(reports, out / "summary.csv")
    ev.write_rank_csv(rank_curves, out / "rank_distribution.csv")
    _persist(out, "evaluate", {**s, "resample_seed": seed, "trials": trials})
    for r in reports:
        a = r.areas
        print(f"{r.method:16s} AUPR {a['AUPR']:.3f}  AUP {a['AUP']:.3f}  AUR {a['AUR']:.3f}  AUC {a['AUC']:.2f}")
    print(f"reports -> {out}")
    return out


def heatmap_bytes(values: np.ndarray) -> bytes:
    """Binary PGM (P5) of min-max normalized |R|; width T, height N."""
    mag = np.abs(np.asarray(values, dtype=np.float64))
    if mag.ndim != 2:
        raise DimensionError(f"heatmaps need a 2-D map, got shape {mag.shape}")
    lo, hi = float(mag.min()), float(mag.max())
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        pix = np.full(mag.shape, 128, dtype=np.uint8)
    else:
        pix = np.rint((mag - lo) / (hi - lo) * 255.0).astype(np.uint8)
    n, t = mag.shape
    return f"P5\n{t} {n}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    t, n = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(n, t)


def cmd_report(s: dict) -> Path:
    _require(s, "data", "saliency")
    train, test = sg.load_dataset(_existing(s["data"], "dataset"))
    maps = _load_all_saliency(Path(s["saliency"]))
    out = Path(s["out"]) if s["out"] else output_root() / "figures" / Path(s["saliency"]).name
    picks = [int(v) for v in _csv_list(s["samples"])]
    rank_curves = {}
    for tag, (values, meta) in maps.items():
        data = _aligned(_split(train, test, meta.get("split", "test")), meta, values)
        rows = [k for k in picks if 0 <= k < len(values)]
        for k in rows:
            d = out / "heatmaps" / tag
            d.mkdir(parents=True, exist_ok=True)
            (d / f"sample_{k:04d}.pgm").write_bytes(heatmap_bytes(values[k]))
            gt = out / "heatmaps" / "ground_truth"
            gt.mkdir(parents=True, exist_ok=True)
            (gt / f"sample_{k:04d}.pgm").write_bytes(heatmap_bytes(data.masks[k].astype(np.float64)))
        rank_curves[tag] = ev.saliency_rank_distribution(values)
    ev.write_rank_csv(rank_curves, out / "rank_distribution.csv")
    _persist(out, "report", s)
    print(f"heatmaps and rank distributions -> {out}")
    return out


def cmd_run(config: dict, out: Path | None) -> Path:
    """Whole pipeline from one config: every stage writes under ``out``."""
    out = Path(out) if out else output_root() / str(config.get("name", "experiment"))
    settings = {}
    for command in ("generate", "train", "attribute", "evaluate", "report"):
        settings[command] = resolve(command, {}, config)
    settings["generate"]["out"] = str(out / "data")
    settings["train"].update(data=str(out / "data"), out=str(out / "model"))
    settings["attribute"].update(data=str(out / "data"), model=str(out / "model"), out=str(out / "saliency"))
    settings["evaluate"].update(data=str(out / "data"), model=str(out / "model"), saliency=str(out / "saliency"), out=str(out / "report"))
    settings["report"].update(data=str(out / "data"), saliency=str(out / "saliency"), out=str(out / "figures"))
    cmd_generate(settings["generate"])
    cmd_train(settings["train"])
    cmd_attribute(settings["attribute"])
    cmd_evaluate(settings["evaluate"])
    cmd_report(settings["report"])
    _persist(out, "run", settings)
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsrbench", description="Saliency benchmark for multivariate time series classifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def add(name, help_):
        q = sub.add_parser(name, help=help_, argument_default=S)
        q.add_argument("--config", default=None, help="JSON config file")
        return q

    g = add("generate", "write a synthetic dataset directory")
    g.add_argument("--family")
    g.add_argument("--process")
    g.add_argument("--features", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--mu", type=float)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    t = add("train", "train a classifier on a dataset directory")
    t.add_argument("--data")
    t.add_argument("--arch")
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--kernel-size", type=int)
    t.add_argument("--dilations")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--optimizer")
    t.add_argument("--early-stop", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    a = add("attribute", "compute saliency maps, optionally with temporal rescaling")
    a.add_argument("--data")
    a.add_argument("--model")
    a.add_argument("--methods", help=f"comma list from {', '.join(sal.METHODS)}")
    a.add_argument("--tsr", choices=("on", "off"))
    a.add_argument("--tsr-variants", help=f"comma list from {', '.join(ts.WRAPPERS)}")
    a.add_argument("--alpha", type=float)
    a.add_argument("--alpha-quantile", type=float)
    a.add_argument("--group-size", type=int)
    a.add_argument("--inner-mask", choices=("cell", "row"))
    a.add_argument("--mask-value", type=float)
    a.add_argument("--split")
    a.add_argument("--limit", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--workers", type=int)
    a.add_argument("--out")

    e = add("evaluate", "score saliency maps by masking degradation and precision/recall")
    e.add_argument("--data")
    e.add_argument("--model")
    e.add_argument("--saliency")
    e.add_argument("--trials", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")

    r = add("report", "write heatmaps and rank-distribution tables")
    r.add_argument("--data")
    r.add_argument("--saliency")
    r.add_argument("--samples")
    r.add_argument("--out")

    u = add("run", "run every stage from one config file")
    u.add_argument("--out")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        config = _load_config(args.config)
        if args.command == "run":
            if args.config is None:
                raise UsageError("run needs --config")
            cmd_run(config, flags.get("out"))
        else:
            COMMANDS[args.command](resolve(args.command, flags, config))
    except (UsageError, ParameterError, FormatError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
