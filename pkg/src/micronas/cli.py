"""``micronas`` command line: gen-data, calibrate, search, estimate, train-eval, ad-eval."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .dnas import (
    REFERENCE_FINETUNE,
    REFERENCE_SEARCH,
    DivergenceError,
    FinetuneConfig,
    SearchConfig,
    finetune,
    run_search,
    train_from_scratch,
)
from .hw_proxy import (
    SchemaError,
    bundled_measurements_path,
    estimate_energy,
    fit_all,
    load_models,
    load_profiles,
    predict_latency,
    read_measurements,
    save_models,
)
from .resources import Budget, check_budget, discrete_resources
from .supernet import ConfigError, build_supernet, min_resource_selection, parse_architecture, parse_backbone_config
from .tasks import (
    REFERENCE_KWS,
    anomaly_scores,
    auc_roc,
    gen_synthetic_ad_task,
    gen_synthetic_spectrogram_task,
    load_ad_set,
    load_dataset,
    read_scores_csv,
    save_ad_set,
    save_dataset,
    write_scores_csv,
)


class DomainError(Exception):
    """Reported on stderr with exit code 1."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_paths: list[str]
    seed: int | None
    tool_version: str
    output_paths: list[str] = field(default_factory=list)
    duration_s: float = 0.0


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, doc):
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _schema(name: str) -> dict:
    from importlib import resources

    return json.loads(resources.files("micronas").joinpath("schemas", name).read_text())


def _bundled(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("micronas").joinpath("data", name)))


def _resolve(path: str) -> Path:
    """Accept a file path or the name of a bundled fixture (``kws_m.json``)."""
    p = Path(path)
    if p.exists():
        return p
    b = _bundled(path)
    if b.exists():
        return b
    raise DomainError(f"file not found: {path}")


# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


def _budget(args) -> Budget | None:
    flash = sram = None
    if getattr(args, "mcu", None):
        profiles = load_profiles(args.profiles) if getattr(args, "profiles", None) else load_profiles()
        if args.mcu not in profiles:
            raise DomainError(f"unknown MCU {args.mcu!r}; known: {', '.join(sorted(profiles))}")
        prof = profiles[args.mcu]
        flash, sram = prof.flash_bytes, prof.sram_bytes
    flash = args.budget_flash if args.budget_flash is not None else flash
    sram = args.budget_sram if args.budget_sram is not None else sram
    ops = args.budget_ops
    if flash is None and sram is None and ops is None:
        return None
    overheads = {}
    if args.no_overheads:
        overheads = dict(interpreter_sram_overhead=0, interpreter_flash_overhead=0, persistent_buffer_bytes=0)
    return Budget(flash_bytes=flash, sram_bytes=sram, max_ops=ops, **overheads)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, manifest: RunManifest) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "kws":
        shape = tuple(args.shape)
        train, test = gen_synthetic_spectrogram_task(
            args.num_classes, args.samples_per_class, shape, args.seed, args.jitter, args.noise, args.test_fraction
        )
        paths = [out / "train.bin", out / "test.bin"]
        save_dataset(paths[0], train)
        save_dataset(paths[1], test)
        summary = {"task": "kws", "train": len(train), "test": len(test), "shape": list(train.features.shape[1:])}
    else:
        es = gen_synthetic_ad_task(args.num_classes, args.seed, args.perturbation)
        paths = [out / "ad.bin"]
        save_ad_set(paths[0], es)
        summary = {"task": "ad", "train": len(es.train), "test": int(len(es.is_anomalous)), "anomalous": int(es.is_anomalous.sum())}
    manifest.output_paths += [str(p) for p in paths]
    return summary


def cmd_calibrate(args, manifest: RunManifest) -> dict:
    csv_path = Path(args.csv) if args.csv else bundled_measurements_path()
    manifest.config_paths.append(str(csv_path))
    rows = read_measurements(csv_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        models = fit_all(rows)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    doc = {"models": [m.to_dict() for m in models]}
    if args.out:
        save_models(models, args.out)
        manifest.output_paths.append(args.out)
    return doc


def _pick_model(models, backbone, mcu):
    cand = [m for m in models if (backbone is None or m.backbone_id == backbone) and (mcu is None or m.mcu_id == mcu)]
    if len(cand) != 1:
        raise DomainError(
            f"{len(cand)} fitted models match backbone={backbone!r} mcu={mcu!r}; pass --backbone/--hw-mcu to pick one"
        )
    return cand[0]


def cmd_estimate(args, manifest: RunManifest) -> dict:
    path = _resolve(args.arch)
    manifest.config_paths.append(str(path))
    net = parse_architecture(str(path))
    report = discrete_resources(net, {}, weight_bits=args.bits, activation_bits=8)
    doc = {"architecture": net.name, "report": report.to_dict()}
    jsonschema.validate(doc["report"], _schema("resource_report.schema.json"))
    budget = _budget(args)
    if budget is not None:
        check = check_budget(report, budget)
        doc["budget"] = {"mcu": args.mcu, "limits": budget.limits()}
        doc["budget_check"] = check.to_dict()
    if args.hw_model:
        manifest.config_paths.append(args.hw_model)
        model = _pick_model(load_models(args.hw_model), args.backbone, args.hw_mcu)
        doc["latency_ms"] = predict_latency(model, report.total_ops)
        if model.mean_power_mw is not None:
            e = estimate_energy(model, report.total_ops)
            doc["energy_mj"] = e.energy_mj
            doc["energy_low_confidence"] = e.low_confidence
    if args.out:
        _write_json(args.out, doc)
        manifest.output_paths.append(args.out)
    return doc


def _load_kws(data_dir: str):
    d = Path(data_dir)
    try:
        return load_dataset(d / "train.bin"), load_dataset(d / "test.bin")
    except FileNotFoundError as exc:
        raise DomainError(f"missing dataset file {exc.filename}; run gen-data first") from None


def _finetune_config(args, seed) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=args.finetune_epochs, batch_size=args.batch_size, lr_start=args.finetune_lr, lr_end=args.lr_end,
        weight_decay=args.weight_decay, weight_bits=None if args.bits == 32 else args.bits, seed=seed,
    )


def _search_one(payload):
    net, train, test, cfg, ft = payload
    return run_search(net, train, test, cfg, ft)


def cmd_search(args, manifest: RunManifest) -> dict:
    cfg_path = _resolve(args.config)
    manifest.config_paths.append(str(cfg_path))
    net = parse_backbone_config(str(cfg_path))
    budget = _budget(args)
    if budget is None:
        raise DomainError("search needs at least one budget (--mcu, --budget-sram, --budget-flash or --budget-ops)")
    floor = discrete_resources(net, min_resource_selection(net), weight_bits=args.bits if args.bits != 32 else 8)
    gate = check_budget(floor, budget)
    if not gate.passed:
        detail = ", ".join(f"{k} (short by {-gate.margins[k]})" for k in gate.violated)
        raise DomainError(f"budget infeasible: even the minimum architecture violates {detail}")
    if not args.data:
        raise DomainError("search needs --data (a directory written by gen-data)")
    train, test = _load_kws(args.data)
    limits = budget.limits()
    lam = {k: (args.lambda_ if key in limits else 0.0) for k, key in (("size", "flash"), ("mem", "sram"), ("ops", "ops"))}
    seeds = [args.seed + i for i in range(args.seeds)]
    payloads = []
    for s in seeds:
        cfg = SearchConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr_start=args.lr, lr_end=args.lr_end,
            weight_decay=args.weight_decay, tau_start=args.tau_start, tau_end=args.tau_end,
            lambda_size=lam["size"], lambda_mem=lam["mem"], lambda_ops=lam["ops"], budget=budget,
            gumbel_noise=not args.no_gumbel, seed=s, alpha_lr_scale=args.alpha_lr_scale,
            weight_bits=args.bits if args.bits != 32 else 8,
        )
        payloads.append((net, train, test, cfg, _finetune_config(args, s)))
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_search_one, payloads))
    else:
        results = [_search_one(p) for p in payloads]
    out = Path(args.out) if args.out else None
    summaries = []
    for s, res in zip(seeds, results):
        doc = json.loads(res.to_json())
        summaries.append({"seed": s, "selection": doc["selection"], "accuracy": doc["accuracy"],
                          "budget_passed": doc["budget_check"]["passed"], "total_ops": doc["report"]["total_ops"]})
        if out is not None:
            stem = out if len(seeds) == 1 else out.with_name(f"{out.stem}.seed{s}{out.suffix}")
            arch = stem.with_name(stem.stem + ".arch.json")
            _write_json(stem, doc)
            _write_json(arch, doc["architecture"])
            manifest.output_paths += [str(stem), str(arch)]
    return {"results": summaries}


def cmd_train_eval(args, manifest: RunManifest) -> dict:
    path = _resolve(args.arch)
    manifest.config_paths.append(str(path))
    net = parse_architecture(str(path))
    train, test = _load_kws(args.data)
    if net.decisions:
        raise DomainError("train-eval takes a discrete architecture document")
    res = train_from_scratch(net, train, test, _finetune_config(args, args.seed))
    doc = {"architecture": net.name, "accuracy": res.accuracy, "history": res.history, "seed": args.seed, "bits": args.bits}
    if args.out:
        _write_json(args.out, doc)
        manifest.output_paths.append(args.out)
    return doc


def cmd_ad_eval(args, manifest: RunManifest) -> dict:
    if args.scores:
        manifest.config_paths.append(args.scores)
        scores, flags = read_scores_csv(args.scores)
        return {"auc": auc_roc(scores, flags), "n": int(len(scores)), "anomalous": int(flags.sum())}
    if not args.data:
        raise DomainError("ad-eval needs --data (from gen-data --task ad) or --scores")
    try:
        es = load_ad_set(args.data)
    except FileNotFoundError:
        raise DomainError(f"missing dataset file {args.data}") from None
    path = _resolve(args.arch or "toy_ad.json")
    manifest.config_paths += [args.data, str(path)]
    net = parse_architecture(str(path))
    if net.decisions:
        raise DomainError("ad-eval takes a discrete architecture document")
    model = build_supernet(net, seed=args.seed)
    ft = finetune(model, es.train, es.train, _finetune_config(args, args.seed))
    scores = anomaly_scores(ft.model, es)
    auc = auc_roc(scores, es.is_anomalous)
    if args.out:
        text_path = Path(args.out)
        write_scores_csv(text_path, scores, es.is_anomalous)
        manifest.output_paths.append(str(text_path))
    return {"auc": auc, "n": int(len(scores)), "anomalous": int(es.is_anomalous.sum()), "train_accuracy": ft.accuracy}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _budget_flags(p):
    p.add_argument("--mcu", help="MCU profile name (sets SRAM and flash budgets)")
    p.add_argument("--profiles", help="MCU profile JSON (default: bundled set)")
    p.add_argument("--budget-sram", type=int, help="device SRAM in bytes")
    p.add_argument("--budget-flash", type=int, help="device flash in bytes")
    p.add_argument("--budget-ops", type=int, help="maximum ops per inference")
    p.add_argument("--no-overheads", action="store_true", help="compare against raw budgets without interpreter overheads")


def _train_flags(p, epochs_default=REFERENCE_FINETUNE["epochs"]):
    p.add_argument("--finetune-epochs", type=int, default=epochs_default)
    p.add_argument("--finetune-lr", type=float, default=REFERENCE_FINETUNE["lr_start"])
    p.add_argument("--lr-end", type=float, default=REFERENCE_FINETUNE["lr_end"])
    p.add_argument("--batch-size", type=int, default=REFERENCE_FINETUNE["batch_size"])
    p.add_argument("--weight-decay", type=float, default=REFERENCE_FINETUNE["weight_decay"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micronas", description=__doc__)
    parser.add_argument("--version", action="version", version=f"micronas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic KWS or AD datasets")
    p.add_argument("--task", choices=["kws", "ad"], default="kws")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=4, help="classes (kws) or machine ids (ad)")
    p.add_argument("--samples-per-class", type=int, default=REFERENCE_KWS["samples_per_class"])
    p.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"), default=list(REFERENCE_KWS["shape"]))
    p.add_argument("--jitter", type=int, default=REFERENCE_KWS["jitter"])
    p.add_argument("--noise", type=float, default=REFERENCE_KWS["noise"])
    p.add_argument("--test-fraction", type=float, default=REFERENCE_KWS["test_fraction"])
    p.add_argument("--perturbation", type=float, default=0.3)

    p = sub.add_parser("calibrate", help="fit latency/energy proxies from a measurement CSV")
    p.add_argument("--csv", help="measurement CSV (default: bundled synthetic data)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("estimate", help="resource report for an architecture document")
    p.add_argument("--arch", required=True)
    p.add_argument("--bits", type=int, choices=[8, 4], default=8, help="weight bits")
    p.add_argument("--hw-model", help="fitted model JSON from calibrate")
    p.add_argument("--backbone", help="backbone id to pick from --hw-model")
    p.add_argument("--hw-mcu", help="MCU id to pick from --hw-model")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    _budget_flags(p)

    p = sub.add_parser("search", help="differentiable search under a budget")
    p.add_argument("--config", required=True, help="backbone config JSON")
    p.add_argument("--data", help="directory written by gen-data --task kws")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="independent searches with consecutive seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epochs", type=int, default=DEFAULT_SEARCH["epochs"])
    p.add_argument("--lr", type=float, default=DEFAULT_SEARCH["lr"])
    p.add_argument("--alpha-lr-scale", type=float, default=DEFAULT_SEARCH["alpha_lr_scale"])
    p.add_argument("--tau-start", type=float, default=5.0)
    p.add_argument("--tau-end", type=float, default=0.5)
    p.add_argument("--lambda", dest="lambda_", type=float, default=DEFAULT_SEARCH["lambda"],
                   help="penalty weight for every budgeted resource")
    p.add_argument("--no-gumbel", action="store_true")
    p.add_argument("--bits", type=int, choices=[8, 4, 32], default=8, help="finetune weight bits (32 = float)")
    _train_flags(p)
    _budget_flags(p)

    p = sub.add_parser("train-eval", help="train a discrete architecture and report test accuracy")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, choices=[8, 4, 32], default=8)
    _train_flags(p)

    p = sub.add_parser("ad-eval", help="machine-id classifier anomaly scores and AUC")
    p.add_argument("--data", help="container written by gen-data --task ad")
    p.add_argument("--arch", help="classifier architecture (default: bundled toy_ad.json)")
    p.add_argument("--scores", help="score an existing sample_id,score,is_anomalous CSV instead")
    p.add_argument("--out", help="scores CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, choices=[8, 4, 32], default=8)
    _train_flags(p, epochs_default=15)
    return parser


DEFAULT_SEARCH = {
    "epochs": REFERENCE_SEARCH["epochs"],
    "lr": REFERENCE_SEARCH["lr_start"],
    "alpha_lr_scale": REFERENCE_SEARCH["alpha_lr_scale"],
    "lambda": 1.0,
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "calibrate": cmd_calibrate,
    "estimate": cmd_estimate,
    "search": cmd_search,
    "train-eval": cmd_train_eval,
    "ad-eval": cmd_ad_eval,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = RunManifest(args.command, argv, [], getattr(args, "seed", None), __version__)
    start = time.perf_counter()
    try:
        result = COMMANDS[args.command](args, manifest)
    except (DomainError, ConfigError, SchemaError, DivergenceError, NonFiniteError,
            jsonschema.ValidationError, json.JSONDecodeError, ValueError, OSError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"micronas {args.command}: error: {msg}", file=sys.stderr)
        return 1
    manifest.duration_s = round(time.perf_counter() - start, 3)
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_default))
    if manifest.output_paths:
        first = Path(manifest.output_paths[0])
        target = first / "manifest.json" if first.is_dir() else first.parent / f"{first.name}.manifest.json"
        if args.command == "gen-data":
            target = Path(args.out) / "manifest.json"
        _write_json(target, asdict(manifest))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
