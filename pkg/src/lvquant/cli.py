"""Command-line entry point: ``lvquant <command> [options]``.

Every command writes ``run_manifest.json`` (command, resolved options, input
hashes, outputs, seed) into its output directory and wall time into a
separate ``timing.json``, so manifests are byte-identical across reruns with
the same inputs. A rerun whose manifest would be unchanged is skipped.
On failure the command prints ``ErrorClass: message`` on one line, exits
nonzero and leaves any partial output in ``<out>.quarantine``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import logging
import shutil
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import ensemble, evaluate, train
from .data import FoldPlan, load_dataset, make_fold_plan, preprocess_study, read_json, write_json, write_study
from .errors import ConfigError, InvalidOutput, JobFailure, LVQuantError
from .evaluate import TASKS, PredictionSet, ground_truth, task_metrics

log = logging.getLogger("lvquant")

MANIFEST = "run_manifest.json"
TIMING = "timing.json"
GROUND_TRUTH = "ground_truth.csv"
FOLD_PLAN = "fold_plan.json"
_HASH_SKIP = {TIMING}


# ------------------------------------------------------------------ plumbing


def hash_path(path) -> str:
    """Content hash of a file or directory tree (relative names + bytes)."""
    path = Path(path)
    h = hashlib.sha1()
    if path.is_file():
        files = [path]
        base = path.parent
    else:
        files = sorted(
            p
            for p in path.rglob("*")
            if p.is_file()
            and p.name not in _HASH_SKIP
            and not any(part.startswith(".") or part.endswith(".quarantine") for part in p.relative_to(path).parts)
        )
        base = path
    for f in files:
        h.update(f.relative_to(base).as_posix().encode())
        h.update(b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _manifest(command: str, options: dict, inputs: dict, seed) -> dict:
    return {
        "command": command,
        "options": options,
        "inputs": {k: hash_path(v) for k, v in sorted(inputs.items()) if v is not None},
        "seed": seed,
    }


def _up_to_date(out: Path, manifest: dict) -> bool:
    path = out / MANIFEST
    if not path.is_file():
        return False
    old = read_json(path)
    old.pop("outputs", None)
    return old == manifest


def _finish(out: Path, manifest: dict, t0: float, outputs=None) -> None:
    if outputs is None:
        outputs = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name not in (MANIFEST, TIMING))
    write_json(out / MANIFEST, {**manifest, "outputs": list(outputs)})
    write_json(out / TIMING, {"wall_time_s": round(time.perf_counter() - t0, 3)})


@contextlib.contextmanager
def staged(out: Path):
    """Build output in a hidden sibling, then swap it in; failures are quarantined."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        q = out.with_name(f"{out.name}.quarantine")
        if q.exists():
            shutil.rmtree(q)
        tmp.rename(q)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _skip(out: Path) -> int:
    print(f"{out}: up to date")
    return 0


# ------------------------------------------------------------------ commands


def cmd_phantom_gen(args) -> int:
    from .phantom import generate_dataset

    out = Path(args.out)
    manifest = _manifest("phantom-gen", {"patients": args.patients, "seed": args.seed}, {}, args.seed)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    with staged(out) as tmp:
        generate_dataset(args.patients, args.seed, tmp)
        n = len([p for p in tmp.iterdir() if p.is_dir()])
        if n != args.patients:
            raise InvalidOutput(f"expected {args.patients} studies, wrote {n}")
        _finish(tmp, manifest, t0)
    print(f"wrote {args.patients} studies to {out}")
    return 0


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    manifest = _manifest("preprocess", {}, {"data": args.data}, None)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    studies = load_dataset(args.data)
    if not studies:
        raise ConfigError(f"no studies under {args.data}")
    with staged(out) as tmp:
        for s in studies:
            with warnings.catch_warnings():
                warnings.simplefilter("always")
                p = preprocess_study(s)
            if p.frames.shape[1:] != (300, 300):
                raise InvalidOutput(f"{s.patient_id}: canonical shape is {p.frames.shape[1:]}")
            write_study(p, tmp / p.patient_id)
        _finish(tmp, manifest, t0)
    print(f"preprocessed {len(studies)} studies into {out}")
    return 0


def cmd_pretext(args) -> int:
    from .model import pretext_pretrain

    out = Path(args.out)
    exp = train.load_experiment(args.config, "desk" if args.desk_scale else args.profile)
    opts = dict(exp["defaults"]["pretext"])
    for key in ("epochs", "seed", "n_train", "n_val"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    arch = args.arch or exp["configs"][0].arch
    spec = train.resolve_backbone(arch, exp["backbones"])
    manifest = _manifest("pretext", {"arch": spec.to_dict(), **opts}, {"config": args.config}, opts["seed"])
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    with staged(out) as tmp:
        ckpt = pretext_pretrain(spec, out_dir=tmp, **opts)
        info = ckpt["meta"]["pretext"]
        _finish(tmp, manifest, t0)
    print(f"pretext accuracy {info['val_accuracy']:.3f} (chance threshold {info['chance_threshold']:.3f})")
    return 0


def _space_overrides(args) -> dict:
    over = {}
    if args.lambda_p is not None:
        over["lambda_p"] = args.lambda_p
    if args.lambda_s is not None:
        over["lambda_s"] = args.lambda_s
    if args.epochs is not None:
        over["epochs"] = args.epochs
    return {"train": over} if over else {}


def cmd_train(args) -> int:
    runs = Path(args.runs)
    exp = train.load_experiment(args.config, "desk" if args.desk_scale else args.profile, _space_overrides(args))
    configs = exp["configs"]
    if args.ns:
        configs = [c if c.dim == "2D" else train.Configuration.from_dict({**c.to_dict(), "n_s": n}) for c in configs for n in args.ns]
        configs = list({c.config_id: c for c in configs}.values())
    settings = exp["settings"]
    pretrained = {}
    for path in args.pretrained or []:
        from .model import load_checkpoint

        ck = load_checkpoint(path)
        pretrained[ck["meta"]["spec"]["arch_id"]] = (ck, path)
    fold_seed = exp["defaults"]["fold_seed"] if args.fold_seed is None else args.fold_seed
    options = {
        "settings": settings.to_dict(),
        "configs": [c.to_dict() for c in configs],
        "backbones": {k: v.to_dict() for k, v in sorted(exp["backbones"].items())},
        "fold_seed": fold_seed,
        "folds": args.folds,
        "profile": exp["profile"],
    }
    inputs = {"data": args.data, "config": args.config}
    inputs.update({f"pretrained:{k}": p for k, (_, p) in pretrained.items()})
    manifest = _manifest("train", options, inputs, fold_seed)
    if _up_to_date(runs, manifest):
        return _skip(runs)
    t0 = time.perf_counter()
    studies = load_dataset(args.data)
    runs.mkdir(parents=True, exist_ok=True)
    plan = make_fold_plan([s.patient_id for s in studies], fold_seed)
    plan.save(runs / FOLD_PLAN)
    ground_truth(studies).to_csv(runs / GROUND_TRUTH)
    results = {}
    for arch in sorted({c.arch for c in configs}):
        group = [c for c in configs if c.arch == arch]
        ck = pretrained.get(arch, (None, None))[0]
        results.update(train.run_space(group, plan, studies, runs, settings, ck, exp["backbones"], args.folds))
    if (runs / "failures.json").is_file() and len(results) < len(configs):
        failures = read_json(runs / "failures.json")
        raise JobFailure(f"{len(failures)} job(s) failed; first: {failures[0]['error']}")
    (runs / "failures.json").unlink(missing_ok=True)
    write_json(runs / "configs.json", {c.config_id: {"config": c.to_dict(), "label": c.label} for c in configs})
    outputs = sorted(f"{cid}/predictions.csv" for cid in results)
    _finish(runs, manifest, t0, [FOLD_PLAN, GROUND_TRUTH, "configs.json"] + outputs)
    print(f"trained {len(results)} configuration(s) x {plan.n_folds if args.folds is None else len(args.folds)} fold(s) in {runs}")
    return 0


def _load_store(runs: Path):
    """Completed configuration prediction sets, ground truth, fold plan and configs."""
    if not (runs / GROUND_TRUTH).is_file():
        raise ConfigError(f"{runs} is not a job store (no {GROUND_TRUTH})")
    gt = PredictionSet.read_csv(runs / GROUND_TRUTH)
    plan = FoldPlan.load(runs / FOLD_PLAN)
    sets, configs = {}, {}
    for cdir in sorted(p for p in runs.iterdir() if p.is_dir() and (p / "predictions.csv").is_file()):
        sets[cdir.name] = PredictionSet.read_csv(cdir / "predictions.csv")
        meta = read_json(cdir / "config.json")
        configs[cdir.name] = train.Configuration.from_dict(meta["config"])
    if not sets:
        raise ConfigError(f"no completed configurations in {runs}")
    return sets, gt, plan, configs


def _store_inputs(runs: Path) -> dict:
    inputs = {"ground_truth": runs / GROUND_TRUTH, "fold_plan": runs / FOLD_PLAN}
    for p in sorted(runs.glob("*/predictions.csv")):
        inputs[f"pred:{p.parent.name}"] = p
    return inputs


def cmd_ensemble_search(args) -> int:
    runs = Path(args.runs)
    out = Path(args.out) if args.out else runs / ("ensemble_nested" if args.nested else "ensemble")
    manifest = _manifest("ensemble-search", {"nested": args.nested, "k": args.k}, _store_inputs(runs), None)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    sets, gt, plan, _ = _load_store(runs)
    with staged(out) as tmp:
        if args.nested:
            selections = ensemble.nested_protocol(sets, gt, plan, args.k)
            for sel in selections.values():
                if set(sel.selection_patients) & set(sel.evaluation_patients):
                    raise InvalidOutput("selection and evaluation patients overlap")
        else:
            selections = ensemble.select_all_tasks(sets, gt, args.k)
        for task, sel in selections.items():
            if not sel.selection_error <= min(sel.full_average_error, sel.best_singleton_error):
                raise InvalidOutput(f"{task}: selected subset is dominated")
            sel.save(tmp / f"{task}.json")
        _finish(tmp, manifest, t0)
    for task, sel in selections.items():
        extra = "" if sel.evaluation_error is None else f" evaluation={sel.evaluation_error:.6g}"
        print(f"{task}: {len(sel.members)} member(s) selection={sel.selection_error:.6g}{extra}")
    return 0


def _load_selection(path) -> dict:
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    sels = {}
    for f in files:
        if f.name in (MANIFEST, TIMING):
            continue
        sel = ensemble.EnsembleSelection.from_dict(read_json(f))
        sels[sel.task] = sel
    return sels


def cmd_predict(args) -> int:
    runs = Path(args.runs)
    out = Path(args.out)
    options = {"members": args.members, "selection": None}
    inputs = {"data": args.data, "store": runs / "configs.json"}
    if args.selection:
        inputs["selection"] = args.selection
    manifest = _manifest("predict", options, inputs, None)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    _, _, plan, configs = _load_store(runs)
    studies = load_dataset(args.data)
    if args.selection:
        groups = {task: sel.members for task, sel in _load_selection(args.selection).items()}
    else:
        groups = {"all": tuple(args.members or sorted(configs))}
    with staged(out) as tmp:
        cache = {}
        for task, members in sorted(groups.items()):
            key = tuple(sorted(members))
            if key not in cache:
                cache[key] = ensemble.ensemble_predict(key, studies, runs, configs, plan.n_folds, f"ensemble:{task}")
            ps = cache[key]
            ps = PredictionSet(f"ensemble:{task}", ps.patient_ids, ps.frames, ps.values, ps.probs, ps.folds)
            ps.to_csv(tmp / f"predictions_{task}.csv")
        _finish(tmp, manifest, t0)
    print(f"wrote predictions for {len(studies)} studies to {out}")
    return 0


METRIC_COLUMNS = (
    "method",
    "areas_mae",
    "areas_std",
    "areas_pcc",
    "dims_mae",
    "dims_std",
    "dims_pcc",
    "rwt_mae",
    "rwt_std",
    "rwt_pcc",
    "phase_er",
)


def _metric_row(name: str, metrics: dict) -> list:
    row = [name]
    for col in METRIC_COLUMNS[1:]:
        task, key = col.split("_")
        v = metrics.get(task, {}).get(key)
        row.append("" if v is None or not np.isfinite(v) else f"{v:.4f}")
    return row


def _write_table(path: Path, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    gt_path = args.gt
    inputs = {f"pred:{i}": p for i, p in enumerate(args.pred)}
    inputs.update(gt=gt_path, data=args.data)
    manifest = _manifest("evaluate", {}, inputs, None)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    gt = PredictionSet.read_csv(gt_path) if gt_path else ground_truth(load_dataset(args.data))
    rows = []
    for p in args.pred:
        pred = PredictionSet.read_csv(p)
        rows.append(_metric_row(pred.config_id, task_metrics(pred, gt)))
    with staged(out) as tmp:
        text = _write_table(tmp / "metrics.csv", rows)
        _finish(tmp, manifest, t0)
    print(text, end="")
    return 0


def _task_ensemble_metrics(sets, gt, members_by_task) -> dict:
    """Metrics where each task uses its own member subset."""
    out = {}
    for task, members in members_by_task.items():
        if not members:
            continue
        avg = ensemble.average_prediction(sets, list(members))
        m = task_metrics(avg, gt)
        if task in m:
            out[task] = m[task]
    return out


def _plots(out: Path, pred: PredictionSet, gt: PredictionSet) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .indices import TASK_SLICES

    p = pred.aligned_to(gt)
    files = []
    for task, sl in TASK_SLICES.items():
        if not p.has_regression:
            continue
        a, b = p.values[:, sl].ravel(), gt.values[:, sl].ravel()
        mean, diff = (a + b) / 2, a - b
        bias, sd = diff.mean(), diff.std()
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(mean, diff, s=4, alpha=0.5)
        for y, style in ((bias, "-"), (bias + 1.96 * sd, "--"), (bias - 1.96 * sd, "--")):
            ax.axhline(y, color="k", linestyle=style, linewidth=0.8)
        ax.set_xlabel("mean of prediction and truth")
        ax.set_ylabel("prediction - truth")
        ax.set_title(f"Bland-Altman: {task}")
        fig.tight_layout()
        name = f"bland_altman_{task}.png"
        fig.savefig(out / name, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(name)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(b, a, s=4, alpha=0.5)
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        ax.plot([lo, hi], [lo, hi], "k--", linewidth=0.8)
        ax.set_xlabel("truth")
        ax.set_ylabel("prediction")
        ax.set_title(f"scatter: {task}")
        fig.tight_layout()
        name = f"scatter_{task}.png"
        fig.savefig(out / name, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(name)
    return files


def cmd_report(args) -> int:
    runs = Path(args.runs)
    out = Path(args.out) if args.out else runs / "report"
    inputs = _store_inputs(runs)
    for name in ("ensemble", "ensemble_nested"):
        if (runs / name).is_dir():
            inputs[name] = runs / name
    manifest = _manifest("report", {"k": args.k, "plots": args.plots}, inputs, None)
    if _up_to_date(out, manifest):
        return _skip(out)
    t0 = time.perf_counter()
    sets, gt, plan, configs = _load_store(runs)
    rows = []
    for cid in sorted(sets, key=lambda c: (configs[c].label, c)):
        rows.append(_metric_row(configs[cid].label, task_metrics(sets[cid], gt)))
    all_members = {
        task: tuple(c for c in sorted(sets) if ensemble._task_supported(sets[c], task)) for task in TASKS
    }
    rows.append(_metric_row("Ensemble Average", _task_ensemble_metrics(sets, gt, all_members)))
    if (runs / "ensemble").is_dir():
        selections = _load_selection(runs / "ensemble")
    else:
        selections = ensemble.select_all_tasks(sets, gt, args.k)
    optimal = {task: sel.members for task, sel in selections.items()}
    rows.append(_metric_row("Ensemble Optimal", _task_ensemble_metrics(sets, gt, optimal)))
    if (runs / "ensemble_nested").is_dir():
        nested = _load_selection(runs / "ensemble_nested")
        half_b = plan.patients(half="B")
        gt_b = gt.select_patients(half_b)
        sets_b = {c: s.select_patients(half_b) for c, s in sets.items()}
        rows.append(_metric_row("Ensemble Average*", _task_ensemble_metrics(sets_b, gt_b, all_members)))
        rows.append(
            _metric_row("Ensemble Optimal*", _task_ensemble_metrics(sets_b, gt_b, {t: s.members for t, s in nested.items()}))
        )
    with staged(out) as tmp:
        text = _write_table(tmp / "table.csv", rows)
        if args.plots:
            best = optimal.get("areas") or all_members["areas"]
            if best:
                _plots(tmp, ensemble.average_prediction(sets, list(best)), gt)
        _finish(tmp, manifest, t0)
    print(text, end="")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvquant", description="LV index regression pipeline on phantom cardiac studies")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    s.add_argument("--patients", type=int, default=56)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("preprocess", help="resample, crop and normalize a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    def experiment_args(s):
        s.add_argument("--config", help="experiment file (YAML)")
        s.add_argument("--profile")
        s.add_argument("--desk-scale", action="store_true", help="use the short CI profile")

    s = sub.add_parser("pretext", help="pretrain a backbone body on the synthetic shape task")
    s.add_argument("--arch", help="backbone id (default: the experiment's first architecture)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    experiment_args(s)
    s.set_defaults(func=cmd_pretext)

    s = sub.add_parser("train", help="cross-validate every configuration of the experiment space")
    s.add_argument("--data", required=True, help="preprocessed dataset")
    s.add_argument("--runs", required=True, help="job store root")
    s.add_argument("--pretrained", action="append", help="body checkpoint directory (repeatable, one per architecture)")
    s.add_argument("--ns", type=int, nargs="+", choices=evaluate.N_S_CHOICES, help="N_S values for 3D configurations")
    s.add_argument("--lambda-p", type=float, help=f"phase loss weight (default {train.LAMBDA_P})")
    s.add_argument("--lambda-s", type=float, help=f"segmentation loss weight (default {train.LAMBDA_S})")
    s.add_argument("--epochs", type=int)
    s.add_argument("--folds", type=int, nargs="+")
    s.add_argument("--fold-seed", type=int)
    experiment_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="ensemble predictions for new studies")
    s.add_argument("--runs", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--selection", help="EnsembleSelection file or directory")
    g.add_argument("--members", nargs="+", help="config ids to average (default: all)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble-search", help="optimal-subset search over cross-validated predictions")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.add_argument("--nested", action="store_true", help="select on half A, evaluate on half B")
    s.add_argument("--k", type=int, default=ensemble.TOP_K)
    s.set_defaults(func=cmd_ensemble_search)

    s = sub.add_parser("evaluate", help="metric table for prediction files")
    s.add_argument("--pred", nargs="+", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt", help="ground-truth prediction table")
    g.add_argument("--data", help="dataset providing ground truth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="summary table over a job store")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.add_argument("--k", type=int, default=ensemble.TOP_K)
    s.add_argument("--plots", action="store_true", help="also write Bland-Altman and scatter plots")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        import torch

        torch.set_num_threads(1)
        return args.func(args)
    except (LVQuantError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
