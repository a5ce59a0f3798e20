"""Command-line entry point.

Exit codes: 0 success, 1 acceptance-check failure, 2 I/O error,
3 format or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .attention import load_attention, save_attention
from .config import RunConfig, load_config
from .datagen import (
    TASK_TYPES,
    changed_attributes,
    gen_eval_set,
    load_image,
    load_task,
    make_task,
    parse_caption,
    read_meta,
    recognize,
    render,
    save_image,
    save_mask,
    write_dataset,
)
from .denoiser import GaussianMixturePredictor
from .diffusion import build_schedule, invert, sample
from .editor import build_task_deps, edit, edit_task, task_mixture
from .errors import ConfigurationError, FormatError, MadiffError, ParameterError
from .evaluation import (
    alignment_score,
    attention_stats,
    contact_sheet,
    perceptual_distance,
    preservation_score,
    run_ablation,
    run_benchmark,
    write_report,
)
from .masknet import MaskInput, init_masknet, load_checkpoint, save_checkpoint, train_masknet
from .prompt import EmbeddingTable, LlmClient, PromptText, embed_prompt, extract_mask_prompt, load_vocabulary

log = logging.getLogger("madiff")

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_FORMAT = 0, 1, 2, 3


def versions():
    return {
        "madiff": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "kernels": kernels.BACKEND,
    }


def write_json(path, data):
    Path(path).write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_provenance(out_dir, command, cfg: RunConfig, args, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": cfg.to_dict(),
        "args": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out")},
        "seed": cfg.seed,
        "versions": versions(),
    }
    if extra:
        record.update(extra)
    write_json(out / "provenance.json", record)
    return record


def _load_masknet(path):
    return load_checkpoint(path) if path else None


def _tasks_from_args(args, cfg: RunConfig, types=TASK_TYPES):
    if getattr(args, "data", None):
        records = [r for r in read_meta(args.data) if r["split"] == "eval" and r["task_type"] in types]
        return [load_task(args.data, r) for r in records]
    n = args.n_per_task if args.n_per_task is not None else cfg.data.n_eval_per_task
    return gen_eval_set(n, cfg.seed, task_types=types)


def _effective_edit(cfg: RunConfig, masknet):
    """Fall back to the foreground mask when MaskNet is requested but absent."""
    if cfg.edit.mask_source == "masknet" and masknet is None:
        log.warning("no checkpoint given: using the foreground mask")
        return replace(cfg.edit, mask_source="foreground")
    return cfg.edit


# commands -----------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "gen-data", cfg, args)
    n = write_dataset(out, cfg.data.n_train, cfg.data.n_eval_per_task, cfg.seed)
    print(f"wrote {n} records to {out / 'meta.jsonl'}")
    return EXIT_OK


def _training_triples(root, records, table, vocab):
    out = []
    for r in records:
        task = load_task(root, r)
        mp = extract_mask_prompt(PromptText(task.target_prompt), vocab)
        inp = MaskInput(task.input.foreground, task.input.densepose, embed_prompt(mp, table).vector)
        out.append((inp, task.region))
    return out


def cmd_train_masknet(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "train-masknet", cfg, args)
    init = load_checkpoint(args.resume) if args.resume else None
    records = [r for r in read_meta(args.data) if r["split"] == "train"]
    if not records:
        raise ParameterError(f"{args.data}: no training records")
    table, vocab = EmbeddingTable(cfg.masknet.embed_dim), load_vocabulary()
    n_val = max(1, len(records) // 10) if len(records) > 1 else 0
    train = _training_triples(args.data, records[n_val:] if n_val else records, table, vocab)
    val = _training_triples(args.data, records[:n_val], table, vocab)
    if cfg.train.epochs == 0:
        model = init if init is not None else init_masknet(cfg.masknet, cfg.train.seed)
        report = None
    else:
        model, report = train_masknet(train, val, cfg.train, cfg.masknet, cfg.edit.threshold, init=init)
    save_checkpoint(model, out / "masknet.ckpt", cfg.train.to_dict())
    if report is not None:
        write_json(out / "training_report.json", report.to_dict())
        print(f"best val IoU {report.best_val_iou:.4f} at epoch {report.best_epoch}; "
              f"loss {report.initial_loss:.4f} -> {report.final_loss:.4f}")
    print(f"checkpoint: {out / 'masknet.ckpt'}")
    return EXIT_OK


def save_edit_run(out, result, x_org, task):
    out = Path(out)
    save_image(x_org, out / "input.png")
    save_image(result.x_out, out / "output.png")
    save_mask(result.mask, out / "mask.png")
    save_mask(np.clip(result.soft_mask, 0, 1), out / "soft_mask.png")
    save_attention(result.attention, out / "attention.png")
    metrics = {
        "task_id": task.id,
        "task_type": task.task_type,
        "alignment": alignment_score(result, task),
        "preservation": preservation_score(result, task, x_org),
        "perceptual": perceptual_distance(result.x_out, x_org),
        "attention_in_region": float(result.attention[task.region > 0].mean()) if task.region.any() else 0.0,
    }
    write_json(out / "metrics.json", metrics)
    write_json(out / "timings.json", result.timings)
    return metrics


def task_type_for(changed):
    changed = set(changed)
    if changed == {"color"}:
        return "color"
    if changed == {"pattern"}:
        return "material"
    if changed <= {"sleeve", "collar"}:
        return "detail"
    return "comprehensive"


def cmd_edit(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "edit", cfg, args)
    x_org = load_image(args.image)
    src, body_seed = recognize(x_org)
    tgt = parse_caption(args.prompt, base=src)
    changed = changed_attributes(src, tgt)
    if not changed:
        raise ParameterError(f"prompt {args.prompt!r} does not change the recognised garment")
    task = make_task("cli", src, tgt, body_seed, task_type_for(changed))
    masknet = _load_masknet(args.checkpoint)
    ecfg = _effective_edit(cfg, masknet)
    llm = LlmClient.from_config(cfg.llm_endpoint) if cfg.llm_endpoint else None
    deps = build_task_deps(task, ecfg, masknet, llm_client=llm)
    # condition on the canonical caption so the mixture recognises the target
    result = edit(x_org, task.target_prompt, ecfg, deps)
    metrics = save_edit_run(out, result, x_org, task)
    write_provenance(out, "edit", replace(cfg, edit=ecfg), args, {
        "edit": result.provenance,
        "source_spec": src.to_dict(),
        "target_spec": tgt.to_dict(),
        "body_seed": body_seed,
        "user_prompt": args.prompt,
    })
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "eval", cfg, args)
    masknet = _load_masknet(args.checkpoint)
    tasks = _tasks_from_args(args, cfg, tuple(args.tasks) if args.tasks else TASK_TYPES)
    ecfg = _effective_edit(cfg, masknet)
    report = run_benchmark(tasks, ecfg, masknet, jobs=args.jobs or cfg.eval.jobs)
    write_report(report, out, "report", "Benchmark")
    rows = []
    for task in tasks[: args.sheet]:
        res = edit_task(task, ecfg, masknet)
        rows.append([task.input.image, res.mask, res.x_out, render(task.target_spec, task.input.body_seed).image])
    if rows:
        contact_sheet(rows, out / "contact_sheet.png")
    print(report.to_markdown("Benchmark"))
    return EXIT_OK if not report.failures else EXIT_CHECK


def ablation_checks(reports):
    full, no_ap, no_mn = reports["full"].aggregate, reports["no_ap"].aggregate, reports["no_masknet"].aggregate
    return {
        "alignment_gain_from_ap": full["alignment"] - no_ap["alignment"],
        "ap_gain_at_least_0.05": full["alignment"] - no_ap["alignment"] >= 0.05,
        "masknet_preserves_more": full["preservation"] > no_mn["preservation"],
        "masknet_lower_perceptual": full["perceptual"] < no_mn["perceptual"],
    }


def cmd_ablate(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "ablate", cfg, args)
    masknet = _load_masknet(args.checkpoint)
    types = tuple(args.tasks) if args.tasks else ("color",)
    if args.seeds is not None:
        args.n_per_task = args.seeds
    tasks = _tasks_from_args(args, cfg, types)
    ecfg = _effective_edit(cfg, masknet)
    reports = run_ablation(tasks, ecfg, masknet, jobs=args.jobs or cfg.eval.jobs)
    md = []
    for name, rep in reports.items():
        write_report(rep, out, f"ablation_{name}", name)
        md.append(rep.to_markdown(name))
    checks = ablation_checks(reports)
    write_json(out / "checks.json", checks)
    (out / "ablation.md").write_text("\n".join(md))
    print("\n".join(md))
    for key, value in checks.items():
        print(f"{key}: {value}")
    ok = all(v for k, v in checks.items() if isinstance(v, bool))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_attn_stats(args, cfg: RunConfig):
    out = Path(args.out)
    write_provenance(out, "attn-stats", cfg, args)
    thr = cfg.eval.success_threshold
    maps, flags, inreg = [], [], []
    if args.runs:
        for run in args.runs:
            run = Path(run)
            maps.append(load_attention(run / "attention.png"))
            metrics = json.loads((run / "metrics.json").read_text())
            flags.append(metrics["alignment"] >= thr)
            inreg.append(metrics.get("attention_in_region", float("nan")))
    else:
        masknet = _load_masknet(args.checkpoint)
        ecfg = _effective_edit(cfg, masknet)
        tasks = _tasks_from_args(args, cfg, ("color",))
        for level in cfg.eval.noise_levels:
            for task in tasks:
                res = edit_task(task, ecfg, masknet, noise_level=level)
                maps.append(res.attention)
                flags.append(alignment_score(res, task) >= thr)
                inreg.append(float(res.attention[task.region > 0].mean()))
    if not maps:
        raise ParameterError("no runs to summarise")
    stats = attention_stats(maps, flags)
    save_attention(stats.success, out / "attention_success.png")
    save_attention(stats.failure, out / "attention_failure.png")
    inreg = np.asarray(inreg)
    flags = np.asarray(flags)
    summary = {
        "n_success": stats.n_success,
        "n_failure": stats.n_failure,
        "success_empty": stats.success_empty,
        "failure_empty": stats.failure_empty,
        "in_region_success": float(inreg[flags].mean()) if flags.any() else None,
        "in_region_failure": float(inreg[~flags].mean()) if (~flags).any() else None,
    }
    write_json(out / "stats.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def roundtrip_errors(steps, T=1000, n_images=8, seed=0):
    """Relative L2 error of invert-then-sample on rendered images."""
    tasks = gen_eval_set(n_images, seed, task_types=("color",))
    schedule = build_schedule(T, stride=T // steps)
    errors = []
    for task in tasks:
        predictor = GaussianMixturePredictor(task_mixture(task), schedule)
        x0 = task.input.image
        traj = invert(x0, predictor, schedule)
        x_rec, _ = sample(traj.final, schedule.num_steps, 0, None, predictor, None, schedule)
        errors.append(float(np.linalg.norm(x_rec - x0) / np.linalg.norm(x0)))
    return errors


def cmd_roundtrip(args, cfg: RunConfig):
    if cfg.edit.T % args.steps:
        raise ParameterError(f"--steps must divide T={cfg.edit.T}")
    errors = roundtrip_errors(args.steps, cfg.edit.T, args.images, cfg.seed)
    worst = max(errors)
    print(f"steps={args.steps} mean_rel_error={np.mean(errors):.6f} max_rel_error={worst:.6f}")
    if args.out:
        write_provenance(args.out, "roundtrip", cfg, args, {"errors": errors})
    return EXIT_OK if worst < args.tolerance else EXIT_CHECK


# parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="madiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"madiff {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML configuration file")
        sp.add_argument("--seed", type=int)
        return sp

    def edit_flags(sp):
        sp.add_argument("--checkpoint", type=Path, help="MaskNet checkpoint")
        sp.add_argument("--mask-source", choices=("masknet", "foreground", "attention_threshold"))
        sp.add_argument("--no-ap", action="store_true", help="skip the attention processor")
        sp.add_argument("--noise-level", type=float, help="synthetic attention noise")
        sp.add_argument("--steps", type=int, dest="depth", help="inversion depth in effective steps")

    def task_flags(sp):
        sp.add_argument("--data", type=Path, help="dataset directory (default: generate)")
        sp.add_argument("--n-per-task", type=int)
        sp.add_argument("--tasks", nargs="+", choices=TASK_TYPES)
        sp.add_argument("--jobs", type=int)

    sp = common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--train", type=int)
    sp.add_argument("--eval", type=int, dest="eval_per_task", help="eval tasks per type")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train-masknet", help="train MaskNet on a dataset"))
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--optimizer", choices=("sgd", "adam"))
    sp.add_argument("--resume", type=Path)
    sp.set_defaults(func=cmd_train_masknet)

    sp = common(sub.add_parser("edit", help="edit one image"))
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--out", type=Path, required=True)
    edit_flags(sp)
    sp.set_defaults(func=cmd_edit)

    sp = common(sub.add_parser("eval", help="benchmark on evaluation tasks"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--sheet", type=int, default=8, help="rows in the contact sheet")
    task_flags(sp)
    edit_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="MaskNet x attention-processor ablation"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seeds", type=int, help="tasks per type (alias of --n-per-task)")
    task_flags(sp)
    edit_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("attn-stats", help="mean attention of successful vs failed edits"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--runs", nargs="+", type=Path, help="edit run directories")
    sp.add_argument("--noise-levels", nargs="+", type=float)
    task_flags(sp)
    edit_flags(sp)
    sp.set_defaults(func=cmd_attn_stats)

    sp = common(sub.add_parser("roundtrip", help="inversion round-trip diagnostic"))
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--images", type=int, default=8)
    sp.add_argument("--tolerance", type=float, default=0.05)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_roundtrip)
    return p


def overrides_from_args(args):
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "seed": get("seed"),
        "data.n_train": get("train"),
        "data.n_eval_per_task": get("eval_per_task"),
        "train.epochs": get("epochs"),
        "train.max_steps": get("max_steps"),
        "train.lr": get("lr"),
        "train.batch_size": get("batch_size"),
        "train.optimizer": get("optimizer"),
        "edit.mask_source": get("mask_source"),
        "edit.noise_level": get("noise_level"),
        "edit.S": get("depth"),
        "eval.jobs": get("jobs"),
    }
    if get("no_ap"):
        ov["edit.attention_processor"] = False
    if get("noise_levels"):
        ov["eval.noise_levels"] = list(args.noise_levels)
    return ov


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        return args.func(args, cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, ConfigurationError, ParameterError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except MadiffError as exc:
        cause = exc.__cause__
        if isinstance(cause, OSError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
