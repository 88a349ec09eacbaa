"""Command line: generate | train | distill | eval.

Configuration resolves in three layers — built-in defaults, then a key=value
config file (--config), then explicit CLI flags — and every run writes the
resolved configuration next to its outputs. Errors print one machine-parsable
line "ERR:<KIND> message" on stderr; exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.

The default output root comes from $TASKDET_OUT when --out is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import model as md
from . import synthdata as sd
from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .descriptions import PRONOUNS
from .distill import (DistillFlags, DistillWeights, MemoryBank,
                      POLICY_FIFO, POLICY_REPLACE_CLOSEST)
from .losses import LossWeights

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT = "TASKDET_OUT"

MODEL_KEYS = ("d", "n_heads", "n_tr", "n_pred", "n_max", "n_l_max",
              "contrast_dim", "ffn_dim", "activation", "vocab_size")


class CliConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; values are coerced."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliConfigError(f"cannot read config file {path}: {e}")
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{path}:{ln}: expected key=value, "
                                 f"got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = _coerce(val.strip())
    return out


def resolve(defaults: dict, args) -> dict:
    """defaults < config file < CLI flags (flags win)."""
    res = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise CliConfigError(f"unknown config keys {sorted(unknown)}")
        res.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            res[key] = val
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliConfigError(f"--set wants key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in defaults:
            raise CliConfigError(f"--set: unknown key {key!r}")
        res[key] = _coerce(val)
    return res


def _out_dir(res, command) -> Path:
    out = res.get("out")
    if not out:
        root = os.environ.get(ENV_OUT)
        if not root:
            raise CliConfigError(
                f"no --out given and ${ENV_OUT} is not set")
        out = Path(root) / command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(res: dict, out: Path) -> None:
    lines = [f"{k}={res[k]}" for k in sorted(res)]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _append_metrics(path: Path, row: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _load_dataset(path) -> sd.Dataset:
    try:
        return sd.deserialize(path)
    except FileNotFoundError as e:
        raise sd.DataFormatError(f"dataset not found: {e.filename}")


def _model_config(res, dataset) -> md.ModelConfig:
    kwargs = {k: res[k] for k in MODEL_KEYS if k in res}
    kwargs["grid"] = dataset.grid
    kwargs["feature_dim"] = sd.N_FEATURES
    kwargs["self_attention"] = bool(res.get("self_attention", True))
    try:
        config = md.ModelConfig.toy(**kwargs)
    except ValueError as e:
        raise CliConfigError(str(e))
    if len(dataset.vocab) > config.vocab_size:
        raise CliConfigError(
            f"vocab has {len(dataset.vocab)} tokens, model embeds only "
            f"{config.vocab_size}")
    return config


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "out": None, "seed": 0, "tasks": 5, "scenes": 500, "pronoun": "something",
    "noise": 0.05, "max_objects": 6, "split": 0.8, "split_seed": 0,
    "force": False,
}


def cmd_generate(args) -> int:
    res = resolve(GENERATE_DEFAULTS, args)
    out = _out_dir(res, "generate")
    paths = {name: out / f"{name}.bin"
             for name in ("dataset", "train", "test")}
    if not res["force"]:
        for p in paths.values():
            if p.exists():
                raise CliConfigError(f"{p} exists; pass --force to overwrite")
    ds = sd.generate(seed=res["seed"], n_task=res["tasks"],
                     scenes_per_task=res["scenes"], pronoun=res["pronoun"],
                     noise=res["noise"], max_objects=res["max_objects"])
    train, test = sd.split(ds, res["split"], seed=res["split_seed"])
    for name, part in (("dataset", ds), ("train", train), ("test", test)):
        sd.serialize(part, paths[name])
    write_resolved(res, out)
    for name, part in (("dataset", ds), ("train", train), ("test", test)):
        n_empty = sum(1 for s in part.samples if s.n_gt == 0)
        n_multi = sum(1 for s in part.samples if len(s.gt_categories()) > 1)
        print(f"{name}: {len(part)} scenes "
              f"({n_empty} empty, {n_multi} multi-category) -> {paths[name]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None, "out": None, "seed": 0, "form": tr.FORM_PRONOUN,
    "pronoun": None, "epochs": 4, "batch": 8, "lr": 5e-4, "lr_drop": 0,
    "self_attention": True, "val_every": 1,
    "d": 32, "n_heads": 4, "n_tr": 2, "n_pred": 8, "n_max": 16,
    "n_l_max": 12, "contrast_dim": 16, "ffn_dim": 64, "activation": "relu",
    "vocab_size": 64,
}


def _load_split(res):
    data = res.get("data")
    if not data:
        raise CliConfigError("--data (directory with train.bin/test.bin) "
                             "is required")
    data = Path(data)
    train = _load_dataset(data / "train.bin")
    test = _load_dataset(data / "test.bin")
    if res.get("pronoun"):
        sd.retag_pronoun(train, res["pronoun"])
        sd.retag_pronoun(test, res["pronoun"])
    return train, test


def _validate(params, config, test, form, bank=None, seed=0):
    mode = (ev.MODE_NOUN_ORACLE if form == tr.FORM_NOUN
            else (ev.MODE_DISTILLED if bank is not None
                  else ev.MODE_PRONOUN_PLAIN))
    rep = ev.evaluate(params, config, test, mode, bank=bank, seed=seed)
    return rep.map_box, rep.map_mask


def _epoch_lr(res, epoch: int) -> float:
    """Step schedule: one 10x drop from epoch lr_drop on (0 = no drop)."""
    if res["lr_drop"] < 0:
        raise CliConfigError("lr_drop must be >= 0")
    if res["lr_drop"] and epoch >= res["lr_drop"]:
        return res["lr"] * 0.1
    return res["lr"]


def _dump_nonfinite(out: Path, err: tr.NonFiniteLossError) -> None:
    diag = {"error": str(err), "batch": err.diagnostics}
    (out / "nonfinite.json").write_text(json.dumps(diag, indent=2,
                                                   default=str))


def cmd_train(args) -> int:
    res = resolve(TRAIN_DEFAULTS, args)
    if res["form"] not in (tr.FORM_NOUN, tr.FORM_PRONOUN):
        raise CliConfigError(f"form must be noun|pronoun, got {res['form']!r}")
    out = _out_dir(res, "train")
    train, test = _load_split(res)
    config = _model_config(res, train)
    write_resolved(res, out)
    params = md.init_params(config, seed=res["seed"])
    opt = tr.Adam(params, tr.OptimizerSettings(lr=res["lr"]))
    weights = LossWeights()
    metrics = out / "metrics.jsonl"
    run_meta = {"command": "train", "seed": res["seed"], "form": res["form"],
                "pronoun": train.params["pronoun"], "lr": res["lr"],
                "lr_drop": res["lr_drop"], "batch": res["batch"],
                "data": str(res["data"])}
    try:
        for epoch in range(res["epochs"]):
            opt.settings = replace(opt.settings,
                                    lr=_epoch_lr(res, epoch))
            parts = tr.train_epoch(params, opt, train, config, weights,
                                   form=res["form"], seed=res["seed"],
                                   epoch=epoch, batch_size=res["batch"])
            row = {"epoch": epoch, "loss": parts}
            if res["val_every"] and (epoch + 1) % res["val_every"] == 0:
                box, mask = _validate(params, config, test, res["form"])
                row["val_map_box"], row["val_map_mask"] = box, mask
            _append_metrics(metrics, row)
            save_checkpoint(out / "checkpoint.ckpt", config=config,
                            params=params, optimizer=opt, epoch=epoch + 1,
                            run=run_meta)
            print(f"epoch {epoch}: loss {parts['total']:.4f}"
                  + (f", val mAP box {row['val_map_box']:.4f} "
                     f"mask {row['val_map_mask']:.4f}"
                     if "val_map_box" in row else ""))
    except tr.NonFiniteLossError as e:
        _dump_nonfinite(out, e)
        raise
    print(f"checkpoint -> {out / 'checkpoint.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------

DISTILL_DEFAULTS = dict(TRAIN_DEFAULTS)
del DISTILL_DEFAULTS["form"]
DISTILL_DEFAULTS.update({
    "epochs_teacher": 4, "joint": False,
    "no_ccr": False, "no_cluster_loss": False, "no_sbtl": False,
    "K": 3, "n_mem": 256, "memory_policy": POLICY_REPLACE_CLOSEST,
    "lambda_cluster": 1.0, "lambda_binary": 5.0,
    "teacher_ckpt": None, "student_ckpt": None,
})


def _warm_start(path, config) -> dict:
    ck = load_checkpoint(path)
    if ck.config != config:
        raise CliConfigError(
            f"checkpoint {path} was trained with a different model config")
    return ck.params


def cmd_distill(args) -> int:
    res = resolve(DISTILL_DEFAULTS, args)
    out = _out_dir(res, "distill")
    train, test = _load_split(res)
    config = _model_config(res, train)
    write_resolved(res, out)
    seed = res["seed"]
    # teacher and student draw distinct initializations from one run seed
    teacher = md.init_params(config, seed=seed + 1_000_003)
    student = md.init_params(config, seed=seed)
    if res["teacher_ckpt"]:
        teacher = _warm_start(res["teacher_ckpt"], config)
    if res["student_ckpt"]:
        student = _warm_start(res["student_ckpt"], config)
    opt_t = tr.Adam(teacher, tr.OptimizerSettings(lr=res["lr"]))
    opt_s = tr.Adam(student, tr.OptimizerSettings(lr=res["lr"]))
    weights = LossWeights()
    dweights = DistillWeights(cluster=res["lambda_cluster"],
                              binary=res["lambda_binary"])
    flags = DistillFlags(replace=not res["no_ccr"],
                         cluster=not res["no_cluster_loss"],
                         binary=not res["no_sbtl"])
    if res["memory_policy"] not in (POLICY_REPLACE_CLOSEST, POLICY_FIFO):
        raise CliConfigError(f"unknown memory policy "
                             f"{res['memory_policy']!r}")
    bank = MemoryBank(n_tasks=len(train.tasks), n_mem=res["n_mem"],
                      k=res["K"], d=config.d, policy=res["memory_policy"])
    metrics = out / "metrics.jsonl"
    run_meta = {"command": "distill", "seed": seed,
                "pronoun": train.params["pronoun"], "lr": res["lr"],
                "lr_drop": res["lr_drop"], "batch": res["batch"], "K": res["K"],
                "flags": asdict(flags), "dweights": asdict(dweights),
                "joint": res["joint"], "data": str(res["data"])}
    try:
        if not res["joint"] and not res["teacher_ckpt"]:
            for epoch in range(res["epochs_teacher"]):
                opt_t.settings = replace(opt_t.settings,
                                          lr=_epoch_lr(res, epoch))
                parts = tr.train_epoch(teacher, opt_t, train, config,
                                       weights, form=tr.FORM_NOUN, seed=seed,
                                       epoch=epoch, batch_size=res["batch"])
                _append_metrics(metrics, {"phase": "teacher", "epoch": epoch,
                                          "loss": parts})
                print(f"teacher epoch {epoch}: loss {parts['total']:.4f}")
        for epoch in range(res["epochs"]):
            opt_t.settings = opt_s.settings = replace(
                opt_s.settings, lr=_epoch_lr(res, epoch))
            t_parts, s_parts = tr.distill_epoch(
                teacher, student, opt_t, opt_s, train, config, bank,
                weights, dweights, flags, seed=seed, epoch=epoch,
                batch_size=res["batch"])
            row = {"phase": "distill", "epoch": epoch,
                   "teacher_loss": t_parts, "student_loss": s_parts}
            if res["val_every"] and (epoch + 1) % res["val_every"] == 0:
                box, mask = _validate(student, config, test,
                                      tr.FORM_PRONOUN, bank=bank, seed=seed)
                row["val_map_box"], row["val_map_mask"] = box, mask
            _append_metrics(metrics, row)
            print(f"distill epoch {epoch}: student {s_parts['total']:.4f} "
                  f"teacher {t_parts['total']:.4f}"
                  + (f", val mAP box {row['val_map_box']:.4f}"
                     if "val_map_box" in row else ""))
        run_t = dict(run_meta, side="teacher")
        save_checkpoint(out / "teacher.ckpt", config=config, params=teacher,
                        optimizer=opt_t, epoch=res["epochs"], run=run_t)
        run_s = dict(run_meta, side="student")
        save_checkpoint(out / "student.ckpt", config=config, params=student,
                        optimizer=opt_s, bank=bank, epoch=res["epochs"],
                        run=run_s)
    except tr.NonFiniteLossError as e:
        _dump_nonfinite(out, e)
        raise
    print(f"student (with frozen bank) -> {out / 'student.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "ckpt": None, "data": None, "out": None, "mode": ev.MODE_PRONOUN_PLAIN,
    "pronoun": None, "per_block": False, "seed": 0,
}


def cmd_eval(args) -> int:
    res = resolve(EVAL_DEFAULTS, args)
    if not res["ckpt"]:
        raise CliConfigError("--ckpt is required")
    if not res["data"]:
        raise CliConfigError("--data (a dataset .bin file) is required")
    out = _out_dir(res, "eval")
    ck = load_checkpoint(res["ckpt"])
    dataset = _load_dataset(res["data"])
    if res.get("pronoun"):
        sd.retag_pronoun(dataset, res["pronoun"])
    if tuple(ck.config.grid) != dataset.grid:
        raise CliConfigError(
            f"checkpoint grid {ck.config.grid} != dataset grid "
            f"{dataset.grid}")
    if len(dataset.vocab) > ck.config.vocab_size:
        raise CliConfigError("dataset vocabulary exceeds the checkpoint's "
                             "embedding table")
    bank = ck.make_bank() if ck.has_bank else None
    if res["mode"] == ev.MODE_DISTILLED and bank is None:
        raise CliConfigError("distilled mode needs a checkpoint that "
                             "carries a memory bank")
    write_resolved(res, out)
    try:
        report = ev.evaluate(ck.params, ck.config, dataset, res["mode"],
                             bank=bank, seed=res["seed"])
    except ValueError as e:
        raise CliConfigError(str(e))
    if report.privileged:
        print(f"PRIVILEGED: mode {res['mode']!r} consumes ground-truth "
              f"noun descriptions")
    ev.export_report(report, out / "report.json", "json")
    ev.export_report(report, out / "report.csv", "csv")
    if res["per_block"]:
        with open(out / "per_block.csv", "w") as fh:
            fh.write("task,metric,block,ap\n")
            for kind, blocks in (("ap_box", report.per_block_task_box),
                                 ("ap_mask", report.per_block_task_mask)):
                for t in sorted(report.per_task_box):
                    for b, d in enumerate(blocks):
                        fh.write(f"{t},{kind},{b},{d[t]!r}\n")
    print(f"mode {res['mode']}: mAP box {report.map_box:.4f} "
          f"mask {report.map_mask:.4f} -> {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="taskdet",
                description="task-conditioned detection on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, spec):
        sp = sub.add_parser(name)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key")
        for flag, kwargs in spec:
            sp.add_argument(flag, **kwargs)
        return sp

    num = {"type": int}
    add("generate", cmd_generate, [
        ("--out", {}), ("--seed", num), ("--tasks", num), ("--scenes", num),
        ("--pronoun", {"choices": PRONOUNS}), ("--noise", {"type": float}),
        ("--max-objects", {"type": int, "dest": "max_objects"}),
        ("--split", {"type": float}),
        ("--split-seed", {"type": int, "dest": "split_seed"}),
        ("--force", {"action": "store_const", "const": True}),
    ])
    model_flags = [
        ("--d", num), ("--n-tr", {"type": int, "dest": "n_tr"}),
        ("--n-pred", {"type": int, "dest": "n_pred"}),
        ("--no-self-attention", {"action": "store_const", "const": False,
                                 "dest": "self_attention"}),
    ]
    add("train", cmd_train, [
        ("--data", {}), ("--out", {}), ("--seed", num),
        ("--form", {"choices": (tr.FORM_NOUN, tr.FORM_PRONOUN)}),
        ("--pronoun", {"choices": PRONOUNS}), ("--epochs", num),
        ("--batch", num), ("--lr", {"type": float}),
        ("--lr-drop", {"type": int, "dest": "lr_drop"}),
        ("--val-every", {"type": int, "dest": "val_every"}),
    ] + model_flags)
    add("distill", cmd_distill, [
        ("--data", {}), ("--out", {}), ("--seed", num),
        ("--pronoun", {"choices": PRONOUNS}), ("--epochs", num),
        ("--epochs-teacher", {"type": int, "dest": "epochs_teacher"}),
        ("--batch", num), ("--lr", {"type": float}),
        ("--lr-drop", {"type": int, "dest": "lr_drop"}),
        ("--val-every", {"type": int, "dest": "val_every"}),
        ("--joint", {"action": "store_const", "const": True}),
        ("--no-ccr", {"action": "store_const", "const": True,
                      "dest": "no_ccr"}),
        ("--no-cluster-loss", {"action": "store_const", "const": True,
                               "dest": "no_cluster_loss"}),
        ("--no-sbtl", {"action": "store_const", "const": True,
                       "dest": "no_sbtl"}),
        ("--K", num), ("--n-mem", {"type": int, "dest": "n_mem"}),
        ("--memory-policy", {"dest": "memory_policy",
                             "choices": (POLICY_REPLACE_CLOSEST,
                                         POLICY_FIFO)}),
        ("--lambda-cluster", {"type": float, "dest": "lambda_cluster"}),
        ("--lambda-binary", {"type": float, "dest": "lambda_binary"}),
        ("--teacher-ckpt", {"dest": "teacher_ckpt"}),
        ("--student-ckpt", {"dest": "student_ckpt"}),
    ] + model_flags)
    add("eval", cmd_eval, [
        ("--ckpt", {}), ("--data", {}), ("--out", {}),
        ("--mode", {"choices": ev.EVAL_MODES}),
        ("--pronoun", {"choices": PRONOUNS}), ("--seed", num),
        ("--per-block", {"action": "store_const", "const": True,
                         "dest": "per_block"}),
    ])
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except tr.NonFiniteLossError as e:
        print(f"ERR:NUMERIC {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (sd.DataFormatError, CheckpointError) as e:
        print(f"ERR:DATA {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"ERR:DATA {e}", file=sys.stderr)
        return EXIT_DATA
    except (CliConfigError, ValueError) as e:
        print(f"ERR:CONFIG {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
