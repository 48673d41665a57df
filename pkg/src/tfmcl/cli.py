"""``tfmcl`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np
import torch

from tfmcl import __version__
from tfmcl.config import RunConfig, load_config
from tfmcl.data import Dataset, load_dataset, save_dataset, split
from tfmcl.errors import ConfigError, InvalidArgumentError, TFMCLError
from tfmcl.gradcheck import run_gradcheck
from tfmcl.model import load_checkpoint, save_checkpoint
from tfmcl.signal import Window, bandpass_notch, gen_synthetic_dataset, psd_matrix
from tfmcl.train import evaluate, finetune, pretrain, write_jsonl

log = logging.getLogger("tfmcl")

GRADCHECK_TOL = 1e-4
SWEEP_PARAMS = ("alpha", "beta", "tau")


class UsageError(TFMCLError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _record_run(out_dir, cfg: RunConfig, command: str):
    os.makedirs(out_dir, exist_ok=True)
    _write_json(cfg.to_dict(), os.path.join(out_dir, "config.json"))
    _write_json({"tool": "tfmcl", "version": __version__, "seed": cfg.seed, "command": command,
                 "torch": torch.__version__, "numpy": np.__version__},
                os.path.join(out_dir, "run_info.json"))


def synth_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return gen_synthetic_dataset(d.n_subjects, d.windows_per_subject, d.n_channels, d.window_len,
                                 d.fs_hz, d.class_band_hz, d.power_ratio, d.noise_sigma, cfg.seed)


def preprocess(ds: Dataset, cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.bandpass_hz is None:
        return ds
    notch = d.notch_hz or (None, None)
    return Dataset([bandpass_notch(w, d.bandpass_hz[0], d.bandpass_hz[1], *notch) for w in ds.windows], ds.ids)


def partitions(ds: Dataset, cfg: RunConfig):
    train, val, test = split(ds, cfg.split_spec())
    return {"train": train, "val": val, "test": test, "all": ds}


def _pretrain(ds, cfg: RunConfig):
    parts = partitions(ds, cfg)
    pre_ds = parts[cfg.data.pretrain_on]

    def progress(epoch, recs):
        log.info("pretrain epoch %d mean total %.6f", epoch, float(np.mean([r["total"] for r in recs])))

    return pretrain(pre_ds, cfg.train_config(), progress=progress)


def _finetune(model, ds, cfg: RunConfig):
    parts = partitions(ds, cfg)
    parts["train"].require_labels()

    def progress(rec):
        log.info("finetune epoch %d loss %.6f val acc %.4f", rec["epoch"], rec["train_loss"], rec["val_accuracy"])

    best, history = finetune(model, parts["train"], cfg.train_config(), parts["val"], progress=progress)
    return best, history, evaluate(best, parts[cfg.eval.partition])


def cmd_gen_synth(args):
    cfg = load_config(args.config)
    ds = synth_dataset(cfg)
    save_dataset(ds, args.out)
    _record_run(args.out, cfg, "gen-synth")
    print(json.dumps({"ok": True, "n_windows": len(ds), "out": args.out}))


def cmd_validate(args):
    ds = load_dataset(args.dir)
    labels = ds.labels
    print(json.dumps({
        "ok": True, "n_windows": len(ds), "n_subjects": len(ds.by_subject()),
        "n_channels": ds.n_channels, "window_len": ds.window_len, "fs_hz": ds.fs_hz,
        "n_labeled": sum(y is not None for y in labels),
    }))


def cmd_psd(args):
    if args.channels < 1 or args.len < 1:
        raise InvalidArgumentError("--channels and --len must be positive")
    expected = args.channels * args.len * 4
    try:
        size = os.path.getsize(args.inp)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read {args.inp}: {exc.strerror}") from exc
    if size != expected:
        raise InvalidArgumentError(f"{args.inp}: {size} bytes, expected {expected}")
    x = np.fromfile(args.inp, dtype="<f4").reshape(args.channels, args.len)
    w = Window(x, args.fs)
    p = psd_matrix(w.samples)
    _write_json({"n_channels": args.channels, "window_len": args.len, "fs_hz": args.fs,
                 "freqs_hz": (np.arange(p.shape[1]) * args.fs / args.len).tolist(),
                 "psd": p.tolist()}, args.out)


def cmd_pretrain(args):
    cfg = load_config(args.config)
    ds = preprocess(load_dataset(args.data), cfg)
    _record_run(args.out, cfg, "pretrain")
    model, records = _pretrain(ds, cfg)
    save_checkpoint(model, os.path.join(args.out, "checkpoint.ckpt"), {"stage": "pretrain"})
    write_jsonl(records, os.path.join(args.out, "loss_log.jsonl"))
    print(json.dumps({"ok": True, "batches": len(records), "final_total": records[-1]["total"]}))


def cmd_finetune(args):
    cfg = load_config(args.config)
    ds = preprocess(load_dataset(args.data), cfg)
    model = load_checkpoint(args.ckpt)
    _record_run(args.out, cfg, "finetune")
    best, history, metrics = _finetune(model, ds, cfg)
    save_checkpoint(best, os.path.join(args.out, "model.ckpt"), {"stage": "finetune"})
    write_jsonl(history, os.path.join(args.out, "finetune_log.jsonl"))
    _write_json(metrics.to_json(), os.path.join(args.out, "metrics.json"))
    print(json.dumps({"ok": True, "partition": cfg.eval.partition, **metrics.to_json()}))


def cmd_eval(args):
    ds = load_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    metrics = evaluate(model, ds)
    _write_json(metrics.to_json(), args.out)
    print(json.dumps({"ok": True, **metrics.to_json()}))


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    result = run_gradcheck(weights=cfg.loss, seed=cfg.seed)
    ok = result.passed(GRADCHECK_TOL)
    print(json.dumps({"max_rel_error": result.max_rel_error, "tolerance": GRADCHECK_TOL,
                      "n_params": result.n_params, "passed": ok}))
    return 0 if ok else 1


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {text!r}") from exc


def cmd_sweep(args):
    cfg = load_config(args.config)
    values = _parse_values(args.values)
    if not values:
        raise UsageError("--values is empty")
    ds = preprocess(load_dataset(args.data) if args.data else synth_dataset(cfg), cfg)
    os.makedirs(args.out, exist_ok=True)
    _record_run(args.out, cfg, "sweep")
    results = {}
    for v in values:
        try:
            run_cfg = cfg.replace("loss", **{args.param: v})
        except TFMCLError as exc:
            raise ConfigError(f"{args.param}={v}: {exc}") from exc
        key = repr(v)
        sub = os.path.join(args.out, f"{args.param}_{key}")
        _record_run(sub, run_cfg, f"sweep {args.param}={key}")
        model, records = _pretrain(ds, run_cfg)
        write_jsonl(records, os.path.join(sub, "loss_log.jsonl"))
        best, history, metrics = _finetune(model, ds, run_cfg)
        write_jsonl(history, os.path.join(sub, "finetune_log.jsonl"))
        _write_json(metrics.to_json(), os.path.join(sub, "metrics.json"))
        results[key] = metrics.to_json()
        log.info("sweep %s=%s accuracy %.4f", args.param, key, metrics.accuracy)
    _write_json({"param": args.param, "partition": cfg.eval.partition, "results": results},
                os.path.join(args.out, "sweep.json"))
    print(json.dumps({"ok": True, "param": args.param, "n_values": len(values)}))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tfmcl", description=__doc__)
    p.add_argument("--version", action="version", version=f"tfmcl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synth", help="write a synthetic labelled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("validate", help="check a dataset directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("psd", help="periodogram of one raw f32 window")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--channels", type=int, required=True)
    s.add_argument("--len", type=int, required=True)
    s.add_argument("--fs", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_psd)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="metrics of a checkpoint on every window of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    s.add_argument("--config")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="pretrain + finetune + eval for each loss-weight value")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def _set_threads():
    raw = os.environ.get("TFMCL_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TFMCL_THREADS must be an integer, got {raw!r}") from exc
    if n > 0:
        torch.set_num_threads(n)


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _set_threads()
        status = args.func(args)
        return 0 if status is None else status
    except TFMCLError as exc:
        print(json.dumps({"ok": False, "error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(json.dumps({"ok": False, "error": "io", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
