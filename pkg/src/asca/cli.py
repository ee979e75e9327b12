"""``asca`` command line: prepare, train, evaluate, predict, inspect.

Exit status is 0 on success, 1 for user errors (bad flags, missing files,
invalid configuration or data) and 2 for internal failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .config import RunConfig, load_run_config
from .data import ArrayDataset, AudioDataset, ManifestError, load_manifest, load_noise_dir, multi_hot
from .frontend import DecodeError, FrontendParams, decode_wav, features, fit_to_canvas, log_mel_spectrogram
from .io import FormatError, encode_record, load_checkpoint, read_shard, save_checkpoint
from .metrics import NoPositivesError
from .model import ArchParseError
from .tensor import ConfigError, sigmoid_np
from .train import evaluate, predict_logits, train

THREADS_ENV = "ASCA_NUM_THREADS"
USER_ERRORS = (ConfigError, ManifestError, DecodeError, FormatError, ArchParseError,
               FileNotFoundError, NoPositivesError)


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set or [])
    flat = {}
    for key in ("manifest", "classes", "audio_root", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            flat[f"paths.{key}"] = str(v)
    return RunConfig.from_flat(flat, cfg) if flat else cfg


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


# ---------------------------------------------------------------------------
# prepare


def content_key(audio: bytes, params: FrontendParams) -> str:
    h = hashlib.sha256(audio)
    h.update(json.dumps(params.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def cmd_prepare(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_need(cfg.paths.manifest, "manifest"), cfg.paths.classes)
    root = _need(cfg.paths.audio_root, "audio root")
    out = Path(_need_out(cfg))
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    params = cfg.frontend

    def one(row):
        rel, labels = row
        audio = (root / rel).read_bytes()
        key = content_key(audio, params)
        path = cache / f"{key}.ascf"
        if path.exists():
            return key, path.read_bytes()
        from .frontend import parse_wav

        w = parse_wav(audio)
        if w.sample_rate != params.sample_rate:
            raise ConfigError(f"{rel}: {w.sample_rate} Hz, expected {params.sample_rate} Hz")
        rec = encode_record(log_mel_spectrogram(w, params).values, labels)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(rec)
        tmp.replace(path)
        return key, rec

    workers = args.workers or default_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, manifest.rows))
    (out / "shards.ascf").write_bytes(b"".join(rec for _, rec in results))
    index = {"classes": manifest.classes,
             "rows": [{"path": p, "labels": lab, "key": k} for (p, lab), (k, _) in zip(manifest.rows, results)]}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    cfg.dump(out / "config.json")
    print(json.dumps({"records": len(results), "out": str(out)}))
    return 0


def _need_out(cfg: RunConfig) -> str:
    if cfg.paths.out_dir is None:
        raise ConfigError("output directory is required (--out or paths.out_dir)")
    return cfg.paths.out_dir


def shard_dataset(prepared: Path, params: FrontendParams) -> ArrayDataset:
    index = json.loads((prepared / "index.json").read_text())
    records = read_shard(prepared / "shards.ascf")
    inputs = np.stack([fit_to_canvas(v, params.canvas) for v, _ in records])
    targets = multi_hot([lab for _, lab in records], len(index["classes"]))
    return ArrayDataset(inputs, targets, index["classes"])


# ---------------------------------------------------------------------------
# train / evaluate / predict / inspect


def _dataset(cfg: RunConfig, classes=None, shards=None):
    if shards is not None:
        return shard_dataset(_need(shards, "prepared directory"), cfg.frontend)
    manifest = load_manifest(_need(cfg.paths.manifest, "manifest"), cfg.paths.classes)
    if classes is not None and manifest.classes != classes:
        raise ConfigError("manifest classes differ from the checkpoint's classes")
    noise = []
    if cfg.augment.noise and cfg.augment.noise_dir:
        noise = load_noise_dir(_need(cfg.augment.noise_dir, "noise directory"), cfg.frontend.sample_rate)
    return AudioDataset(manifest, _need(cfg.paths.audio_root, "audio root"), cfg.frontend, noise)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(_need_out(cfg))
    out.mkdir(parents=True, exist_ok=True)
    ds = _dataset(cfg, shards=args.shards)
    spec = cfg.model.build(len(ds.classes))
    cfg.dump(out / "config.json")
    meta = {"classes": list(ds.classes), "frontend": cfg.frontend.to_dict()}
    res = train(ds, spec, cfg.train, cfg.augment, out_dir=out, meta=meta)
    save_checkpoint(out / "final.ckpt", spec, res.weights, meta)
    last = res.epochs()[-1] if res.epochs() else {}
    print(json.dumps({"best_mAP": res.best_map, "final_acc": last.get("acc"),
                      "steps": len(res.losses()), "checkpoint": str(res.checkpoint)}, sort_keys=True))
    return 0


def _load(args):
    spec, weights, meta = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    return spec, weights, meta


def cmd_evaluate(args) -> int:
    spec, weights, meta = _load(args)
    cfg = _config(args)
    if "frontend" in meta:
        cfg = RunConfig.from_flat({f"frontend.{k}": v for k, v in meta["frontend"].items()}, cfg)
    ds = _dataset(cfg, meta.get("classes"), args.shards)
    res = evaluate(spec, weights, ds)
    if args.csv:
        res.write_csv(args.csv, list(ds.classes))
    print(res.to_json())
    return 0


def cmd_predict(args) -> int:
    spec, weights, meta = _load(args)
    params = FrontendParams.from_dict(meta["frontend"]) if "frontend" in meta else FrontendParams()
    classes = meta.get("classes") or [str(k) for k in range(spec.num_classes)]
    inputs = np.stack([features(decode_wav(_need(p, "audio file")), params) for p in args.audio])
    probs = sigmoid_np(predict_logits(spec, weights, inputs).astype(np.float64))
    k = min(args.top_k, spec.num_classes)
    out = []
    for path, row in zip(args.audio, probs):
        top = np.argsort(-row, kind="stable")[:k]
        out.append({"path": str(path), "top": [{"class": classes[i], "score": float(row[i])} for i in top]})
    print(json.dumps(out))
    return 0


def cmd_inspect(args) -> int:
    spec, weights, meta = _load(args)
    summary = {
        "arch": spec.stage_string,
        "kinds": spec.kinds,
        "stages": [s.__dict__ for s in spec.stages],
        "stem_channels": spec.stem_channels,
        "window": spec.window,
        "num_classes": spec.num_classes,
        "parameters": weights.num_parameters(),
        "classes": meta.get("classes"),
    }
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asca", description="Hybrid conv/attention audio classifier")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of flat dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("prepare", help="compute log-mel shards for a manifest")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--classes")
    sp.add_argument("--audio-root", dest="audio_root")
    sp.add_argument("--out", dest="out_dir")
    sp.add_argument("--workers", type=int, default=None, help=f"threads (default ${THREADS_ENV} or 1)")
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--classes")
    sp.add_argument("--audio-root", dest="audio_root")
    sp.add_argument("--shards", help="directory written by prepare (skips audio decoding)")
    sp.add_argument("--out", dest="out_dir")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="mAP and top-1 of a checkpoint on a manifest")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--classes")
    sp.add_argument("--audio-root", dest="audio_root")
    sp.add_argument("--shards")
    sp.add_argument("--csv", help="write per-class AP here")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("predict", help="top-k classes for audio files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--top-k", dest="top_k", type=int, default=5)
    sp.add_argument("audio", nargs="+")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("inspect", help="architecture and parameter count of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_inspect)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        sys.stderr.write(f"{e.usage}asca: error: {e}\n")
        return 1
    except USER_ERRORS as e:
        sys.stderr.write(f"asca: error: {e}\n")
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
