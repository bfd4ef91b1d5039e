"""Command-line front end for the full pipeline.

Subcommands: gen-data, train, extract-embeddings, sat-train, probe, ablate,
report, grad-check. Every command that writes artifacts also writes a
manifest.json with input/output paths, per-file checksums, and the resolved
seed, so reruns are auditable.

Configuration precedence, per key: command-line flag, then --config file
entry, then built-in default. The default seed comes from $CONFSAT_SEED when
set.

Exit codes: 0 success, 1 usage or configuration problem, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time

import numpy as np

from . import desk
from .conformer import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .data import gen_corpus, load_corpus, save_corpus
from .embeddings import (ivector_lite_pipeline, extract_xvector, read_embeddings,
                         synth_embeddings, train_xvector_lite, write_embeddings)
from .errors import ConfigurationError, NumericalError, UsageError
from .gradcheck import OPS, TOLERANCE, run_suite
from .integration import METHODS, IntegrationSpec
from .probes import (ProbeConfig, attach_probes, block_output_taps, depth_curve_csv,
                     probe_report, train_probes)
from .conformer import BlockTapPoint
from .training import (TrainConfig, ablate, ablation_csv, evaluate, sat_finetune, train)

SEED_ENV = "CONFSAT_SEED"


class CliParser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _sha256(path: str) -> str:
    """File digest, or a digest over all files of a directory (manifest.json
    excluded: it carries the wall-clock duration)."""
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, _dirs, files in sorted(os.walk(path)):
            for name in sorted(files):
                if name == "run_manifest.json":
                    continue
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, seed, config: dict,
                   inputs: dict, outputs: dict, t0: float):
    checksums = {name: _sha256(path) for name, path in sorted(outputs.items())}
    manifest = {"command": command, "seed": seed, "config": config,
                "inputs": inputs, "outputs": outputs, "checksums": checksums,
                "duration_sec": round(time.time() - t0, 3)}
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def _model_config_from(cfg: dict, corpus, model_kind: str) -> ModelConfig:
    base = desk.desk_model_config(corpus.feature_dim, corpus.n_classes, model_kind)
    merged = base.to_dict()
    for key, value in cfg.items():
        if key not in merged:
            raise ConfigurationError(f"unknown model config key {key!r}")
        merged[key] = value
    merged["feature_dim"] = corpus.feature_dim
    merged["num_output_classes"] = corpus.n_classes
    return ModelConfig.from_dict(merged)


def _train_config_from(cfg: dict, seed: int) -> TrainConfig:
    base = desk.desk_train_config(seed)
    merged = base.to_dict()
    for key, value in cfg.items():
        if key not in merged:
            raise ConfigurationError(f"unknown train config key {key!r}")
        merged[key] = value
    merged["seed"] = seed
    return TrainConfig.from_dict(merged)


def _write_metrics(path: str, metrics: list[dict]):
    with open(path, "w") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def parse_block_sets(text: str) -> list[tuple[int, ...]]:
    """'0,1,(1,2),3' -> [(0,), (1,), (1, 2), (3,)]."""
    out, depth, token = [], 0, ""
    for ch in text + ",":
        if ch == "," and depth == 0:
            if token.strip():
                t = token.strip()
                if t.startswith("(") and t.endswith(")"):
                    out.append(tuple(int(x) for x in t[1:-1].split(",")))
                else:
                    out.append((int(t),))
            token = ""
        else:
            depth += ch == "("
            depth -= ch == ")"
            token += ch
    if not out:
        raise UsageError(f"no block sets in {text!r}")
    return out


# -- subcommand handlers -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.time()
    corpus = gen_corpus(n_speakers=args.speakers, utts_per_speaker=args.utts,
                        frames_range=(args.frames_min, args.frames_max),
                        feature_dim=args.feature_dim, n_classes=args.classes,
                        speaker_shift_std=args.shift_std, noise_std=args.noise_std,
                        class_scale=args.class_scale, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_corpus(corpus, args.out)
    write_manifest(args.out, "gen-data", args.seed,
                   {"speakers": args.speakers, "utts": args.utts,
                    "shift_std": args.shift_std, "noise_std": args.noise_std},
                   {}, {"corpus": args.out}, t0)
    print(f"wrote {len(corpus.utterances)} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    corpus = load_corpus(args.corpus)
    file_cfg = _load_config_file(args.config)
    model_config = _model_config_from(file_cfg.get("model", {}), corpus,
                                      args.model_kind or file_cfg.get("model", {}).get("model_kind", "conformer"))
    train_cfg = _train_config_from(file_cfg.get("train", {}), args.seed)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.batch_utts is not None:
        train_cfg.batch_utts = args.batch_utts
    result = train(model_config, corpus, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    metrics = os.path.join(args.out, "metrics.jsonl")
    save_checkpoint(ckpt, result.config, result.state)
    _write_metrics(metrics, result.metrics)
    write_manifest(args.out, "train", args.seed,
                   {"model": result.config.to_dict(), "train": train_cfg.to_dict()},
                   {"corpus": args.corpus},
                   {"checkpoint": ckpt, "metrics": metrics}, t0)
    print(f"best dev frame error: {result.best_dev_error:.4f}")
    return 0


def cmd_extract_embeddings(args) -> int:
    t0 = time.time()
    corpus = load_corpus(args.corpus)
    if args.method == "synthetic":
        _, embs = synth_embeddings(corpus.utterances, args.dim, args.noise_std, args.seed)
    elif args.method == "ivector_lite":
        embs = ivector_lite_pipeline(corpus.utterances, args.ubm_components, args.dim,
                                     seed=args.seed)
    elif args.method == "xvector_lite":
        model, _speakers = train_xvector_lite(corpus, args.dim, seed=args.seed,
                                              epochs=args.epochs, pooling=args.pooling)
        embs = {u.utterance_id: extract_xvector(model, u) for u in corpus.utterances}
    else:
        raise UsageError(f"unknown embedding method {args.method!r}")
    os.makedirs(args.out, exist_ok=True)
    out_file = os.path.join(args.out, "embeddings.jsonl")
    write_embeddings(out_file, list(embs.values()))
    write_manifest(args.out, "extract-embeddings", args.seed,
                   {"method": args.method, "dim": args.dim},
                   {"corpus": args.corpus}, {"embeddings": out_file}, t0)
    print(f"wrote {len(embs)} embeddings to {out_file}")
    return 0


def cmd_sat_train(args) -> int:
    t0 = time.time()
    corpus = load_corpus(args.corpus)
    config, state = load_checkpoint(args.pretrained)
    embeddings = read_embeddings(args.embeddings)
    dim = next(iter(embeddings.values())).vector.size
    blocks = [b for group in parse_block_sets(args.blocks) for b in group]
    spec = IntegrationSpec(method=args.method, blocks=blocks,
                           threshold_k=args.threshold_k, embedding_dim=dim)
    file_cfg = _load_config_file(args.config)
    train_cfg = _train_config_from(file_cfg.get("train", {}), args.seed)
    if args.sat_epochs is not None:
        train_cfg.sat_epochs = args.sat_epochs
    if args.reset_lr is not None:
        train_cfg.sat_reset_lr = args.reset_lr
    result = sat_finetune(config, state, corpus, embeddings, spec, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    metrics = os.path.join(args.out, "metrics.jsonl")
    save_checkpoint(ckpt, result.config, result.state)
    _write_metrics(metrics, result.metrics)
    write_manifest(args.out, "sat-train", args.seed,
                   {"integration": spec.to_dict(), "train": train_cfg.to_dict()},
                   {"corpus": args.corpus, "pretrained": args.pretrained,
                    "embeddings": args.embeddings},
                   {"checkpoint": ckpt, "metrics": metrics}, t0)
    print(f"best dev frame error: {result.best_dev_error:.4f} "
          f"(warm start was {result.metrics[0]['dev_frame_error']:.4f})")
    return 0


def _parse_taps(text: str, config: ModelConfig) -> list[BlockTapPoint]:
    if text == "block-outputs":
        return block_output_taps(config)
    if text == "block1-modules":
        return [BlockTapPoint(1, m) for m in
                ("ffn1_out", "conv1_out", "mhsa_out", "conv2_out", "ffn2_out")]
    taps = []
    for part in text.split(","):
        if ":" in part:
            b, m = part.split(":")
            taps.append(BlockTapPoint(int(b), m))
        else:
            taps.append(BlockTapPoint(int(part)))
    return taps


def cmd_probe(args) -> int:
    t0 = time.time()
    corpus = load_corpus(args.corpus)
    config, state = load_checkpoint(args.checkpoint)
    model = build_model(config, rng=np.random.default_rng(0))
    model.load_state(state)
    taps = _parse_taps(args.taps, config)
    heads = attach_probes(model, taps, corpus.speakers(), seed=args.seed)
    cfg = ProbeConfig(epochs=args.epochs, seed=args.seed)
    info = train_probes(model, heads, corpus.split("train"), cfg, corpus.split("dev"))
    report = probe_report(model, heads, corpus.split("dev"), info)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "probe_report.json")
    curve_path = os.path.join(args.out, "depth_curve.csv")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    with open(curve_path, "w") as fh:
        fh.write(depth_curve_csv(report))
    write_manifest(args.out, "probe", args.seed, {"taps": args.taps, "epochs": args.epochs},
                   {"corpus": args.corpus, "checkpoint": args.checkpoint},
                   {"report": report_path, "curve": curve_path}, t0)
    best = min(r["error_rate"] for r in report.rows)
    print(f"best probe error {best:.3f} over {len(report.rows)} taps "
          f"(model frozen: {report.am_checksum_before == report.am_checksum_after})")
    return 0


def cmd_ablate(args) -> int:
    t0 = time.time()
    corpus = load_corpus(args.corpus)
    config, state = load_checkpoint(args.pretrained)
    sources = {}
    for item in args.embeddings:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = "default", item
        sources[name] = read_embeddings(path)
    methods = list(METHODS) if args.methods == "all" else args.methods.split(",")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown integration method {m!r}")
    block_sets = parse_block_sets(args.blocks)
    seeds = [int(s) for s in args.seeds.split(",")]
    file_cfg = _load_config_file(args.config)
    train_cfg = _train_config_from(file_cfg.get("train", {}), args.seed)
    if args.sat_epochs is not None:
        train_cfg.sat_epochs = args.sat_epochs
    rows = ablate(config, state, corpus, sources, methods, block_sets, seeds,
                  train_cfg, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w") as fh:
        fh.write(ablation_csv(rows))
    write_manifest(args.out, "ablate", args.seed,
                   {"methods": methods, "blocks": args.blocks, "seeds": seeds,
                    "train": train_cfg.to_dict()},
                   {"corpus": args.corpus, "pretrained": args.pretrained},
                   {"ablation": csv_path}, t0)
    print(f"wrote {len(rows)} rows to {csv_path}")
    return 0


def _render_table(rows: list[dict], columns: list[str]) -> str:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c)
              for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns),
             "  ".join("-" * widths[c] for c in columns)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def cmd_report(args) -> int:
    if not args.ablation and not args.probe:
        raise UsageError("nothing to report; pass --ablation and/or --probe")
    if args.ablation:
        with open(args.ablation) as fh:
            rows = list(csv.DictReader(fh))
        print("== adaptation runs ==")
        print(_render_table(rows, list(rows[0].keys()) if rows else []))
        by_cell: dict[tuple, list[float]] = {}
        for r in rows:
            by_cell.setdefault((r["method"], r["blocks"], r["source"]), []).append(
                float(r["dev_frame_error"]))
        summary = [{"method": m, "blocks": b, "source": s,
                    "mean_dev_frame_error": f"{np.mean(v):.4f}", "seeds": len(v)}
                   for (m, b, s), v in sorted(by_cell.items())]
        print("\n== mean over seeds ==")
        print(_render_table(summary, ["method", "blocks", "source",
                                      "mean_dev_frame_error", "seeds"]))
    for path in args.probe or ():
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        print(f"\n== probe depth curve: {path} ==")
        print(_render_table(rows, ["model_kind", "depth_fraction", "error_rate"]))
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(instances=args.instances, seed=args.seed)
    failed = False
    for name in OPS:
        err = results[name]
        status = "ok" if err < TOLERANCE else "FAIL"
        failed |= err >= TOLERANCE
        print(f"{status:5s} {name:32s} max rel err {err:.3e}")
    if failed:
        print(f"gradient checks exceeded tolerance {TOLERANCE}")
        return 2
    print(f"all {len(OPS)} operations within {TOLERANCE}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> CliParser:
    p = CliParser(prog="confsat",
                  description="conformer acoustic model with speaker-adaptive "
                              "training at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def add_seed(sp):
        sp.add_argument("--seed", type=int, default=_default_seed(),
                        help=f"rng seed (default ${SEED_ENV} or 0)")

    sp = sub.add_parser("gen-data", help="generate a synthetic speaker corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=20)
    sp.add_argument("--utts", type=int, default=30)
    sp.add_argument("--frames-min", type=int, default=30)
    sp.add_argument("--frames-max", type=int, default=50)
    sp.add_argument("--feature-dim", type=int, default=16)
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--shift-std", type=float, default=1.0)
    sp.add_argument("--noise-std", type=float, default=0.5)
    sp.add_argument("--class-scale", type=float, default=0.5)
    add_seed(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="pretrain a speaker-independent model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON file with model/train sections")
    sp.add_argument("--model-kind", choices=("conformer", "blstm"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-utts", type=int)
    add_seed(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("extract-embeddings", help="per-utterance speaker vectors")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=("synthetic", "ivector_lite", "xvector_lite"),
                    default="ivector_lite")
    sp.add_argument("--dim", type=int, default=desk.EMBEDDING_DIM)
    sp.add_argument("--noise-std", type=float, default=0.1,
                    help="channel noise for the synthetic source")
    sp.add_argument("--ubm-components", type=int, default=desk.UBM_COMPONENTS)
    sp.add_argument("--epochs", type=int, default=8, help="xvector training epochs")
    sp.add_argument("--pooling", choices=("attentive", "mean"), default="attentive")
    add_seed(sp)
    sp.set_defaults(fn=cmd_extract_embeddings)

    sp = sub.add_parser("sat-train", help="fine-tune with speaker vectors")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--method", choices=METHODS, default="weighted_simple_add")
    sp.add_argument("--blocks", default="1", help="e.g. '1' or '(1,2)'")
    sp.add_argument("--threshold-k", type=float, default=0.4)
    sp.add_argument("--sat-epochs", type=int)
    sp.add_argument("--reset-lr", type=float)
    add_seed(sp)
    sp.set_defaults(fn=cmd_sat_train)

    sp = sub.add_parser("probe", help="speaker-identification probes on a frozen model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--taps", default="block-outputs",
                    help="'block-outputs', 'block1-modules', or '0,1,2:mhsa_out'")
    sp.add_argument("--epochs", type=int, default=25)
    add_seed(sp)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("ablate", help="grid of adaptation runs from one checkpoint")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--embeddings", action="append", required=True,
                    help="embeddings file, or source=file; repeatable")
    sp.add_argument("--methods", default="all")
    sp.add_argument("--blocks", default="1")
    sp.add_argument("--seeds", default="1,2,3")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--sat-epochs", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    add_seed(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("report", help="render ablation/probe outputs as text tables")
    sp.add_argument("--ablation")
    sp.add_argument("--probe", action="append")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--instances", type=int, default=20)
    add_seed(sp)
    sp.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigurationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
