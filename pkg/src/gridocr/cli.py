"""Operator entry points: corpus generation, training, decoding,
evaluation, serving, and attention dumps.

Every command writes a manifest (command line, config snapshot, seed,
artifact hashes, timings) next to its outputs. Exit codes: 0 ok, 1 usage,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .corpus import Vocabulary, generate_corpus, read_corpus, write_corpus, tokens_to_text
from .inference import DecayConfig, DecodeTrace, dump_attention, greedy_decode
from .metrics import evaluate_pages, repetition_rates
from .model import GridOCRModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, LossConfig, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems, not argparse's 2
        raise _UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                    artifacts: list[Path], seconds: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "artifacts": {
            str(p.relative_to(out_dir)): _sha256(p) for p in artifacts if p.exists()
        },
        "timings": {"seconds": seconds},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _parse_layout_mix(text: str) -> dict[str, float]:
    mix: dict[str, float] = {}
    for part in text.split(","):
        name, _, weight = part.partition("=")
        name = name.strip()
        if name not in corpus_mod.LAYOUTS:
            raise _UsageError(f"unknown layout {name!r}")
        mix[name] = float(weight) if weight else 1.0
    return mix


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_corpus(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out)
    vocab = Vocabulary.build(args.vocab_words, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    mix = _parse_layout_mix(args.layout_mix)
    samples = generate_corpus(args.pages, rng, vocab, mix,
                              height=args.height, width=args.width)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "corpus.jsonl"
    write_corpus(samples, index, vocab)
    artifacts = [index] + sorted((out_dir / "corpus_images").glob("*.png"))
    _write_manifest(
        out_dir, "corpus",
        {"pages": args.pages, "layout_mix": mix, "vocab_words": args.vocab_words,
         "height": args.height, "width": args.width},
        args.seed, artifacts, time.time() - t0,
    )
    print(json.dumps({"pages": len(samples), "index": str(index)}))
    return EXIT_OK


def _load_train_config(args) -> tuple[ModelConfig, TrainConfig]:
    model_over: dict = {}
    train_over: dict = {}
    if args.config:
        blob = json.loads(Path(args.config).read_text())
        model_over = blob.get("model", {})
        train_over = blob.get("train", {})
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    if args.seed is not None:
        train_over["seed"] = args.seed
    loss_over = train_over.pop("loss", {})
    mcfg = ModelConfig(**model_over)
    tcfg = TrainConfig(**train_over, loss=LossConfig(**loss_over))
    return mcfg, tcfg


def cmd_train(args) -> int:
    t0 = time.time()
    samples, vocab = read_corpus(Path(args.corpus))
    if not samples:
        raise ValueError("empty corpus")
    mcfg, tcfg = _load_train_config(args)
    if mcfg.v < vocab.size:
        mcfg = dataclasses.replace(mcfg, v=vocab.size)
    model = GridOCRModel(mcfg)
    n_hold = max(1, int(len(samples) * args.heldout_fraction))
    heldout = samples[-n_hold:] if len(samples) > n_hold else None
    train = samples[:-n_hold] if heldout else samples
    try:
        history = fit(train, model, tcfg, heldout=heldout)
    except RuntimeError as exc:
        if "non-finite" in str(exc):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    meta = {"vocab": vocab.to_json(), "history": history}
    if not args.no_rep_calibration:
        from .inference import calibrate_repetition_threshold

        histories = []
        for page in train[:12]:
            trace = greedy_decode(page.image, model, max_len=min(200, mcfg.max_len))
            histories.append(trace.max_logits)
        usable = [h for h in histories if len(h) >= 64]
        if usable:
            meta["rep_threshold"] = calibrate_repetition_threshold(usable, window=64)
            meta["rep_window"] = 64
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, meta=meta)
    hist_path = out.with_suffix(".history.csv")
    with hist_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sorted({k for row in history for k in row}))
        writer.writeheader()
        writer.writerows(history)
    _write_manifest(
        out.parent, "train",
        {"model": dataclasses.asdict(mcfg),
         "train": {**dataclasses.asdict(tcfg), "loss": dataclasses.asdict(tcfg.loss)}},
        tcfg.seed, [out, hist_path], time.time() - t0,
    )
    print(json.dumps({"checkpoint": str(out), "epochs": len(history),
                      "final": history[-1] if history else None}))
    return EXIT_OK


def _decode_one(model, vocab, image_path: Path, args, out_dir: Path) -> DecodeTrace:
    from PIL import Image

    img = Image.open(image_path)
    decay = DecayConfig(sigma=args.sigma, eta=args.eta, blank_enabled=args.blank_decay)
    trace = greedy_decode(
        np.asarray(img.convert("L"), dtype=np.float32) / np.float32(255.0),
        model,
        decay=decay,
        conf_threshold=args.conf_threshold,
        max_len=args.max_len,
        rep_threshold=args.rep_threshold,
    )
    stem = image_path.stem
    (out_dir / f"{stem}.trace.json").write_text(trace.to_json())
    (out_dir / f"{stem}.md").write_text(tokens_to_text(trace.tokens, vocab))
    return trace


def cmd_decode(args) -> int:
    t0 = time.time()
    model, meta = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.from_json(meta["vocab"])
    if args.rep_threshold is None:
        args.rep_threshold = meta.get("rep_threshold")
    src = Path(args.input)
    images = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not images:
        raise ValueError(f"no PNG pages under {src}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = []
    for i, path in enumerate(images):
        trace = _decode_one(model, vocab, path, args, out_dir)
        failed = trace.has_event("repetition_detected") or trace.hit_max_len
        flags.append((str(i // args.pages_per_doc), i % args.pages_per_doc, failed))
    rates = repetition_rates(flags)
    artifacts = sorted(out_dir.glob("*.trace.json")) + sorted(out_dir.glob("*.md"))
    _write_manifest(
        out_dir, "decode",
        {"sigma": args.sigma, "eta": args.eta, "blank_decay": args.blank_decay,
         "conf_threshold": args.conf_threshold, "max_len": args.max_len,
         "rep_threshold": args.rep_threshold},
        args.seed, artifacts, time.time() - t0,
    )
    report = {"pages": len(images), "repetition": rates}
    if args.format == "table":
        print(f"{'page_rate':>10s} {'doc_rate':>10s} {'cover_rate':>11s}")
        print(f"{rates['page_rate']:10.3f} {rates['doc_rate']:10.3f} "
              f"{rates['cover_rate']:11.3f}")
    else:
        print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    refs, vocab = read_corpus(Path(args.ref))
    pred_dir = Path(args.pred)
    if args.out is None:
        args.out = str(pred_dir / "eval")
    traces = sorted(pred_dir.glob("*.trace.json"))
    if len(traces) != len(refs):
        raise ValueError(
            f"prediction count {len(traces)} != reference count {len(refs)}"
        )
    pred_texts, pred_tok_seqs, pred_boxes = [], [], []
    ref_texts, ref_tok_seqs, ref_boxes, ref_vis = [], [], [], []
    flags = []
    for i, (tr_path, ref) in enumerate(zip(traces, refs)):
        trace = DecodeTrace.from_json(tr_path.read_text())
        pred_texts.append(tokens_to_text(trace.tokens, vocab))
        pred_tok_seqs.append([vocab.text(t) for t in trace.tokens])
        pred_boxes.append(trace.boxes)
        ref_texts.append(tokens_to_text(ref.tokens, vocab))
        ref_tok_seqs.append([vocab.text(t) for t in ref.tokens])
        ref_boxes.append(ref.boxes)
        ref_vis.append(ref.visibility)
        failed = trace.has_event("repetition_detected") or trace.hit_max_len
        flags.append((str(i // args.pages_per_doc), i % args.pages_per_doc, failed))
    report = evaluate_pages(
        pred_texts, ref_texts, pred_tok_seqs, pred_boxes,
        ref_tok_seqs, ref_boxes, ref_vis, repetition=repetition_rates(flags),
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        _write_manifest(out, "eval", {"pred": str(pred_dir), "ref": str(args.ref)},
                        None, [out / "report.json"], time.time() - t0)
    if args.format == "table":
        print(report.table_row())
    else:
        print(report.to_json())
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import SessionManager, create_app

    model, meta = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.from_json(meta["vocab"])
    manager = SessionManager(model, vocab, persist_dir=args.persist_dir)
    app = create_app(manager, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_attn(args) -> int:
    t0 = time.time()
    from PIL import Image

    model, meta = load_checkpoint(args.checkpoint)
    img = np.asarray(Image.open(args.image).convert("L"), dtype=np.float32) / 255.0
    trace = greedy_decode(img, model, max_len=args.max_len)
    if not trace.tokens:
        raise ValueError("decode emitted no tokens; nothing to dump")
    step = min(args.step, len(trace.tokens) - 1)
    out_dir = Path(args.out)
    maps = dump_attention(trace, model, img, step, out_dir=out_dir)
    artifacts = sorted(out_dir.glob("layer_*.pgm")) + sorted(out_dir.glob("layer_*.csv"))
    _write_manifest(out_dir, "attn", {"step": step, "layers": int(maps.shape[0])},
                    args.seed, artifacts, time.time() - t0)
    print(json.dumps({"layers": int(maps.shape[0]), "step": step, "out": str(out_dir)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gridocr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate a synthetic page corpus")
    p.add_argument("--pages", type=int, required=True)
    p.add_argument("--layout-mix", default="single_column=1,two_column=1,"
                   "title_block=1,table_grid=1")
    p.add_argument("--vocab-words", type=int, default=200)
    p.add_argument("--height", type=int, default=corpus_mod.DEFAULT_PAGE_H)
    p.add_argument("--width", type=int, default=corpus_mod.DEFAULT_PAGE_W)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON file with model/train sections")
    p.add_argument("--epochs", type=int)
    p.add_argument("--heldout-fraction", type=float, default=0.05)
    p.add_argument("--no-rep-calibration", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy-decode page images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.85)
    p.add_argument("--eta", type=float, default=10.0)
    p.add_argument("--blank-decay", action="store_true")
    p.add_argument("--conf-threshold", type=float, default=0.0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--rep-threshold", type=float, default=None)
    p.add_argument("--pages-per-doc", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score decoded pages against a corpus")
    p.add_argument("--pred", required=True, help="directory of *.trace.json")
    p.add_argument("--ref", required=True, help="reference corpus.jsonl")
    p.add_argument("--pages-per-doc", type=int, default=1)
    p.add_argument("--out", help="optional report directory")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the interactive session server")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--persist-dir")
    p.add_argument("--ui", help="directory with the built browser companion")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("attn", help="dump per-layer cross-attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        torch.manual_seed(getattr(args, "seed", 0) or 0)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
