"""Shared fixtures: the desk-scale trained model used by the acceptance
suite. Training takes ~30 minutes on one CPU core, so the checkpoint is
cached on disk keyed by its settings; delete .acceptance_cache to force a
fresh run."""

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from gridocr.corpus import Vocabulary, generate_corpus
from gridocr.inference import calibrate_repetition_threshold
from gridocr.model import GridOCRModel, ModelConfig, load_checkpoint, save_checkpoint
from gridocr.training import LossConfig, TrainConfig, fit

CACHE_DIR = Path(__file__).resolve().parent / ".acceptance_cache"

DESK_SETTINGS = {
    "vocab_words": 200,
    "corpus_seed": 2024,
    "train_pages": 2000,
    "heldout_pages": 150,
    "page_h": 224,
    "page_w": 160,
    "model": {"v": 256},  # all other fields are ModelConfig defaults
    "train": {
        "epochs": 30,
        "batch_size": 12,
        "seed": 11,
        "pos_samples": 28,
        "kappa": 0.5,
        "loss": {"init_span": 32, "theta": 2.0},
    },
    "rep_window": 64,
}


def _settings_key() -> str:
    blob = json.dumps(DESK_SETTINGS, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def desk_vocab() -> Vocabulary:
    return Vocabulary.build(DESK_SETTINGS["vocab_words"], seed=0)


def desk_pages(vocab: Vocabulary):
    s = DESK_SETTINGS
    rng = np.random.default_rng(s["corpus_seed"])
    pages = generate_corpus(
        s["train_pages"] + s["heldout_pages"], rng, vocab,
        height=s["page_h"], width=s["page_w"],
    )
    return pages[: s["train_pages"]], pages[s["train_pages"] :]


@pytest.fixture(scope="session")
def desk_model():
    """(model, vocab, meta) trained on the 2000-page synthetic corpus."""
    CACHE_DIR.mkdir(exist_ok=True)
    ckpt_path = CACHE_DIR / f"desk_{_settings_key()}.pt"
    vocab = desk_vocab()
    if ckpt_path.exists():
        model, meta = load_checkpoint(ckpt_path)
        return model, vocab, meta

    s = DESK_SETTINGS
    train, heldout = desk_pages(vocab)
    torch.manual_seed(s["train"]["seed"])
    model = GridOCRModel(ModelConfig(**s["model"]))
    tcfg = TrainConfig(
        epochs=s["train"]["epochs"],
        batch_size=s["train"]["batch_size"],
        seed=s["train"]["seed"],
        pos_samples=s["train"]["pos_samples"],
        kappa=s["train"]["kappa"],
        loss=LossConfig(**s["train"]["loss"]),
    )
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    t0 = time.time()
    history = fit(train, model, tcfg, heldout=heldout[:40])
    train_seconds = time.time() - t0

    # calibrate the repetition detector on the raw max-logit series of
    # clean decodes over training pages
    from gridocr.inference import DecayConfig, greedy_decode

    histories = []
    for page in train[:20]:
        trace = greedy_decode(page.image, model, DecayConfig(sigma=0.85),
                              max_len=170)
        histories.append(trace.max_logits)
    rep_threshold = calibrate_repetition_threshold(
        [h for h in histories if len(h) >= s["rep_window"]],
        window=s["rep_window"], percentile=1.0,
    )

    meta = {
        "vocab": vocab.to_json(),
        "history": history,
        "train_seconds": train_seconds,
        "rep_threshold": rep_threshold,
        "rep_window": s["rep_window"],
        "settings": DESK_SETTINGS,
    }
    tmp = ckpt_path.with_suffix(".tmp")
    save_checkpoint(model, tmp, meta=meta)
    tmp.rename(ckpt_path)
    return model, vocab, meta
