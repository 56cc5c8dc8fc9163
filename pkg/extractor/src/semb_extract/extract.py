"""Run a bidirectional encoder over plain text and dump last-hidden-layer
embeddings as a `.semb` stream.

Token mode emits one record per non-special token occurrence keyed by
the tokenizer's token id. Word mode emits one record per
whitespace-delimited word occurrence, keyed by a generated word
vocabulary (written as a TSV sidecar); each word embedding is the mean
of its constituent token embeddings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

_WORD_RE = re.compile(r"\S+")


class ModelLoadFailure(Exception):
    """The model identifier cannot be used as a bidirectional encoder."""


class EmptyInput(Exception):
    """The input text contains no passages."""


@dataclass
class ExtractionJob:
    model: str
    input_path: str
    output_path: str
    mode: str = "token"            # "token" or "word"
    max_records: int | None = None
    batch_size: int = 16
    device: str = "cpu"

    def __post_init__(self):
        if self.mode not in ("token", "word"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_records is not None and self.max_records < 1:
            raise ValueError("max_records must be >= 1 when set")


def _reject_decoder_only(config) -> None:
    """Decoder-only architectures have no bidirectional context to dump."""
    try:
        from transformers.models.auto.modeling_auto import (
            MODEL_FOR_CAUSAL_LM_MAPPING_NAMES,
            MODEL_FOR_MASKED_LM_MAPPING_NAMES,
        )

        causal = config.model_type in MODEL_FOR_CAUSAL_LM_MAPPING_NAMES
        masked = config.model_type in MODEL_FOR_MASKED_LM_MAPPING_NAMES
        if causal and not masked:
            raise ModelLoadFailure(
                f"{config.model_type!r} is a decoder-only architecture; "
                "only bidirectional encoders are supported"
            )
    except ImportError:
        if getattr(config, "is_decoder", False):
            raise ModelLoadFailure("decoder models are not supported")


def _load_encoder(model_id: str, device: str):
    from transformers import AutoConfig, AutoModel, AutoTokenizer

    try:
        config = AutoConfig.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoadFailure(f"cannot load config for {model_id!r}: {exc}") from exc
    _reject_decoder_only(config)
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id, use_fast=True)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoadFailure(f"cannot load {model_id!r}: {exc}") from exc
    model.to(device)
    model.eval()
    return tokenizer, model


def _word_spans(line: str) -> list[tuple[int, int, str]]:
    return [(m.start(), m.end(), m.group()) for m in _WORD_RE.finditer(line)]


def extract(job: ExtractionJob) -> int:
    """Run the job; returns the number of records written.

    The output header's dim equals the model hidden size; the record
    count is patched in after the pass. Deterministic for a fixed model,
    input, and batch size.
    """
    lines = Path(job.input_path).read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise EmptyInput(f"{job.input_path} contains no passages")

    tokenizer, model = _load_encoder(job.model, job.device)
    hidden_size = int(model.config.hidden_size)
    word_vocab: dict[str, int] = {}
    written = 0

    with open(job.output_path, "wb") as sink, torch.no_grad():
        from . import semb_writer

        semb_writer.write_header(sink, hidden_size)
        done = False
        for start in range(0, len(lines), job.batch_size):
            if done:
                break
            batch = lines[start : start + job.batch_size]
            encoded = tokenizer(
                batch,
                padding=True,
                truncation=True,
                return_tensors="pt",
                return_special_tokens_mask=True,
                return_offsets_mapping=(job.mode == "word"),
            )
            offsets = encoded.pop("offset_mapping", None)
            special = encoded.pop("special_tokens_mask")
            encoded = {k: v.to(job.device) for k, v in encoded.items()}
            hidden = model(**encoded).last_hidden_state.cpu().numpy().astype(np.float32)
            attention = encoded["attention_mask"].cpu().numpy()
            input_ids = encoded["input_ids"].cpu().numpy()
            special = special.numpy()

            for row in range(len(batch)):
                keep = (attention[row] == 1) & (special[row] == 0)
                if job.mode == "token":
                    for pos in np.flatnonzero(keep):
                        semb_writer.write_record(
                            sink, int(input_ids[row, pos]), hidden[row, pos]
                        )
                        written += 1
                        if job.max_records is not None and written >= job.max_records:
                            done = True
                            break
                else:
                    token_spans = offsets[row].numpy()
                    for w_start, w_end, surface in _word_spans(batch[row]):
                        overlap = (
                            keep
                            & (token_spans[:, 0] < w_end)
                            & (token_spans[:, 1] > w_start)
                        )
                        positions = np.flatnonzero(overlap)
                        if positions.size == 0:
                            continue  # word lost to truncation
                        mean = hidden[row, positions].mean(axis=0)
                        word_id = word_vocab.setdefault(surface, len(word_vocab))
                        semb_writer.write_record(sink, word_id, mean)
                        written += 1
                        if job.max_records is not None and written >= job.max_records:
                            done = True
                            break
                if done:
                    break
        semb_writer.patch_record_count(sink, written)

    if job.mode == "word":
        sidecar = Path(job.output_path).with_suffix("").as_posix() + ".vocab.tsv"
        with open(sidecar, "w", encoding="utf-8") as handle:
            for surface, word_id in sorted(word_vocab.items(), key=lambda kv: kv[1]):
                handle.write(f"{word_id}\t{surface}\n")
    return written
