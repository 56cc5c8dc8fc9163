"""Offline fixtures: a miniature bidirectional encoder saved in checkpoint
format, a decoder-only counterpart, and a deterministic sentence file."""

from __future__ import annotations

import numpy as np
import pytest
import torch

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "cat", "dog", "sat", "ran", "on", "mat", "rug",
    "bank", "river", "money", "deposit", "flow", "water", "teller",
    "##s", "##ing", "##ed",
]
HIDDEN_SIZE = 32


@pytest.fixture(scope="session")
def encoder_path(tmp_path_factory):
    from transformers import BertConfig, BertModel, BertTokenizerFast

    root = tmp_path_factory.mktemp("tiny-encoder")
    vocab_file = root / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n")
    tokenizer = BertTokenizerFast(vocab=str(vocab_file), do_lower_case=True)
    tokenizer.save_pretrained(root)

    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=HIDDEN_SIZE,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    torch.manual_seed(0)
    BertModel(config).save_pretrained(root)
    return str(root)


@pytest.fixture(scope="session")
def decoder_path(tmp_path_factory):
    from transformers import GPT2Config, GPT2Model

    root = tmp_path_factory.mktemp("tiny-decoder")
    config = GPT2Config(
        vocab_size=64, n_positions=32, n_embd=16, n_layer=1, n_head=1,
        bos_token_id=0, eos_token_id=0,
    )
    torch.manual_seed(0)
    GPT2Model(config).save_pretrained(root)
    return str(root)


@pytest.fixture(scope="session")
def sentences_path(tmp_path_factory):
    """100 deterministic sentences over the fixture vocabulary."""
    rng = np.random.default_rng(42)
    stems = ["the cat", "a dog", "the bank", "river water", "money deposit",
             "the teller", "a mat"]
    verbs = ["sat", "ran", "flow", "deposit"]
    tails = ["on the mat", "on a rug", "on the bank", "", "near the river"]
    lines = []
    for _ in range(100):
        line = " ".join(
            part
            for part in (
                stems[rng.integers(len(stems))],
                verbs[rng.integers(len(verbs))],
                tails[rng.integers(len(tails))],
            )
            if part
        )
        lines.append(line)
    path = tmp_path_factory.mktemp("text") / "sentences.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)
