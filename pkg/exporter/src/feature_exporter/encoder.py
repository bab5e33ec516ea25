"""Frozen encoder loading and tiny local model construction.

The exporter runs any locally available Hugging Face encoder directory
(saved with ``save_pretrained``) whose tokenizer is a fast tokenizer with
offset mapping.  ``make_tiny_encoder`` builds a small randomly initialized
BERT-style encoder plus a WordPiece tokenizer trained on the corpus text,
so tests and demos run fully offline; real encoders drop in the same way.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Iterable

import torch
from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, trainers
from transformers import AutoModel, BertConfig, BertModel, PreTrainedTokenizerFast

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def train_wordpiece_tokenizer(texts: Iterable[str], vocab_size: int = 400) -> PreTrainedTokenizerFast:
    """WordPiece tokenizer trained on the corpus, with offset mapping."""
    tokenizer = Tokenizer(models.WordPiece(unk_token="[UNK]"))
    tokenizer.normalizer = normalizers.BertNormalizer(lowercase=True)
    tokenizer.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    trainer = trainers.WordPieceTrainer(vocab_size=vocab_size, special_tokens=SPECIAL_TOKENS)
    tokenizer.train_from_iterator(list(texts), trainer)
    return PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )


def make_tiny_encoder(
    out_dir: str | Path,
    corpus_texts: Iterable[str],
    hidden_size: int = 32,
    num_layers: int = 2,
    seed: int = 0,
) -> Path:
    """Randomly initialized frozen BERT-style encoder saved to ``out_dir``."""
    out_dir = Path(out_dir)
    tokenizer = train_wordpiece_tokenizer(corpus_texts)
    config = BertConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=hidden_size,
        num_hidden_layers=num_layers,
        num_attention_heads=max(2, hidden_size // 16),
        intermediate_size=hidden_size * 2,
        max_position_embeddings=512,
    )
    torch.manual_seed(seed)
    model = BertModel(config)
    model.eval()
    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)
    log.info("tiny encoder (hidden=%d, layers=%d) saved to %s", hidden_size, num_layers, out_dir)
    return out_dir


def load_encoder(model_dir: str | Path):
    model_dir = Path(model_dir)
    if not model_dir.exists():
        raise FileNotFoundError(f"encoder directory not found: {model_dir}")
    model = AutoModel.from_pretrained(model_dir)
    model.eval()
    tokenizer = PreTrainedTokenizerFast.from_pretrained(model_dir)
    return model, tokenizer


def tokenizer_fingerprint(model_dir: str | Path) -> str:
    """SHA-256 over the serialized tokenizer definition."""
    payload = (Path(model_dir) / "tokenizer.json").read_bytes()
    return hashlib.sha256(payload).hexdigest()


@torch.no_grad()
def encode_windows(model, token_id_batches: list[list[int]], batch_size: int = 8):
    """Last hidden states per window, batched with attention masking."""
    outputs = []
    for lo in range(0, len(token_id_batches), batch_size):
        chunk = token_id_batches[lo : lo + batch_size]
        width = max(len(ids) for ids in chunk)
        input_ids = torch.zeros((len(chunk), width), dtype=torch.long)
        attention = torch.zeros((len(chunk), width), dtype=torch.long)
        for row, ids in enumerate(chunk):
            input_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            attention[row, : len(ids)] = 1
        hidden = model(input_ids=input_ids, attention_mask=attention).last_hidden_state
        for row, ids in enumerate(chunk):
            outputs.append(hidden[row, : len(ids)].numpy().astype("float32"))
    return outputs
