"""Export per-span next-token conditionals from a real seq2seq model.

For each sample and each of its top-k predicted spans, the seq2seq model is
teacher-forced along the reference response; the next-token distribution at
every position is written as a conditional-table row keyed by
``"<span text>||<prefix tokens>"``, the state-key convention of the
consumer's table-driven generation model (full-prefix keying).  Rows keep
the ``top_m`` most likely pieces plus the reference piece; the remaining
probability mass is lumped into ``<unk>`` so every row stays normalized.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import torch
from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

from .corpus_io import extract_samples, load_dialogs, load_documents

log = logging.getLogger(__name__)

UNK_LUMP = "<unk>"


def _load_nbest(path: str | Path) -> dict[str, list[dict]]:
    return {record["sample_id"]: record["hypotheses"] for record in json.loads(Path(path).read_text())}


@torch.no_grad()
def export_span_conditionals(
    documents_path: str | Path,
    dialogs_path: str | Path,
    nbest_path: str | Path,
    model_dir: str | Path,
    out_path: str | Path,
    k: int = 5,
    top_m: int = 8,
    include_followups: bool = False,
) -> dict:
    """Write a conditional-table JSON consumable as a generation model."""
    docs_by_id = load_documents(documents_path)
    dialogs = load_dialogs(dialogs_path)
    samples = extract_samples(docs_by_id, dialogs, include_followups=include_followups)
    nbest = _load_nbest(nbest_path)

    model = AutoModelForSeq2SeqLM.from_pretrained(model_dir)
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(model_dir)
    eos_token = tokenizer.eos_token or tokenizer.sep_token
    if eos_token is None:
        raise ValueError("seq2seq tokenizer defines no EOS token")

    vocab: set[str] = {eos_token, UNK_LUMP}
    tables: dict[str, dict[str, float]] = {"*": {UNK_LUMP: 0.5, eos_token: 0.5}}

    for sample in samples:
        if sample.sample_id not in nbest:
            continue
        doc = docs_by_id[sample.doc_id]
        context = " ".join(f"{role}: {utt}" for role, utt in sample.context_turns)
        reference_ids = tokenizer(sample.target_utterance, add_special_tokens=False)["input_ids"]
        target_ids = reference_ids + [tokenizer.convert_tokens_to_ids(eos_token)]
        for hyp in nbest[sample.sample_id][:k]:
            span_text = hyp["text"]
            source = f"{context} {tokenizer.sep_token or eos_token} {doc['doc_id']} " \
                     f"{tokenizer.sep_token or eos_token} {span_text}"
            encoder_ids = tokenizer(source, return_tensors="pt", truncation=True, max_length=512)
            decoder_input = torch.tensor([[model.config.decoder_start_token_id] + target_ids[:-1]])
            logits = model(
                input_ids=encoder_ids["input_ids"],
                attention_mask=encoder_ids["attention_mask"],
                decoder_input_ids=decoder_input,
            ).logits[0]
            probs = torch.softmax(logits, dim=-1)
            prefix_tokens: list[str] = []
            for pos, target_id in enumerate(target_ids):
                row = probs[pos]
                keep = set(torch.topk(row, min(top_m, row.shape[0])).indices.tolist())
                keep.add(target_id)
                entries = {}
                kept_mass = 0.0
                for token_id in sorted(keep):
                    piece = tokenizer.convert_ids_to_tokens([token_id])[0]
                    p = float(row[token_id])
                    entries[piece] = entries.get(piece, 0.0) + p
                    kept_mass += p
                    vocab.add(piece)
                entries[UNK_LUMP] = entries.get(UNK_LUMP, 0.0) + max(0.0, 1.0 - kept_mass)
                key = f"{span_text}||{' '.join(prefix_tokens)}"
                tables[key] = entries
                prefix_tokens.append(tokenizer.convert_ids_to_tokens([target_id])[0])

    spec = {"vocab": sorted(vocab), "eos": eos_token, "context_order": None, "tables": tables}
    Path(out_path).write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d conditional rows over %d pieces -> %s", len(tables), len(vocab), out_path)
    return spec
