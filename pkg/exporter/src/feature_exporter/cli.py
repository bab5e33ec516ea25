"""Exporter CLI: feature export, seq2seq conditional export, tiny local models.

    feature-exporter make-tiny-encoder --documents docs.json --out enc/
    feature-exporter export-features --documents docs.json --dialogs dlg.json \
        --model enc/ --out features.sgf --max-len 128 --stride 32
    feature-exporter make-tiny-seq2seq --documents docs.json --out s2s/
    feature-exporter export-generation-tables --documents docs.json \
        --dialogs dlg.json --nbest nbest.json --model s2s/ --out tables.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .export import export_features

log = logging.getLogger("feature_exporter")


def cmd_export_features(args) -> int:
    export_features(
        args.documents,
        args.dialogs,
        args.model,
        args.out,
        max_len=args.max_len,
        stride=args.stride,
        include_followups=args.include_followups,
        batch_size=args.batch_size,
        model_id=args.model_id,
    )
    return 0


def cmd_make_tiny_encoder(args) -> int:
    from .encoder import make_tiny_encoder

    docs = json.loads(Path(args.documents).read_text())
    make_tiny_encoder(
        args.out,
        [d["text"] for d in docs],
        hidden_size=args.hidden_size,
        num_layers=args.layers,
        seed=args.seed,
    )
    return 0


def cmd_make_tiny_seq2seq(args) -> int:
    import torch
    from transformers import BartConfig, BartForConditionalGeneration

    from .encoder import train_wordpiece_tokenizer

    docs = json.loads(Path(args.documents).read_text())
    tokenizer = train_wordpiece_tokenizer([d["text"] for d in docs])
    tokenizer.add_special_tokens({"bos_token": "[CLS]", "eos_token": "[SEP]"})
    config = BartConfig(
        vocab_size=tokenizer.vocab_size,
        d_model=args.hidden_size,
        encoder_layers=1,
        decoder_layers=1,
        encoder_attention_heads=2,
        decoder_attention_heads=2,
        encoder_ffn_dim=args.hidden_size * 2,
        decoder_ffn_dim=args.hidden_size * 2,
        max_position_embeddings=512,
        pad_token_id=tokenizer.pad_token_id,
        bos_token_id=tokenizer.cls_token_id,
        eos_token_id=tokenizer.sep_token_id,
        decoder_start_token_id=tokenizer.cls_token_id,
        forced_eos_token_id=None,
    )
    torch.manual_seed(args.seed)
    model = BartForConditionalGeneration(config)
    model.eval()
    model.save_pretrained(args.out)
    tokenizer.save_pretrained(args.out)
    log.info("tiny seq2seq saved to %s", args.out)
    return 0


def cmd_export_generation_tables(args) -> int:
    from .seq2seq_tables import export_span_conditionals

    export_span_conditionals(
        args.documents,
        args.dialogs,
        args.nbest,
        args.model,
        args.out,
        k=args.k,
        top_m=args.top_m,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feature-exporter", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-features", help="run a frozen encoder over prepared windows")
    p.add_argument("--documents", required=True)
    p.add_argument("--dialogs", required=True)
    p.add_argument("--model", required=True, help="local encoder directory")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--include-followups", type=lambda v: v.lower() in ("true", "1", "yes"), default=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--model-id")
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("make-tiny-encoder", help="build a small random local encoder for offline runs")
    p.add_argument("--documents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_tiny_encoder)

    p = sub.add_parser("make-tiny-seq2seq", help="build a small random local seq2seq model")
    p.add_argument("--documents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_tiny_seq2seq)

    p = sub.add_parser("export-generation-tables", help="export span conditionals from a seq2seq model")
    p.add_argument("--documents", required=True)
    p.add_argument("--dialogs", required=True)
    p.add_argument("--nbest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--top-m", type=int, default=8)
    p.set_defaults(fn=cmd_export_generation_tables)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
