"""Pipeline driver: every stage as a subcommand over JSON/binary artifacts.

Stages and their artifacts::

    fixtures  -> documents.json dialogs.json toy_model.json config.json
    prepare   -> samples.json features.sgf(+.json sidecar)
    train     -> head.ckpt head.ckpt.trace.json
    decode    -> nbest.json
    ensemble  -> nbest.json (mixed)
    generate  -> responses.json
    eval      -> report.json

Every artifact gets a ``<name>.manifest.json`` recording the command, the
package version, the effective config section and the SHA-256 of every
input, so a rerun with identical inputs and seed is byte-identical.

Exit codes: 0 ok, 1 usage/configuration, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import __version__
from .config import PipelineConfig, add_config_flags, apply_flag_overrides, load_config
from .corpus import extract_samples, load_corpus, samples_from_json, samples_to_json
from .errors import ConfigurationError, DataError, SpangroundError, UsageError
from .features import (
    read_feature_file,
    synthetic_features,
    synthetic_model_id,
    write_feature_file,
)
from .fixtures import write_fixture
from .generation import (
    GROUNDING_PREDICTED,
    GROUNDING_REFERENCE,
    MixtureGenerationModel,
    SpanMixtureState,
    TableGenerationModel,
    beam_search,
    build_input,
)
from .metrics import evaluation_report
from .span_decoding import (
    EnsembleConfig,
    EnsembleMember,
    bma_ensemble,
    decode_document,
    nbest_to_json,
    read_nbest_file,
    write_nbest_file,
)
from .span_heads import (
    TrainConfig,
    TrainingExample,
    full_pair_mask,
    load_head,
    make_head,
    phrase_restriction_mask,
    save_head,
    train_head,
)
from .windowing import HashTokenizer, assign_targets, make_windows

log = logging.getLogger("spanground")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(artifact: Path, command: str, inputs: Iterable[Path], config_section: dict) -> None:
    manifest = {
        "artifact": artifact.name,
        "command": command,
        "version": __version__,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "config": config_section,
    }
    _write_json(Path(str(artifact) + ".manifest.json"), manifest)


def ordered_parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Map preserving input order; sequential when workers <= 1."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_config_with_flags(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    apply_flag_overrides(cfg, args)
    cfg.validate()
    return cfg


def _load_corpus_from(cfg: PipelineConfig):
    doc_path = cfg.resolve(cfg.paths.documents)
    dlg_path = cfg.resolve(cfg.paths.dialogs)
    docs, dialogs = load_corpus(doc_path, dlg_path)
    return docs, dialogs, [doc_path, dlg_path]


def _group_windows(feature_file, samples):
    grouped = feature_file.windows_by_sample()
    missing = [s.sample_id for s in samples if s.sample_id not in grouped]
    if missing:
        raise DataError(
            f"feature file lacks windows for samples {missing[:3]}... "
            f"(regenerate with the prepare command)"
        )
    return grouped


def _masks_for(windows, doc, restricted: bool):
    if restricted:
        return [phrase_restriction_mask(w, doc.phrases) for w in windows]
    return [full_pair_mask(w) for w in windows]


# --- subcommands --------------------------------------------------------------

def cmd_fixtures(args) -> int:
    manifest = write_fixture(args.out, args.kind)
    log.info("fixture %s written to %s: %s", args.kind, args.out, manifest)
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_config_with_flags(args)
    docs, dialogs, corpus_paths = _load_corpus_from(cfg)
    docs_by_id = {d.doc_id: d for d in docs}

    extraction = extract_samples(docs, dialogs, include_followups=args.include_followups)
    log.info("extracted %d samples (%d skipped)", len(extraction.samples), len(extraction.skipped))

    samples_path = Path(args.samples_out)
    payload = {
        "samples": samples_to_json(extraction, docs),
        "skip_report": [
            {"dialog_id": d, "turn": t, "reason": r} for d, t, r in extraction.skipped
        ],
        "include_followups": args.include_followups,
    }
    _write_json(samples_path, payload)
    write_manifest(
        samples_path,
        "prepare",
        corpus_paths,
        {"include_followups": args.include_followups, "windowing": vars(cfg.windowing)},
    )

    if args.features_out:
        tokenizer = HashTokenizer()
        seed = args.feature_seed if args.feature_seed is not None else cfg.featurizer.seed
        dim = cfg.featurizer.feature_dim
        model_id = args.model_id or synthetic_model_id(dim, seed)
        feature_windows = []
        for sample in extraction.samples:
            doc = docs_by_id[sample.doc_id]
            for desc in make_windows(sample, doc, tokenizer, cfg.windowing.max_len, cfg.windowing.stride):
                feature_windows.append(synthetic_features(desc, sample, doc, dim, seed))
        features_path = Path(args.features_out)
        write_feature_file(features_path, feature_windows, model_id, tokenizer.fingerprint)
        write_manifest(
            features_path,
            "prepare",
            corpus_paths,
            {"featurizer": {"feature_dim": dim, "seed": seed, "model_id": model_id},
             "windowing": vars(cfg.windowing)},
        )
        log.info("wrote %d windows to %s (model_id=%s)", len(feature_windows), features_path, model_id)
    return 0


def _read_samples_file(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"samples file not found: {path} (produce it with the prepare command)")
    payload = json.loads(path.read_text(encoding="utf-8"))
    return samples_from_json(payload["samples"]), payload


def cmd_train(args) -> int:
    cfg = _load_config_with_flags(args)
    docs, _, corpus_paths = _load_corpus_from(cfg)
    docs_by_id = {d.doc_id: d for d in docs}
    samples, _ = _read_samples_file(args.samples)
    feature_file = read_feature_file(args.features)
    grouped = _group_windows(feature_file, samples)

    dataset = []
    for sample in samples:
        doc = docs_by_id[sample.doc_id]
        windows = grouped[sample.sample_id]
        masks = _masks_for(windows, doc, cfg.head.restricted)
        for window, mask in zip(windows, masks):
            target = assign_targets(window.descriptor, sample.reference_span)
            if cfg.head.kind == "biaffine" and target not in mask.valid_pairs:
                # joint pair support cannot represent this cover; fall back to BOS
                target = (0, 0)
            if cfg.head.kind == "independent" and cfg.head.restricted:
                if target[0] not in mask.valid_starts or target[1] not in mask.valid_ends:
                    target = (0, 0)
            dataset.append(TrainingExample(window=window, mask=mask, target=target))

    head = make_head(cfg.head.kind, feature_file.feature_dim, seed=cfg.head.seed)
    train_cfg = TrainConfig(
        lr=cfg.head.lr,
        epochs=cfg.head.epochs,
        batch_size=cfg.head.batch_size,
        seed=cfg.head.seed,
        momentum=cfg.head.momentum,
        clip_norm=cfg.head.clip_norm,
        restricted=cfg.head.restricted,
    )
    result = train_head(head, dataset, train_cfg)
    out = Path(args.head_out)
    save_head(out, result.head)
    _write_json(Path(str(out) + ".trace.json"), {"per_epoch_mean_ce": result.loss_trace})
    write_manifest(out, "train", corpus_paths + [Path(args.features), Path(args.samples)], vars(cfg.head))
    if result.loss_trace:
        log.info("trained %s head: first epoch CE %.4f, last %.4f",
                 cfg.head.kind, result.loss_trace[0], result.loss_trace[-1])
    return 0


def cmd_decode(args) -> int:
    cfg = _load_config_with_flags(args)
    docs, _, corpus_paths = _load_corpus_from(cfg)
    docs_by_id = {d.doc_id: d for d in docs}
    samples, _ = _read_samples_file(args.samples)
    head_path = Path(args.head)
    if not head_path.exists():
        raise DataError(f"head checkpoint not found: {head_path} (produce it with the train command)")
    head = load_head(head_path)
    feature_file = read_feature_file(args.features)
    grouped = _group_windows(feature_file, samples)

    def decode_one(sample):
        doc = docs_by_id[sample.doc_id]
        windows = grouped[sample.sample_id]
        masks = _masks_for(windows, doc, cfg.head.restricted)
        posterior = decode_document(
            head, windows, masks, cfg.decode.n_best,
            restricted=cfg.head.restricted, doc_text=doc.text,
        )
        return nbest_to_json(sample.sample_id, posterior)

    entries = ordered_parallel_map(decode_one, samples, args.workers)
    out = Path(args.out)
    write_nbest_file(out, entries)
    write_manifest(
        out,
        "decode",
        corpus_paths + [Path(args.features), Path(args.samples), head_path],
        {"n_best": cfg.decode.n_best, "restricted": cfg.head.restricted},
    )
    log.info("decoded %d samples -> %s", len(entries), out)
    return 0


def cmd_ensemble(args) -> int:
    cfg = _load_config_with_flags(args)
    nbest_paths = {}
    for spec in args.nbest:
        if "=" not in spec:
            raise UsageError(f"--nbest expects model_id=path, got {spec!r}")
        model_id, path = spec.split("=", 1)
        nbest_paths[model_id] = Path(path)
    if args.ensemble_config:  # standalone {members, n} file overrides the config section
        ensemble_cfg, n = EnsembleConfig.from_json(args.ensemble_config)
        member_list = list(ensemble_cfg.members)
        cfg.ensemble.n = n
    else:
        member_list = [EnsembleMember(m["model_id"], float(m["f1"])) for m in cfg.ensemble.members]
    if not member_list:
        raise ConfigurationError("ensemble members are empty (config section or --ensemble-config)")
    for member in member_list:
        if member.model_id not in nbest_paths:
            raise DataError(
                f"no n-best file for ensemble member {member.model_id!r} "
                f"(pass --nbest {member.model_id}=path from the decode command)"
            )
    members = member_list
    ensemble_cfg = EnsembleConfig(members=tuple(members))

    per_member = {m.model_id: read_nbest_file(nbest_paths[m.model_id]) for m in members}
    first = per_member[members[0].model_id]
    sample_ids = list(first.keys())
    entries = []
    for sample_id in sample_ids:
        posteriors = []
        for m in members:
            if sample_id not in per_member[m.model_id]:
                raise DataError(f"member {m.model_id!r} n-best lacks sample {sample_id!r}")
            posteriors.append(per_member[m.model_id][sample_id])
        mixed = bma_ensemble(posteriors, ensemble_cfg, cfg.ensemble.n)
        entries.append(nbest_to_json(sample_id, mixed))
    out = Path(args.out)
    write_nbest_file(out, entries)
    write_manifest(
        out,
        "ensemble",
        list(nbest_paths.values()),
        {"members": [vars(m) for m in members], "n": cfg.ensemble.n,
         "priors": list(ensemble_cfg.priors)},
    )
    log.info("ensembled %d members over %d samples -> %s", len(members), len(entries), out)
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config_with_flags(args)
    docs, _, corpus_paths = _load_corpus_from(cfg)
    docs_by_id = {d.doc_id: d for d in docs}
    samples, _ = _read_samples_file(args.samples)

    toy_path = Path(args.toy_model) if args.toy_model else cfg.resolve(cfg.toy_model or "toy_model.json")
    if not toy_path.exists():
        raise DataError(f"generation model spec not found: {toy_path}")
    model = TableGenerationModel.from_json(toy_path)

    gen = cfg.generation
    nbest = None
    inputs = [toy_path, Path(args.samples)] + corpus_paths
    if gen.mode == GROUNDING_PREDICTED or gen.marginalize_k > 1:
        if not args.nbest:
            raise UsageError("generation in predicted/marginalized mode requires --nbest")
        nbest = read_nbest_file(args.nbest)
        inputs.append(Path(args.nbest))

    def generate_one(sample):
        doc = docs_by_id[sample.doc_id]
        if gen.marginalize_k > 1:
            if sample.sample_id not in nbest:
                raise DataError(f"no n-best entry for sample {sample.sample_id!r}")
            mixture = SpanMixtureState.from_posterior(sample, doc, nbest[sample.sample_id], k=gen.marginalize_k)
            mix_model = MixtureGenerationModel(model, mixture)
            best, _ = beam_search(mix_model, mixture.inputs[0], gen.beam, gen.max_len, gen.rep_penalty)
            span_used = mixture.span_texts[0]
        else:
            built = build_input(sample, doc, gen.mode, nbest=nbest, max_input_tokens=gen.max_input_tokens)
            best, _ = beam_search(model, built, gen.beam, gen.max_len, gen.rep_penalty)
            span_used = built.grounding
        response = " ".join(t for t in best.tokens if t != model.eos)
        return {
            "sample_id": sample.sample_id,
            "response": response,
            "score": best.score,
            "beam": gen.beam,
            "rep_penalty": gen.rep_penalty,
            "grounding_mode": gen.mode if gen.marginalize_k <= 1 else f"marginalized_top{gen.marginalize_k}",
            "span_used": span_used,
        }

    records = ordered_parallel_map(generate_one, samples, args.workers)
    out = Path(args.out)
    _write_json(out, records)
    write_manifest(out, "generate", inputs, vars(gen))
    log.info("generated %d responses -> %s", len(records), out)
    return 0


def cmd_eval(args) -> int:
    samples, payload = _read_samples_file(args.samples)
    reference_texts = {r["sample_id"]: r["reference_text"] for r in payload["samples"]}
    nbest = read_nbest_file(args.nbest)
    inputs = [Path(args.samples), Path(args.nbest)]

    predictions, references, nbest_lists = [], [], []
    for sample in samples:
        if sample.sample_id not in nbest:
            raise DataError(f"n-best file lacks sample {sample.sample_id!r} (rerun decode)")
        posterior = nbest[sample.sample_id]
        texts = [h.text or "" for h in posterior.hypotheses]
        predictions.append(texts[0] if texts else "")
        nbest_lists.append(texts)
        references.append(reference_texts[sample.sample_id])

    responses = response_refs = None
    if args.generated:
        generated = {r["sample_id"]: r for r in json.loads(Path(args.generated).read_text(encoding="utf-8"))}
        responses, response_refs = [], []
        for sample in samples:
            if sample.sample_id not in generated:
                raise DataError(f"generation output lacks sample {sample.sample_id!r} (rerun generate)")
            responses.append(generated[sample.sample_id]["response"])
            response_refs.append(sample.target_utterance)
        inputs.append(Path(args.generated))

    report = evaluation_report(
        predictions, references, nbest_lists=nbest_lists,
        responses=responses, response_references=response_refs,
    )
    out = Path(args.out)
    _write_json(out, report)
    write_manifest(out, "eval", inputs, {})
    log.info("report: %s", json.dumps(report, sort_keys=True))
    return 0


# --- argument wiring -----------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="spanground", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="emit a synthetic fixture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="pipeline", choices=["pipeline", "separable", "adversarial"])
    p.set_defaults(fn=cmd_fixtures)

    p = sub.add_parser("prepare", help="extract samples and synthesize features")
    p.add_argument("--config", required=True)
    p.add_argument("--samples-out", required=True)
    p.add_argument("--features-out")
    p.add_argument("--include-followups", type=lambda v: v.lower() in ("true", "1", "yes"), default=True, metavar="BOOL")
    p.add_argument("--model-id")
    p.add_argument("--feature-seed", type=int)
    add_config_flags(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train a span head on feature files")
    p.add_argument("--config", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--head-out", required=True)
    add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="produce n-best span lists")
    p.add_argument("--config", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    add_config_flags(p)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("ensemble", help="mix member n-best lists with model priors")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble-config", help="standalone {members, n} JSON overriding the config section")
    p.add_argument("--nbest", action="append", default=[], metavar="MODEL_ID=PATH")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("generate", help="decode responses with the generation model")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--nbest")
    p.add_argument("--toy-model")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    add_config_flags(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="score spans and responses")
    p.add_argument("--samples", required=True)
    p.add_argument("--nbest", required=True)
    p.add_argument("--generated")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except SpangroundError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
