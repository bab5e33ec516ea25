#!/usr/bin/env python3
"""Desk-scale ablation grid over the span selection and generation knobs.

Sweeps head kind x phrase restriction for span selection, then beam size
and repetition penalty for generation on the best selection run, and prints
one result row per configuration.

    python scripts/ablation_grid.py --kind pipeline
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from spanground.cli import main as spanground


def sh(*argv):
    code = spanground([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def run_selection(work, cfg, head, restricted):
    tag = f"{head}_{'r1' if restricted else 'r0'}"
    sh("train", "--config", cfg, "--features", work / "train.sgf", "--samples", work / "train.json",
       "--head-out", work / f"{tag}.ckpt", "--head.kind", head, "--head.restricted", str(restricted).lower())
    sh("decode", "--config", cfg, "--features", work / "eval.sgf", "--samples", work / "eval.json",
       "--head", work / f"{tag}.ckpt", "--out", work / f"nbest_{tag}.json",
       "--head.kind", head, "--head.restricted", str(restricted).lower())
    sh("eval", "--samples", work / "eval.json", "--nbest", work / f"nbest_{tag}.json",
       "--out", work / f"report_{tag}.json")
    return json.loads((work / f"report_{tag}.json").read_text()), tag


def run_generation(work, cfg, fx, nbest, beam, rep_penalty):
    out = work / f"responses_b{beam}_p{rep_penalty}.json"
    sh("generate", "--config", cfg, "--samples", work / "eval.json", "--nbest", nbest,
       "--toy-model", fx / "toy_model.json", "--out", out,
       "--generation.beam", beam, "--generation.rep_penalty", rep_penalty)
    sh("eval", "--samples", work / "eval.json", "--nbest", nbest, "--generated", out,
       "--out", work / "gen_report.json")
    return json.loads((work / "gen_report.json").read_text())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", default="pipeline", choices=["separable", "pipeline"])
    parser.add_argument("--workdir", default=None)
    args = parser.parse_args()

    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="spanground-grid-"))
    work.mkdir(parents=True, exist_ok=True)
    fx = work / "fx"
    sh("fixtures", "--out", fx, "--kind", args.kind)
    cfg = fx / "config.json"
    sh("prepare", "--config", cfg, "--samples-out", work / "train.json",
       "--features-out", work / "train.sgf", "--include-followups", "true")
    sh("prepare", "--config", cfg, "--samples-out", work / "eval.json",
       "--features-out", work / "eval.sgf", "--include-followups", "false")

    print(f"\n== span selection ({args.kind}) ==")
    print(f"{'head':<14}{'restricted':<12}{'EM':>8}{'F1':>8}{'EM@5':>8}")
    best_tag, best_em = None, -1.0
    for head in ("independent", "biaffine"):
        for restricted in (True, False):
            report, tag = run_selection(work, cfg, head, restricted)
            print(f"{head:<14}{str(restricted):<12}{report['em']:>8.1f}{report['f1']:>8.1f}{report['em_at_5']:>8.1f}")
            if report["em"] > best_em:
                best_em, best_tag = report["em"], tag

    print(f"\n== generation (selection: {best_tag}) ==")
    print(f"{'beam':<8}{'rep_penalty':<14}{'BLEU':>8}")
    nbest = work / f"nbest_{best_tag}.json"
    for beam in (1, 4, 6):
        for rep_penalty in (1.0, 1.2):
            report = run_generation(work, cfg, fx, nbest, beam, rep_penalty)
            print(f"{beam:<8}{rep_penalty:<14}{report['bleu']:>8.1f}")

    print(f"\nartifacts in {work}")


if __name__ == "__main__":
    main()
