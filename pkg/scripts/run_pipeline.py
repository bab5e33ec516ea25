#!/usr/bin/env python3
"""Run the whole span-grounding pipeline on a synthetic fixture.

Generates the corpus, extracts train/eval samples, synthesizes features,
trains a span head, decodes n-best spans, generates responses with the toy
table model and prints the evaluation report.

    python scripts/run_pipeline.py --kind separable --head independent
    python scripts/run_pipeline.py --kind pipeline --head biaffine --workdir /tmp/exp1
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


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", default="separable", choices=["separable", "pipeline"])
    parser.add_argument("--head", default="independent", choices=["independent", "biaffine"])
    parser.add_argument("--restricted", default="true", choices=["true", "false"])
    parser.add_argument("--workdir", default=None)
    args = parser.parse_args()

    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="spanground-"))
    work.mkdir(parents=True, exist_ok=True)
    fx = work / "fx"

    sh("fixtures", "--out", fx, "--kind", args.kind)
    cfg = fx / "config.json"
    sh("prepare", "--config", cfg, "--samples-out", work / "train.json",
       "--features-out", work / "train.sgf", "--include-followups", "true")
    sh("prepare", "--config", cfg, "--samples-out", work / "eval.json",
       "--features-out", work / "eval.sgf", "--include-followups", "false")
    sh("train", "--config", cfg, "--features", work / "train.sgf", "--samples", work / "train.json",
       "--head-out", work / "head.ckpt", "--head.kind", args.head, "--head.restricted", args.restricted)
    sh("decode", "--config", cfg, "--features", work / "eval.sgf", "--samples", work / "eval.json",
       "--head", work / "head.ckpt", "--out", work / "nbest.json",
       "--head.kind", args.head, "--head.restricted", args.restricted)
    sh("generate", "--config", cfg, "--samples", work / "eval.json", "--nbest", work / "nbest.json",
       "--toy-model", fx / "toy_model.json", "--out", work / "responses.json")
    sh("eval", "--samples", work / "eval.json", "--nbest", work / "nbest.json",
       "--generated", work / "responses.json", "--out", work / "report.json")

    report = json.loads((work / "report.json").read_text())
    print(f"\nartifacts in {work}")
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
