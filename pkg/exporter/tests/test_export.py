import hashlib
import json

import pytest

from feature_exporter.export import export_features


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestExportFeatures:
    def test_export_and_manifest(self, corpus_dir, encoder_dir, tmp_path):
        out = tmp_path / "features.sgf"
        manifest = export_features(
            corpus_dir / "documents.json",
            corpus_dir / "dialogs.json",
            encoder_dir,
            out,
            max_len=96,
            stride=32,
        )
        assert out.exists()
        assert manifest.feature_dim == 32
        sidecar = json.loads((tmp_path / "features.sgf.json").read_text())
        assert sidecar["model_id"] == manifest.model_id
        assert sidecar["tokenizer_fingerprint"] == manifest.tokenizer_fingerprint
        assert sidecar["feature_dim"] == manifest.feature_dim
        stored = json.loads((tmp_path / "features.sgf.manifest.json").read_text())
        assert stored["corpus_hashes"]["documents"] == sha256(corpus_dir / "documents.json")

    def test_deterministic_content_hash(self, corpus_dir, encoder_dir, tmp_path):
        a = tmp_path / "a.sgf"
        b = tmp_path / "b.sgf"
        for out in (a, b):
            export_features(
                corpus_dir / "documents.json", corpus_dir / "dialogs.json", encoder_dir, out,
                max_len=96, stride=32,
            )
        assert sha256(a) == sha256(b)

    def test_loadable_by_primary_reader(self, corpus_dir, encoder_dir, tmp_path):
        from spanground.features import read_feature_file

        out = tmp_path / "features.sgf"
        export_features(
            corpus_dir / "documents.json", corpus_dir / "dialogs.json", encoder_dir, out,
            max_len=96, stride=32,
        )
        loaded = read_feature_file(out)
        assert loaded.feature_dim == 32
        assert loaded.windows
        docs = {d["doc_id"]: d for d in json.loads((corpus_dir / "documents.json").read_text())}
        for fw in loaded.windows:
            text = docs[fw.doc_id]["text"]
            for i in fw.descriptor.doc_positions():
                s, e = fw.alignment.char_spans[i]
                assert text[s:e].strip() != ""

    def test_missing_encoder_rejected(self, corpus_dir, tmp_path):
        with pytest.raises(FileNotFoundError):
            export_features(
                corpus_dir / "documents.json", corpus_dir / "dialogs.json",
                tmp_path / "missing", tmp_path / "f.sgf",
            )


class TestSeq2SeqTables:
    @pytest.fixture(scope="class")
    def seq2seq_dir(self, tmp_path_factory, corpus_dir):
        from feature_exporter.cli import main as exporter_main

        out = tmp_path_factory.mktemp("s2s")
        assert exporter_main([
            "make-tiny-seq2seq", "--documents", str(corpus_dir / "documents.json"),
            "--out", str(out), "--hidden-size", "32", "--seed", "1",
        ]) == 0
        return out

    def test_exported_tables_load_in_primary_model(self, corpus_dir, seq2seq_dir, tmp_path):
        # build a tiny n-best file over real phrase texts
        docs = json.loads((corpus_dir / "documents.json").read_text())
        dialogs = json.loads((corpus_dir / "dialogs.json").read_text())
        nbest = []
        for dialog in dialogs:
            doc = next(d for d in docs if d["doc_id"] == dialog["doc_id"])
            for idx, turn in enumerate(dialog["turns"]):
                if turn["role"] != "agent" or not turn["grounding_phrase_ids"]:
                    continue
                phrase = next(p for p in doc["phrases"] if p["phrase_id"] == turn["grounding_phrase_ids"][0])
                nbest.append({
                    "sample_id": f"{dialog['dialog_id']}#t{idx}",
                    "hypotheses": [{
                        "start": phrase["start"], "end": phrase["end"],
                        "text": doc["text"][phrase["start"]:phrase["end"]], "logprob": 0.0,
                    }],
                })
        nbest_path = tmp_path / "nbest.json"
        nbest_path.write_text(json.dumps(nbest[:3]))

        from feature_exporter.seq2seq_tables import export_span_conditionals

        out = tmp_path / "tables.json"
        spec = export_span_conditionals(
            corpus_dir / "documents.json", corpus_dir / "dialogs.json",
            nbest_path, seq2seq_dir, out, k=2, top_m=4, include_followups=True,
        )
        assert spec["context_order"] is None
        assert len(spec["tables"]) > 1

        from spanground.generation import GenerationInput, TableGenerationModel
        from spanground.numerics import logsumexp

        model = TableGenerationModel.from_json(out)
        span_text = nbest[0]["hypotheses"][0]["text"]
        lp = model.next_token_logprobs(
            GenerationInput(context="c", title="t", grounding=span_text), []
        )
        assert abs(logsumexp(lp)) < 1e-6
