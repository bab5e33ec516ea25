import json
from pathlib import Path

import pytest

from spanground.fixtures import write_fixture

from feature_exporter.encoder import make_tiny_encoder

SHARED_VECTORS = Path(__file__).parent.parent.parent / "shared" / "windowing_vectors.json"


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    write_fixture(out, "pipeline")
    return out


@pytest.fixture(scope="session")
def encoder_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("encoder")
    docs = json.loads((corpus_dir / "documents.json").read_text())
    make_tiny_encoder(out, [d["text"] for d in docs], hidden_size=32, num_layers=2, seed=0)
    return out


@pytest.fixture(scope="session")
def shared_vectors():
    return json.loads(SHARED_VECTORS.read_text())["vectors"]
