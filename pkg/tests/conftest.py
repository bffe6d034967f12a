import json

import pytest
import torch

from promptclip.encoders import BackendSpec, DualEncoder, ModelConfig
from promptclip.synthetic import planted_clusters

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_model():
    cfg = ModelConfig(backend=BackendSpec(vocab_size=1024, width=16, n_heads=2), embed_dim=8, image_in=6,
                      image_hidden=12)
    return DualEncoder(cfg, seed=3)


@pytest.fixture
def f64_model():
    torch.manual_seed(0)
    return DualEncoder(ModelConfig(), seed=1).double()


@pytest.fixture
def clusters():
    return planted_clusters(seed=0)


@pytest.fixture
def roco_jsonl(tmp_path):
    rows = [
        {"id": "a", "image_ref": [0.1, 0.2, 0.3], "caption": "chest x-ray of the lung",
         "cuis": ["C0024109", "C0043299"], "semantic_types": {"C0024109": "T023", "C0043299": "T060"},
         "split": "train"},
        {"id": "b", "image_ref": [0.0, 1.0, 0.0], "caption": "ultrasound of the liver",
         "cuis": ["C0041618", "C0023884"], "semantic_types": {"C0041618": "T060"}, "split": "valid"},
        {"id": "c", "image_ref": [1.0, 0.0, 0.5], "caption": "axial ct", "cuis": [], "semantic_types": {},
         "split": "test"},
    ]
    path = tmp_path / "roco.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def irma_tsv(tmp_path):
    path = tmp_path / "irma.tsv"
    path.write_text(
        "id\timage_ref\tirma_code\n"
        "x1\t[0.1, 0.2]\t1121-127-700-500\n"
        "x2\t[0.3, 0.1]\t1121-110-700-500\n"
        "x3\t[0.9, 0.4]\t1123-211-414-700\n"
    )
    return path
