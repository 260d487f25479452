import json
import struct
from pathlib import Path

import numpy as np
import pytest

from modmerge.checkpoint_io import Tensor, write_checkpoint

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "modmerge" / "configs"


def raw_container(header: dict, data: bytes = b"") -> bytes:
    """Assemble container bytes by hand, without going through the writer."""
    hdr = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(hdr)) + hdr + data


@pytest.fixture
def write_raw(tmp_path):
    def _write(name: str, header: dict, data: bytes = b"") -> Path:
        p = tmp_path / name
        p.write_bytes(raw_container(header, data))
        return p

    return _write


TOY_NAMES = [
    "model.embed_tokens.weight",
    "model.layers.0.mlp.up_proj.weight",
    "model.layers.0.self_attn.q_proj.weight",
    "model.layers.30.mlp.down_proj.weight",
]
TOY_SHAPES = [(6, 4), (4, 4), (4, 4), (3, 5)]


def toy_tensors(seed: int) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    return [
        Tensor(n, rng.uniform(-1, 1, size=s).astype(np.float32))
        for n, s in zip(TOY_NAMES, TOY_SHAPES)
    ]


@pytest.fixture
def toy_models(tmp_path):
    """Two 4-tensor F32 checkpoints named a.safetensors and b.safetensors."""
    paths = {}
    for key, seed in (("a", 1), ("b", 2)):
        p = tmp_path / f"{key}.safetensors"
        write_checkpoint(p, toy_tensors(seed), "F32")
        paths[key] = p
    return paths


ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::" in report.nodeid:
        label = report.nodeid.split("::")[-1]
        ACCEPTANCE_RESULTS[label] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{status}  {label}")
