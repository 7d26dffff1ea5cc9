import json
import os
import sys

import numpy as np
import pytest

import granalign as ga

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def pytest_terminal_summary(terminalreporter):
    """Replay the acceptance verdict lines after capture has ended."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance")
    if mod is None or not getattr(mod, "CRITERION_LOG", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.CRITERION_LOG:
        terminalreporter.write_line(line)
    for table in getattr(mod, "ABLATION_TABLE", []):
        terminalreporter.write_line("")
        terminalreporter.write_line(table)


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def load_fixture(name: str) -> dict:
    with open(fixture_path(name), "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="session")
def girl_dog():
    """Two-object scene (girl left of brown dog) with its attribute question."""
    doc = load_fixture("girl_dog.json")
    scene = ga.ingest.scene_from_dict(doc["scene"])
    question = ga.ingest.question_from_dict(doc["question"])
    return scene, question


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 40/10 toy corpus shared by the model and training tests."""
    out = tmp_path_factory.mktemp("corpus")
    train_path, eval_path = ga.gen_corpus(ga.DEFAULT_WORLD, 40, 10, 11, str(out))
    return ga.load_manifest(train_path), ga.load_manifest(eval_path), str(out)


def fd_gradient(f, arr: np.ndarray, coords, step: float = 1e-6) -> dict:
    """Independent central-difference oracle: coord -> derivative of f()."""
    out = {}
    flat = arr.reshape(-1)
    for c in coords:
        c = int(c)
        saved = flat[c]
        flat[c] = saved + step
        up = f()
        flat[c] = saved - step
        down = f()
        flat[c] = saved
        out[c] = (up - down) / (2.0 * step)
    return out


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)
