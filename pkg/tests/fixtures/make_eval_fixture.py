"""Regenerate the evaluation fixture and its golden report.

    python3 tests/fixtures/make_eval_fixture.py

The golden report is the output of ``motionrag evaluate`` on the fixture; it
is only regenerated after the per-metric oracle tests pass.
"""

import os

import numpy as np

from motionrag.encoders import save_tensors
from motionrag.workbench.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))


def build(path, n=48, d=4, runs=3):
    rng = np.random.default_rng(20240611)
    text = rng.normal(size=(n, d))
    reference = text + rng.normal(0, 0.3, size=(n, d))
    feats = {f"generated.{i}": text + rng.normal(0.2, 0.5, size=(n, d)) for i in range(runs)}
    feats.update(reference=reference, text=text, seeds=np.arange(runs, dtype=np.float64))
    save_tensors(path, feats)


if __name__ == "__main__":
    fixture = os.path.join(HERE, "eval_fixture.tensors")
    build(fixture)
    raise SystemExit(main(["evaluate", "--input", fixture, "--out", os.path.join(HERE, "eval_fixture_report")]))
