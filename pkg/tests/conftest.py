import hashlib
import pathlib
import time

import numpy as np
import pytest

import onebit
from onebit import neural
from onebit.checkpoint import detector_from_checkpoint, load_checkpoint, save_checkpoint
from onebit.losses import LossConfig
from onebit.training import TrainConfig, train

from models import RECIPES

_SRC = pathlib.Path(onebit.__file__).parent
_summary = []


def _source_digest():
    h = hashlib.sha256()
    for p in sorted(_SRC.rglob("*.py")):
        h.update(p.relative_to(_SRC).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class ModelStore:
    """Trains each recipe once per source revision; checkpoints live in the pytest cache."""

    def __init__(self, root):
        self.root = pathlib.Path(root)
        self.digest = _source_digest()
        self._mem = {}
        self.seconds = {}  # training wall time per recipe (recorded when it was trained)

    def _build(self, r):
        args = (r.T, r.K, r.N, r.constellation)
        if r.kind == "obmnet":
            return neural.Obmnet(*args)
        cls = neural.Robnet if r.kind == "robnet" else neural.Obirim
        return cls(*args, np.random.default_rng(r.init_seed))

    def get(self, name):
        """Return ``(detector, losses)`` for recipe ``name``."""
        if name in self._mem:
            return self._mem[name]
        r = RECIPES[name]
        stem = f"{name}-{self.digest}-{r.key()}"
        ckpt, trace, timing = (self.root / (stem + ext) for ext in (".ckpt", ".loss.npy", ".seconds"))
        if ckpt.exists() and trace.exists() and timing.exists():
            det = detector_from_checkpoint(load_checkpoint(ckpt))
            losses = np.load(trace)
        else:
            det = self._build(r)
            t0 = time.perf_counter()
            res = train(det, TrainConfig(r.batch_size, r.num_batches, r.train_snr_db, seed=r.seed),
                        LossConfig(r.constellation, r.lam, 10.0))
            elapsed = time.perf_counter() - t0
            print(f"\n  trained {name}: {r.num_batches} batches in {elapsed:.0f}s")
            save_checkpoint(res.checkpoint, ckpt)
            timing.write_text(f"{elapsed:.3f}\n")
            np.save(trace, res.losses)
            losses = res.losses
        self._mem[name] = (det, losses)
        self.seconds[name] = float(timing.read_text())
        return det, losses


@pytest.fixture(scope="session")
def models(request):
    return ModelStore(request.config.cache.mkdir("onebit-models"))


@pytest.fixture(scope="session")
def report():
    """``report(tag, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def _report(tag, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
        print("\n" + line)
        _summary.append(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _summary:
        terminalreporter.section("acceptance criteria")
        for line in _summary:
            terminalreporter.write_line(line)
