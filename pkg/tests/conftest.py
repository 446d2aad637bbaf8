import time

import numpy as np
import pytest

from lcnn import pruning, trainer
from lcnn.nn import baseline_spec

from reference import TOY_PRUNE


def toy_config(**kw):
    # 19 updates per epoch: momentum 0.9 lets the moving BN statistics settle within an epoch or two
    base = dict(batch_size=32, max_epochs=12, patience=3, bn_momentum=0.9)
    base.update(kw)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_split():
    return trainer.make_toy_dataset(classes=4, seed=0)


@pytest.fixture(scope="session")
def toy_parent(toy_split):
    """Baseline topology with 4 classes trained on the toy data: (spec, params, record, seconds)."""
    spec = baseline_spec(classes=4)
    t0 = time.perf_counter()
    params, record = trainer.train(spec, toy_split, toy_config(), seed=0)
    return spec, params, record, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_pruned(toy_parent, toy_split):
    """Per pruned layer: (spec, pruned params, fine-tuned params, accuracy before, fine-tune record)."""
    spec, params, _, _ = toy_parent
    out = {}
    for name, counts in TOY_PRUNE.items():
        plan = pruning.plan_pruning(spec, params, counts)
        pspec, pparams = pruning.apply_prune(spec, params, plan)
        before = trainer.evaluate(trainer.Model(pspec, pparams), toy_split.val).accuracy
        tuned, rec = trainer.finetune(pspec, pparams, toy_split, toy_config(max_epochs=5))
        out[name] = (pspec, pparams, tuned, before, rec)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled in by test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
