import os
import time

import numpy as np
import pytest
import torch

from unipercept.config import config_from_dict

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda kv: (int(str(kv[0]).rstrip("ab")), str(kv[0]))):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """``record(number, title, passed, detail)`` -> passed; collected into the terminal summary."""

    def record(number, title, passed, detail=""):
        line = f"criterion {str(number):>3}  {'PASS' if passed else 'FAIL'}  {title}  [{detail}]"
        request.config.stash[_LINES].append((number, line))
        print(line)
        return passed

    return record


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# ------------------------------------------------------------- desk runs
#
# Shared by the acceptance suite and the slow end-to-end tests. The learning
# rate is raised to 1e-3 with all multipliers 1.0 for these overfit runs.


def desk_config(task, steps, count=16, synthetic=None, seed=0, **optim):
    o = {"steps": steps, "lr": 1e-3, "backbone_lr_mult": 1.0, "text_lr_mult": 1.0, "batch_size": 4}
    o.update(optim)
    return config_from_dict(
        {
            "seed": seed,
            "log_every": 10,
            "optim": o,
            "datasets": [{"name": task, "task": task, "count": count, "synthetic": synthetic or {}}],
        }
    )


def timed_train(cfg):
    """``train(cfg)`` with the wall time attached as ``seconds``."""
    from unipercept.engine import train

    start = time.perf_counter()
    res = train(cfg)
    res.seconds = time.perf_counter() - start
    return res


DETECTION_STEPS = 600
GROUNDING_STEPS = 600
TRACKING_STEPS = 1500
PROMPT_STEPS = 1000


@pytest.fixture(scope="session")
def trained_detection():
    return timed_train(desk_config("detection", DETECTION_STEPS))


@pytest.fixture(scope="session")
def trained_grounding():
    return timed_train(desk_config("grounding", GROUNDING_STEPS, synthetic={"label": "expression"}))


@pytest.fixture(scope="session")
def trained_tracking():
    syn = {"clip_length": 10, "objects_per_image": [2, 3]}
    return timed_train(desk_config("video", TRACKING_STEPS, count=8, synthetic=syn))


@pytest.fixture(scope="session")
def trained_prompt():
    return timed_train(desk_config("prompt", PROMPT_STEPS, synthetic={"label": "agnostic"}))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("UNIPERCEPT_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="UNIPERCEPT_SKIP_SLOW set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)
