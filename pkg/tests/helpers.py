"""Shared data, bases and result bookkeeping for the experiment-level tests."""

import functools

from taps.data import SyntheticSuite, cnn_descriptor
from taps.optim import TrainConfig
from taps.train import TaskSpec, pretrain_base

# pretraining recipe shared by every experiment-level test
PRETRAIN = dict(learning_rate=0.05, epochs=30)

CRITERIA = {}


def record_criterion(number, passed, detail=""):
    CRITERIA[number] = (bool(passed), detail)
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line, flush=True)
    return line


@functools.lru_cache(maxsize=None)
def suite(seed):
    return SyntheticSuite(seed=seed)


def task_spec(seed, task):
    s = suite(seed)
    return TaskSpec(task, s.dataset(task, "train"), s.dataset(task, "test"))


@functools.lru_cache(maxsize=None)
def pretrained(seed):
    return pretrain_base(cnn_descriptor(), task_spec(seed, "base"), TrainConfig(seed=seed, **PRETRAIN))
