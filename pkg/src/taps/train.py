"""Training regimes: incremental, joint, and the two-phase memory-efficient joint variant.

All regimes share one loop. Each step draws a balanced batch (``batch_size // K``
examples from each of the K tasks; shorter tasks cycle through fresh
permutations), sums the per-task objectives, and takes one momentum-SGD step
with a per-step cosine learning rate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from taps import ops
from taps.data import Dataset
from taps.errors import ConfigurationError, NonFiniteError, TrainingAborted
from taps.layers import TaskBatchNorm
from taps.model import BaseModel, TaskNetwork
from taps.ops import BatchNormStats
from taps.optim import OptimizerState, TrainConfig, cosine_lr, penalty_value, sgd_step, taps_loss, zero_grad
from taps.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TaskSpec:
    task_id: str
    train: Dataset
    eval: Dataset | None = None
    num_classes: int | None = None
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.num_classes is None:
            self.num_classes = self.train.num_classes
        if self.num_classes < 2:
            raise ConfigurationError(f"task {self.task_id!r}: need at least 2 classes")
        if self.loss != "cross_entropy":
            raise ConfigurationError(f"unsupported loss {self.loss!r}")

    @property
    def eval_set(self) -> Dataset:
        return self.eval if self.eval is not None else self.train


@dataclass
class TrainResult:
    model: TaskNetwork
    history: list


@dataclass
class JointResult:
    base: BaseModel
    models: dict
    histories: dict
    phase1_heads: dict = field(default_factory=dict)
    phase2_trainable_params: dict = field(default_factory=dict)


def accuracy(net: TaskNetwork, ds: Dataset) -> float:
    """Top-1 accuracy in percent."""
    if ds.count == 0:
        raise ConfigurationError(f"dataset {ds.name!r} is empty")
    pred = net.predict(ds.x).argmax(axis=1)
    return float(100.0 * np.mean(pred == ds.y))


def steps_per_epoch(sizes, batch_size) -> int:
    return max(1, math.ceil(max(sizes) * len(sizes) / batch_size))


def _balanced_indices(size, count, rng) -> np.ndarray:
    reps = -(-count // size)
    return np.concatenate([rng.permutation(size) for _ in range(reps)])[:count]


def write_history(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _history_record(epoch, lr, loss, net, lam, accuracy_pct):
    return {
        "epoch": epoch,
        "lr": lr,
        "loss": loss,
        "penalty": penalty_value(net.scores(), lam, net.num_adaptive) if net.num_adaptive else 0.0,
        "accuracy": accuracy_pct,
        "open_gates": int(sum(net.layer_map())),
        "score_vector": net.score_vector(),
    }


class _Loop:
    """Shared minibatch loop over one or more task networks."""

    def __init__(self, nets, tasks, cfg: TrainConfig, params, *, penalize=True,
                 shared_backbone=None, frozen_base=None, abort_state=None):
        if not tasks:
            raise ConfigurationError("no tasks to train")
        for t in tasks:
            if t.train.count == 0:
                raise ConfigurationError(f"task {t.task_id!r} has an empty training set")
        self.k = len(tasks)
        self.sub = cfg.batch_size // self.k
        if self.sub < 2:
            raise ConfigurationError(
                f"batch_size {cfg.batch_size} gives {self.sub} examples per task; batch norm needs at least 2"
            )
        self.nets, self.tasks, self.cfg, self.params = nets, tasks, cfg, params
        self.penalize = penalize and cfg.lam > 0
        self.shared_backbone = shared_backbone
        self.frozen_base = frozen_base
        self.abort_state = abort_state
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A95]))
        self.spe = steps_per_epoch([t.train.count for t in tasks], cfg.batch_size)
        self.total = cfg.epochs * self.spe
        self.state = OptimizerState(total_steps=self.total)
        if frozen_base is not None:
            self._frozen_copy = {k: v.copy() for k, v in frozen_base.weights.items()}

    def _objective(self, batches):
        terms = []
        if self.shared_backbone is not None:
            x = np.concatenate([self.tasks[i].train.x[idx] for i, idx in enumerate(batches)])
            feats = self.shared_backbone.features(x, training=True)
            for i, idx in enumerate(batches):
                net = self.nets[i]
                f = ops.rows(feats, i * self.sub, (i + 1) * self.sub)
                logits = ops.linear(f, net.head_weight, net.head_bias)
                terms.append(ops.cross_entropy_loss(logits, self.tasks[i].train.y[idx]))
            return terms, terms
        total_terms = []
        for i, idx in enumerate(batches):
            net, task = self.nets[i], self.tasks[i]
            ce = ops.cross_entropy_loss(net.forward(task.train.x[idx], training=True), task.train.y[idx])
            terms.append(ce)
            if self.penalize:
                total_terms.append(taps_loss(ce, net.scores(), self.cfg.lam, net.num_adaptive))
            else:
                total_terms.append(ce)
        return terms, total_terms

    def _snapshot(self):
        snap = [net.state_dict() for net in self.nets]
        extra = None
        if self.abort_state is not None:
            extra = self.abort_state[0]()
        return snap, extra

    def _restore(self, snap):
        states, extra = snap
        for net, st in zip(self.nets, states):
            net.load_state_dict(st)
        if extra is not None:
            self.abort_state[1](extra)

    def run(self):
        cfg = self.cfg
        histories = {t.task_id: [] for t in self.tasks}
        good = self._snapshot()
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            plans = [
                _balanced_indices(t.train.count, self.spe * self.sub, self.rng).reshape(self.spe, self.sub)
                for t in self.tasks
            ]
            loss_sums = [0.0] * self.k
            lr = cfg.learning_rate
            for s in range(self.spe):
                lr = cosine_lr(step, self.total, cfg.learning_rate) if cfg.cosine else cfg.learning_rate
                zero_grad(self.params)
                terms, objective = self._objective([p[s] for p in plans])
                total = objective[0]
                for term in objective[1:]:
                    total = ops.add(total, term)
                if not np.isfinite(total.data).all():
                    self._abort(good, histories, f"non-finite loss at epoch {epoch}, step {s}")
                total.backward()
                try:
                    sgd_step(self.params, self.state, lr, cfg.momentum, cfg.weight_decay)
                except NonFiniteError as exc:
                    self._abort(good, histories, f"epoch {epoch}, step {s}: {exc}")
                for i, term in enumerate(terms):
                    loss_sums[i] += float(term.data)
                step += 1
            self._check_frozen(epoch)
            for i, (net, task) in enumerate(zip(self.nets, self.tasks)):
                rec = _history_record(epoch, lr, loss_sums[i] / self.spe, net,
                                      cfg.lam if self.penalize else 0.0, accuracy(net, task.eval_set))
                histories[task.task_id].append(rec)
            good = self._snapshot()
            log.debug("epoch %d done: %s", epoch, {k: v[-1]["accuracy"] for k, v in histories.items()})
        return histories

    def _check_frozen(self, epoch):
        if self.frozen_base is None:
            return
        for k, v in self.frozen_base.weights.items():
            if not np.array_equal(v, self._frozen_copy[k]):
                raise AssertionError(f"frozen base weight {k} changed during epoch {epoch}")

    def _abort(self, good, histories, message):
        self._restore(good)
        model = self.nets[0] if self.k == 1 else self.nets
        hist = histories[self.tasks[0].task_id] if self.k == 1 else histories
        raise TrainingAborted(message, model=model, history=hist)


def train_incremental(base: BaseModel, task: TaskSpec, cfg: TrainConfig, *, history_path=None,
                      gates="learned", open_layers=None, warm_start=None) -> TrainResult:
    """Learn deltas, gate scores, batch norm and head for one task over a frozen base.

    ``warm_start`` is a network for the same task whose batch norm and head
    seed this run; deltas and scores still start fresh.
    """
    net = TaskNetwork(base, task.num_classes, task_id=task.task_id, tau=cfg.tau, init_score=cfg.init_score,
                      seed=cfg.seed, gates=gates, open_layers=open_layers)
    if warm_start is not None:
        _copy_bn_and_head(warm_start, net)
    if gates == "learned" and net.num_adaptive == 0:
        raise ConfigurationError("the base model has no adaptive layers")
    loop = _Loop([net], [task], cfg, net.task_parameters(), penalize=(gates == "learned"), frozen_base=base)
    history = loop.run()[task.task_id]
    if history_path is not None:
        write_history(history_path, history)
    return TrainResult(net, history)


def manual_freeze_baseline(base: BaseModel, task: TaskSpec, layer_subset, cfg: TrainConfig) -> TrainResult:
    """Fine-tune exactly ``layer_subset`` (plus batch norm and head); no gate learning."""
    return train_incremental(base, task, cfg, gates="fixed", open_layers=list(layer_subset))


def last_k_layers(base: BaseModel, k: int) -> list:
    labels = [label for label, _ in base.slots]
    return labels[len(labels) - k:] if k else []


def layer_param_counts(base: BaseModel) -> dict:
    """Delta parameters each adaptive slot would add when opened."""
    counts = {}
    for spec in base.descriptor["layers"]:
        name = spec.get("name")
        if spec["type"] == "attention":
            for p in ("q", "k", "v", "o"):
                if f"{name}.{p}" in [s for s, _ in base.slots]:
                    counts[f"{name}.{p}"] = base.weights[f"{name}.{p}"].size
        elif name in [s for s, _ in base.slots]:
            counts[name] = base.weights[f"{name}.weight"].size + (
                base.weights[f"{name}.bias"].size if f"{name}.bias" in base.weights else 0
            )
    return counts


def matched_last_k(base: BaseModel, budget: int) -> int:
    """Smallest k whose last-k layers carry at least ``budget`` delta parameters."""
    counts = layer_param_counts(base)
    labels = [label for label, _ in base.slots]
    acc = 0
    for k in range(len(labels) + 1):
        if acc >= budget:
            return k
        if k < len(labels):
            acc += counts[labels[len(labels) - 1 - k]]
    return len(labels)


def lambda_sweep(base: BaseModel, task: TaskSpec, grid, cfg: TrainConfig, history_dir=None) -> list:
    """One incremental run per lambda; rows of (lambda, accuracy, layer_pct, param_pct)."""
    grid = list(grid)
    if not grid:
        raise ConfigurationError("lambda grid is empty")
    if any(g < 0 for g in grid):
        raise ConfigurationError(f"lambda values must be non-negative, got {grid}")
    rows = []
    for lam in grid:
        path = None
        if history_dir is not None:
            path = f"{history_dir}/history_{task.task_id}_lambda{lam:g}.jsonl"
        res = train_incremental(base, task, cfg.replace(lam=float(lam)), history_path=path)
        counts = res.model.task_specific_params()
        last = res.history[-1]
        rows.append({
            "lambda": float(lam),
            "accuracy": last["accuracy"],
            "layer_pct": 100.0 * last["open_gates"] / res.model.num_adaptive,
            "param_pct": 100.0 * counts["added_params"] / base.num_params,
            "model": res.model,
            "history": res.history,
        })
    return rows


def _shared_bns(base: BaseModel) -> dict:
    bns = {}
    for spec in base.descriptor["layers"]:
        if spec["type"] == "bn":
            name, w = spec["name"], base.weights
            bns[name] = TaskBatchNorm(name, w[f"{name}.gamma"], w[f"{name}.beta"],
                                      BatchNormStats(w[f"{name}.running_mean"].copy(), w[f"{name}.running_var"].copy()))
    return bns


def _copy_bn_and_head(src: TaskNetwork, dst: TaskNetwork):
    if src.head_weight.shape != dst.head_weight.shape:
        raise ConfigurationError(
            f"warm start head {src.head_weight.shape} does not match {dst.head_weight.shape}"
        )
    for name, bn in dst.bns.items():
        other = src.bns[name]
        bn.gamma.data = other.gamma.data.copy()
        bn.beta.data = other.beta.data.copy()
        bn.stats = other.stats.copy()
    dst.head_weight.data = src.head_weight.data.copy()
    dst.head_bias.data = src.head_bias.data.copy()


def train_multihead(base_init: BaseModel, tasks, cfg: TrainConfig, history_dir=None, *, task_bn=False):
    """Train one shared backbone and a head per task.

    Batch norm is shared unless ``task_bn``, in which case every task keeps its
    own and the returned base carries their average. Returns
    ``(base, nets, histories)``.
    """
    tasks = list(tasks)
    shared = base_init.tensors(trainable=True)
    bns = None if task_bn else _shared_bns(base_init)
    nets = [TaskNetwork(base_init, t.num_classes, task_id=t.task_id, tau=cfg.tau, seed=cfg.seed + i,
                        base_tensors=shared, shared_bns=bns, gates="off")
            for i, t in enumerate(tasks)]
    bn_names = {s["name"] for s in base_init.descriptor["layers"] if s["type"] == "bn"}
    params = [t for k, t in sorted(shared.items()) if k.split(".")[0] not in bn_names]
    if bns is not None:
        for bn in bns.values():
            params.extend(bn.parameters())
    else:
        for net in nets:
            for bn in net.bns.values():
                params.extend(bn.parameters())
    for net in nets:
        params.extend([net.head_weight, net.head_bias])

    def snap():
        return {k: t.data.copy() for k, t in shared.items()}

    def restore(s):
        for k, v in s.items():
            shared[k].data = v.copy()

    loop = _Loop(nets, tasks, cfg, params, penalize=False,
                 shared_backbone=nets[0] if bns is not None else None, abort_state=(snap, restore))
    histories = loop.run()
    weights = dict(shared)
    stats = {}
    for name in bn_names:
        group = [net.bns[name] for net in nets]
        weights[f"{name}.gamma"] = Tensor(np.mean([b.gamma.data for b in group], axis=0).astype(group[0].gamma.dtype))
        weights[f"{name}.beta"] = Tensor(np.mean([b.beta.data for b in group], axis=0).astype(group[0].beta.dtype))
        stats[name] = BatchNormStats(
            np.mean([b.stats.mean for b in group], axis=0).astype(group[0].stats.mean.dtype),
            np.mean([b.stats.var for b in group], axis=0).astype(group[0].stats.var.dtype),
        )
    base = base_init.with_weights(weights, stats)
    if history_dir is not None:
        for tid, h in histories.items():
            write_history(f"{history_dir}/history_phase1_{tid}.jsonl", h)
    return base, nets, histories


def pretrain_base(descriptor, task: TaskSpec, cfg: TrainConfig) -> BaseModel:
    """Random initialisation followed by full training on one task."""
    base, _, _ = train_multihead(BaseModel.random(descriptor, seed=cfg.seed), [task], cfg)
    return base


def train_joint(base_init: BaseModel, tasks, cfg: TrainConfig, history_dir=None) -> JointResult:
    """Jointly learn a shared base and per-task deltas, scores, batch norm and heads."""
    tasks = list(tasks)
    if len(tasks) < 1:
        raise ConfigurationError("joint training needs at least one task")
    shared = base_init.tensors(trainable=True)
    nets = [TaskNetwork(base_init, t.num_classes, task_id=t.task_id, tau=cfg.tau, init_score=cfg.init_score,
                        seed=cfg.seed + i, base_tensors=shared)
            for i, t in enumerate(tasks)]
    if nets[0].num_adaptive == 0:
        raise ConfigurationError("the base model has no adaptive layers")
    bn_names = {s["name"] for s in base_init.descriptor["layers"] if s["type"] == "bn"}
    params = [t for k, t in sorted(shared.items()) if k.split(".")[0] not in bn_names]
    for net in nets:
        params.extend(net.task_parameters())

    def snap():
        return {k: t.data.copy() for k, t in shared.items()}

    def restore(s):
        for k, v in s.items():
            shared[k].data = v.copy()

    loop = _Loop(nets, tasks, cfg, params, abort_state=(snap, restore))
    histories = loop.run()
    base = base_init.with_weights(shared)
    # rebind every task network to the finished, frozen base
    models = {}
    for net, task in zip(nets, tasks):
        models[task.task_id] = rebind(net, base)
    if history_dir is not None:
        for tid, h in histories.items():
            write_history(f"{history_dir}/history_{tid}.jsonl", h)
    return JointResult(base, models, histories)


def rebind(net: TaskNetwork, base: BaseModel) -> TaskNetwork:
    """Copy a task network's task-specific state onto a (frozen) ``base``."""
    fresh = TaskNetwork(base, net.num_classes, task_id=net.task_id, tau=net.tau,
                        head=(net.head_weight.data, net.head_bias.data))
    fresh.load_state_dict(net.state_dict())
    return fresh


def train_joint_memory_efficient(base_init: BaseModel, tasks, cfg: TrainConfig, *, phase1_cfg=None,
                                 history_dir=None) -> JointResult:
    """Phase 1: shared backbone with per-task heads. Phase 2: incremental training per task."""
    tasks = list(tasks)
    base, heads, _ = train_multihead(base_init, tasks, phase1_cfg or cfg.replace(lam=0.0), history_dir,
                                     task_bn=True)
    models, histories, trainable = {}, {}, {}
    for task, head in zip(tasks, heads):
        path = f"{history_dir}/history_{task.task_id}.jsonl" if history_dir is not None else None
        res = train_incremental(base, task, cfg, history_path=path, warm_start=head)
        models[task.task_id] = res.model
        histories[task.task_id] = res.history
        trainable[task.task_id] = res.model.num_trainable()
    return JointResult(base, models, histories,
                       phase1_heads={n.task_id: n for n in heads}, phase2_trainable_params=trainable)
