"""Pretraining, per-task sparse training and class-incremental evaluation."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, NumericError, TrainingError
from .mas import MasState, compute_raw_importance, penalty_and_grad
from .metrics import AccuracyMatrix, average_accuracy, forgetting
from .model import (Model, build_model, class_tower_backward, class_tower_forward, encode_input,
                    loss_and_grad, predict)
from .replay import ReplayBuffer, sample_batch
from .selection import SelectionMask, build_mask, localize_layers, score_parameters

log = logging.getLogger(__name__)

# independent RNG streams per seed, so e.g. the weight and random strategies
# see identical shuffles and replay draws
_INIT, _PRETRAIN, _SHUFFLE, _SELECT, _INSERT, _REPLAY = range(6)


def stream_rng(seed, stream, *extra):
    return np.random.default_rng([int(seed), stream, *extra])


@dataclass
class FrozenBaseline:
    h0: float
    task_acc: list        # per task, candidates = that task's classes
    final_acc: list       # per task, candidates = every CIL class

    def to_dict(self):
        return {"h0": self.h0, "task_acc": self.task_acc, "final_acc": self.final_acc}


# ------------------------------------------------------------------ evaluation

def evaluate_accuracy(model, features, labels, candidates):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ArgumentError("evaluate_accuracy: empty test set")
    pred = predict(model, features, candidates)
    return float(np.mean(pred == labels))


def frozen_baseline(model, universe):
    tasks = universe.stream.tasks
    all_cil = universe.stream.all_classes
    return FrozenBaseline(
        h0=evaluate_accuracy(model, universe.control.features, universe.control.labels,
                             universe.pretrain_classes),
        task_acc=[evaluate_accuracy(model, t.test.features, t.test.labels, t.classes)
                  for t in tasks],
        final_acc=[evaluate_accuracy(model, t.test.features, t.test.labels, all_cil)
                   for t in tasks],
    )


# ------------------------------------------------------------------ training loops

def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_loss(loss, seed, task):
    if not math.isfinite(loss):
        raise TrainingError("loss diverged (non-finite)", seed=seed, task=task)


def _adamw_state(theta, opt):
    return ad.AdamWState.zeros_like(theta, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                                    weight_decay=opt.weight_decay)


def pretrain(model, universe, cfg, seed):
    """Dense contrastive training on the pretrain set, then attach the class
    rows of the incremental classes.

    Returns ``(model, FrozenBaseline)``; ``model`` is modified in place.
    """
    opt = cfg.optimizer
    data = universe.pretrain
    rng = stream_rng(seed, _PRETRAIN)
    n = len(data)
    per_epoch = math.ceil(n / opt.pretrain_batch_size)
    total = opt.pretrain_epochs * per_epoch
    if total:
        sched = ad.LrSchedule.with_warmup_fraction(opt.pretrain_lr, total, opt.warmup_fraction)
        state = _adamw_state(model.theta, opt)
        trainable = model.registry.trainable_indices()
        step = 0
        for epoch in range(opt.pretrain_epochs):
            for idx in _batches(n, opt.pretrain_batch_size, rng):
                try:
                    loss, grad = loss_and_grad(model, data.features[idx], data.labels[idx])
                except NumericError as exc:
                    raise TrainingError(f"pretraining failed: {exc}", seed=seed) from exc
                _check_loss(loss, seed, None)
                ad.adamw_masked_step(model.theta, grad, trainable, state, sched(step))
                step += 1
            log.debug("pretrain seed=%s epoch=%d loss=%.4f", seed, epoch, loss)
    attach_novel_classes(model, universe, cfg.model.novel_row_steps, cfg.model.novel_row_lr, opt)
    return model, frozen_baseline(model, universe)


def attach_novel_classes(model, universe, steps, lr, opt):
    """Initialise the class rows of every incremental class.

    Each row starts at its superclass row and is then fitted, with the towers
    frozen, so that the class-tower embedding points at the input-tower
    embedding of the class descriptor -- the analogue of writing a prompt for
    a new class name. Descriptor noise bounds how good this zero-shot start is.
    """
    ids = np.array(sorted(universe.parent), dtype=np.int64)
    if ids.size == 0:
        return model
    table = model["class.table"]
    table[ids] = table[[universe.parent[int(c)] for c in ids]]
    if steps == 0 or universe.descriptors is None:
        return model
    target, _ = encode_input(model, universe.descriptors[ids])
    entry = model.registry["class.table"]
    d = entry.shape[1]
    flat_rows = (entry.start + ids[:, None] * d + np.arange(d)).ravel()
    state = _adamw_state(model.theta, opt)
    state.weight_decay = 0.0
    for _ in range(steps):
        h, cache = class_tower_forward(model, ids)
        _, nc = ad.l2_normalize(h)
        grad = model.zeros_like_theta()
        # maximise sum_c <u_c, target_c>
        class_tower_backward(model, cache, ad.l2_normalize_backward(nc, -target), grad)
        ad.adamw_masked_step(model.theta, grad, flat_rows, state, lr)
    return model


def prime_conditional(mas, model, features, class_ids, eligible):
    """Initialise Omega from a label-free conditional set before task 1."""
    features = np.asarray(features)
    if features.shape[0] == 0:
        raise ArgumentError("prime_conditional: empty conditional set")
    raw = compute_raw_importance(model, features, class_ids, eligible)
    mas.update(raw)
    return mas


@dataclass
class TaskLog:
    task: int
    mask_size: int
    eligible_size: int
    steps: int
    final_loss: float


def select_mask(model, task, cfg, seed, task_index):
    """Eligible set and the task's selection mask (full-finetune: every
    trainable parameter)."""
    reg = model.registry
    if cfg.full_finetune:
        idx = reg.trainable_indices()
        return idx, SelectionMask(idx, reg.total, 1.0, "dense")
    sel = cfg.selection
    eligible = localize_layers(reg, sel.mode)
    scores = score_parameters(model, task.train.features, task.train.labels, eligible,
                              batch_size=cfg.optimizer.batch_size)
    mask = build_mask(scores, sel.rate, sel.strategy, rng=stream_rng(seed, _SELECT, task_index),
                      registry=reg)
    return eligible, mask


def learn_task(model, task, buffer, mas, cfg, seed, task_index, eligible=None, mask=None):
    """Learn one task under the task loss + replay loss + masked MAS penalty.

    Only parameters in the task mask move; the mask is built from the weights
    as they are before the first update. Afterwards the task's training set is
    streamed into the replay buffer and Omega is refreshed.
    """
    opt = cfg.optimizer
    use_replay = cfg.replay.enabled and buffer is not None
    use_mas = cfg.mas.enabled and mas is not None and not cfg.full_finetune
    if mask is None:
        eligible, mask = select_mask(model, task, cfg, seed, task_index)
    if use_mas:
        mas.set_anchor(model.theta)

    data = task.train
    n = len(data)
    if n == 0:
        raise ArgumentError(f"task {task_index} has no training data")
    per_epoch = math.ceil(n / opt.batch_size)
    total = opt.epochs * per_epoch
    sched = ad.LrSchedule.with_warmup_fraction(opt.lr, total, opt.warmup_fraction)
    state = _adamw_state(model.theta, opt)
    shuffle = stream_rng(seed, _SHUFFLE, task_index)
    replay_rng = stream_rng(seed, _REPLAY, task_index)
    idx_sel = mask.indices
    step, loss = 0, float("nan")
    try:
        for _ in range(opt.epochs):
            for idx in _batches(n, opt.batch_size, shuffle):
                loss, grad = loss_and_grad(model, data.features[idx], data.labels[idx])
                if use_replay and len(buffer):
                    rx, ry, _ = sample_batch(buffer, idx.size, replay_rng)
                    rloss, _ = loss_and_grad(model, rx, ry, grad)
                    loss += rloss
                if use_mas:
                    pen, pgrad = penalty_and_grad(model.theta, mas, mask)
                    loss += pen
                    grad += pgrad
                _check_loss(loss, seed, task_index)
                if idx_sel.size:
                    ad.adamw_masked_step(model.theta, grad, idx_sel, state, sched(step))
                step += 1
    except NumericError as exc:
        raise TrainingError(str(exc), seed=seed, task=task_index) from exc

    if use_replay:
        buffer.extend(data.features, data.labels, task_index, stream_rng(seed, _INSERT, task_index))
    if use_mas:
        raw = compute_raw_importance(model, data.features, task.classes, eligible)
        mas.update(raw)
    return TaskLog(task_index, len(mask), int(len(eligible)), step, float(loss))


# ------------------------------------------------------------------ full runs

@dataclass
class RunReport:
    seed: int
    baseline: str
    config_hash: str
    matrix: AccuracyMatrix
    frozen: FrozenBaseline
    records: list = field(default_factory=list)
    task_logs: list = field(default_factory=list)

    @property
    def avg_acc(self):
        return average_accuracy(self.matrix)

    @property
    def forgetting(self):
        return forgetting(self.matrix) if self.matrix.T >= 2 else None

    @property
    def holdout_final(self):
        return float(self.matrix.h[-1])

    @property
    def acc_impr(self):
        return self.avg_acc - float(np.mean(self.frozen.final_acc))

    @property
    def holdout_impr(self):
        return self.holdout_final - self.frozen.h0

    def summary(self):
        return {"avg_acc": self.avg_acc, "forgetting": self.forgetting,
                "holdout_final": self.holdout_final, "acc_impr": self.acc_impr,
                "holdout_impr": self.holdout_impr}


_PRETRAIN_CACHE = {}
_PRETRAIN_CACHE_SIZE = 32


def _pretrain_key(universe, cfg, seed):
    return json.dumps([universe.config.__dict__, cfg.model.__dict__,
                       {k: v for k, v in cfg.optimizer.__dict__.items()
                        if k.startswith("pretrain") or k in ("warmup_fraction", "beta1", "beta2",
                                                             "eps", "weight_decay")},
                       int(seed)], sort_keys=True)


def foundation_model(universe, cfg, seed):
    """Pretrained model (+ frozen baseline) for ``seed``, memoised per process."""
    key = _pretrain_key(universe, cfg, seed)
    hit = _PRETRAIN_CACHE.get(key)
    if hit is None:
        model = build_model(cfg.model.block_spec, universe.input_dim, universe.num_classes,
                            seed=[int(seed), _INIT],
                            temperature=cfg.model.temperature)
        model, frozen = pretrain(model, universe, cfg, seed)
        if len(_PRETRAIN_CACHE) >= _PRETRAIN_CACHE_SIZE:
            _PRETRAIN_CACHE.pop(next(iter(_PRETRAIN_CACHE)))
        hit = _PRETRAIN_CACHE[key] = (model.theta.copy(), frozen)
        return model, frozen
    theta, frozen = hit
    model = Model(cfg.model.block_spec, universe.input_dim, universe.num_classes, theta.copy())
    return model, frozen


def replay_capacity(universe, fraction):
    total = sum(len(t.train) for t in universe.stream.tasks)
    return int(round(fraction * total))


def run_sequence(cfg, universe, seed, pretrained=None, on_record=None, on_mask=None):
    """One seed through the whole stream.

    ``pretrained`` is an optional ``(model, FrozenBaseline)``; it is copied,
    never mutated. ``on_record`` is called with each JSON record as produced,
    ``on_mask`` with ``(task_index, SelectionMask)`` before each task trains.
    Returns ``(RunReport, model, buffer, mas)``.
    """
    if pretrained is None:
        model, frozen = foundation_model(universe, cfg, seed)
    else:
        model, frozen = pretrained[0].copy(), pretrained[1]
    T = len(universe.stream)
    matrix = AccuracyMatrix(T, frozen.h0)
    chash = cfg.config_hash()
    report = RunReport(int(seed), cfg.baseline_tag, chash, matrix, frozen)
    run_id = f"{cfg.run.baseline}-{chash[:8]}-s{seed}"

    buffer = (ReplayBuffer(replay_capacity(universe, cfg.replay.capacity_fraction),
                           universe.input_dim) if cfg.replay.enabled else None)
    mas = (MasState.fresh(model.theta, cfg.mas.alpha, cfg.mas.lam)
           if cfg.mas.enabled and not cfg.full_finetune else None)
    if mas is not None and cfg.mas.conditional_priming:
        eligible = localize_layers(model.registry, cfg.selection.mode)
        prime_conditional(mas, model, universe.conditional, universe.pretrain_classes, eligible)

    def emit(rec):
        report.records.append(rec)
        if on_record is not None:
            on_record(rec)

    for t, task in enumerate(universe.stream.tasks):
        try:
            eligible, mask = select_mask(model, task, cfg, seed, t)
            if on_mask is not None:
                on_mask(t, mask)
            report.task_logs.append(learn_task(model, task, buffer, mas, cfg, seed, t,
                                               eligible, mask))
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"{type(exc).__name__}: {exc}", seed=seed, task=t) from exc
        seen = universe.stream.classes_through(t)
        for j in range(t + 1):
            tj = universe.stream.tasks[j]
            matrix.set(t, j, evaluate_accuracy(model, tj.test.features, tj.test.labels, seen))
        matrix.h[t] = evaluate_accuracy(model, universe.control.features,
                                        universe.control.labels, universe.pretrain_classes)
        emit({"record": "task", "run_id": run_id, "seed": int(seed),
              "baseline": cfg.baseline_tag, "task_index": t,
              "avg_acc_so_far": average_accuracy(matrix, upto=t),
              "per_task_acc": matrix.row(t).tolist(), "holdout_acc": float(matrix.h[t]),
              "mask_size": report.task_logs[-1].mask_size, "config_hash": chash})

    emit({"record": "final", "run_id": run_id, "seed": int(seed), "baseline": cfg.baseline_tag,
          "task_index": T - 1, "avg_acc_so_far": report.avg_acc,
          "per_task_acc": matrix.row(T - 1).tolist(), "holdout_acc": report.holdout_final,
          "config_hash": chash, **report.summary(), "h0": frozen.h0,
          "frozen_final_acc": frozen.final_acc, "accuracy_matrix": matrix.rows()})
    return report, model, buffer, mas


_AGG_KEYS = ("avg_acc", "forgetting", "holdout_final", "acc_impr", "holdout_impr")


def aggregate(reports, cfg):
    """Mean and (population) std of the summary metrics over seeds."""
    out = {"record": "aggregate", "baseline": cfg.baseline_tag,
           "config_hash": cfg.config_hash(), "seeds": [r.seed for r in reports]}
    for k in _AGG_KEYS:
        vals = [getattr(r, k) for r in reports]
        if any(v is None for v in vals):
            out[k] = out[k + "_std"] = None
        else:
            out[k] = float(np.mean(vals))
            out[k + "_std"] = float(np.std(vals))
    return out
