"""Optimization engine: Adam, batched epochs, and the distillation schedule.

Everything trains in float32 with gradient accumulation over a batch and
one optimizer step per batch. Sample order is a pure function of
(seed, epoch), and the optimizer's moment buffers live in float32, so a
checkpoint round trip resumes bit-exactly.

The teacher and student of a distillation epoch share the batch schedule but
keep separate parameter sets, tapes, and optimizers; with every distillation
flag disabled the student's loss trace is identical to a plain verb-pronoun
training run at the same seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .distill import (DistillFlags, DistillWeights, MemoryBank,
                      distill_losses)
from .losses import LossWeights, loss_total
from .model import ModelConfig, forward, wrap_params
from .synthdata import Dataset, to_ground_truth

FORM_NOUN = "noun"
FORM_PRONOUN = "pronoun"


class NonFiniteLossError(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries the offending
    batch for the diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


class Adam:
    """Adam with float32 state; updates parameter arrays in place."""

    def __init__(self, params: dict, settings: OptimizerSettings = None):
        self.settings = settings or OptimizerSettings()
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float32)
                  for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float32)
                  for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        s = self.settings
        self.t += 1
        # all scalars in float32 so the update is bit-reproducible
        b1, b2 = np.float32(s.beta1), np.float32(s.beta2)
        one = np.float32(1.0)
        lr, eps = np.float32(s.lr), np.float32(s.eps)
        c1 = one - np.float32(s.beta1 ** self.t)
        c2 = one - np.float32(s.beta2 ** self.t)
        for name, g in grads.items():
            p = params[name]
            g = np.asarray(g, dtype=np.float32)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (one - b1) * g
            v *= b2
            v += (one - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state(self) -> dict:
        return {"t": self.t, "settings": asdict(self.settings),
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    @classmethod
    def from_state(cls, params: dict, st: dict) -> "Adam":
        opt = cls(params, OptimizerSettings(**st["settings"]))
        opt.t = int(st["t"])
        for k in opt.m:
            opt.m[k][...] = st["m"][k]
            opt.v[k][...] = st["v"][k]
        return opt


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17, epoch)))
    return rng.permutation(n)


def _batches(order, size):
    if size < 1:
        raise ValueError("batch size must be positive")
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _accumulate(acc: dict, leaves: dict) -> None:
    for name, leaf in leaves.items():
        if leaf.grad is None:
            continue
        if name in acc:
            acc[name] += leaf.grad
        else:
            acc[name] = leaf.grad.copy()


def _check_finite(value, context):
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss {value} at {context}", diagnostics=context)


def _guard(fn, context):
    """Matcher guards reject non-finite costs with ValueError before a loss
    exists; promote those to the training abort."""
    try:
        return fn()
    except ValueError as e:
        msg = str(e)
        if "NaN" in msg or "finite" in msg:
            raise NonFiniteLossError(f"{msg} at {context}",
                                     diagnostics=context) from e
        raise


def _desc_for(sample, form):
    if form == FORM_NOUN:
        return sample.noun_desc
    if form == FORM_PRONOUN:
        return sample.pron_desc
    raise ValueError(f"form must be noun|pronoun, got {form!r}")


def train_epoch(params: dict, opt: Adam, dataset: Dataset,
                config: ModelConfig, weights: LossWeights, *, form: str,
                seed: int, epoch: int, batch_size: int = 8) -> dict:
    """One pass over the dataset; returns mean loss terms."""
    if tuple(config.grid) != dataset.grid:
        raise ValueError(f"config grid {config.grid} != dataset grid "
                         f"{dataset.grid}")
    order = epoch_permutation(seed, epoch, len(dataset.samples))
    totals = {}
    for batch in _batches(order, batch_size):
        acc = {}
        for idx in batch:
            s = dataset.samples[int(idx)]
            tape = Tape(np.float32)
            leaves = wrap_params(tape, params)
            pred = forward(s.features, _desc_for(s, form), leaves, config,
                           tape=tape)
            gt = to_ground_truth(s, config.n_max, dataset.grid)
            ctx = {"epoch": epoch, "scene_id": s.scene_id, "form": form}
            out = _guard(lambda: loss_total(gt, pred, weights), ctx)
            val = out.total.item()
            _check_finite(val, {**ctx, "parts": out.parts})
            ad.backward(out.total)
            _accumulate(acc, leaves)
            for k, v in out.parts.items():  # parts includes "total"
                totals[k] = totals.get(k, 0.0) + v
        scale = np.float32(1.0 / len(batch))
        opt.step(params, {k: g * scale for k, g in acc.items()})
    n = len(dataset.samples)
    return {k: v / n for k, v in totals.items()}


def distill_epoch(teacher: dict, student: dict, opt_t: Adam, opt_s: Adam,
                  dataset: Dataset, config: ModelConfig, bank: MemoryBank,
                  weights: LossWeights, dweights: DistillWeights,
                  flags: DistillFlags, *, seed: int, epoch: int,
                  batch_size: int = 8, train_teacher: bool = True,
                  update_bank: bool = True):
    """One joint pass; returns (teacher terms, student terms). The student's
    schedule matches train_epoch exactly, so disabling every flag reproduces
    its loss trace."""
    if tuple(config.grid) != dataset.grid:
        raise ValueError(f"config grid {config.grid} != dataset grid "
                         f"{dataset.grid}")
    order = epoch_permutation(seed, epoch, len(dataset.samples))
    t_totals, s_totals = {}, {}
    for batch in _batches(order, batch_size):
        acc_t, acc_s = {}, {}
        for idx in batch:
            s = dataset.samples[int(idx)]
            t_leaves = wrap_params(Tape(np.float32), teacher,
                                   trainable=train_teacher)
            s_leaves = wrap_params(Tape(np.float32), student)
            gt = to_ground_truth(s, config.n_max, dataset.grid)
            ctx = {"epoch": epoch, "scene_id": s.scene_id}
            out = _guard(lambda: distill_losses(
                s.features, s.noun_desc, s.pron_desc, gt, t_leaves, s_leaves,
                config, bank, weights, dweights, flags, seed=seed,
                teacher_trainable=train_teacher, update_bank=update_bank),
                ctx)
            t_val = out.teacher_total.item()
            s_val = out.student_total.item()
            _check_finite(t_val, {**ctx, "side": "teacher"})
            _check_finite(s_val, {**ctx, "side": "student",
                                  "cluster": out.cluster_value,
                                  "binary": out.binary_value})
            if train_teacher:
                ad.backward(out.teacher_total)
                _accumulate(acc_t, t_leaves)
            ad.backward(out.student_total)
            _accumulate(acc_s, s_leaves)
            t_totals["total"] = t_totals.get("total", 0.0) + t_val
            s_totals["total"] = s_totals.get("total", 0.0) + s_val
            s_totals["cluster"] = s_totals.get("cluster", 0.0) \
                + out.cluster_value
            s_totals["binary"] = s_totals.get("binary", 0.0) \
                + out.binary_value
            s_totals["replaced"] = s_totals.get("replaced", 0.0) \
                + (out.student_mode != "plain")
        scale = np.float32(1.0 / len(batch))
        if train_teacher and acc_t:
            opt_t.step(teacher, {k: g * scale for k, g in acc_t.items()})
        opt_s.step(student, {k: g * scale for k, g in acc_s.items()})
    n = len(dataset.samples)
    return ({k: v / n for k, v in t_totals.items()},
            {k: v / n for k, v in s_totals.items()})
