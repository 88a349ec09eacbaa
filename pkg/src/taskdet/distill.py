"""Noun-to-pronoun feature distillation.

A teacher reads verb-noun descriptions and a student reads verb-pronoun
descriptions of the same scenes. The teacher's encoded noun features are
queued in a per-task memory bank and clustered into K prototypes; the
student's pronoun feature is swapped for its nearest prototype, pulled toward
it by a cluster loss, and the student's binary query probabilities are pulled
toward the teacher's through a KL term after Hungarian alignment of the two
query sets.

Gradient flow is one-way by construction: bank contents and prototypes are
detached teacher by-products, and the teacher's probabilities enter the KL
as constants, so a student-side backward leaves teacher parameters untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tape, Tensor
from .descriptions import FORM_PRONOUN, TaskDescription
from .losses import (Assignment, GroundTruthSet, LossBreakdown, LossWeights,
                     hungarian, loss_total)
from .model import (MODE_PLAIN, MODE_REPLACE_PROTOTYPE, ModelConfig,
                    PredictionSet, binary_probs, forward,
                    no_object_probabilities, preference_score)

POLICY_REPLACE_CLOSEST = "replace-closest"
POLICY_FIFO = "fifo"

KL_EPS = 1e-12


# -- memory bank ---------------------------------------------------------------

class MemoryBank:
    """Per-task bounded queues of teacher noun features with cached K-means
    prototypes. Single-writer: updates invalidate the prototype cache."""

    def __init__(self, n_tasks: int, n_mem: int, k: int, d: int,
                 policy: str = POLICY_REPLACE_CLOSEST):
        if policy not in (POLICY_REPLACE_CLOSEST, POLICY_FIFO):
            raise ValueError(f"unknown eviction policy {policy!r}")
        if n_mem < 1 or k < 1 or n_tasks < 1:
            raise ValueError("n_tasks, n_mem and k must be positive")
        self.n_tasks = n_tasks
        self.n_mem = n_mem
        self.k = k
        self.d = d
        self.policy = policy
        self._store = np.zeros((n_tasks, n_mem, d), dtype=np.float32)
        self._len = np.zeros(n_tasks, dtype=np.int64)
        self.counts = np.zeros(n_tasks, dtype=np.int64)  # total insertions
        self._cache = {}

    def _check_task(self, task_id):
        if not 0 <= task_id < self.n_tasks:
            raise ValueError(f"task id {task_id} outside [0, {self.n_tasks})")

    def queue_len(self, task_id: int) -> int:
        self._check_task(task_id)
        return int(self._len[task_id])

    def queue(self, task_id: int) -> np.ndarray:
        self._check_task(task_id)
        return self._store[task_id, :self._len[task_id]].copy()

    def ready(self, task_id: int) -> bool:
        return self.queue_len(task_id) >= self.k

    def update(self, task_id: int, feature) -> None:
        self._check_task(task_id)
        f = np.asarray(feature, dtype=np.float32).reshape(-1)
        if f.shape[0] != self.d:
            raise ValueError(f"feature width {f.shape[0]}, bank expects {self.d}")
        q, n = self._store[task_id], int(self._len[task_id])
        if n < self.n_mem:
            q[n] = f
            self._len[task_id] = n + 1
        else:
            if self.policy == POLICY_REPLACE_CLOSEST:
                d2 = ((q - f[None, :]).astype(np.float64) ** 2).sum(axis=1)
                evict = int(np.argmin(d2))
            else:
                evict = 0  # rows are kept in insertion order
            q[evict:-1] = q[evict + 1:]
            q[-1] = f
        self.counts[task_id] += 1
        self._cache.pop(task_id, None)

    def prototypes(self, task_id: int, seed: int) -> np.ndarray:
        """K cluster centers of the task's queue; cached until the next
        update."""
        self._check_task(task_id)
        hit = self._cache.get(task_id)
        if hit is not None and hit[0] == seed:
            return hit[1]
        n = int(self._len[task_id])
        if n < self.k:
            raise ValueError(f"task {task_id} holds {n} features, "
                             f"clustering needs >= {self.k}")
        centers = kmeans(self._store[task_id, :n], self.k, seed).centers
        centers = centers.astype(np.float32)
        self._cache[task_id] = (seed, centers)
        return centers

    def state(self) -> dict:
        return {
            "n_tasks": self.n_tasks, "n_mem": self.n_mem, "k": self.k,
            "d": self.d, "policy": self.policy,
            "store": self._store.copy(), "lengths": self._len.copy(),
            "counts": self.counts.copy(),
        }

    @classmethod
    def from_state(cls, st: dict) -> "MemoryBank":
        bank = cls(st["n_tasks"], st["n_mem"], st["k"], st["d"], st["policy"])
        bank._store[...] = st["store"]
        bank._len[...] = st["lengths"]
        bank.counts[...] = st["counts"]
        return bank


# -- K-means -------------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray       # (k, d)
    labels: np.ndarray        # (n,)
    inertia: float            # at the returned centers/labels
    trace: list               # per-iteration assignment inertia


def _seed_centers(pts, k, rng):
    n = pts.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(k - 1):
        d2 = ((pts[:, None, :] - pts[chosen][None, :, :]) ** 2).sum(-1).min(1)
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            chosen.append(chosen[-1])
            continue
        chosen.append(int(rng.choice(n, p=d2 / total)))
    return pts[chosen].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding. Stops when the relative
    inertia improvement drops below tol. Empty clusters are reseeded at the
    point currently farthest from its center."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be (n, d), got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _seed_centers(pts, k, rng)

    trace = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        residual = d2[np.arange(n), labels]
        inertia = float(residual.sum())
        trace.append(inertia)
        if len(trace) > 1 and trace[-2] - inertia <= tol * max(trace[-2], tol):
            break
        residual = residual.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = pts[mask].mean(axis=0)
            else:
                far = int(np.argmax(residual))
                centers[j] = pts[far]
                residual[far] = -1.0

    # make the returned centers exactly the means of the final assignment
    for j in range(k):
        mask = labels == j
        if mask.any():
            centers[j] = pts[mask].mean(axis=0)
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centers, labels, inertia, trace)


# -- prototype selection and cluster loss ---------------------------------------

def select_prototype(prototypes, query):
    """(index, prototype) of the Euclidean-nearest prototype; ties go to the
    lowest index."""
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ValueError(f"need a (k, d) prototype table, got {protos.shape}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    d2 = ((protos - q[None, :]) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    return idx, protos[idx]


def cluster_loss(pronoun_feature: Tensor, prototype) -> Tensor:
    """Euclidean distance from the student's pronoun feature to the selected
    prototype. The prototype is a constant: gradient reaches the pronoun
    feature only."""
    tape = pronoun_feature.tape
    target = tape.constant(np.asarray(prototype, dtype=tape.dtype).reshape(-1))
    diff = pronoun_feature.reshape(-1) - target
    return ad.sqrt(ad.sum_(diff * diff))


# -- binary probabilities and KL -------------------------------------------------

def binary_prob_rows(logits: Tensor):
    """(positive, no-object) probability vectors over query rows, as tensors
    on the logits' tape (stable log-softmax route)."""
    ls = ad.log_softmax(logits, axis=-1)
    neg = ad.exp(ls[:, -1])
    return 1.0 - neg, neg


def kl_binary(p_t, p_s) -> float:
    """KL between two (positive, no-object) pairs, entries clamped at
    1e-12. Plain-number form used for matching costs and oracles."""
    pt = np.clip(np.asarray(p_t, dtype=np.float64), KL_EPS, None)
    ps = np.clip(np.asarray(p_s, dtype=np.float64), KL_EPS, None)
    return float((pt * (np.log(pt) - np.log(ps))).sum())


@dataclass(frozen=True)
class DistillWeights:
    """Cluster/binary term weights plus the teacher-student matching mix."""
    cluster: float = 1.0e4
    binary: float = 50.0
    ts_l1: float = 5.0
    ts_giou: float = 2.0
    ts_kl: float = 1.0

    def __post_init__(self):
        for name in ("cluster", "binary", "ts_l1", "ts_giou", "ts_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative distillation weight {name}")


def ts_match(teacher: PredictionSet, student: PredictionSet,
             dweights: DistillWeights = DistillWeights()) -> Assignment:
    """Hungarian alignment of teacher queries to student queries under
    w_l1 * L1 + w_giou * GIoU + w_kl * KL of binary probabilities."""
    tb = np.asarray(teacher.boxes.data, dtype=np.float64)
    sb = np.asarray(student.boxes.data, dtype=np.float64)
    if tb.shape != sb.shape:
        raise ValueError("teacher and student query counts differ")
    l1 = np.abs(tb[:, None, :] - sb[None, :, :]).sum(axis=2)
    giou = geo.giou_loss_matrix(tb, sb)
    tn = np.clip(no_object_probabilities(teacher.logits.data), KL_EPS, None)
    sn = np.clip(no_object_probabilities(student.logits.data), KL_EPS, None)
    tp, sp = np.clip(1.0 - tn, KL_EPS, None), np.clip(1.0 - sn, KL_EPS, None)
    kl = (tp[:, None] * (np.log(tp)[:, None] - np.log(sp)[None, :])
          + tn[:, None] * (np.log(tn)[:, None] - np.log(sn)[None, :]))
    return hungarian(dweights.ts_l1 * l1 + dweights.ts_giou * giou
                     + dweights.ts_kl * kl)


def soft_binary_target_loss(teacher_logits, student_logits: Tensor,
                            sigma) -> Tensor:
    """Sum of binary KL terms between teacher query i and student query
    sigma[i]; the teacher side is a constant."""
    sigma = np.asarray(sigma, dtype=np.int64)
    tn = np.clip(no_object_probabilities(teacher_logits), KL_EPS, None)
    tp = np.clip(1.0 - tn, KL_EPS, None)
    entropy = float((tp * np.log(tp) + tn * np.log(tn)).sum())

    pos, neg = binary_prob_rows(ad.take_rows(student_logits, sigma))
    log_pos = ad.log(ad.clamp(pos, lo=KL_EPS))
    log_neg = ad.log(ad.clamp(neg, lo=KL_EPS))
    tape = student_logits.tape
    cross = ad.sum_(tape.constant(tp) * log_pos) \
        + ad.sum_(tape.constant(tn) * log_neg)
    return entropy - cross


# -- the distillation step -------------------------------------------------------

@dataclass
class DistillFlags:
    """Independent toggles for the three student-side mechanisms."""
    replace: bool = True
    cluster: bool = True
    binary: bool = True


@dataclass
class DistillOutcome:
    teacher: LossBreakdown
    student: LossBreakdown
    teacher_pred: PredictionSet
    student_pred: PredictionSet
    teacher_total: Tensor
    student_total: Tensor
    cluster_value: float = 0.0
    binary_value: float = 0.0
    student_mode: str = MODE_PLAIN
    ts_assignment: Assignment = None


def _tape_of(params: dict) -> Tape:
    """Pre-wrapped parameter dicts carry their tape; plain arrays get a fresh
    one (teacher and student must never share a tape)."""
    for v in params.values():
        if isinstance(v, Tensor):
            return v.tape
    return Tape(np.float32)


def distill_losses(scene_features, noun_desc: TaskDescription,
                   pron_desc: TaskDescription, gt: GroundTruthSet,
                   teacher_params: dict, student_params: dict,
                   config: ModelConfig, bank: MemoryBank,
                   weights: LossWeights, dweights: DistillWeights,
                   flags: DistillFlags, seed: int,
                   include_aux: bool = True, teacher_trainable: bool = True,
                   update_bank: bool = True) -> DistillOutcome:
    """One sample of paired teacher/student supervision.

    Teacher forward (noun description) -> bank update (scenes with targets
    only) -> student forward (pronoun description, prototype-swapped when the
    bank is ready) -> per-side totals. Teacher and student run on separate
    tapes; the caller backpropagates each total on its own side.
    """
    if noun_desc.task_id != pron_desc.task_id:
        raise ValueError("teacher and student descriptions disagree on task")
    task = pron_desc.task_id
    t_tape, s_tape = _tape_of(teacher_params), _tape_of(student_params)
    if t_tape is s_tape:
        raise ValueError("teacher and student parameters share a tape")

    t_pred = forward(scene_features, noun_desc, teacher_params, config,
                     tape=t_tape, trainable=teacher_trainable)
    t_loss = loss_total(gt, t_pred, weights, include_aux)

    if update_bank and gt.n_gt > 0:
        bank.update(task, t_pred.special_feature().data)

    ready = bank.ready(task)
    need_protos = ready and (flags.replace or flags.cluster)
    protos = bank.prototypes(task, seed + task) if need_protos else None
    mode = MODE_REPLACE_PROTOTYPE if (flags.replace and ready) else MODE_PLAIN
    s_pred = forward(scene_features, pron_desc, student_params, config,
                     tape=s_tape, mode=mode,
                     prototypes=protos if mode == MODE_REPLACE_PROTOTYPE
                     else None)
    s_loss = loss_total(gt, s_pred, weights, include_aux)
    student_total = s_loss.total

    cluster_value = 0.0
    if flags.cluster and ready:
        if s_pred.prototype is not None:
            proto = s_pred.prototype  # forward already selected the nearest
        else:
            pron = s_pred.text_features.data[pron_desc.special_positions[0]]
            proto = select_prototype(protos, pron)[1]
        lc = cluster_loss(s_pred.special_feature(), proto)
        student_total = student_total + ad.scale(lc, dweights.cluster)
        cluster_value = lc.item()

    binary_value, assignment = 0.0, None
    if flags.binary:
        assignment = ts_match(t_pred, s_pred, dweights)
        lb = soft_binary_target_loss(t_pred.logits.data, s_pred.logits,
                                     assignment.sigma)
        student_total = student_total + ad.scale(lb, dweights.binary)
        binary_value = lb.item()

    return DistillOutcome(
        teacher=t_loss, student=s_loss,
        teacher_pred=t_pred, student_pred=s_pred,
        teacher_total=t_loss.total, student_total=student_total,
        cluster_value=cluster_value, binary_value=binary_value,
        student_mode=mode, ts_assignment=assignment)


def inference(scene_features, desc: TaskDescription, params: dict,
              config: ModelConfig, bank: MemoryBank, seed: int = 0,
              self_attention=None) -> PredictionSet:
    """Student-only forward against a frozen bank. The description must be
    noun-free; an unready bank falls back to the plain pronoun path."""
    if desc.form != FORM_PRONOUN:
        raise ValueError("inference needs a verb-pronoun description")
    task = desc.task_id
    if bank is not None and bank.ready(task):
        return forward(scene_features, desc, params, config,
                       mode=MODE_REPLACE_PROTOTYPE,
                       prototypes=bank.prototypes(task, seed + task),
                       trainable=False, self_attention=self_attention)
    warnings.warn(f"memory bank not ready for task {task}; "
                  "running the plain pronoun path")
    return forward(scene_features, desc, params, config, trainable=False,
                   self_attention=self_attention)
