"""Bipartite matching and the training loss terms.

Ground truth is padded with no-object rows to the query count, a cost matrix
scores every (gt row, prediction) pair, and a Hungarian solve picks the
assignment. The matching cost's token term uses the plain inner product with
softmax probabilities (no log); the training soft-token loss uses
cross-entropy. These are deliberately different expressions.

All loss terms are built on Tensor ops so gradients flow to the model; the
discrete assignment itself is computed on detached numpy values and held
fixed, so no gradient crosses it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .descriptions import TaskDescription
from .model import PredictionSet, ModelConfig


# -- hungarian ----------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    """Row-to-column map; row i of the cost matrix is assigned column
    sigma[i]. cost sums the real (unpadded) rows only."""
    sigma: np.ndarray
    cost: float


def _solve_square(C: np.ndarray):
    """Shortest-augmenting-path assignment on a square matrix. Returns
    (col_of_row, row potentials u, column potentials v) with
    u[i] + v[j] <= C[i, j] and equality on matched edges."""
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j; 0 = free
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _lex_smallest_matching(zero: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside a boolean edge set,
    starting from a known perfect matching. Row order, then column order."""
    n = zero.shape[0]
    col_of_row = start.copy()
    row_of_col = np.empty(n, dtype=np.int64)
    row_of_col[col_of_row] = np.arange(n)

    def reroute(row, banned_cols, visited):
        # free `row` onto some other allowed column, recursively
        for j in np.flatnonzero(zero[row]):
            if j in banned_cols or j in visited:
                continue
            visited.add(j)
            owner = row_of_col[j]
            if owner == row:
                continue
            if owner < 0 or reroute(owner, banned_cols, visited):
                col_of_row[row] = j
                row_of_col[j] = row
                return True
        return False

    fixed_cols = set()
    for i in range(n):
        for j in np.flatnonzero(zero[i]):
            j = int(j)
            if j in fixed_cols:
                continue
            if col_of_row[i] == j:
                break
            owner = row_of_col[j]
            # tentatively give column j to row i and reroute the owner
            saved_c, saved_r = col_of_row.copy(), row_of_col.copy()
            old = col_of_row[i]
            row_of_col[old] = -1
            col_of_row[i] = j
            row_of_col[j] = i
            if reroute(owner, fixed_cols | {j}, {j}):
                break
            col_of_row, row_of_col = saved_c, saved_r
        fixed_cols.add(int(col_of_row[i]))
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment. Rows must not outnumber columns; rectangular
    input is padded to square with a constant sentinel row (a constant cannot
    change the optimum over real rows). Ties are broken deterministically:
    among optimal assignments, the one whose column choice is smallest for
    row 0, then row 1, and so on."""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"hungarian: need a matrix, got shape {C.shape}")
    if np.isnan(C).any():
        raise ValueError("hungarian: NaN in cost matrix")
    if not np.isfinite(C).all():
        raise ValueError("hungarian: non-finite cost")
    r, c = C.shape
    if r > c:
        raise ValueError(f"hungarian: more rows than columns ({r} > {c})")
    scale = max(1.0, float(np.abs(C).max())) if C.size else 1.0
    full = C
    if r < c:
        sentinel = scale + 1.0
        full = np.vstack([C, np.full((c - r, c), sentinel)])

    col_of_row, u, v = _solve_square(full)
    # complementary slackness: every optimal assignment lives on the
    # zero-reduced-cost edges of an optimal dual
    eps = 1e-9 * max(1.0, scale)
    zero = (full - u[:, None] - v[None, :]) <= eps
    col_of_row = _lex_smallest_matching(zero, col_of_row)

    sigma = col_of_row[:r]
    return Assignment(sigma, float(C[np.arange(r), sigma].sum()))


# -- ground truth -------------------------------------------------------------

@dataclass
class GroundTruthSet:
    boxes: np.ndarray       # (n_gt, 4)
    masks: np.ndarray       # (n_gt, H, W) binary
    spans: np.ndarray       # (n_gt, n_max) rows sum to 1, no-object entry 0
    categories: tuple = ()
    scene_id: int = -1

    @property
    def n_gt(self):
        return len(self.boxes)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.spans = np.asarray(self.spans, dtype=np.float64)
        if self.n_gt:
            if not np.allclose(self.spans.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("span rows must sum to 1")
            if np.any(self.spans[:, -1] != 0.0):
                raise ValueError("real objects carry no no-object mass")


def ground_truth_from_objects(boxes, masks, desc: TaskDescription,
                              n_max: int, categories=(), scene_id=-1
                              ) -> GroundTruthSet:
    """Span targets are uniform over the whole description's token
    positions."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n_gt = len(boxes)
    n_l = len(desc)
    if n_l >= n_max:
        raise ValueError(f"description length {n_l} must stay below "
                         f"n_max={n_max}")
    spans = np.zeros((n_gt, n_max), dtype=np.float64)
    if n_gt:
        spans[:, :n_l] = 1.0 / n_l
    return GroundTruthSet(boxes, np.asarray(masks, dtype=np.float64),
                          spans, tuple(categories), scene_id)


def no_object_span(n_max: int) -> np.ndarray:
    s = np.zeros(n_max, dtype=np.float64)
    s[-1] = 1.0
    return s


# -- matching cost -------------------------------------------------------------

def matching_cost(gt: GroundTruthSet, boxes: np.ndarray,
                  logits: np.ndarray) -> np.ndarray:
    """(n_pred, n_pred) cost matrix: rows are gt objects padded with
    no-object rows, columns are predictions. Real rows:
    L1 + GIoU-loss + negative span/softmax inner product. Padded rows: 0."""
    n_pred = len(boxes)
    if gt.n_gt > n_pred:
        raise ValueError(f"{gt.n_gt} objects exceed {n_pred} queries")
    cost = np.zeros((n_pred, n_pred), dtype=np.float64)
    if gt.n_gt == 0:
        return cost
    boxes = np.asarray(boxes, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    l1 = np.abs(gt.boxes[:, None, :] - boxes[None, :, :]).sum(axis=2)
    giou = geo.giou_loss_matrix(gt.boxes, boxes)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    token_m = -(gt.spans @ probs.T)
    cost[:gt.n_gt] = l1 + giou + token_m
    return cost


# -- loss terms ----------------------------------------------------------------

def loss_l1_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Per-pair sum of absolute coordinate differences, shape (k,)."""
    diff = pred_boxes - pred_boxes.tape.constant(
        np.asarray(gt_boxes, dtype=pred_boxes.tape.dtype))
    return ad.sum_(ad.abs_(diff), axis=1)


def loss_dice_pairs(mask_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """1 - (2 sum(m * sig(x)) + 1) / (sum sig(x) + sum m + 1) per pair;
    smoothing applied once to the summed numerator and denominator."""
    k = mask_logits.shape[0]
    x = mask_logits.reshape(k, -1)
    m = x.tape.constant(np.asarray(gt_masks, dtype=x.tape.dtype).reshape(k, -1))
    s = ad.sigmoid(x)
    num = ad.scale(ad.sum_(s * m, axis=1), 2.0) + 1.0
    den = ad.sum_(s, axis=1) + ad.sum_(m, axis=1) + 1.0
    return 1.0 - num / den


def loss_focal_pairs(mask_logits: Tensor, gt_masks: np.ndarray,
                     alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over cells of -alpha_t (1 - p_t)^gamma log p_t per pair. The log
    terms use softplus so confident-wrong cells stay finite."""
    k = mask_logits.shape[0]
    x = mask_logits.reshape(k, -1)
    tape = x.tape
    m = np.asarray(gt_masks, dtype=tape.dtype).reshape(k, -1)
    m_c = tape.constant(m)
    alpha_t = tape.constant(alpha * m + (1.0 - alpha) * (1.0 - m))
    p = ad.sigmoid(x)
    p_t = p * m_c + (1.0 - p) * (1.0 - m_c)
    # -log p_t = m * softplus(-x) + (1 - m) * softplus(x)
    neg_log_pt = m_c * ad.softplus(-x) + (1.0 - m_c) * ad.softplus(x)
    cell = alpha_t * ad.pow_const(1.0 - p_t, gamma) * neg_log_pt
    return ad.mean_(cell, axis=1)


def loss_soft_token(logits: Tensor, span_targets: np.ndarray) -> Tensor:
    """Cross-entropy of every prediction's logit row against its span target
    (the no-object indicator for unmatched rows), averaged over predictions."""
    t = logits.tape.constant(np.asarray(span_targets, dtype=logits.tape.dtype))
    ls = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum_(t * ls), -1.0 / logits.shape[0])


def loss_contrastive_align(align_obj: Tensor, align_tok: Tensor,
                           matched_queries, tau: float) -> Tensor:
    """Symmetric InfoNCE between projected, L2-normalized query and token
    features. Every token is a positive for every matched query. Queries
    matched to no-object contribute nothing; no matches -> 0."""
    tape = align_obj.tape
    matched = sorted(int(i) for i in matched_queries)
    if not matched:
        return tape.constant(0.0)
    if align_tok.shape[0] == 0:
        raise ValueError("matched objects but empty description")
    sim = ad.scale(ad.matmul(align_obj, align_tok.transpose(1, 0)), 1.0 / tau)
    obj_to_tok = ad.log_softmax(sim, axis=1)
    tok_to_obj = ad.log_softmax(sim, axis=0)
    d1 = ad.mean_(ad.take_rows(obj_to_tok, matched))
    d2 = ad.mean_(ad.take_rows(tok_to_obj, matched))
    return ad.scale(d1 + d2, -0.5)


@dataclass(frozen=True)
class LossWeights:
    """Eq-style weighting of the six terms plus focal/alignment constants."""
    l1: float = 5.0
    giou: float = 2.0
    dice: float = 1.0
    focal: float = 1.0
    token: float = 1.0
    align: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    tau: float = 0.07

    def __post_init__(self):
        for name in ("l1", "giou", "dice", "focal", "token", "align"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative loss weight {name}")


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict            # float values per term, summed over blocks
    assignments: list      # Assignment per block (last = final)

    @property
    def final_assignment(self) -> Assignment:
        return self.assignments[-1]


def loss_total(gt: GroundTruthSet, pred: PredictionSet, weights: LossWeights,
               include_aux: bool = True,
               fixed_assignments: list = None) -> LossBreakdown:
    """Weighted sum over the final block (and every auxiliary block when
    include_aux, each with an independent matching). fixed_assignments skips
    the Hungarian solve and reuses a previous matching, one per block — the
    assignment is a step function of the inputs, so gradient checks must hold
    it fixed."""
    blocks = pred.blocks if include_aux else pred.blocks[-1:]
    tape = pred.blocks[-1].logits.tape
    n_pred, n_max = pred.blocks[-1].logits.shape
    if fixed_assignments is not None and len(fixed_assignments) != len(blocks):
        raise ValueError("need one fixed assignment per supervised block")

    total = tape.constant(0.0)
    parts = {k: 0.0 for k in ("l1", "giou", "dice", "focal", "token", "align")}
    assignments = []

    for bi, block in enumerate(blocks):
        if fixed_assignments is not None:
            assign = fixed_assignments[bi]
        else:
            cost = matching_cost(gt, block.boxes.data, block.logits.data)
            assign = hungarian(cost)
        assignments.append(assign)
        matched = assign.sigma[:gt.n_gt]

        block_total = tape.constant(0.0)
        if gt.n_gt:
            inv = 1.0 / gt.n_gt
            boxes_m = ad.take_rows(block.boxes, matched)
            l1 = ad.scale(ad.sum_(loss_l1_pairs(boxes_m, gt.boxes)), inv)
            giou = ad.scale(ad.sum_(geo.giou_loss_pairs(
                boxes_m, gt.boxes.astype(np.float64))), inv)
            k = gt.n_gt
            masks_m = ad.take_rows(
                block.mask_logits.reshape(n_pred, -1), matched)
            dice = ad.scale(ad.sum_(loss_dice_pairs(
                masks_m.reshape(k, *gt.masks.shape[1:]), gt.masks)), inv)
            focal = ad.scale(ad.sum_(loss_focal_pairs(
                masks_m.reshape(k, *gt.masks.shape[1:]), gt.masks,
                weights.focal_alpha, weights.focal_gamma)), inv)
            block_total = block_total + ad.scale(l1, weights.l1) \
                + ad.scale(giou, weights.giou) + ad.scale(dice, weights.dice) \
                + ad.scale(focal, weights.focal)
            parts["l1"] += l1.item()
            parts["giou"] += giou.item()
            parts["dice"] += dice.item()
            parts["focal"] += focal.item()

        span_targets = np.tile(no_object_span(n_max), (n_pred, 1))
        span_targets[matched] = gt.spans
        token = loss_soft_token(block.logits, span_targets)
        block_total = block_total + ad.scale(token, weights.token)
        parts["token"] += token.item()

        align = loss_contrastive_align(block.align_obj, pred.align_tok,
                                       matched, weights.tau)
        block_total = block_total + ad.scale(align, weights.align)
        parts["align"] += align.item()

        total = total + block_total

    parts["total"] = total.item()
    return LossBreakdown(total, parts, assignments)
