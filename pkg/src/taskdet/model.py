"""The detection-segmentation transformer.

Pipeline: grid-cell features and text tokens are linearly embedded into a
joint sequence, run through pre-norm self-attention encoder blocks, then a
set of learned object queries cross-attends to the encoded sequence through
decoder blocks (with optional query self-attention). Three heads read each
decoder block's queries: a 3-layer detect head (sigmoid box), a 1-layer logit
head over n_max token slots (last slot = no-object), and a segment head that
scores each query against every visual token to form per-cell mask logits.

The forward pass exposes feature-surgery modes used by the distillation
experiments: the pronoun embedding (or its encoder output) can be swapped for
the paired noun feature or for a cluster prototype.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .descriptions import TaskDescription, FORM_EMPTY

MODE_PLAIN = "plain"
MODE_REPLACE_PRE = "replace-pre"
MODE_REPLACE_POST = "replace-post"
MODE_REPLACE_PROTOTYPE = "replace-prototype"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_heads: int = 4
    n_tr: int = 2
    n_pred: int = 8
    n_max: int = 16
    n_l_max: int = 12
    grid: tuple = (16, 16)
    feature_dim: int = 17
    vocab_size: int = 64
    contrast_dim: int = 16
    ffn_dim: int = 64
    activation: str = "relu"
    self_attention: bool = True

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_max <= self.n_l_max:
            raise ValueError(f"n_max={self.n_max} must exceed n_l_max={self.n_l_max}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_tr < 0 or self.n_pred < 1:
            raise ValueError("n_tr must be >= 0 and n_pred >= 1")

    @property
    def n_visual(self):
        return self.grid[0] * self.grid[1]

    @classmethod
    def toy(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale preset kept for fidelity runs; not exercised in tests."""
        base = dict(d=256, n_heads=8, n_tr=6, n_pred=100, n_max=256,
                    n_l_max=64, grid=(16, 16), feature_dim=17,
                    vocab_size=64, contrast_dim=64, ffn_dim=2048)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


# -- parameters ---------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _linear_params(rng, params, name, n_in, n_out):
    params[f"{name}.w"] = _uniform(rng, n_in, (n_in, n_out))
    params[f"{name}.b"] = np.zeros(n_out, dtype=np.float32)


def _ln_params(params, name, d):
    params[f"{name}.g"] = np.ones(d, dtype=np.float32)
    params[f"{name}.b"] = np.zeros(d, dtype=np.float32)


def _attn_params(rng, params, name, d):
    for part in ("q", "k", "v", "o"):
        _linear_params(rng, params, f"{name}.{part}", d, d)


def init_params(config: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d = config.d

    _linear_params(rng, p, "scene_proj", config.feature_dim, d)
    p["text.embed"] = rng.normal(0, 0.02, (config.vocab_size, d)).astype(np.float32)
    p["text.pos"] = rng.normal(0, 0.02, (config.n_l_max, d)).astype(np.float32)
    p["query.embed"] = rng.normal(0, 0.02, (config.n_pred, d)).astype(np.float32)

    for i in range(config.n_tr):
        _ln_params(p, f"enc{i}.ln1", d)
        _attn_params(rng, p, f"enc{i}.attn", d)
        _ln_params(p, f"enc{i}.ln2", d)
        _linear_params(rng, p, f"enc{i}.ffn.1", d, config.ffn_dim)
        _linear_params(rng, p, f"enc{i}.ffn.2", config.ffn_dim, d)

    for i in range(config.n_tr):
        _ln_params(p, f"dec{i}.ln_sa", d)
        _attn_params(rng, p, f"dec{i}.sa", d)
        _ln_params(p, f"dec{i}.ln_ca", d)
        _attn_params(rng, p, f"dec{i}.ca", d)
        _ln_params(p, f"dec{i}.ln_f", d)
        _linear_params(rng, p, f"dec{i}.ffn.1", d, config.ffn_dim)
        _linear_params(rng, p, f"dec{i}.ffn.2", config.ffn_dim, d)

    _ln_params(p, "dec.norm", d)
    _linear_params(rng, p, "head.detect.1", d, d)
    _linear_params(rng, p, "head.detect.2", d, d)
    _linear_params(rng, p, "head.detect.3", d, 4)
    _linear_params(rng, p, "head.logit", d, config.n_max)
    _linear_params(rng, p, "head.seg.q", d, d)
    _linear_params(rng, p, "head.seg.v", d, d)
    _linear_params(rng, p, "head.align.obj", d, config.contrast_dim)
    _linear_params(rng, p, "head.align.tok", d, config.contrast_dim)
    return p


def wrap_params(tape: Tape, params: dict, trainable: bool = True) -> dict:
    """Numpy arrays become tape leaves; already-wrapped Tensors pass through
    (so a caller can differentiate the model with externally built leaves)."""
    return {k: v if isinstance(v, Tensor) else
            tape.tensor(v, requires_grad=trainable)
            for k, v in params.items()}


@functools.lru_cache(maxsize=8)
def sinusoidal_grid_positions(grid: tuple, d: int) -> np.ndarray:
    """Fixed 2-D sin/cos table, one row per cell in row-major order. Half the
    channels encode the row coordinate, half the column."""
    H, W = grid
    half = d // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2, dtype=np.float64) / half)
    out = np.zeros((H, W, d), dtype=np.float64)
    rows = np.arange(H, dtype=np.float64)[:, None] * freqs[None, :]
    cols = np.arange(W, dtype=np.float64)[:, None] * freqs[None, :]
    out[:, :, 0:half:2] = np.sin(rows)[:, None, :]
    out[:, :, 1:half:2] = np.cos(rows)[:, None, :]
    out[:, :, half::2] = np.sin(cols)[None, :, :]
    out[:, :, half + 1::2] = np.cos(cols)[None, :, :]
    return out.reshape(H * W, d).astype(np.float32)


# -- building blocks ----------------------------------------------------------

def _linear(pt, name, x: Tensor) -> Tensor:
    return ad.matmul(x, pt[f"{name}.w"]) + pt[f"{name}.b"]


def _layer_norm(pt, name, x: Tensor) -> Tensor:
    return ad.layer_norm(x) * pt[f"{name}.g"] + pt[f"{name}.b"]


def _activate(config, x: Tensor) -> Tensor:
    return ad.relu(x) if config.activation == "relu" else ad.tanh(x)


def _attention(pt, name, x_q: Tensor, x_kv: Tensor, config: ModelConfig,
               record=None) -> Tensor:
    n_q, d = x_q.shape
    n_k = x_kv.shape[0]
    h = config.n_heads
    dh = d // h
    q = _linear(pt, f"{name}.q", x_q).reshape(n_q, h, dh).transpose(1, 0, 2)
    k = _linear(pt, f"{name}.k", x_kv).reshape(n_k, h, dh).transpose(1, 0, 2)
    v = _linear(pt, f"{name}.v", x_kv).reshape(n_k, h, dh).transpose(1, 0, 2)
    scores = ad.scale(ad.matmul(q, k.transpose(0, 2, 1)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if record is not None:
        record.append((name, attn.data.copy()))
    out = ad.matmul(attn, v).transpose(1, 0, 2).reshape(n_q, d)
    return _linear(pt, f"{name}.o", out)


def _ffn(pt, name, x: Tensor, config: ModelConfig) -> Tensor:
    return _linear(pt, f"{name}.2", _activate(config, _linear(pt, f"{name}.1", x)))


def encode_scene(features, pt, config: ModelConfig, tape: Tape,
                 include_positions: bool = True) -> Tensor:
    """Cell features (H, W, F) or (n_v, F) -> visual tokens (n_v, d)."""
    feats = np.asarray(features, dtype=np.float32).reshape(-1, config.feature_dim)
    if feats.shape[0] != config.n_visual:
        raise ad.ShapeError(f"scene grid {feats.shape[0]} cells, "
                            f"config expects {config.n_visual}")
    v = _linear(pt, "scene_proj", tape.constant(feats))
    if include_positions:
        v = v + tape.constant(sinusoidal_grid_positions(config.grid, config.d))
    return v


def encode_text(desc: TaskDescription, pt, config: ModelConfig,
                tape: Tape) -> Tensor:
    """Token embeddings plus learned positional rows -> (n_l, d)."""
    ids = np.asarray(desc.token_ids, dtype=np.int64)
    if len(ids) > config.n_l_max:
        raise ad.ShapeError(f"description length {len(ids)} exceeds "
                            f"n_l_max={config.n_l_max}")
    if ids.size and ids.max() >= config.vocab_size:
        raise ValueError(f"token id {int(ids.max())} outside vocabulary "
                         f"of size {config.vocab_size}")
    emb = ad.take_rows(pt["text.embed"], ids)
    pos = pt["text.pos"][0:len(ids), :]
    return emb + pos


def transformer_encode(tokens: Tensor, pt, config: ModelConfig,
                       record=None) -> Tensor:
    x = tokens
    for i in range(config.n_tr):
        normed = _layer_norm(pt, f"enc{i}.ln1", x)
        x = x + _attention(pt, f"enc{i}.attn", normed, normed, config, record)
        x = x + _ffn(pt, f"enc{i}.ffn", _layer_norm(pt, f"enc{i}.ln2", x), config)
    return x


def transformer_decode(memory: Tensor, pt, config: ModelConfig,
                       self_attention=None, record=None) -> list:
    """Returns the query features after every decoder block."""
    use_sa = config.self_attention if self_attention is None else self_attention
    x = pt["query.embed"]
    outputs = []
    for i in range(config.n_tr):
        # the self-attention parameters always exist; disabling only bypasses
        # the output path, so the parameter count is unchanged
        if use_sa:
            normed = _layer_norm(pt, f"dec{i}.ln_sa", x)
            x = x + _attention(pt, f"dec{i}.sa", normed, normed, config, record)
        x = x + _attention(pt, f"dec{i}.ca",
                           _layer_norm(pt, f"dec{i}.ln_ca", x), memory,
                           config, record)
        x = x + _ffn(pt, f"dec{i}.ffn", _layer_norm(pt, f"dec{i}.ln_f", x), config)
        outputs.append(x)
    return outputs


def _l2_normalize(x: Tensor) -> Tensor:
    sq = ad.sum_(x * x, axis=-1, keepdims=True)
    return x / ad.sqrt(sq + 1e-12)


def heads(pt, query_features: Tensor, visual_features: Tensor,
          config: ModelConfig):
    """(boxes, mask_logits, logits, normed queries, align projection) for one
    decoder block."""
    qn = _layer_norm(pt, "dec.norm", query_features)
    hx = _activate(config, _linear(pt, "head.detect.1", qn))
    hx = _activate(config, _linear(pt, "head.detect.2", hx))
    boxes = ad.sigmoid(_linear(pt, "head.detect.3", hx))
    logits = _linear(pt, "head.logit", qn)
    seg_q = _linear(pt, "head.seg.q", qn)
    seg_v = _linear(pt, "head.seg.v", visual_features)
    mask_logits = ad.scale(ad.matmul(seg_q, seg_v.transpose(1, 0)),
                           1.0 / np.sqrt(config.d))
    H, W = config.grid
    mask_logits = mask_logits.reshape(config.n_pred, H, W)
    align_obj = _l2_normalize(_linear(pt, "head.align.obj", qn))
    return boxes, mask_logits, logits, qn, align_obj


# -- preference / binary probabilities ----------------------------------------

def no_object_probability(logits_row: np.ndarray) -> float:
    """softmax(row)[last] with max subtraction, in float64."""
    row = np.asarray(logits_row, dtype=np.float64)
    e = np.exp(row - row.max())
    return float(e[-1] / e.sum())


def preference_score(logits_row: np.ndarray) -> float:
    """Probability mass not on the no-object slot."""
    return 1.0 - no_object_probability(logits_row)


def binary_probs(logits_row: np.ndarray):
    """(positive, no-object) pair; the positive entry is bit-identical to
    preference_score on the same row (shared expression)."""
    p_neg = no_object_probability(logits_row)
    return 1.0 - p_neg, p_neg


def no_object_probabilities(logits: np.ndarray) -> np.ndarray:
    """Row-wise no_object_probability."""
    rows = np.asarray(logits, dtype=np.float64)
    e = np.exp(rows - rows.max(axis=-1, keepdims=True))
    return e[..., -1] / e.sum(axis=-1)


def preference_scores(logits: np.ndarray) -> np.ndarray:
    return 1.0 - no_object_probabilities(logits)


# -- forward -------------------------------------------------------------------

@dataclass
class BlockOutputs:
    boxes: Tensor        # (n_pred, 4) in (0,1)
    mask_logits: Tensor  # (n_pred, H, W)
    logits: Tensor       # (n_pred, n_max)
    align_obj: Tensor    # (n_pred, contrast_dim), L2-normalized


@dataclass
class PredictionSet:
    blocks: list                 # BlockOutputs per decoder block, last = final
    preference: np.ndarray       # (n_pred,) float64, from final logits
    query_features: Tensor       # final block, after the shared head norm
    text_features: Tensor        # encoder text output, before any swap
    align_tok: Tensor            # (n_l, contrast_dim) from the decoded text
    special_positions: tuple
    desc: TaskDescription
    mode: str = MODE_PLAIN
    prototype_index: int = -1
    prototype: np.ndarray = None
    attention: list = field(default_factory=list)

    @property
    def boxes(self):
        return self.blocks[-1].boxes

    @property
    def mask_logits(self):
        return self.blocks[-1].mask_logits

    @property
    def logits(self):
        return self.blocks[-1].logits

    @property
    def align_obj(self):
        return self.blocks[-1].align_obj

    @property
    def n_blocks(self):
        return len(self.blocks)

    def block_preferences(self) -> np.ndarray:
        """(n_blocks, n_pred) preference scores per decoder block."""
        return np.stack([preference_scores(b.logits.data) for b in self.blocks])

    def special_feature(self) -> Tensor:
        """Mean encoder feature over the special (noun/pronoun) positions."""
        rows = ad.take_rows(self.text_features, list(self.special_positions))
        return ad.mean_(rows, axis=0)


def _replace_row(seq: Tensor, position: int, row: Tensor) -> Tensor:
    n = seq.shape[0]
    parts = []
    if position > 0:
        parts.append(seq[0:position, :])
    parts.append(row.reshape(1, seq.shape[1]))
    if position + 1 < n:
        parts.append(seq[position + 1:n, :])
    return ad.concat(parts, axis=0)


def _encoded_text(scene_tokens: Tensor, desc, pt, config, tape, record=None):
    seq = ad.concat([scene_tokens, encode_text(desc, pt, config, tape)], axis=0)
    enc = transformer_encode(seq, pt, config, record)
    n_v = config.n_visual
    return enc[0:n_v, :], enc[n_v:, :]


def forward(scene_features, desc: TaskDescription, params: dict,
            config: ModelConfig, tape: Tape = None, mode: str = MODE_PLAIN,
            noun_desc: TaskDescription = None, prototypes: np.ndarray = None,
            trainable: bool = True, self_attention=None,
            record_attention: bool = False) -> PredictionSet:
    if config.n_tr < 1:
        raise ValueError("forward needs n_tr >= 1")
    if mode not in (MODE_PLAIN, MODE_REPLACE_PRE, MODE_REPLACE_POST,
                    MODE_REPLACE_PROTOTYPE):
        raise ValueError(f"unknown forward mode {mode!r}")
    if mode != MODE_PLAIN and desc.form == FORM_EMPTY:
        raise ValueError("replace modes need a non-empty description")
    if mode in (MODE_REPLACE_PRE, MODE_REPLACE_POST) and noun_desc is None:
        raise ValueError(f"{mode} needs the paired noun description")
    if mode == MODE_REPLACE_PROTOTYPE and prototypes is None:
        raise ValueError("replace-prototype needs a prototype table")

    tape = tape or Tape(np.float32)
    pt = wrap_params(tape, params, trainable)
    record = [] if record_attention else None

    v_tokens = encode_scene(scene_features, pt, config, tape)
    text = encode_text(desc, pt, config, tape)

    if mode == MODE_REPLACE_PRE:
        noun_text = encode_text(noun_desc, pt, config, tape)
        noun_rows = ad.take_rows(noun_text, list(noun_desc.special_positions))
        text = _replace_row(text, desc.special_positions[0],
                            ad.mean_(noun_rows, axis=0))

    seq = ad.concat([v_tokens, text], axis=0)
    enc = transformer_encode(seq, pt, config, record)
    n_v = config.n_visual
    v_tr, l_tr = enc[0:n_v, :], enc[n_v:, :]

    memory_text = l_tr
    proto_index, proto_vec = -1, None
    if mode == MODE_REPLACE_POST:
        _, l_noun_tr = _encoded_text(v_tokens, noun_desc, pt, config, tape,
                                     record)
        noun_rows = ad.take_rows(l_noun_tr, list(noun_desc.special_positions))
        memory_text = _replace_row(l_tr, desc.special_positions[0],
                                   ad.mean_(noun_rows, axis=0))
    elif mode == MODE_REPLACE_PROTOTYPE:
        protos = np.asarray(prototypes, dtype=np.float32)
        pron = l_tr.data[desc.special_positions[0]]
        dist = np.linalg.norm(protos - pron[None, :], axis=1)
        proto_index = int(np.argmin(dist))  # argmin takes the lowest index on ties
        proto_vec = protos[proto_index]
        memory_text = _replace_row(l_tr, desc.special_positions[0],
                                   tape.constant(proto_vec))

    memory = ad.concat([v_tr, memory_text], axis=0)
    block_feats = transformer_decode(memory, pt, config, self_attention, record)

    blocks = []
    qn_final = None
    for feats in block_feats:
        boxes, mask_logits, logits, qn, align_obj = heads(pt, feats, v_tr,
                                                          config)
        blocks.append(BlockOutputs(boxes, mask_logits, logits, align_obj))
        qn_final = qn

    # alignment pairs queries with the text the decoder actually attended to
    align_tok = _l2_normalize(_linear(pt, "head.align.tok", memory_text))

    return PredictionSet(
        blocks=blocks,
        preference=preference_scores(blocks[-1].logits.data),
        query_features=qn_final,
        text_features=l_tr,
        align_tok=align_tok,
        special_positions=desc.special_positions,
        desc=desc,
        mode=mode,
        prototype_index=proto_index,
        prototype=proto_vec,
        attention=record or [],
    )
