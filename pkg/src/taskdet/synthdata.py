"""Synthetic affordance-and-preference benchmark.

Scenes are 16x16 grids of feature cells. Each object occupies a rectangle of
cells, renders as a rectangle or inscribed ellipse mask, and carries a
category (one-hot channels) plus four attribute scalars; a final channel
marks occupancy, and Gaussian noise is added to every channel. Each task
defines which categories afford it and which attribute ranks candidates;
ground truth is the argmax-preference set over affording objects, so every
label is recomputable from first principles.

Scene composition is controlled exactly: per task, 20% of scenes hold no
affording object (empty ground truth), 15% hold an engineered cross-category
preference tie (multi-category ground truth), and the rest have a unique
winner with a randomized runner-up margin.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .descriptions import (Vocabulary, build_vocabulary, noun_description,
                           pronoun_description, PRONOUNS)
from .losses import GroundTruthSet, ground_truth_from_objects

CATEGORY_NAMES = (
    "hammer", "mallet", "knife", "scissors", "shears", "cup",
    "bowl", "pitcher", "pillow", "sponge", "stool", "ladder",
)
ATTRIBUTE_NAMES = ("softness", "height", "hardness", "size")

N_FEATURES = len(CATEGORY_NAMES) + len(ATTRIBUTE_NAMES) + 1  # + occupancy

SHAPE_RECT = 0
SHAPE_ELLIPSE = 1

GT_TOL = 1e-9

MAGIC = b"TDSET\n"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    pass


class UnsupportedVersionError(DataFormatError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    verbs: tuple          # token sequence, e.g. ("drink", "from")
    categories: tuple     # category ids that afford the task
    prefer_attr: int      # attribute index ranking the affording objects

    def affords(self, category: int) -> bool:
        return category in self.categories

    def prefer(self, attrs) -> float:
        return float(attrs[self.prefer_attr])

    def to_dict(self):
        return {"task_id": self.task_id, "verbs": list(self.verbs),
                "categories": list(self.categories),
                "prefer_attr": self.prefer_attr}

    @classmethod
    def from_dict(cls, d):
        return cls(d["task_id"], tuple(d["verbs"]), tuple(d["categories"]),
                   d["prefer_attr"])


def default_tasks() -> tuple:
    """Five tasks; each affords three categories so per-task ground truth can
    span several categories across a dataset."""
    c = {name: i for i, name in enumerate(CATEGORY_NAMES)}
    return (
        TaskSpec(0, ("pound",), (c["hammer"], c["mallet"], c["stool"]), 2),
        TaskSpec(1, ("cut", "with"), (c["knife"], c["scissors"], c["shears"]), 1),
        TaskSpec(2, ("drink", "from"), (c["cup"], c["bowl"], c["pitcher"]), 3),
        TaskSpec(3, ("sit", "on"), (c["stool"], c["ladder"], c["pillow"]), 0),
        TaskSpec(4, ("scoop", "with"), (c["cup"], c["bowl"], c["sponge"]), 1),
    )


@dataclass(frozen=True)
class ObjectSpec:
    category: int
    attrs: tuple          # four scalars in [0, 1]
    box: tuple            # (cx, cy, h, w) in unit coordinates
    shape: int            # SHAPE_RECT or SHAPE_ELLIPSE
    cell_rect: tuple      # (r0, c0, bh, bw) integer grid footprint


def rasterize_mask(obj: ObjectSpec, grid) -> np.ndarray:
    """Binary (H, W) mask; cells never leave the object's box rectangle."""
    H, W = grid
    r0, c0, bh, bw = obj.cell_rect
    mask = np.zeros((H, W), dtype=np.float32)
    if obj.shape == SHAPE_RECT:
        mask[r0:r0 + bh, c0:c0 + bw] = 1.0
        return mask
    cy, cx = r0 + bh / 2.0, c0 + bw / 2.0
    rr, cc = np.meshgrid(np.arange(r0, r0 + bh), np.arange(c0, c0 + bw),
                         indexing="ij")
    inside = (((rr + 0.5 - cy) / (bh / 2.0)) ** 2
              + ((cc + 0.5 - cx) / (bw / 2.0)) ** 2) <= 1.0
    mask[r0:r0 + bh, c0:c0 + bw] = inside
    return mask


@dataclass
class Sample:
    scene_id: int
    task_id: int
    features: np.ndarray      # (H, W, N_FEATURES) float32
    objects: tuple            # ObjectSpec per placed object
    gt_indices: tuple         # indices into objects
    noun_desc: object = None  # built by _attach_descriptions
    pron_desc: object = None

    @property
    def n_gt(self):
        return len(self.gt_indices)

    def gt_boxes(self) -> np.ndarray:
        return np.array([self.objects[i].box for i in self.gt_indices],
                        dtype=np.float64).reshape(-1, 4)

    def gt_masks(self, grid) -> np.ndarray:
        if not self.gt_indices:
            return np.zeros((0,) + tuple(grid), dtype=np.float32)
        return np.stack([rasterize_mask(self.objects[i], grid)
                         for i in self.gt_indices])

    def gt_categories(self) -> tuple:
        """Distinct ground-truth categories in ascending id order."""
        return tuple(sorted({self.objects[i].category
                             for i in self.gt_indices}))


@dataclass
class Dataset:
    tasks: tuple
    samples: list
    vocab: Vocabulary
    params: dict

    @property
    def grid(self):
        return tuple(self.params["grid"])

    def __len__(self):
        return len(self.samples)

    def by_task(self, task_id: int) -> list:
        return [s for s in self.samples if s.task_id == task_id]


def derive_gt(task: TaskSpec, objects) -> tuple:
    """Argmax-preference over affording objects, ties within GT_TOL."""
    affording = [i for i, o in enumerate(objects) if task.affords(o.category)]
    if not affording:
        return ()
    scores = np.array([task.prefer(objects[i].attrs) for i in affording])
    return tuple(i for i, s in zip(affording, scores)
                 if s >= scores.max() - GT_TOL)


def _attach_descriptions(sample: Sample, task: TaskSpec, vocab: Vocabulary,
                         pronoun: str) -> None:
    names = [CATEGORY_NAMES[c] for c in sample.gt_categories()]
    sample.noun_desc = noun_description(task.task_id, task.verbs, names, vocab)
    sample.pron_desc = pronoun_description(task.task_id, task.verbs, pronoun,
                                           vocab)


def _place_rect(rng, occupied, bh, bw, attempts=80):
    """Random free (r0, c0) for a bh x bw rectangle, or None."""
    H, W = occupied.shape
    for _ in range(attempts):
        r0 = int(rng.integers(0, H - bh + 1))
        c0 = int(rng.integers(0, W - bw + 1))
        if not occupied[r0:r0 + bh, c0:c0 + bw].any():
            return r0, c0
    return None


def _make_object(rng, occupied, grid, category, attrs):
    H, W = grid
    for shrink in range(3):
        bh = int(rng.integers(2, 6 - shrink))
        bw = int(rng.integers(2, 6 - shrink))
        pos = _place_rect(rng, occupied, bh, bw)
        if pos is not None:
            r0, c0 = pos
            occupied[r0:r0 + bh, c0:c0 + bw] = True
            box = ((c0 + bw / 2.0) / W, (r0 + bh / 2.0) / H, bh / H, bw / W)
            shape = int(rng.integers(0, 2))
            return ObjectSpec(int(category), tuple(float(a) for a in attrs),
                              box, shape, (r0, c0, bh, bw))
    return None


def _rand_attrs(rng):
    return rng.uniform(0.0, 1.0, 4)


def _scene_objects(rng, task: TaskSpec, kind: str, grid, max_objects: int):
    """Place objects for one scene. Returns a list of ObjectSpec."""
    occupied = np.zeros(grid, dtype=bool)
    objects = []
    others = [c for c in range(len(CATEGORY_NAMES))
              if not task.affords(c)]

    def add(category, attrs):
        obj = _make_object(rng, occupied, grid, category, attrs)
        if obj is not None:
            objects.append(obj)
        return obj

    if kind == "tie":
        cat_a, cat_b = rng.choice(task.categories, size=2, replace=False)
        value = float(rng.uniform(0.55, 0.95))
        for cat in (cat_a, cat_b):
            attrs = _rand_attrs(rng)
            attrs[task.prefer_attr] = value
            if add(cat, attrs) is None:
                raise RuntimeError("could not place a required object")
        ceiling = value - 0.05
    elif kind == "single":
        n_afford = int(rng.integers(1, 4))
        winner_value = float(rng.uniform(0.55, 0.95))
        cats = rng.choice(task.categories, size=n_afford, replace=True)
        for j, cat in enumerate(cats):
            attrs = _rand_attrs(rng)
            if j == 0:
                attrs[task.prefer_attr] = winner_value
            else:
                # a randomized, often narrow, runner-up margin; the low end
                # sits near the feature-noise floor so ranking by attribute
                # alone stays hard and naming the category carries value
                margin = float(rng.uniform(0.005, 0.12))
                attrs[task.prefer_attr] = max(0.0, winner_value - margin)
            if add(cat, attrs) is None and j == 0:
                raise RuntimeError("could not place a required object")
        ceiling = None
    else:  # empty
        ceiling = None

    n_filler = int(rng.integers(2, max_objects + 1)) - len(objects)
    for _ in range(max(0, n_filler)):
        cat = int(rng.choice(others))
        attrs = _rand_attrs(rng)
        if ceiling is not None:
            attrs[task.prefer_attr] = min(attrs[task.prefer_attr], ceiling)
        add(cat, attrs)
    return objects


def _scene_features(rng, objects, grid, noise: float) -> np.ndarray:
    H, W = grid
    feats = np.zeros((H, W, N_FEATURES), dtype=np.float64)
    for obj in objects:
        mask = rasterize_mask(obj, grid).astype(bool)
        feats[mask, obj.category] = 1.0
        feats[mask, len(CATEGORY_NAMES):len(CATEGORY_NAMES) + 4] = obj.attrs
        feats[mask, -1] = 1.0
    feats += rng.normal(0.0, noise, feats.shape)
    return feats.astype(np.float32)


def _scene_kinds(seed, task_id, n: int):
    n_empty = round(0.2 * n)
    n_tie = round(0.15 * n)
    kinds = ["empty"] * n_empty + ["tie"] * n_tie \
        + ["single"] * (n - n_empty - n_tie)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7, task_id)))
    rng.shuffle(kinds)
    return kinds


def generate(seed: int, n_task: int = 5, scenes_per_task: int = 500,
             grid=(16, 16), max_objects: int = 6,
             pronoun: str = "something", noise: float = 0.05) -> Dataset:
    """Deterministic dataset: every scene is a pure function of
    (seed, task, index)."""
    tasks = default_tasks()
    if not 1 <= n_task <= len(tasks):
        raise ValueError(f"n_task must be in [1, {len(tasks)}]")
    if pronoun not in PRONOUNS:
        raise ValueError(f"unknown pronoun {pronoun!r}")
    tasks = tasks[:n_task]
    verbs = [v for t in tasks for v in t.verbs]
    vocab = build_vocabulary(verbs, CATEGORY_NAMES)

    samples = []
    scene_id = 0
    for task in tasks:
        kinds = _scene_kinds(seed, task.task_id, scenes_per_task)
        for idx, kind in enumerate(kinds):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, 11, task.task_id, idx)))
            objects = _scene_objects(rng, task, kind, grid, max_objects)
            gt = derive_gt(task, objects)
            feats = _scene_features(rng, objects, grid, noise)
            sample = Sample(scene_id, task.task_id, feats, tuple(objects), gt)
            _attach_descriptions(sample, task, vocab, pronoun)
            samples.append(sample)
            scene_id += 1

    params = {"seed": seed, "n_task": n_task,
              "scenes_per_task": scenes_per_task, "grid": list(grid),
              "max_objects": max_objects, "pronoun": pronoun, "noise": noise}
    return Dataset(tasks, samples, vocab, params)


def to_ground_truth(sample: Sample, n_max: int, grid) -> GroundTruthSet:
    return ground_truth_from_objects(
        sample.gt_boxes(), sample.gt_masks(grid), sample.noun_desc, n_max,
        categories=sample.gt_categories(), scene_id=sample.scene_id)


def retag_pronoun(dataset: Dataset, pronoun: str) -> Dataset:
    """Rebuild every description with a different pronoun token, in place.
    Scenes, features, and ground truth are untouched, so pronoun variants
    stay comparable."""
    if pronoun not in PRONOUNS:
        raise ValueError(f"unknown pronoun {pronoun!r}")
    by_id = {t.task_id: t for t in dataset.tasks}
    for s in dataset.samples:
        _attach_descriptions(s, by_id[s.task_id], dataset.vocab, pronoun)
    dataset.params["pronoun"] = pronoun
    return dataset


# -- split -----------------------------------------------------------------------

def split(dataset: Dataset, ratio: float, seed: int):
    """Stratified by task and by empty/nonempty ground truth; disjoint and
    exhaustive."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    train, test = [], []
    for task in dataset.tasks:
        for empty in (False, True):
            stratum = [s for s in dataset.by_task(task.task_id)
                       if (s.n_gt == 0) == empty]
            order = np.random.default_rng(
                np.random.SeedSequence((seed, 13, task.task_id,
                                        int(empty)))).permutation(len(stratum))
            n_train = round(ratio * len(stratum))
            for j, k in enumerate(order):
                (train if j < n_train else test).append(stratum[k])
    train.sort(key=lambda s: s.scene_id)
    test.sort(key=lambda s: s.scene_id)

    def _subset(samples, tag):
        params = dict(dataset.params)
        params["split"] = tag
        params["ratio"] = ratio
        params["split_seed"] = seed
        return Dataset(dataset.tasks, samples, dataset.vocab, params)

    return _subset(train, "train"), _subset(test, "test")


# -- serialization -----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(
                f"truncated dataset: wanted {n} bytes at byte {self.pos}, "
                f"file holds {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def serialize(dataset: Dataset, path) -> None:
    """Binary container: magic, version, length-prefixed JSON header (task
    table + parameters), then fixed-layout sample records. A JSON manifest is
    written next to the file."""
    header = {
        "tasks": [t.to_dict() for t in dataset.tasks],
        "params": dataset.params,
        "n_samples": len(dataset.samples),
        "categories": list(CATEGORY_NAMES),
        "n_features": N_FEATURES,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    H, W = dataset.grid
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(hbytes)), hbytes]
    for s in dataset.samples:
        parts.append(struct.pack("<III", s.scene_id, s.task_id,
                                 len(s.objects)))
        for o in s.objects:
            parts.append(struct.pack("<B4f4fB4H", o.category, *o.attrs,
                                     *o.box, o.shape, *o.cell_rect))
        parts.append(struct.pack(f"<I{len(s.gt_indices)}I",
                                 len(s.gt_indices), *s.gt_indices))
        feats = np.ascontiguousarray(s.features, dtype="<f4")
        if feats.shape != (H, W, N_FEATURES):
            raise ValueError(f"sample {s.scene_id} features {feats.shape}")
        parts.append(feats.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    manifest = {
        "file": str(path), "bytes": len(blob), "version": FORMAT_VERSION,
        "tasks": [t.to_dict() for t in dataset.tasks],
        "params": dataset.params,
        "counts": {
            "samples": len(dataset.samples),
            "empty": sum(1 for s in dataset.samples if s.n_gt == 0),
            "multi_category": sum(1 for s in dataset.samples
                                  if len(s.gt_categories()) > 1),
        },
    }
    with open(f"{path}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def deserialize(path) -> Dataset:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(len(MAGIC))
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r} at byte 0")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset version {version}, expected "
            f"{FORMAT_VERSION} (at byte {len(MAGIC)})")
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"bad header JSON before byte {rd.pos}: {e}")
    tasks = tuple(TaskSpec.from_dict(d) for d in header["tasks"])
    params = header["params"]
    grid = tuple(params["grid"])
    H, W = grid
    verbs = [v for t in tasks for v in t.verbs]
    vocab = build_vocabulary(verbs, CATEGORY_NAMES)

    samples = []
    for _ in range(header["n_samples"]):
        scene_id, task_id, n_obj = rd.unpack("<III")
        objects = []
        for _ in range(n_obj):
            vals = rd.unpack("<B4f4fB4H")
            objects.append(ObjectSpec(vals[0], tuple(vals[1:5]),
                                      tuple(vals[5:9]), vals[9],
                                      tuple(vals[10:14])))
        (n_gt,) = rd.unpack("<I")
        gt = rd.unpack(f"<{n_gt}I") if n_gt else ()
        feats = np.frombuffer(rd.take(H * W * N_FEATURES * 4),
                              dtype="<f4").reshape(H, W, N_FEATURES).copy()
        sample = Sample(scene_id, task_id, feats, tuple(objects), tuple(gt))
        _attach_descriptions(sample, tasks[task_id], vocab, params["pronoun"])
        samples.append(sample)
    if rd.pos != len(rd.buf):
        raise DataFormatError(
            f"{len(rd.buf) - rd.pos} unexpected trailing bytes at byte {rd.pos}")
    return Dataset(tasks, samples, vocab, params)
