"""Synthetic grounded VQA scenes.

A scene is a grid of cells, each empty or holding one coloured shape; every
cell renders to one image patch. Questions come from three templates
(attribute, spatial, existence) and each answer is derivable from the scene
by rule; ``answer_from_scene`` re-derives it from the question tokens alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Batch
from .trace import BBox

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SPECIALS = ("<pad>", "<sys>", "<boa>", "<eoa>")
WORDS = ("what", "color", "is", "the", "left", "of", "there", "a")
VOCAB = SPECIALS + WORDS + SHAPES + COLORS + ("yes", "no")
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD, SYS, BOA, EOA = (TOKEN[s] for s in SPECIALS)

FUNCTIONAL, OBJECT, ATTRIBUTE = "FUNCTIONAL", "OBJECT", "ATTRIBUTE"
CATEGORIES = (FUNCTIONAL, OBJECT, ATTRIBUTE)

QUESTION_LEN = 8  # system-prompt token + longest template (6 words), padded
ANSWER_LEN = 3  # <boa> + up to two answer tokens

_RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0), "yellow": (1.0, 1.0, 0.0)}
_MASKS = {
    "circle": [".XX.", "X..X", "X..X", ".XX."],
    "square": ["XXXX", "XXXX", "XXXX", "XXXX"],
    "triangle": ["X...", "XX..", "XXX.", "XXXX"],
}
PATCH_PX = 4


@dataclass
class GridConfig:
    rows: int = 5
    cols: int = 5
    min_objects: int = 3
    max_objects: int = 6
    noise: float = 0.05

    @property
    def n_patches(self):
        return self.rows * self.cols

    @property
    def patch_dim(self):
        return PATCH_PX * PATCH_PX * 3


@dataclass
class Supervision:
    gaze: np.ndarray  # (P,) aggregated teacher attention
    a_traj: np.ndarray  # (P,) min-max normalised map
    sparse_target: np.ndarray  # (P,) Top-K distribution
    v_sem: np.ndarray  # (d_teacher,) semantic anchor
    focus: float | None  # focusing score inside the bbox (None for exempt samples)
    degenerate: bool = False


@dataclass
class Sample:
    sample_id: str
    scene: np.ndarray  # (rows, cols) int: -1 empty, else shape * len(COLORS) + color
    pixels: np.ndarray  # (P, patch_dim)
    qtype: str
    question: list  # token ids, unpadded, starts with <sys>
    answer: list  # token ids without <eoa>
    bbox: BBox
    categories: list  # one per scored answer position, <eoa> included
    supervision: Supervision | None = None
    extra: dict = field(default_factory=dict)

    @property
    def exempt_from_focus(self):
        """Negative existence answers have no target region."""
        return self.qtype == "exist" and self.answer == [TOKEN["no"]]

    def words(self, ids):
        return [VOCAB[i] for i in ids]


def decode_object(code):
    return SHAPES[code // len(COLORS)], COLORS[code % len(COLORS)]


def encode_object(shape, color):
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def render(scene, rng, noise):
    rows, cols = scene.shape
    px = np.zeros((rows * cols, PATCH_PX, PATCH_PX, 3))
    for r in range(rows):
        for c in range(cols):
            code = scene[r, c]
            if code < 0:
                continue
            shape, color = decode_object(code)
            mask = np.array([[ch == "X" for ch in line] for line in _MASKS[shape]], dtype=float)
            px[r * cols + c] = mask[:, :, None] * np.array(_RGB[color])
    if noise > 0:
        px += rng.normal(0.0, noise, px.shape)
    return px.reshape(rows * cols, -1)


def _random_scene(rng, grid):
    n_obj = int(rng.integers(grid.min_objects, grid.max_objects + 1))
    cells = rng.choice(grid.n_patches, size=n_obj, replace=False)
    scene = np.full(grid.n_patches, -1, dtype=int)
    scene[cells] = rng.integers(0, len(SHAPES) * len(COLORS), size=n_obj)
    return scene.reshape(grid.rows, grid.cols)


def _cells(scene, pred):
    return [(r, c) for r in range(scene.shape[0]) for c in range(scene.shape[1]) if scene[r, c] >= 0 and pred(scene[r, c])]


def _attribute(scene, rng):
    counts = {s: len(_cells(scene, lambda v, s=s: decode_object(v)[0] == s)) for s in SHAPES}
    options = [s for s in SHAPES if counts[s] == 1]
    if not options:
        return None
    shape = options[int(rng.integers(len(options)))]
    (r, c), = _cells(scene, lambda v: decode_object(v)[0] == shape)
    color = decode_object(scene[r, c])[1]
    q = ["what", "color", "is", "the", shape]
    return q, [color], [ATTRIBUTE], BBox(r, c, r + 1, c + 1)


def _shape_counts(scene):
    return {s: len(_cells(scene, lambda v, s=s: decode_object(v)[0] == s)) for s in SHAPES}


def _spatial(scene, rng):
    """Ask for the object directly left of a shape that occurs exactly once."""
    counts = _shape_counts(scene)
    options = []
    for r, c in _cells(scene, lambda v: True):
        if c == 0 or scene[r, c - 1] < 0:
            continue
        if counts[decode_object(scene[r, c])[0]] == 1:
            options.append((r, c))
    if not options:
        return None
    r, c = options[int(rng.integers(len(options)))]
    shape = decode_object(scene[r, c])[0]
    lshape, lcolor = decode_object(scene[r, c - 1])
    q = ["what", "is", "left", "of", "the", shape]
    return q, [lcolor, lshape], [ATTRIBUTE, OBJECT], BBox(r, c - 1, r + 1, c + 1)


def _existence(scene, rng):
    """``is there a <shape>``: yes for a shape present exactly once, no for an absent one.

    A "no" answer has no grounding region, so its box is the whole grid.
    """
    rows, cols = scene.shape
    counts = _shape_counts(scene)
    want_yes = bool(rng.integers(2))
    options = [s for s in SHAPES if counts[s] == (1 if want_yes else 0)]
    if not options:
        return None
    shape = options[int(rng.integers(len(options)))]
    if want_yes:
        (r, c), = _cells(scene, lambda v: decode_object(v)[0] == shape)
        return ["is", "there", "a", shape], ["yes"], [FUNCTIONAL], BBox(r, c, r + 1, c + 1)
    return ["is", "there", "a", shape], ["no"], [FUNCTIONAL], BBox(0, 0, rows, cols)


_TEMPLATES = {"attribute": _attribute, "spatial": _spatial, "exist": _existence}
QTYPES = tuple(_TEMPLATES)
# Relational questions need a two-hop lookup that small models pick up slowly,
# so they make up a small share of the corpus.
QTYPE_WEIGHTS = {"attribute": 0.57, "spatial": 0.03, "exist": 0.40}


def generate_corpus(seed, n_samples, grid=None, id_prefix="s", weights=None):
    """Deterministic list of ``n_samples`` samples for ``seed``.

    Question types are drawn from ``weights`` (default ``QTYPE_WEIGHTS``); when a
    scene cannot support the drawn type, a new scene is drawn for the same type.
    """
    weights = QTYPE_WEIGHTS if weights is None else weights
    probs = np.array([weights.get(q, 0.0) for q in QTYPES], dtype=float)
    if probs.sum() <= 0 or (probs < 0).any():
        raise ValueError(f"bad question-type weights {weights}")
    probs /= probs.sum()
    grid = grid or GridConfig()
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if grid.min_objects < 1 or grid.max_objects > grid.n_patches or grid.min_objects > grid.max_objects:
        raise ValueError(f"grid {grid.rows}x{grid.cols} cannot hold {grid.min_objects}-{grid.max_objects} objects")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_samples:
        qtype = QTYPES[int(rng.choice(len(QTYPES), p=probs))]
        for _ in range(1000):
            scene = _random_scene(rng, grid)
            made = _TEMPLATES[qtype](scene, rng)
            if made is not None:
                break
        else:
            raise ValueError(f"grid {grid.rows}x{grid.cols} cannot support {qtype!r} questions")
        q_words, a_words, cats, bbox = made
        pixels = render(scene, rng, grid.noise)
        out.append(
            Sample(
                sample_id=f"{id_prefix}{len(out):06d}",
                scene=scene,
                pixels=pixels,
                qtype=qtype,
                question=[SYS] + [TOKEN[w] for w in q_words],
                answer=[TOKEN[w] for w in a_words],
                bbox=bbox,
                categories=cats + [FUNCTIONAL],
            )
        )
    return out


def split_corpus(samples, n_train, n_val, n_test):
    if n_train + n_val + n_test > len(samples):
        raise ValueError("split sizes exceed corpus size")
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:n_train + n_val + n_test]


def answer_from_scene(scene, question_words):
    """Rule oracle: answer words for a question, computed from the scene only."""
    words = [w for w in question_words if w not in SPECIALS]
    objs = {(r, c): decode_object(scene[r, c]) for r in range(scene.shape[0]) for c in range(scene.shape[1]) if scene[r, c] >= 0}
    if words[:4] == ["what", "color", "is", "the"]:
        hits = [o for o in objs.values() if o[0] == words[4]]
        assert len(hits) == 1, "attribute question needs a unique shape"
        return [hits[0][1]]
    if words[:5] == ["what", "is", "left", "of", "the"]:
        (r, c), = [k for k, o in objs.items() if o[0] == words[5]]
        lshape, lcolor = objs[(r, c - 1)]
        return [lcolor, lshape]
    if words[:3] == ["is", "there", "a"]:
        return ["yes" if any(o[0] == words[3] for o in objs.values()) else "no"]
    raise ValueError(f"unknown template: {words}")


def make_batch(samples, answers=None, answer_len=ANSWER_LEN):
    """Stack samples into a fixed-layout ``Batch``.

    ``answers`` optionally replaces the reference answers (e.g. with a
    teacher's decoded tokens); ``answer_len=None`` sizes the answer segment
    to the longest answer plus the end token.
    """
    b = len(samples)
    answers = [s.answer for s in samples] if answers is None else [list(a) for a in answers]
    if answer_len is None:
        answer_len = 1 + max(len(a) for a in answers)
    pixels = np.stack([s.pixels for s in samples])
    question = np.full((b, QUESTION_LEN), PAD, dtype=np.int64)
    answer_in = np.full((b, answer_len), PAD, dtype=np.int64)
    answer_tgt = np.full((b, answer_len), -1, dtype=np.int64)
    for i, (s, ans) in enumerate(zip(samples, answers)):
        question[i, : len(s.question)] = s.question
        seq_in = [BOA] + ans
        seq_tgt = ans + [EOA]
        answer_in[i, : len(seq_in)] = seq_in[:answer_len]
        answer_tgt[i, : len(seq_tgt)] = seq_tgt[:answer_len]
    return Batch(pixels, question, answer_in, answer_tgt)


def token_category(token_id):
    """Colours are attribute tokens, shapes are object tokens, the rest functional."""
    word = VOCAB[token_id]
    if word in COLORS:
        return ATTRIBUTE
    if word in SHAPES:
        return OBJECT
    return FUNCTIONAL


def question_array(samples):
    return make_batch(samples).question


def scene_code(scene):
    return "|".join("".join("." if v < 0 else "%x" % v for v in row) for row in scene)


def parse_scene_code(text):
    return np.array([[-1 if ch == "." else int(ch, 16) for ch in row] for row in text.split("|")])


_MANIFEST_FIELDS = ("sample_id", "qtype", "scene", "question", "answer", "bbox", "categories", "payload")


def manifest_record(sample, payload_file=None):
    rec = {
        "sample_id": sample.sample_id,
        "qtype": sample.qtype,
        "scene": scene_code(sample.scene),
        "question": sample.words(sample.question),
        "answer": sample.words(sample.answer),
        "bbox": [sample.bbox.row0, sample.bbox.col0, sample.bbox.row1, sample.bbox.col1],
        "categories": sample.categories,
    }
    if payload_file is not None:
        rec["payload"] = payload_file
    rec.update(sample.extra)
    return rec


def write_manifest(path, samples, payload_file=None):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(manifest_record(s, payload_file), sort_keys=True) + "\n")


def read_manifest(path, pixels):
    """Rebuild samples from a manifest plus their pixel arrays keyed by sample id."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            sid = rec["sample_id"]
            out.append(
                Sample(
                    sample_id=sid,
                    scene=parse_scene_code(rec["scene"]),
                    pixels=pixels[sid],
                    qtype=rec["qtype"],
                    question=[TOKEN[w] for w in rec["question"]],
                    answer=[TOKEN[w] for w in rec["answer"]],
                    bbox=BBox(*rec["bbox"]),
                    categories=rec["categories"],
                    extra={k: v for k, v in rec.items() if k not in _MANIFEST_FIELDS},
                )
            )
    return out
