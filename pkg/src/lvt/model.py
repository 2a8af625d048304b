"""Miniature decoder-only multimodal transformer with a latent bottleneck.

The sequence is ``[image patches, question, latent tokens, answer]``. Latent
tokens are continuous: the first latent input is a learned start vector and
each later one is the previous latent's final-layer state passed through a
learned adapter. Training and decoding share one chunked forward: the prompt
runs as a block, latents run one position at a time against a key/value
cache (so the latent roll stays a single differentiable pass), and answer
positions run as a block (teacher forcing) or one at a time (greedy decode).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .gate import gate_bias
from .tensor import (
    Tensor,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax_with_bias,
    transpose,
)

ANSWER_CAP = 16


class Segment(enum.IntEnum):
    IMAGE = 0
    QUESTION = 1
    LATENT = 2
    ANSWER = 3


@dataclass(frozen=True)
class SegmentLayout:
    n_image: int
    n_question: int
    n_latent: int
    n_answer: int

    def __post_init__(self):
        if min(self.n_image, self.n_question, self.n_latent, self.n_answer) < 0:
            raise ValueError(f"negative segment length in {self}")

    @property
    def seq_len(self):
        return self.n_image + self.n_question + self.n_latent + self.n_answer

    @property
    def image(self):
        return slice(0, self.n_image)

    @property
    def question(self):
        return slice(self.n_image, self.n_image + self.n_question)

    @property
    def latent(self):
        start = self.n_image + self.n_question
        return slice(start, start + self.n_latent)

    @property
    def answer(self):
        start = self.n_image + self.n_question + self.n_latent
        return slice(start, start + self.n_answer)

    @property
    def prompt_len(self):
        return self.n_image + self.n_question

    def tags(self):
        return np.repeat(
            np.array([Segment.IMAGE, Segment.QUESTION, Segment.LATENT, Segment.ANSWER]),
            [self.n_image, self.n_question, self.n_latent, self.n_answer],
        )


def build_attention_bias(
    layout, gamma_value, *, gated=True, gate_latent_path=False, mask_latents=False, mask_image=False
):
    """Additive (seq x seq) bias: causal mask plus the sensory gate.

    ``ln(gamma)`` lands on (answer query, image key) pairs, and on (latent
    query, image key) pairs when ``gate_latent_path`` is set. ``mask_latents``
    hard-masks latent keys for every query; ``mask_image`` hard-masks image
    keys for every non-image query (the text-only baseline).
    """
    s = layout.seq_len
    bias = np.triu(np.full((s, s), -np.inf), k=1)
    if gated and layout.n_answer and layout.n_image:
        bias[layout.answer, layout.image] += gate_bias(gamma_value)
        if gate_latent_path and layout.n_latent:
            bias[layout.latent, layout.image] += gate_bias(gamma_value)
    elif gamma_value <= 0 or gamma_value > 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma_value}")
    if mask_latents and layout.n_latent:
        bias[:, layout.latent] = -np.inf
    if mask_image and layout.n_image:
        bias[layout.n_image:, layout.image] = -np.inf
    return bias


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 32
    patch_grid: tuple = (5, 5)
    patch_dim: int = 48
    k_latent: int = 4
    d_teacher: int = 128
    freeze_patch_embedder: bool = False
    max_seq_len: int = 64
    gate_latent_path: bool = False
    mask_image: bool = False
    eoa_id: int = 3
    init_seed: int = 0

    def __post_init__(self):
        self.patch_grid = tuple(int(v) for v in self.patch_grid)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.k_latent < 0:
            raise ValueError("k_latent must be non-negative")
        if self.patch_grid[0] * self.patch_grid[1] < 1:
            raise ValueError("patch grid must contain at least one patch")

    @property
    def n_patches(self):
        return self.patch_grid[0] * self.patch_grid[1]

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def teacher_config(**overrides):
    base = dict(d_model=128, n_layers=4, n_heads=4, k_latent=0, d_teacher=128)
    base.update(overrides)
    return ModelConfig(**base)


def student_config(**overrides):
    base = dict(d_model=64, n_layers=2, n_heads=2, k_latent=4, d_teacher=128, freeze_patch_embedder=True)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Batch:
    """Model inputs for one layout shape.

    ``answer_in`` starts with the begin-of-answer token; ``answer_tgt`` holds
    the next-token targets for each answer position (``-1`` = unscored).
    """

    pixels: np.ndarray  # (B, P, patch_dim)
    question: np.ndarray  # (B, Q) int
    answer_in: np.ndarray  # (B, A) int
    answer_tgt: np.ndarray  # (B, A) int

    @property
    def size(self):
        return self.pixels.shape[0]

    def layout(self, k_latent):
        return SegmentLayout(self.pixels.shape[1], self.question.shape[1], k_latent, self.answer_in.shape[1])

    def subset(self, idx):
        return Batch(self.pixels[idx], self.question[idx], self.answer_in[idx], self.answer_tgt[idx])


@dataclass
class AttentionRecord:
    """Per-layer attention rows captured chunk by chunk.

    ``chunks[l]`` is a list of ``(row_start, Tensor[B, H, n, cols])``; the
    tensors stay on the tape, so slices of them are differentiable.
    """

    seq_len: int
    chunks: list
    scores: list = field(default_factory=list)

    @property
    def n_layers(self):
        return len(self.chunks)

    def matrix(self, layer):
        """Dense numpy (B, H, S, S) attention for one layer (future keys = 0)."""
        first = self.chunks[layer][0][1]
        b, h = first.shape[:2]
        out = np.zeros((b, h, self.seq_len, self.seq_len))
        for start, att in self.chunks[layer]:
            n, cols = att.shape[2], att.shape[3]
            out[:, :, start:start + n, :cols] = att.data
        return out

    def stack(self):
        """All layers as numpy (L, B, H, S, S)."""
        return np.stack([self.matrix(l) for l in range(self.n_layers)])

    def score_matrix(self, layer):
        """Pre-bias scaled dot products (B, H, S, S); NaN where never computed."""
        b, h = self.scores[layer][0][1].shape[:2]
        out = np.full((b, h, self.seq_len, self.seq_len), np.nan)
        for start, sc in self.scores[layer]:
            n, cols = sc.shape[2], sc.shape[3]
            out[:, :, start:start + n, :cols] = sc
        return out

    def rows(self, layer, start):
        for s, att in self.chunks[layer]:
            if s == start:
                return att
        raise KeyError(f"no chunk starting at row {start} in layer {layer}")


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, A, V)
    attn: AttentionRecord
    h_z: Tensor | None  # (B, K, d_model)
    concept_vec: Tensor | None  # (B, d_teacher)
    hidden: list  # [(row_start, Tensor[B, n, d])] final-norm states per chunk
    layout: SegmentLayout
    image_embed: Tensor | None = None

    def hidden_states(self):
        """Numpy (B, S, d) final-layer (post final norm) hidden states."""
        first = self.hidden[0][1]
        out = np.zeros((first.shape[0], self.layout.seq_len, first.shape[2]))
        for start, h in self.hidden:
            out[:, start:start + h.shape[1]] = h.data
        return out

    def latent_image_attention(self):
        """Per layer, Tensor (B, H, K, P): latent-query rows over image keys."""
        lay = self.layout
        if lay.n_latent == 0:
            return []
        out = []
        for layer in range(self.attn.n_layers):
            rows = [self.attn.rows(layer, lay.latent.start + j)[:, :, :, : lay.n_image] for j in range(lay.n_latent)]
            out.append(concat(rows, axis=2))
        return out


def _param(rng, shape, std):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


class Model:
    """Parameter container plus the chunked forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.init_seed)
        d, ff = c.d_model, 4 * c.d_model
        out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * c.n_layers)
        p = {}
        p["tok_emb"] = _param(rng, (c.vocab_size, d), 0.1)
        p["pos_emb"] = _param(rng, (c.max_seq_len, d), 0.1)
        p["patch_w"] = _param(rng, (c.patch_dim, d), 1.0 / math.sqrt(c.patch_dim))
        p["patch_b"] = Tensor(np.zeros(d), requires_grad=True)
        p["row_emb"] = _param(rng, (c.patch_grid[0], d), 0.1)
        p["col_emb"] = _param(rng, (c.patch_grid[1], d), 0.1)
        for l in range(c.n_layers):
            p[f"l{l}.ln1_g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"l{l}.ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
            for name in ("wq", "wk", "wv"):
                p[f"l{l}.{name}"] = _param(rng, (d, d), 1.0 / math.sqrt(d))
                p[f"l{l}.b{name[1]}"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"l{l}.wo"] = _param(rng, (d, d), out_std)
            p[f"l{l}.bo"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"l{l}.ln2_g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"l{l}.ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"l{l}.w1"] = _param(rng, (d, ff), 1.0 / math.sqrt(d))
            p[f"l{l}.b1"] = Tensor(np.zeros(ff), requires_grad=True)
            p[f"l{l}.w2"] = _param(rng, (ff, d), 1.0 / math.sqrt(ff) / math.sqrt(2 * c.n_layers))
            p[f"l{l}.b2"] = Tensor(np.zeros(d), requires_grad=True)
        p["lnf_g"] = Tensor(np.ones(d), requires_grad=True)
        p["lnf_b"] = Tensor(np.zeros(d), requires_grad=True)
        p["lm_head"] = _param(rng, (d, c.vocab_size), 1.0 / math.sqrt(d))
        if c.k_latent > 0:
            p["latent_start"] = _param(rng, (d,), 0.1)
            p["latent_adapter_w"] = _param(rng, (d, d), 1.0 / math.sqrt(d))
            p["latent_adapter_b"] = Tensor(np.zeros(d), requires_grad=True)
            p["concept_w1"] = _param(rng, (d, d), 1.0 / math.sqrt(d))
            p["concept_b1"] = Tensor(np.zeros(d), requires_grad=True)
            p["concept_w2"] = _param(rng, (d, c.d_teacher), 1.0 / math.sqrt(d))
            p["concept_b2"] = Tensor(np.zeros(c.d_teacher), requires_grad=True)
        for name, t in p.items():
            t.name = name
        self.params = p
        if c.freeze_patch_embedder:
            self.freeze_patch_embedder()

    # -- parameters -----------------------------------------------------
    def freeze_patch_embedder(self):
        self.params["patch_w"].requires_grad = False
        self.params["patch_b"].requires_grad = False

    def trainable(self):
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    # -- building blocks ------------------------------------------------
    def _linear(self, x, w, b):
        return matmul(x, self.params[w]) + self.params[b]

    def _heads(self, x, b, n):
        c = self.config
        return transpose(reshape(x, (b, n, c.n_heads, c.d_model // c.n_heads)), (0, 2, 1, 3))

    def _run_chunk(self, x, start, cache, bias, record, want_scores):
        c = self.config
        b, n, d = x.shape
        end = start + n
        dh = d // c.n_heads
        for l in range(c.n_layers):
            pre = f"l{l}."
            h = layer_norm(x, self.params[pre + "ln1_g"], self.params[pre + "ln1_b"])
            q = self._heads(self._linear(h, pre + "wq", pre + "bq"), b, n)
            k = self._heads(self._linear(h, pre + "wk", pre + "bk"), b, n)
            v = self._heads(self._linear(h, pre + "wv", pre + "bv"), b, n)
            if cache[l] is not None:
                k = concat([cache[l][0], k], axis=2)
                v = concat([cache[l][1], v], axis=2)
            cache[l] = (k, v)
            scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = softmax_with_bias(scores, bias[start:end, :end])
            record.chunks[l].append((start, att))
            if want_scores:
                record.scores[l].append((start, scores.data.copy()))
            o = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, n, d))
            x = x + self._linear(o, pre + "wo", pre + "bo")
            h2 = layer_norm(x, self.params[pre + "ln2_g"], self.params[pre + "ln2_b"])
            x = x + self._linear(gelu(self._linear(h2, pre + "w1", pre + "b1")), pre + "w2", pre + "b2")
        return layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])

    def _embed_prompt(self, pixels, question, track_image_grad):
        c = self.config
        p = self.params
        b, n_img, _ = pixels.shape
        rows, cols = c.patch_grid
        if n_img != rows * cols:
            raise ValueError(f"batch has {n_img} patches, model grid holds {rows * cols}")
        grid_r = np.repeat(np.arange(rows), cols)
        grid_c = np.tile(np.arange(cols), rows)
        img = matmul(Tensor(pixels), p["patch_w"]) + p["patch_b"]
        img = img + embedding(p["row_emb"], grid_r) + embedding(p["col_emb"], grid_c)
        image_embed = None
        if track_image_grad:
            image_embed = Tensor(img.data, requires_grad=True, name="image_embed")
            img = image_embed
        n_q = question.shape[1]
        img = img + p["pos_emb"][0:n_img]
        txt = embedding(p["tok_emb"], question) + p["pos_emb"][n_img:n_img + n_q]
        return concat([img, txt], axis=1), image_embed

    def _roll_latents(self, b, start, cache, bias, record, hidden, want_scores, zero_latents):
        c = self.config
        p = self.params
        states = []
        prev = None
        for j in range(c.k_latent):
            if zero_latents:
                inp = Tensor(np.zeros((b, 1, c.d_model)))
            elif prev is None:
                inp = Tensor(np.zeros((b, 1, c.d_model))) + p["latent_start"]
            else:
                inp = self._linear(prev, "latent_adapter_w", "latent_adapter_b")
            pos = start + j
            x = inp + p["pos_emb"][pos:pos + 1]
            h = self._run_chunk(x, pos, cache, bias, record, want_scores)
            hidden.append((pos, h))
            states.append(h)
            prev = h
        return concat(states, axis=1) if states else None

    def project_concept(self, h_anchor):
        """Two-layer GELU head mapping a latent state (.., d_model) to (.., d_teacher)."""
        if "concept_w1" not in self.params:
            raise ValueError("model has no latent tokens, so no concept head")
        if h_anchor.ndim == 1:
            return reshape(self.project_concept(reshape(h_anchor, (1, -1))), (-1,))
        return self._linear(gelu(self._linear(h_anchor, "concept_w1", "concept_b1")), "concept_w2", "concept_b2")

    def _check_len(self, layout):
        if layout.seq_len > self.config.max_seq_len:
            raise ValueError(f"sequence length {layout.seq_len} exceeds max_seq_len {self.config.max_seq_len}")

    def _bias(self, layout, gamma_value, gated, mask_latents):
        return build_attention_bias(
            layout,
            gamma_value,
            gated=gated,
            gate_latent_path=self.config.gate_latent_path,
            mask_latents=mask_latents,
            mask_image=self.config.mask_image,
        )

    # -- public passes --------------------------------------------------
    def forward(
        self,
        batch: Batch,
        gamma_value=1.0,
        *,
        mask_latents=False,
        gated=True,
        record_scores=False,
        track_image_grad=False,
        zero_latents=False,
    ) -> ForwardOutput:
        """Teacher-forced pass over ``[image, question, latents, answer]``.

        ``track_image_grad=True`` exposes the image patch embeddings as a leaf
        (``out.image_embed``) collecting gradient from every path.
        ``track_image_grad="direct"`` restricts that gradient to the answer
        rows' attention to image keys: question and latent rows see a detached
        copy of the image. Forward values are identical in all modes.
        """
        if track_image_grad not in (False, True, "direct"):
            raise ValueError(f"track_image_grad must be False, True or 'direct', got {track_image_grad!r}")
        c = self.config
        layout = batch.layout(c.k_latent)
        self._check_len(layout)
        if batch.answer_in.shape[1] == 0:
            raise ValueError("forward needs at least one answer position")
        b = batch.size
        bias = self._bias(layout, gamma_value, gated, mask_latents)
        record = AttentionRecord(layout.seq_len, [[] for _ in range(c.n_layers)], [[] for _ in range(c.n_layers)])
        cache = [None] * c.n_layers
        hidden = []
        direct = track_image_grad == "direct"
        x, image_embed = self._embed_prompt(batch.pixels, batch.question, bool(track_image_grad) and not direct)
        hidden.append((0, self._run_chunk(x, 0, cache, bias, record, record_scores)))
        if direct:
            # Image rows only see image keys, so their per-layer keys/values are
            # functions of the image embedding alone.
            xt, image_embed = self._embed_prompt(batch.pixels, batch.question, True)
            tracked = [None] * c.n_layers
            scratch = AttentionRecord(layout.seq_len, [[] for _ in range(c.n_layers)], [[] for _ in range(c.n_layers)])
            self._run_chunk(xt, 0, tracked, bias, scratch, False)
        h_z = self._roll_latents(
            b, layout.latent.start, cache, bias, record, hidden, record_scores, zero_latents
        )
        if direct:
            n_img = layout.n_image
            for l in range(c.n_layers):
                k, v = cache[l]
                tk, tv = tracked[l]
                cache[l] = (
                    concat([tk[:, :, :n_img], k.detach()[:, :, n_img:]], axis=2),
                    concat([tv[:, :, :n_img], v.detach()[:, :, n_img:]], axis=2),
                )
        a0 = layout.answer.start
        xa = embedding(self.params["tok_emb"], batch.answer_in) + self.params["pos_emb"][a0:a0 + layout.n_answer]
        ha = self._run_chunk(xa, a0, cache, bias, record, record_scores)
        hidden.append((a0, ha))
        logits = matmul(ha, self.params["lm_head"])
        concept = self.project_concept(h_z[:, -1]) if h_z is not None else None
        return ForwardOutput(logits, record, h_z, concept, hidden, layout, image_embed)

    def generate(self, pixels, question, *, boa_id, mask_latents=False, gated=True, cap=ANSWER_CAP):
        """Greedy decode with the gate fully open.

        Returns ``(tokens, truncated, h_z, record)``: per-sample token lists
        (end token excluded), per-sample truncation flags, latent states as
        numpy (B, K, d) or None, and the attention record.
        """
        c = self.config
        b = pixels.shape[0]
        layout = SegmentLayout(pixels.shape[1], question.shape[1], c.k_latent, cap + 1)
        self._check_len(layout)
        bias = self._bias(layout, 1.0, gated, mask_latents)
        record = AttentionRecord(layout.seq_len, [[] for _ in range(c.n_layers)])
        cache = [None] * c.n_layers
        hidden = []
        with no_grad():
            x, _ = self._embed_prompt(pixels, question, False)
            self._run_chunk(x, 0, cache, bias, record, False)
            h_z = self._roll_latents(b, layout.latent.start, cache, bias, record, hidden, False, False)
            tokens = [[] for _ in range(b)]
            done = np.zeros(b, dtype=bool)
            cur = np.full((b, 1), boa_id)
            pos = layout.answer.start
            for step in range(cap + 1):
                x = embedding(self.params["tok_emb"], cur) + self.params["pos_emb"][pos:pos + 1]
                h = self._run_chunk(x, pos, cache, bias, record, False)
                nxt = np.argmax(matmul(h, self.params["lm_head"]).data[:, 0], axis=1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == c.eoa_id:
                        done[i] = True
                    elif step < cap:
                        tokens[i].append(int(nxt[i]))
                if done.all() or step == cap:
                    break
                cur = nxt[:, None]
                pos += 1
        truncated = ~done
        record.seq_len = pos + 1
        return tokens, truncated, (h_z.data if h_z is not None else None), record
