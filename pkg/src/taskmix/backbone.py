"""Shared transformer encoder over single-stream multimodal sequences.

A batch row is laid out as [START] text tokens [SEP] image tokens [SEP],
with trailing PAD. Image tokens are precomputed embedding vectors run
through a learned linear projection; they all share one position id while
text positions increment, and the two modalities get different token-type
embeddings. The encoder itself is a small pre-norm transformer; task heads
attach on top of its output tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .errors import ConfigurationError, EvaluationError, InputError
from .heads import build_head

LN_EPS = 1e-9


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    hidden: int = 64
    attn_heads: int = 4
    ff: int = 128
    vocab: int = 512  # data tokens 0..vocab-1; specials sit above
    max_len: int = 64
    d_img: int = 16
    max_images: int = 4

    def __post_init__(self):
        if self.hidden % self.attn_heads:
            raise ConfigurationError(
                f"hidden={self.hidden} not divisible by {self.attn_heads} heads"
            )
        if self.layers < 0:
            raise ConfigurationError("layers must be >= 0")
        if min(self.hidden, self.ff, self.vocab, self.d_img) < 1:
            raise ConfigurationError("widths must be positive")
        if self.max_len < 4:
            raise ConfigurationError("max_len too small for START+token+SEP+SEP")

    @property
    def start_id(self) -> int:
        return self.vocab

    @property
    def sep_id(self) -> int:
        return self.vocab + 1

    @property
    def pad_id(self) -> int:
        return self.vocab + 2

    @property
    def table_rows(self) -> int:
        return self.vocab + 3


@dataclass
class InputSequence:
    """Assembled batch: embedded tokens plus the id/mask bookkeeping."""

    embedded: nd.Tensor  # (batch, seq, hidden)
    mask: np.ndarray  # (batch, seq), 1.0 at real positions
    token_ids: np.ndarray
    type_ids: np.ndarray
    pos_ids: np.ndarray


def _weight(rng, fan_in, *shape):
    return nd.Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))


class Backbone:
    """Embedding tables, image projection, and the encoder stack."""

    def __init__(self, config: BackboneConfig, rng):
        self.config = config
        d, f = config.hidden, config.ff
        p = []

        def add_param(name, tensor):
            param = nd.Parameter(f"backbone/{name}", tensor)
            p.append(param)
            return param

        add_param("token_table", _weight(rng, d, config.table_rows, d))
        add_param("type_table", _weight(rng, d, 2, d))
        add_param("pos_table", _weight(rng, d, config.max_len, d))
        add_param("img_proj_w", _weight(rng, config.d_img, config.d_img, d))
        add_param("img_proj_b", nd.Tensor(np.zeros(d)))
        for i in range(config.layers):
            add_param(f"layer{i}/ln1_g", nd.Tensor(np.ones(d)))
            add_param(f"layer{i}/ln1_b", nd.Tensor(np.zeros(d)))
            for nm in ("q", "k", "v", "o"):
                add_param(f"layer{i}/attn_{nm}w", _weight(rng, d, d, d))
                add_param(f"layer{i}/attn_{nm}b", nd.Tensor(np.zeros(d)))
            add_param(f"layer{i}/ln2_g", nd.Tensor(np.ones(d)))
            add_param(f"layer{i}/ln2_b", nd.Tensor(np.zeros(d)))
            add_param(f"layer{i}/ff_w1", _weight(rng, d, d, f))
            add_param(f"layer{i}/ff_b1", nd.Tensor(np.zeros(f)))
            add_param(f"layer{i}/ff_w2", _weight(rng, f, f, d))
            add_param(f"layer{i}/ff_b2", nd.Tensor(np.zeros(d)))
        self.params = p
        self._by_name = {param.name: param for param in p}

    def param(self, name: str) -> nd.Parameter:
        return self._by_name[f"backbone/{name}"]

    def assemble(self, examples) -> InputSequence:
        """Lay out a batch of examples into one padded index block.

        Images beyond max_images are dropped, then text is truncated from
        the right to fit max_len; a sequence that cannot fit even with
        empty text is rejected.
        """
        cfg = self.config
        rows = []
        for e in examples:
            imgs = np.asarray(e.image_embeddings, dtype=np.float64)[: cfg.max_images]
            n_img = imgs.shape[0]
            overhead = 2 + (n_img + 1 if n_img else 0)  # START, SEPs, images
            room = cfg.max_len - overhead
            if room < 0:
                raise InputError(
                    f"{n_img} images leave no room in max_len={cfg.max_len}"
                )
            text = list(e.text_tokens)[:room]
            rows.append((text, imgs))

        b = len(rows)
        s = max(1 + len(t) + 1 + (len(i) + 1 if len(i) else 0) for t, i in rows)
        token_ids = np.full((b, s), cfg.pad_id, dtype=np.int64)
        type_ids = np.zeros((b, s), dtype=np.int64)
        pos_ids = np.zeros((b, s), dtype=np.int64)
        mask = np.zeros((b, s))
        img_vecs = np.zeros((b, s, cfg.d_img))
        img_mask = np.zeros((b, s))
        for r, (text, imgs) in enumerate(rows):
            t = len(text)
            token_ids[r, 0] = cfg.start_id
            token_ids[r, 1 : 1 + t] = text
            token_ids[r, 1 + t] = cfg.sep_id
            pos_ids[r, : 2 + t] = np.arange(2 + t)
            mask[r, : 2 + t] = 1.0
            if len(imgs):
                lo = 2 + t
                hi = lo + len(imgs)
                img_vecs[r, lo:hi] = imgs
                img_mask[r, lo:hi] = 1.0
                pos_ids[r, lo:hi] = t + 2  # one shared position for all images
                type_ids[r, lo : hi + 1] = 1
                token_ids[r, hi] = cfg.sep_id
                pos_ids[r, hi] = t + 3
                mask[r, lo : hi + 1] = 1.0

        tok = nd.embedding(self.param("token_table").tensor, token_ids)
        typ = nd.embedding(self.param("type_table").tensor, type_ids)
        pos = nd.embedding(self.param("pos_table").tensor, pos_ids)
        proj = nd.add(
            nd.matmul(nd.Tensor(img_vecs), self.param("img_proj_w").tensor),
            self.param("img_proj_b").tensor,
        )
        text_part = nd.scale(tok, (1.0 - img_mask)[:, :, None])
        img_part = nd.scale(proj, img_mask[:, :, None])
        embedded = nd.add(nd.add(nd.add(text_part, img_part), typ), pos)
        return InputSequence(embedded, mask, token_ids, type_ids, pos_ids)

    def encode(self, seq: InputSequence, collect_norm_stats=None) -> nd.Tensor:
        """Run the pre-norm encoder stack; layers=0 is the identity.

        collect_norm_stats, when a list, receives per layer-norm call the
        (mean, variance) arrays of the normalized pre-affine values at
        unmasked positions.
        """
        x = seq.embedded
        unmasked = seq.mask.astype(bool)

        def note_stats(inp):
            if collect_norm_stats is None:
                return
            mu = inp.data.mean(axis=-1, keepdims=True)
            var = inp.data.var(axis=-1, keepdims=True)
            xhat = (inp.data - mu) / np.sqrt(var + LN_EPS)
            collect_norm_stats.append(
                (xhat.mean(axis=-1)[unmasked], xhat.var(axis=-1)[unmasked])
            )

        for i in range(self.config.layers):
            g = lambda nm: self.param(f"layer{i}/{nm}").tensor
            note_stats(x)
            h = nd.layer_norm(x, g("ln1_g"), g("ln1_b"), eps=LN_EPS)
            attn = nd.AttentionParams(
                wq=g("attn_qw"), bq=g("attn_qb"), wk=g("attn_kw"), bk=g("attn_kb"),
                wv=g("attn_vw"), bv=g("attn_vb"), wo=g("attn_ow"), bo=g("attn_ob"),
                num_heads=self.config.attn_heads,
            )
            x = nd.add(x, nd.self_attention(h, attn, key_mask=seq.mask))
            note_stats(x)
            h = nd.layer_norm(x, g("ln2_g"), g("ln2_b"), eps=LN_EPS)
            inner = nd.relu(nd.add(nd.matmul(h, g("ff_w1")), g("ff_b1")))
            x = nd.add(x, nd.add(nd.matmul(inner, g("ff_w2")), g("ff_b2")))
        return x

    def set_frozen(self, frozen: bool, include_embeddings: bool = False):
        """Freeze/unfreeze encoder layers.

        Embedding tables and the image projection keep training through a
        freeze unless include_embeddings is set.
        """
        for p in self.params:
            if p.name.startswith("backbone/layer"):
                p.trainable = not frozen
            elif include_embeddings:
                p.trainable = not frozen


class MultiTaskModel:
    """One shared backbone plus a per-task classification head."""

    def __init__(self, backbone_cfg: BackboneConfig, allocation, seed=0):
        rng = np.random.default_rng([seed, 0])
        self.backbone = Backbone(backbone_cfg, rng)
        self.allocation = dict(allocation)
        self.heads = {}
        for tid in sorted(self.allocation):
            cfg = self.allocation[tid]
            if cfg.d_backbone != backbone_cfg.hidden:
                raise ConfigurationError(
                    f"head for task {tid} expects width {cfg.d_backbone}, "
                    f"backbone is {backbone_cfg.hidden}"
                )
            self.heads[tid] = build_head(cfg, rng, f"heads/task{tid:03d}")

    def parameters(self):
        out = list(self.backbone.params)
        for tid in sorted(self.heads):
            out.extend(self.heads[tid].params)
        return out

    def head_for(self, task_id: int):
        if task_id not in self.heads:
            raise EvaluationError(f"no head for task {task_id}")
        return self.heads[task_id]

    def logits(self, examples, task_id: int, collect_norm_stats=None) -> nd.Tensor:
        head = self.head_for(task_id)
        seq = self.backbone.assemble(examples)
        tokens = self.backbone.encode(seq, collect_norm_stats)
        return head.forward(tokens, mask=seq.mask)

    def loss(self, examples, task_id: int) -> nd.Tensor:
        labels = np.array([e.label for e in examples], dtype=np.int64)
        return nd.softmax_xent(self.logits(examples, task_id), labels)

    def set_frozen(self, frozen: bool, include_embeddings: bool = False):
        self.backbone.set_frozen(frozen, include_embeddings)
