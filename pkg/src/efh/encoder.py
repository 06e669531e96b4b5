"""Language-aware encoder.

The coarsest pyramid level gets intra-scale self-attention with fixed 2-D
sinusoidal positions (AIFI), cross-scale convolutional fusion merges all
three levels PANet-style (top-down then bottom-up), and the flattened
output is scored against label embeddings by max cosine similarity to
pick the top-K box proposals that seed the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat, matmul, top_k
from .nn import (Conv2d, LayerNorm, Linear, MLP, MultiHeadSelfAttention,
                 inverse_sigmoid, sincos_position_2d, upsample_nearest2x)

# anchor w/h at stride 8, doubled per coarser scale
ANCHOR_BASE_SIZE = 0.05
COSINE_EPS = 1e-8


@dataclass
class EncodedFeatures:
    """Flattened multi-scale encoder output with per-position anchors."""
    o: Tensor                       # [M, d]
    anchors: np.ndarray             # [M, 4] normalized cxcywh
    scale_shapes: list              # [(h, w)] per scale, fine to coarse
    scale_offsets: list = field(default_factory=list)  # start index of each scale block

    @property
    def total_positions(self):
        return self.o.shape[0]

    def per_scale(self):
        """Views of o reshaped to each scale's 2-D layout, [h, w, d]."""
        out = []
        for (h, w), start in zip(self.scale_shapes, self.scale_offsets):
            out.append(self.o[start:start + h * w].reshape(h, w, self.o.shape[1]))
        return out


@dataclass
class CandidateBoxes:
    boxes: Tensor      # [M, 4] cxcywh
    relevance: Tensor  # [M]


@dataclass
class QueryProposals:
    b0: Tensor         # [K_q, 4]
    indices: list      # into the flattened positions
    k: int


def build_anchors(scale_shapes):
    """Cell-center anchors: (cx, cy) at cell centers, w=h doubling per scale."""
    rows = []
    for level, (h, w) in enumerate(scale_shapes):
        size = ANCHOR_BASE_SIZE * (2 ** level)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (gx.reshape(-1) + 0.5) / w
        cy = (gy.reshape(-1) + 0.5) / h
        wh = np.full_like(cx, size, dtype=np.float64)
        rows.append(np.stack([cx, cy, wh, wh], axis=1))
    return np.concatenate(rows, axis=0)


class Aifi:
    """Intra-scale self-attention on the coarsest map, fixed sinusoid positions."""

    def __init__(self, rng, d, heads, dtype=np.float32):
        self.d = d
        self.dtype = dtype
        self.attn = MultiHeadSelfAttention(rng, d, heads, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.ff1 = Linear(rng, d, 4 * d, dtype)
        self.ff2 = Linear(rng, 4 * d, d, dtype)
        self.norm2 = LayerNorm(d, dtype)

    def __call__(self, p5):
        h, w, d = p5.shape
        pos = Tensor(sincos_position_2d(h, w, d, dtype=self.dtype))
        x = p5.reshape(h * w, d)
        x = self.norm1(x + self.attn(x, pos=pos))
        x = self.norm2(x + self.ff2(self.ff1(x).gelu()))
        return x.reshape(h, w, d)

    def parameters(self, prefix):
        out = {}
        out.update(self.attn.parameters(f"{prefix}.attn"))
        out.update(self.norm1.parameters(f"{prefix}.norm1"))
        out.update(self.ff1.parameters(f"{prefix}.ff1"))
        out.update(self.ff2.parameters(f"{prefix}.ff2"))
        out.update(self.norm2.parameters(f"{prefix}.norm2"))
        return out


class FusionBlock:
    """concat -> 1x1 conv -> 3x3 conv, both followed by GELU."""

    def __init__(self, rng, d, dtype=np.float32):
        self.reduce = Conv2d(rng, 2 * d, d, 1, dtype=dtype)
        self.mix = Conv2d(rng, d, d, 3, padding=1, dtype=dtype)

    def __call__(self, a, b):
        x = concat([a, b], axis=2)
        return self.mix(self.reduce(x).gelu()).gelu()

    def parameters(self, prefix):
        out = {}
        out.update(self.reduce.parameters(f"{prefix}.reduce"))
        out.update(self.mix.parameters(f"{prefix}.mix"))
        return out


class Ccfm:
    """PANet-style cross-scale fusion over {P3, P4, F5}."""

    def __init__(self, rng, d, dtype=np.float32):
        self.td4 = FusionBlock(rng, d, dtype)   # top-down into P4
        self.td3 = FusionBlock(rng, d, dtype)   # top-down into P3
        self.bu4 = FusionBlock(rng, d, dtype)   # bottom-up into level 4
        self.bu5 = FusionBlock(rng, d, dtype)   # bottom-up into level 5
        self.down3 = Conv2d(rng, d, d, 3, stride=2, padding=1, dtype=dtype)
        self.down4 = Conv2d(rng, d, d, 3, stride=2, padding=1, dtype=dtype)

    def __call__(self, p3, p4, f5) -> EncodedFeatures:
        n4 = self.td4(p4, upsample_nearest2x(f5))
        n3 = self.td3(p3, upsample_nearest2x(n4))
        m4 = self.bu4(n4, self.down3(n3))
        m5 = self.bu5(f5, self.down4(m4))
        maps = [n3, m4, m5]
        shapes = [(m.shape[0], m.shape[1]) for m in maps]
        flat = concat([m.reshape(m.shape[0] * m.shape[1], m.shape[2]) for m in maps], axis=0)
        offsets = list(np.cumsum([0] + [h * w for h, w in shapes[:-1]]))
        return EncodedFeatures(flat, build_anchors(shapes), shapes, offsets)

    def parameters(self, prefix):
        out = {}
        for name in ("td4", "td3", "bu4", "bu5"):
            out.update(getattr(self, name).parameters(f"{prefix}.{name}"))
        out.update(self.down3.parameters(f"{prefix}.down3"))
        out.update(self.down4.parameters(f"{prefix}.down4"))
        return out


class ElaEncoder:
    def __init__(self, rng, d=64, d_text=64, heads=8, dtype=np.float32):
        self.d = d
        self.dtype = dtype
        self.aifi = Aifi(rng, d, heads, dtype)
        self.ccfm = Ccfm(rng, d, dtype)
        self.box_mlp = MLP(rng, [d, d, d, 4], dtype, zero_last=True)
        # maps label embeddings into the visual width so cosine is defined;
        # shared with the decoder classification head
        self.label_proj = Linear(rng, d_text, d, dtype)

    def encode(self, pyramid) -> EncodedFeatures:
        f5 = self.aifi(pyramid.p5)
        return self.ccfm(pyramid.p3, pyramid.p4, f5)

    def predict_candidate_boxes(self, encoded: EncodedFeatures) -> Tensor:
        delta = self.box_mlp(encoded.o)
        anchor_logit = inverse_sigmoid(Tensor(encoded.anchors.astype(self.dtype)))
        return (delta + anchor_logit).sigmoid()

    def project_labels(self, label_embeddings) -> Tensor:
        return self.label_proj(label_embeddings.embeddings)

    def relevance_scores(self, encoded: EncodedFeatures, label_embeddings) -> Tensor:
        proj = self.project_labels(label_embeddings)                  # [K_lbl, d]
        o = encoded.o
        o_norm = (o * o).sum(axis=1, keepdims=True).sqrt() + COSINE_EPS
        l_norm = (proj * proj).sum(axis=1, keepdims=True).sqrt() + COSINE_EPS
        cos = matmul(o / o_norm, (proj / l_norm).T)                   # [M, K_lbl]
        # max over labels, kept differentiable through the argmax entries
        idx = np.argmax(cos.data, axis=1)
        return cos[np.arange(cos.shape[0]), idx]

    def select_queries(self, candidates: CandidateBoxes, k) -> QueryProposals:
        m = candidates.relevance.shape[0]
        if k > m:
            raise ValueError(f"query count {k} exceeds {m} positions")
        indices = top_k(candidates.relevance, k)
        return QueryProposals(candidates.boxes[np.asarray(indices)], indices, k)

    def propose(self, encoded: EncodedFeatures, label_embeddings, k):
        boxes = self.predict_candidate_boxes(encoded)
        relevance = self.relevance_scores(encoded, label_embeddings)
        candidates = CandidateBoxes(boxes, relevance)
        return candidates, self.select_queries(candidates, k)

    def parameters(self, prefix="encoder"):
        out = {}
        out.update(self.aifi.parameters(f"{prefix}.aifi"))
        out.update(self.ccfm.parameters(f"{prefix}.ccfm"))
        out.update(self.box_mlp.parameters(f"{prefix}.box_mlp"))
        out.update(self.label_proj.parameters(f"{prefix}.label_proj"))
        return out
