"""Decoder object queries: points, anchor boxes, and noised-anchor groups.

A query set holds one slot per decoder query: a content vector, a spatial
anchor, and a group tag. Matching queries compete for targets through the
assignment; denoising queries carry a known target index and bypass it.
With N ground truths and one denoising group the layout is the 3N scheme:
N reserved matching slots plus N positive and N negative noised anchors
(extra matching slots beyond N are allowed).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import BoundingBox, l1_distance
from .matching import GroundTruthObject

MIN_NOISED_EXTENT = 1e-4
DEFAULT_POINT_EXTENT = 0.1


class QueryVariant(enum.Enum):
    GRID_POINTS = "grid_points"
    LEARNED_POINTS = "learned_points"
    ANCHOR_BOXES = "anchor_boxes"
    ANCHORS_POSITIVE_NOISE = "anchors_positive_noise"
    ANCHORS_POS_NEG_NOISE = "anchors_pos_neg_noise"

    @property
    def uses_positive_noise(self) -> bool:
        return self in (
            QueryVariant.ANCHORS_POSITIVE_NOISE,
            QueryVariant.ANCHORS_POS_NEG_NOISE,
        )

    @property
    def uses_negative_noise(self) -> bool:
        return self is QueryVariant.ANCHORS_POS_NEG_NOISE


class QueryGroup(enum.Enum):
    MATCHING = "matching"
    POSITIVE_DN = "positive_dn"
    NEGATIVE_DN = "negative_dn"


class NoiseSign(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class NoiseConfig:
    """Noise scales: lambda1 bounds mild positive noise, (lambda1, lambda2]
    is the shell negative noise is drawn from."""

    lambda1: float = 0.4
    lambda2: float = 0.8
    groups: int = 1

    def validate(self) -> None:
        if not 0.0 < self.lambda1 < self.lambda2 <= 1.0:
            raise ValueError(
                f"need 0 < lambda1 < lambda2 <= 1, got {self.lambda1}, {self.lambda2}"
            )
        if self.groups < 1:
            raise ValueError("need at least one denoising group")


@dataclass(frozen=True)
class PositionalEncodingSpec:
    """Sinusoidal encoding width per box coordinate and its temperature."""

    dim_per_coordinate: int = 8
    temperature: float = 20.0

    def validate(self) -> None:
        if self.dim_per_coordinate <= 0 or self.dim_per_coordinate % 2:
            raise ValueError("dim_per_coordinate must be a positive even count")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    @property
    def box_width(self) -> int:
        return 4 * self.dim_per_coordinate


@dataclass
class QuerySet:
    """Per-query content vectors, anchors, and group bookkeeping.

    dn_block is 0 for matching queries and g+1 for denoising group g; two
    queries may attend to each other exactly when their blocks match.
    """

    content: np.ndarray  # (n, d)
    anchors: np.ndarray  # (n, 4) cxcywh
    group_of: list[QueryGroup]
    gt_index: list[int | None]
    dn_block: list[int] = field(default_factory=list)
    dn_class: list[int | None] = field(default_factory=list)
    variant: QueryVariant = QueryVariant.ANCHORS_POS_NEG_NOISE

    def __len__(self) -> int:
        return len(self.group_of)

    @property
    def n_matching(self) -> int:
        return sum(1 for g in self.group_of if g is QueryGroup.MATCHING)

    @property
    def matching_indices(self) -> list[int]:
        return [i for i, g in enumerate(self.group_of) if g is QueryGroup.MATCHING]

    @property
    def dn_indices(self) -> list[int]:
        return [i for i, g in enumerate(self.group_of) if g is not QueryGroup.MATCHING]

    def anchor_boxes(self) -> list[BoundingBox]:
        return [BoundingBox(*row) for row in self.anchors]


def grid_points(n: int) -> list[tuple[float, float]]:
    """First n cell centers of the smallest square lattice covering n."""
    if n < 1:
        raise ValueError("need at least one point")
    g = math.isqrt(n)
    g += g * g < n
    pts = [((c + 0.5) / g, (r + 0.5) / g) for r in range(g) for c in range(g)]
    return pts[:n]


def pe_frequencies(spec: PositionalEncodingSpec) -> np.ndarray:
    half = spec.dim_per_coordinate // 2
    j = np.arange(half, dtype=np.float64)
    return spec.temperature ** (-2.0 * j / spec.dim_per_coordinate)


def sinusoidal_pe(v: float, spec: PositionalEncodingSpec) -> np.ndarray:
    """Interleaved sin/cos of 2*pi*v at geometrically spaced frequencies."""
    spec.validate()
    angles = 2.0 * math.pi * v * pe_frequencies(spec)
    out = np.empty(spec.dim_per_coordinate, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def encode_anchor(a: BoundingBox, spec: PositionalEncodingSpec) -> np.ndarray:
    """Concatenated coordinate encodings in (cx, cy, w, h) order."""
    return np.concatenate(
        [sinusoidal_pe(v, spec) for v in (a.cx, a.cy, a.w, a.h)]
    )


def encode_anchors(boxes: np.ndarray, spec: PositionalEncodingSpec) -> np.ndarray:
    """Vectorized encode_anchor over an (n, 4) array; output (n, 4 * dim)."""
    spec.validate()
    boxes = np.asarray(boxes, dtype=np.float64)
    freqs = pe_frequencies(spec)
    angles = 2.0 * math.pi * boxes[:, :, None] * freqs  # (n, 4, half)
    inter = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (n, 4, half, 2)
    return inter.reshape(boxes.shape[0], -1)


def encode_anchors_t(anchors: ad.Tensor, spec: PositionalEncodingSpec) -> ad.Tensor:
    """Differentiable encode_anchors for an (n, 4) anchor tensor."""
    spec.validate()
    n = anchors.shape[0]
    half = spec.dim_per_coordinate // 2
    freqs = pe_frequencies(spec).reshape(1, 1, half)
    angles = ad.mul(ad.reshape(anchors, (n, 4, 1)), 2.0 * math.pi * freqs)
    s = ad.reshape(ad.sin(angles), (n, 4, half, 1))
    c = ad.reshape(ad.cos(angles), (n, 4, half, 1))
    return ad.reshape(ad.concat([s, c], axis=3), (n, spec.box_width))


def positional_query(
    anchor: BoundingBox | ad.Tensor,
    mlp: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    spec: PositionalEncodingSpec,
) -> ad.Tensor:
    """Two-layer perceptron on the anchor encoding: linear, relu, linear.

    Differentiable with respect to the anchor when given as a tensor.
    """
    w1, b1, w2, b2 = (x if isinstance(x, ad.Tensor) else ad.constant(x) for x in mlp)
    if w1.shape[0] != spec.box_width:
        raise ValueError(
            f"mlp input width {w1.shape[0]} != encoding width {spec.box_width}"
        )
    squeeze = isinstance(anchor, BoundingBox) or anchor.shape == (4,)
    if isinstance(anchor, BoundingBox):
        anchor = ad.constant(anchor.as_array().reshape(1, 4))
    elif squeeze:
        anchor = ad.reshape(anchor, (1, 4))
    enc = encode_anchors_t(anchor, spec)
    hidden = ad.relu(ad.add(ad.matmul(enc, w1), b1))
    out = ad.add(ad.matmul(hidden, w2), b2)
    return ad.reshape(out, (out.shape[1],)) if squeeze else out


def noise_anchor(
    gt: BoundingBox, cfg: NoiseConfig, sign: NoiseSign, rng: np.random.Generator
) -> BoundingBox:
    """Perturb a ground-truth box.

    Positive noise shifts the center within lambda1 times the half-extent
    and rescales width/height within [1 - lambda1, 1 + lambda1]. Negative
    noise draws every perturbation magnitude from the (lambda1, lambda2]
    shell instead, giving a clearly-off box that still hugs the object.
    The result is clamped to the unit square with a tiny minimum extent.
    """
    cfg.validate()
    if sign is NoiseSign.POSITIVE:
        fx, fy, fw, fh = rng.uniform(-cfg.lambda1, cfg.lambda1, size=4)
    else:
        mags = rng.uniform(cfg.lambda1, cfg.lambda2, size=4)
        signs = np.where(rng.random(size=4) < 0.5, -1.0, 1.0)
        fx, fy, fw, fh = mags * signs
    cx = min(1.0, max(0.0, gt.cx + fx * gt.w / 2.0))
    cy = min(1.0, max(0.0, gt.cy + fy * gt.h / 2.0))
    w = min(1.0, max(MIN_NOISED_EXTENT, gt.w * (1.0 + fw)))
    h = min(1.0, max(MIN_NOISED_EXTENT, gt.h * (1.0 + fh)))
    return BoundingBox(cx, cy, w, h)


def lift_points(points: list[tuple[float, float]], extent: float = DEFAULT_POINT_EXTENT) -> np.ndarray:
    """Points become degenerate anchors with a fixed default extent."""
    return np.array([[x, y, extent, extent] for x, y in points], dtype=np.float64)


def build_query_groups(
    gts: list[GroundTruthObject],
    n_matching: int,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    *,
    variant: QueryVariant = QueryVariant.ANCHORS_POS_NEG_NOISE,
    matching_anchors: np.ndarray | None = None,
    matching_content: np.ndarray | None = None,
    label_embedding: np.ndarray | None = None,
    amd_k: int | None = None,
    strict: bool = True,
) -> QuerySet:
    """Assemble matching plus denoising queries for one image.

    Matching slots use the supplied anchors (a grid lift by default) and
    content rows; each denoising group adds one positive and, for the full
    variant, one negative noised anchor per ground truth, with content
    taken from the label embedding. amd_k optionally drops negative
    anchors whose distance to their target exceeds the mean of the k
    largest distances within the group. strict=False permits fewer
    matching slots than ground truths (deliberate under-coverage); the
    assignment then covers only as many targets as there are slots.
    """
    if strict and n_matching < len(gts):
        raise ValueError(
            f"{n_matching} matching queries cannot cover {len(gts)} ground truths"
        )
    cfg.validate()
    if matching_anchors is None:
        matching_anchors = lift_points(grid_points(n_matching))
    matching_anchors = np.asarray(matching_anchors, dtype=np.float64)
    if matching_anchors.shape != (n_matching, 4):
        raise ValueError(
            f"expected ({n_matching}, 4) matching anchors, got {matching_anchors.shape}"
        )
    if matching_content is None:
        dim = 0 if label_embedding is None else label_embedding.shape[1]
        matching_content = np.zeros((n_matching, dim or 1), dtype=np.float64)
    matching_content = np.asarray(matching_content, dtype=np.float64)
    dim = matching_content.shape[1]

    anchors = [matching_anchors]
    content = [matching_content]
    group_of = [QueryGroup.MATCHING] * n_matching
    gt_index: list[int | None] = [None] * n_matching
    dn_block = [0] * n_matching
    dn_class: list[int | None] = [None] * n_matching

    def dn_content(class_id: int) -> np.ndarray:
        if label_embedding is None:
            return np.zeros(dim, dtype=np.float64)
        return np.asarray(label_embedding[class_id], dtype=np.float64)

    if gts and variant.uses_positive_noise:
        for g in range(cfg.groups):
            for sign, tag in (
                (NoiseSign.POSITIVE, QueryGroup.POSITIVE_DN),
                (NoiseSign.NEGATIVE, QueryGroup.NEGATIVE_DN),
            ):
                if tag is QueryGroup.NEGATIVE_DN and not variant.uses_negative_noise:
                    continue
                boxes = [noise_anchor(gt.box, cfg, sign, rng) for gt in gts]
                keep = list(range(len(gts)))
                if tag is QueryGroup.NEGATIVE_DN and amd_k is not None:
                    keep = amd_filter(boxes, [gt.box for gt in gts], amd_k)
                anchors.append(
                    np.array([boxes[i].as_array() for i in keep]).reshape(-1, 4)
                )
                content.append(
                    np.array([dn_content(gts[i].class_id) for i in keep]).reshape(-1, dim)
                )
                group_of.extend([tag] * len(keep))
                gt_index.extend(keep)
                dn_block.extend([g + 1] * len(keep))
                dn_class.extend(gts[i].class_id for i in keep)

    return QuerySet(
        content=np.concatenate(content, axis=0),
        anchors=np.concatenate(anchors, axis=0),
        group_of=group_of,
        gt_index=gt_index,
        dn_block=dn_block,
        dn_class=dn_class,
        variant=variant,
    )


def amd_filter(
    anchors: list[BoundingBox], gts: list[BoundingBox], k: int
) -> list[int]:
    """Keep anchors within the mean of the k largest anchor-target distances.

    Anchors pair index-wise with their targets; the threshold is the
    average of the k largest component-wise L1 distances.
    """
    if not anchors or len(anchors) != len(gts):
        raise ValueError("anchors and ground truths must pair up non-empty")
    if not 1 <= k <= len(anchors):
        raise ValueError(f"k must be in [1, {len(anchors)}], got {k}")
    dists = np.array([l1_distance(a, b) for a, b in zip(anchors, gts)])
    threshold = float(np.sort(dists)[-k:].mean())
    return [i for i, d in enumerate(dists) if d <= threshold]


def attention_group_mask(qs: QuerySet) -> np.ndarray:
    """Boolean visibility matrix: queries see exactly their own block.

    Matching queries form one block; each denoising group (its positive
    and negative queries together) forms another. The matrix is symmetric.
    """
    blocks = np.asarray(qs.dn_block)
    return blocks[:, None] == blocks[None, :]
