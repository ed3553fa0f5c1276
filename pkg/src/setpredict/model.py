"""Desk-scale detection transformer: patch embedding, dense self-attention
encoder, and a decoder whose queries carry spatial anchors, attend within
visibility blocks, sample features deformably around their anchor, and
refine the anchor layer by layer.

Every decoder slot emits one detection; there is no suppression stage
anywhere between the decoder and the returned detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .evaluation import Detection
from .geometry import BoundingBox
from .losses import LossBreakdown, LossConfig, combine_breakdowns, total_loss
from .matching import CostWeights, GroundTruthObject
from .queries import (
    NoiseConfig,
    PositionalEncodingSpec,
    QuerySet,
    QueryVariant,
    build_query_groups,
    encode_anchors_t,
    grid_points,
    lift_points,
    sinusoidal_pe,
)

LOGIT_CLAMP = 16.0


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    levels: int = 2
    sample_points: int = 4
    patch: int = 8
    channels: int = 1
    num_classes: int = 3
    query_count: int = 10
    ffn_mult: int = 4
    pe_temperature: float = 20.0
    point_extent: float = 0.1
    variant: QueryVariant = QueryVariant.ANCHORS_POS_NEG_NOISE

    def validate(self) -> None:
        if self.d_model % 8:
            raise ValueError("d_model must be a multiple of 8 (PE block widths)")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")
        if min(self.enc_layers, self.dec_layers, self.levels, self.sample_points) < 1:
            raise ValueError("layer, level and sample counts must be positive")
        if self.num_classes < 1 or self.query_count < 1:
            raise ValueError("need at least one class and one query")

    @property
    def anchor_pe(self) -> PositionalEncodingSpec:
        return PositionalEncodingSpec(self.d_model // 4, self.pe_temperature)

    @property
    def token_pe(self) -> PositionalEncodingSpec:
        return PositionalEncodingSpec(self.d_model // 2, self.pe_temperature)


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Detector:
    """Parameter container plus the forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, ad.Tensor] = {}
        self._mpe_cache: dict[tuple[int, int], np.ndarray] = {}
        self._init_params(np.random.default_rng(np.random.SeedSequence([seed, 0xD0D])))

    # ------------------------------------------------------------------
    # parameters

    def _add(self, name, value):
        self.params[name] = ad.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    def _linear(self, rng, name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else _xavier(rng, fan_in, fan_out)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fan_out))

    def _ln(self, name, dim):
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _init_params(self, rng):
        cfg = self.cfg
        d = cfg.d_model
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        ffn = d * cfg.ffn_mult
        hlk = cfg.heads * cfg.levels * cfg.sample_points

        self._linear(rng, "patch", patch_dim, d)
        for i in range(cfg.enc_layers):
            p = f"enc{i}"
            self._ln(f"{p}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.attn.{proj}", d, d)
            self._ln(f"{p}.ln2", d)
            self._linear(rng, f"{p}.ffn.1", d, ffn)
            self._linear(rng, f"{p}.ffn.2", ffn, d)
        self._ln("enc.ln_out", d)

        for i in range(cfg.dec_layers):
            p = f"dec{i}"
            self._ln(f"{p}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.self.{proj}", d, d)
            self._ln(f"{p}.ln2", d)
            self._linear(rng, f"{p}.cross.value", d, d)
            self._linear(rng, f"{p}.cross.offset", d, hlk * 2, zero=True)
            self.params[f"{p}.cross.offset.b"].data[...] = self._offset_bias_init()
            self._linear(rng, f"{p}.cross.attw", d, hlk, zero=True)
            self._linear(rng, f"{p}.cross.out", d, d)
            self._ln(f"{p}.ln3", d)
            self._linear(rng, f"{p}.ffn.1", d, ffn)
            self._linear(rng, f"{p}.ffn.2", ffn, d)
        self._ln("dec.ln_out", d)

        self._linear(rng, "posmlp.1", d, d)
        self._linear(rng, "posmlp.2", d, d)

        self._linear(rng, "head.class", d, cfg.num_classes + 1)
        # bias the no-object slot so random init does not flood detections
        self.params["head.class.b"].data[-1] = 2.0
        self._linear(rng, "head.box.1", d, d)
        self._linear(rng, "head.box.2", d, 4, zero=True)

        self._add("query.content", rng.normal(0.0, 0.5, size=(cfg.query_count, d)))
        grid = lift_points(grid_points(cfg.query_count), cfg.point_extent)
        self._add("query.anchor_logits", inverse_sigmoid(grid))
        self._add("query.point_logits", inverse_sigmoid(grid[:, :2]))
        self._add("label_embed", rng.normal(0.0, 0.5, size=(cfg.num_classes, d)))

    def _offset_bias_init(self):
        cfg = self.cfg
        out = np.zeros((cfg.heads, cfg.levels, cfg.sample_points, 2))
        for h in range(cfg.heads):
            for k in range(cfg.sample_points):
                theta = 2.0 * math.pi * (h * cfg.sample_points + k) / (
                    cfg.heads * cfg.sample_points
                )
                radius = 0.5 * (k + 1) / cfg.sample_points
                out[h, :, k, 0] = radius * math.cos(theta)
                out[h, :, k, 1] = radius * math.sin(theta)
        return out.reshape(-1)

    def state(self) -> dict[str, ad.Tensor]:
        return self.params

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"checkpoint does not match model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for k, arr in arrays.items():
            if arr.shape != self.params[k].data.shape:
                raise ValueError(
                    f"shape mismatch for {k}: checkpoint {arr.shape}, "
                    f"model {self.params[k].data.shape}"
                )
            self.params[k].data[...] = arr

    # ------------------------------------------------------------------
    # shared pieces

    def _lin(self, t, name):
        return ad.add(ad.matmul(t, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _layernorm(self, t, name):
        return ad.layernorm(t, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, t, prefix):
        return self._lin(ad.relu(self._lin(t, f"{prefix}.1")), f"{prefix}.2")

    def _attention(self, q, k, v):
        heads = self.cfg.heads
        n, d = q.shape
        m = k.shape[0]
        dh = d // heads
        qh = ad.transpose(ad.reshape(q, (n, heads, dh)), (1, 0, 2))
        kh = ad.transpose(ad.reshape(k, (m, heads, dh)), (1, 0, 2))
        vh = ad.transpose(ad.reshape(v, (m, heads, dh)), (1, 0, 2))
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
        out = ad.matmul(ad.softmax(scores, axis=-1), vh)
        return ad.reshape(ad.transpose(out, (1, 0, 2)), (n, d))

    # ------------------------------------------------------------------
    # encoder

    def token_positions(self, hp: int, wp: int) -> np.ndarray:
        """Fixed 2D sinusoidal embedding for the (hp, wp) token grid."""
        key = (hp, wp)
        cached = self._mpe_cache.get(key)
        if cached is not None:
            return cached
        spec = self.cfg.token_pe
        xs = np.stack([sinusoidal_pe((c + 0.5) / wp, spec) for c in range(wp)])
        ys = np.stack([sinusoidal_pe((r + 0.5) / hp, spec) for r in range(hp)])
        out = np.concatenate(
            [np.tile(xs[None, :, :], (hp, 1, 1)), np.tile(ys[:, None, :], (1, wp, 1))],
            axis=2,
        ).reshape(hp * wp, self.cfg.d_model)
        self._mpe_cache[key] = out
        return out

    def patchify(self, image: np.ndarray) -> tuple[ad.Tensor, int, int]:
        """Linear patch projection plus the fixed positional embedding."""
        cfg = self.cfg
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        h, w, c = img.shape
        if c != cfg.channels:
            raise ValueError(f"expected {cfg.channels} channel(s), got {c}")
        p = cfg.patch
        if h % p or w % p:
            raise ValueError(f"patch size {p} does not divide image {h}x{w}")
        hp, wp = h // p, w // p
        tokens = (
            img.reshape(hp, p, wp, p, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(hp * wp, p * p * c)
        )
        tokens = tokens / 255.0
        z0 = ad.add(self._lin(ad.constant(tokens), "patch"), self.token_positions(hp, wp))
        return z0, hp, wp

    def encode(self, z0: ad.Tensor, hp: int, wp: int) -> list[ad.Tensor]:
        """Self-attention encoder; returns one (H, W, d) map per level."""
        cfg = self.cfg
        x = z0
        for i in range(cfg.enc_layers):
            p = f"enc{i}"
            t = self._layernorm(x, f"{p}.ln1")
            q = self._lin(t, f"{p}.attn.q")
            k = self._lin(t, f"{p}.attn.k")
            v = self._lin(t, f"{p}.attn.v")
            x = ad.add(x, self._lin(self._attention(q, k, v), f"{p}.attn.o"))
            t2 = self._layernorm(x, f"{p}.ln2")
            x = ad.add(x, self._ffn(t2, f"{p}.ffn"))
        x = self._layernorm(x, "enc.ln_out")

        maps = [ad.reshape(x, (hp, wp, cfg.d_model))]
        cur_h, cur_w = hp, wp
        for _ in range(1, cfg.levels):
            if cur_h % 2 or cur_w % 2:
                raise ValueError(
                    f"token grid {cur_h}x{cur_w} not divisible by 2 for pooling"
                )
            m = maps[-1]
            m = ad.reshape(m, (cur_h // 2, 2, cur_w // 2, 2, cfg.d_model))
            m = ad.mean(ad.mean(m, axis=3), axis=1)
            maps.append(m)
            cur_h //= 2
            cur_w //= 2
        return maps

    def features(self, image: np.ndarray) -> list[ad.Tensor]:
        z0, hp, wp = self.patchify(image)
        return self.encode(z0, hp, wp)

    # ------------------------------------------------------------------
    # decoder

    def _positional_queries(self, anchors: ad.Tensor) -> ad.Tensor:
        enc = encode_anchors_t(anchors, self.cfg.anchor_pe)
        return self._lin(ad.relu(self._lin(enc, "posmlp.1")), "posmlp.2")

    def _block_self_attention(self, x, pos, blocks, prefix):
        base = ad.add(x, pos)
        q = self._lin(base, f"{prefix}.q")
        k = self._lin(base, f"{prefix}.k")
        v = self._lin(x, f"{prefix}.v")
        if len(blocks) == 1:
            out = self._attention(q, k, v)
        else:
            parts = []
            for idx in blocks:
                parts.append(
                    self._attention(
                        ad.take(q, idx, 0), ad.take(k, idx, 0), ad.take(v, idx, 0)
                    )
                )
            perm = np.concatenate(blocks)
            out = ad.take(ad.concat(parts, axis=0), np.argsort(perm, kind="stable"), 0)
        return self._lin(out, f"{prefix}.o")

    def deformable_attention(
        self,
        query_embed: ad.Tensor,
        anchors: ad.Tensor,
        feature_maps: list[ad.Tensor],
        layer: int,
        return_weights: bool = False,
    ):
        """Sample a few value points per head and level around each anchor.

        Offsets are scaled by the anchor extent; attention weights are
        normalized over (levels x points) within each head. Samples
        outside a map read as zero.
        """
        cfg = self.cfg
        prefix = f"dec{layer}.cross"
        nq = query_embed.shape[0]
        heads, levels, pts = cfg.heads, cfg.levels, cfg.sample_points
        dh = cfg.d_model // heads

        offsets = ad.reshape(
            self._lin(query_embed, f"{prefix}.offset"), (nq, heads, levels, pts, 2)
        )
        weights = ad.reshape(
            ad.softmax(
                ad.reshape(
                    self._lin(query_embed, f"{prefix}.attw"), (nq, heads, levels * pts)
                ),
                axis=-1,
            ),
            (nq, heads, levels, pts),
        )

        cx = ad.reshape(anchors[:, 0], (nq, 1))
        cy = ad.reshape(anchors[:, 1], (nq, 1))
        bw = ad.reshape(anchors[:, 2], (nq, 1))
        bh = ad.reshape(anchors[:, 3], (nq, 1))

        value_maps = []
        for fmap in feature_maps:
            hl, wl, _ = fmap.shape
            flat = ad.reshape(fmap, (hl * wl, cfg.d_model))
            value_maps.append(ad.reshape(self._lin(flat, f"{prefix}.value"), (hl, wl, cfg.d_model)))

        head_outs = []
        for hd in range(heads):
            acc = None
            for lvl, vmap in enumerate(value_maps):
                hl, wl, _ = vmap.shape
                ox = offsets[:, hd, lvl, :, 0]
                oy = offsets[:, hd, lvl, :, 1]
                sx = ad.add(cx, ad.mul(ox, bw))
                sy = ad.add(cy, ad.mul(oy, bh))
                px = ad.sub(ad.mul(sx, float(wl)), 0.5)
                py = ad.sub(ad.mul(sy, float(hl)), 0.5)
                samp = ad.bilinear_sample(vmap, px, py)  # (nq, pts, d)
                chan = samp[:, :, hd * dh : (hd + 1) * dh]
                wgt = ad.reshape(weights[:, hd, lvl, :], (nq, pts, 1))
                term = ad.sum_(ad.mul(chan, wgt), axis=1)
                acc = term if acc is None else ad.add(acc, term)
            head_outs.append(acc)
        out = self._lin(ad.concat(head_outs, axis=1), f"{prefix}.out")
        if return_weights:
            return out, weights.data
        return out

    def _initial_queries(self, qs: QuerySet):
        cfg = self.cfg
        m_idx = qs.matching_indices
        n_match = len(m_idx)
        if n_match > cfg.query_count:
            raise ValueError(
                f"{n_match} matching queries exceed the configured {cfg.query_count}"
            )
        rows = np.arange(n_match, dtype=np.intp)
        content_parts = [ad.take(self.params["query.content"], rows, 0)]

        if cfg.variant is QueryVariant.GRID_POINTS:
            anchors = lift_points(grid_points(n_match), cfg.point_extent)
            logit_parts = [ad.constant(inverse_sigmoid(anchors))]
        elif cfg.variant is QueryVariant.LEARNED_POINTS:
            xy = ad.take(self.params["query.point_logits"], rows, 0)
            extent = inverse_sigmoid(
                np.full((n_match, 2), cfg.point_extent)
            )
            logit_parts = [ad.concat([xy, ad.constant(extent)], axis=1)]
        else:
            logit_parts = [ad.take(self.params["query.anchor_logits"], rows, 0)]

        d_idx = qs.dn_indices
        if d_idx:
            classes = np.array([qs.dn_class[i] for i in d_idx], dtype=np.intp)
            content_parts.append(ad.take(self.params["label_embed"], classes, 0))
            logit_parts.append(ad.constant(inverse_sigmoid(qs.anchors[d_idx])))

        content = ad.concat(content_parts, axis=0) if len(content_parts) > 1 else content_parts[0]
        logits = ad.concat(logit_parts, axis=0) if len(logit_parts) > 1 else logit_parts[0]
        return content, logits

    def decode(self, qs: QuerySet, feature_maps: list[ad.Tensor]):
        """Run the decoder; returns per-layer (probs, boxes) tensors.

        Queries are ordered as in qs (matching block first). Self-attention
        is evaluated independently per visibility block, so denoising
        groups and matching queries cannot exchange information.
        """
        cfg = self.cfg
        content, anchor_logit = self._initial_queries(qs)
        block_ids = np.asarray(qs.dn_block)
        blocks = [
            np.where(block_ids == b)[0]
            for b in dict.fromkeys(qs.dn_block)
        ]

        outputs = []
        for layer in range(cfg.dec_layers):
            p = f"dec{layer}"
            anchors = ad.sigmoid(anchor_logit)
            pos = self._positional_queries(anchors)

            t = self._layernorm(content, f"{p}.ln1")
            content = ad.add(
                content, self._block_self_attention(t, pos, blocks, f"{p}.self")
            )
            t2 = self._layernorm(content, f"{p}.ln2")
            cross = self.deformable_attention(
                ad.add(t2, pos), anchors, feature_maps, layer
            )
            content = ad.add(content, cross)
            t3 = self._layernorm(content, f"{p}.ln3")
            content = ad.add(content, self._ffn(t3, f"{p}.ffn"))

            h = self._layernorm(content, "dec.ln_out")
            class_logits = self._lin(h, "head.class")
            delta = self._lin(ad.relu(self._lin(h, "head.box.1")), "head.box.2")
            box_logit = ad.add(anchor_logit, delta)
            probs = ad.softmax(class_logits, axis=-1)
            boxes = ad.sigmoid(box_logit)
            outputs.append((probs, boxes))
            anchor_logit = ad.constant(np.clip(box_logit.data, -LOGIT_CLAMP, LOGIT_CLAMP))
        return outputs

    # ------------------------------------------------------------------
    # inference

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Final-layer class probabilities and boxes for matching queries."""
        qs = build_query_groups(
            [], self.cfg.query_count, NoiseConfig(), np.random.default_rng(0),
            variant=self.cfg.variant,
            matching_anchors=self.current_matching_anchors(),
            matching_content=self.params["query.content"].data,
        )
        probs, boxes = self.decode(qs, self.features(image))[-1]
        return probs.data.copy(), boxes.data.copy()

    def detections(self, image: np.ndarray) -> list[Detection]:
        """One detection per query: best non-background class and score."""
        probs, boxes = self.predict(image)
        out = []
        for row, box in zip(probs, boxes):
            cls = int(np.argmax(row[:-1]))
            out.append(
                Detection(class_id=cls, score=float(row[cls]), box=BoundingBox(*box))
            )
        return out

    def current_matching_anchors(self) -> np.ndarray:
        cfg = self.cfg
        if cfg.variant is QueryVariant.GRID_POINTS:
            return lift_points(grid_points(cfg.query_count), cfg.point_extent)
        if cfg.variant is QueryVariant.LEARNED_POINTS:
            xy = 1.0 / (1.0 + np.exp(-self.params["query.point_logits"].data))
            return np.concatenate(
                [xy, np.full((cfg.query_count, 2), cfg.point_extent)], axis=1
            )
        return 1.0 / (1.0 + np.exp(-self.params["query.anchor_logits"].data))


def train_step(
    model: Detector,
    batch: list[tuple[np.ndarray, list[GroundTruthObject], object]],
    optimizer: ad.AdamW,
    noise_cfg: NoiseConfig,
    loss_cfg: LossConfig,
    cost_weights: CostWeights,
    rng: np.random.Generator,
    amd_k: int | None = None,
) -> LossBreakdown:
    """Forward, loss, backward, and one optimizer update on a batch.

    Losses are averaged over the batch; with aux_layers every decoder
    layer contributes. A non-finite loss aborts naming the image.
    """
    optimizer.zero_grad()
    parts = []
    for image, gts, image_id in batch:
        feats = model.features(image)
        qs = build_query_groups(
            gts,
            model.cfg.query_count,
            noise_cfg,
            rng,
            variant=model.cfg.variant,
            matching_anchors=model.current_matching_anchors(),
            matching_content=model.params["query.content"].data,
            label_embedding=model.params["label_embed"].data,
            amd_k=amd_k,
            strict=False,
        )
        outputs = model.decode(qs, feats)
        if not loss_cfg.aux_layers:
            outputs = outputs[-1:]
        layer_parts = [
            total_loss(probs, boxes, qs, gts, loss_cfg, cost_weights)
            for probs, boxes in outputs
        ]
        part = combine_breakdowns(layer_parts)
        if not math.isfinite(part.total):
            raise NumericError(f"non-finite loss on image {image_id!r}")
        parts.append(part)
    bd = combine_breakdowns(parts, scale=1.0 / len(batch))
    ad.backward(bd.node)
    optimizer.step()
    return bd
