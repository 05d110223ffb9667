"""Clip model: convolutional feature pyramid, encodings, and the video instance decoder.

A clip of T frames is encoded per frame into F feature scales (coarse to
fine). A single set of N instance queries attends to the flattened
spatio-temporal token volume of one scale per decoder layer, masked by the
previous layer's binarized mask prediction. The last scale (F) only serves
as the mask-feature volume that the output embeddings are dotted with.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as nt
from .tensor import ContractViolation, Tensor


@dataclass
class ModelConfig:
    num_classes: int = 3
    num_queries: int = 20
    hidden_dim: int = 64
    num_layers: int = 6
    num_heads: int = 8
    ffn_dim: int = 256
    t_max: int = 8
    backbone_channels: tuple = (16, 32, 48, 64)
    # "coarse": cross-attend scales 1..F-1 only; "all": every scale incl. the mask-feature one
    attention_scales: str = "coarse"
    temporal_init_std: float = 0.02
    seed: int = 0

    num_scales: int = field(default=3, init=False)

    def attention_schedule(self) -> list[int]:
        if self.attention_scales == "coarse":
            levels = list(range(self.num_scales - 1))
        elif self.attention_scales == "all":
            levels = list(range(self.num_scales))
        else:
            raise ContractViolation(f"unknown attention_scales {self.attention_scales!r}")
        if self.num_layers % len(levels):
            raise ContractViolation(
                f"num_layers={self.num_layers} not divisible by {len(levels)} attention scales")
        return [levels[i % len(levels)] for i in range(self.num_layers)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("num_scales")
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d.pop("num_scales", None)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class FeaturePyramid:
    scales: list  # Tensor [T, C, H_f, W_f], coarse -> fine

    @property
    def num_frames(self) -> int:
        return self.scales[0].shape[0]


@dataclass
class DecoderOutput:
    output_embeddings: Tensor          # Q_L [N, C]
    class_logits: Tensor               # [N, K+1], index K = background
    mask_logits: Tensor                # [N, T, H_F, W_F]
    layer_predictions: list            # (class_logits, mask_logits) after each layer 1..L
    attn_masks: list                   # bool [N, T*h*w] used by each layer 1..L
    state: dict                        # inputs of layer L, kept for overlap embeddings
    overlap_embeddings: np.ndarray | None = None
    fallback: np.ndarray | None = None


def prepare_frames(frames_u8: np.ndarray) -> np.ndarray:
    """uint8 [T, H, W, 3] -> normalized float [T, 3, H, W]."""
    x = np.asarray(frames_u8, dtype=np.float32) / 255.0
    return np.ascontiguousarray(((x - 0.5) / 0.25).transpose(0, 3, 1, 2))


_sine_cache: dict = {}


def sine_encoding(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """2-D sinusoidal encoding, [h*w, dim]; first half encodes y, second half x."""
    key = (h, w, dim)
    if key not in _sine_cache:
        half = dim // 2
        ys = (np.arange(h) + 0.5) / h * 2 * math.pi
        xs = (np.arange(w) + 0.5) / w * 2 * math.pi
        dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

        def enc(vals):
            e = vals[:, None] / dim_t
            out = np.empty_like(e)
            out[:, 0::2] = np.sin(e[:, 0::2])
            out[:, 1::2] = np.cos(e[:, 1::2])
            return out

        ey = enc(ys)
        ex = enc(xs)
        grid = np.concatenate([np.repeat(ey[:, None, :], w, axis=1),
                               np.repeat(ex[None, :, :], h, axis=0)], axis=-1)
        _sine_cache[key] = grid.reshape(h * w, dim)
    return _sine_cache[key]


class NovisModel:
    """Parameters live in ``self.params``; every method is a pure function of them."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        self.schedule = self.config.attention_schedule()
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()

    # -- parameters -----------------------------------------------------
    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        c = cfg.hidden_dim
        p: dict[str, np.ndarray] = {}

        def conv(name, cin, cout, k):
            p[name + ".w"] = rng.normal(0.0, math.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
            p[name + ".b"] = np.zeros(cout)

        def lin(name, din, dout, scale=1.0):
            lim = math.sqrt(6.0 / (din + dout)) * scale
            p[name + ".w"] = rng.uniform(-lim, lim, (din, dout))
            p[name + ".b"] = np.zeros(dout)

        def norm(name, dim):
            p[name + ".g"] = np.ones(dim)
            p[name + ".b"] = np.zeros(dim)

        ch = cfg.backbone_channels
        conv("backbone.stem", 3, ch[0], 3)
        conv("backbone.c4", ch[0], ch[1], 3)
        conv("backbone.c8", ch[1], ch[2], 3)
        conv("backbone.c16", ch[2], ch[3], 3)
        conv("backbone.lat16", ch[3], c, 1)
        conv("backbone.lat8", ch[2], c, 1)
        conv("backbone.lat4", ch[1], c, 1)
        conv("backbone.out16", c, c, 3)
        conv("backbone.out8", c, c, 3)
        conv("backbone.mask", c, c, 3)

        p["temporal"] = rng.normal(0.0, cfg.temporal_init_std, (cfg.t_max, c))
        p["level_embed"] = rng.normal(0.0, 1.0, (cfg.num_scales, c))
        p["query_feat"] = rng.normal(0.0, 1.0, (cfg.num_queries, c))
        p["query_pos"] = rng.normal(0.0, 1.0, (cfg.num_queries, c))
        for l in range(cfg.num_layers):
            pre = f"decoder.layer{l}."
            for attn in ("cross", "self"):
                for proj in ("q", "k", "v", "o"):
                    lin(pre + f"{attn}.{proj}", c, c)
            lin(pre + "ffn1", c, cfg.ffn_dim)
            lin(pre + "ffn2", cfg.ffn_dim, c)
            for n in ("norm_cross", "norm_self", "norm_ffn"):
                norm(pre + n, c)
        norm("head.norm", c)
        lin("head.class", c, cfg.num_classes + 1, scale=0.1)
        lin("head.mask0", c, c)
        lin("head.mask1", c, c)
        lin("head.mask2", c, c, scale=0.01)
        return {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def astype(self, dtype) -> "NovisModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype)
                  for k, v in self.params.items()}
        return NovisModel(self.config, params)

    def replace(self, **overrides: Tensor) -> "NovisModel":
        """Shallow copy with some parameters replaced (names use '__' for '.')."""
        params = dict(self.params)
        for k, v in overrides.items():
            params[k.replace("__", ".")] = v
        return NovisModel(self.config, params)

    def with_param(self, name: str, value: Tensor) -> "NovisModel":
        params = dict(self.params)
        params[name] = value
        return NovisModel(self.config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- building blocks ------------------------------------------------
    def _conv(self, name, x, stride=1):
        w = self.params[name + ".w"]
        b = self.params[name + ".b"]
        return nt.conv2d(x, w, stride) + b.reshape(-1, 1, 1)

    def _lin(self, name, x):
        return nt.linear(x, self.params[name + ".w"], self.params[name + ".b"])

    def _norm(self, name, x):
        return nt.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _mha(self, name, q_in, k_in, v_in, mask=None):
        n, c = q_in.shape
        m = k_in.shape[0]
        h = self.config.num_heads
        d = c // h
        q = self._lin(name + ".q", q_in).reshape(n, h, d).transpose(1, 0, 2)
        k = self._lin(name + ".k", k_in).reshape(m, h, d).transpose(1, 2, 0)
        v = self._lin(name + ".v", v_in).reshape(m, h, d).transpose(1, 0, 2)
        scores = (q @ k) * (1.0 / math.sqrt(d))
        if mask is None:
            attn = nt.softmax(scores, axis=-1)
        else:
            attn = nt.masked_softmax(scores, mask[None])
        o = (attn @ v).transpose(1, 0, 2).reshape(n, c)
        return self._lin(name + ".o", o)

    # -- pyramid --------------------------------------------------------
    def extract_pyramid(self, frames) -> FeaturePyramid:
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractViolation(f"frames must be [T, 3, H, W], got {x.shape}")
        t, _, hh, ww = x.shape
        if t < 1 or hh % 16 or ww % 16:
            raise ContractViolation(f"frame size {hh}x{ww} must be divisible by 16")
        g = nt.gelu
        s2 = g(self._conv("backbone.stem", x, 2))
        c4 = g(self._conv("backbone.c4", s2, 2))
        c8 = g(self._conv("backbone.c8", c4, 2))
        c16 = g(self._conv("backbone.c16", c8, 2))
        p16 = self._conv("backbone.lat16", c16)
        p8 = self._conv("backbone.lat8", c8) + nt.bilinear_resize(p16, hh // 8, ww // 8)
        p4 = self._conv("backbone.lat4", c4) + nt.bilinear_resize(p8, hh // 4, ww // 4)
        return FeaturePyramid([
            g(self._conv("backbone.out16", p16)),
            g(self._conv("backbone.out8", p8)),
            self._conv("backbone.mask", p4),
        ])

    def encode_positions(self, pyramid: FeaturePyramid, temporal: Tensor | None = None) -> list:
        """Per scale, the [T*H_f*W_f, C] key encoding: spatial sine + temporal row of the frame."""
        temporal = self.params["temporal"] if temporal is None else temporal
        t = pyramid.num_frames
        if t > temporal.shape[0]:
            raise ContractViolation(f"clip length {t} exceeds t_max={temporal.shape[0]}")
        c = self.config.hidden_dim
        rows = temporal[:t].reshape(t, 1, c)
        out = []
        for feat in pyramid.scales:
            hf, wf = feat.shape[-2:]
            spatial = Tensor(sine_encoding(hf, wf, c), dtype=temporal.dtype).reshape(1, hf * wf, c)
            out.append((rows + spatial).reshape(t * hf * wf, c))
        return out

    def _memory(self, pyramid: FeaturePyramid, level: int) -> Tensor:
        feat = pyramid.scales[level]
        t, c, hf, wf = feat.shape
        tokens = feat.transpose(0, 2, 3, 1).reshape(t * hf * wf, c)
        return tokens + self.params["level_embed"][level]

    # -- decoder ----------------------------------------------------------
    def _layer(self, l: int, q: Tensor, qpos: Tensor, memory: Tensor, mpos: Tensor, mask) -> Tensor:
        pre = f"decoder.layer{l}."
        x = self._norm(pre + "norm_cross", q)
        q = q + self._mha(pre + "cross", x + qpos, memory + mpos, memory, mask)
        x = self._norm(pre + "norm_self", q)
        xq = x + qpos
        q = q + self._mha(pre + "self", xq, xq, x)
        x = self._norm(pre + "norm_ffn", q)
        return q + self._lin(pre + "ffn2", nt.gelu(self._lin(pre + "ffn1", x)))

    def _predict(self, q: Tensor, mask_feats: Tensor, t: int, hm: int, wm: int):
        x = self._norm("head.norm", q)
        cls = self._lin("head.class", x)
        me = nt.gelu(self._lin("head.mask0", x))
        me = nt.gelu(self._lin("head.mask1", me))
        me = self._lin("head.mask2", me)
        masks = (me @ mask_feats).reshape(q.shape[0], t, hm, wm)
        return cls, masks

    @staticmethod
    def attention_mask(mask_logits: np.ndarray, h: int, w: int) -> np.ndarray:
        """Resize mask logits to an attention scale and binarize at sigmoid > 0.5."""
        n, t = mask_logits.shape[:2]
        small = nt.resize_array(mask_logits, h, w)
        return (small > 0).reshape(n, t * h * w)

    def decode_clip(self, pyramid: FeaturePyramid, queries: tuple | None = None,
                    attn_masks: Sequence | None = None) -> DecoderOutput:
        """Run the L decoder layers over a clip.

        ``queries`` optionally overrides ``(query_feat, query_pos)``.
        ``attn_masks`` optionally fixes the per-layer attention masks instead
        of deriving them from predictions (used to freeze the piecewise
        constant masks during gradient checks).
        """
        cfg = self.config
        qfeat, qpos = queries if queries is not None else (self.params["query_feat"],
                                                           self.params["query_pos"])
        t = pyramid.num_frames
        mf = pyramid.scales[-1]
        _, c, hm, wm = mf.shape
        mask_feats = mf.transpose(1, 0, 2, 3).reshape(c, t * hm * wm)
        encodings = self.encode_positions(pyramid)
        memories = {lvl: self._memory(pyramid, lvl) for lvl in sorted(set(self.schedule))}

        _, prev_masks = self._predict(qfeat, mask_feats, t, hm, wm)
        q = qfeat
        preds, used_masks = [], []
        state = {}
        for l, lvl in enumerate(self.schedule):
            hf, wf = pyramid.scales[lvl].shape[-2:]
            if attn_masks is not None:
                m = np.asarray(attn_masks[l], dtype=bool)
            else:
                m = self.attention_mask(prev_masks.data, hf, wf)
            if l == cfg.num_layers - 1:
                state = {"query_in": q, "query_pos": qpos, "memory": memories[lvl],
                         "memory_pos": encodings[lvl], "mask": m, "level": lvl,
                         "shape": (t, hf, wf)}
            q = self._layer(l, q, qpos, memories[lvl], encodings[lvl], m)
            cls, masks = self._predict(q, mask_feats, t, hm, wm)
            preds.append((cls, masks))
            used_masks.append(m)
            prev_masks = masks
        cls, masks = preds[-1]
        return DecoderOutput(q, cls, masks, preds, used_masks, state)

    def forward(self, frames, attn_masks: Sequence | None = None) -> DecoderOutput:
        return self.decode_clip(self.extract_pyramid(frames), attn_masks=attn_masks)

    __call__ = forward

    def overlap_embeddings(self, out: DecoderOutput, tau: Sequence[int]):
        """Recompute layer L with its attention restricted to clip frames ``tau``.

        Returns ``(embeddings [N, C], fallback [N])``. A query whose mask is
        empty on every frame of ``tau`` keeps its original output embedding
        and gets its fallback flag set.
        """
        tau = np.asarray(sorted(set(int(i) for i in tau)), dtype=int)
        st = out.state
        t, hf, wf = st["shape"]
        if tau.size == 0:
            raise ContractViolation("overlap frame set must be non-empty")
        if tau.min() < 0 or tau.max() >= t:
            raise ContractViolation(f"overlap frames {tau.tolist()} outside clip of length {t}")
        if np.any(np.diff(tau) != 1):
            raise ContractViolation(f"overlap frames {tau.tolist()} are not contiguous")
        in_tau = np.isin(np.repeat(np.arange(t), hf * wf), tau)
        m = st["mask"]
        restricted = m & in_tau[None, :]
        fallback = ~restricted.any(axis=1)
        # fallback rows keep their original mask so the shared self-attention stays unchanged for them
        rec_mask = np.where(fallback[:, None], m, restricted)
        with nt.no_grad():
            q = self._layer(self.config.num_layers - 1, st["query_in"], st["query_pos"],
                            st["memory"], st["memory_pos"], rec_mask)
        emb = np.array(q.data, copy=True)
        emb[fallback] = out.output_embeddings.data[fallback]
        return emb, fallback


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: NovisModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = model.config.to_dict()
    meta = {"model": cfg, "F": model.config.num_scales, "L": cfg["num_layers"],
            "N": cfg["num_queries"], "C": cfg["hidden_dim"], "K": cfg["num_classes"],
            "T_max": cfg["t_max"], "seed": cfg["seed"], "params": sorted(model.params)}
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, t in model.params.items():
        nt.save_tensor(path / f"{name}.nvt", t.data.astype(np.float32))


def load_checkpoint(path) -> NovisModel:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    cfg = ModelConfig.from_dict(meta["model"])
    params = {name: Tensor(nt.load_tensor(path / f"{name}.nvt"), requires_grad=True)
              for name in meta["params"]}
    return NovisModel(cfg, params)
