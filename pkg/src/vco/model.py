"""The joint denoiser: token embedding, conditioning, masked joint attention,
and per-stream prediction heads.

Variants:
  * ``dual_stream``          — each stream owns normalization, Q/K/V, output
    projection and MLP in every block; the streams interact only through one
    joint masked self-attention over the concatenated token sequence.
  * ``single_token_concat``  — per-stream private blocks, then the sequences
    are concatenated (length 2n) and processed by shared blocks.
  * ``single_direct_add``    — private blocks, then element-wise addition of
    the two token sets, then shared blocks over n tokens.
  * ``single_channel_concat``— private blocks, channel concatenation plus a
    fusion projection, then shared blocks over n tokens.
  * ``pixel_only``           — plain pixel diffusion baseline, no semantic
    stream.

Cross-stream attention masks give a *structurally* unconditional pixel
prediction: with the semantic-to-pixel mask, pixel queries never see
semantic keys, so the pixel output is exactly invariant to the semantic
input. Masks apply wherever joint attention exists (dual-stream blocks and
the shared blocks of token concatenation).

Conditioning (time + class) modulates each stream's norms with per-block
scale/shift/gate vectors. Class NULL selects a dedicated learned embedding.

Parameter naming is ``stream.block.component`` (e.g.
``pixel.block2.attn.wq``, ``semantic.head.w``, ``cond.class_embed``) and is
the checkpoint's on-disk key set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

VARIANTS = ("dual_stream", "single_direct_add", "single_channel_concat",
            "single_token_concat", "pixel_only")

MASK_NONE = 0
MASK_SEMANTIC_TO_PIXEL = 1
MASK_BIDIRECTIONAL = 2

SEM_FEATURES = 0
SEM_ZERO = 1
SEM_NULL_TOKEN = 2

NULL_CLASS = -1

MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dual_stream"
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    feature_specific_blocks: int = 0  # single-stream variants only
    image_channels: int = 1
    image_height: int = 16
    image_width: int = 16
    patch_size: int = 4
    n_classes: int = 4
    feature_dim: int = 8              # semantic token width
    repa_block_index: int = 4         # 1-based pixel block feeding alignment
    bottleneck: int = 0               # optional patch-embed down-projection

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hidden % self.heads or self.hidden % 2:
            raise ValueError("hidden must be even and divisible by heads")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image dims must be divisible by patch size")
        if self.variant.startswith("single") and not (
                0 <= self.feature_specific_blocks <= self.depth):
            raise ValueError("feature_specific_blocks must lie in [0, depth]")
        if self.depth > 0 and not 1 <= self.repa_block_index <= self.depth:
            raise ValueError("repa_block_index out of range")

    @property
    def n_tokens(self) -> int:
        return (self.image_height // self.patch_size) * \
            (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.image_channels * self.patch_size ** 2

    @property
    def has_semantic(self) -> bool:
        return self.variant != "pixel_only"

    @property
    def joint_attention(self) -> bool:
        return self.variant in ("dual_stream", "single_token_concat")


@dataclass
class Conditioning:
    """Per-sample conditioning for one batched forward pass."""

    t_pixel: np.ndarray                 # (B,) times in (0,1)
    class_ids: np.ndarray               # (B,) int64, NULL_CLASS for null
    t_semantic: np.ndarray | None = None  # defaults to t_pixel
    mask_types: np.ndarray | None = None  # (B,) int, MASK_* codes
    semantic_modes: np.ndarray | None = None  # (B,) int, SEM_* codes

    def __post_init__(self):
        b = len(self.t_pixel)
        if self.t_semantic is None:
            self.t_semantic = self.t_pixel
        if self.mask_types is None:
            self.mask_types = np.zeros(b, dtype=np.int64)
        if self.semantic_modes is None:
            self.semantic_modes = np.zeros(b, dtype=np.int64)


@dataclass
class ForwardOutput:
    pred_pixels: Tensor                  # matches pixel input shape
    pred_semantics: Tensor | None        # matches semantic input shape
    hidden_pixel: list = field(default_factory=list)  # per-block h_l^x


@dataclass(frozen=True)
class AttentionMaskSpec:
    n_pixel: int
    n_semantic: int
    mask_type: int = MASK_NONE


def build_mask(spec: AttentionMaskSpec) -> np.ndarray:
    """(n_x+n_d) x (n_x+n_d) boolean matrix, True = attendable.

    Semantic-to-pixel blocks exactly the (pixel-query, semantic-key)
    quadrant; bidirectional blocks both cross quadrants. Within-stream
    quadrants are always allowed.
    """
    if spec.n_pixel < 1 or spec.n_semantic < 1:
        raise ValueError("token counts must be >= 1")
    s = spec.n_pixel + spec.n_semantic
    mask = np.ones((s, s), dtype=bool)
    if spec.mask_type == MASK_SEMANTIC_TO_PIXEL:
        mask[:spec.n_pixel, spec.n_pixel:] = False
    elif spec.mask_type == MASK_BIDIRECTIONAL:
        mask[:spec.n_pixel, spec.n_pixel:] = False
        mask[spec.n_pixel:, :spec.n_pixel] = False
    elif spec.mask_type != MASK_NONE:
        raise ValueError(f"unknown mask type {spec.mask_type}")
    return mask


def build_masks_batch(n_pixel: int, n_semantic: int,
                      mask_types: np.ndarray) -> np.ndarray | None:
    """(B, 1, S, S) boolean mask batch; None when nothing is masked."""
    if not np.any(mask_types):
        return None
    rows = [build_mask(AttentionMaskSpec(n_pixel, n_semantic, int(m)))
            for m in mask_types]
    return np.stack(rows)[:, None]


# ---------------------------------------------------------------------------
# parameters

def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)


def _block_params(rng: Rng, prefix: str, hidden: int, out: dict):
    h = hidden
    r = rng.child(prefix)
    out[f"{prefix}.norm1.gain"] = np.ones(h, dtype=np.float32)
    out[f"{prefix}.norm2.gain"] = np.ones(h, dtype=np.float32)
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.attn.{name}"] = _linear_init(r.child(name), h, h)
    out[f"{prefix}.mlp.w1"] = _linear_init(r.child("mw1"), h, MLP_RATIO * h)
    out[f"{prefix}.mlp.b1"] = np.zeros(MLP_RATIO * h, dtype=np.float32)
    out[f"{prefix}.mlp.w2"] = _linear_init(r.child("mw2"), MLP_RATIO * h, h)
    out[f"{prefix}.mlp.b2"] = np.zeros(h, dtype=np.float32)
    # modulation: small random weights keep conditioning trainable from step
    # one; gate bias 1 keeps residual branches live at init
    out[f"{prefix}.mod.w"] = r.child("mod").normal((h, 6 * h)) * 0.02
    mod_b = np.zeros(6 * h, dtype=np.float32)
    mod_b[2 * h:3 * h] = 1.0
    mod_b[5 * h:6 * h] = 1.0
    out[f"{prefix}.mod.b"] = mod_b


def init_params(config: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    c = config
    h = c.hidden
    raw: dict[str, np.ndarray] = {}
    r = rng.child("params")

    if c.bottleneck > 0:
        raw["pixel.patch_embed.w1"] = _linear_init(r.child("pe1"), c.patch_dim, c.bottleneck)
        raw["pixel.patch_embed.w2"] = _linear_init(r.child("pe2"), c.bottleneck, h)
    else:
        raw["pixel.patch_embed.w"] = _linear_init(r.child("pe"), c.patch_dim, h)
    raw["pixel.patch_embed.b"] = np.zeros(h, dtype=np.float32)
    raw["pixel.pos"] = r.child("px_pos").normal((c.n_tokens, h)) * 0.02
    raw["pixel.head.norm.gain"] = np.ones(h, dtype=np.float32)
    raw["pixel.head.w"] = _linear_init(r.child("px_head"), h, c.patch_dim)
    raw["pixel.head.b"] = np.zeros(c.patch_dim, dtype=np.float32)

    raw["cond.time_mlp.w1"] = _linear_init(r.child("tm1"), h, h)
    raw["cond.time_mlp.b1"] = np.zeros(h, dtype=np.float32)
    raw["cond.time_mlp.w2"] = _linear_init(r.child("tm2"), h, h)
    raw["cond.time_mlp.b2"] = np.zeros(h, dtype=np.float32)
    raw["cond.class_embed"] = r.child("cls").normal((c.n_classes + 1, h)) * 0.02

    if c.has_semantic:
        raw["semantic.embed.w"] = _linear_init(r.child("se"), c.feature_dim, h)
        raw["semantic.embed.b"] = np.zeros(h, dtype=np.float32)
        raw["semantic.pos"] = r.child("se_pos").normal((c.n_tokens, h)) * 0.02
        raw["semantic.null_token"] = r.child("null").normal((c.feature_dim,)) * 0.02
        raw["semantic.head.norm.gain"] = np.ones(h, dtype=np.float32)
        raw["semantic.head.w"] = _linear_init(r.child("se_head"), h, c.feature_dim)
        raw["semantic.head.b"] = np.zeros(c.feature_dim, dtype=np.float32)

    if c.variant == "dual_stream":
        for i in range(c.depth):
            _block_params(r, f"pixel.block{i}", h, raw)
            _block_params(r, f"semantic.block{i}", h, raw)
    elif c.variant == "pixel_only":
        for i in range(c.depth):
            _block_params(r, f"pixel.block{i}", h, raw)
    else:
        fs = c.feature_specific_blocks
        for i in range(fs):
            _block_params(r, f"pixel.block{i}", h, raw)
            _block_params(r, f"semantic.block{i}", h, raw)
        for i in range(c.depth - fs):
            _block_params(r, f"shared.block{i}", h, raw)
        if c.variant == "single_channel_concat":
            raw["shared.fuse.w"] = _linear_init(r.child("fuse"), 2 * h, h)
            raw["shared.fuse.b"] = np.zeros(h, dtype=np.float32)

    return {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in raw.items()}


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# forward pieces

def patchify(images: Tensor, patch: int) -> Tensor:
    b, c, hh, ww = images.shape
    gh, gw = hh // patch, ww // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose((0, 2, 4, 1, 3, 5))
    return x.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens: Tensor, channels: int, height: int, width: int,
               patch: int) -> Tensor:
    b = tokens.shape[0]
    gh, gw = height // patch, width // patch
    x = tokens.reshape(b, gh, gw, channels, patch, patch)
    x = x.transpose((0, 3, 1, 4, 2, 5))
    return x.reshape(b, channels, height, width)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features with non-degenerate frequencies over t in [0,1]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :] * 1000.0
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


def embed_conditioning(params: dict, t: np.ndarray, class_ids: np.ndarray,
                       n_classes: int, hidden: int) -> Tensor:
    """(B, hidden) modulation source from time + class (NULL -> learned row)."""
    ids = np.asarray(class_ids, dtype=np.int64)
    if np.any(ids >= n_classes) or np.any((ids < 0) & (ids != NULL_CLASS)):
        raise ValueError("class id out of range")
    ids = np.where(ids == NULL_CLASS, n_classes, ids)
    feat = Tensor._from_op(time_features(t, hidden), None)
    u = T.silu(T.matmul(feat, params["cond.time_mlp.w1"]) + params["cond.time_mlp.b1"])
    u = T.matmul(u, params["cond.time_mlp.w2"]) + params["cond.time_mlp.b2"]
    return u + T.embedding(params["cond.class_embed"], ids)


def _modulation(params: dict, prefix: str, cond: Tensor, hidden: int):
    m = T.matmul(T.silu(cond), params[f"{prefix}.mod.w"]) + params[f"{prefix}.mod.b"]
    b = m.shape[0]
    chunks = [T.narrow(m, 1, i * hidden, hidden).reshape(b, 1, hidden)
              for i in range(6)]
    return chunks  # scale1, shift1, gate1, scale2, shift2, gate2


def _modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
               mask: np.ndarray | None) -> Tensor:
    b, s, hidden = q.shape
    dh = hidden // heads

    def split(x):
        return x.reshape(b, s, heads, dh).transpose((0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    logits = T.scale(T.matmul(qh, kh.transpose((0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = T.softmax_masked(logits, mask)
    out = T.matmul(probs, vh)
    return out.transpose((0, 2, 1, 3)).reshape(b, s, hidden)


def _mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    u = T.silu(T.matmul(x, params[f"{prefix}.mlp.w1"]) + params[f"{prefix}.mlp.b1"])
    return T.matmul(u, params[f"{prefix}.mlp.w2"]) + params[f"{prefix}.mlp.b2"]


def _shared_block(params: dict, prefix: str, x: Tensor, cond: Tensor,
                  heads: int, hidden: int, mask: np.ndarray | None) -> Tensor:
    s1, b1, g1, s2, b2, g2 = _modulation(params, prefix, cond, hidden)
    xn = _modulate(T.rms_norm(x, params[f"{prefix}.norm1.gain"]), s1, b1)
    q = T.matmul(xn, params[f"{prefix}.attn.wq"])
    k = T.matmul(xn, params[f"{prefix}.attn.wk"])
    v = T.matmul(xn, params[f"{prefix}.attn.wv"])
    a = _attention(q, k, v, heads, mask)
    x = x + g1 * T.matmul(a, params[f"{prefix}.attn.wo"])
    xn2 = _modulate(T.rms_norm(x, params[f"{prefix}.norm2.gain"]), s2, b2)
    return x + g2 * _mlp(params, prefix, xn2)


def _dual_block(params: dict, i: int, hx: Tensor, hd: Tensor,
                cond_x: Tensor, cond_d: Tensor, heads: int, hidden: int,
                mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    px, sd = f"pixel.block{i}", f"semantic.block{i}"
    sx1, bx1, gx1, sx2, bx2, gx2 = _modulation(params, px, cond_x, hidden)
    sd1, bd1, gd1, sd2, bd2, gd2 = _modulation(params, sd, cond_d, hidden)

    hxn = _modulate(T.rms_norm(hx, params[f"{px}.norm1.gain"]), sx1, bx1)
    hdn = _modulate(T.rms_norm(hd, params[f"{sd}.norm1.gain"]), sd1, bd1)

    # per-stream projections, one joint attention over both token sets
    q = T.concat([T.matmul(hxn, params[f"{px}.attn.wq"]),
                  T.matmul(hdn, params[f"{sd}.attn.wq"])], axis=1)
    k = T.concat([T.matmul(hxn, params[f"{px}.attn.wk"]),
                  T.matmul(hdn, params[f"{sd}.attn.wk"])], axis=1)
    v = T.concat([T.matmul(hxn, params[f"{px}.attn.wv"]),
                  T.matmul(hdn, params[f"{sd}.attn.wv"])], axis=1)
    a = _attention(q, k, v, heads, mask)
    n = hx.shape[1]
    ax = T.narrow(a, 1, 0, n)
    ad = T.narrow(a, 1, n, hd.shape[1])

    hx = hx + gx1 * T.matmul(ax, params[f"{px}.attn.wo"])
    hd = hd + gd1 * T.matmul(ad, params[f"{sd}.attn.wo"])

    hx = hx + gx2 * _mlp(params, px, _modulate(
        T.rms_norm(hx, params[f"{px}.norm2.gain"]), sx2, bx2))
    hd = hd + gd2 * _mlp(params, sd, _modulate(
        T.rms_norm(hd, params[f"{sd}.norm2.gain"]), sd2, bd2))
    return hx, hd


def _embed_pixels(params: dict, config: ModelConfig, z_x: Tensor) -> Tensor:
    tokens = patchify(z_x, config.patch_size)
    if config.bottleneck > 0:
        tokens = T.matmul(T.matmul(tokens, params["pixel.patch_embed.w1"]),
                          params["pixel.patch_embed.w2"])
    else:
        tokens = T.matmul(tokens, params["pixel.patch_embed.w"])
    return tokens + params["pixel.patch_embed.b"] + params["pixel.pos"]


def _embed_semantics(params: dict, config: ModelConfig, z_d: Tensor,
                     semantic_modes: np.ndarray) -> Tensor:
    """Apply the per-sample input treatment, then the linear embed."""
    b = z_d.shape[0]
    keep = (semantic_modes == SEM_FEATURES).astype(np.float32).reshape(b, 1, 1)
    null_sel = (semantic_modes == SEM_NULL_TOKEN).astype(np.float32).reshape(b, 1, 1)
    z_eff = z_d * keep
    if null_sel.any():
        null_tok = params["semantic.null_token"].reshape(1, 1, config.feature_dim)
        z_eff = z_eff + null_tok * null_sel
    tokens = T.matmul(z_eff, params["semantic.embed.w"])
    return tokens + params["semantic.embed.b"] + params["semantic.pos"]


def _head(params: dict, stream: str, tokens: Tensor) -> Tensor:
    x = T.rms_norm(tokens, params[f"{stream}.head.norm.gain"])
    return T.matmul(x, params[f"{stream}.head.w"]) + params[f"{stream}.head.b"]


def forward(config: ModelConfig, params: dict, z_x: Tensor,
            z_d: Tensor | None, cond: Conditioning) -> ForwardOutput:
    """Jointly predict clean pixel and semantic targets."""
    z_x = z_x if isinstance(z_x, Tensor) else Tensor._from_op(np.asarray(z_x, np.float32), None)
    if config.has_semantic:
        if z_d is None:
            raise ValueError("variant requires a semantic input")
        z_d = z_d if isinstance(z_d, Tensor) else Tensor._from_op(np.asarray(z_d, np.float32), None)
        if z_d.shape[1] != config.n_tokens:
            raise ValueError("semantic token count disagrees with pixel grid")
    if np.any(cond.mask_types) and not config.joint_attention:
        raise ValueError("attention masking requires joint attention over both streams")

    c, h = config, config.hidden
    cond_x = embed_conditioning(params, cond.t_pixel, cond.class_ids, c.n_classes, h)
    hx = _embed_pixels(params, c, z_x)
    hidden_pixel: list[Tensor] = []

    if c.variant == "pixel_only":
        for i in range(c.depth):
            hx = _shared_block(params, f"pixel.block{i}", hx, cond_x, c.heads, h, None)
            hidden_pixel.append(hx)
        pred = unpatchify(_head(params, "pixel", hx), c.image_channels,
                          c.image_height, c.image_width, c.patch_size)
        return ForwardOutput(pred, None, hidden_pixel)

    cond_d = (cond_x if cond.t_semantic is cond.t_pixel else
              embed_conditioning(params, cond.t_semantic, cond.class_ids, c.n_classes, h))
    hd = _embed_semantics(params, c, z_d, cond.semantic_modes)
    n = c.n_tokens

    if c.variant == "dual_stream":
        mask = build_masks_batch(n, n, cond.mask_types)
        for i in range(c.depth):
            hx, hd = _dual_block(params, i, hx, hd, cond_x, cond_d, c.heads, h, mask)
            hidden_pixel.append(hx)
    else:
        fs = c.feature_specific_blocks
        for i in range(fs):
            hx = _shared_block(params, f"pixel.block{i}", hx, cond_x, c.heads, h, None)
            hd = _shared_block(params, f"semantic.block{i}", hd, cond_d, c.heads, h, None)
            hidden_pixel.append(hx)
        if c.variant == "single_token_concat":
            fused = T.concat([hx, hd], axis=1)  # sequence length 2n
            mask = build_masks_batch(n, n, cond.mask_types)
            for i in range(c.depth - fs):
                fused = _shared_block(params, f"shared.block{i}", fused, cond_x,
                                      c.heads, h, mask)
                hidden_pixel.append(T.narrow(fused, 1, 0, n))
            hx = T.narrow(fused, 1, 0, n)
            hd = T.narrow(fused, 1, n, n)
        else:
            if c.variant == "single_direct_add":
                fused = hx + hd
            else:  # channel concatenation: width d1+d2 before fuse projection
                fused = T.matmul(T.concat([hx, hd], axis=2), params["shared.fuse.w"])
                fused = fused + params["shared.fuse.b"]
            for i in range(c.depth - fs):
                fused = _shared_block(params, f"shared.block{i}", fused, cond_x,
                                      c.heads, h, None)
                hidden_pixel.append(fused)
            hx = hd = fused

    pred_pixels = unpatchify(_head(params, "pixel", hx), c.image_channels,
                             c.image_height, c.image_width, c.patch_size)
    pred_semantics = _head(params, "semantic", hd)
    return ForwardOutput(pred_pixels, pred_semantics, hidden_pixel)
