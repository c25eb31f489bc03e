"""Two-scale patch transformer encoder with masked-patch pretraining.

A study image is tiled at 8x8 and 4x4 into one concatenated token stream
(16 + 64 tokens), encoded bidirectionally, and finished with a per-token
sigmoid gate that weights each token's (and thereby each scale's)
contribution to downstream pooling. Pretraining reconstructs masked
patches; pixels are quantized to 16 levels and predicted with per-pixel
cross-entropy (an MSE head is available behind a flag).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import lm as lm_mod
from .autodiff import Adam, DiffArray, Tape, TrainingDivergenceError
from .synthetic import IMAGE_SIZE, ConfigurationError, StudyImage


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = IMAGE_SIZE
    patch_scales: tuple[int, ...] = (8, 4)
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    quant_levels: int = 16
    recon_loss: str = "ce"   # "ce" per quantized pixel, or "mse"

    def tokens_per_scale(self) -> tuple[int, ...]:
        return tuple((self.image_size // p) ** 2 for p in self.patch_scales)

    @property
    def n_tokens(self) -> int:
        return sum(self.tokens_per_scale())

    def __post_init__(self):
        for p in self.patch_scales:
            if self.image_size % p:
                raise ConfigurationError(
                    f"image size {self.image_size} not divisible by patch {p}")


@dataclass
class PatchGrid:
    """Raw per-scale patch pixels plus token bookkeeping."""

    cfg: VisionConfig
    patches: list[np.ndarray]          # per scale: (tokens_s, p*p)
    mask: np.ndarray | None = None     # boolean over all tokens, True = masked

    def scale_slices(self) -> list[slice]:
        out, off = [], 0
        for t in self.cfg.tokens_per_scale():
            out.append(slice(off, off + t))
            off += t
        return out

    def reassemble(self, scale_index: int) -> np.ndarray:
        p = self.cfg.patch_scales[scale_index]
        return ad.reassemble_patches(self.patches[scale_index], p,
                                     self.cfg.image_size, self.cfg.image_size)


@dataclass
class VisualEmbeddings:
    """Contextual token embeddings and the gates that scaled them."""

    E_V: DiffArray                 # (n_tokens, d_model) or batched
    gates: np.ndarray              # matching (..., n_tokens, 1) in (0, 1)


def init_vision_params(cfg: VisionConfig, seed: int,
                       prefix: str = "vis.") -> dict[str, DiffArray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE0)))
    params: dict[str, DiffArray] = {}

    def w(shape):
        return ad.param(0.02 * rng.standard_normal(shape))

    for s, p in enumerate(cfg.patch_scales):
        params[f"{prefix}proj_s{s}"] = w((p * p, cfg.d_model))
        params[f"{prefix}proj_b{s}"] = ad.param(np.zeros(cfg.d_model))
        params[f"{prefix}pos_s{s}"] = w(((cfg.image_size // p) ** 2, cfg.d_model))
        n_out = p * p * cfg.quant_levels
        params[f"{prefix}rec_w{s}"] = w((cfg.d_model, n_out))
        params[f"{prefix}rec_b{s}"] = ad.param(np.zeros(n_out))
        params[f"{prefix}recm_w{s}"] = w((cfg.d_model, p * p))
        params[f"{prefix}recm_b{s}"] = ad.param(np.zeros(p * p))
    params[prefix + "scale_emb"] = w((len(cfg.patch_scales), cfg.d_model))
    params[prefix + "mask_emb"] = w((cfg.d_model,))
    for layer in range(cfg.n_layers):
        p = f"{prefix}l{layer}."
        params[p + "ln1_g"] = ad.param(np.ones(cfg.d_model))
        params[p + "ln1_b"] = ad.param(np.zeros(cfg.d_model))
        params[p + "wq"] = w((cfg.d_model, cfg.d_model))
        params[p + "wk"] = w((cfg.d_model, cfg.d_model))
        params[p + "wv"] = w((cfg.d_model, cfg.d_model))
        params[p + "wo"] = w((cfg.d_model, cfg.d_model))
        params[p + "ln2_g"] = ad.param(np.ones(cfg.d_model))
        params[p + "ln2_b"] = ad.param(np.zeros(cfg.d_model))
        params[p + "ff_w1"] = w((cfg.d_model, 4 * cfg.d_model))
        params[p + "ff_b1"] = ad.param(np.zeros(4 * cfg.d_model))
        params[p + "ff_w2"] = w((4 * cfg.d_model, cfg.d_model))
        params[p + "ff_b2"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "lnf_g"] = ad.param(np.ones(cfg.d_model))
    params[prefix + "lnf_b"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "gate_w"] = w((cfg.d_model, 1))
    params[prefix + "gate_b"] = ad.param(np.zeros(1))
    return params


def patchify(image: StudyImage | np.ndarray, cfg: VisionConfig) -> PatchGrid:
    """Exact tiling of the image at every configured scale."""
    pixels = image.pixels if isinstance(image, StudyImage) else np.asarray(image)
    h, w = pixels.shape[-2], pixels.shape[-1]
    for p in cfg.patch_scales:
        if h % p or w % p:
            raise ConfigurationError(f"image {h}x{w} not divisible by patch {p}")
    arr = ad.constant(pixels)
    patches = [ad.extract_patches(arr, p).values for p in cfg.patch_scales]
    return PatchGrid(cfg=cfg, patches=patches)


def sample_mask(cfg: VisionConfig, mask_ratio: float, seed: int) -> np.ndarray:
    """Uniform without-replacement token mask; |M| = ceil(ratio * tokens)."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigurationError(f"mask ratio {mask_ratio} outside (0, 1)")
    n = cfg.n_tokens
    m = math.ceil(mask_ratio * n)
    if m == 0:
        raise ConfigurationError("mask ratio selects zero tokens")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x3A)))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=m, replace=False)] = True
    return mask


def _embed_tokens(pixels: DiffArray | None, params: dict, cfg: VisionConfig,
                  prefix: str = "vis.", mask: np.ndarray | None = None,
                  pos_perm: list[np.ndarray] | None = None,
                  patches: list[DiffArray] | None = None) -> DiffArray:
    """Project patches and add positional and scale embeddings.

    ``mask`` replaces selected tokens' content projections with the learned
    mask embedding. ``pos_perm`` optionally permutes positional ids per
    scale (used by equivariance checks). ``patches`` bypasses the pixel
    tiling with explicit per-scale patch matrices.
    """
    parts = []
    off = 0
    for s, p in enumerate(cfg.patch_scales):
        t_s = (cfg.image_size // p) ** 2
        raw = ad.extract_patches(pixels, p) if patches is None else patches[s]
        content = ad.add(ad.matmul(raw, params[f"{prefix}proj_s{s}"]),
                         params[f"{prefix}proj_b{s}"])
        if mask is not None:
            sel = mask[off:off + t_s]
            if sel.any():
                keep = ad.constant((~sel)[..., None].astype(float))
                masked = ad.constant(sel[..., None].astype(float))
                content = ad.add(ad.mul(content, keep),
                                 ad.mul(masked, params[prefix + "mask_emb"]))
        ids = np.arange(t_s) if pos_perm is None else pos_perm[s]
        pos = ad.embedding_lookup(params[f"{prefix}pos_s{s}"], ids)
        scl = ad.embedding_lookup(params[prefix + "scale_emb"], np.full(t_s, s))
        parts.append(ad.add(ad.add(content, pos), scl))
        off += t_s
    return _concat_tokens(parts)


def _concat_tokens(parts: list[DiffArray]) -> DiffArray:
    """Concatenate token blocks along the sequence axis via transpose."""
    flipped = [ad.transpose_last2(p) for p in parts]
    return ad.transpose_last2(ad.concat_last(flipped))


def encoder_trunk(tokens: DiffArray, params: dict, cfg: VisionConfig,
                  prefix: str = "vis.") -> DiffArray:
    h = tokens
    for layer in range(cfg.n_layers):
        p = f"{prefix}l{layer}."
        h = lm_mod.self_attention_block(h, params, p, cfg.n_heads,
                                        max_context=cfg.n_tokens + 1, causal=False)
        h = lm_mod.feed_forward(h, params, p)
    return ad.layernorm(h, params[prefix + "lnf_g"], params[prefix + "lnf_b"])


def encode_pixels(pixels: DiffArray, params: dict, cfg: VisionConfig,
                  prefix: str = "vis.", mask: np.ndarray | None = None,
                  pos_perm: list[np.ndarray] | None = None) -> VisualEmbeddings:
    """Full encoder: embed, contextualize, gate. Accepts (H,W) or (B,H,W)."""
    tokens = _embed_tokens(pixels, params, cfg, prefix, mask=mask, pos_perm=pos_perm)
    return _encode_tokens(tokens, params, cfg, prefix)


def encode_patches(patches: list[DiffArray], params: dict, cfg: VisionConfig,
                   prefix: str = "vis.",
                   pos_perm: list[np.ndarray] | None = None) -> VisualEmbeddings:
    """Encoder entry taking explicit per-scale patch matrices."""
    tokens = _embed_tokens(None, params, cfg, prefix, pos_perm=pos_perm,
                           patches=patches)
    return _encode_tokens(tokens, params, cfg, prefix)


def _encode_tokens(tokens: DiffArray, params: dict, cfg: VisionConfig,
                   prefix: str) -> VisualEmbeddings:
    h = encoder_trunk(tokens, params, cfg, prefix)
    gate = ad.sigmoid(ad.add(ad.matmul(h, params[prefix + "gate_w"]),
                             params[prefix + "gate_b"]))
    return VisualEmbeddings(E_V=ad.mul(gate, h), gates=gate.values)


class VisualEncoder:
    """Parameter collection plus config for the patch encoder."""

    def __init__(self, params: dict[str, DiffArray], cfg: VisionConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: VisionConfig, seed: int = 0) -> "VisualEncoder":
        return cls(init_vision_params(cfg, seed), cfg)

    def patchify(self, image: StudyImage) -> PatchGrid:
        return patchify(image, self.cfg)

    def encode(self, image: StudyImage | np.ndarray,
               mask: np.ndarray | None = None) -> VisualEmbeddings:
        pixels = image.pixels if isinstance(image, StudyImage) else np.asarray(image)
        return encode_pixels(ad.constant(pixels), self.params, self.cfg, mask=mask)


def quantize_pixels(patches: np.ndarray, levels: int) -> np.ndarray:
    """Pixel value in [0,1] -> integer bin in [0, levels)."""
    return np.clip((patches * levels).astype(np.int64), 0, levels - 1)


def mim_loss(pixels_batch: np.ndarray, params: dict, cfg: VisionConfig,
             mask: np.ndarray, prefix: str = "vis.") -> DiffArray:
    """Masked-patch reconstruction loss; only masked tokens contribute.

    CE mode quantizes target pixels to ``quant_levels`` bins and scores
    each pixel's predicted distribution; MSE mode regresses raw pixels.
    """
    if not mask.any():
        raise ConfigurationError("mask selects zero tokens")
    arr = ad.constant(pixels_batch)
    emb = encode_pixels(arr, params, cfg, prefix=prefix, mask=mask)
    h = emb.E_V
    losses = []
    off = 0
    for s, p in enumerate(cfg.patch_scales):
        t_s = (cfg.image_size // p) ** 2
        sel = mask[off:off + t_s]
        off += t_s
        if not sel.any():
            continue
        idx = np.where(sel)[0]
        raw = ad.extract_patches(arr, p).values[..., idx, :]
        # gather masked token embeddings (constant index set)
        h_scale = _slice_tokens(h, s, cfg, idx)
        if cfg.recon_loss == "ce":
            logits = ad.add(ad.matmul(h_scale, params[f"{prefix}rec_w{s}"]),
                            params[f"{prefix}rec_b{s}"])
            flat = ad.reshape(logits, (-1, cfg.quant_levels))
            targets = quantize_pixels(raw, cfg.quant_levels).reshape(-1)
            losses.append(ad.cross_entropy_nll(flat, targets))
        else:
            pred = ad.add(ad.matmul(h_scale, params[f"{prefix}recm_w{s}"]),
                          params[f"{prefix}recm_b{s}"])
            diff = ad.sub(pred, ad.constant(raw))
            losses.append(ad.mean_all(ad.mul(diff, diff)))
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.scale(total, 1.0 / len(losses))


def _slice_tokens(h: DiffArray, scale_index: int, cfg: VisionConfig,
                  idx: np.ndarray) -> DiffArray:
    """Select masked-token rows of one scale from the (.., T, d) stream."""
    start = sum(cfg.tokens_per_scale()[:scale_index])
    rows = ad.transpose_last2(h)
    picked = _gather_cols(rows, start + idx)
    return ad.transpose_last2(picked)


def _gather_cols(a: DiffArray, cols: np.ndarray) -> DiffArray:
    parts = [ad.slice_last(a, int(c), int(c) + 1) for c in cols]
    return ad.concat_last(parts)


def mim_pretrain(images: list[StudyImage | np.ndarray], mask_ratio: float, steps: int,
                 cfg: VisionConfig | None = None, seed: int = 7,
                 lr: float = ad.ADAM_LR, batch_size: int = 8,
                 encoder: VisualEncoder | None = None) -> tuple[VisualEncoder, list[float]]:
    """Self-supervised masked-patch pretraining; returns the loss curve."""
    cfg = cfg or VisionConfig()
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigurationError(f"mask ratio {mask_ratio} outside (0, 1)")
    if encoder is None:
        encoder = VisualEncoder.init(cfg, seed)
    opt = Adam(encoder.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x22)))
    arrs = [im.pixels if isinstance(im, StudyImage) else np.asarray(im) for im in images]
    losses: list[float] = []
    for step in range(steps):
        pick = rng.integers(len(arrs), size=min(batch_size, len(arrs)))
        batch = np.stack([arrs[i] for i in pick])
        mask = sample_mask(cfg, mask_ratio, seed=int(rng.integers(2 ** 31)))
        with Tape(seed) as tape:
            loss = mim_loss(batch, encoder.params, cfg, mask)
        if not np.isfinite(loss.values):
            raise TrainingDivergenceError(f"non-finite reconstruction loss at step {step}")
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    return encoder, losses
