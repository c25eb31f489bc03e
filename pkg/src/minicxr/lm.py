"""Causal transformer language model over the synthetic clinical vocabulary.

Pre-layernorm decoder; when a visual context is supplied, every block runs
the gated cross-modal blend after its self-attention sublayer, so a closed
gate reproduces the unconditioned decoder exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion
from .autodiff import Adam, DiffArray, Tape, TrainingDivergenceError
from .vocab import BOS, EOS, PAD, TokenSeq


class ContextOverflowError(ValueError):
    """Sequence would exceed the model's maximum context."""


class MustStartWithBOSError(ValueError):
    """Generation prefixes must be nonempty and begin with BOS."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_context: int = 96
    vocab_size: int = 256
    ff_mult: int = 4

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def __post_init__(self):
        if self.n_heads * (self.d_model // self.n_heads) != self.d_model:
            raise ValueError("n_heads must divide d_model")


def init_decoder_params(cfg: ModelConfig, seed: int,
                        prefix: str = "lm.") -> dict[str, DiffArray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0)))
    params: dict[str, DiffArray] = {}

    def w(shape):
        return ad.param(0.02 * rng.standard_normal(shape))

    params[prefix + "tok_emb"] = w((cfg.vocab_size, cfg.d_model))
    params[prefix + "pos_emb"] = w((cfg.max_context, cfg.d_model))
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
        params[p + "ff_w1"] = w((cfg.d_model, cfg.ff_mult * cfg.d_model))
        params[p + "ff_b1"] = ad.param(np.zeros(cfg.ff_mult * cfg.d_model))
        params[p + "ff_w2"] = w((cfg.ff_mult * cfg.d_model, cfg.d_model))
        params[p + "ff_b2"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "lnf_g"] = ad.param(np.ones(cfg.d_model))
    params[prefix + "lnf_b"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "head_w"] = w((cfg.d_model, cfg.vocab_size))
    params[prefix + "head_b"] = ad.param(np.zeros(cfg.vocab_size))
    return params


def causal_mask(n: int) -> np.ndarray:
    """True marks excluded (future) positions."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def multi_head_attention(x: DiffArray, params: dict, prefix: str, n_heads: int,
                         causal: bool = True, attn_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Multi-head self-attention over (..., N, d); no residual or norm.

    ``attn_mask`` (True = excluded key) combines with the causal mask.
    """
    n = x.values.shape[-2]
    d = x.values.shape[-1]
    d_k = d // n_heads
    lead = x.values.shape[:-2]

    def split_heads(a: DiffArray) -> DiffArray:
        return ad.swap_axes(ad.reshape(a, lead + (n, n_heads, d_k)), -3, -2)

    q = split_heads(ad.matmul(x, params[prefix + "wq"]))
    k = split_heads(ad.matmul(x, params[prefix + "wk"]))
    v = split_heads(ad.matmul(x, params[prefix + "wv"]))
    mask = None
    if causal:
        mask = np.broadcast_to(causal_mask(n), q.values.shape[:-1] + (n,))
    if attn_mask is not None:
        attn_mask = np.broadcast_to(attn_mask[..., None, :, :],
                                    q.values.shape[:-1] + (n,))
        mask = attn_mask if mask is None else (mask | attn_mask)
    scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(d_k))
    weights = ad.softmax_rows(scores, mask=mask)
    merged = ad.reshape(ad.swap_axes(ad.matmul(weights, v), -3, -2), lead + (n, d))
    out = ad.matmul(merged, params[prefix + "wo"])
    if return_weights:
        return out, weights
    return out


def self_attention_block(x: DiffArray, params: dict, prefix: str, n_heads: int,
                         max_context: int, causal: bool = True,
                         attn_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Pre-norm block: x + MHA(LN(x)). Raises when N exceeds the context."""
    n = x.values.shape[-2]
    if n > max_context:
        raise ContextOverflowError(f"sequence of {n} exceeds context {max_context}")
    normed = ad.layernorm(x, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    if return_weights:
        attn, weights = multi_head_attention(normed, params, prefix, n_heads,
                                             causal, attn_mask, return_weights=True)
        return ad.add(x, attn), weights
    return ad.add(x, multi_head_attention(normed, params, prefix, n_heads,
                                          causal, attn_mask))


def feed_forward(x: DiffArray, params: dict, prefix: str) -> DiffArray:
    normed = ad.layernorm(x, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    h = ad.gelu(ad.add(ad.matmul(normed, params[prefix + "ff_w1"]),
                       params[prefix + "ff_b1"]))
    return ad.add(x, ad.add(ad.matmul(h, params[prefix + "ff_w2"]),
                            params[prefix + "ff_b2"]))


def forward_from_embeddings(x: DiffArray, params: dict, cfg: ModelConfig,
                            visual: DiffArray | None = None,
                            causal: bool = True, prefix: str = "lm.",
                            gate_sink: list | None = None,
                            last_only: bool = False) -> DiffArray:
    """Decoder stack on already-embedded inputs; returns logits.

    ``visual``, when given, is the (..., M, d) visual embedding matrix and
    switches on the per-block cross-modal blend (parameters under "fus.").
    ``last_only`` projects just the final position through the output head
    (a decoding shortcut; the hidden stack is unchanged).
    """
    h = x
    for layer in range(cfg.n_layers):
        p = f"{prefix}l{layer}."
        h = self_attention_block(h, params, p, cfg.n_heads, cfg.max_context, causal)
        if visual is not None:
            fused = fusion.fuse(h, visual, params, prefix=f"fus.l{layer}.")
            if gate_sink is not None:
                gate_sink.append(fused.gate_values)
            h = fused.C
        h = feed_forward(h, params, p)
    if last_only:
        n = h.values.shape[-2]
        h = ad.transpose_last2(ad.slice_last(ad.transpose_last2(h), n - 1, n))
    h = ad.layernorm(h, params[prefix + "lnf_g"], params[prefix + "lnf_b"])
    return ad.add(ad.matmul(h, params[prefix + "head_w"]), params[prefix + "head_b"])


def embed_ids(ids: np.ndarray, params: dict, cfg: ModelConfig,
              prefix: str = "lm.") -> DiffArray:
    """Token plus learned absolute positional embeddings for (..., N) ids."""
    n = ids.shape[-1]
    if n > cfg.max_context:
        raise ContextOverflowError(f"sequence of {n} exceeds context {cfg.max_context}")
    tok = ad.embedding_lookup(params[prefix + "tok_emb"], ids)
    pos = ad.embedding_lookup(params[prefix + "pos_emb"], np.arange(n))
    return ad.add(tok, pos)


def forward_ids(ids: np.ndarray, params: dict, cfg: ModelConfig,
                visual: DiffArray | None = None,
                gate_sink: list | None = None,
                last_only: bool = False) -> DiffArray:
    return forward_from_embeddings(embed_ids(ids, params, cfg), params, cfg,
                                   visual=visual, gate_sink=gate_sink,
                                   last_only=last_only)


def batch_nll(logits: DiffArray, targets: np.ndarray, mask: np.ndarray) -> DiffArray:
    """Mean NLL over masked positions of (B, N, V) logits."""
    b, n, v = logits.values.shape
    flat = ad.reshape(logits, (b * n, v))
    return ad.cross_entropy_nll(flat, targets.reshape(-1), mask.reshape(-1))


class DecoderStack:
    """Parameter collection plus config; the unconditioned language model."""

    def __init__(self, params: dict[str, DiffArray], cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "DecoderStack":
        return cls(init_decoder_params(cfg, seed), cfg)

    def logits(self, ids: np.ndarray, visual: DiffArray | None = None) -> DiffArray:
        return forward_ids(np.asarray(ids, dtype=np.int64), self.params, self.cfg,
                           visual=visual)

    def generate(self, prefix: TokenSeq, max_new: int, temperature: float | None = None,
                 seed: int = 0, visual: np.ndarray | None = None,
                 return_logprobs: bool = False):
        """Autoregressive decoding from a BOS-led prefix.

        Greedy when ``temperature`` is None; otherwise softmax sampling at
        the given temperature, deterministic in ``seed``. Stops at EOS or
        after ``max_new`` tokens.
        """
        visuals = None if visual is None else np.asarray(visual)[None]
        toks, lps = generate_batch(
            self.params, self.cfg, np.asarray([prefix.ids], dtype=np.int64),
            max_new, temperature=temperature, seed=seed, visuals=visuals)
        out = TokenSeq(prefix.ids + tuple(toks[0]))
        if return_logprobs:
            return out, lps[0]
        return out


def generate_batch(params: dict, cfg: ModelConfig, prefixes: np.ndarray, max_new: int,
                   temperature: float | None = None, seed: int = 0,
                   visuals: np.ndarray | None = None):
    """Decode a batch of equal-length prefixes in lockstep.

    Returns (per-sequence new token lists, per-sequence logprob lists);
    finished sequences pad with PAD and stop accruing tokens.
    """
    prefixes = np.asarray(prefixes, dtype=np.int64)
    b, n0 = prefixes.shape
    if n0 == 0 or np.any(prefixes[:, 0] != BOS):
        raise MustStartWithBOSError("prefix must be nonempty and start with BOS")
    if n0 + max_new > cfg.max_context:
        raise ContextOverflowError(
            f"prefix {n0} + max_new {max_new} exceeds context {cfg.max_context}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5E)))
    ids = prefixes
    alive = np.ones(b, dtype=bool)
    new_tokens: list[list[int]] = [[] for _ in range(b)]
    logprobs: list[list[float]] = [[] for _ in range(b)]
    vis = None if visuals is None else ad.constant(visuals)
    for _ in range(max_new):
        if not alive.any():
            break
        logits = forward_ids(ids, params, cfg, visual=vis, last_only=True).values[:, 0, :]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        if temperature is None:
            chosen = logits.argmax(axis=-1)
        else:
            t_shift = (logits / temperature)
            t_shift -= t_shift.max(axis=-1, keepdims=True)
            probs = np.exp(t_shift)
            probs /= probs.sum(axis=-1, keepdims=True)
            u = rng.random(b)
            cdf = probs.cumsum(axis=-1)
            chosen = (cdf < u[:, None]).sum(axis=-1)
        chosen = np.where(alive, chosen, PAD)
        for i in range(b):
            if alive[i]:
                new_tokens[i].append(int(chosen[i]))
                logprobs[i].append(float(logp[i, chosen[i]]))
                if chosen[i] == EOS:
                    alive[i] = False
        ids = np.concatenate([ids, chosen[:, None]], axis=1)
    return new_tokens, logprobs


def lm_pretrain(seqs: list[TokenSeq], steps: int, cfg: ModelConfig | None = None,
                seed: int = 7, lr: float = ad.ADAM_LR, batch_size: int = 16,
                stack: DecoderStack | None = None) -> tuple[DecoderStack, list[float]]:
    """Next-token training over BOS-led sequences; returns per-step mean NLL."""
    if not seqs:
        raise ValueError("empty corpus")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    cfg = cfg or ModelConfig()
    if stack is None:
        stack = DecoderStack.init(cfg, seed)
    opt = Adam(stack.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11)))
    losses: list[float] = []
    arrs = [np.asarray(s.ids, dtype=np.int64) for s in seqs]
    for step in range(steps):
        pick = rng.integers(len(arrs), size=min(batch_size, len(arrs)))
        batch = [arrs[i] for i in pick]
        width = max(len(a) for a in batch)
        mat = np.full((len(batch), width), PAD, dtype=np.int64)
        for i, a in enumerate(batch):
            mat[i, :len(a)] = a
        inputs, targets = mat[:, :-1], mat[:, 1:]
        mask = targets != PAD
        with Tape(seed) as tape:
            loss = batch_nll(forward_ids(inputs, stack.params, stack.cfg), targets, mask)
        if not np.isfinite(loss.values):
            raise TrainingDivergenceError(f"non-finite language-model loss at step {step}")
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    return stack, losses


def corpus_nll(stack: DecoderStack, seqs: list[TokenSeq], batch_size: int = 32) -> float:
    """Mean next-token NLL over a held-out slice (no gradients)."""
    total, count = 0.0, 0
    arrs = [np.asarray(s.ids, dtype=np.int64) for s in seqs]
    for start in range(0, len(arrs), batch_size):
        batch = arrs[start:start + batch_size]
        width = max(len(a) for a in batch)
        mat = np.full((len(batch), width), PAD, dtype=np.int64)
        for i, a in enumerate(batch):
            mat[i, :len(a)] = a
        inputs, targets = mat[:, :-1], mat[:, 1:]
        mask = targets != PAD
        logits = forward_ids(inputs, stack.params, stack.cfg).values
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        rows = np.arange(targets.size)
        nll = -logp.reshape(-1, logits.shape[-1])[rows, targets.reshape(-1)]
        total += float((nll * mask.reshape(-1)).sum())
        count += int(mask.sum())
    return total / max(count, 1)


def lm_sequence(report: TokenSeq) -> TokenSeq:
    """Model-ready phase-1 sequence: BOS followed by the report tokens."""
    return TokenSeq((BOS,) + report.ids)
