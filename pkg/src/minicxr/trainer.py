"""Training phases: joint MLE, the discriminator, the reward model, PPO,
and the adversarial fine-tuning loop that interleaves them.

The generator policy optimizes a blended terminal reward (learned reward
model plus discriminator log-score) with a clipped-ratio surrogate and an
exact per-token KL penalty against the frozen old policy.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, DiffArray, Tape, TrainingDivergenceError
from .generator import Generator
from .lm import forward_ids
from .metrics import evaluate_reports, label_findings
from .preferences import (PendingPair, PreferenceRecord, encode_image_b64,
                          list_pending_pairs, now_ms, read_records,
                          write_pair_file)
from .synthetic import Corpus, StudyImage, SyntheticStudy
from .vocab import BOS, EOS, PAD, SEP, TokenSeq, Vocabulary


class FeedbackPendingError(RuntimeError):
    """Human-log mode is waiting on preference records that never arrived."""


# ---------------------------------------------------------------------------
# scoring trunk shared by the discriminator and the reward model


@dataclass(frozen=True)
class TrunkConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch: int = 8
    image_size: int = 32
    vocab_size: int = 256
    max_len: int = 176

    @property
    def img_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2


def init_trunk_params(cfg: TrunkConfig, seed: int, prefix: str) -> dict[str, DiffArray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0)))
    params: dict[str, DiffArray] = {}

    def w(shape):
        return ad.param(0.02 * rng.standard_normal(shape))

    params[prefix + "img_proj"] = w((cfg.patch * cfg.patch, cfg.d_model))
    params[prefix + "img_adapt"] = w((cfg.d_model, cfg.d_model))
    params[prefix + "img_b"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "tok_emb"] = w((cfg.vocab_size, cfg.d_model))
    params[prefix + "pos_emb"] = w((cfg.max_len, cfg.d_model))
    for layer in range(cfg.n_layers):
        p = f"{prefix}l{layer}."
        params[p + "ln1_g"] = ad.param(np.ones(cfg.d_model))
        params[p + "ln1_b"] = ad.param(np.zeros(cfg.d_model))
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = w((cfg.d_model, cfg.d_model))
        params[p + "ln2_g"] = ad.param(np.ones(cfg.d_model))
        params[p + "ln2_b"] = ad.param(np.zeros(cfg.d_model))
        params[p + "ff_w1"] = w((cfg.d_model, 4 * cfg.d_model))
        params[p + "ff_b1"] = ad.param(np.zeros(4 * cfg.d_model))
        params[p + "ff_w2"] = w((4 * cfg.d_model, cfg.d_model))
        params[p + "ff_b2"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "lnf_g"] = ad.param(np.ones(cfg.d_model))
    params[prefix + "lnf_b"] = ad.param(np.zeros(cfg.d_model))
    params[prefix + "head_w"] = w((cfg.d_model, 1))
    params[prefix + "head_b"] = ad.param(np.zeros(1))
    return params


def _trunk_logits(params: dict, prefix: str, cfg: TrunkConfig,
                  images: list[StudyImage], prompts: list[TokenSeq],
                  reports: list[TokenSeq],
                  image_features: np.ndarray | None = None) -> DiffArray:
    """(B, 1) scalar logits over [image ; SEP ; prompt ; SEP ; report].

    ``image_features`` replaces the raw-patch projection with precomputed
    (B, T, d) embeddings (e.g. from the generator's frozen visual encoder),
    passed through the trainable projection as an adapter.
    """
    from . import lm as lm_mod

    b = len(images)
    if image_features is None:
        pixel_stack = np.stack([im.pixels for im in images])
        patches = ad.extract_patches(ad.constant(pixel_stack), cfg.patch)
        img_tok = ad.add(ad.matmul(patches, params[prefix + "img_proj"]),
                         params[prefix + "img_b"])
    else:
        img_tok = ad.add(ad.matmul(ad.constant(image_features),
                                   params[prefix + "img_adapt"]),
                         params[prefix + "img_b"])

    n_img = img_tok.values.shape[-2]
    text_rows = []
    for p, r in zip(prompts, reports):
        text_rows.append((SEP,) + p.ids + (SEP,) + r.ids)
    t_max = max(len(t) for t in text_rows)
    text = np.full((b, t_max), PAD, dtype=np.int64)
    for i, t in enumerate(text_rows):
        text[i, :len(t)] = t
    total = n_img + t_max
    if total > cfg.max_len:
        raise ad.DimensionError(f"trunk sequence of {total} exceeds {cfg.max_len}")
    txt_tok = ad.embedding_lookup(params[prefix + "tok_emb"], text)

    tokens = ad.transpose_last2(ad.concat_last([ad.transpose_last2(img_tok),
                                                ad.transpose_last2(txt_tok)]))
    pos = ad.embedding_lookup(params[prefix + "pos_emb"], np.arange(total))
    h = ad.add(tokens, pos)

    pad_mask = np.concatenate([np.zeros((b, n_img), dtype=bool),
                               text == PAD], axis=1)
    attn_mask = np.broadcast_to(pad_mask[:, None, :], (b, total, total))
    for layer in range(cfg.n_layers):
        p = f"{prefix}l{layer}."
        h = lm_mod.self_attention_block(h, params, p, cfg.n_heads,
                                        max_context=cfg.max_len, causal=False,
                                        attn_mask=attn_mask)
        h = lm_mod.feed_forward(h, params, p)
    h = ad.layernorm(h, params[prefix + "lnf_g"], params[prefix + "lnf_b"])

    keep = (~pad_mask)[:, :, None].astype(float)
    counts = keep.sum(axis=1, keepdims=True)
    pooled = ad.mul(ad.mean_axis(ad.mul(h, ad.constant(keep)), -2),
                    ad.constant(total / counts))
    flat = ad.reshape(pooled, (b, cfg.d_model))
    return ad.add(ad.matmul(flat, params[prefix + "head_w"]),
                  params[prefix + "head_b"])


class _ScoringTrunk:
    """Shared plumbing for the discriminator and the reward model.

    ``image_encoder`` optionally maps a list of StudyImages to frozen
    (B, T, d) feature tokens (e.g. the generator's trained visual
    encoder); the trunk then reads those through a trainable adapter
    instead of raw patches.
    """

    prefix = ""

    def __init__(self, params: dict[str, DiffArray], cfg: TrunkConfig,
                 image_encoder=None):
        self.params = params
        self.cfg = cfg
        self.image_encoder = image_encoder
        self._feature_cache: dict[str, np.ndarray] = {}

    def _features(self, images) -> np.ndarray | None:
        if self.image_encoder is None:
            return None
        out = []
        for im in images:
            key = im.study_id if isinstance(im, StudyImage) else ""
            if key and key in self._feature_cache:
                out.append(self._feature_cache[key])
                continue
            feat = self.image_encoder(im)
            if key:
                self._feature_cache[key] = feat
            out.append(feat)
        return np.stack(out)

    def logits(self, images, prompts, reports) -> DiffArray:
        return _trunk_logits(self.params, self.prefix, self.cfg, images,
                             prompts, reports,
                             image_features=self._features(images))


class Discriminator(_ScoringTrunk):
    """Sigmoid scorer of (image, prompt, report) clinical plausibility."""

    prefix = "d."

    @classmethod
    def init(cls, cfg: TrunkConfig | None = None, seed: int = 0,
             image_encoder=None) -> "Discriminator":
        cfg = cfg or TrunkConfig()
        return cls(init_trunk_params(cfg, seed, "d."), cfg, image_encoder)

    def scores(self, images, prompts, reports) -> np.ndarray:
        """Strictly-inside-(0,1) probabilities, no gradients."""
        logit = self.logits(images, prompts, reports).values[:, 0]
        return 1.0 / (1.0 + np.exp(-logit))


class RewardModel(_ScoringTrunk):
    """Same trunk as the discriminator with an unbounded scalar head."""

    prefix = "rm."

    @classmethod
    def init(cls, cfg: TrunkConfig | None = None, seed: int = 1,
             image_encoder=None) -> "RewardModel":
        cfg = cfg or TrunkConfig()
        return cls(init_trunk_params(cfg, seed, "rm."), cfg, image_encoder)

    def scores(self, images, prompts, reports) -> np.ndarray:
        return self.logits(images, prompts, reports).values[:, 0]


# ---------------------------------------------------------------------------
# phase 3: joint maximum-likelihood fine-tuning


def build_training_batch(studies: list[SyntheticStudy]):
    """Padded id matrix [BOS prompt SEP report-EOS] plus the report-loss mask."""
    rows = [(BOS,) + s.prompt.ids + (SEP,) + s.report.ids for s in studies]
    prefix_len = 2 + len(studies[0].prompt.ids)
    width = max(len(r) for r in rows)
    mat = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        mat[i, :len(r)] = r
    inputs, targets = mat[:, :-1], mat[:, 1:]
    mask = targets != PAD
    mask[:, :prefix_len - 1] = False   # only report positions carry loss
    return inputs, targets, mask


def mle_loss(gen: Generator, studies: list[SyntheticStudy]) -> DiffArray:
    inputs, targets, mask = build_training_batch(studies)
    visual = gen.encode_images([s.image for s in studies])
    logits = forward_ids(inputs, gen.params, gen.cfg, visual=visual)
    b, n, v = logits.values.shape
    flat = ad.reshape(logits, (b * n, v))
    return ad.cross_entropy_nll(flat, targets.reshape(-1), mask.reshape(-1))


def train_joint_mle(gen: Generator, studies: list[SyntheticStudy], steps: int,
                    batch_size: int = 8, lr: float = 3e-4,
                    seed: int = 7,
                    lr_scales: dict[str, float] | None = None) -> list[float]:
    """Minimize report NLL given (image, prompt); returns the loss curve."""
    if not studies:
        raise ValueError("empty study list")
    opt = Adam(gen.params, lr=lr, lr_scales=lr_scales)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x33)))
    losses: list[float] = []
    for step in range(steps):
        pick = rng.integers(len(studies), size=min(batch_size, len(studies)))
        batch = [studies[i] for i in pick]
        with Tape(seed) as tape:
            loss = mle_loss(gen, batch)
        if not np.isfinite(loss.values):
            raise TrainingDivergenceError(f"non-finite MLE loss at step {step}")
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    return losses


def heldout_mle_nll(gen: Generator, studies: list[SyntheticStudy],
                    batch_size: int = 16) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(studies), batch_size):
        batch = studies[lo:lo + batch_size]
        inputs, targets, mask = build_training_batch(batch)
        visual = gen.encode_images([s.image for s in batch])
        logits = forward_ids(inputs, gen.params, gen.cfg, visual=visual).values
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        flat = logp.reshape(-1, logits.shape[-1])
        nll = -flat[np.arange(targets.size), targets.reshape(-1)]
        total += float((nll * mask.reshape(-1)).sum())
        count += int(mask.sum())
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# phase 4a: discriminator


def discriminator_loss(disc: Discriminator, real, fake) -> DiffArray:
    """-E[log D(real)] - E[log(1 - D(fake))] over the two batches."""
    r_imgs, r_prompts, r_reports = real
    f_imgs, f_prompts, f_reports = fake
    l_real = disc.logits(r_imgs, r_prompts, r_reports)
    l_fake = disc.logits(f_imgs, f_prompts, f_reports)
    loss_real = ad.scale(ad.sum_all(ad.logsigmoid(l_real)), -1.0 / len(r_imgs))
    neg_fake = ad.scale(l_fake, -1.0)
    loss_fake = ad.scale(ad.sum_all(ad.logsigmoid(neg_fake)), -1.0 / len(f_imgs))
    return ad.add(loss_real, loss_fake)


def train_discriminator(disc: Discriminator, real, fake, steps: int,
                        batch_size: int = 16, lr: float = 3e-4,
                        seed: int = 7) -> dict:
    """Real/fake binary training; returns post-training mean class scores."""
    r_imgs, r_prompts, r_reports = real
    f_imgs, f_prompts, f_reports = fake
    if not r_imgs or not f_imgs:
        raise ValueError("both real and fake batches must be nonempty")
    ratio = max(len(r_imgs), len(f_imgs)) / min(len(r_imgs), len(f_imgs))
    if ratio > 10:
        warnings.warn(f"class imbalance {ratio:.1f}:1 between real and fake",
                      stacklevel=2)
    opt = Adam(disc.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x44)))
    losses = []
    for _ in range(steps):
        ri = rng.integers(len(r_imgs), size=min(batch_size, len(r_imgs)))
        fi = rng.integers(len(f_imgs), size=min(batch_size, len(f_imgs)))
        rb = ([r_imgs[i] for i in ri], [r_prompts[i] for i in ri], [r_reports[i] for i in ri])
        fb = ([f_imgs[i] for i in fi], [f_prompts[i] for i in fi], [f_reports[i] for i in fi])
        with Tape(seed) as tape:
            loss = discriminator_loss(disc, rb, fb)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    return {
        "losses": losses,
        "real_score": float(disc.scores(r_imgs, r_prompts, r_reports).mean()),
        "fake_score": float(disc.scores(f_imgs, f_prompts, f_reports).mean()),
    }


# ---------------------------------------------------------------------------
# phase 4b: reward model from preferences


def _resolve_pref(rec: PreferenceRecord, corpus: Corpus, vocab: Vocabulary):
    study = corpus.by_id(rec.study_id)
    chosen_text = rec.report_a if rec.choice == "A" else rec.report_b
    rejected_text = rec.report_b if rec.choice == "A" else rec.report_a
    chosen = TokenSeq(vocab.encode_text(chosen_text).ids + (EOS,))
    rejected = TokenSeq(vocab.encode_text(rejected_text).ids + (EOS,))
    return study, chosen, rejected


def train_reward_model(rm: RewardModel, prefs: list[PreferenceRecord],
                       corpus: Corpus, vocab: Vocabulary, steps: int,
                       batch_size: int = 8, lr: float = 3e-4,
                       seed: int = 7) -> dict:
    """Pairwise logistic fit of human/simulated choices.

    Degenerate pairs (identical reports) and skips are dropped and counted.
    """
    usable = []
    skipped = 0
    for rec in prefs:
        if rec.choice == "skip" or rec.report_a == rec.report_b:
            skipped += 1
            continue
        usable.append(_resolve_pref(rec, corpus, vocab))
    if not usable:
        raise ValueError("no usable preference pairs")
    opt = Adam(rm.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x55)))
    losses = []
    for _ in range(steps):
        pick = rng.integers(len(usable), size=min(batch_size, len(usable)))
        studies = [usable[i][0] for i in pick]
        chosen = [usable[i][1] for i in pick]
        rejected = [usable[i][2] for i in pick]
        images = [s.image for s in studies]
        prompts = [s.prompt for s in studies]
        with Tape(seed) as tape:
            diff = ad.sub(rm.logits(images, prompts, chosen),
                          rm.logits(images, prompts, rejected))
            loss = ad.scale(ad.sum_all(ad.logsigmoid(diff)), -1.0 / len(pick))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    return {"losses": losses, "skipped": skipped,
            "accuracy": reward_pairwise_accuracy(rm, prefs, corpus, vocab)}


def reward_pairwise_accuracy(rm: RewardModel, prefs: list[PreferenceRecord],
                             corpus: Corpus, vocab: Vocabulary) -> float:
    hits, total = 0, 0
    for rec in prefs:
        if rec.choice == "skip" or rec.report_a == rec.report_b:
            continue
        study, chosen, rejected = _resolve_pref(rec, corpus, vocab)
        s = rm.scores([study.image, study.image], [study.prompt, study.prompt],
                      [chosen, rejected])
        hits += int(s[0] > s[1])
        total += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# phase 4c: PPO


@dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    kl_coeff: float = 0.02
    disc_blend: float = 0.7       # alpha: weight of the reward model
    rollouts: int = 64
    epochs: int = 2
    whiten_advantages: bool = True
    max_new: int = 48
    lr: float = 1e-4
    kl_limit: float = 10.0

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("KL coefficient must be >= 0")
        if not 0 <= self.disc_blend <= 1:
            raise ValueError("discriminator blend must lie in [0, 1]")


@dataclass
class GeneratorPolicy:
    """Trainable generator plus the frozen old-policy snapshot."""

    gen: Generator
    old_values: dict[str, np.ndarray] | None = None
    optimizer: Adam | None = None

    def snapshot(self) -> None:
        self.old_values = self.gen.clone_values()

    def old_params(self) -> dict[str, DiffArray]:
        assert self.old_values is not None, "snapshot() must run first"
        return {k: ad.constant(v) for k, v in self.old_values.items()}


def make_frozen_image_encoder(gen: Generator):
    """Snapshot the generator's visual encoder as a pure feature function.

    The scoring trunks read these (frozen) embeddings through a trainable
    adapter, which gives the reward model and discriminator the same
    finding-separable visual features the policy sees.
    """
    from .vision import encode_pixels

    frozen = {k: ad.constant(p.values.copy()) for k, p in gen.params.items()
              if k.startswith("vis.")}
    vcfg = gen.vcfg

    def encode(image: StudyImage) -> np.ndarray:
        return encode_pixels(ad.constant(image.pixels), frozen, vcfg).E_V.values

    return encode


def build_blended_reward(rm: RewardModel | None, disc: Discriminator | None,
                         alpha: float):
    """Terminal reward alpha*R_M + (1-alpha)*log D over rollout triples."""

    def reward_fn(images, prompts, reports) -> np.ndarray:
        total = np.zeros(len(images))
        if alpha > 0:
            if rm is None:
                raise ValueError("reward model required when alpha > 0")
            total += alpha * rm.scores(images, prompts, reports)
        if alpha < 1:
            if disc is None:
                raise ValueError("discriminator required when alpha < 1")
            d = disc.scores(images, prompts, reports)
            total += (1 - alpha) * np.log(d)
        return total

    return reward_fn


def clipped_surrogate(ratio: DiffArray, advantage: DiffArray,
                      eps: float) -> DiffArray:
    """Elementwise min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    s1 = ad.mul(ratio, advantage)
    s2 = ad.mul(ad.clip(ratio, 1 - eps, 1 + eps), advantage)
    return ad.minimum(s1, s2)


def whiten(rewards: np.ndarray, enabled: bool = True,
           groups: np.ndarray | None = None) -> np.ndarray:
    """Center rewards and scale to unit variance when more than one sample.

    ``groups`` assigns each rollout to a baseline group (its study): the
    mean is then removed per group, which cancels any per-study offset in
    a pairwise-trained reward model, and the variance is normalized over
    the whole batch. Without groups the plain batch mean is used.
    """
    if groups is None:
        adv = rewards - rewards.mean()
    else:
        adv = rewards.astype(float).copy()
        for g in np.unique(groups):
            sel = groups == g
            adv[sel] -= adv[sel].mean()
    if enabled and len(rewards) > 1:
        std = adv.std()
        if std > 1e-12:
            adv = adv / std
    return adv


def _teacher_logprob_table(params: dict, gen: Generator, ids: np.ndarray,
                           visuals: np.ndarray) -> np.ndarray:
    """Per-position log-softmax table (B, N-1, V) under given params."""
    vis = vision_encode_values(params, gen, visuals)
    logits = forward_ids(ids[:, :-1], params, gen.cfg, visual=vis).values
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def vision_encode_values(params: dict, gen: Generator,
                         pixel_stack: np.ndarray) -> DiffArray:
    from .vision import encode_pixels
    return encode_pixels(ad.constant(pixel_stack), params, gen.vcfg).E_V


def ppo_iteration(policy: GeneratorPolicy, rm: RewardModel | None,
                  disc: Discriminator | None, batch: list[SyntheticStudy],
                  cfg: PPOConfig, seed: int = 0,
                  reward_fn=None) -> dict:
    """One PPO iteration: snapshot, roll out, optimize the clipped surrogate.

    ``reward_fn(images, prompts, reports) -> np.ndarray`` overrides the
    blended reward (used by diagnostics and tests).
    """
    gen = policy.gen
    policy.snapshot()
    if policy.optimizer is None:
        policy.optimizer = Adam(gen.params, lr=cfg.lr)
    if reward_fn is None:
        reward_fn = build_blended_reward(rm, disc, cfg.disc_blend)

    # rollouts from the frozen snapshot (current params equal it at entry);
    # cycling the study batch interleaves per-study rollout groups
    studies = [batch[i % len(batch)] for i in range(cfg.rollouts)]
    group_ids = np.arange(cfg.rollouts) % len(batch)
    images = [s.image for s in studies]
    prompts = [s.prompt for s in studies]
    reports, _ = gen.generate_batch(images, prompts, temperature=1.0,
                                    seed=seed, max_new=cfg.max_new)

    rewards = reward_fn(images, prompts, reports)
    adv = whiten(rewards, cfg.whiten_advantages, groups=group_ids)

    # full padded sequences [BOS prompt SEP tokens...]
    prefix_rows = [gen.prefix_ids(p) for p in prompts]
    n0 = len(prefix_rows[0])
    rows = [np.concatenate([prefix_rows[i], np.asarray(reports[i].ids, dtype=np.int64)])
            for i in range(len(studies))]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    targets = ids[:, 1:]
    gen_mask = np.zeros_like(targets, dtype=bool)
    for i, r in enumerate(rows):
        gen_mask[i, n0 - 1:len(r) - 1] = True

    pixel_stack = np.stack([im.pixels for im in images])
    old_table = _teacher_logprob_table(policy.old_params(), gen, ids, pixel_stack)
    rows_idx = np.arange(targets.size)
    lp_old = old_table.reshape(-1, old_table.shape[-1])[rows_idx, targets.reshape(-1)]
    lp_old = lp_old.reshape(targets.shape)

    adv_tok = np.where(gen_mask, adv[:, None], 0.0)
    stats = {
        "mean_reward": float(rewards.mean()),
        "clip_frac": 0.0,
        "kl": 0.0,
        "first_step_ratio_max_dev": None,
        "excluded_tokens": 0,
        "diverged": False,
    }
    b, t = targets.shape
    v = gen.cfg.vocab_size
    n_tok = int(gen_mask.sum())
    for epoch in range(cfg.epochs):
        with Tape(seed) as tape:
            vis = vision_encode_values(gen.params, gen, pixel_stack)
            logits = forward_ids(ids[:, :-1], gen.params, gen.cfg, visual=vis)
            flat = ad.reshape(logits, (b * t, v))
            lp_new = ad.reshape(ad.token_logprobs(flat, targets.reshape(-1)), (b, t))
            ratio = ad.exp(ad.sub(lp_new, ad.constant(lp_old)))

            finite = np.isfinite(ratio.values)
            live_mask = gen_mask & finite
            stats["excluded_tokens"] += int((gen_mask & ~finite).sum())
            n_live = max(int(live_mask.sum()), 1)

            adv_c = ad.constant(np.where(live_mask, adv_tok, 0.0))
            per_token = clipped_surrogate(ratio, adv_c, cfg.clip_epsilon)
            surrogate = ad.scale(ad.sum_all(ad.mul(per_token,
                                                   ad.constant(live_mask.astype(float)))),
                                 1.0 / n_live)

            lsm_new = ad.log_softmax_rows(logits)
            p_new = ad.exp(lsm_new)
            kl_tok = ad.scale(ad.mean_axis(ad.mul(p_new, ad.sub(lsm_new,
                                                                ad.constant(old_table))),
                                           -1), v)
            kl_mask = ad.constant(gen_mask[..., None].astype(float))
            kl = ad.scale(ad.sum_all(ad.mul(kl_tok, kl_mask)), 1.0 / max(n_tok, 1))

            objective = ad.sub(surrogate, ad.scale(kl, cfg.kl_coeff))
            loss = ad.scale(objective, -1.0)

        if epoch == 0:
            dev = np.abs(ratio.values[gen_mask] - 1.0)
            stats["first_step_ratio_max_dev"] = float(dev.max()) if dev.size else 0.0
        clip_hits = np.abs(ratio.values[live_mask] - 1.0) > cfg.clip_epsilon
        stats["clip_frac"] = float(clip_hits.mean()) if clip_hits.size else 0.0
        stats["kl"] = float(kl.values)
        if stats["kl"] > cfg.kl_limit:
            stats["diverged"] = True
            break
        policy.optimizer.zero_grad()
        tape.backward(loss)
        policy.optimizer.step()
    return stats


# ---------------------------------------------------------------------------
# the simulated clinician


@dataclass
class ClinicianOracle:
    """Preference source: deterministic simulated scoring, or the human log.

    Simulated mode scores a candidate by the F1 of its labeled findings
    against ground truth minus 0.2 per hallucinated finding, preferring
    the higher score and breaking ties toward the shorter report.
    """

    mode: str = "simulated"
    hallucination_penalty: float = 0.2

    def score(self, study: SyntheticStudy, report: TokenSeq,
              vocab: Vocabulary) -> float:
        labeled = label_findings(report, vocab)
        truth = study.findings
        tp = sum(1 for i in range(14) if labeled[i] and truth[i])
        fp = sum(1 for i in range(14) if labeled[i] and not truth[i])
        fn = sum(1 for i in range(14) if not labeled[i] and truth[i])
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 1.0
        return f1 - self.hallucination_penalty * fp

    def prefer(self, study: SyntheticStudy, rep_a: TokenSeq, rep_b: TokenSeq,
               vocab: Vocabulary) -> tuple[str, float]:
        """(choice, margin); margin is the score gap before tie-breaks."""
        sa = self.score(study, rep_a, vocab)
        sb = self.score(study, rep_b, vocab)
        if sa != sb:
            return ("A" if sa > sb else "B"), abs(sa - sb)
        la, lb = len(rep_a.content_ids()), len(rep_b.content_ids())
        if la != lb:
            return ("A" if la < lb else "B"), 0.0
        return "skip", 0.0


# ---------------------------------------------------------------------------
# phase 4: the full adversarial loop


@dataclass
class CgaftConfig:
    ppo: PPOConfig = field(default_factory=PPOConfig)
    pairs_per_round: int = 32
    pair_temperature: float = 0.8
    rm_steps: int = 40
    disc_steps: int = 30
    ppo_iters_per_round: int = 4
    val_slice: int = 64
    pref_pool_cap: int = 96   # keep only the freshest pairs; stale ones mislead
    studies_per_ppo_batch: int = 8  # rollout groups per iteration; baselines are per study
    human_fraction: float = 0.10
    human_timeout_s: float = 300.0
    human_poll_s: float = 0.2


def run_cgaft(gen: Generator, corpus: Corpus, oracle: ClinicianOracle,
              rounds: int, cfg: CgaftConfig | None = None, seed: int = 7,
              rm: RewardModel | None = None, disc: Discriminator | None = None,
              queue_dir=None, log_path=None,
              round_log_path=None) -> dict:
    """Interleaved preference collection, reward/discriminator updates and
    PPO, with per-round validation metrics.

    In human-log mode the lowest-margin fraction of candidate pairs is
    written to ``queue_dir`` for the feedback service and the loop blocks
    until their PreferenceRecords appear in ``log_path``; remaining pairs
    keep their simulated labels.
    """
    cfg = cfg or CgaftConfig()
    vocab = gen.vocab
    trunk_cfg = TrunkConfig(vocab_size=len(vocab), d_model=gen.cfg.d_model)
    frozen_encoder = make_frozen_image_encoder(gen)
    rm = rm or RewardModel.init(trunk_cfg, seed=seed + 1,
                                image_encoder=frozen_encoder)
    disc = disc or Discriminator.init(trunk_cfg, seed=seed + 2,
                                      image_encoder=frozen_encoder)
    policy = GeneratorPolicy(gen)
    train = corpus.split("train")
    val = corpus.split("val")[: cfg.val_slice]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x77)))
    pref_pool: list[PreferenceRecord] = []
    round_log: list[dict] = []

    for rnd in range(rounds):
        # (a) candidate pairs at sampling temperature
        pick = rng.integers(len(train), size=cfg.pairs_per_round)
        pair_studies = [train[i] for i in pick]
        images = [s.image for s in pair_studies]
        prompts = [s.prompt for s in pair_studies]
        rep_a, _ = gen.generate_batch(images, prompts, temperature=cfg.pair_temperature,
                                      seed=seed * 1000 + rnd * 2, max_new=cfg.ppo.max_new)
        rep_b, _ = gen.generate_batch(images, prompts, temperature=cfg.pair_temperature,
                                      seed=seed * 1000 + rnd * 2 + 1,
                                      max_new=cfg.ppo.max_new)

        # (b) preferences
        scored = []
        for i, s in enumerate(pair_studies):
            choice, margin = oracle.prefer(s, rep_a[i], rep_b[i], vocab)
            scored.append((margin, i, choice))
        if oracle.mode == "human-log":
            scored.sort(key=lambda x: x[0])
            n_human = max(1, int(len(scored) * cfg.human_fraction))
            human_set = {i for _, i, _ in scored[:n_human]}
            _collect_human_prefs(
                [(f"r{rnd}-p{i}", pair_studies[i], rep_a[i], rep_b[i])
                 for i in sorted(human_set)],
                vocab, cfg, queue_dir, log_path, pref_pool)
        else:
            human_set = set()
        for margin, i, choice in scored:
            if i in human_set:
                continue
            s = pair_studies[i]
            pref_pool.append(PreferenceRecord(
                study_id=s.study_id, prompt=vocab.decode_text(s.prompt.ids),
                report_a=vocab.decode_text(rep_a[i].ids),
                report_b=vocab.decode_text(rep_b[i].ids),
                choice=choice, rater_id="simulated-oracle",
                timestamp_ms=now_ms()))

        # (c) reward-model update on the freshest slice of the pool
        recent = pref_pool[-cfg.pref_pool_cap:]
        try:
            train_reward_model(rm, recent, corpus, vocab, steps=cfg.rm_steps,
                               lr=3e-4, seed=seed + rnd)
        except ValueError:
            pass  # all pairs degenerate this round; keep the old reward model

        # (d) discriminator update on fresh fakes
        d_pick = rng.integers(len(train), size=cfg.pairs_per_round)
        d_studies = [train[i] for i in d_pick]
        fakes, _ = gen.generate_batch([s.image for s in d_studies],
                                      [s.prompt for s in d_studies],
                                      temperature=cfg.pair_temperature,
                                      seed=seed * 777 + rnd, max_new=cfg.ppo.max_new)
        real = ([s.image for s in d_studies], [s.prompt for s in d_studies],
                [s.report for s in d_studies])
        fake = ([s.image for s in d_studies], [s.prompt for s in d_studies], fakes)
        d_stats = train_discriminator(disc, real, fake, steps=cfg.disc_steps,
                                      lr=3e-4, seed=seed + rnd)

        # (e) PPO iterations; each fills its rollout batch from a small
        # study group so the whitened batch baseline is per-study and the
        # reward model's arbitrary cross-study offsets cancel
        ppo_stats = {"mean_reward": 0.0, "kl": 0.0, "clip_frac": 0.0}
        for k in range(cfg.ppo_iters_per_round):
            p_pick = rng.integers(len(train), size=cfg.studies_per_ppo_batch)
            ppo_stats = ppo_iteration(policy, rm, disc,
                                      [train[i] for i in p_pick], cfg.ppo,
                                      seed=seed * 31 + rnd * 7 + k)

        # per-round validation
        val_reports, _ = gen.generate_batch([s.image for s in val],
                                            [s.prompt for s in val],
                                            temperature=None, seed=0,
                                            max_new=cfg.ppo.max_new)
        metric = evaluate_reports(val_reports, val, vocab)
        record = {
            "round": rnd,
            "mean_reward": round(ppo_stats["mean_reward"], 6),
            "kl": round(ppo_stats["kl"], 6),
            "clip_frac": round(ppo_stats["clip_frac"], 6),
            "macro_f1_14": round(metric.macro_f1_14, 4),
            "hallucination_rate": round(metric.hallucination_rate, 4),
            "disc_real_score": round(d_stats["real_score"], 4),
            "disc_fake_score": round(d_stats["fake_score"], 4),
        }
        round_log.append(record)
        if round_log_path is not None:
            with open(round_log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    return {"rm": rm, "disc": disc, "round_log": round_log,
            "preferences": pref_pool}


def _collect_human_prefs(pairs, vocab, cfg: CgaftConfig, queue_dir, log_path,
                         pref_pool: list[PreferenceRecord]) -> None:
    """Emit pair files then block until their records land in the log."""
    if queue_dir is None or log_path is None:
        raise FeedbackPendingError(
            "human-log mode needs a pair queue and preference log; start the "
            "feedback service (endpoints GET /api/next-pair, "
            "POST /api/preference, GET /api/stats) and pass its paths")
    wanted: dict[str, tuple] = {}
    for pair_id, study, a, b in pairs:
        write_pair_file(queue_dir, PendingPair(
            pair_id=pair_id, study_id=study.study_id,
            prompt=vocab.decode_text(study.prompt.ids),
            image_pgm_b64=encode_image_b64(study.image),
            report_a=vocab.decode_text(a.ids),
            report_b=vocab.decode_text(b.ids)))
        wanted[pair_id] = (study, a, b)
    deadline = time.monotonic() + cfg.human_timeout_s
    seen: set[str] = set()
    consumed = 0
    while wanted.keys() - seen:
        records = read_records(log_path)
        for rec in records[consumed:]:
            for pid, (study, a, b) in wanted.items():
                if pid in seen:
                    continue
                if (rec.study_id == study.study_id
                        and rec.report_a == vocab.decode_text(a.ids)
                        and rec.report_b == vocab.decode_text(b.ids)):
                    pref_pool.append(rec)
                    seen.add(pid)
                    break
        consumed = len(records)
        if wanted.keys() - seen:
            if time.monotonic() > deadline:
                missing = sorted(wanted.keys() - seen)
                raise FeedbackPendingError(
                    f"still waiting on {len(missing)} human preferences "
                    f"({missing[:3]}...); label them via the feedback service "
                    "(GET /api/next-pair, POST /api/preference)")
            time.sleep(cfg.human_poll_s)
