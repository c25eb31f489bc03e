"""The full report generator: visual encoder + gated fusion + decoder.

One flat parameter dict holds the three collections under the "vis.",
"fus." and "lm." prefixes so checkpoints, optimizers, and the policy
snapshot machinery all see a single object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion, lm, vision
from .autodiff import DiffArray
from .checkpoint import load_checkpoint, save_checkpoint
from .lm import ModelConfig
from .synthetic import StudyImage
from .vision import VisionConfig
from .vocab import BOS, SEP, TokenSeq, Vocabulary

DEFAULT_MAX_NEW = 56


@dataclass
class Generator:
    params: dict[str, DiffArray]
    cfg: ModelConfig
    vcfg: VisionConfig
    vocab: Vocabulary

    @classmethod
    def init(cls, vocab: Vocabulary, seed: int = 0,
             cfg: ModelConfig | None = None,
             vcfg: VisionConfig | None = None) -> "Generator":
        cfg = cfg or ModelConfig(vocab_size=len(vocab))
        vcfg = vcfg or VisionConfig(d_model=cfg.d_model)
        params = {}
        params.update(vision.init_vision_params(vcfg, seed))
        params.update(fusion.init_fusion_params(cfg.d_model, seed, n_layers=cfg.n_layers))
        params.update(lm.init_decoder_params(cfg, seed))
        return cls(params, cfg, vcfg, vocab)

    def clone_values(self) -> dict[str, np.ndarray]:
        """Frozen value snapshot (for the old-policy side of ratio updates)."""
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].values = v.copy()

    # -- conditioning -------------------------------------------------------

    def encode_image(self, image: StudyImage | np.ndarray) -> DiffArray:
        pixels = image.pixels if isinstance(image, StudyImage) else np.asarray(image)
        return vision.encode_pixels(ad.constant(pixels), self.params, self.vcfg).E_V

    def encode_images(self, images: list[StudyImage | np.ndarray]) -> DiffArray:
        stack = np.stack([im.pixels if isinstance(im, StudyImage) else np.asarray(im)
                          for im in images])
        return vision.encode_pixels(ad.constant(stack), self.params, self.vcfg).E_V

    def prefix_ids(self, prompt: TokenSeq,
                   extra: TokenSeq | None = None) -> np.ndarray:
        ids = (BOS,) + prompt.ids + (SEP,)
        if extra is not None:
            ids = ids + extra.ids
        return np.asarray(ids, dtype=np.int64)

    # -- decoding -----------------------------------------------------------

    def generate(self, image: StudyImage | np.ndarray | None, prompt: TokenSeq,
                 prefix_tokens: TokenSeq | None = None,
                 temperature: float | None = None, seed: int = 0,
                 max_new: int | None = None,
                 return_logprobs: bool = False):
        """Produce report tokens (kept prefix + continuation, EOS included).

        ``image`` may be None for unconditioned decoding. ``prefix_tokens``
        are already-accepted report tokens the continuation must extend.
        """
        reports, lps = self.generate_batch(
            [image], [prompt],
            prefix_tokens=None if prefix_tokens is None else [prefix_tokens],
            temperature=temperature, seed=seed, max_new=max_new)
        if return_logprobs:
            return reports[0], lps[0]
        return reports[0]

    def generate_batch(self, images, prompts: list[TokenSeq],
                       prefix_tokens: list[TokenSeq] | None = None,
                       temperature: float | None = None, seed: int = 0,
                       max_new: int | None = None):
        """Batched decoding; prefixes must share one length.

        Returns (reports, logprob lists) where each report is the kept
        prefix tokens plus the generated continuation.
        """
        lead = [self.prefix_ids(p, None if prefix_tokens is None else prefix_tokens[i])
                for i, p in enumerate(prompts)]
        lengths = {len(x) for x in lead}
        if len(lengths) != 1:
            raise ValueError("batched decoding needs equal-length prefixes")
        n0 = lengths.pop()
        cap = self.cfg.max_context - n0
        budget = min(max_new if max_new is not None else DEFAULT_MAX_NEW, cap)
        visuals = None
        if images[0] is not None:
            visuals = self.encode_images(list(images)).values
        toks, lps = lm.generate_batch(self.params, self.cfg, np.stack(lead), budget,
                                      temperature=temperature, seed=seed,
                                      visuals=visuals)
        reports = []
        for i in range(len(prompts)):
            kept = () if prefix_tokens is None else prefix_tokens[i].ids
            reports.append(TokenSeq(kept + tuple(toks[i])))
        return reports, lps

    # -- persistence --------------------------------------------------------

    def save(self, path, tag: str) -> None:
        save_checkpoint(path, self.params, tag=tag)

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocabulary,
                        cfg: ModelConfig | None = None,
                        vcfg: VisionConfig | None = None) -> tuple["Generator", str]:
        params, tag = load_checkpoint(path)
        cfg = cfg or ModelConfig(vocab_size=len(vocab))
        vcfg = vcfg or VisionConfig(d_model=cfg.d_model)
        return cls(params, cfg, vcfg, vocab), tag
