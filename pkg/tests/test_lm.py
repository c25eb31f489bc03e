"""Decoder stack: causality, attention algebra, training, generation."""

import numpy as np
import pytest

from minicxr import autodiff as ad
from minicxr.autodiff import Tape, constant, param
from minicxr.lm import (ContextOverflowError, DecoderStack, ModelConfig,
                        MustStartWithBOSError, causal_mask, corpus_nll,
                        forward_from_embeddings, forward_ids, lm_pretrain,
                        lm_sequence, multi_head_attention, self_attention_block)
from minicxr.vocab import BOS, EOS, TokenSeq, Vocabulary

CFG = ModelConfig(d_model=32, n_layers=2, n_heads=4, max_context=24, vocab_size=40)
VOCAB = Vocabulary.default()


def _stack(seed=0, cfg=CFG):
    return DecoderStack.init(cfg, seed)


def test_config_head_geometry():
    assert CFG.n_heads * CFG.d_k == CFG.d_model
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)


def test_single_token_attention_weight_is_one():
    stack = _stack()
    x = param(np.random.default_rng(0).standard_normal((1, CFG.d_model)))
    _, weights = self_attention_block(x, stack.params, "lm.l0.", CFG.n_heads,
                                      CFG.max_context, return_weights=True)
    assert np.allclose(weights.values, 1.0)


def test_attention_rows_sum_to_one():
    stack = _stack(3)
    x = param(np.random.default_rng(1).standard_normal((7, CFG.d_model)))
    _, weights = self_attention_block(x, stack.params, "lm.l1.", CFG.n_heads,
                                      CFG.max_context, return_weights=True)
    assert weights.values.shape == (CFG.n_heads, 7, 7)
    sums = weights.values.sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) < 1e-6)


def test_causal_mask_shape():
    m = causal_mask(4)
    assert m[0, 1] and m[2, 3] and not m[3, 0] and not m[1, 1]


def test_causality_by_perturbation():
    stack = _stack(5)
    rng = np.random.default_rng(2)
    ids = rng.integers(4, 40, size=(1, 9))
    base = stack.logits(ids).values
    for j in range(3, 9):
        mutated = ids.copy()
        mutated[0, j] = (mutated[0, j] + 7) % 36 + 4
        out = stack.logits(mutated).values
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.array_equal(out[0, j:], base[0, j:])


def test_causality_by_autodiff():
    stack = _stack(6)
    rng = np.random.default_rng(3)
    x = param(rng.standard_normal((8, CFG.d_model)))
    i = 4
    with Tape() as tape:
        logits = forward_from_embeddings(x, stack.params, CFG)
        target = ad.sum_all(ad.slice_last(ad.transpose_last2(logits), i, i + 1))
    tape.backward(target)
    for j in range(8):
        grad_norm = np.abs(x.grad[j]).max()
        if j > i:
            assert grad_norm == 0.0, j
    assert np.abs(x.grad[i]).max() > 0


def test_context_overflow():
    stack = _stack()
    ids = np.zeros((1, CFG.max_context + 1), dtype=np.int64)
    ids[0, 0] = BOS
    with pytest.raises(ContextOverflowError):
        stack.logits(ids)


def test_generate_requires_bos():
    stack = _stack()
    with pytest.raises(MustStartWithBOSError):
        stack.generate(TokenSeq(()), max_new=3)
    with pytest.raises(MustStartWithBOSError):
        stack.generate(TokenSeq((5, 6)), max_new=3)


def test_generate_zero_new_tokens_is_noop():
    stack = _stack()
    prefix = TokenSeq((BOS, 5, 6))
    out = stack.generate(prefix, max_new=0)
    assert out.ids == prefix.ids


def test_greedy_generation_deterministic():
    stack = _stack(9)
    prefix = TokenSeq((BOS, 10, 11))
    a = stack.generate(prefix, max_new=8)
    b = stack.generate(prefix, max_new=8)
    assert a.ids == b.ids


def test_sampled_generation_deterministic_given_seed():
    stack = _stack(9)
    prefix = TokenSeq((BOS, 10, 11))
    a = stack.generate(prefix, max_new=8, temperature=0.9, seed=4)
    b = stack.generate(prefix, max_new=8, temperature=0.9, seed=4)
    c = stack.generate(prefix, max_new=8, temperature=0.9, seed=5)
    assert a.ids == b.ids
    assert a.ids != c.ids or True  # different seeds may rarely coincide


def test_generation_logprobs_match_teacher_forcing():
    stack = _stack(12)
    prefix = TokenSeq((BOS, 7, 8))
    out, lps = stack.generate(prefix, max_new=6, return_logprobs=True)
    ids = np.asarray([out.ids], dtype=np.int64)
    logits = stack.logits(ids).values[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    gen_start = len(prefix.ids)
    for k, lp in enumerate(lps):
        pos = gen_start + k - 1   # logits at pos predict token pos+1
        tok = out.ids[gen_start + k]
        assert abs(logp[pos, tok] - lp) < 1e-9


def test_pretrain_zero_steps_unchanged():
    stack = _stack(1)
    before = {k: p.values.copy() for k, p in stack.params.items()}
    seqs = [lm_sequence(TokenSeq((10, 11, EOS)))]
    trained, losses = lm_pretrain(seqs, steps=0, cfg=CFG, stack=stack)
    assert losses == []
    for k in before:
        assert np.array_equal(trained.params[k].values, before[k])


def test_pretrain_memorizes_single_sequence():
    tok_a = VOCAB.id_of("edema")
    seq = lm_sequence(TokenSeq((tok_a, tok_a, tok_a, EOS)))
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, max_context=16,
                      vocab_size=256)
    stack, losses = lm_pretrain([seq], steps=200, cfg=cfg, seed=7, lr=3e-3)
    assert corpus_nll(stack, [seq]) < 0.1
    out = stack.generate(TokenSeq((BOS,)), max_new=6)
    assert out.ids[:5] == (BOS, tok_a, tok_a, tok_a, EOS)


def test_pretrain_empty_corpus():
    with pytest.raises(ValueError):
        lm_pretrain([], steps=1, cfg=CFG)


def test_attention_mask_blocks_keys():
    stack = _stack(4)
    rng = np.random.default_rng(8)
    x = param(rng.standard_normal((1, 5, CFG.d_model)))
    attn_mask = np.zeros((1, 5, 5), dtype=bool)
    attn_mask[:, :, 4] = True   # key 4 invisible to everyone
    out_m = multi_head_attention(x, stack.params, "lm.l0.", CFG.n_heads,
                                 causal=False, attn_mask=attn_mask)
    x2 = param(np.concatenate([x.values[:, :4], rng.standard_normal((1, 1, CFG.d_model))], axis=1))
    out_m2 = multi_head_attention(x2, stack.params, "lm.l0.", CFG.n_heads,
                                  causal=False, attn_mask=attn_mask)
    # masked key's content cannot influence other rows
    assert np.allclose(out_m.values[0, :4], out_m2.values[0, :4])


def test_pretrain_beats_uniform_and_heldout_improves():
    from minicxr.synthetic import build_corpus
    from minicxr.vocab import Vocabulary
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corpus = build_corpus(200, seed=7, vocab=VOCAB)
    seqs = [lm_sequence(s.report) for s in corpus.split("train")]
    held = [lm_sequence(s.report) for s in corpus.split("val")]
    cfg = ModelConfig(vocab_size=len(VOCAB))
    initial = corpus_nll(DecoderStack.init(cfg, 7), held)
    stack, losses = lm_pretrain(seqs, steps=300, cfg=cfg, seed=7, lr=1e-3)
    final = corpus_nll(stack, held)
    assert final < np.log(len(VOCAB))   # beats the uniform baseline
    assert final < initial              # held-out NLL strictly improves
    # 50-step moving average is non-increasing up to small batch jitter
    ma = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(ma) <= 0.02)
