"""Trainer mechanics: losses, PPO arithmetic, oracle, preference plumbing."""

import numpy as np
import pytest

from minicxr import autodiff as ad
from minicxr.autodiff import Tape, constant, param
from minicxr.generator import Generator
from minicxr.lm import ModelConfig
from minicxr.preferences import PreferenceRecord, now_ms
from minicxr.synthetic import build_corpus
from minicxr.trainer import (CgaftConfig, ClinicianOracle, Discriminator,
                             FeedbackPendingError, GeneratorPolicy, PPOConfig,
                             RewardModel, TrunkConfig, build_blended_reward,
                             build_training_batch, clipped_surrogate,
                             discriminator_loss, heldout_mle_nll, ppo_iteration,
                             run_cgaft, train_discriminator, train_joint_mle,
                             train_reward_model, whiten)
from minicxr.vision import VisionConfig
from minicxr.vocab import BOS, EOS, PAD, SEP, TokenSeq, Vocabulary

VOCAB = Vocabulary.default()
TINY_TRUNK = TrunkConfig(d_model=32, n_layers=1, n_heads=2)
TINY_CFG = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_context=64,
                       vocab_size=256)
TINY_VCFG = VisionConfig(d_model=32, n_layers=1)


@pytest.fixture(scope="module")
def corpus():
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_corpus(120, seed=3, vocab=VOCAB)


def tiny_generator(seed=0):
    return Generator.init(VOCAB, seed=seed, cfg=TINY_CFG, vcfg=TINY_VCFG)


# -- PPO arithmetic ------------------------------------------------------------

def test_clipped_surrogate_worked_examples():
    # r=1.5, eps=0.2, A=1 -> min(1.5, 1.2) = 1.2
    out = clipped_surrogate(param([[1.5]]), constant([[1.0]]), 0.2)
    assert out.values[0, 0] == pytest.approx(1.2, abs=1e-12)
    # r=0.5, eps=0.2, A=-1 -> min(-0.5, -0.8) = -0.8
    out2 = clipped_surrogate(param([[0.5]]), constant([[-1.0]]), 0.2)
    assert out2.values[0, 0] == pytest.approx(-0.8, abs=1e-12)


def test_whiten_mean_zero_unit_variance():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(33) * 4 + 2
    a = whiten(r)
    assert abs(a.mean()) < 1e-9
    assert abs(a.std() - 1.0) < 1e-9
    raw = whiten(r, enabled=False)
    assert abs(raw.mean()) < 1e-9
    assert abs(raw.std() - r.std()) < 1e-12


def test_whiten_single_sample():
    a = whiten(np.array([5.0]))
    assert a[0] == 0.0


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip_epsilon=0.0)
    with pytest.raises(ValueError):
        PPOConfig(kl_coeff=-0.1)
    with pytest.raises(ValueError):
        PPOConfig(disc_blend=1.5)


def test_ppo_first_step_ratio_is_one_and_clip_frac_bounds(corpus):
    gen = tiny_generator(1)
    policy = GeneratorPolicy(gen)
    cfg = PPOConfig(rollouts=6, max_new=10, epochs=2, lr=1e-3)
    stats = ppo_iteration(policy, None, None, corpus.split("train")[:6], cfg,
                          seed=1, reward_fn=lambda i, p, r: np.arange(len(r), dtype=float))
    assert stats["first_step_ratio_max_dev"] == 0.0
    assert 0.0 <= stats["clip_frac"] <= 1.0
    assert stats["excluded_tokens"] == 0
    assert not stats["diverged"]


def test_ppo_huge_epsilon_zero_clip_fraction(corpus):
    gen = tiny_generator(2)
    policy = GeneratorPolicy(gen)
    cfg = PPOConfig(clip_epsilon=0.999, rollouts=4, max_new=8, epochs=1)
    stats = ppo_iteration(policy, None, None, corpus.split("train")[:4], cfg,
                          seed=2, reward_fn=lambda i, p, r: np.ones(len(r)))
    # first (and only) epoch has ratio == 1 everywhere, so nothing clips
    assert stats["clip_frac"] == 0.0


def test_ppo_alpha_one_never_touches_discriminator(corpus):
    gen = tiny_generator(3)
    rm = RewardModel.init(TINY_TRUNK, seed=5)
    disc = Discriminator.init(TINY_TRUNK, seed=6)
    policy = GeneratorPolicy(gen)
    cfg = PPOConfig(rollouts=4, max_new=8, epochs=1, disc_blend=1.0)
    ppo_iteration(policy, rm, disc, corpus.split("train")[:4], cfg, seed=3)
    for p in disc.params.values():
        assert p._grad is None or not p._grad.any()


def test_blended_reward_composition(corpus):
    studies = corpus.split("train")[:3]
    images = [s.image for s in studies]
    prompts = [s.prompt for s in studies]
    reports = [s.report for s in studies]
    rm = RewardModel.init(TINY_TRUNK, seed=1)
    disc = Discriminator.init(TINY_TRUNK, seed=2)
    r_only = build_blended_reward(rm, None, 1.0)(images, prompts, reports)
    assert np.allclose(r_only, rm.scores(images, prompts, reports))
    d_only = build_blended_reward(None, disc, 0.0)(images, prompts, reports)
    assert np.allclose(d_only, np.log(disc.scores(images, prompts, reports)))
    both = build_blended_reward(rm, disc, 0.7)(images, prompts, reports)
    assert np.allclose(both, 0.7 * r_only + 0.3 * d_only)


# -- discriminator --------------------------------------------------------------

def _triple(corpus, n, fake=False):
    studies = corpus.split("train")[:n]
    reports = [s.report for s in studies]
    if fake:
        reports = [TokenSeq(VOCAB.encode_text("gadget is present .").ids + (EOS,))
                   for _ in studies]
    return ([s.image for s in studies], [s.prompt for s in studies], reports)


def test_uninformative_discriminator_loss_is_2ln2(corpus):
    disc = Discriminator.init(TINY_TRUNK, seed=0)
    disc.params["d.head_w"].values[...] = 0.0
    disc.params["d.head_b"].values[...] = 0.0
    real = _triple(corpus, 4)
    fake = _triple(corpus, 4, fake=True)
    loss = discriminator_loss(disc, real, fake)
    assert loss.values == pytest.approx(2 * np.log(2), abs=1e-12)


def test_discriminator_scores_strictly_inside_unit_interval(corpus):
    disc = Discriminator.init(TINY_TRUNK, seed=1)
    imgs, prompts, reports = _triple(corpus, 5)
    s = disc.scores(imgs, prompts, reports)
    assert np.all((s > 0) & (s < 1))


def test_discriminator_label_swap_symmetry(corpus):
    """Swapping class labels equals negating the scalar head: the loss is
    identical, trunk gradients match, and head gradients flip sign."""
    real = _triple(corpus, 3)
    fake = _triple(corpus, 3, fake=True)

    d1 = Discriminator.init(TINY_TRUNK, seed=9)
    with Tape() as tape:
        loss1 = discriminator_loss(d1, real, fake)
    tape.backward(loss1)
    grads1 = {k: p.grad.copy() for k, p in d1.params.items()}

    d2 = Discriminator.init(TINY_TRUNK, seed=9)
    d2.params["d.head_w"].values = -d2.params["d.head_w"].values
    d2.params["d.head_b"].values = -d2.params["d.head_b"].values
    with Tape() as tape2:
        loss2 = discriminator_loss(d2, fake, real)   # labels swapped
    tape2.backward(loss2)

    assert loss2.values == pytest.approx(float(loss1.values), abs=1e-12)
    for k, p in d2.params.items():
        if k.startswith("d.head_"):
            assert np.allclose(p.grad, -grads1[k], atol=1e-12)
        else:
            assert np.allclose(p.grad, grads1[k], atol=1e-12)


def test_discriminator_empty_batch_rejected(corpus):
    disc = Discriminator.init(TINY_TRUNK, seed=2)
    with pytest.raises(ValueError):
        train_discriminator(disc, ([], [], []), _triple(corpus, 2, True), steps=1)


def test_discriminator_imbalance_warns(corpus):
    disc = Discriminator.init(TINY_TRUNK, seed=3)
    with pytest.warns(UserWarning, match="imbalance"):
        train_discriminator(disc, _triple(corpus, 24), _triple(corpus, 2, True),
                            steps=1, batch_size=2)


# -- reward model ----------------------------------------------------------------

def _pref(study, a_text, b_text, choice="A"):
    return PreferenceRecord(study_id=study.study_id,
                            prompt=VOCAB.decode_text(study.prompt.ids),
                            report_a=a_text, report_b=b_text, choice=choice,
                            rater_id="t", timestamp_ms=now_ms())


def test_reward_model_single_pair_convergence(corpus):
    study = corpus.split("train")[0]
    rm = RewardModel.init(TINY_TRUNK, seed=4)
    good = VOCAB.decode_text(study.report.ids)
    bad = "gadget is present ."
    rec = _pref(study, good, bad, "A")
    train_reward_model(rm, [rec], corpus, VOCAB, steps=60, lr=1e-2, seed=1)
    chosen = TokenSeq(VOCAB.encode_text(good).ids + (EOS,))
    rejected = TokenSeq(VOCAB.encode_text(bad).ids + (EOS,))
    s = rm.scores([study.image] * 2, [study.prompt] * 2, [chosen, rejected])
    assert s[0] > s[1]


def test_reward_model_no_pairs_errors(corpus):
    rm = RewardModel.init(TINY_TRUNK, seed=5)
    with pytest.raises(ValueError):
        train_reward_model(rm, [], corpus, VOCAB, steps=1)


def test_reward_model_degenerate_pairs_skipped(corpus):
    study = corpus.split("train")[0]
    rm = RewardModel.init(TINY_TRUNK, seed=6)
    same = "no acute findings ."
    recs = [_pref(study, same, same, "A"),
            _pref(study, "cardiomegaly is present .", same, "A"),
            _pref(study, same, same, "skip")]
    stats = train_reward_model(rm, recs, corpus, VOCAB, steps=2, seed=2)
    assert stats["skipped"] == 2


def test_reward_head_bias_shift_invariance(corpus):
    study = corpus.split("train")[0]
    rm = RewardModel.init(TINY_TRUNK, seed=7)
    a = TokenSeq(VOCAB.encode_text("cardiomegaly is present .").ids + (EOS,))
    b = TokenSeq(VOCAB.encode_text("no acute findings .").ids + (EOS,))

    def pair_loss():
        diff = ad.sub(rm.logits([study.image], [study.prompt], [a]),
                      rm.logits([study.image], [study.prompt], [b]))
        return -float(ad.logsigmoid(diff).values[0, 0])

    before = pair_loss()
    rm.params["rm.head_b"].values += 17.5
    assert pair_loss() == pytest.approx(before, abs=1e-9)


# -- joint MLE --------------------------------------------------------------------

def test_training_batch_masks_only_report_positions(corpus):
    studies = corpus.split("train")[:2]
    inputs, targets, mask = build_training_batch(studies)
    prefix = 2 + len(studies[0].prompt.ids)
    assert inputs[0, 0] == BOS
    assert inputs[0, prefix - 1] == SEP
    assert not mask[:, :prefix - 1].any()
    for i, s in enumerate(studies):
        assert mask[i].sum() == len(s.report.ids)


def test_mle_zero_steps_is_noop(corpus):
    gen = tiny_generator(4)
    before = gen.clone_values()
    losses = train_joint_mle(gen, corpus.split("train")[:4], steps=0)
    assert losses == []
    for k, v in before.items():
        assert np.array_equal(gen.params[k].values, v)


def test_mle_empty_corpus_errors():
    with pytest.raises(ValueError):
        train_joint_mle(tiny_generator(5), [], steps=1)


def test_mle_loss_decreases(corpus):
    gen = tiny_generator(6)
    studies = corpus.split("train")[:8]
    losses = train_joint_mle(gen, studies, steps=30, batch_size=4, lr=3e-3, seed=1)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


# -- oracle ------------------------------------------------------------------------

def test_oracle_scoring_and_preference(corpus):
    oracle = ClinicianOracle()
    study = corpus.split("train")[0]
    truth_text = VOCAB.decode_text(study.report.ids)
    perfect = VOCAB.encode_text(truth_text)
    present = study.findings.present_indices()
    from minicxr.lexicon import CATALOG
    absent = next(i for i in range(14) if i not in present)
    fabricated = VOCAB.encode_text(
        truth_text + f" {CATALOG[absent].name} is present .")
    assert oracle.score(study, perfect, VOCAB) == pytest.approx(1.0)
    assert oracle.score(study, fabricated, VOCAB) < oracle.score(study, perfect, VOCAB)
    choice, margin = oracle.prefer(study, perfect, fabricated, VOCAB)
    assert choice == "A" and margin > 0
    # determinism
    assert oracle.prefer(study, perfect, fabricated, VOCAB) == (choice, margin)
    # ties break toward the shorter report
    longer = VOCAB.encode_text(truth_text + " no gadget .")
    c2, m2 = oracle.prefer(study, longer, perfect, VOCAB)
    assert (c2, m2) == ("B", 0.0)
    # identical reports are a skip
    assert oracle.prefer(study, perfect, perfect, VOCAB)[0] == "skip"


# -- the loop ----------------------------------------------------------------------

def test_run_cgaft_zero_rounds_is_noop(corpus):
    gen = tiny_generator(7)
    before = gen.clone_values()
    result = run_cgaft(gen, corpus, ClinicianOracle(), rounds=0)
    assert result["round_log"] == []
    for k, v in before.items():
        assert np.array_equal(gen.params[k].values, v)


def test_run_cgaft_one_round_smoke(tmp_path, corpus):
    gen = tiny_generator(8)
    cfg = CgaftConfig(ppo=PPOConfig(rollouts=4, max_new=10, epochs=1, lr=1e-3),
                      pairs_per_round=4, rm_steps=2, disc_steps=2,
                      ppo_iters_per_round=1, val_slice=4)
    log_path = tmp_path / "round_log.jsonl"
    result = run_cgaft(gen, corpus, ClinicianOracle(), rounds=1, cfg=cfg,
                       seed=3, round_log_path=log_path)
    assert len(result["round_log"]) == 1
    rec = result["round_log"][0]
    for key in ("round", "mean_reward", "kl", "clip_frac", "macro_f1_14",
                "hallucination_rate"):
        assert key in rec
    assert log_path.exists()
    import json
    assert json.loads(log_path.read_text().splitlines()[0])["round"] == 0
    assert len(result["preferences"]) == 4


def test_human_log_mode_requires_queue(corpus):
    gen = tiny_generator(9)
    cfg = CgaftConfig(ppo=PPOConfig(rollouts=4, max_new=8, epochs=1),
                      pairs_per_round=2, val_slice=2, human_timeout_s=0.1)
    with pytest.raises(FeedbackPendingError, match="/api/next-pair"):
        run_cgaft(gen, corpus, ClinicianOracle(mode="human-log"), rounds=1,
                  cfg=cfg, seed=4)


def test_reward_model_separable_preferences_above_090(corpus):
    """Reference-vs-shuffled preferences are separable; training-pair
    accuracy must clear 0.9."""
    studies = corpus.split("train")[:24]
    rng = np.random.default_rng(8)
    prefs = []
    for s in studies:
        good = VOCAB.decode_text(s.report.ids)
        words = good.split()
        bad = " ".join(words[i] for i in rng.permutation(len(words)))
        a_first = bool(rng.random() < 0.5)
        prefs.append(PreferenceRecord(
            study_id=s.study_id, prompt=VOCAB.decode_text(s.prompt.ids),
            report_a=good if a_first else bad, report_b=bad if a_first else good,
            choice="A" if a_first else "B", rater_id="oracle",
            timestamp_ms=now_ms()))
    rm = RewardModel.init(TINY_TRUNK, seed=3)
    stats = train_reward_model(rm, prefs, corpus, VOCAB, steps=120,
                               batch_size=8, lr=1e-3, seed=4)
    assert stats["accuracy"] > 0.9


def test_discriminator_separable_set_auc_above_090(corpus):
    studies = corpus.split("train")[:32]
    rng = np.random.default_rng(5)

    def shuffled(report):
        words = VOCAB.decode_text(report.ids).split()
        perm = rng.permutation(len(words))
        return TokenSeq(VOCAB.encode_words([words[i] for i in perm]).ids + (EOS,))

    real = ([s.image for s in studies], [s.prompt for s in studies],
            [s.report for s in studies])
    fake = (real[0], real[1], [shuffled(s.report) for s in studies])
    disc = Discriminator.init(TINY_TRUNK, seed=1)
    train_discriminator(disc, real, fake, steps=150, batch_size=12, lr=1e-3, seed=2)
    rs = disc.scores(*real)
    fs = disc.scores(*fake)
    auc = np.mean([[float(r > f) + 0.5 * float(r == f) for f in fs] for r in rs])
    assert auc > 0.9, auc
