import math

import numpy as np
import pytest

import oracles
from rankforge import model as M
from rankforge.model import CheckpointError, ConfigError, ModelConfig, RankerModel


def tiny(variant="encdec_token_logit", **kw):
    base = dict(vocab_size=120, model_dim=8, num_heads=2, ff_dim=16, max_seq_len=12, head_variant=variant, seed=3)
    base.update(kw)
    return RankerModel.init(ModelConfig(**base))


def random_ids(rng, length, vocab=120):
    return rng.integers(5, vocab, size=length).tolist()


VARIANTS = [
    ("encdec_token_logit", "first"),
    ("enc_pool_dense", "first"),
    ("enc_pool_dense", "mean"),
    ("generation_baseline", "first"),
]


# ---------------------------------------------------------------- scalar reference


@pytest.mark.parametrize("variant,pooling", VARIANTS, ids=[f"{v}-{p}" for v, p in VARIANTS])
def test_forward_matches_scalar_loops(variant, pooling):
    m = tiny(variant, pooling=pooling, encoder_layers=2, decoder_layers=2)
    rng = np.random.default_rng(0)
    seqs = [random_ids(rng, int(n)) for n in rng.integers(1, 12, size=6)]
    got = m.scores(seqs)
    for s, g in zip(seqs, got):
        ref = oracles.transformer_score(m.params, m.config, s)
        assert abs(g - ref) <= 1e-10 * max(1.0, abs(ref))


def test_padding_does_not_change_scores():
    rng = np.random.default_rng(1)
    for variant, pooling in VARIANTS:
        m = tiny(variant, pooling=pooling)
        s = random_ids(rng, 5)
        alone = m.forward(np.array([s])).data[0]
        padded = m.forward(np.array([s + [0] * 6])).data[0]
        assert abs(alone - padded) <= 1e-12 * max(1.0, abs(alone))


def test_pooling_modes_agree_on_length_one():
    first = tiny("enc_pool_dense", pooling="first")
    mean = first.with_config(pooling="mean")
    for tok in (7, 50, 119):
        assert first.forward([tok]).data[0] == pytest.approx(mean.forward([tok]).data[0], rel=1e-14)


def test_batch_scoring_is_independent_per_sequence():
    rng = np.random.default_rng(2)
    for variant, pooling in VARIANTS:
        m = tiny(variant, pooling=pooling)
        seqs = [random_ids(rng, int(n)) for n in rng.integers(1, 12, size=8)]
        batched = M.score_list(m, seqs)
        singles = np.array([m.forward([s]).data[0] for s in seqs])
        np.testing.assert_allclose(batched, singles, rtol=1e-12, atol=1e-14)
        reordered = M.score_list(m, seqs[::-1])
        np.testing.assert_allclose(reordered, batched[::-1], rtol=1e-12, atol=1e-14)


def test_single_sequence_helpers():
    ids = [9, 10, 11]
    assert M.score_encdec(tiny(), ids) == tiny().forward([ids]).data[0]
    assert M.score_enc(tiny("enc_pool_dense"), ids) == tiny("enc_pool_dense").forward([ids]).data[0]
    with pytest.raises(ConfigError, match="not 'enc_pool_dense'"):
        M.score_enc(tiny(), ids)
    out = M.encode(tiny(), ids)
    assert out.states.shape == (1, 3, 8) and out.length == 3


# ---------------------------------------------------------------- generation baseline


def test_generation_score_values():
    assert M.generation_score(0.0, 0.0) == 0.5
    assert M.generation_score(3.0, 3.0) == 0.5
    assert M.generation_score(1.0, 0.0) == pytest.approx(0.731059, abs=1e-6)
    assert M.generation_score(1.0, 0.0) == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-15)


def test_generation_score_strictly_monotone_in_margin():
    rng = np.random.default_rng(3)
    # beyond |margin| ~ 36 the probability rounds to 0 or 1 in float64
    margins = np.sort(rng.uniform(-30, 30, size=1000))
    assert np.all(np.diff(margins) > 0)
    z_neg = rng.normal(0, 5, size=1000)
    scores = M.generation_score(margins + z_neg, z_neg)
    assert np.all(np.diff(scores) > 0)
    np.testing.assert_allclose(scores, 1 / (1 + np.exp(-margins)), rtol=1e-13)


def test_generation_model_score_is_probability_of_margin():
    m = tiny("generation_baseline")
    rng = np.random.default_rng(4)
    seqs = [random_ids(rng, 6) for _ in range(5)]
    margin = m.forward(M.pad_batch(seqs), quantity="margin").data
    np.testing.assert_allclose(m.scores(seqs), M.generation_score(margin, 0.0), rtol=1e-15)
    logits = m.vocab_logits(M.pad_batch(seqs)).data
    np.testing.assert_allclose(margin, logits[:, 3] - logits[:, 4], rtol=1e-10, atol=1e-12)


def test_target_token_logit_is_the_score():
    m = tiny()
    rng = np.random.default_rng(5)
    seqs = M.pad_batch([random_ids(rng, 7) for _ in range(4)])
    np.testing.assert_allclose(m.forward(seqs).data, m.vocab_logits(seqs).data[:, 15], rtol=1e-12)


def test_ranking_invariant_to_target_bias():
    m = tiny()
    rng = np.random.default_rng(6)
    seqs = [random_ids(rng, int(n)) for n in rng.integers(2, 12, size=20)]
    before = m.scores(seqs)
    m["lm.b"].data[m.config.target_token_id] += 123.0
    after = m.scores(seqs)
    np.testing.assert_array_equal(np.argsort(-before, kind="stable"), np.argsort(-after, kind="stable"))
    np.testing.assert_allclose(after - before, 123.0, rtol=1e-10)


# ---------------------------------------------------------------- config and params


def test_parameter_count_matches_shapes():
    for variant, pooling in VARIANTS:
        for layers in (1, 2, 3):
            cfg = ModelConfig(vocab_size=150, model_dim=16, num_heads=4, ff_dim=24, encoder_layers=layers,
                              decoder_layers=layers, head_variant=variant, pooling=pooling)
            by_shapes = sum(int(np.prod(s)) for s in M.parameter_shapes(cfg).values())
            assert M.parameter_count(cfg) == by_shapes == RankerModel.init(cfg).num_parameters()


def test_tiny_preset_count_by_hand():
    cfg = ModelConfig.preset("tiny", 200, max_seq_len=16)
    d, f, v, l = 32, 64, 200, 16
    enc = (4 * d * d) + (2 * d * f) + 4 * d
    dec = (8 * d * d) + (2 * d * f) + 6 * d
    assert M.parameter_count(cfg) == v * d + l * d + enc + 2 * d + d + dec + 2 * d + d * v + v


def test_init_deterministic_and_seed_sensitive():
    assert tiny().fingerprint() == tiny().fingerprint()
    assert tiny().fingerprint() != tiny(seed=4).fingerprint()


def test_init_scale_bounds():
    m = tiny(init_scale=0.5)
    assert np.max(np.abs(m["enc0.attn.wq"].data)) <= 0.5 / math.sqrt(8)
    assert np.max(np.abs(m["tok_emb"].data)) <= 0.5
    np.testing.assert_array_equal(m["enc0.ln1.g"].data, 1.0)
    np.testing.assert_array_equal(m["enc0.ln1.b"].data, 0.0)


@pytest.mark.parametrize(
    "kw,match",
    [
        (dict(model_dim=10, num_heads=4), "divisible"),
        (dict(head_variant="bert"), "head_variant"),
        (dict(pooling="max"), "pooling"),
        (dict(target_token_id=200), "reserved"),
        (dict(target_token_id=0), "reserved"),
        (dict(decoder_layers=0), "decoder_layers"),
        (dict(pos_token_id=4), "differ"),
    ],
)
def test_config_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        ModelConfig(vocab_size=120, **kw)


def test_encoder_only_may_skip_decoder():
    m = tiny("enc_pool_dense", decoder_layers=0)
    assert "lm.w" not in m.params and "score.w" in m.params
    with pytest.raises(ConfigError, match="no decoder"):
        m.decode(m.encode([5, 6]))


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        ModelConfig.preset("huge", 100)


def test_bad_inputs():
    m = tiny()
    with pytest.raises(ValueError, match="outside vocabulary"):
        m.forward([[5, 120]])
    with pytest.raises(ValueError, match="max_seq_len"):
        m.forward([list(range(5, 20))])
    with pytest.raises(ValueError, match="empty"):
        M.pad_batch([])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    for variant, pooling in VARIANTS:
        m = tiny(variant, pooling=pooling)
        m.save(tmp_path / "a.ckpt")
        back = RankerModel.load(tmp_path / "a.ckpt", m.config)
        back.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert back.fingerprint() == m.fingerprint()
        for name in m.params:
            assert back[name].data.tobytes() == m[name].data.tobytes()


def test_checkpoint_errors(tmp_path):
    m = tiny()
    blob = m.to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        RankerModel.from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        RankerModel.from_bytes(blob[:-16])
    with pytest.raises(CheckpointError, match="differs"):
        RankerModel.from_bytes(blob, ModelConfig(vocab_size=120, model_dim=8, num_heads=2, ff_dim=16,
                                                 max_seq_len=12, seed=9))


def test_parameter_set_mismatch():
    m = tiny()
    params = {n: p.data for n, p in m.params.items()}
    params.pop("lm.b")
    with pytest.raises(CheckpointError, match="lm.b"):
        RankerModel(m.config, params)
    params = {n: p.data for n, p in m.params.items()}
    params["lm.b"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="shape"):
        RankerModel(m.config, params)


def test_forward_bit_identical_across_instances():
    rng = np.random.default_rng(7)
    seqs = [random_ids(rng, int(n)) for n in rng.integers(1, 12, size=10)]
    for variant, pooling in VARIANTS:
        a = tiny(variant, pooling=pooling).scores(seqs)
        b = tiny(variant, pooling=pooling).scores(seqs)
        assert a.tobytes() == b.tobytes()
