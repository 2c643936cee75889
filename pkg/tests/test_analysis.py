import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import positional_gap_loops
from q4fg.analysis import (
    PositionalStats,
    emit_report,
    parse_report,
    positional_activation_range,
    positional_gaps,
    positional_perplexity,
    positional_stats_from_nll,
    probe_name,
    quant_error_report,
    range_stats,
)
from q4fg.exceptions import ConfigError, DimensionError
from q4fg.model import ModelConfig, QuantStrategy, build_model, forward, perplexity
from q4fg.quant import PASSTHROUGH, activation_scheme, weight_scheme


def lm(vocab=11, ln="pre", seed=0):
    return build_model(ModelConfig("decoder_only", 0, 2, 16, 2, ln_placement=ln, vocab_size=vocab, max_seq=8), seed=seed)


def test_hand_built_gaps():
    a = np.array([[[1.0, -2.0, 0.5], [3.0, 3.0, 3.0]],
                  [[0.0, 4.0, 1.0], [-1.0, 1.0, 0.0]]])
    assert positional_gaps(a).tolist() == [(3.0 + 4.0) / 2, (0.0 + 2.0) / 2]
    assert positional_gaps(np.full((2, 3, 4), 7.0)).tolist() == [0.0, 0.0, 0.0]


def test_single_batch_has_zero_std():
    s = range_stats([np.random.default_rng(0).standard_normal((2, 5, 4))])
    assert np.all(s.std == 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-100, 100)), st.randoms())
def test_gap_nonnegative_and_feature_permutation_invariant(a, rnd):
    perm = list(range(a.shape[-1]))
    rnd.shuffle(perm)
    g = positional_gaps(a)
    assert np.all(g >= 0)
    assert np.array_equal(g, positional_gaps(a[..., perm]))


def test_model_positional_range_matches_brute_force():
    m = lm()
    batches = [np.random.default_rng(s).integers(0, 11, size=(3, 8)) for s in range(4)]
    stats = positional_activation_range(m, batches, 1, "mlp_out")
    per_batch = np.stack([positional_gap_loops(forward(m, b, probe=True).probes["decoder.1.mlp.fc2"]) for b in batches])
    assert np.array_equal(stats.mean, per_batch.mean(axis=0))
    assert np.allclose(stats.std, per_batch.std(axis=0), rtol=0, atol=1e-12)
    assert len(stats) == 8


def test_probe_names_and_errors():
    m = lm()
    assert probe_name(m, 0, "qkv") == "decoder.0.self_attn.qkv"
    assert probe_name(m, 1, "mlp_intermediate") == "decoder.1.mlp.fc1"
    with pytest.raises(ConfigError):
        probe_name(m, 0, "layernorm")
    with pytest.raises(ConfigError):
        probe_name(m, 5, "mlp_out")


def test_uniform_model_positional_ppl_is_vocab():
    m = lm(vocab=7)
    m.params["head.weight"].data[:] = 0
    m.params["head.bias"].data[:] = 0
    s = positional_perplexity(m, np.arange(90) % 7)
    assert np.allclose(s.mean, 7.0, rtol=1e-12) and np.allclose(s.std, 0.0, atol=1e-12)


@pytest.mark.parametrize("strategy", [None, QuantStrategy()])
def test_geometric_mean_identity(strategy):
    m = lm(seed=3)
    stream = np.random.default_rng(1).integers(0, 11, size=300)
    pos = positional_perplexity(m, stream, strategy)
    overall = perplexity(m, stream, strategy)
    assert abs(math.exp(np.mean(np.log(pos.mean))) - overall) <= 1e-6 * overall


def test_single_window_positional_ppl_is_exp_nll():
    nll = np.array([[0.3, 1.2, 2.0]])
    s = positional_stats_from_nll(nll)
    assert np.array_equal(s.mean, np.exp(nll[0])) and np.all(s.std == 0)
    with pytest.raises(ValueError):
        positional_perplexity(lm(), [])


def test_quant_error_examples():
    x = np.random.default_rng(2).uniform(0.1, 2.0, size=(16, 64)).astype(np.float32)
    rows = quant_error_report(x, [PASSTHROUGH, weight_scheme(4, True), weight_scheme(4, False),
                                  weight_scheme(4, True, x.size), activation_scheme(8)])
    assert rows[0].rms_error == 0 and rows[0].max_error == 0 and math.isnan(rows[0].range_utilization)
    assert rows[2].rms_error <= rows[1].rms_error
    assert rows[2].range_utilization > rows[1].range_utilization
    assert rows[3].rms_error <= 1e-7
    for r in rows[1:]:
        assert r.max_error <= r.max_scale / 2 * (1 + 1e-5)
    with pytest.raises(ValueError):
        quant_error_report(x, [])


def test_positional_stats_validation():
    with pytest.raises(DimensionError):
        PositionalStats([1.0, 2.0], [0.0])
    with pytest.raises(ValueError):
        PositionalStats([1.0], [-0.1])


def test_report_roundtrip_and_bytes(tmp_path):
    s = PositionalStats([1.5, 2.25], [0.1, 1 / 3])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_report(s, a)
    emit_report(s, b)
    raw = a.read_bytes()
    assert raw == b.read_bytes() and b"\r" not in raw and raw.count(b"\n") == 3
    assert raw.startswith(b"position,mean,std\n")
    assert parse_report(a) == s
    rows = quant_error_report(np.linspace(-1, 1, 32).reshape(4, 8), [weight_scheme(4), weight_scheme(8, False)])
    emit_report(rows, a)
    assert parse_report(a) == rows
    assert a.read_bytes().startswith(b"scheme,rms_error,max_error,range_utilization\n")
