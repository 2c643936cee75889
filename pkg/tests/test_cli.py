import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from q4fg import container
from q4fg.cli import main
from q4fg.model import PARTS, QuantStrategy, forward
from q4fg.pipeline import StrategyTuneResult, read_tokens, write_tokens
from q4fg.qlinear import effective_weight


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def enc_model(tmp_path):
    path = tmp_path / "enc.q4fg"
    assert run("--seed", 1, "init", "--out", path, "--enc", 2, "--hidden", 16, "--vocab", 20, "--max-seq", 8) == 0
    return path


@pytest.fixture()
def tokens(tmp_path):
    path = tmp_path / "tok.bin"
    write_tokens(path, np.random.default_rng(0).integers(0, 20, size=32))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_token_file_is_le_u32(tmp_path):
    p = tmp_path / "t.bin"
    write_tokens(p, [1, 2, 258])
    assert p.read_bytes() == b"\x01\x00\x00\x00\x02\x00\x00\x00\x02\x01\x00\x00"
    assert read_tokens(p).tolist() == [1, 2, 258]


def test_quantize_rowwise_roundtrip_scan(enc_model, tmp_path):
    out = tmp_path / "w4.q4fg"
    assert run("quantize", "--model", enc_model, "--out", out, "--bits", 4, "--mapping", "sym", "--groups", "d_in") == 0
    before, after = container.load(enc_model).model, container.load(out).model
    assert set(after.qweights) == set(after.linears)
    for name, q in after.qweights.items():
        assert q.num_groups == q.shape[0]
        w = before.params[name + ".weight"].data.astype(np.float64)
        err = np.abs(after.params[name + ".weight"].data - w)
        assert np.all(err <= q.element_scales() / 2 * (1 + 1e-6) + 1e-7)
    assert container.load(out).strategy.code == "1111"


def test_quantize_selected_part_leaves_others_identical(enc_model, tmp_path):
    out = tmp_path / "q3.q4fg"
    src_bytes = enc_model.read_bytes()
    assert run("quantize", "--model", enc_model, "--out", out, "--parts", "mlp_int") == 0
    assert enc_model.read_bytes() == src_bytes  # input file untouched
    a, b = container.load(enc_model).model, container.load(out).model
    assert {b.linears[n] for n in b.qweights} == {"mlp_intermediate"}
    for name, t in a.params.items():
        if not name.endswith(".weight") or name[:-7] not in b.qweights:
            assert t.data.tobytes() == b.params[name].data.tobytes()
    assert container.load(out).strategy.code == "0010"


def test_quantize_errors(enc_model, tmp_path):
    out = tmp_path / "q.q4fg"
    assert run("quantize", "--model", enc_model, "--out", out) == 0
    assert run("quantize", "--model", out, "--out", tmp_path / "qq.q4fg") == 1  # already quantized
    with pytest.raises(SystemExit) as exc:
        run("quantize", "--model", enc_model, "--out", out, "--parts", "lm_head")
    assert exc.value.code == 2
    assert run("quantize", "--model", tmp_path / "missing.q4fg", "--out", out) == 1


def test_bits_payload_ratio(enc_model, tmp_path):
    sizes = {}
    for bits in (4, 8):
        out = tmp_path / f"w{bits}.q4fg"
        run("quantize", "--model", enc_model, "--out", out, "--bits", bits)
        sizes[bits] = container.payload_nbytes(out.read_bytes())
    assert all(sizes[4][k] * 2 == sizes[8][k] for k in sizes[4])


def test_infer_disabled_matches_float_reference(enc_model, tokens, tmp_path):
    report = tmp_path / "r.csv"
    assert run("infer", "--model", enc_model, "--input", tokens, "--report", report, "--strategy", "0000") == 0
    rows = read_csv(report)
    assert rows[0][:3] == ["sequence", "position", "logit_0"]
    m = container.load(enc_model).model
    ref = forward(m, read_tokens(tokens).reshape(-1, 8)).logits.data
    got = np.array([[float(v) for v in r[2:]] for r in rows[1:]], dtype=np.float32)
    assert np.array_equal(got, ref.reshape(-1, ref.shape[-1]))


def test_q3_only_isolates_mlp_intermediate(enc_model, tokens):
    m = container.load(enc_model).model
    x = read_tokens(tokens).reshape(-1, 8)
    f = forward(m, x, QuantStrategy.disabled(), probe=True)
    q = forward(m, x, QuantStrategy.q3_only(), probe=True)
    # layer-0 inputs up to fc1 are untouched; the first change is fc1's output, seen at fc2's input
    for name in ("encoder.0.attn.qkv", "encoder.0.attn.out", "encoder.0.mlp.fc1"):
        assert np.array_equal(f.probes[name], q.probes[name])
    assert not np.array_equal(f.probes["encoder.0.mlp.fc2"], q.probes["encoder.0.mlp.fc2"])


def test_infer_is_deterministic_and_auto_needs_tune(enc_model, tokens, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("infer", "--model", enc_model, "--input", tokens, "--report", a, "--strategy", "1111")
    run("infer", "--model", enc_model, "--input", tokens, "--report", b, "--strategy", "1111")
    assert a.read_bytes() == b.read_bytes()
    assert run("infer", "--model", enc_model, "--input", tokens, "--report", a, "--strategy", "auto") == 2


def test_tune_and_auto_strategy(enc_model, tokens, tmp_path):
    tune = tmp_path / "tune.json"
    assert run("tune-strategy", "--model", enc_model, "--shapes", "1,8;4,8", "--out", tune, "--repeats", 3) == 0
    res = StrategyTuneResult.load(tune)
    assert [b.m for b in res.buckets] == [8, 32]
    for b in res.buckets:
        assert len(b.timings_ns) == 16
        assert b.timings_ns[b.chosen] == min(b.timings_ns.values())
        assert set(b.part_deltas_ns) == set(PARTS)
    assert StrategyTuneResult.from_json(res.to_json()) == res
    report = tmp_path / "r.csv"
    assert run("infer", "--model", enc_model, "--input", tokens, "--report", report,
               "--strategy", "auto", "--tune", tune) == 0
    assert res.select(32).code == res.buckets[1].chosen and res.select(10).code == res.buckets[0].chosen


def test_prune_nm_structure(enc_model, tmp_path):
    out = tmp_path / "p.q4fg"
    assert run("prune", "--model", enc_model, "--out", out, "--nm", "2:4") == 0
    c = container.load(out)
    assert set(c.masks) == set(c.model.linears)
    for m in c.masks.values():
        zeros = (~m.mask).reshape(-1, 4).sum(axis=1)
        assert np.all(zeros == 2)
    assert run("prune", "--model", enc_model, "--out", out) == 2
    with pytest.raises(SystemExit):
        run("prune", "--model", enc_model, "--out", out, "--nm", "4:4")


@pytest.mark.parametrize("order", ["prune_then_quant", "quant_then_prune"])
def test_prune_then_quantize_respects_order(enc_model, tmp_path, order):
    p, q = tmp_path / "p.q4fg", tmp_path / "pq.q4fg"
    assert run("prune", "--model", enc_model, "--out", p, "--nm", "2:4", "--order", order) == 0
    assert run("quantize", "--model", p, "--out", q) == 0
    c = container.load(q)
    assert c.extra["order"] == order
    for name, mask in c.masks.items():
        w, _ = effective_weight(c.model.params[name + ".weight"].data, c.strategy.weight_scheme, mask.mask, order,
                                c.model.qweights[name])
        off = w[~mask.mask]
        if order == "quant_then_prune":
            assert np.all(off == 0.0)
        else:
            # masked zeros were quantized with their group, so they land within half a step of zero
            scales = c.model.qweights[name].element_scales()[~mask.mask]
            assert np.all(np.abs(off) <= scales / 2 * (1 + 1e-6))


def test_reduce_layers_maps_decoder_indices(tmp_path):
    t, s = tmp_path / "t.q4fg", tmp_path / "s.q4fg"
    run("init", "--out", t, "--arch", "encoder_decoder", "--enc", 6, "--dec", 6, "--hidden", 8, "--vocab", 10,
        "--max-seq", 8)
    assert run("reduce-layers", "--model", t, "--out", s, "--enc", 6, "--dec", 3) == 0
    tm, sm = container.load(t).model, container.load(s).model
    assert sm.layer_map == {"encoder": [0, 1, 2, 3, 4, 5], "decoder": [0, 2, 4]}
    for i, j in enumerate([0, 2, 4]):
        assert np.array_equal(sm.params[f"decoder.{i}.mlp.fc1.weight"].data, tm.params[f"decoder.{j}.mlp.fc1.weight"].data)
    assert run("reduce-layers", "--model", t, "--out", s, "--enc", 7, "--dec", 3) == 1


def test_bench_rows(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench", "--case", "mlp_intermediate", "--bits", "4,8", "--hidden", 16, "--batch-size", 1,
               "--seq-len", 8, "--repeats", 3, "--out", out) == 0
    rows = read_csv(out)
    assert rows[0] == ["case", "bits", "M", "N", "K", "median_ns", "bytes_moved", "gops"]
    assert [(r[0], r[1], r[2], r[3], r[4], r[6]) for r in rows[1:]] == [
        ("mlp_intermediate", "4", "8", "64", "16", "512"), ("mlp_intermediate", "8", "8", "64", "16", "1024")]
    with pytest.raises(SystemExit) as exc:
        run("bench", "--repeats", 2, "--out", out)
    assert exc.value.code == 2


def test_analyze_commands(tmp_path):
    lm, tok = tmp_path / "lm.q4fg", tmp_path / "s.bin"
    run("init", "--out", lm, "--arch", "decoder_only", "--enc", 0, "--dec", 2, "--hidden", 16, "--vocab", 12,
        "--max-seq", 8, "--ln", "pre")
    write_tokens(tok, np.random.default_rng(1).integers(0, 12, size=72))
    out = tmp_path / "ppl.csv"
    assert run("analyze", "positional-ppl", "--model", lm, "--input", tok, "--out", out, "--seq-len", 8) == 0
    assert read_csv(out)[0] == ["position", "mean", "std"] and len(read_csv(out)) == 9
    assert run("analyze", "positional-range", "--model", lm, "--input", tok, "--out", out, "--seq-len", 8,
               "--batch-size", 3, "--layer", 1, "--module", "qkv") == 0
    assert len(read_csv(out)) == 9
    assert run("analyze", "quant-error", "--out", out, "--rows", 8, "--cols", 16) == 0
    assert read_csv(out)[0] == ["scheme", "rms_error", "max_error", "range_utilization"]
    assert len(read_csv(out)) == 1 + 4
    assert run("analyze", "positional-ppl", "--out", out) == 2
    assert run("analyze", "positional-range", "--model", lm, "--input", tok, "--out", out, "--module", "ln") == 1


def test_train_qat_from_cli(tmp_path):
    t, s, log = tmp_path / "t.q4fg", tmp_path / "s.q4fg", tmp_path / "log.csv"
    run("init", "--out", t, "--enc", 1, "--hidden", 16, "--vocab", 3, "--max-seq", 8, "--labels", 3, "--ln", "pre")
    args = ["train-qat", "--teacher", t, "--out", s, "--log", log, "--n-train", 64, "--n-val", 32, "--seq-len", 8,
            "--steps", 4, "--eval-every", 2, "--batch-size", 16, "--w-att", 1, "--w-rep", 1]
    assert run(*args) == 0
    rows = read_csv(log)
    assert rows[0][0] == "step" and [r[0] for r in rows[1:]] == ["0", "2", "4"]
    c = container.load(s)
    assert c.strategy.code == "1111" and c.extra["order"] == "prune_then_quant"
    assert run("train-qat", "--out", s) == 2


def test_cli_runs_are_reproducible(tmp_path):
    def pipeline_run(d):
        d.mkdir()
        small = ["--n-train", 32, "--n-val", 16, "--seq-len", 8, "--steps", 2, "--eval-every", 1]
        write_tokens(d / "x.bin", np.arange(16) % 3)
        steps = [
            ["init", "--out", d / "m.q4fg", "--enc", 1, "--hidden", 16, "--vocab", 3, "--max-seq", 8, "--labels", 3],
            ["prune", "--model", d / "m.q4fg", "--out", d / "p.q4fg", "--nm", "2:4"],
            ["train-qat", "--teacher", d / "m.q4fg", "--student", d / "p.q4fg", "--out", d / "s.q4fg",
             "--log", d / "log.csv", *small],
            ["quantize", "--model", d / "s.q4fg", "--out", d / "q.q4fg", "--bits", 8],
            ["infer", "--model", d / "q.q4fg", "--input", d / "x.bin", "--report", d / "r.csv"],
            ["analyze", "quant-error", "--out", d / "e.csv"],
        ]
        assert [run("--seed", 7, *argv) for argv in steps] == [0] * len(steps)
        return {p.name: p.read_bytes() for p in sorted(d.iterdir())}

    a, b = pipeline_run(tmp_path / "a"), pipeline_run(tmp_path / "b")
    assert a == b and len(a) == 8


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "q4fg.cli", "bench", "--repeats", "1", "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "repeats" in proc.stderr
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"arch": "decoder_only", "num_encoder_layers": 0, "num_decoder_layers": 1,
                               "hidden": 8, "heads": 2, "vocab_size": 5, "max_seq": 4}))
    proc = subprocess.run([sys.executable, "-m", "q4fg.cli", "init", "--config", str(cfg), "--out",
                           str(tmp_path / "m.q4fg")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert container.load(tmp_path / "m.q4fg").model.cfg.arch == "decoder_only"
