import json
import struct

import numpy as np
import pytest

from ecoprune.denoiser import DenoiserConfig, init_denoiser
from ecoprune.diffusion import make_schedule
from ecoprune.gates import GateConfig, gate_groups
from ecoprune.harness import archive
from ecoprune.harness.archive import ArchiveFormatError
from ecoprune.harness.cli import main
from ecoprune.harness.config import (ConfigError, RunConfig, dump_config, load_config,
                                     parse_config_text, parse_id_list)
from ecoprune.harness.experiments import eval_run, moment_distance
from ecoprune.harness.reports import read_csv, write_csv
from ecoprune.pruning import PruneConfig

QUICK = """
[diffusion]
train_steps = 30
[prune]
beta_reg = 0.01
steps = 3
[run]
eval_samples = 3
eval_conditions = 0,2
profile_T = 2,4
profile_repeats = 1
gate_curve_draws = 500
gate_curve_points = 7
"""


# -- config ------------------------------------------------------------------

def test_empty_config_gives_module_defaults():
    cfg = parse_config_text("")
    assert cfg.model == DenoiserConfig()
    assert cfg.gates == GateConfig()
    assert cfg.prune == PruneConfig()
    assert (cfg.diffusion.beta_start, cfg.diffusion.beta_end) == (1e-4, 0.02)
    assert cfg.diffusion.sampler == "deterministic"


def test_config_parses_types_and_comments():
    cfg = parse_config_text("""
[model]
d_model = 8   # inline comment
N_HEADS = 2
[prune]
engine = naive
stochastic_gates = false
[run]
record_timing = yes
""")
    assert cfg.model.d_model == 8 and cfg.model.n_heads == 2
    assert cfg.prune.engine == "naive" and cfg.prune.stochastic_gates is False
    assert cfg.run.record_timing is True


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[optimizer]\nlr = 1\n",
    "[model]\nd_model = sixteen\n",
    "[model]\nd_model = 10\nn_heads = 4\n",
    "[gates]\nzeta = 0.9\n",
    "[run]\nmode = blockwise\n",
    "[run]\nsparsity = 1.0\n",
    "[diffusion]\nsampler = ancestral\n",
    "no section header\n",
    "[prune]\nengine = adjoint\n",
])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_dump_round_trip():
    cfg = parse_config_text("[model]\nd_ff = 12\n[run]\nseed = 7\nrecord_timing = true\n")
    assert parse_config_text(dump_config(cfg)) == cfg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_bytes(b"[model]\nd_model = \xff\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_id_lists():
    assert parse_id_list("all", 3) == [0, 1, 2]
    assert parse_id_list("2, 0", 3) == [2, 0]
    for bad in ("3", "a", ""):
        with pytest.raises(ConfigError):
            parse_id_list(bad, 3)


def test_seed_and_out_overrides():
    cfg = RunConfig().with_seed(4).with_out("x")
    assert cfg.run.seed == 4 and cfg.run.out == "x"


# -- archive -----------------------------------------------------------------

def test_archive_round_trip_bit_identical(tmp_path):
    m = init_denoiser(DenoiserConfig(), 5)
    archive.save_model(tmp_path / "m.ecod", m)
    back = archive.load_model(tmp_path / "m.ecod")
    assert back.config == m.config
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert archive.encode(back.params, {"kind": "denoiser", "config": m.config.__dict__}) == \
        (tmp_path / "m.ecod").read_bytes()


def test_archive_layout(tmp_path):
    data = archive.encode({"a": np.arange(3.0), "b": np.ones((2, 2))})
    magic, version, mlen = struct.unpack_from("<4sBQ", data)
    assert magic == b"ECOD" and version == 1
    manifest = json.loads(data[13:13 + mlen].decode("utf-8"))
    assert manifest["tensors"] == [
        {"name": "a", "shape": [3], "offset": 0, "count": 3},
        {"name": "b", "shape": [2, 2], "offset": 3, "count": 4},
    ]
    payload = data[13 + mlen:]
    assert len(payload) == 7 * 8
    assert np.array_equal(np.frombuffer(payload, "<f8"), [0, 1, 2, 1, 1, 1, 1])


def test_gates_archive_round_trip(tmp_path):
    groups = gate_groups(2, 3, 4)
    lam = np.random.default_rng(0).normal(size=14)
    archive.save_gates(tmp_path / "g.ecod", lam, groups)
    back, g2, _ = archive.load_gates(tmp_path / "g.ecod")
    assert back.tobytes() == lam.tobytes() and g2 == groups
    with pytest.raises(ArchiveFormatError):
        archive.load_model(tmp_path / "g.ecod")


def _corrupt(data, how):
    mlen = struct.unpack_from("<Q", data, 5)[0]
    if how == "magic":
        return b"XCOD" + data[4:]
    if how == "version":
        return data[:4] + b"\x02" + data[5:]
    if how == "length_too_big":
        return data[:5] + struct.pack("<Q", len(data)) + data[13:]
    if how == "truncated_payload":
        return data[:-8]
    if how == "ragged_payload":
        return data[:-3]
    if how == "header_only":
        return data[:7]
    if how == "manifest_garbage":
        return data[:13] + b"{" * mlen + data[13 + mlen:]
    if how == "overlap":
        manifest = json.loads(data[13:13 + mlen])
        manifest["tensors"][1]["offset"] = 1
        blob = json.dumps(manifest).encode()
        return data[:5] + struct.pack("<Q", len(blob)) + blob + data[13 + mlen:]
    raise AssertionError(how)


@pytest.mark.parametrize("how", ["magic", "version", "length_too_big", "truncated_payload",
                                 "ragged_payload", "header_only", "manifest_garbage", "overlap"])
def test_corrupted_archives_raise_format_error(how):
    data = archive.encode({"a": np.arange(3.0), "b": np.ones((2, 2))})
    with pytest.raises(ArchiveFormatError):
        archive.decode(_corrupt(data, how))


def test_missing_archive(tmp_path):
    with pytest.raises(FileNotFoundError):
        archive.load_model(tmp_path / "nope.ecod")


# -- csv ---------------------------------------------------------------------

def test_csv_format(tmp_path):
    p = write_csv(tmp_path / "x.csv", ["a", "b", "c"], [{"a": 1, "b": 0.1, "c": "é"}, [2, 1e-20, True]])
    raw = p.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8") == "a,b,c\n1,0.1,é\n2,1e-20,1\n"
    header, rows = read_csv(p)
    assert header == ["a", "b", "c"] and float(rows[1][1]) == 1e-20


# -- eval --------------------------------------------------------------------

def test_moment_distance_zero_for_identical_and_positive_otherwise():
    a = np.random.default_rng(0).standard_normal((20, 3, 2))
    assert moment_distance(a, a) == 0.0
    assert moment_distance(a, a + 0.1) == pytest.approx(np.sqrt(6) * 0.1, rel=1e-12)


def test_eval_run_self_is_zero_and_validates_conditions():
    m = init_denoiser(DenoiserConfig(), 0)
    rows = eval_run(m, m, 4, [0, 3], make_schedule(8))
    assert [r["condition"] for r in rows] == [0, 3]
    assert all(r["mse"] == 0.0 and r["moment_distance"] == 0.0 for r in rows)
    assert rows[0]["params_base"] == rows[0]["params_pruned"]
    with pytest.raises(ValueError):
        eval_run(m, m, 4, [8], make_schedule(8))


def test_eval_run_threads_match_serial(monkeypatch):
    m = init_denoiser(DenoiserConfig(), 0)
    other = init_denoiser(DenoiserConfig(), 1)
    serial = eval_run(m, other, 3, [0, 1, 2], make_schedule(8))
    monkeypatch.setenv("ECOPRUNE_THREADS", "3")
    assert eval_run(m, other, 3, [0, 1, 2], make_schedule(8)) == serial


# -- cli ---------------------------------------------------------------------

@pytest.fixture
def quick_cfg(tmp_path):
    p = tmp_path / "quick.cfg"
    p.write_text(QUICK, encoding="utf-8")
    return p


def _run(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])


def test_cli_pipeline(tmp_path, quick_cfg):
    out = tmp_path / "run"
    assert _run(quick_cfg, out, "train-base") == 0
    assert _run(quick_cfg, out, "learn-mask", "--conditions", "0,1") == 0
    assert _run(quick_cfg, out, "prune", "--sparsity", "0.0", "--mode", "global") == 0
    base = archive.load_model(out / "base.ecod")
    pruned = archive.load_model(out / "pruned.ecod")
    from ecoprune.compactor import count_params
    assert count_params(base) == count_params(pruned)
    assert _run(quick_cfg, out, "eval", "--pruned", str(out / "pruned.ecod")) == 0
    header, rows = read_csv(out / "eval.csv")
    assert header == ["condition", "mse", "moment_distance", "params_base", "params_pruned",
                      "flops_base", "flops_pruned"]
    assert [r[0] for r in rows] == ["0", "2"]
    assert all(float(r[1]) == 0.0 for r in rows)
    assert _run(quick_cfg, out, "sample", "--n", "2", "--conditions", "1,4") == 0
    header, rows = read_csv(out / "samples.csv")
    assert len(header) == 2 + 4 * 16 and len(rows) == 4
    header, rows = read_csv(out / "learn_mask.csv")
    assert "wall_time" not in header and len(rows) == 3
    header, _ = read_csv(out / "train_base.csv")
    assert header == ["step", "loss"]


def test_cli_prune_sparsity_and_masked_eval(tmp_path, quick_cfg):
    out = tmp_path / "run"
    _run(quick_cfg, out, "train-base")
    _run(quick_cfg, out, "learn-mask")
    assert _run(quick_cfg, out, "prune", "--sparsity", "0.3", "--mode", "local") == 0
    _, manifest = archive.load(out / "pruned.ecod")
    assert manifest["mode"] == "local" and manifest["sparsity"] == 0.3
    assert _run(quick_cfg, out, "eval", "--pruned", str(out / "pruned.ecod"), "--sparsity", "0.3",
                "--mode", "local") == 0
    a = (out / "eval.csv").read_bytes()
    assert _run(quick_cfg, out, "eval", "--sparsity", "0.3", "--mode", "local") == 0
    assert (out / "eval.csv").read_bytes() == a  # binary gates == compacted model


def test_cli_profile_and_gate_curve(tmp_path, quick_cfg):
    out = tmp_path / "run"
    assert _run(quick_cfg, out, "profile") == 0
    header, rows = read_csv(out / "profile.csv")
    assert header == ["T", "engine", "peak_activation_floats", "checkpoint_floats", "runs"]
    ck = [int(r[2]) for r in rows if r[1] == "checkpointed"]
    assert max(ck) <= 1.1 * min(ck)
    assert _run(quick_cfg, out, "profile", "--T", "2", "--timing") == 0
    header, _ = read_csv(out / "profile.csv")
    assert "median_wall_time" in header
    assert _run(quick_cfg, out, "gate-curve") == 0
    header, rows = read_csv(out / "gate_curve.csv")
    assert header == ["delta", "lambda", "mean_gate", "frac_zero", "frac_one"]
    assert len(rows) == 2 * 7


@pytest.mark.parametrize("argv_tail", [
    ["learn-mask"],                                      # missing base archive
    ["prune", "--sparsity", "1.2"],                      # out of range
    ["eval", "--pruned", "nowhere.ecod"],
])
def test_cli_errors_exit_1(tmp_path, quick_cfg, argv_tail, capsys):
    assert _run(quick_cfg, tmp_path / "empty", *argv_tail) == 1
    assert "error" in capsys.readouterr().err


def test_cli_bad_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nbogus = 1\n", encoding="utf-8")
    assert main(["train-base", "--config", str(bad)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_cli_divergence_exit_1(tmp_path, quick_cfg, monkeypatch, capsys):
    from ecoprune.pruning import DivergenceError
    out = tmp_path / "run"
    _run(quick_cfg, out, "train-base")

    def boom(*a, **k):
        raise DivergenceError("loss exploded")

    monkeypatch.setattr("ecoprune.harness.experiments.learn_mask", boom)
    assert _run(quick_cfg, out, "learn-mask") == 1
    assert "exploded" in capsys.readouterr().err


def test_cli_requires_config():
    with pytest.raises(SystemExit):
        main(["train-base"])


def test_cli_seed_override_changes_output(tmp_path, quick_cfg):
    _run(quick_cfg, tmp_path / "a", "train-base", "--seed", "1")
    _run(quick_cfg, tmp_path / "b", "train-base", "--seed", "2")
    assert (tmp_path / "a" / "train_base.csv").read_bytes() != (tmp_path / "b" / "train_base.csv").read_bytes()
