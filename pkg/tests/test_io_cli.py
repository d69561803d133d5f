import json

import jax
import numpy as np
import pytest

from phi4flow import io
from phi4flow.cli import main
from phi4flow.lattice import ActionParams, LatticeSpec, SampleBatch, action_eval
from phi4flow.operator_flow import ArchConfig, init_params
from phi4flow.training import LatticeSchedule

CONFIG = """\
lattice:
  D: 1
  L: 4.0
action:
  m2: -4.0
  g: 1.0
schedule:
  kind: uniform
  sizes: [4, 8]
training:
  total_steps: 4
  batch_size: 8
  eval_every: 2
  eval_samples: 16
  eval_sizes: [16]
  checkpoint_every: 2
integrator:
  num_steps: 4
arch:
  channels: 2
  time_dim: 2
  embed_hidden: [4]
  kernel_hidden: [4]
  transformer_hidden: [4]
  time_hidden: [4]
mcmc:
  burn_in: 50
"""


@pytest.fixture()
def config_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG)
    return p


def test_config_round_trip():
    doc = io.load_config_text(CONFIG)
    cfg = io.train_config_from_doc(doc)
    assert cfg.schedule == LatticeSchedule.uniform([4, 8])
    assert cfg.arch.embed_hidden == (4,) and cfg.eval_sizes == (16,)
    again = io.train_config_from_doc(io.train_config_to_doc(cfg))
    assert again == cfg
    assert io.train_config_from_doc(doc, seed=9).seed == 9


def test_curriculum_config():
    text = CONFIG.replace("  kind: uniform\n  sizes: [4, 8]\n", "  kind: curriculum\n  stages: [[4, 3], [8, 1]]\n")
    cfg = io.train_config_from_doc(io.load_config_text(text))
    assert cfg.schedule.sizes == (4, 8) and cfg.schedule.steps == (3, 1)


def test_unknown_key_reports_line():
    text = CONFIG.replace("  batch_size: 8", "  batch_sise: 8")
    with pytest.raises(io.ConfigError, match=r"line 12: training\.batch_sise: unknown key"):
        io.load_config_text(text)


def test_bad_values_rejected():
    with pytest.raises(io.ConfigError, match="expected an integer"):
        io.load_config_text(CONFIG.replace("total_steps: 4", "total_steps: four"))
    with pytest.raises(io.ConfigError, match="missing required"):
        io.load_config_text("lattice:\n  D: 1\n")
    with pytest.raises(io.ConfigError):
        io.train_config_from_doc(io.load_config_text(CONFIG.replace("[4, 8]", "[1, 8]")))


def test_checkpoint_round_trip_bit_identical(tmp_path):
    arch = ArchConfig(channels=3, time_dim=2, embed_hidden=(5,), kernel_hidden=(4, 4))
    params = init_params(arch, 1, zero_output=False)
    ck = io.Checkpoint(params, {"a": 1}, 17, {"seed": 3})
    path = tmp_path / "x.lfckpt"
    digest = io.save_checkpoint(path, ck)
    assert digest == io.file_sha256(path)
    back = io.load_checkpoint(path)
    assert back.step == 17 and back.config == {"a": 1} and back.params.arch == arch
    for a, b in zip(jax.tree_util.tree_leaves(params), jax.tree_util.tree_leaves(back.params)):
        assert np.array_equal(np.asarray(a), np.asarray(b))
    assert io.checkpoint_bytes(back) == path.read_bytes()


def test_manifest_partition(tmp_path):
    params = init_params(ArchConfig(), 0)
    flat, manifest = io.flatten_params(params)
    assert flat.size == params.num_parameters()
    manifest[1] = dict(manifest[1], offset=manifest[1]["offset"] + 1)
    with pytest.raises(io.FormatError):
        io.unflatten_params(flat, manifest, params.arch)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "x.lfckpt"
    io.save_checkpoint(path, io.Checkpoint(init_params(ArchConfig(), 0), {}, 0, {}))
    data = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(io.FormatError, match="magic"):
        io.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(data[:-8])
    with pytest.raises(io.FormatError, match="truncated"):
        io.load_checkpoint(tmp_path / "short")


@pytest.mark.parametrize("with_logq", [True, False])
def test_sample_file_round_trip(tmp_path, rng, with_logq):
    lat = LatticeSpec(2, 3, 1.5)
    batch = SampleBatch(lat, rng.normal(size=(5, 3, 3)), rng.normal(size=5) if with_logq else None)
    path = tmp_path / "s.lfsamp"
    io.save_samples(path, batch)
    back = io.load_samples(path)
    assert back.lattice == lat
    assert np.array_equal(back.phi, batch.phi)
    assert (back.logq is None) == (not with_logq)
    if with_logq:
        assert np.array_equal(back.logq, batch.logq)
    assert path.stat().st_size == 8 + 29 + 8 * (5 * 9 + (5 if with_logq else 0))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(io.FormatError):
        io.load_samples(path)


def test_csv_provenance_and_precision(tmp_path):
    x = 0.1 + 0.2
    io.write_csv(tmp_path / "t.csv", ["a", "b"], [(1, x), (2, None)], {"seed": 4, "checkpoint_sha256": None})
    prov, header, rows = io.read_csv(tmp_path / "t.csv")
    assert prov["seed"] == "4" and prov["checkpoint_sha256"] == "none" and "tool_version" in prov
    assert header == ["a", "b"]
    assert float(rows[0][1]) == x and rows[1][1] == ""


# ---------------------------------------------------------------------------
# command line, end to end
# ---------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["train", str(config_file), "--out", str(out), "--seed", "5"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["training"]["seed"] == 5
    prov, header, rows = io.read_csv(out / "train_report.csv")
    assert header == ["step", "N", "loss", "step_wall_seconds", "ess128"] and len(rows) == 4
    assert prov["checkpoint_sha256"] == io.file_sha256(out / "last.lfckpt") and prov["seed"] == "5"
    assert rows[0][4] == "" and rows[1][4] != ""
    assert (out / "ckpt_0000002.lfckpt").exists() and (out / "ess_all_sizes.csv").exists()
    ckpt = out / "last.lfckpt"

    flow = tmp_path / "flow.lfsamp"
    assert main(["sample", "--ckpt", str(ckpt), "--N", "16", "--n-samples", "32", "--out", str(flow)]) == 0
    assert io.load_samples(flow).logq is not None

    mc = tmp_path / "mc.lfsamp"
    assert main(["oracle", str(config_file), "--N", "8", "--n-samples", "64", "--out", str(mc)]) == 0
    assert io.load_samples(mc).logq is None

    prefix = tmp_path / "ev"
    assert main(["evaluate", "--ckpt", str(ckpt), "--samples", str(flow), "--sizes", "4", "32", "--ess128",
                 "--out", str(prefix)]) == 0
    _, header, rows = io.read_csv(f"{prefix}_observables.csv")
    assert header[:6] == ["N", "ess", "M_mean", "M_stderr", "absM_mean", "absM_stderr"]
    by_n = {r[0]: r for r in rows}
    assert by_n["4"][header.index("trained")] == "1" and by_n["32"][header.index("trained")] == "0"
    assert by_n["32"][header.index("n_samples")] == "128"
    _, gh, grows = io.read_csv(f"{prefix}_correlation.csv")
    assert gh == ["N", "r", "G", "G_stderr", "count"]
    assert sum(int(r[4]) for r in grows if r[0] == "16") == 16**2

    # oracle samples have no log q, so ESS is refused unless explicitly disabled
    assert main(["evaluate", "--config", str(config_file), "--samples", str(mc), "--out", str(prefix)]) == 2
    assert main(["evaluate", "--config", str(config_file), "--samples", str(mc), "--no-ess",
                 "--out", str(tmp_path / "mc")]) == 0

    kern = tmp_path / "k.csv"
    assert main(["kernels", "--ckpt", str(ckpt), "--N", "8", "--out", str(kern)]) == 0
    _, _, krows = io.read_csv(kern)
    assert all(float(r[2]) == 0.0 for r in krows if float(r[1]) == 0.0)
    assert len(krows) == 2 * 5

    assert main(["hist", str(flow), str(config_file), "--out", str(tmp_path / "h")]) == 0
    _, _, hrows = io.read_csv(tmp_path / "h_hist.csv")
    widths = np.array([float(r[1]) - float(r[0]) for r in hrows])
    assert len(hrows) == 60
    assert np.sum(widths * np.array([float(r[2]) for r in hrows])) == pytest.approx(1.0, abs=1e-12)
    _, _, crows = io.read_csv(tmp_path / "h_curve.csv")
    c = np.array([[float(a), float(b)] for a, b in crows])
    peaks = np.sort(c[np.argsort(c[:, 1])[-2:], 0])
    np.testing.assert_allclose(peaks, [-np.sqrt(2), np.sqrt(2)], atol=0.01)


def test_exact_log_density_file_has_unit_ess(tmp_path, config_file, rng):
    lat = LatticeSpec(1, 4, 4.0)
    phi = rng.normal(size=(20, 4))
    logq = -np.asarray(action_eval(phi, lat, ActionParams(-4.0, 1.0))) + 3.7
    io.save_samples(tmp_path / "e.lfsamp", SampleBatch(lat, phi, logq))
    assert main(["evaluate", "--config", str(config_file), "--samples", str(tmp_path / "e.lfsamp"),
                 "--out", str(tmp_path / "e")]) == 0
    _, _, rows = io.read_csv(tmp_path / "e_observables.csv")
    assert float(rows[0][1]) == pytest.approx(1.0, abs=1e-12)


def test_cli_config_error_exit_code(tmp_path, config_file, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(CONFIG + "extra: 1\n")
    assert main(["train", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_output_dir_lock(tmp_path, config_file):
    from filelock import FileLock

    out = tmp_path / "run"
    out.mkdir()
    with FileLock(str(out / ".phi4flow.lock")):
        with pytest.raises(SystemExit):
            main(["train", str(config_file), "--out", str(out)])
