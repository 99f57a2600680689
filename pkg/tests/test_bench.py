import csv
import json
import threading

import numpy as np
import pytest

from onebit import neural
from onebit.bench import cli, sweeps
from onebit.bench.config import DetectorSpec, parse_config, parse_config_text
from onebit.checkpoint import save_checkpoint
from onebit.errors import ConfigError
from onebit.training import TrainConfig, train
from onebit.losses import LossConfig

BASE = """
scenario = custom
constellation = QPSK
k_users = 2
n_rx = 8
seed = 3
"""


def cfg_of(extra="", base=BASE):
    return parse_config_text(base + extra)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# config parsing


def test_minimal_preset_config():
    cfg = parse_config_text("scenario = qpsk_4x32\n")
    assert (cfg.constellation, cfg.k_users, cfg.n_rx) == ("QPSK", 4, 32)
    assert cfg.train_snr_db == 15.0 and cfg.stages == 5 and cfg.obmnet_stages == 10
    q = parse_config_text("scenario = qam16_8x128\n")
    assert q.train_snr_db == 25.0 and q.stages == 10 and q.obmnet_stages == 15
    assert q.loss_lambda_for("obmnet") == 0.0 and q.loss_lambda_for("robnet") == 1.0


def test_snr_grid_with_typographic_minus():
    assert cfg_of("snr_grid_db = −5,0,5\n").snr_grid_db == (-5.0, 0.0, 5.0)
    assert cfg_of("snr_grid_db = -5, 0, 5\n").snr_grid_db == (-5.0, 0.0, 5.0)


def test_detector_entries():
    cfg = cfg_of("detectors = ml, base=obmnet, mine=robnet@m.ckpt\n")
    assert cfg.detectors == (DetectorSpec("ml", "ml"), DetectorSpec("base", "obmnet"),
                             DetectorSpec("mine", "robnet", "m.ckpt"))


@pytest.mark.parametrize("text,line,key", [
    ("snr_gird_db = 1\n", 7, "snr_gird_db"),
    ("seed = 4\n", 7, "seed"),
    ("trials_per_point = many\n", 7, "trials_per_point"),
    ("detectors = robnet\n", 7, "detectors"),
    ("detectors = ml@x.ckpt\n", 7, "detectors"),
    ("channel_mode = sometimes\n", 7, "channel_mode"),
    ("checkpoint_width = 16\n", 7, "checkpoint_width"),
    ("batch_size = 1\n", 7, "batch_size"),
    ("detectors = ml, ml\n", 7, "detectors"),
    ("just some words\n", 7, None),
])
def test_config_errors_name_key_and_line(text, line, key):
    with pytest.raises(ConfigError) as info:
        cfg_of(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)
    if key is not None:
        assert info.value.key == key and key in str(info.value)


def test_custom_scenario_requires_dimensions():
    with pytest.raises(ConfigError, match="k_users"):
        parse_config_text("scenario = custom\nconstellation = QPSK\nn_rx = 4\n")
    with pytest.raises(ConfigError, match="scenario"):
        parse_config_text("seed = 1\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")


# ----------------------------------------------------------------------------
# harness with rigged detectors

_seen = threading.local()


class Rigged:
    """Echoes (or negates) the true symbols the harness just drew."""

    kind = "rigged"

    def __init__(self, sign):
        self.sign = sign
        self.k_users = 2

    def detect(self, y, H):
        return self.sign * _seen.x


@pytest.fixture
def spy_trials(monkeypatch):
    real = sweeps.generate_trials

    def spy(*args, **kw):
        out = real(*args, **kw)
        _seen.x = out[0]
        return out

    monkeypatch.setattr(sweeps, "generate_trials", spy)


def test_rigged_detectors_give_ber_zero_and_one(spy_trials):
    cfg = cfg_of("snr_grid_db = 0, 10\ntrials_per_point = 700\n")
    rows = sweeps.run_ber_sweep(cfg, detectors={"echo": Rigged(1.0), "negate": Rigged(-1.0)})
    by = {(r.detector, r.snr_db): r for r in rows}
    for snr in (0.0, 10.0):
        assert by["echo", snr].ber == 0.0 and by["echo", snr].ser == 0.0
        assert by["negate", snr].ber == 1.0 and by["negate", snr].ser == 1.0
        assert by["echo", snr].bits_total == 700 * 4


def test_single_trial_smoke(tmp_path):
    cfg = cfg_of("detectors = ml, nml, obmnet\nsnr_grid_db = 0, 5\ntrials_per_point = 1\n")
    rows = sweeps.run_ber_sweep(cfg, tmp_path)
    assert [(r.detector, r.snr_db) for r in rows] == [(d, s) for s in (0.0, 5.0) for d in ("ml", "nml", "obmnet")]
    table = read_csv(tmp_path / "ber.csv")
    assert list(table[0]) == sweeps.RESULT_FIELDS
    assert all(0 <= float(r["ber"]) <= 1 for r in table)


def test_ml_ber_decreases_with_snr():
    cfg = cfg_of("detectors = ml\nsnr_grid_db = -5, 5, 15\ntrials_per_point = 10000\n",
                 BASE.replace("n_rx = 8", "n_rx = 16"))
    ber = [r.ber for r in sweeps.run_ber_sweep(cfg)]
    assert ber[0] > ber[1] > ber[2]


def test_csv_is_deterministic_across_runs_and_threads(tmp_path):
    cfg = cfg_of("detectors = ml_sigmoid, nml, obmnet\nsnr_grid_db = 0, 8\ntrials_per_point = 1300\n"
                 "nml_iterations = 40\n")
    outs = []
    for i, threads in enumerate((1, 1, 8)):
        sweeps.run_ber_sweep(cfg, tmp_path / str(i), threads=threads)
        outs.append((tmp_path / str(i) / "ber.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_csi_sweep_reduces_to_ber_sweep_and_degrades():
    cfg = cfg_of("detectors = obmnet\ntrials_per_point = 10000\nsnr_grid_db = 10\ncsi_snr_db = 10\n"
                 "csi_noise_grid = 0, 0.05, 0.1, 0.2\n")
    csi = sweeps.run_csi_sweep(cfg)
    ber = sweeps.run_ber_sweep(cfg)
    assert csi[0].ber == ber[0].ber  # same trials, no channel error
    assert [r.csi_noise_var for r in csi] == [0.0, 0.05, 0.1, 0.2]
    for a, b in zip(csi, csi[1:]):
        assert b.ber + 2 * b.ber_std_err >= a.ber - 2 * a.ber_std_err


def test_channel_specific_mode_uses_one_channel():
    cfg = cfg_of("channel_mode = channel_specific\n")
    _, _, _, H = sweeps.generate_trials(cfg, 0, 0, 3, 10.0, Hc_fixed=sweeps.fixed_channel(cfg))
    assert np.array_equal(H[0], H[1]) and np.array_equal(H[1], H[2])
    cols = np.linalg.norm(H[0][:8, :2] + 1j * H[0][8:, :2], axis=0)
    np.testing.assert_allclose(cols, np.sqrt(8), rtol=1e-12)


def test_checkpoint_scenario_mismatch_is_config_error(tmp_path):
    det = neural.Obmnet(2, 2, 8, "QPSK")
    res = train(det, TrainConfig(batch_size=4, num_batches=2), LossConfig("QPSK", 0.0))
    save_checkpoint(res.checkpoint, tmp_path / "q.ckpt")
    cfg = parse_config_text(BASE.replace("QPSK", "QAM16") + "detectors = obmnet@q.ckpt\n", base_dir=str(tmp_path))
    with pytest.raises(ConfigError, match="mismatch"):
        sweeps.run_ber_sweep(cfg)
    ok = parse_config_text(BASE + "detectors = obmnet@q.ckpt\ntrials_per_point = 5\n", base_dir=str(tmp_path))
    assert sweeps.run_ber_sweep(ok)[0].trials == 5


def test_no_detectors_is_config_error():
    with pytest.raises(ConfigError):
        sweeps.run_ber_sweep(cfg_of())
    with pytest.raises(ConfigError):
        sweeps.run_ber_sweep(cfg_of("detectors = ml\n", BASE.replace("k_users = 2", "k_users = 12")))


def test_flagged_trials_excluded(monkeypatch):
    cfg = cfg_of("detectors = nml\ntrials_per_point = 10\n")
    real = sweeps.classic.nml_detect

    def flaky(y, H, rho, c, return_flags=False):
        x, flagged = real(y, H, rho, c, return_flags=True)
        flagged = flagged.copy()
        flagged[::2] = True
        return x, flagged

    monkeypatch.setattr(sweeps.classic, "nml_detect", flaky)
    row = sweeps.run_ber_sweep(cfg)[0]
    assert row.flagged_trials == 5 and row.bits_total == 5 * 4


# ----------------------------------------------------------------------------
# ablation and scatter


def test_stage_ablation_rows(tmp_path):
    cfg = cfg_of("stage_list = 1, 2\nsnr_grid_db = 0, 10\ntrials_per_point = 20\nnum_batches = 3\n"
                 "batch_size = 4\n")
    out = sweeps.run_stage_ablation(cfg, tmp_path)
    assert [(t, r.snr_db) for t, _, r in out] == [(1, 0.0), (1, 10.0), (2, 0.0), (2, 10.0)]
    table = read_csv(tmp_path / "ablation.csv")
    assert [r["stages"] for r in table] == ["1", "1", "2", "2"] and {r["status"] for r in table} == {"ok"}
    assert (tmp_path / "robnet_T1.ckpt").exists() and (tmp_path / "robnet_T2_loss.csv").exists()


def test_stage_ablation_failure_keeps_going(tmp_path, monkeypatch):
    cfg = cfg_of("stage_list = 1, 2\nsnr_grid_db = 5\ntrials_per_point = 10\nnum_batches = 2\nbatch_size = 4\n")
    real = sweeps.train_from_config

    def sometimes(cfg, kind, stages, *a, **kw):
        if stages == 1:
            from onebit.errors import NumericalDivergence
            raise NumericalDivergence("boom")
        return real(cfg, kind, stages, *a, **kw)

    monkeypatch.setattr(sweeps, "train_from_config", sometimes)
    out = sweeps.run_stage_ablation(cfg, tmp_path)
    assert out[0][1].startswith("failed") and out[0][2] is None and out[1][1] == "ok"
    assert read_csv(tmp_path / "ablation.csv")[0]["ber"] == ""


def test_scatter_noiseless_ml_single_user(tmp_path):
    cfg = cfg_of("scatter_detector = ml\nscatter_samples = 250\nscatter_snr_db = inf\n",
                 BASE.replace("k_users = 2", "k_users = 1"))
    dump = sweeps.dump_constellation(cfg, out_dir=tmp_path)
    assert dump.spread == pytest.approx(0.0, abs=1e-12)
    lines = (tmp_path / "scatter.csv").read_text().splitlines()
    assert lines[0] == "true_re,true_im,est_re,est_im,correct" and len(lines) == 1 + 250
    summary = json.loads((tmp_path / "scatter_summary.json").read_text())
    assert summary["points"] == 250 and summary["cluster_spread_rms"] == dump.spread


def test_scatter_row_count_multi_user(tmp_path):
    cfg = cfg_of("scatter_detector = obmnet\nscatter_samples = 600\n")
    sweeps.dump_constellation(cfg, out_dir=tmp_path)
    assert len((tmp_path / "scatter.csv").read_text().splitlines()) == 1 + 600 * 2


# ----------------------------------------------------------------------------
# CLI


def write_cfg(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return str(p)


def test_cli_success_and_outputs(tmp_path):
    cfg = write_cfg(tmp_path, BASE + "detectors = ml, obmnet\ntrials_per_point = 30\nsnr_grid_db = 5\n"
                    "num_batches = 3\nbatch_size = 4\nstages = 1\nscatter_detector = obmnet\n"
                    "scatter_samples = 10\nstage_list = 1\n")
    for cmd, produced in (("ber-sweep", "ber.csv"), ("csi-sweep", "csi.csv"), ("train", "checkpoint.ckpt"),
                          ("scatter", "scatter.csv"), ("ablate-stages", "ablation.csv")):
        out = tmp_path / cmd
        assert cli.main([cmd, "--config", cfg, "--out", str(out), "--threads", "2"]) == 0
        assert (out / produced).exists()
    assert (tmp_path / "train" / "checkpoint_loss.csv").exists()


def test_cli_config_errors_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE + "detectorz = ml\n")
    assert cli.main(["ber-sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "detectorz" in capsys.readouterr().err
    assert cli.main(["ber-sweep", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert cli.main(["ber-sweep", "--config", cfg, "--out", str(tmp_path), "--threads", "0"]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["ber-sweep", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_cli_runtime_failure_exit_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE + "train_detector = obmnet\nlearning_rate = 1e300\nnum_batches = 20\n"
                    "batch_size = 4\nstages = 2\n")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "non-finite" in capsys.readouterr().err
