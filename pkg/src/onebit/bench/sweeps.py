"""Monte-Carlo BER/SER sweeps, stage ablation and constellation dumps.

Trial ``t`` at grid point ``p`` draws everything (channel, symbols, noise,
CSI error) from the stream ``(seed, p, t)``; trials are grouped into chunks of
fixed size, so results do not depend on how many worker threads run them.
All detectors see the same trials.
"""

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from onebit import classic, mimo, neural
from onebit.bench.config import DetectorSpec, resolve_path
from onebit.checkpoint import detector_from_checkpoint, load_checkpoint, save_checkpoint
from onebit.errors import ConfigError, LoadError, OneBitError
from onebit.losses import LossConfig
from onebit.training import TrainConfig, train, write_loss_trace

CHUNK = 512
_CSI_STREAM = 1


@dataclass
class ResultRow:
    detector: str
    snr_db: float
    csi_noise_var: float
    trials: int
    bit_errors: int
    bits_total: int
    ber: float
    symbol_errors: int
    symbols_total: int
    ser: float
    flagged_trials: int
    wall_time_ms: float
    ber_std_err: float

    @classmethod
    def from_counts(cls, detector, snr_db, csi, trials, bit_err, bits, sym_err, syms, flagged, ms):
        ber = bit_err / bits if bits else 0.0
        return cls(
            detector, float(snr_db), float(csi), int(trials), int(bit_err), int(bits), ber,
            int(sym_err), int(syms), sym_err / syms if syms else 0.0, int(flagged), float(ms),
            math.sqrt(ber * (1.0 - ber) / bits) if bits else 0.0,
        )


RESULT_FIELDS = [f.name for f in fields(ResultRow)]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_rows(path, rows, leading=()):
    """CSV with a header; ``leading`` is a list of (name, values) prepended columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name for name, _ in leading] + RESULT_FIELDS)
        for i, row in enumerate(rows):
            pre = [_fmt(vals[i]) for _, vals in leading]
            if row is None:
                w.writerow(pre + [""] * len(RESULT_FIELDS))
            else:
                w.writerow(pre + [_fmt(getattr(row, f)) for f in RESULT_FIELDS])


# ----------------------------------------------------------------------------
# detectors


class Runner:
    """Uniform ``(y, H_est, rho) -> (x_est, flagged)`` wrapper around one detector."""

    def __init__(self, label, fn):
        self.label = label
        self.fn = fn

    def __call__(self, y, H, rho):
        x, flagged = self.fn(y, H, rho)
        flagged = flagged | ~np.all(np.isfinite(x), axis=1)
        return np.where(flagged[:, None], 0.0, x), flagged


def _no_flags(x):
    return x, np.zeros(x.shape[0], dtype=bool)


def make_runner(spec, cfg, detector=None):
    """Build a :class:`Runner`; checkpoint-backed specs are validated against the scenario."""
    const = cfg.constellation
    eta = neural.default_eta(const, cfg.k_users)
    if detector is not None:
        return Runner(spec.label, lambda y, H, rho: _safe_detect(detector, y, H))
    if spec.kind in ("ml", "ml_sigmoid"):
        lik = "gaussian_cdf" if spec.kind == "ml" else "sigmoid"
        try:
            classic.candidate_set(const, cfg.k_users)
        except OneBitError as exc:
            raise ConfigError(f"detector {spec.label!r}: {exc}") from exc
        return Runner(spec.label, lambda y, H, rho: _no_flags(classic.ml_exhaustive(y, H, rho, const, lik)))
    if spec.kind == "nml":
        ncfg = classic.NmlConfig(cfg.nml_iterations, cfg.nml_step)

        def run_nml(y, H, rho):
            x, flagged = classic.nml_detect(y, H, rho, ncfg, return_flags=True)
            # unit-sphere output rescaled to the lattice norm before slicing
            return x * eta, flagged

        return Runner(spec.label, run_nml)
    if spec.kind == "obmnet" and spec.checkpoint is None:
        params = classic.ObmnetParams.default(cfg.obmnet_stages, eta)
        return Runner(spec.label, lambda y, H, rho: _safe_classic(params, y, H))
    path = resolve_path(cfg, spec.checkpoint)
    expected = {"kind": spec.kind, "K": cfg.k_users, "N": cfg.n_rx, "constellation": const}
    try:
        det = detector_from_checkpoint(load_checkpoint(path, expected=expected))
    except LoadError as exc:
        raise ConfigError(f"detector {spec.label!r}: {exc}") from exc
    return Runner(spec.label, lambda y, H, rho: _safe_detect(det, y, H))


def _safe_detect(det, y, H):
    with np.errstate(all="ignore"):
        try:
            return _no_flags(det.detect(y, H))
        except OneBitError:
            pass
        # fall back row by row so one degenerate instance does not sink the chunk
        out = np.zeros((y.shape[0], 2 * det.k_users))
        flagged = np.zeros(y.shape[0], dtype=bool)
        for i in range(y.shape[0]):
            try:
                out[i] = det.detect(y[i:i + 1], H[i:i + 1])[0]
            except OneBitError:
                flagged[i] = True
        return out, flagged


def _safe_classic(params, y, H):
    with np.errstate(all="ignore"):
        x = classic.obmnet_iterates(y, H, params)[-1]
        n = np.linalg.norm(x, axis=1, keepdims=True)
        flagged = n[:, 0] == 0
        return classic.normalize_output(np.where(flagged[:, None], 1.0, x), params.eta), flagged


# ----------------------------------------------------------------------------
# trial generation and counting


def fixed_channel(cfg):
    Hc = mimo.sample_rayleigh_channel(cfg.n_rx, cfg.k_users, mimo.RngStream(cfg.channel_seed, 0))
    return mimo.normalize_columns_channel_specific(Hc)


def generate_trials(cfg, point, start, stop, rho, csi_var=0.0, Hc_fixed=None):
    """Draw trials ``start..stop-1`` of grid point ``point``.

    Returns true real-stacked symbols, their bits, the one-bit observations,
    and the real-stacked channel handed to the detector (CSI error applied).
    """
    K, N, const = cfg.k_users, cfg.n_rx, cfg.constellation
    n = stop - start
    x = np.empty((n, 2 * K))
    bits = np.empty((n, 2 * K, mimo.get_constellation(const).bits_per_dim), dtype=np.int8)
    y = np.empty((n, 2 * N))
    H_det = np.empty((n, 2 * N, 2 * K))
    root = mimo.RngStream(cfg.seed, (point,))
    for i, t in enumerate(range(start, stop)):
        gen = root.child(t).generator()
        Hc = mimo.sample_rayleigh_channel(N, K, gen) if Hc_fixed is None else Hc_fixed
        b, xc = mimo.sample_symbols(const, K, gen)
        H = mimo.realify_channel(Hc)
        xr = mimo.realify_vector(xc)
        y[i] = mimo.one_bit_quantize(mimo.transmit(H, xr, rho, const, gen))
        x[i], bits[i] = xr, b
        if csi_var > 0:
            Hc = mimo.perturb_csi(Hc, csi_var, root.child(t, _CSI_STREAM).generator())
            H = mimo.realify_channel(Hc)
        H_det[i] = H
    return x, bits, y, H_det


def count_errors(x_true, bits_true, x_est, constellation):
    """Per-trial (bit errors, symbol errors)."""
    sym, bits = mimo.nearest_symbol(x_est, constellation)
    k = x_true.shape[1] // 2
    bit_err = (bits != bits_true).reshape(len(x_true), -1).sum(axis=1)
    dim_err = sym != x_true
    sym_err = (dim_err[:, :k] | dim_err[:, k:]).sum(axis=1)
    return bit_err, sym_err


def _evaluate_point(cfg, runners, point, snr_db, csi_var, threads, Hc_fixed):
    rho = float(mimo.db_to_linear(snr_db))
    n_trials = cfg.trials_per_point
    chunks = [(lo, min(lo + CHUNK, n_trials)) for lo in range(0, n_trials, CHUNK)]

    def work(bounds):
        x, bits, y, H = generate_trials(cfg, point, bounds[0], bounds[1], rho, csi_var, Hc_fixed)
        res = []
        for run in runners:
            t0 = time.perf_counter()
            x_est, flagged = run(y, H, rho)
            ms = (time.perf_counter() - t0) * 1e3
            be, se = count_errors(x, bits, x_est, cfg.constellation)
            ok = ~flagged
            res.append((int(be[ok].sum()), int(se[ok].sum()), int(flagged.sum()), ms))
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    bits_per_trial = cfg.bits_per_trial
    rows = []
    for j, run in enumerate(runners):
        be = sum(r[j][0] for r in results)
        se = sum(r[j][1] for r in results)
        fl = sum(r[j][2] for r in results)
        ms = sum(r[j][3] for r in results) if cfg.record_timing else 0.0
        good = n_trials - fl
        rows.append(ResultRow.from_counts(
            run.label, snr_db, csi_var, n_trials, be, good * bits_per_trial, se, good * cfg.k_users, fl, ms
        ))
    return rows


def _runners(cfg, detectors=None, specs=None):
    specs = cfg.detectors if specs is None else specs
    if not specs and not detectors:
        raise ConfigError("no detectors configured", key="detectors")
    runners = [make_runner(s, cfg) for s in specs]
    for label, det in (detectors or {}).items():
        runners.append(make_runner(DetectorSpec(label, det.kind), cfg, detector=det))
    return runners


def run_ber_sweep(cfg, out_dir=None, threads=1, detectors=None, filename="ber.csv"):
    """BER/SER for every detector at every SNR of the grid.

    ``detectors`` optionally adds in-memory neural detectors (label -> detector).
    """
    runners = _runners(cfg, detectors)
    Hc_fixed = fixed_channel(cfg) if cfg.channel_mode == "channel_specific" else None
    rows = []
    for p, snr in enumerate(cfg.snr_grid_db):
        rows.extend(_evaluate_point(cfg, runners, p, snr, 0.0, threads, Hc_fixed))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, filename), rows)
    return rows


def run_csi_sweep(cfg, out_dir=None, threads=1, detectors=None, filename="csi.csv"):
    """BER versus CSI error variance at the fixed SNR ``cfg.csi_snr_db``.

    Every variance point reuses the same data trials; only the channel handed
    to the detectors changes.
    """
    runners = _runners(cfg, detectors)
    Hc_fixed = fixed_channel(cfg) if cfg.channel_mode == "channel_specific" else None
    rows = []
    for var in cfg.csi_noise_grid:
        rows.extend(_evaluate_point(cfg, runners, 0, cfg.csi_snr_db, var, threads, Hc_fixed))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, filename), rows)
    return rows


# ----------------------------------------------------------------------------
# training driven by a config


def train_from_config(cfg, kind=None, stages=None, out_dir=None, checkpoint_name=None, progress_every=0):
    kind = kind or cfg.train_detector
    stages = stages or (cfg.obmnet_stages if kind == "obmnet" and cfg.stages is None else cfg.stages)
    args = (stages, cfg.k_users, cfg.n_rx, cfg.constellation)
    rng = np.random.default_rng(cfg.init_seed)
    if kind == "obmnet":
        det = neural.Obmnet(*args)
    elif kind == "robnet":
        det = neural.Robnet(*args, rng)
    else:
        det = neural.Obirim(*args, rng)
    tcfg = TrainConfig(cfg.batch_size, cfg.num_batches, cfg.train_snr_db, cfg.learning_rate,
                       cfg.weight_decay, cfg.seed)
    lcfg = LossConfig(cfg.constellation, cfg.loss_lambda_for(kind), cfg.loss_beta)
    mode = fixed_channel(cfg) if cfg.channel_mode == "channel_specific" else "general"
    result = train(det, tcfg, lcfg, channel_mode=mode, progress_every=progress_every)
    result.checkpoint.metadata["channel_mode"] = cfg.channel_mode
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        name = checkpoint_name or cfg.checkpoint_name
        save_checkpoint(result.checkpoint, os.path.join(out_dir, name), width=cfg.checkpoint_width)
        write_loss_trace(result.losses, os.path.join(out_dir, os.path.splitext(name)[0] + "_loss.csv"))
    return det, result


def run_stage_ablation(cfg, out_dir=None, threads=1, filename="ablation.csv"):
    """Train one ROBNet per stage count and evaluate it over the SNR grid.

    A failed training run yields empty rows for that T; the others proceed.
    """
    stage_col, status_col, rows = [], [], []
    for T_stages in cfg.stage_list:
        name = f"robnet_T{T_stages}.ckpt"
        try:
            det, _ = train_from_config(cfg, "robnet", T_stages, out_dir, checkpoint_name=name)
            sweep = _ablation_eval(cfg, det, T_stages, threads)
        except OneBitError as exc:
            for _ in cfg.snr_grid_db:
                stage_col.append(T_stages)
                status_col.append(f"failed: {exc}")
                rows.append(None)
            continue
        for row in sweep:
            stage_col.append(T_stages)
            status_col.append("ok")
            rows.append(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, filename), rows, leading=[("stages", stage_col), ("status", status_col)])
    return list(zip(stage_col, status_col, rows))


def _ablation_eval(cfg, det, T_stages, threads):
    runners = [make_runner(DetectorSpec(f"robnet_T{T_stages}", "robnet"), cfg, detector=det)]
    Hc_fixed = fixed_channel(cfg) if cfg.channel_mode == "channel_specific" else None
    rows = []
    for p, snr in enumerate(cfg.snr_grid_db):
        rows.extend(_evaluate_point(cfg, runners, p, snr, 0.0, threads, Hc_fixed))
    return rows


# ----------------------------------------------------------------------------
# constellation scatter


@dataclass
class ScatterDump:
    true_symbols: np.ndarray
    est_symbols: np.ndarray
    correct: np.ndarray

    @property
    def spread(self):
        """RMS distance of the estimates to their true lattice symbols."""
        return float(np.sqrt(np.mean(np.abs(self.est_symbols - self.true_symbols) ** 2)))


def dump_constellation(cfg, spec=None, out_dir=None, snr_db=None, n_samples=None, detector=None,
                       label=None, threads=1):
    """Recovered-symbol scatter for one detector (``n_samples`` trials x K users)."""
    spec = spec or cfg.scatter_detector
    snr_db = cfg.scatter_snr_db if snr_db is None else snr_db
    n_samples = cfg.scatter_samples if n_samples is None else n_samples
    if n_samples < 1:
        raise ConfigError("scatter needs n_samples >= 1", key="scatter_samples")
    if detector is not None:
        run = make_runner(DetectorSpec(label or detector.kind, detector.kind), cfg, detector=detector)
    elif spec is not None:
        run = make_runner(spec, cfg)
    else:
        raise ConfigError("missing required key 'scatter_detector'", key="scatter_detector")
    rho = float(mimo.db_to_linear(snr_db)) if np.isfinite(snr_db) else np.inf
    Hc_fixed = fixed_channel(cfg) if cfg.channel_mode == "channel_specific" else None
    true_c, est_c, ok_c = [], [], []
    for lo in range(0, n_samples, CHUNK):
        hi = min(lo + CHUNK, n_samples)
        x, _, y, H = generate_trials(cfg, 0, lo, hi, rho, 0.0, Hc_fixed)
        x_est, _ = run(y, H, rho if np.isfinite(rho) else 1e12)
        sym, _ = mimo.nearest_symbol(x_est, cfg.constellation)
        tc, ec, sc = (mimo.complexify_vector(v) for v in (x, x_est, sym))
        true_c.append(tc.ravel())
        est_c.append(ec.ravel())
        ok_c.append((sc == tc).ravel())
    dump = ScatterDump(np.concatenate(true_c), np.concatenate(est_c), np.concatenate(ok_c))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scatter.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true_re", "true_im", "est_re", "est_im", "correct"])
            for t, e, c in zip(dump.true_symbols, dump.est_symbols, dump.correct):
                w.writerow([_fmt(t.real), _fmt(t.imag), _fmt(e.real), _fmt(e.imag), int(c)])
        summary = {
            "detector": run.label,
            "snr_db": snr_db,
            "n_samples": n_samples,
            "points": int(len(dump.correct)),
            "cluster_spread_rms": dump.spread,
            "symbol_error_rate": float(1.0 - dump.correct.mean()),
        }
        with open(os.path.join(out_dir, "scatter_summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return dump
