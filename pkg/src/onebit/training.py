"""Minibatch generation and the Adam training loop."""

import csv
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from onebit import mimo
from onebit.checkpoint import checkpoint_from_detector
from onebit.diffkit import AdamState, Tape, adam_step
from onebit.errors import InvalidArgument, NumericalDivergence
from onebit.losses import constellation_loss

log = logging.getLogger(__name__)

SMOOTHING_WINDOW = 100


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    num_batches: int = 20_000
    train_snr_db: float = 15.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2 (batch normalisation)")
        if self.num_batches < 1:
            raise InvalidArgument("num_batches must be >= 1")


def make_minibatch(channel_mode, constellation, k_users, n_rx, snr_db, batch_size, rng):
    """One training minibatch sharing a single channel.

    ``channel_mode`` is ``"general"`` (fresh Rayleigh draw) or a complex
    ``(N, K)`` matrix used as-is (channel-specific training; normalise it
    beforehand). Returns a dict with real-stacked ``H [2N, 2K]``, ``x``,
    ``y``, ``x_target`` (``[B, 2K]`` / ``[B, 2N]``) and the complex ``Hc``.
    """
    gen = mimo.as_generator(rng)
    if isinstance(channel_mode, str):
        if channel_mode != "general":
            raise InvalidArgument(f"unknown channel mode {channel_mode!r}")
        Hc = mimo.sample_rayleigh_channel(n_rx, k_users, gen)
    else:
        Hc = np.asarray(channel_mode, dtype=complex)
        if Hc.shape != (n_rx, k_users):
            raise InvalidArgument(f"fixed channel has shape {Hc.shape}, expected {(n_rx, k_users)}")
    H = mimo.realify_channel(Hc)
    bits, xc = mimo.sample_symbols(constellation, k_users, gen, size=(batch_size,))
    x = mimo.realify_vector(xc)
    r = mimo.transmit(H, x, mimo.db_to_linear(snr_db), constellation, gen)
    return {"Hc": Hc, "H": H, "x": x, "y": mimo.one_bit_quantize(r), "x_target": x.copy(), "bits": bits}


@dataclass
class TrainResult:
    checkpoint: object
    losses: np.ndarray

    def smoothed(self, window=SMOOTHING_WINDOW):
        return smooth_trace(self.losses, window)


def smooth_trace(losses, window=SMOOTHING_WINDOW):
    """Trailing moving average (shorter window at the start)."""
    losses = np.asarray(losses, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(losses)])
    idx = np.arange(1, len(losses) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_loss_trace(losses, path, window=SMOOTHING_WINDOW):
    sm = smooth_trace(losses, window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_index", "raw_loss", "smoothed_loss"])
        for i, (raw, s) in enumerate(zip(losses, sm)):
            w.writerow([i, f"{raw:.9g}", f"{s:.9g}"])


def train(detector, train_cfg, loss_cfg, channel_mode="general", progress_every=0):
    """Optimise ``detector`` in place and return a :class:`TrainResult`.

    Minibatch ``i`` is drawn from stream ``(seed, i)``, so runs are
    reproducible bit-for-bit. A non-finite loss aborts with
    :class:`NumericalDivergence` whose payload is the last good checkpoint.
    """
    if loss_cfg.constellation != detector.constellation.name:
        raise InvalidArgument(
            f"loss is set up for {loss_cfg.constellation}, detector uses {detector.constellation.name}"
        )
    named = list(detector.named_parameters())
    params = [p for _, p in named]
    state = AdamState(learning_rate=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    root = mimo.RngStream(train_cfg.seed)
    losses = np.empty(train_cfg.num_batches)
    meta = {"train": asdict(train_cfg), "loss": asdict(loss_cfg)}
    detector.train()
    t0 = time.perf_counter()
    for i in range(train_cfg.num_batches):
        batch = make_minibatch(
            channel_mode,
            detector.constellation,
            detector.k_users,
            detector.n_rx,
            train_cfg.train_snr_db,
            train_cfg.batch_size,
            root.child(i),
        )
        detector.zero_grad()
        with Tape() as tape:
            out = detector.forward(batch["y"], batch["H"])
            loss = constellation_loss(out, batch["x_target"], loss_cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            detector.eval()
            last_good = checkpoint_from_detector(
                detector, state, dict(meta, batches_completed=i, final_loss=float(losses[i - 1]) if i else None)
            )
            raise NumericalDivergence(f"non-finite loss at batch {i}", payload=last_good)
        tape.backward(loss, params)
        updated = adam_step({n: p.data for n, p in named}, {n: p.grad for n, p in named}, state)
        for n, p in named:
            p.data = updated[n]
        losses[i] = value
        if progress_every and (i + 1) % progress_every == 0:
            log.info("batch %d/%d loss %.5g (%.1fs)", i + 1, train_cfg.num_batches,
                     smooth_trace(losses[: i + 1])[-1], time.perf_counter() - t0)
    detector.eval()
    meta.update(batches_completed=train_cfg.num_batches, final_loss=float(losses[-1]))
    return TrainResult(checkpoint_from_detector(detector, state, meta), losses)
