"""Checkpoint container.

Layout::

    ONEBIT-CKPT\\n
    <one line of JSON header>\\n
    <payload: concatenated little-endian IEEE-754 arrays>

The header carries ``format_version``, ``width`` (32 or 64), the architecture
descriptor, training metadata, optional Adam scalars and the ordered list of
``{"name", "group", "shape"}`` entries describing the payload.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from onebit.diffkit import AdamState
from onebit.errors import InvalidArgument, LoadError
from onebit.neural import build_detector

MAGIC = b"ONEBIT-CKPT\n"
FORMAT_VERSION = 1
_GROUPS = ("param", "buffer", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    architecture: dict
    params: dict
    buffers: dict
    optimizer: AdamState = None
    metadata: dict = field(default_factory=dict)


def checkpoint_from_detector(detector, optimizer=None, metadata=None):
    return Checkpoint(
        architecture=detector.architecture(),
        params={n: p.data.copy() for n, p in detector.named_parameters()},
        buffers={n: b.copy() for n, b in detector.named_buffers()},
        optimizer=optimizer,
        metadata=dict(metadata or {}),
    )


def _check_against(detector, ckpt):
    for group, expected, given in (
        ("parameter", dict(detector.named_parameters()), ckpt.params),
        ("buffer", dict(detector.named_buffers()), ckpt.buffers),
    ):
        missing = set(expected) - set(given)
        extra = set(given) - set(expected)
        if missing or extra:
            raise LoadError(
                f"{group} names do not match the architecture "
                f"(missing={sorted(missing)[:3]}, unexpected={sorted(extra)[:3]})"
            )
        for name, ref in expected.items():
            shape = ref.shape if isinstance(ref, np.ndarray) else ref.data.shape
            if given[name].shape != shape:
                raise LoadError(f"{group} {name!r} has shape {given[name].shape}, architecture wants {shape}")


def detector_from_checkpoint(ckpt):
    det = build_detector(ckpt.architecture)
    _check_against(det, ckpt)
    for name, p in det.named_parameters():
        p.data = np.array(ckpt.params[name], dtype=np.float64)
    for name, b in det.named_buffers():
        b[...] = ckpt.buffers[name]
    det.eval()
    return det


def save_checkpoint(ckpt, path, width=64):
    """Write ``ckpt`` atomically (temp file in the target directory, then rename)."""
    if width not in (32, 64):
        raise InvalidArgument(f"width must be 32 or 64, got {width}")
    dtype = np.dtype("<f8" if width == 64 else "<f4")
    entries, chunks = [], []

    def put(group, name, arr):
        arr = np.asarray(arr)
        entries.append({"name": name, "group": group, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    for name, arr in ckpt.params.items():
        put("param", name, arr)
    for name, arr in ckpt.buffers.items():
        put("buffer", name, arr)
    opt = None
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        opt = {
            "learning_rate": st.learning_rate,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "epsilon": st.epsilon,
            "weight_decay": st.weight_decay,
            "step": st.step,
        }
        for name in st.m:
            put("adam_m", name, st.m[name])
            put("adam_v", name, st.v[name])
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "width": width,
        "architecture": ckpt.architecture,
        "metadata": ckpt.metadata,
        "optimizer": opt,
        "arrays": entries,
        "payload_bytes": len(payload),
    }
    blob = MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected=None):
    """Read and validate a checkpoint.

    ``expected`` optionally maps architecture keys (kind, K, N, constellation, T)
    to required values; any disagreement raises :class:`LoadError`.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise LoadError("not a onebit checkpoint (bad magic)")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise LoadError("truncated header")
    try:
        header = json.loads(raw[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported format version {header.get('format_version')!r}")
    width = header.get("width")
    if width not in (32, 64):
        raise LoadError(f"invalid width field {width!r}")
    dtype = np.dtype("<f8" if width == 64 else "<f4")
    payload = raw[nl + 1:]
    try:
        sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed array table: {exc}") from exc
    need = sum(sizes) * dtype.itemsize
    if len(payload) != need or header.get("payload_bytes") != need:
        raise LoadError(f"payload is {len(payload)} bytes, header describes {need}")

    groups = {g: {} for g in _GROUPS}
    offset = 0
    for entry, n in zip(header["arrays"], sizes):
        if entry["group"] not in groups:
            raise LoadError(f"unknown array group {entry['group']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=n, offset=offset).astype(np.float64)
        groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"])
        offset += n * dtype.itemsize

    arch = header["architecture"]
    for key, value in (expected or {}).items():
        if arch.get(key) != value:
            raise LoadError(f"architecture mismatch: checkpoint has {key}={arch.get(key)!r}, expected {value!r}")

    opt = None
    if header.get("optimizer") is not None:
        opt = AdamState(**header["optimizer"], m=groups["adam_m"], v=groups["adam_v"])
    ckpt = Checkpoint(arch, groups["param"], groups["buffer"], opt, header.get("metadata", {}))
    try:
        _check_against(build_detector(arch), ckpt)
    except LoadError:
        raise
    except (InvalidArgument, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"invalid architecture descriptor: {exc}") from exc
    return ckpt
