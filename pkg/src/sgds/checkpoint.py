"""On-disk state checkpoints: adapters, classifier/Gaussian blob, counters."""
from __future__ import annotations

import os
import struct

import numpy as np

from .masking import ActivationCounters
from .model import FrozenBackbone, load_adapter, save_adapter
from .numerics import ContractViolation
from .training import ContinualState

STATS_MAGIC = b"SGDSSTA1"
STATS_VERSION = 1


def save_state(dirpath, state: ContinualState) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, adapter in enumerate(state.adapters):
        save_adapter(os.path.join(dirpath, f"adapter_{i:03d}.sgdsadp"),
                     adapter, state.backbone.num_blocks, state.backbone.width)
    d = state.backbone.width
    bitmap = 0
    for l in state.target_layers:
        bitmap |= 1 << l
    with open(os.path.join(dirpath, "stats.bin"), "wb") as f:
        f.write(STATS_MAGIC)
        f.write(struct.pack("<IIIQdB", STATS_VERSION, len(state.class_ids), d,
                            bitmap, state.k, int(state.masked_inference)))
        for row, c in enumerate(state.class_ids):
            mean, var = state.class_stats[c]
            f.write(struct.pack("<I", c))
            f.write(np.ascontiguousarray(mean, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(var, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(state.classifier[row], dtype="<f8").tobytes())
    state.counters.dump_csv(os.path.join(dirpath, "counters.csv"))


def load_state(dirpath, backbone: FrozenBackbone) -> ContinualState:
    path = os.path.join(dirpath, "stats.bin")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != STATS_MAGIC:
        raise ContractViolation("bad stats checkpoint magic")
    hdr = struct.calcsize("<IIIQdB")
    version, n_classes, d, bitmap, k, masked = struct.unpack_from("<IIIQdB", blob, 8)
    if version != STATS_VERSION:
        raise ContractViolation(f"unsupported stats version {version}")
    if d != backbone.width:
        raise ContractViolation("checkpoint width does not match backbone")
    target_layers = tuple(l for l in range(64) if bitmap & (1 << l))
    class_ids, class_stats, rows = [], {}, []
    off = 8 + hdr
    for _ in range(n_classes):
        (c,) = struct.unpack_from("<I", blob, off)
        off += 4
        mean = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
        off += 8 * d
        var = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
        off += 8 * d
        row = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
        off += 8 * d
        class_ids.append(int(c))
        class_stats[int(c)] = (mean, var)
        rows.append(row)
    state = ContinualState(
        backbone=backbone, target_layers=target_layers, k=k,
        masked_inference=bool(masked),
        classifier=np.stack(rows) if rows else np.zeros((0, d)),
        class_ids=class_ids, class_stats=class_stats,
        counters=ActivationCounters(target_layers, d),
    )
    names = sorted(n for n in os.listdir(dirpath) if n.endswith(".sgdsadp"))
    for name in names:
        adapter, _, _ = load_adapter(os.path.join(dirpath, name))
        state.adapters.append(adapter)
    return state
