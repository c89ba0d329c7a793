"""Self-describing ``.npz`` checkpoints.

The archive holds one array per parameter plus a JSON header with the model
kind, dimensions, seed, and the parameter names in declared order. Arrays are
stored losslessly, so a round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .encoder import CausalEncoder
from .heads import MlpHead, QHead, VHead
from .reward import QRewardModel, VRewardModel

FORMAT = "rankward-checkpoint/1"
ENCODER_KEYS = ("input_embeddings", "recurrence", "bias")


def _state(model) -> dict[str, np.ndarray]:
    enc = model.encoder
    state = {k: getattr(enc, k) for k in ENCODER_KEYS}
    if model.kind == "q":
        head = model.head
        state["baseline_weights"] = head.baseline_weights
        state["interaction"] = head.interaction
        state["output_embeddings"] = head.output_embeddings
        if head.mlp is not None:
            state["mlp_w1"] = head.mlp.w1
            state["mlp_w2"] = head.mlp.w2
    else:
        state["readout"] = model.head.readout
    return state


def save_checkpoint(path, model, seed: int | None = None, extra: dict | None = None) -> None:
    state = _state(model)
    header = {
        "format": FORMAT,
        "kind": model.kind,
        "vocab_size": model.vocab_size,
        "dim": model.dim,
        "channels": model.channels,
        "seed": seed,
        "params": list(state),
        "use_baseline": bool(getattr(model.head, "use_baseline", True)),
        "extra": extra or {},
    }
    arrays = {f"p_{k}": np.asarray(v) for k, v in state.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["header"]).decode())


def load_checkpoint(path):
    """Rebuild the model saved by :func:`save_checkpoint`; returns ``(model, header)``."""
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a rankward checkpoint")
        p = {k: np.array(z[f"p_{k}"]) for k in header["params"]}
    enc = CausalEncoder(p["input_embeddings"], p["recurrence"], p["bias"])
    if header["kind"] == "q":
        mlp = MlpHead(p["mlp_w1"], p["mlp_w2"]) if "mlp_w1" in p else None
        head = QHead(p["baseline_weights"], p["interaction"], p["output_embeddings"], header["use_baseline"], mlp)
        model = QRewardModel(enc, head)
    elif header["kind"] == "v":
        model = VRewardModel(enc, VHead(p["readout"]))
    else:
        raise ValueError(f"unknown model kind {header['kind']!r}")
    return model, header


def parameter_digest(model) -> str:
    """SHA-256 over every parameter's bytes in declared order."""
    h = hashlib.sha256()
    for k, v in _state(model).items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()
