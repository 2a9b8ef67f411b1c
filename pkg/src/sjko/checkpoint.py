"""Binary checkpoints: magic bytes, versioned JSON header, raw float64 segments.

Layout: ``b"SJKO"``, format version (u32 LE), header length (u32 LE), UTF-8
JSON header, then every parameter segment as little-endian float64 in the
order the header declares.  The header carries the architecture specs, the
full config echo, phase counters, optimizer scalars, and the serialized
random stream, so loading a phase checkpoint and continuing reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamVector
from .nets import AdamState, MLPSpec, TransportRef, identity_ref
from .rng import StreamRng
from .trainer import Trainer

MAGIC = b"SJKO"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or version-incompatible checkpoint file."""


def _segment_entries(prefix: str, params: ParamVector) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.{name}", arr) for name, arr in params.items()]


def _adam_header(state: AdamState) -> dict:
    return {"t": state.t, "skipped": state.skipped, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps}


def save_checkpoint(path, trainer: Trainer, config_sections: dict) -> None:
    """Write the trainer's full state; valid only at phase boundaries."""
    if trainer.sequential_reference:
        raise CheckpointError("the sequential timing-reference mode is not checkpointable")
    state = trainer.state
    segments: list[tuple[str, np.ndarray]] = []
    segments += _segment_entries("transport", state.transport_params)
    segments += _segment_entries("potential", state.potential_params)
    if not state.frozen.is_identity:
        segments += _segment_entries("frozen", state.frozen.params)
    segments.append(("adam_transport.m", state.adam_transport.m))
    segments.append(("adam_transport.v", state.adam_transport.v))
    segments.append(("adam_potential.m", state.adam_potential.m))
    segments.append(("adam_potential.v", state.adam_potential.v))

    header = {
        "format_version": FORMAT_VERSION,
        "created_unix": time.time(),
        "config": config_sections,
        "method": trainer.method,
        "phase": state.phase,
        "global_iter": state.global_iter,
        "transport_spec": trainer.transport_spec.to_dict(),
        "potential_spec": trainer.potential_spec.to_dict(),
        "frozen_identity": state.frozen.is_identity,
        "adam_transport": _adam_header(state.adam_transport),
        "adam_potential": _adam_header(state.adam_potential),
        "rng": state.rng.state(),
        "segments": [{"name": name, "shape": list(arr.shape)} for name, arr in segments],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in segments:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class CheckpointData:
    """Decoded checkpoint: header fields plus named segment arrays."""

    header: dict
    segments: dict[str, np.ndarray]

    @property
    def config_sections(self) -> dict:
        return self.header["config"]

    @property
    def phase(self) -> int:
        return self.header["phase"]

    def _group(self, prefix: str) -> ParamVector:
        entries = [(e["name"].split(".", 1)[1], self.segments[e["name"]])
                   for e in self.header["segments"] if e["name"].startswith(prefix + ".")]
        return ParamVector(entries)

    def transport_params(self) -> ParamVector:
        return self._group("transport")

    def potential_params(self) -> ParamVector:
        return self._group("potential")

    def transport_spec(self) -> MLPSpec:
        return MLPSpec.from_dict(self.header["transport_spec"])

    def potential_spec(self) -> MLPSpec:
        return MLPSpec.from_dict(self.header["potential_spec"])

    def frozen_ref(self) -> TransportRef:
        if self.header["frozen_identity"]:
            return identity_ref()
        return TransportRef(spec=self.transport_spec(), params=self._group("frozen"))

    def adam_state(self, key: str) -> AdamState:
        meta = self.header[key]
        return AdamState(
            m=self.segments[f"{key}.m"], v=self.segments[f"{key}.v"],
            t=meta["t"], beta1=meta["beta1"], beta2=meta["beta2"],
            eps=meta["eps"], skipped=meta["skipped"],
        )


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header ({err})") from err
    offset = 12 + header_len
    segments: dict[str, np.ndarray] = {}
    for entry in header["segments"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated segment {entry['name']}")
        flat = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8")
        segments[entry["name"]] = flat.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return CheckpointData(header=header, segments=segments)


def restore_trainer_state(trainer: Trainer, data: CheckpointData) -> None:
    """Overwrite a freshly built trainer's state with the checkpointed one."""
    if data.header["method"] != trainer.method:
        raise CheckpointError("checkpoint method disagrees with the requested trainer")
    if data.transport_spec() != trainer.transport_spec or \
            data.potential_spec() != trainer.potential_spec:
        raise CheckpointError("checkpoint architecture disagrees with the configuration")
    state = trainer.state
    state.transport_params = data.transport_params()
    state.potential_params = data.potential_params()
    state.adam_transport = data.adam_state("adam_transport")
    state.adam_potential = data.adam_state("adam_potential")
    state.frozen = data.frozen_ref()
    state.rng = StreamRng.from_state(data.header["rng"])
    state.phase = data.header["phase"]
    state.global_iter = data.header["global_iter"]
