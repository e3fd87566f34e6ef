"""Labeled random streams derived from one root seed.

Each consumer (weight init, task sampling, latents, interpolation draws,
evaluation/montage sampling) gets its own PCG64 stream, so changing how
often one of them runs never perturbs the others.  Stream states pack to
40 bytes for exact checkpoint round-trips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_LABELS = ("init", "task", "latent", "eps", "sample")
STATE_BYTES = 40


@dataclass
class RngStreams:
    init: np.random.Generator
    task: np.random.Generator
    latent: np.random.Generator
    eps: np.random.Generator
    sample: np.random.Generator

    def get(self, label: str) -> np.random.Generator:
        return getattr(self, label)


def make_streams(seed: int) -> RngStreams:
    gens = {
        label: np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(seed, spawn_key=(i,))))
        for i, label in enumerate(STREAM_LABELS)
    }
    return RngStreams(**gens)


def state_to_bytes(gen: np.random.Generator) -> bytes:
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 streams are serializable")
    inner = st["state"]
    return (inner["state"].to_bytes(16, "little")
            + inner["inc"].to_bytes(16, "little")
            + int(st["has_uint32"]).to_bytes(4, "little")
            + int(st["uinteger"]).to_bytes(4, "little"))


def state_from_bytes(raw: bytes) -> np.random.Generator:
    if len(raw) != STATE_BYTES:
        raise ValueError(f"expected {STATE_BYTES} state bytes, got {len(raw)}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(raw[0:16], "little"),
            "inc": int.from_bytes(raw[16:32], "little"),
        },
        "has_uint32": int.from_bytes(raw[32:36], "little"),
        "uinteger": int.from_bytes(raw[36:40], "little"),
    }
    return np.random.Generator(bg)


def streams_to_states(streams: RngStreams) -> dict[str, bytes]:
    return {label: state_to_bytes(streams.get(label)) for label in STREAM_LABELS}


def streams_from_states(states: dict[str, bytes]) -> RngStreams:
    missing = set(STREAM_LABELS) - set(states)
    if missing:
        raise ValueError(f"missing stream states: {sorted(missing)}")
    return RngStreams(**{label: state_from_bytes(states[label])
                         for label in STREAM_LABELS})
