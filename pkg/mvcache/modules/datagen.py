"""Datagen module - synthetic frame sequences with ground-truth motion.

Scenarios:
    static      every frame identical
    pan         the whole frame moves by (dy, dx) per frame; the revealed
                edge shows fresh texture
    two_region  a panning background plus a textured object moving with
                its own velocity (bouncing off the borders)
    reveal      a flat occluder that grows and shrinks over a (optionally
                panning) background
    scramble    every block is re-sampled from the previous frame at a
                random per-block offset (edge-replicated)

Motion follows the backward convention: frame_t(p) = frame_{t-1}(p − mv).
A sequence directory holds frame_NNNNN.bin files (raw little-endian
float32, H×W×C row-major) and manifest.json.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from mvcache.core.data_loader import MANIFEST_SCHEMA, DataValidationError, get_global_loader
from mvcache.core.errors import InvalidArgumentError, UsageError
from mvcache.core.motion import MVField
from mvcache.core.tensor import FeatureMap

logger = logging.getLogger(__name__)

SCENARIOS = ("static", "pan", "two_region", "reveal", "scramble")
MANIFEST_VERSION = 1
DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "static": {},
    "pan": {"dy": 0, "dx": 4},
    "two_region": {"bg_dy": 0, "bg_dx": 4, "fg_dy": 4, "fg_dx": -8},
    "reveal": {"dy": 0, "dx": 0},
    "scramble": {"radius": 8},
}


@dataclass
class FrameSequence:
    """Frames, per-frame ground-truth block motion and the manifest."""
    frames: List[FeatureMap]
    motion: List[MVField]
    manifest: Dict[str, Any]

    @property
    def scenario(self) -> str:
        return self.manifest["scenario"]

    def __len__(self) -> int:
        return len(self.frames)


def _texture(rng: np.random.Generator, h: int, w: int, c: int, cell: int = 8) -> np.ndarray:
    gh, gw = -(-h // cell), -(-w // cell)
    coarse = np.kron(rng.random((gh, gw, c)), np.ones((cell, cell, 1)))[:h, :w]
    fine = rng.random((h, w, c))
    return (0.6 * coarse + 0.4 * fine).astype(np.float32)


def _block_centers(h: int, w: int, block: int) -> Tuple[np.ndarray, np.ndarray]:
    ci = np.arange(h // block) * block + block // 2
    cj = np.arange(w // block) * block + block // 2
    return np.meshgrid(ci, cj, indexing="ij")


def _uniform(h: int, w: int, block: int, dy: int, dx: int) -> MVField:
    return MVField.uniform(h // block, w // block, dy, dx, block)


def _pan_frames(rng, frames, h, w, c, block, dy, dx):
    span = frames - 1
    world = _texture(rng, h + span * abs(dy), w + span * abs(dx), c)
    oy, ox = span * max(dy, 0), span * max(dx, 0)
    out, motion = [], []
    for t in range(frames):
        top, left = oy - t * dy, ox - t * dx
        out.append(world[top : top + h, left : left + w].copy())
        motion.append(_uniform(h, w, block, dy, dx) if t else _uniform(h, w, block, 0, 0))
    return out, motion


def _static(rng, frames, h, w, c, block, params):
    frame = _texture(rng, h, w, c)
    return [frame.copy() for _ in range(frames)], [_uniform(h, w, block, 0, 0) for _ in range(frames)]


def _pan(rng, frames, h, w, c, block, params):
    return _pan_frames(rng, frames, h, w, c, block, int(params["dy"]), int(params["dx"]))


def _two_region(rng, frames, h, w, c, block, params):
    bg, bg_motion = _pan_frames(rng, frames, h, w, c, block, int(params["bg_dy"]), int(params["bg_dx"]))
    oh, ow = max(1, (3 * h) // 8), max(1, (3 * w) // 8)
    obj = _texture(rng, oh, ow, c)
    vy, vx = int(params["fg_dy"]), int(params["fg_dx"])
    py, px = (h - oh) // 2, (w - ow) // 2
    ci, cj = _block_centers(h, w, block)
    out, motion = [], []
    for t in range(frames):
        if t:
            if not 0 <= py + vy <= h - oh:
                vy = -vy
            if not 0 <= px + vx <= w - ow:
                vx = -vx
            py, px = py + vy, px + vx
        frame = bg[t]
        frame[py : py + oh, px : px + ow] = obj
        out.append(frame)
        inside = (ci >= py) & (ci < py + oh) & (cj >= px) & (cj < px + ow)
        base = bg_motion[t]
        if t:
            dy = np.where(inside, vy, base.dy)
            dx = np.where(inside, vx, base.dx)
            motion.append(MVField(block, dy, dx))
        else:
            motion.append(base)
    return out, motion


def _reveal(rng, frames, h, w, c, block, params):
    dy, dx = int(params["dy"]), int(params["dx"])
    bg, bg_motion = _pan_frames(rng, frames, h, w, c, block, dy, dx)
    max_h, max_w = h // 2, w // 2
    ci, cj = _block_centers(h, w, block)
    half = max(1, (frames - 1) / 2.0)
    out, motion = [], []
    for t in range(frames):
        phase = 1.0 - abs(t - half) / half
        oh, ow = int(round(max_h * phase)), int(round(max_w * phase))
        top, left = (h - oh) // 2, (w - ow) // 2
        frame = bg[t]
        frame[top : top + oh, left : left + ow] = 0.5
        out.append(frame)
        inside = (ci >= top) & (ci < top + oh) & (cj >= left) & (cj < left + ow)
        base = bg_motion[t]
        motion.append(MVField(block, np.where(inside, 0, base.dy), np.where(inside, 0, base.dx)))
    return out, motion


def _scramble(rng, frames, h, w, c, block, params):
    radius = int(params["radius"])
    gh, gw = h // block, w // block
    current = _texture(rng, h, w, c)
    out, motion = [current.copy()], [MVField.zeros(gh, gw, block)]
    ii, jj = np.indices((h, w))
    for _ in range(1, frames):
        vy = rng.integers(-radius, radius + 1, size=(gh, gw))
        vx = rng.integers(-radius, radius + 1, size=(gh, gw))
        py = np.kron(vy, np.ones((block, block), dtype=np.int64))
        px = np.kron(vx, np.ones((block, block), dtype=np.int64))
        src_i = np.clip(ii[: gh * block, : gw * block] - py, 0, h - 1)
        src_j = np.clip(jj[: gh * block, : gw * block] - px, 0, w - 1)
        nxt = current.copy()
        nxt[: gh * block, : gw * block] = current[src_i, src_j]
        current = nxt
        out.append(current.copy())
        motion.append(MVField(block, vy, vx))
    return out, motion


_GENERATORS = {
    "static": _static,
    "pan": _pan,
    "two_region": _two_region,
    "reveal": _reveal,
    "scramble": _scramble,
}


def generate_sequence(
    scenario: str,
    frames: int,
    height: int = 128,
    width: int = 128,
    seed: int = 0,
    block_size: int = 16,
    channels: int = 3,
    **params: Any,
) -> FrameSequence:
    """Generate a scenario in memory.

    Raises:
        UsageError: On an unknown scenario
        InvalidArgumentError: On bad dims or parameters
    """
    if scenario not in _GENERATORS:
        raise UsageError(f"Unknown scenario '{scenario}', expected one of {', '.join(SCENARIOS)}")
    if frames < 1 or height < 1 or width < 1 or channels < 1:
        raise InvalidArgumentError(f"Bad sequence geometry: {frames} frames of {height}x{width}x{channels}")
    if height % block_size or width % block_size:
        raise InvalidArgumentError(f"Frame {height}x{width} is not a multiple of block size {block_size}")
    unknown = set(params) - set(DEFAULT_PARAMS[scenario])
    if unknown:
        raise InvalidArgumentError(f"Unknown parameters for {scenario}: {sorted(unknown)}")
    merged = {**DEFAULT_PARAMS[scenario], **params}

    rng = np.random.default_rng(seed)
    data, motion = _GENERATORS[scenario](rng, frames, height, width, channels, block_size, merged)
    manifest = {
        "version": MANIFEST_VERSION,
        "scenario": scenario,
        "frames": frames,
        "height": height,
        "width": width,
        "channels": channels,
        "seed": seed,
        "block_size": block_size,
        "dtype": "<f4",
        "params": merged,
        "files": [f"frame_{t:05d}.bin" for t in range(frames)],
        "motion": [np.stack([m.dy, m.dx], axis=-1).astype(int).tolist() for m in motion],
    }
    logger.debug(f"Generated {scenario}: {frames} frames of {height}x{width}x{channels} (seed {seed})")
    return FrameSequence([FeatureMap(f) for f in data], motion, manifest)


def write_sequence(sequence: FrameSequence, out_dir: Union[str, Path]) -> Path:
    """Write frames and manifest to out_dir."""
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(sequence.manifest["files"], sequence.frames):
        (target / name).write_bytes(frame.data.astype("<f4").tobytes())
    (target / "manifest.json").write_text(json.dumps(sequence.manifest, sort_keys=True), encoding="utf-8")
    return target


def datagen(
    scenario: str,
    frames: int,
    out_dir: Union[str, Path],
    height: int = 128,
    width: int = 128,
    seed: int = 0,
    **params: Any,
) -> Path:
    """Generate a scenario and write it as a sequence directory."""
    sequence = generate_sequence(scenario, frames, height, width, seed, **params)
    path = write_sequence(sequence, out_dir)
    logger.info(f"Wrote {scenario} sequence ({frames} frames) to {path}")
    return path


def load_sequence(seq_dir: Union[str, Path]) -> FrameSequence:
    """Read a sequence directory.

    Raises:
        DataValidationError: If the manifest does not match its schema
        InvalidArgumentError: If a frame file has the wrong size
    """
    root = Path(seq_dir)
    manifest = get_global_loader().load_document(root / "manifest.json", MANIFEST_SCHEMA)
    h, w, c = manifest["height"], manifest["width"], manifest["channels"]
    block = manifest["block_size"]
    if len(manifest["files"]) != manifest["frames"] or len(manifest["motion"]) != manifest["frames"]:
        raise DataValidationError(f"{root}: manifest lists do not match frame count {manifest['frames']}")

    frames: List[FeatureMap] = []
    for name in manifest["files"]:
        raw = (root / name).read_bytes()
        if len(raw) != h * w * c * 4:
            raise InvalidArgumentError(f"{root / name} has {len(raw)} bytes, expected {h * w * c * 4}")
        frames.append(FeatureMap(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h, w, c)))
    motion = []
    for entry in manifest["motion"]:
        pairs = np.asarray(entry, dtype=np.int64).reshape(h // block, w // block, 2)
        motion.append(MVField(block, pairs[..., 0], pairs[..., 1]))
    return FrameSequence(frames, motion, manifest)
