"""Procedural bouncing-sprite sequences and the raw dataset file format.

Sprites are small procedural glyphs (digit-shaped segment glyphs, filled
blocks, or crosses) moving at constant speed on a black canvas. Walls
reflect: the position is mirrored about the wall and the velocity component
negates, so the speed magnitude is conserved exactly. Overlaps composite by
per-pixel maximum. Sub-pixel positions render at the nearest integer pixel,
which keeps the free-flight trajectories exactly reproducible.

The action-augmented mode perturbs every sprite's velocity each step by a
commanded random delta, and reports that delta as the action vector; speed
is then no longer conserved by construction.

Dataset files ("STPD") hold a batch of sequences as raw little-endian f32
with a fixed 28-byte header; round trips are bit-exact.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .network import FrameSequence
from .rng import Rng
from .tensor import ContractError

STYLES = ("digit_glyph", "block", "cross")

# 3x5 segment glyphs for the ten digits, row-major top to bottom
_FONT = [
    ("111", "101", "101", "101", "111"),
    ("010", "110", "010", "010", "111"),
    ("111", "001", "111", "100", "111"),
    ("111", "001", "111", "001", "111"),
    ("101", "101", "111", "001", "001"),
    ("111", "100", "111", "001", "111"),
    ("111", "100", "111", "101", "111"),
    ("111", "001", "010", "010", "010"),
    ("111", "101", "111", "101", "111"),
    ("111", "101", "111", "001", "111"),
]


@dataclass
class DatasetConfig:
    num_sprites: int = 2
    canvas: int = 64
    sprite_size: int = 12
    speed_min: float = 2.0
    speed_max: float = 4.0
    length: int = 20
    style: str = "digit_glyph"
    with_actions: bool = False
    action_strength: float = 0.5

    def __post_init__(self):
        if self.style not in STYLES:
            raise ContractError(f"unknown sprite style {self.style!r}")
        if self.num_sprites < 1 or self.length < 1:
            raise ContractError("need at least one sprite and one frame")
        if not 1 <= self.sprite_size <= self.canvas:
            raise ContractError(f"sprite size {self.sprite_size} does not fit "
                                f"canvas {self.canvas}")
        if not 0.0 < self.speed_min <= self.speed_max:
            raise ContractError("speed range must be positive and ordered")
        if self.with_actions and self.action_strength <= 0:
            raise ContractError("action_strength must be positive")


def glyph_bitmap(style: str, index: int, size: int) -> np.ndarray:
    """A size x size float bitmap in [0,1] for one sprite."""
    if style == "block":
        return np.ones((size, size), dtype=np.float32)
    if style == "cross":
        bm = np.zeros((size, size), dtype=np.float32)
        lo, hi = size // 3, size - size // 3
        bm[lo:hi, :] = 1.0
        bm[:, lo:hi] = 1.0
        return bm
    glyph = np.array([[float(ch) for ch in row] for row in _FONT[index % 10]],
                     dtype=np.float32)
    rows = (np.arange(size) * glyph.shape[0]) // size
    cols = (np.arange(size) * glyph.shape[1]) // size
    return glyph[np.ix_(rows, cols)]


@dataclass
class Sprite:
    x: float  # top-left corner, pixels
    y: float
    vx: float  # pixels per step
    vy: float
    bitmap: np.ndarray


@dataclass
class SpriteWorld:
    sprites: list
    canvas: int


def gen_world(cfg: DatasetConfig, rng: Rng) -> SpriteWorld:
    """Random initial world: positions uniform in the valid box, velocity
    direction uniform on the circle, magnitude uniform in the speed range."""
    bound = cfg.canvas - cfg.sprite_size
    sprites = []
    for i in range(cfg.num_sprites):
        r = rng.split("sprite", i)
        glyph = int(r.integers(0, 10))
        pos = r.uniform((2,), 0.0, bound)
        angle = float(r.uniform((1,), 0.0, 2.0 * math.pi)[0])
        speed = float(r.uniform((1,), cfg.speed_min, cfg.speed_max)[0])
        sprites.append(Sprite(x=float(pos[0]), y=float(pos[1]),
                              vx=speed * math.cos(angle),
                              vy=speed * math.sin(angle),
                              bitmap=glyph_bitmap(cfg.style, glyph,
                                                  cfg.sprite_size)))
    return SpriteWorld(sprites=sprites, canvas=cfg.canvas)


def _reflect(p: float, v: float, hi: float) -> tuple[float, float]:
    """Advance one step along one axis, mirroring about any crossed wall."""
    p = p + v
    while p < 0.0 or p > hi:
        if p < 0.0:
            p, v = -p, -v
        else:
            p, v = 2.0 * hi - p, -v
    return p, v


def step_world(world: SpriteWorld) -> SpriteWorld:
    out = []
    for s in world.sprites:
        hi = float(world.canvas - s.bitmap.shape[0])
        x, vx = _reflect(s.x, s.vx, hi)
        y, vy = _reflect(s.y, s.vy, hi)
        out.append(replace(s, x=x, y=y, vx=vx, vy=vy))
    return SpriteWorld(sprites=out, canvas=world.canvas)


def kick_world(world: SpriteWorld, dv: np.ndarray) -> SpriteWorld:
    """Apply one commanded velocity change (dvx, dvy) to every sprite."""
    return SpriteWorld(
        sprites=[replace(s, vx=s.vx + float(dv[0]), vy=s.vy + float(dv[1]))
                 for s in world.sprites],
        canvas=world.canvas)


def render_world(world: SpriteWorld) -> np.ndarray:
    """Composite to a [1, canvas, canvas] frame by per-pixel maximum."""
    h = w = world.canvas
    frame = np.zeros((1, h, w), dtype=np.float32)
    for s in world.sprites:
        size = s.bitmap.shape[0]
        ix, iy = int(np.rint(s.x)), int(np.rint(s.y))
        if not (0 <= ix <= w - size and 0 <= iy <= h - size):
            raise ContractError(f"sprite out of canvas at ({s.x}, {s.y})")
        region = frame[0, iy:iy + size, ix:ix + size]
        np.maximum(region, s.bitmap, out=region)
    return frame


def gen_sequence(cfg: DatasetConfig, rng: Rng) -> FrameSequence:
    """One simulated sequence as a batch of size 1."""
    world = gen_world(cfg, rng)
    frames = np.zeros((1, cfg.length, 1, cfg.canvas, cfg.canvas), np.float32)
    actions = None
    if cfg.with_actions:
        a = cfg.action_strength
        actions = rng.split("actions").uniform(
            (1, max(cfg.length - 1, 1), 2), -a, a).astype(np.float32)
    for t in range(cfg.length):
        frames[0, t] = render_world(world)
        if t + 1 < cfg.length:
            if actions is not None:
                world = kick_world(world, actions[0, t])
            world = step_world(world)
    return FrameSequence(frames, actions)


def gen_batch(cfg: DatasetConfig, rng: Rng, n: int) -> FrameSequence:
    """n independent sequences stacked along the batch axis."""
    if n < 1:
        raise ContractError("batch size must be >= 1")
    seqs = [gen_sequence(cfg, rng.split("seq", i)) for i in range(n)]
    frames = np.concatenate([s.frames for s in seqs], axis=0)
    actions = None
    if cfg.with_actions:
        actions = np.concatenate([s.actions for s in seqs], axis=0)
    return FrameSequence(frames, actions)


def split_context_target(seq: FrameSequence, T: int, K: int
                         ) -> tuple[np.ndarray, np.ndarray]:
    """First T frames and the next K, as [N, ., J, H, W] arrays."""
    if T < 1 or K < 0:
        raise ContractError(f"need T >= 1 and K >= 0, got T={T}, K={K}")
    if seq.steps < T + K:
        raise ContractError(f"sequence length {seq.steps} < T+K = {T + K}")
    return seq.frames[:, :T], seq.frames[:, T:T + K]


# --- dataset files ----------------------------------------------------------------

_MAGIC = b"STPD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, n, steps, J, H, W


def save_dataset(path: str, seq: FrameSequence) -> None:
    """Raw little-endian f32 frames behind a fixed header. Actions, when
    present, are not stored; file datasets are for the action-free tasks."""
    n, steps, j, h, w = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, steps, j, h, w))
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def load_dataset(path: str) -> FrameSequence:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ContractError("dataset file truncated in header")
        magic, version, n, steps, j, h, w = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ContractError(f"not a dataset file (magic {magic!r})")
        if version != _VERSION:
            raise ContractError(f"unsupported dataset version {version}")
        count = n * steps * j * h * w
        payload = fh.read(count * 4 + 1)
        if len(payload) != count * 4:
            raise ContractError(f"dataset payload length {len(payload)} does "
                                f"not match header ({count} floats)")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, steps, j, h, w)
    return FrameSequence(frames.copy())
