"""Local feature masking and the baseline regularizers it is compared against.

The central transform overwrites, per training sample and with probability
``p``, one random rectangle in each of ``N`` randomly chosen feature channels
with a random constant in [0, 1). Randomness is consumed in three independent
dimensions (the sample gate, the channel subset, and each rectangle's
geometry + fill), which is what the replay and audit machinery below records.

Substream layout (the reproducibility contract): for a stream ``rng`` handed
to :func:`lfm_apply` or :func:`sample_decisions`, sample ``b`` consumes

* ``rng.child(b, "gate")``      one uniform, the gate draw ``p1``
* ``rng.child(b, "channels")``  the without-replacement channel subset
* ``rng.child(b, "mask", i)``   fill first, then rectangle geometry for the
  i-th selected channel

Replaying any child reproduces its draws without touching the others.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, StructuralError
from .rng import RngStream


@dataclass(frozen=True)
class LfmConfig:
    """Hyperparameters of the local-feature-masking transform.

    ``num_masked_channels=None`` means "half the channels, rounded down",
    resolved against the block actually being masked.
    """

    probability: float = 0.15
    num_masked_channels: int | None = None
    area_low: float = 0.03
    area_high: float = 0.4
    aspect_low: float = 0.3
    aspect_high: float = 1.0 / 0.3
    max_attempts: int = 100

    def validate(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability must be in [0, 1], got {self.probability}")
        if not 0.0 < self.area_low <= self.area_high < 1.0:
            raise ConfigError(
                f"need 0 < area_low <= area_high < 1, got [{self.area_low}, {self.area_high}]"
            )
        if not 0.0 < self.aspect_low <= self.aspect_high:
            raise ConfigError(
                f"need 0 < aspect_low <= aspect_high, got [{self.aspect_low}, {self.aspect_high}]"
            )
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.num_masked_channels is not None and self.num_masked_channels < 0:
            raise ConfigError(
                f"num_masked_channels must be >= 0, got {self.num_masked_channels}"
            )

    def resolve_channels(self, total_channels: int) -> int:
        n = self.num_masked_channels
        if n is None:
            n = total_channels // 2
        if n > total_channels:
            raise ConfigError(
                f"num_masked_channels={n} exceeds channel count {total_channels}"
            )
        return n


@dataclass(frozen=True)
class MaskRect:
    """One accepted mask rectangle; fill is the constant written inside it."""

    x0: int
    y0: int
    w_px: int
    h_px: int
    fill: float


@dataclass(frozen=True)
class MaskDecision:
    """Full record of the randomness one sample consumed.

    ``gate_draw`` is the uniform that was compared against the masking
    probability; eval-mode decisions record the sentinel 1.0 (no draw is
    consumed, and ``applied == (gate_draw < p)`` stays true for every p).
    ``rects`` pairs each selected channel with its rectangle, or with None
    when the bounded retry loop exhausted its attempts.
    """

    sample_id: int
    gate_draw: float
    applied: bool
    channels: tuple[int, ...]
    rects: tuple[tuple[int, MaskRect | None], ...]


def _require_block(block: np.ndarray) -> tuple[int, int, int, int]:
    if not isinstance(block, np.ndarray) or block.ndim != 4:
        raise StructuralError(
            f"feature block must be a 4-D array (B, C, H, W), got "
            f"{getattr(block, 'shape', None)}"
        )
    if block.size and not np.isfinite(block).all():
        raise NumericError("feature block contains non-finite values")
    return block.shape


def sample_mask_rect(
    rng: RngStream, height: int, width: int, cfg: LfmConfig, fill: float = 0.0
) -> MaskRect | None:
    """Rejection-sample one mask rectangle for an ``height x width`` map.

    Per attempt the draw order is fixed: area fraction, aspect ratio, left
    column, top row. An attempt is accepted when the real-valued sides fit
    inside the map; accepted sides are floored to integers and clamped to a
    minimum of 1 pixel. Returns None when ``cfg.max_attempts`` attempts all
    rejected (recorded by the caller, never raised).
    """
    area_total = height * width
    for _ in range(cfg.max_attempts):
        area = rng.uniform(cfg.area_low, cfg.area_high) * area_total
        aspect = rng.uniform(cfg.aspect_low, cfg.aspect_high)
        rect_h = math.sqrt(area * aspect)
        rect_w = math.sqrt(area / aspect)
        x0 = rng.uniform_int(width)
        y0 = rng.uniform_int(height)
        if x0 + rect_w <= width and y0 + rect_h <= height:
            return MaskRect(
                x0=x0,
                y0=y0,
                w_px=max(1, math.floor(rect_w)),
                h_px=max(1, math.floor(rect_h)),
                fill=fill,
            )
    return None


def select_channels(rng: RngStream, total_channels: int, count: int) -> tuple[int, ...]:
    """``count`` distinct channel indices drawn uniformly from [0, total)."""
    if count < 0 or count > total_channels:
        raise ConfigError(
            f"cannot select {count} distinct channels out of {total_channels}"
        )
    return tuple(int(c) for c in rng.sample_without_replacement(total_channels, count))


def sample_decisions(
    rng: RngStream,
    batch: int,
    total_channels: int,
    height: int,
    width: int,
    cfg: LfmConfig,
    training: bool = True,
) -> list[MaskDecision]:
    """Draw the full per-sample masking decisions for a (B, C, H, W) block.

    Pure in the data: only shapes are needed, so the same decisions can be
    applied to a numpy array or to a framework tensor.
    """
    cfg.validate()
    n_masked = cfg.resolve_channels(total_channels)
    if not training:
        return [
            MaskDecision(b, gate_draw=1.0, applied=False, channels=(), rects=())
            for b in range(batch)
        ]
    decisions = []
    for b in range(batch):
        p1 = rng.child(b, "gate").uniform(0.0, 1.0)
        applied = p1 < cfg.probability
        if not applied:
            decisions.append(MaskDecision(b, p1, False, (), ()))
            continue
        channels = select_channels(rng.child(b, "channels"), total_channels, n_masked)
        rects = []
        for i, channel in enumerate(channels):
            mask_rng = rng.child(b, "mask", i)
            fill = mask_rng.uniform(0.0, 1.0)
            rects.append((channel, sample_mask_rect(mask_rng, height, width, cfg, fill)))
        decisions.append(MaskDecision(b, p1, True, channels, tuple(rects)))
    return decisions


def apply_decisions(block: np.ndarray, decisions: list[MaskDecision]) -> np.ndarray:
    """Write the recorded rectangles into a copy of ``block``.

    Copy-on-write: if no decision touches the block, the input array itself is
    returned unchanged.
    """
    out = None
    for decision in decisions:
        for channel, rect in decision.rects:
            if rect is None:
                continue
            if out is None:
                out = block.copy()
            out[
                decision.sample_id,
                channel,
                rect.y0 : rect.y0 + rect.h_px,
                rect.x0 : rect.x0 + rect.w_px,
            ] = rect.fill
    return block if out is None else out


def lfm_apply(
    block: np.ndarray, cfg: LfmConfig, rng: RngStream, training: bool
) -> tuple[np.ndarray, list[MaskDecision]]:
    """Apply local feature masking to a (B, C, H, W) block.

    In eval mode the block is returned untouched with all-unapplied decisions
    and no randomness is consumed. Raises on an invalid config before any
    other work.
    """
    cfg.validate()
    batch, channels, height, width = _require_block(block)
    cfg.resolve_channels(channels)
    decisions = sample_decisions(rng, batch, channels, height, width, cfg, training)
    return apply_decisions(block, decisions), decisions


# -- decision log (line-oriented audit format) ------------------------------


def format_decision(decision: MaskDecision) -> str:
    """One audit line: ``sample_id applied p1 channels=[...] rects=[...]``."""
    channels = ",".join(str(c) for c in decision.channels)
    rects = ",".join(
        f"({c},{r.x0},{r.y0},{r.w_px},{r.h_px},{r.fill:.9g})" if r is not None else f"({c},none)"
        for c, r in decision.rects
    )
    return (
        f"{decision.sample_id} {int(decision.applied)} {decision.gate_draw:.9g} "
        f"channels=[{channels}] rects=[{rects}]"
    )


_LINE_RE = re.compile(
    r"^(\d+) ([01]) (\S+) channels=\[([^\]]*)\] rects=\[(.*)\]$"
)
_RECT_RE = re.compile(r"\((\d+),(?:none|(\d+),(\d+),(\d+),(\d+),([^)]+))\)")


def parse_decision(line: str) -> MaskDecision:
    """Inverse of :func:`format_decision` (fills round-trip at 9 digits)."""
    m = _LINE_RE.match(line.strip())
    if m is None:
        raise ValueError(f"unparseable decision line: {line!r}")
    sample_id, applied, p1, channels_s, rects_s = m.groups()
    channels = tuple(int(c) for c in channels_s.split(",") if c)
    rects = []
    for rm in _RECT_RE.finditer(rects_s):
        c = int(rm.group(1))
        if rm.group(2) is None:
            rects.append((c, None))
        else:
            x0, y0, w, h = (int(rm.group(i)) for i in range(2, 6))
            rects.append((c, MaskRect(x0, y0, w, h, float(rm.group(6)))))
    return MaskDecision(int(sample_id), float(p1), applied == "1", channels, tuple(rects))


def write_decision_log(path, decisions: list[MaskDecision]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for decision in decisions:
            fh.write(format_decision(decision) + "\n")


# -- baseline regularizers ---------------------------------------------------


def cutout_apply(
    images: np.ndarray, side_px: int, fill: float, rng: RngStream, training: bool
) -> np.ndarray:
    """Input-space square cutout, one square per sample across all channels.

    The square of side ``side_px`` is centered at a uniformly drawn pixel
    (column drawn first, then row, from ``rng.child(b)``) and clipped to the
    image bounds, so corner centers mask a quarter of the nominal area.
    """
    batch, _, height, width = _require_block(images)
    if side_px < 1:
        raise ConfigError(f"side_px must be >= 1, got {side_px}")
    if side_px > 2 * min(height, width):
        raise ConfigError(
            f"side_px={side_px} exceeds twice the smaller map side {min(height, width)}"
        )
    if not training:
        return images
    out = images.copy()
    half = side_px // 2
    for b in range(batch):
        sub = rng.child(b)
        cx = sub.uniform_int(width)
        cy = sub.uniform_int(height)
        x_lo, x_hi = max(0, cx - half), min(width, cx - half + side_px)
        y_lo, y_hi = max(0, cy - half), min(height, cy - half + side_px)
        out[b, :, y_lo:y_hi, x_lo:x_hi] = fill
    return out


def channel_dropout_apply(
    block: np.ndarray, q: float, rng: RngStream, training: bool
) -> np.ndarray:
    """Spatial dropout: zero whole channels with probability q, scale the rest by 1/(1-q)."""
    batch, channels, _, _ = _require_block(block)
    if not 0.0 <= q < 1.0:
        raise ConfigError(f"channel dropout rate must be in [0, 1), got {q}")
    if not training or q == 0.0:
        return block
    out = block.copy()
    scale = 1.0 / (1.0 - q)
    for b in range(batch):
        draws = rng.child(b).uniforms(0.0, 1.0, channels)
        dropped = draws < q
        out[b, dropped] = 0.0
        out[b, ~dropped] *= scale
    return out


def element_dropout_apply(
    values: np.ndarray, q: float, rng: RngStream, training: bool
) -> np.ndarray:
    """Standard inverted dropout on individual elements of any-shape array."""
    if not 0.0 <= q < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {q}")
    if not training or q == 0.0:
        return values
    draws = rng.uniforms(0.0, 1.0, values.shape)
    keep = draws >= q
    return np.where(keep, values / (1.0 - q), 0.0).astype(values.dtype, copy=False)
