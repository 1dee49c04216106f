"""Synthetic person-retrieval data: generator, binary container, batching.

Each identity is a two-tone humanoid sprite (hue-coded torso and legs, round
head, per-identity body proportions) rendered on a textured background. Views
of one identity vary by brightness, small translations, pixel noise, mirror
flips, and occasional occluding bars, with cameras assigned round-robin over
views. Everything is a pure function of the dataset seed.

Binary container (little-endian): magic ``LFMD``, version u32, count u32,
height u16, width u16, channels u16, n_cams u16, then per record identity
u32, camera u16, and raw u8 pixels in channel-first row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .masking import cutout_apply
from .rng import RngStream

HEIGHT, WIDTH, CHANNELS = 64, 32, 3

_MAGIC = b"LFMD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHH")
_RECORD_HEAD = struct.Struct("<IH")
_PIXELS = CHANNELS * HEIGHT * WIDTH


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, 64, 32) uint8
    identities: np.ndarray  # (n,) int64
    cameras: np.ndarray  # (n,) int64
    n_cams: int

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class Split:
    """Disjoint train/test identities; one query view per test identity."""

    train_ids: tuple
    test_ids: tuple
    train_indices: np.ndarray
    query_indices: np.ndarray
    gallery_indices: np.ndarray


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    pad_crop: bool = False
    cutout: bool = False
    cutout_side: int = 16
    cutout_fill: float = 0.0


def _hue_rgb(hue: float, sat: float, val: float) -> np.ndarray:
    h = (hue % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = val * (1 - sat), val * (1 - sat * f), val * (1 - sat * (1 - f))
    rgb = [
        (val, t, p), (q, val, p), (p, val, t),
        (p, q, val), (t, p, val), (val, p, q),
    ][i % 6]
    return np.array(rgb, dtype=np.float64)


@dataclass(frozen=True)
class Identity:
    id: int
    torso_hue: float
    leg_hue: float
    head_radius: float
    body_width: float
    body_height: float


def identity_params(seed: int, identity: int) -> Identity:
    """Appearance parameters as a pure function of (dataset seed, id).

    Hues are snapped to a 12-level palette so distinct identities can share
    clothing colors; queries then have to lean on the shape scalars, which
    keeps the retrieval task off the ceiling.
    """
    s = RngStream(seed).child("identity", identity)
    return Identity(
        id=identity,
        torso_hue=s.uniform_int(8) / 8.0,
        leg_hue=s.uniform_int(8) / 8.0,
        head_radius=s.uniform(3.0, 6.0),
        body_width=s.uniform(0.4, 0.8),
        body_height=s.uniform(0.5, 0.8),
    )


def _render_view(ident: Identity, camera: int, n_cams: int, view_rng: RngStream) -> np.ndarray:
    """One (3, 64, 32) float view in [0, 1]; consumes the view stream in a fixed order."""
    h, w = HEIGHT, WIDTH
    img = np.empty((3, h, w), dtype=np.float64)

    # textured background with a mild per-camera tint
    phase_x = view_rng.uniform(0.0, 1.0)
    phase_y = view_rng.uniform(0.0, 1.0)
    freq_x = 1 + view_rng.uniform_int(2)
    freq_y = 1 + view_rng.uniform_int(2)
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.3 + 0.12 * (camera / max(1, n_cams - 1))
    texture = base + 0.08 * np.sin(2 * math.pi * (freq_x * xx / w + phase_x)) * np.sin(
        2 * math.pi * (freq_y * yy / h + phase_y)
    )
    tint = 0.12 * camera / max(1, n_cams - 1)
    for c in range(3):
        img[c] = texture + tint * (c - 1)

    # sprite geometry, jittered by +/-3 px
    dx = view_rng.uniform_int(7) - 3
    dy = view_rng.uniform_int(7) - 3
    cx = w // 2 + dx
    torso_color = _hue_rgb(ident.torso_hue, 0.8, 0.8)
    leg_color = _hue_rgb(ident.leg_hue, 0.8, 0.7)
    head_color = np.array([0.85, 0.72, 0.6])

    head_cy, head_cx = 9 + dy, cx
    rr = ident.head_radius
    mask = (yy - head_cy) ** 2 + (xx - head_cx) ** 2 <= rr * rr
    img[:, mask] = head_color[:, None]

    torso_top = 16 + dy
    torso_len = int(round(18 * ident.body_height)) + 8
    torso_half = max(2, int(round(ident.body_width * w / 2)))
    t0, t1 = max(0, torso_top), min(h, torso_top + torso_len)
    c0, c1 = max(0, cx - torso_half), min(w, cx + torso_half)
    img[:, t0:t1, c0:c1] = torso_color[:, None, None]

    leg_top = min(h, torso_top + torso_len)
    leg_bot = min(h, 58 + dy)
    leg_w = max(1, int(round(torso_half * 0.6)))
    l0 = max(0, cx - torso_half)
    r1 = min(w, cx + torso_half)
    img[:, leg_top:leg_bot, l0 : min(w, l0 + leg_w)] = leg_color[:, None, None]
    img[:, leg_top:leg_bot, max(0, r1 - leg_w) : r1] = leg_color[:, None, None]

    if view_rng.uniform(0.0, 1.0) < 0.5:
        img = img[:, :, ::-1]

    if view_rng.uniform(0.0, 1.0) < 0.2:
        bar_w = 4 + view_rng.uniform_int(5)
        bar_x = view_rng.uniform_int(max(1, w - bar_w))
        bar_shade = view_rng.uniform(0.2, 0.8)
        img[:, :, bar_x : bar_x + bar_w] = bar_shade

    brightness = view_rng.uniform(0.7, 1.3)
    img = img * brightness
    img = img + view_rng.normals(0.0, 0.02, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img


def synth_generate(seed: int, n_identities: int, views_per_id: int, n_cams: int) -> Dataset:
    """Render the full synthetic dataset, deterministic from the seed."""
    if n_identities < 2:
        raise ConfigError(f"need at least 2 identities, got {n_identities}")
    if views_per_id < 2:
        raise ConfigError(f"need at least 2 views per identity, got {views_per_id}")
    if n_cams < 2:
        raise ConfigError(f"need at least 2 cameras, got {n_cams}")
    root = RngStream(seed)
    images = np.empty((n_identities * views_per_id, CHANNELS, HEIGHT, WIDTH), dtype=np.uint8)
    identities = np.empty(len(images), dtype=np.int64)
    cameras = np.empty(len(images), dtype=np.int64)
    row = 0
    for ident_id in range(n_identities):
        ident = identity_params(seed, ident_id)
        for view in range(views_per_id):
            camera = view % n_cams
            img = _render_view(ident, camera, n_cams, root.child("view", ident_id, view))
            images[row] = np.round(img * 255.0).astype(np.uint8)
            identities[row] = ident_id
            cameras[row] = camera
            row += 1
    return Dataset(images, identities, cameras, n_cams)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC, _VERSION, len(dataset), HEIGHT, WIDTH, CHANNELS, dataset.n_cams
            )
        )
        for i in range(len(dataset)):
            fh.write(_RECORD_HEAD.pack(int(dataset.identities[i]), int(dataset.cameras[i])))
            fh.write(dataset.images[i].tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: file ends at offset {len(raw)}")
    magic, version, count, height, width, channels, n_cams = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError("bad magic at offset 0")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if (height, width, channels) != (HEIGHT, WIDTH, CHANNELS):
        raise FormatError(f"unexpected dims {channels}x{height}x{width} at offset 12")
    record = _RECORD_HEAD.size + _PIXELS
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        offset = min(len(raw), expected)
        raise FormatError(f"truncated or oversized payload at offset {offset}")
    images = np.empty((count, CHANNELS, HEIGHT, WIDTH), dtype=np.uint8)
    identities = np.empty(count, dtype=np.int64)
    cameras = np.empty(count, dtype=np.int64)
    pos = _HEADER.size
    for i in range(count):
        ident, cam = _RECORD_HEAD.unpack_from(raw, pos)
        pos += _RECORD_HEAD.size
        images[i] = np.frombuffer(raw, dtype=np.uint8, count=_PIXELS, offset=pos).reshape(
            CHANNELS, HEIGHT, WIDTH
        )
        pos += _PIXELS
        identities[i] = ident
        cameras[i] = cam
    return Dataset(images, identities, cameras, n_cams)


def load_manifest(path) -> Dataset:
    """Import external images from a ``path,identity,camera`` CSV manifest."""
    from PIL import Image

    import csv
    import os

    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path":
                continue
            if len(row) != 3:
                raise FormatError(f"manifest row needs path,identity,camera: {row!r}")
            rows.append((row[0].strip(), int(row[1]), int(row[2])))
    if not rows:
        raise FormatError("manifest has no data rows")
    base = os.path.dirname(os.path.abspath(path))
    images = np.empty((len(rows), CHANNELS, HEIGHT, WIDTH), dtype=np.uint8)
    identities = np.empty(len(rows), dtype=np.int64)
    cameras = np.empty(len(rows), dtype=np.int64)
    for i, (img_path, ident, cam) in enumerate(rows):
        full = img_path if os.path.isabs(img_path) else os.path.join(base, img_path)
        with Image.open(full) as im:
            arr = np.asarray(im.convert("RGB").resize((WIDTH, HEIGHT)), dtype=np.uint8)
        images[i] = arr.transpose(2, 0, 1)
        identities[i] = ident
        cameras[i] = cam
    return Dataset(images, identities, cameras, int(cameras.max()) + 1)


def make_split(dataset: Dataset, n_train_identities: int) -> Split:
    """First identities train, the rest test; query = each test id's first view."""
    ids = np.unique(dataset.identities)
    if not 1 <= n_train_identities < len(ids):
        raise ConfigError(
            f"train_identities={n_train_identities} must leave at least one test identity "
            f"out of {len(ids)}"
        )
    train_ids = tuple(int(i) for i in ids[:n_train_identities])
    test_ids = tuple(int(i) for i in ids[n_train_identities:])
    train_mask = np.isin(dataset.identities, train_ids)
    train_indices = np.flatnonzero(train_mask)
    query, gallery = [], []
    for tid in test_ids:
        rows = np.flatnonzero(dataset.identities == tid)
        query.append(rows[0])
        gallery.extend(rows[1:])
    query_indices = np.array(query, dtype=np.int64)
    gallery_indices = np.array(gallery, dtype=np.int64)
    for qi in query_indices:
        qid, qcam = dataset.identities[qi], dataset.cameras[qi]
        ok = (
            (dataset.identities[gallery_indices] == qid)
            & (dataset.cameras[gallery_indices] != qcam)
        ).any()
        if not ok:
            raise ConfigError(
                f"query identity {int(qid)} has no cross-camera gallery match"
            )
    return Split(train_ids, test_ids, train_indices, query_indices, gallery_indices)


def normalize(images_u8: np.ndarray) -> np.ndarray:
    """uint8 pixels to float32 in [0, 1]; 255 maps to exactly 1.0."""
    return images_u8.astype(np.float32) / np.float32(255.0)


def make_batches(
    dataset: Dataset,
    indices: np.ndarray,
    batch_size: int,
    rng: RngStream,
    augment: AugmentConfig | None = None,
    label_map: dict | None = None,
):
    """Yield (float32 block in [0,1], int64 labels) batches over ``indices``.

    With ``augment`` set the order is shuffled (a pure function of the stream,
    so of (seed, epoch)) and train-time augmentations run; otherwise order is
    as given and pixels are raw normalized values. The final short batch is
    emitted.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ConfigError("cannot batch an empty split")
    if augment is not None:
        order = indices[rng.child("shuffle").permutation(len(indices))]
        flip_draws = rng.child("flip").uniforms(0.0, 1.0, len(indices))
        crop_draws = rng.child("crop").integers(9, (len(indices), 2)) - 4
    else:
        order = indices
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        block = normalize(dataset.images[sel])
        if label_map is not None:
            labels = np.array([label_map[int(i)] for i in dataset.identities[sel]], dtype=np.int64)
        else:
            labels = dataset.identities[sel].copy()
        if augment is not None:
            if augment.flip:
                flips = flip_draws[start : start + len(sel)] < 0.5
                block[flips] = block[flips, :, :, ::-1]
            if augment.pad_crop:
                shifts = crop_draws[start : start + len(sel)]
                block = _shift_batch(block, shifts)
            if augment.cutout:
                block = cutout_apply(
                    block,
                    augment.cutout_side,
                    augment.cutout_fill,
                    rng.child("cutout", start),
                    training=True,
                )
        yield block, labels


def _shift_batch(block: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Translate each sample by (dy, dx), zero-filling uncovered pixels."""
    out = np.zeros_like(block)
    _, _, h, w = block.shape
    for i, (dy, dx) in enumerate(shifts):
        ys, yd = (0, dy) if dy >= 0 else (-dy, 0)
        xs, xd = (0, dx) if dx >= 0 else (-dx, 0)
        hh, ww = h - abs(dy), w - abs(dx)
        out[i, :, yd : yd + hh, xd : xd + ww] = block[i, :, ys : ys + hh, xs : xs + ww]
    return out


def write_manifest(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("index,identity,camera\n")
        for i in range(len(dataset)):
            fh.write(f"{i},{int(dataset.identities[i])},{int(dataset.cameras[i])}\n")
