"""Frame-pair data pipeline.

Two sources produce streams of :class:`SequenceSample` (consecutive frame
pairs with an optional per-patch semantic embedding field for the later
frame): a procedural synthetic generator and an on-disk tile store described
by a JSON manifest. Both are deterministic; dataset handles are read-only
after construction.
"""

from __future__ import annotations

import datetime
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigurationError

logger = logging.getLogger(__name__)

EMBEDDING_CHANNELS = 64
_EMB_MAGIC = b"EMBF"

# Fixed projection seed of the proxy foundation embedder. One embedder is
# shared by every scene, like a real pretrained model.
_PROXY_SEED = 7291
_PROXY_REGIONS = 8


@dataclass
class SequenceSample:
    """One consecutive frame pair from a single region of interest."""

    frame_t: torch.Tensor                   # (3, H, W) in [0, 1]
    frame_t1: torch.Tensor                  # (3, H, W) in [0, 1]
    target_embedding: torch.Tensor | None   # (N, 64) patch-level field for frame_t1
    roi_id: str
    timestamps: tuple[datetime.date, datetime.date]

    def __post_init__(self) -> None:
        if self.frame_t.shape != self.frame_t1.shape:
            raise ValueError("paired frames must share spatial dimensions")
        if self.timestamps[0] >= self.timestamps[1]:
            raise ValueError("timestamps must be strictly increasing")


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _band_limited_noise(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """Zero-mean texture field with spectral support in [lo, hi] cycles/px."""
    spectrum = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    spectrum *= (radius >= lo) & (radius <= hi)
    field = np.fft.ifft2(spectrum).real
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _region_labels(rng: np.random.Generator, size: int, num_regions: int) -> np.ndarray:
    """Voronoi partition of an oversized canvas: piecewise-constant regions."""
    points = rng.uniform(0, size, size=(num_regions, 2))
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (ys[None] - points[:, 0, None, None]) ** 2 + (xs[None] - points[:, 1, None, None]) ** 2
    return np.argmin(d2, axis=0)


class _ProxyEmbedder:
    """Deterministic stand-in for a pretrained per-patch embedding model.

    Patch features (mean/std color, edge energy, region composition) are
    pushed through a fixed random projection to 64 channels.
    """

    def __init__(self) -> None:
        rng = np.random.default_rng(_PROXY_SEED)
        in_dim = 3 + 3 + 1 + _PROXY_REGIONS
        self.projection = rng.standard_normal((in_dim, EMBEDDING_CHANNELS)) / np.sqrt(in_dim)

    def __call__(self, frame: np.ndarray, labels: np.ndarray, patch: int) -> np.ndarray:
        c, h, w = frame.shape
        gh, gw = h // patch, w // patch
        patches = frame.reshape(c, gh, patch, gw, patch)
        mean = patches.mean(axis=(2, 4)).transpose(1, 2, 0)      # (gh, gw, 3)
        std = patches.std(axis=(2, 4)).transpose(1, 2, 0)
        gy, gx = np.gradient(frame.mean(axis=0))
        edge = np.hypot(gy, gx).reshape(gh, patch, gw, patch).mean(axis=(1, 3))[..., None]
        lab = labels % _PROXY_REGIONS
        onehot = np.eye(_PROXY_REGIONS)[lab]                     # (h, w, R)
        frac = onehot.reshape(gh, patch, gw, patch, -1).mean(axis=(1, 3))
        feats = np.concatenate([mean, std, edge, frac], axis=-1)
        tokens = np.tanh(feats @ self.projection)
        return tokens.reshape(gh * gw, EMBEDDING_CHANNELS).astype(np.float32)


_proxy_embedder = _ProxyEmbedder()


def generate_synthetic_sequence(
    seed: int,
    num_steps: int,
    size: int = 128,
    *,
    patch_size: int = 8,
    drift: float = 3.0,
    texture_amplitude: float = 0.08,
    with_embeddings: bool = True,
) -> list[SequenceSample]:
    """Procedurally evolving scene: drifting piecewise-constant regions with
    band-limited texture and persistent sharp boundaries.

    Returns ``num_steps - 1`` consecutive pairs; bit-identical for a fixed
    seed.
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    if size % 8 != 0:
        raise ConfigurationError(f"size {size} must be divisible by the codec factor 8")
    if size % patch_size != 0:
        raise ConfigurationError(f"size {size} must be divisible by patch size {patch_size}")

    rng = np.random.default_rng(seed)
    canvas = size + int(np.ceil(abs(drift)) + 1) * num_steps + size // 2
    labels = _region_labels(rng, canvas, num_regions=10)
    colors = rng.uniform(0.1, 0.9, size=(10, 3))
    texture = _band_limited_noise(rng, canvas, lo=0.05, hi=0.25)
    velocity = rng.uniform(0.5, 1.0, size=2) * drift
    if rng.random() < 0.5:
        velocity[0] = -velocity[0]

    frames: list[np.ndarray] = []
    label_crops: list[np.ndarray] = []
    margin = (canvas - size) // 2
    for t in range(num_steps):
        oy = int(round(margin + velocity[0] * t)) % (canvas - size)
        ox = int(round(margin + velocity[1] * t)) % (canvas - size)
        lab = labels[oy:oy + size, ox:ox + size]
        tex = texture[oy:oy + size, ox:ox + size]
        img = colors[lab].transpose(2, 0, 1) + texture_amplitude * tex[None]
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        label_crops.append(lab)

    samples = []
    base = datetime.date(2018, 1, 1)
    for t in range(num_steps - 1):
        embedding = None
        if with_embeddings:
            tokens = _proxy_embedder(frames[t + 1], label_crops[t + 1], patch_size)
            embedding = torch.from_numpy(tokens)
        samples.append(
            SequenceSample(
                frame_t=torch.from_numpy(frames[t]),
                frame_t1=torch.from_numpy(frames[t + 1]),
                target_embedding=embedding,
                roi_id=f"synthetic-{seed}",
                timestamps=(base.replace(year=base.year + t), base.replace(year=base.year + t + 1)),
            )
        )
    return samples


def build_synthetic_dataset(
    num_sequences: int,
    steps_per_sequence: int,
    size: int,
    *,
    seed: int = 0,
    patch_size: int = 8,
    drift: float = 3.0,
) -> list[SequenceSample]:
    """Concatenated pairs from ``num_sequences`` independent synthetic RoIs."""
    samples: list[SequenceSample] = []
    for k in range(num_sequences):
        samples.extend(
            generate_synthetic_sequence(
                seed * 100003 + k, steps_per_sequence, size,
                patch_size=patch_size, drift=drift,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Embedding field file format
# ---------------------------------------------------------------------------


def write_embedding_field(path: str | Path, tokens: np.ndarray, grid: tuple[int, int]) -> None:
    """Flat binary field: magic, version, grid dims, channels, float32 data."""
    gh, gw = grid
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.shape != (gh * gw, EMBEDDING_CHANNELS):
        raise ValueError(f"expected ({gh * gw}, {EMBEDDING_CHANNELS}) tokens, got {tokens.shape}")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IIII", 1, gh, gw, EMBEDDING_CHANNELS))
        fh.write(tokens.tobytes())


def read_embedding_field(path: str | Path) -> tuple[np.ndarray, tuple[int, int]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding field file")
        version, gh, gw, channels = struct.unpack("<IIII", fh.read(16))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        if channels != EMBEDDING_CHANNELS:
            raise ValueError(f"{path}: channel count must be {EMBEDDING_CHANNELS}, got {channels}")
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(gh * gw, channels)
    if not np.isfinite(data).all():
        raise ValueError(f"{path}: embedding field contains non-finite values")
    return data.copy(), (gh, gw)


# ---------------------------------------------------------------------------
# Tile store
# ---------------------------------------------------------------------------


def _load_frame(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    scale = 65535.0 if arr.max() > 255.0 else 255.0
    return torch.from_numpy((arr / scale).transpose(2, 0, 1).copy())


def _parse_date(stem: str, fallback_index: int) -> datetime.date:
    for fmt in ("%Y-%m-%d", "%Y%m%d", "%Y"):
        try:
            return datetime.datetime.strptime(stem, fmt).date()
        except ValueError:
            continue
    return datetime.date(2000, 1, 1) + datetime.timedelta(days=fallback_index)


def load_tile_dataset(root: str | Path, manifest: str | Path) -> list[SequenceSample]:
    """Consecutive-frame pairs from a manifest of RoI records.

    Manifest: JSON with ``{"rois": [{"id", "frames": [...], "embeddings": [...]}]}``
    where frame paths are relative to ``root`` and listed chronologically.
    ``embeddings`` is optional and aligned with ``frames`` (null for missing
    entries). Malformed frames are skipped with a logged warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root not found: {root}")
    manifest_path = Path(manifest)
    if not manifest_path.is_absolute():
        manifest_path = root / manifest_path
    if not manifest_path.exists():
        raise ConfigurationError(f"manifest not found: {manifest_path}")

    spec = json.loads(manifest_path.read_text())
    samples: list[SequenceSample] = []
    for record in spec.get("rois", []):
        roi_id = record["id"]
        frame_names = record.get("frames", [])
        emb_names = record.get("embeddings") or [None] * len(frame_names)
        if len(emb_names) != len(frame_names):
            raise ConfigurationError(f"roi {roi_id}: embeddings list must align with frames")

        frames: list[torch.Tensor | None] = []
        dates: list[datetime.date] = []
        for idx, name in enumerate(frame_names):
            path = root / name
            try:
                frames.append(_load_frame(path))
            except (OSError, ValueError) as exc:
                logger.warning("roi %s: skipping unreadable frame %s (%s)", roi_id, name, exc)
                frames.append(None)
            dates.append(_parse_date(Path(name).stem, idx))

        for i in range(len(frames) - 1):
            if frames[i] is None or frames[i + 1] is None:
                continue
            embedding = None
            if emb_names[i + 1]:
                try:
                    tokens, _ = read_embedding_field(root / emb_names[i + 1])
                    embedding = torch.from_numpy(tokens)
                except (OSError, ValueError) as exc:
                    logger.warning("roi %s: skipping embedding %s (%s)", roi_id, emb_names[i + 1], exc)
            samples.append(
                SequenceSample(
                    frame_t=frames[i],
                    frame_t1=frames[i + 1],
                    target_embedding=embedding,
                    roi_id=roi_id,
                    timestamps=(dates[i], dates[i + 1]),
                )
            )
    return samples


def export_synthetic_dataset(
    out_dir: str | Path,
    num_sequences: int,
    steps_per_sequence: int,
    size: int,
    *,
    seed: int = 0,
    patch_size: int = 8,
    drift: float = 3.0,
) -> Path:
    """Write a synthetic tile store (frames, embedding fields, manifest)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = size // patch_size
    rois = []
    for k in range(num_sequences):
        pairs = generate_synthetic_sequence(
            seed * 100003 + k, steps_per_sequence, size, patch_size=patch_size, drift=drift
        )
        roi_id = f"roi-{k:03d}"
        roi_dir = out_dir / roi_id
        roi_dir.mkdir(exist_ok=True)
        frame_names, emb_names = [], []
        frames = [pairs[0].frame_t] + [p.frame_t1 for p in pairs]
        dates = [pairs[0].timestamps[0]] + [p.timestamps[1] for p in pairs]
        for frame, date in zip(frames, dates):
            name = f"{roi_id}/{date.isoformat()}.png"
            arr = (frame.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(out_dir / name)
            frame_names.append(name)
        emb_names.append(None)  # the first frame is never a pair target
        for pair, date in zip(pairs, dates[1:]):
            name = f"{roi_id}/{date.isoformat()}.emb"
            write_embedding_field(out_dir / name, pair.target_embedding.numpy(), (grid, grid))
            emb_names.append(name)
        rois.append({"id": roi_id, "frames": frame_names, "embeddings": emb_names})

    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"rois": rois}, indent=2))
    return manifest


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


def split_dataset(
    samples: list[SequenceSample],
    train_fraction: float = 0.8,
    seed: int = 0,
) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Seeded shuffle then disjoint, exhaustive partition."""
    if not samples:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(len(samples) * train_fraction))
    train = [samples[i] for i in order[:cut]]
    val = [samples[i] for i in order[cut:]]
    return train, val
