"""Dataset manifests, the pixel pipeline, and the procedural toy benchmark.

Manifests are JSONL, one record per line, with attribute vocabulary
validation and nonoverlapping train/val/test splits. Images decode
through a fixed pipeline: PNG -> resize -> [0,1] -> affine to [-1,1],
channels-first float32.

The toy benchmark stands in for a dermoscopy corpus: lesion-like blobs
where boundary irregularity encodes the diagnosis and background
luminance encodes the skin tone, with seeded nuisance variation in
position, orientation, size, and pixel noise. Because the encoding is
analytic, attributes can be recovered from pixels by the thresholding
rules in :func:`toy_oracle`, which doubles as the oracle classifier for
conditioning-purity measurements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import DIAGNOSES, TONES_FST, TONES_ISIC

__all__ = [
    "ManifestError",
    "ManifestRecord",
    "DatasetManifest",
    "ingest_manifest",
    "load_image",
    "save_image",
    "make_toy_benchmark",
    "render_toy_image",
    "toy_oracle",
    "TONE_LEVELS",
]

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    diagnosis: str
    skin_tone: str | None = None
    sex: str | None = None
    age: int | None = None
    site: str | None = None
    prompt: str | None = None
    split: str = "train"

    def as_dict(self) -> dict:
        out = {"image": self.image, "diagnosis": self.diagnosis, "split": self.split}
        for key in ("skin_tone", "sex", "age", "site", "prompt"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.image

    def load_image(self, record: ManifestRecord, resolution: int = 32) -> np.ndarray:
        path = self.image_path(record)
        if not path.exists():
            raise ManifestError(f"image file missing: {path}")
        return load_image(path, resolution)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def _validate_record(raw: dict, line_no: int) -> ManifestRecord:
    if not isinstance(raw, dict):
        raise ManifestError(f"line {line_no}: record must be a JSON object")
    for key in ("image", "diagnosis"):
        if key not in raw:
            raise ManifestError(f"line {line_no}: missing field {key!r}")
    if raw["diagnosis"] not in DIAGNOSES:
        raise ManifestError(
            f"line {line_no}: diagnosis {raw['diagnosis']!r} not in {DIAGNOSES}"
        )
    tone = raw.get("skin_tone")
    if tone is not None and tone not in TONES_ISIC + TONES_FST:
        raise ManifestError(
            f"line {line_no}: skin_tone {tone!r} not in {TONES_ISIC + TONES_FST}"
        )
    split = raw.get("split", "train")
    if split not in SPLITS:
        raise ManifestError(f"line {line_no}: split {split!r} not in {SPLITS}")
    age = raw.get("age")
    if age is not None:
        age = int(age)
    return ManifestRecord(
        image=str(raw["image"]),
        diagnosis=raw["diagnosis"],
        skin_tone=tone,
        sex=raw.get("sex"),
        age=age,
        site=raw.get("site"),
        prompt=raw.get("prompt"),
        split=split,
    )


def ingest_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a JSONL manifest.

    Every malformed line raises with its line number; a partial manifest
    is never returned. Image files are checked lazily at access time.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[ManifestRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            records.append(_validate_record(raw, line_no))
    if not records:
        raise ManifestError(f"{path}: no records")

    tones = {r.skin_tone for r in records if r.skin_tone is not None}
    if tones and not (tones <= set(TONES_ISIC) or tones <= set(TONES_FST)):
        raise ManifestError(
            f"mixed skin-tone conventions in one manifest: {sorted(tones)}"
        )

    by_split: dict[str, set] = {}
    for r in records:
        by_split.setdefault(r.split, set()).add(r.image)
    names = list(by_split)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = by_split[a] & by_split[b]
            if overlap:
                raise ManifestError(
                    f"splits {a!r} and {b!r} share images, e.g. {sorted(overlap)[0]!r}"
                )
    return DatasetManifest(root=path.parent, records=records)


# ---------------------------------------------------------------------------
# pixel pipeline
# ---------------------------------------------------------------------------

def load_image(path: str | Path, resolution: int = 32) -> np.ndarray:
    """Decode PNG -> resize -> scale to [0,1] -> affine to [-1,1], CHW."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return (arr * 2.0 - 1.0).transpose(2, 0, 1)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [-1,1] CHW float image as PNG (atomic)."""
    path = Path(path)
    arr = np.clip((np.asarray(image) + 1.0) * 0.5, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(u8, mode="RGB").save(tmp, format="PNG")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# toy benchmark
# ---------------------------------------------------------------------------

# background luminance per tone; the oracle snaps border luminance to the
# nearest level, so levels must stay well separated relative to noise
TONE_LEVELS = {"light": 0.82, "brown": 0.55, "dark": 0.28}
_TONE_TINT = np.array([1.05, 1.00, 0.95])
_LESION_LUM = 0.13
_LESION_TINT = np.array([1.25, 0.90, 0.85])
_PIXEL_NOISE = 0.012
_R0_FRACTION = (0.19, 0.235)  # lesion base radius / image size
_STAR_AMP = 0.40              # malignant radial modulation amplitude
_STAR_HARMONICS = (5, 9)
_BORDER_PX = 3
_IRREGULARITY_THRESHOLD = 0.13
_MIN_MASK_PIXELS = 12

_SITES = ("back", "chest", "arm", "leg", "face", "abdomen")


def render_toy_image(
    diagnosis: str, skin_tone: str, rng: np.random.Generator, resolution: int = 32
) -> np.ndarray:
    """Draw one lesion image; returns CHW float32 in [-1, 1].

    Benign lesions are mildly eccentric ellipses; malignant lesions
    modulate the boundary radius with two sine harmonics. The background
    level is the tone's luminance with a small jitter, and everything
    gets mild Gaussian pixel noise.
    """
    n = resolution
    bg = TONE_LEVELS[skin_tone] + rng.uniform(-0.02, 0.02)
    lesion = _LESION_LUM + rng.uniform(-0.015, 0.015)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-0.06, 0.06) * n
    cx = n / 2 + rng.uniform(-0.06, 0.06) * n
    dy, dx = yy - cy, xx - cx
    radius = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)

    r0 = rng.uniform(*_R0_FRACTION) * n
    if diagnosis == "malignant":
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        k1, k2 = _STAR_HARMONICS
        wobble = 0.6 * np.sin(k1 * theta + p1) + 0.4 * np.sin(k2 * theta + p2)
        r_theta = r0 * (1.0 + _STAR_AMP * wobble)
    else:
        angle = rng.uniform(0, np.pi)
        ecc = rng.uniform(1.0, 1.15)
        ca, sa = np.cos(angle), np.sin(angle)
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        radius = np.hypot(u * ecc, v)
        r_theta = r0

    alpha = np.clip(0.5 - (radius - r_theta), 0.0, 1.0)  # 1 inside, 0 outside
    lum = bg * (1.0 - alpha) + lesion * alpha

    img = lum[None, :, :] * np.where(
        alpha[None, :, :] > 0.5, _LESION_TINT[:, None, None], _TONE_TINT[:, None, None]
    )
    img = img + rng.normal(0.0, _PIXEL_NOISE, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)


def toy_oracle(image: np.ndarray) -> dict:
    """Recover toy attributes from pixels by thresholding.

    Rules (documented so the generator and oracle stay in lock step):

    * skin tone: median luminance over the outer 3-pixel border ring,
      snapped to the nearest of the tone background levels;
    * lesion mask: luminance below the midpoint of the measured border
      level and the nominal lesion level;
    * diagnosis: the mask's angular radius profile (24 bins of maximal
      radius around the mask centroid); relative spread above 0.13 means
      malignant. A mask under 12 pixels is degenerate and reported
      benign with ``valid=False``.
    """
    arr = np.asarray(image, dtype=np.float64)
    lum = (arr.mean(axis=0) + 1.0) * 0.5  # [-1,1] -> [0,1] luminance
    n = lum.shape[0]
    b = _BORDER_PX
    ring = np.concatenate(
        [lum[:b].ravel(), lum[-b:].ravel(), lum[b:-b, :b].ravel(), lum[b:-b, -b:].ravel()]
    )
    border = float(np.median(ring))
    tones = list(TONE_LEVELS)
    tone = tones[int(np.argmin([abs(border - TONE_LEVELS[t]) for t in tones]))]

    threshold = 0.5 * (border + _LESION_LUM)
    mask = lum < threshold
    if mask.sum() < _MIN_MASK_PIXELS:
        return {"diagnosis": "benign", "skin_tone": tone, "valid": False,
                "irregularity": 0.0}

    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    rr = np.hypot(ys - cy, xs - cx)
    tt = np.arctan2(ys - cy, xs - cx)
    bins = ((tt + np.pi) / (2 * np.pi) * 24).astype(int) % 24
    prof = np.full(24, np.nan)
    for k in range(24):
        sel = bins == k
        if sel.any():
            prof[k] = rr[sel].max()
    prof = prof[np.isfinite(prof)]
    irregularity = float(prof.std() / max(prof.mean(), 1e-9)) if len(prof) >= 8 else 0.0
    diagnosis = "malignant" if irregularity > _IRREGULARITY_THRESHOLD else "benign"
    return {"diagnosis": diagnosis, "skin_tone": tone, "valid": True,
            "irregularity": irregularity}


def _allocate(proportions: dict[str, float], total: int) -> dict[str, int]:
    """Largest-remainder allocation of ``total`` over proportions."""
    keys = list(proportions)
    weights = np.array([proportions[k] for k in keys], dtype=np.float64)
    weights = weights / weights.sum()
    raw = weights * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts))
    for i in range(remainder):
        counts[order[i % len(keys)]] += 1
    return {k: int(c) for k, c in zip(keys, counts)}


def make_toy_benchmark(
    out_dir: str | Path,
    size: int,
    bias_spec: dict | None = None,
    seed: int = 0,
    resolution: int = 32,
    split_fractions: tuple = (0.8, 0.1, 0.1),
    with_extras: bool = True,
) -> DatasetManifest:
    """Generate a deterministic toy dataset plus its manifest.

    ``bias_spec`` maps attribute name to value proportions, e.g.
    ``{"skin_tone": {"light": 0.9, "dark": 0.1}}``; unspecified
    attributes are balanced. Counts are exact (largest remainder), so a
    90/10 spec over 1000 images yields 900/100. ``with_extras`` adds
    nuisance sex/age/site metadata so the five-attribute regime can run.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    bias_spec = bias_spec or {}
    tone_props = bias_spec.get("skin_tone", {t: 1.0 for t in TONE_LEVELS})
    diag_props = bias_spec.get("diagnosis", {d: 1.0 for d in DIAGNOSES})
    for tone in tone_props:
        if tone not in TONE_LEVELS:
            raise ValueError(f"unknown tone {tone!r} in bias_spec")
    if not tone_props or not diag_props:
        raise ValueError("bias_spec proportions must be nonempty")

    tone_counts = _allocate(tone_props, size)
    combos: list[tuple[str, str]] = []
    for tone, n_tone in tone_counts.items():
        for diag, n_diag in _allocate(diag_props, n_tone).items():
            combos.extend([(diag, tone)] * n_diag)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBE9C)))
    order = rng.permutation(len(combos))

    n_train = int(round(split_fractions[0] * size))
    n_val = int(round(split_fractions[1] * size))
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * (size - n_train - n_val)

    records: list[ManifestRecord] = []
    for i, combo_idx in enumerate(order):
        diag, tone = combos[combo_idx]
        img_rng = np.random.default_rng(np.random.SeedSequence((seed, 1, i)))
        image = render_toy_image(diag, tone, img_rng, resolution)
        rel = f"images/toy_{i:05d}.png"
        save_image(out_dir / rel, image)
        extras = {}
        if with_extras:
            meta_rng = np.random.default_rng(np.random.SeedSequence((seed, 2, i)))
            extras = {
                "sex": ("male", "female")[int(meta_rng.integers(2))],
                "age": int(meta_rng.integers(18, 90)),
                "site": _SITES[int(meta_rng.integers(len(_SITES)))],
            }
        records.append(
            ManifestRecord(
                image=rel, diagnosis=diag, skin_tone=tone,
                split=split_of[i], **extras,
            )
        )
    manifest = DatasetManifest(root=out_dir, records=records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
