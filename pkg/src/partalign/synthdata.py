"""Procedural pedestrian-like images with ground-truth part masks.

Each identity is a three-part figure (head, torso, legs) with its own
palette, torso pattern and body proportions. Samples jitter position,
scale and brightness and sit on a cluttered background, so that fixed
spatial partitions do not line up with body parts from one sample to the
next. Camera id selects the nuisance bucket (vertical offset range and a
brightness bias), giving a cross-camera probe/gallery protocol.
"""

from __future__ import annotations

import csv
import itertools
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import imgio

log = logging.getLogger(__name__)

PARTS = ("head", "torso", "legs")

# saturated, well separated colours (RGB in [0, 1])
PALETTE = np.array([
    [0.85, 0.10, 0.10],
    [0.10, 0.65, 0.15],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.15],
    [0.85, 0.45, 0.05],
    [0.60, 0.15, 0.75],
    [0.10, 0.75, 0.80],
    [0.95, 0.95, 0.95],
    [0.12, 0.12, 0.12],
    [0.55, 0.35, 0.20],
])

PATTERNS = ("solid", "hstripes", "vstripes", "split")

MIN_CHANNEL_GAP = 32 / 255

NAME_RE = re.compile(r"^(\d+)_c(\d+)_(\d+)\.(png|pgm)$", re.IGNORECASE)


@dataclass
class Nuisance:
    shift_frac: float = 0.25
    scale_range: Tuple[float, float] = (0.7, 1.0)
    brightness: float = 0.15
    noise: float = 0.04
    clutter: int = 4
    cameras: int = 2
    flip_prob: float = 0.0

    @classmethod
    def none(cls) -> "Nuisance":
        return cls(shift_frac=0.0, scale_range=(1.0, 1.0), brightness=0.0, noise=0.0, clutter=0)


@dataclass
class SynthIdentity:
    pid: int
    head: int
    torso: int
    legs: int
    accent: int
    pattern: str
    head_frac: float
    torso_frac: float
    width_frac: float
    texture_seed: int

    def colours(self) -> np.ndarray:
        return PALETTE[[self.head, self.torso, self.legs]]


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    cameras: np.ndarray
    masks: Optional[np.ndarray] = None
    part_labels: Optional[np.ndarray] = None
    names: List[str] = field(default_factory=list)
    transforms: List[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.images[idx], self.labels[idx], self.cameras[idx],
            None if self.masks is None else self.masks[idx],
            None if self.part_labels is None else self.part_labels[idx],
            [self.names[i] for i in idx] if self.names else [],
            [self.transforms[i] for i in idx] if self.transforms else [],
        )


def _distinct(colour_ids: Sequence[int]) -> bool:
    cols = PALETTE[list(colour_ids)]
    for a in range(len(cols)):
        for b in range(a + 1, len(cols)):
            if np.max(np.abs(cols[a] - cols[b])) < MIN_CHANNEL_GAP:
                return False
    return True


def make_identities(count: int, rng: np.random.Generator, group: int = 1) -> List[SynthIdentity]:
    """Identities with unique looks.

    With ``group > 1`` identities come in runs that share one colour set and
    torso pattern but place the colours on different body parts, so an
    orderless colour summary cannot tell them apart.
    """
    if not 1 <= group <= 6:
        raise ValueError(f"group must be in 1..6, got {group}")
    seen = set()
    out = []
    perms = list(itertools.permutations(range(3)))
    while len(out) < count:
        cols = [int(v) for v in rng.integers(0, len(PALETTE), 3)]
        accent = int(rng.integers(0, len(PALETTE)))
        pattern = PATTERNS[int(rng.integers(0, len(PATTERNS)))]
        if not _distinct(cols) or accent in cols:
            continue
        order = [perms[i] for i in rng.permutation(len(perms))[:group]]
        for perm in order:
            if len(out) == count:
                break
            head, torso, legs = (cols[i] for i in perm)
            key = (head, torso, legs, pattern, accent if pattern != "solid" else -1)
            if key in seen:
                continue
            seen.add(key)
            out.append(SynthIdentity(
                pid=len(out), head=head, torso=torso, legs=legs, accent=accent, pattern=pattern,
                head_frac=float(rng.uniform(0.14, 0.2)), torso_frac=float(rng.uniform(0.34, 0.44)),
                width_frac=float(rng.uniform(0.32, 0.45)), texture_seed=int(rng.integers(0, 2**31)),
            ))
    return out


def _draw_background(hw, rng, nuisance: Nuisance) -> np.ndarray:
    h, w = hw
    # background tint counts as clutter, so zero nuisance means a plain grey field
    base = rng.uniform(0.3, 0.7, 3) if nuisance.clutter > 0 else np.full(3, 0.5)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    for _ in range(nuisance.clutter):
        bh, bw = int(rng.integers(2, max(3, h // 4))), int(rng.integers(2, max(3, w // 2)))
        y, x = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        img[y:y + bh, x:x + bw] = PALETTE[int(rng.integers(0, len(PALETTE)))]
    return img


def render(ident: SynthIdentity, hw, rng: np.random.Generator, nuisance: Nuisance,
           camera: int) -> Tuple[np.ndarray, np.ndarray, dict]:
    """One sample: image (H, W, 3), pixel part labels (0 = background) and its transform."""
    h, w = hw
    n = nuisance
    scale = float(rng.uniform(*n.scale_range))
    # camera buckets split the vertical shift range and bias brightness
    if n.cameras > 1 and n.shift_frac > 0:
        lo = -n.shift_frac + 2 * n.shift_frac * camera / n.cameras
        dy = float(rng.uniform(lo, lo + 2 * n.shift_frac / n.cameras)) * h
    else:
        dy = float(rng.uniform(-n.shift_frac, n.shift_frac)) * h
    dx = float(rng.uniform(-n.shift_frac, n.shift_frac)) * w
    bright = float(rng.uniform(-n.brightness, n.brightness))
    if n.cameras > 1 and n.brightness > 0:
        bright = float(np.clip(bright + n.brightness * (camera / max(1, n.cameras - 1) - 0.5),
                               -n.brightness, n.brightness))
    flip = bool(rng.random() < n.flip_prob)

    img = _draw_background(hw, rng, n)
    labels = np.zeros((h, w), dtype=np.int8)

    fh = max(6, int(round(0.95 * h * scale)))
    fw = max(3, int(round(ident.width_frac * fh)))
    top = int(round((h - fh) / 2 + dy))
    left = int(round((w - fw) / 2 + dx))
    head_h = max(1, int(round(ident.head_frac * fh)))
    torso_h = max(1, int(round(ident.torso_frac * fh)))
    legs_h = fh - head_h - torso_h
    head_w = max(1, int(round(0.5 * fw)))

    def put(y0, x0, ph, pw, part, colour):
        ys, xs = slice(max(0, y0), min(h, y0 + ph)), slice(max(0, x0), min(w, x0 + pw))
        if ys.start >= ys.stop or xs.start >= xs.stop:
            return
        img[ys, xs] = colour
        labels[ys, xs] = part

    put(top, left + (fw - head_w) // 2, head_h, head_w, 1, PALETTE[ident.head])
    ty = top + head_h
    put(ty, left, torso_h, fw, 2, PALETTE[ident.torso])
    accent = PALETTE[ident.accent]
    tex = np.random.default_rng(ident.texture_seed)
    phase = int(tex.integers(0, 2))
    for yy in range(max(0, ty), min(h, ty + torso_h)):
        for xx in range(max(0, left), min(w, left + fw)):
            ry, rx = yy - ty, xx - left
            if ident.pattern == "hstripes" and (ry // 2 + phase) % 2:
                img[yy, xx] = accent
            elif ident.pattern == "vstripes" and (rx // 2 + phase) % 2:
                img[yy, xx] = accent
            elif ident.pattern == "split" and (rx >= fw // 2) != bool(phase):
                img[yy, xx] = accent
    ly = ty + torso_h
    leg_w = max(1, int(round(0.4 * fw)))
    gap = fw - 2 * leg_w
    put(ly, left, legs_h, leg_w, 3, PALETTE[ident.legs])
    put(ly, left + leg_w + gap, legs_h, leg_w, 3, PALETTE[ident.legs])

    img = img * (1.0 + bright)
    if n.noise > 0:
        img = img + rng.normal(0.0, n.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if flip:
        img, labels = img[:, ::-1], labels[:, ::-1]
    # quantise so a PNG round trip is lossless
    img = np.rint(img * 255.0) / 255.0
    transform = {"dx": dx, "dy": dy, "scale": scale, "flip": flip, "brightness": bright,
                 "camera": camera}
    return img, labels, transform


def masks_from_labels(part_labels: np.ndarray, factor: int, num_parts: int = 3) -> np.ndarray:
    """Downsample pixel part labels to cell masks by majority vote.

    part_labels: (..., H, W) ints with 0 as background. Returns
    (..., H/f, W/f, num_parts) binary masks; cells are padded at the
    bottom/right edge when H or W is not a multiple of ``factor``.
    """
    lab = np.asarray(part_labels)
    *lead, h, w = lab.shape
    hf, wf = -(-h // factor), -(-w // factor)
    padded = np.zeros(tuple(lead) + (hf * factor, wf * factor), dtype=lab.dtype)
    padded[..., :h, :w] = lab
    blocks = padded.reshape(tuple(lead) + (hf, factor, wf, factor))
    counts = np.stack([(blocks == p).sum(axis=(-3, -1)) for p in range(num_parts + 1)], axis=-1)
    winner = counts.argmax(axis=-1)
    return np.stack([(winner == p + 1) for p in range(num_parts)], axis=-1).astype(float)


def generate(identities: int, samples_per_id: int, nuisance: Optional[Nuisance] = None,
             seed: int = 0, hw: Tuple[int, int] = (40, 20), mask_factor: int = 4,
             group: int = 6) -> Dataset:
    """Deterministic synthetic dataset; camera ids alternate within each identity."""
    if identities < 1 or samples_per_id < 1:
        raise ValueError("identities and samples_per_id must be >= 1")
    nuisance = nuisance or Nuisance()
    root = np.random.default_rng(seed)
    people = make_identities(identities, root, group)
    # one child stream per sample so generation order never matters
    streams = np.random.SeedSequence(seed).spawn(identities * samples_per_id)
    images, plabels, labels, cams, names, transforms = [], [], [], [], [], []
    for p in people:
        for s in range(samples_per_id):
            cam = s % max(1, nuisance.cameras)
            rng = np.random.default_rng(streams[p.pid * samples_per_id + s])
            img, lab, tr = render(p, hw, rng, nuisance, cam)
            images.append(img)
            plabels.append(lab)
            labels.append(p.pid)
            cams.append(cam)
            names.append(f"{p.pid:04d}_c{cam + 1}_{s:02d}.png")
            transforms.append(tr)
    plabels = np.stack(plabels)
    return Dataset(np.stack(images), np.array(labels), np.array(cams),
                   masks_from_labels(plabels, mask_factor), plabels, names, transforms)


def identity_records(identities: int, seed: int) -> List[dict]:
    return [asdict(p) for p in make_identities(identities, np.random.default_rng(seed))]


# ---------------------------------------------------------------- disk


def write_dir(ds: Dataset, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "identity", "camera"])
        for i, name in enumerate(ds.names):
            imgio.write_png(out / name, ds.images[i])
            if ds.masks is not None:
                stem = Path(name).stem
                for p in range(ds.masks.shape[-1]):
                    imgio.write_pgm(out / f"{stem}.mask{p}.pgm", ds.masks[i, :, :, p])
            wr.writerow([name, int(ds.labels[i]), int(ds.cameras[i]) + 1])


def parse_name(name: str) -> Optional[Tuple[int, int, int]]:
    """``0001_c1_00.png`` -> (identity 1, camera 1, index 0); None if unparseable."""
    m = NAME_RE.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def load_dir(path, hw: Tuple[int, int] = (40, 20)) -> Dataset:
    """Load ``<identity>_<camera>_<index>.png|pgm`` files, resized (nearest) to ``hw``.

    Cameras come back zero-based. Mask sidecars are picked up when every
    image has them.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    images, labels, cams, names, masks = [], [], [], [], []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() not in (".png", ".pgm") or ".mask" in f.name:
            continue
        parsed = parse_name(f.name)
        if parsed is None:
            log.warning("skipping unparseable file name %s", f.name)
            continue
        pid, cam, _ = parsed
        images.append(imgio.resize_nearest(imgio.read_image(f), hw))
        labels.append(pid)
        cams.append(cam - 1)
        names.append(f.name)
        sidecars = sorted(path.glob(f"{f.stem}.mask*.pgm"))
        masks.append([imgio.read_pgm(s) for s in sidecars] if sidecars else None)
    if not images:
        raise ValueError(f"no usable images in {path}")
    mask_arr = None
    if all(m is not None for m in masks) and len({len(m) for m in masks}) == 1:
        mask_arr = np.stack([np.stack(m, axis=-1) for m in masks])
    return Dataset(np.stack(images), np.array(labels), np.array(cams), mask_arr, None, names)


# ---------------------------------------------------------------- protocol


@dataclass
class Split:
    train_ids: np.ndarray
    test_ids: np.ndarray
    train_idx: np.ndarray
    probe_idx: np.ndarray
    gallery_idx: np.ndarray


def probe_gallery(ds: Dataset, ids: Sequence[int], rng: np.random.Generator):
    """One random probe per (identity, camera); everything else is gallery."""
    probes, gallery = [], []
    for pid in ids:
        own = np.flatnonzero(ds.labels == pid)
        if len(own) < 2:
            raise ValueError(f"identity {pid} has {len(own)} sample(s); the protocol needs >= 2")
        picks = [int(rng.choice(own[ds.cameras[own] == c])) for c in np.unique(ds.cameras[own])]
        probes.extend(picks)
        gallery.extend(int(i) for i in own if i not in picks)
    return np.array(sorted(probes)), np.array(sorted(gallery))


def split(ds: Dataset, train_frac: float = 0.5, seed: int = 0, n_train: Optional[int] = None) -> Split:
    """Identity-disjoint train/test split with probe/gallery assignment."""
    rng = np.random.default_rng(seed)
    ids = ds.identities.copy()
    rng.shuffle(ids)
    k = n_train if n_train is not None else int(round(train_frac * len(ids)))
    if not 0 < k < len(ids):
        raise ValueError(f"split leaves {k} train / {len(ids) - k} test identities")
    train_ids, test_ids = np.sort(ids[:k]), np.sort(ids[k:])
    probes, gallery = probe_gallery(ds, test_ids, rng)
    train_idx = np.flatnonzero(np.isin(ds.labels, train_ids))
    return Split(train_ids, test_ids, train_idx, probes, gallery)
