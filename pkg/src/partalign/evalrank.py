"""Single-query retrieval evaluation: ranked lists, CMC and mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import imgio
from . import partnet as pn
from .synthdata import Dataset, Split


@dataclass
class EvalReport:
    cmc: List[float]
    mAP: float
    first_hit: List[int]
    excluded: int
    num_probes: int
    config: dict = field(default_factory=dict)

    def rank(self, n: int) -> float:
        """CMC(n); past the gallery length the curve stays at its last value."""
        if n < 1:
            raise ValueError(f"rank must be >= 1, got {n}")
        return self.cmc[min(n, len(self.cmc)) - 1]

    def to_dict(self) -> dict:
        return {"cmc": self.cmc, "map": self.mAP, "excluded_probes": self.excluded,
                "num_probes": self.num_probes, "first_hit": self.first_hit, "config": self.config}

    def write(self, out_dir, stem: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / f"{stem}_cmc.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["rank", "value"])
            for r, v in enumerate(self.cmc, start=1):
                wr.writerow([r, repr(v)])


def sq_dists(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = probes[:, None, :] - gallery[None, :, :]
    return np.einsum("pgk,pgk->pg", diff, diff)


def rank_gallery(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending squared distance; ties keep index order."""
    gallery = np.asarray(gallery, dtype=float)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    d = sq_dists(np.asarray(probe, dtype=float)[None], gallery)[0]
    return np.argsort(d, kind="stable")


def first_hit_rank(relevance: Sequence[bool]) -> int:
    """1-based rank of the first relevant entry, 0 when there is none."""
    hits = np.flatnonzero(np.asarray(relevance, dtype=bool))
    return int(hits[0]) + 1 if len(hits) else 0


def cmc(relevance_lists: Sequence[Sequence[bool]], max_rank: int) -> np.ndarray:
    """CMC(n) for n = 1..max_rank over probes having at least one relevant item."""
    firsts = [first_hit_rank(r) for r in relevance_lists]
    firsts = np.array([f for f in firsts if f > 0])
    if len(firsts) == 0:
        return np.zeros(max_rank)
    ranks = np.arange(1, max_rank + 1)
    return (firsts[None, :] <= ranks[:, None]).mean(axis=1)


def average_precision(relevance: Sequence[bool]) -> float:
    rel = np.asarray(relevance, dtype=bool)
    pos = np.flatnonzero(rel)
    if len(pos) == 0:
        return 0.0
    hits = np.arange(1, len(pos) + 1)
    return float(np.mean(hits / (pos + 1)))


def mean_ap(relevance_lists: Sequence[Sequence[bool]]) -> float:
    aps = [average_precision(r) for r in relevance_lists if np.any(r)]
    return float(np.mean(aps)) if aps else 0.0


def relevance_lists(P: np.ndarray, G: np.ndarray, probe_labels, probe_cams,
                    gallery_labels, gallery_cams) -> List[np.ndarray]:
    """Ranked relevance per probe; same-identity same-camera entries are dropped."""
    D = sq_dists(P, G)
    out = []
    for i in range(len(P)):
        order = np.argsort(D[i], kind="stable")
        same = gallery_labels[order] == probe_labels[i]
        junk = same & (gallery_cams[order] == probe_cams[i])
        out.append(same[~junk])
    return out


def evaluate_embeddings(P, G, probe_labels, probe_cams, gallery_labels, gallery_cams,
                        max_rank: int = 20, config: Optional[dict] = None) -> EvalReport:
    rels = relevance_lists(np.asarray(P), np.asarray(G), np.asarray(probe_labels),
                           np.asarray(probe_cams), np.asarray(gallery_labels), np.asarray(gallery_cams))
    excluded = sum(1 for r in rels if not np.any(r))
    max_rank = min(max_rank, max(len(r) for r in rels))
    return EvalReport([float(v) for v in cmc(rels, max_rank)], mean_ap(rels),
                      [first_hit_rank(r) for r in rels], excluded, len(rels), dict(config or {}))


def evaluate(model: pn.Model, ds: Dataset, probe_idx, gallery_idx, max_rank: int = 20,
             config: Optional[dict] = None) -> EvalReport:
    """Embed probes and gallery with ``model`` and score the ranking."""
    idx = np.concatenate([probe_idx, gallery_idx])
    masks = ds.masks[idx] if model.head.head == "fixed-mask" else None
    E = pn.embed_numpy(ds.images[idx], model, masks)
    P, G = E[:len(probe_idx)], E[len(probe_idx):]
    cfg = {**model.config_dict(), **(config or {})}
    return evaluate_embeddings(P, G, ds.labels[probe_idx], ds.cameras[probe_idx],
                               ds.labels[gallery_idx], ds.cameras[gallery_idx], max_rank, cfg)


def evaluate_split(model: pn.Model, ds: Dataset, sp: Split, max_rank: int = 20) -> EvalReport:
    return evaluate(model, ds, sp.probe_idx, sp.gallery_idx, max_rank)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean CMC/mAP over trials (e.g. repeated random probe draws)."""
    n = min(len(r.cmc) for r in reports)
    return EvalReport([float(np.mean([r.cmc[i] for r in reports])) for i in range(n)],
                      float(np.mean([r.mAP for r in reports])), [],
                      int(sum(r.excluded for r in reports)), int(sum(r.num_probes for r in reports)),
                      {"trials": len(reports)})


def upsample_map(m: np.ndarray, hw) -> np.ndarray:
    h, w = m.shape
    fy, fx = -(-hw[0] // h), -(-hw[1] // w)
    return np.kron(m, np.ones((fy, fx)))[:hw[0], :hw[1]]


def export_part_maps(model: pn.Model, images: np.ndarray, out_dir, names: Optional[List[str]] = None,
                     montage: bool = True) -> List[Path]:
    """One PGM per part per image (nearest-upsampled, value*255) plus a PNG montage."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    images = np.asarray(images, dtype=float)
    maps = pn.part_maps(images, model)
    names = names or [f"img{i:03d}" for i in range(len(images))]
    hw = images.shape[1:3]
    written = []
    for i, name in enumerate(names):
        stem = Path(name).stem
        for k in range(maps.shape[-1]):
            p = out / f"{stem}_part{k}.pgm"
            try:
                imgio.write_pgm(p, upsample_map(maps[i, :, :, k], hw))
            except OSError as exc:
                raise OSError(f"cannot write {p}: {exc}") from None
            written.append(p)
    if montage:
        from . import plotting
        plotting.part_map_montage(images, maps, out / "montage.png", names)
    return written
