"""Command-line entry point: generate, train, eval, sweep-parts, bench.

Every command writes its outputs under ``--out`` together with a
``config.echo`` JSON file; passing that file back through ``--config``
reruns the same experiment. Figures are rendered next to the CSV/JSON
outputs.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint, evalrank, plotting
from . import partnet as pn
from . import synthdata as sd
from . import trainer as tr
from . import tripletloss as tl

log = logging.getLogger("partalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ECHO_NAME = "config.echo"
DEFAULT_SWEEP = (1, 2, 4, 8, 12)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------ run config

def default_run_config() -> dict:
    """The merged, serializable view of every knob a run depends on."""
    return {
        "command": None,
        "seed": 0,
        "data": None,
        "out": None,
        "backbone": asdict(pn.BackboneConfig()),
        "partnet": asdict(pn.PartNetConfig()),
        "train": asdict(tr.TrainConfig()),
        "split": {"train_frac": 0.5, "n_train": None, "seed": None, "val_frac": 0.5},
        "generate": {"ids": 75, "per_id": 24, "group": 6, "nuisance": asdict(sd.Nuisance())},
        "eval": {"max_rank": 20, "export_maps": 0, "checkpoint": None, "sanity": False},
        "sweep": {"parts": list(DEFAULT_SWEEP)},
        "bench": {"batch_sizes": [8, 16, 32], "K_img": 4},
    }


# flag dest -> location in the run config
FLAG_MAP = {
    "seed": ("seed",),
    "data": ("data",),
    "out": ("out",),
    "ids": ("generate", "ids"),
    "per_id": ("generate", "per_id"),
    "group": ("generate", "group"),
    "clutter": ("generate", "nuisance", "clutter"),
    "shift": ("generate", "nuisance", "shift_frac"),
    "head": ("partnet", "head"),
    "parts": ("partnet", "parts"),
    "attention": ("partnet", "attention"),
    "stripes": ("partnet", "stripes"),
    "grid": ("partnet", "grid"),
    "width": ("partnet", "width"),
    "iterations": ("train", "iterations"),
    "lr": ("train", "lr"),
    "lr_period": ("train", "lr_period"),
    "batch_ids": ("train", "P"),
    "images_per_id": ("train", "K_img"),
    "margin": ("train", "margin"),
    "threads": ("train", "threads"),
    "deterministic": ("train", "deterministic"),
    "grad_mode": ("train", "grad_mode"),
    "checkpoint_period": ("train", "checkpoint_period"),
    "train_frac": ("split", "train_frac"),
    "n_train": ("split", "n_train"),
    "split_seed": ("split", "seed"),
    "max_rank": ("eval", "max_rank"),
    "export_maps": ("eval", "export_maps"),
    "checkpoint": ("eval", "checkpoint"),
    "sanity": ("eval", "sanity"),
    "sweep_parts": ("sweep", "parts"),
    "batch_sizes": ("bench", "batch_sizes"),
}


def _deep_update(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _set(cfg: dict, path, value) -> None:
    node = cfg
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from None


def build_run_config(args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit flags."""
    cfg = default_run_config()
    if getattr(args, "config", None):
        _deep_update(cfg, read_config_file(args.config))
    for dest, path in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(cfg, path, value)
    cfg["command"] = args.command
    cfg["train"]["seed"] = cfg["seed"]
    if cfg["split"]["seed"] is None:
        cfg["split"]["seed"] = cfg["seed"]
    cfg["backbone"]["input_hw"] = list(cfg["backbone"]["input_hw"])
    return cfg


def write_echo(cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / ECHO_NAME
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return p


def _tuple_fields(d: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def model_from_config(cfg: dict, parts: Optional[int] = None) -> pn.Model:
    head_d = dict(cfg["partnet"])
    if parts is not None:
        head_d["parts"] = parts
    try:
        backbone = pn.BackboneConfig(**_tuple_fields(cfg["backbone"], pn.BackboneConfig))
        head = pn.PartNetConfig(**_tuple_fields(head_d, pn.PartNetConfig))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return pn.build_model(backbone, head, seed=cfg["seed"])


def train_config(cfg: dict) -> tr.TrainConfig:
    try:
        return tr.TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def nuisance_from(cfg: dict) -> sd.Nuisance:
    n = dict(cfg["generate"]["nuisance"])
    n["scale_range"] = tuple(n["scale_range"])
    return sd.Nuisance(**n)


def load_data(cfg: dict) -> sd.Dataset:
    if not cfg["data"]:
        raise UsageError("--data is required")
    path = Path(cfg["data"])
    if not path.is_dir():
        raise DataError(f"data directory {path} does not exist")
    try:
        return sd.load_dir(path, tuple(cfg["backbone"]["input_hw"]))
    except ValueError as exc:
        raise DataError(str(exc)) from None


def make_split(ds: sd.Dataset, cfg: dict) -> sd.Split:
    s = cfg["split"]
    try:
        return sd.split(ds, s["train_frac"], s["seed"], s["n_train"])
    except ValueError as exc:
        raise DataError(str(exc)) from None


def validation_split(ds: sd.Dataset, sp: sd.Split, cfg: dict) -> sd.Split:
    """Partition the training identities again into fit / validation halves."""
    train_only = ds.subset(sp.train_idx)
    try:
        inner = sd.split(train_only, 1 - cfg["split"]["val_frac"], cfg["split"]["seed"] + 1)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    remap = lambda idx: sp.train_idx[idx]  # noqa: E731
    return sd.Split(inner.train_ids, inner.test_ids, remap(inner.train_idx),
                    remap(inner.probe_idx), remap(inner.gallery_idx))


def _out(cfg: dict) -> Path:
    if not cfg["out"]:
        raise UsageError("--out is required")
    return Path(cfg["out"])


# ------------------------------------------------------------ commands

def cmd_generate(cfg: dict, force: bool = False) -> int:
    g = cfg["generate"]
    if g["ids"] < 1 or g["per_id"] < 1:
        raise UsageError("--ids and --per-id must be >= 1")
    out = _out(cfg)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    hw = tuple(cfg["backbone"]["input_hw"])
    ds = sd.generate(g["ids"], g["per_id"], nuisance_from(cfg), cfg["seed"], hw, group=g["group"])
    sd.write_dir(ds, out)
    write_echo(cfg, out)
    print(f"wrote {len(ds)} images of {len(ds.identities)} identities to {out}")
    return EXIT_OK


def _train_on(ds: sd.Dataset, idx, cfg: dict, out: Optional[Path], parts: Optional[int] = None):
    model = model_from_config(cfg, parts)
    return tr.train(ds.subset(idx), train_config(cfg), model, out)


def cmd_train(cfg: dict) -> int:
    out = _out(cfg)
    ds = load_data(cfg)
    sp = make_split(ds, cfg)
    write_echo(cfg, out)
    t0 = time.perf_counter()
    res = _train_on(ds, sp.train_idx, cfg, out)
    plotting.plot_loss(res.log, out / "loss.png")
    (out / "split.json").write_text(json.dumps(
        {"train_ids": sp.train_ids.tolist(), "test_ids": sp.test_ids.tolist()}) + "\n")
    last = res.log[-1] if res.log else {"mean_loss": float("nan"), "active_triplets": 0}
    print(f"trained {cfg['partnet']['head']} for {len(res.log)} iterations in "
          f"{time.perf_counter() - t0:.1f}s; final loss {last['mean_loss']:.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _locate_checkpoint(cfg: dict) -> Path:
    ck = cfg["eval"]["checkpoint"]
    if not ck:
        raise UsageError("--checkpoint is required")
    ck = Path(ck)
    if ck.is_dir():
        ck = ck / "model.ckpt"
    if not ck.is_file():
        raise DataError(f"checkpoint {ck} not found")
    return ck


def cmd_eval(cfg: dict) -> int:
    out = _out(cfg)
    ck = _locate_checkpoint(cfg)
    try:
        model = checkpoint.load(ck)
    except checkpoint.CheckpointError as exc:
        raise DataError(str(exc)) from None
    ds = load_data(cfg)
    sp = make_split(ds, cfg)
    if cfg["eval"]["sanity"]:
        # score training identities with the same protocol
        rng = np.random.default_rng(cfg["split"]["seed"])
        probes, gallery = sd.probe_gallery(ds, sp.train_ids, rng)
    else:
        probes, gallery = sp.probe_idx, sp.gallery_idx
    write_echo(cfg, out)
    report = evalrank.evaluate(model, ds, probes, gallery, cfg["eval"]["max_rank"],
                               {"checkpoint": str(ck), "sanity": cfg["eval"]["sanity"]})
    report.write(out, "eval")
    plotting.plot_cmc({model.head.head: report.cmc}, out / "cmc.png")
    n_maps = cfg["eval"]["export_maps"]
    if n_maps:
        if model.head.head != "partnet":
            raise UsageError(f"--export-maps needs the partnet head, checkpoint has {model.head.head}")
        pick = probes[:n_maps]
        evalrank.export_part_maps(model, ds.images[pick], out / "part_maps",
                                  [ds.names[i] for i in pick])
    print(f"rank-1 {report.rank(1):.3f} rank-5 {report.rank(5):.3f} mAP {report.mAP:.3f} "
          f"({report.num_probes} probes, {report.excluded} excluded)")
    return EXIT_OK


SWEEP_COLUMNS = ("K", "rank1", "rank5", "rank10", "rank20", "mAP")


def cmd_sweep_parts(cfg: dict) -> int:
    out = _out(cfg)
    ds = load_data(cfg)
    sp = make_split(ds, cfg)
    val = validation_split(ds, sp, cfg)
    cfg["partnet"]["head"] = "partnet"
    write_echo(cfg, out)
    rows = []
    for k in cfg["sweep"]["parts"]:
        res = _train_on(ds, val.train_idx, cfg, out / f"K{k}", parts=k)
        rep = evalrank.evaluate(res.model, ds, val.probe_idx, val.gallery_idx, cfg["eval"]["max_rank"])
        rows.append({"K": k, **{f"rank{r}": rep.rank(r) for r in (1, 5, 10, 20)}, "mAP": rep.mAP})
        print(f"K={k:<3d} rank-1 {rep.rank(1):.3f} mAP {rep.mAP:.3f}")
    _write_rows(out / "sweep.csv", rows, SWEEP_COLUMNS)
    plotting.plot_sweep(rows, out / "sweep.png")
    return EXIT_OK


BENCH_COLUMNS = ("M", "triplets", "active", "ms_naive", "ms_aggregated", "speedup",
                 "max_grad_diff", "backward_aggregated", "backward_naive")


def cmd_bench(cfg: dict) -> int:
    out = _out(cfg)
    write_echo(cfg, out)
    model = model_from_config(cfg)
    b = cfg["bench"]
    images = labels = None
    if cfg["data"]:
        ds = load_data(cfg)
        images, labels = ds.images, ds.labels
    rows = tl.bench_aggregation(b["batch_sizes"], model, cfg["train"]["margin"], b["K_img"],
                                cfg["seed"], images, labels, mode="per-sample")
    for r in rows:
        r["speedup"] = r["ms_naive"] / r["ms_aggregated"]
        print(f"M={r['M']:<4d} active {r['active']:<6d} naive {r['ms_naive']:9.1f} ms  "
              f"aggregated {r['ms_aggregated']:8.1f} ms  x{r['speedup']:.1f}")
    _write_rows(out / "bench.csv", rows, BENCH_COLUMNS)
    plotting.plot_bench(rows, out / "bench.png")
    return EXIT_OK


def _write_rows(path: Path, rows: List[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-parts": cmd_sweep_parts,
    "bench": cmd_bench,
}


# ------------------------------------------------------------ parser

def _int_list(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partalign", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run config (e.g. a config.echo)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory")

    def model_flags(p):
        p.add_argument("--head", choices=pn.HEADS)
        p.add_argument("--parts", type=int)
        p.add_argument("--attention", choices=pn.ATTENTIONS)
        p.add_argument("--stripes", type=int)
        p.add_argument("--grid", type=int)
        p.add_argument("--width", type=int)

    def split_flags(p):
        p.add_argument("--train-frac", type=float)
        p.add_argument("--n-train", type=int)
        p.add_argument("--split-seed", type=int)

    def train_flags(p):
        p.add_argument("--iterations", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-period", type=int)
        p.add_argument("--batch-ids", type=int, help="identities per batch (P)")
        p.add_argument("--images-per-id", type=int, help="images per identity (K)")
        p.add_argument("--margin", type=float)
        p.add_argument("--grad-mode", choices=("batched", "per-sample"))
        p.add_argument("--threads", type=int)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--checkpoint-period", type=int)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--ids", type=int)
    p.add_argument("--per-id", type=int)
    p.add_argument("--group", type=int, help="identities sharing one colour set")
    p.add_argument("--clutter", type=int)
    p.add_argument("--shift", type=float, help="max translation as a fraction of the box")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model on the training identities")
    common(p)
    model_flags(p)
    split_flags(p)
    train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test identities")
    common(p)
    split_flags(p)
    p.add_argument("--checkpoint", help="checkpoint file or training output directory")
    p.add_argument("--max-rank", type=int)
    p.add_argument("--export-maps", type=int, metavar="N", help="export part maps of N probes")
    p.add_argument("--sanity", action="store_true", default=None,
                   help="score training identities instead of test identities")

    p = sub.add_parser("sweep-parts", help="validation sweep over the number of parts")
    common(p)
    model_flags(p)
    split_flags(p)
    train_flags(p)
    p.add_argument("--sweep-parts", "--K", dest="sweep_parts", type=_int_list,
                   help="comma-separated part counts (default 1,2,4,8,12)")
    p.add_argument("--max-rank", type=int)

    p = sub.add_parser("bench", help="time aggregated vs per-triplet gradients")
    common(p)
    model_flags(p)
    p.add_argument("--batch-sizes", type=_int_list)
    p.add_argument("--margin", type=float)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_run_config(args)
        if args.command == "generate":
            return cmd_generate(cfg, force=args.force)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"partalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"partalign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (tr.NumericError, FloatingPointError) as exc:
        print(f"partalign: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
