"""Command-line entry points: ``synth``, ``train``, ``eval``, ``ablate`` and ``render-map``.

Every command accepts ``--config`` (a JSON file) plus flag overrides; flags win.
The fully resolved configuration is written to ``<out>/config.json`` so a run
can be repeated with ``--config <out>/config.json``.

Exit status: 0 on success, 2 for invalid arguments or configuration, 3 when
the run itself fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

logger = logging.getLogger("sdenet")

VARIANTS = ["full", "no_se", "no_me", "no_con", "no_adv"]


class UsageError(Exception):
    """Bad arguments or configuration (exit status 2)."""


@dataclass
class RunConfig:
    # training
    eta: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: Optional[float] = None
    d_se: Optional[int] = None  # None: 16 for <= 4 bands, else 64
    ablation: str = "full"
    patch_size: int = 13
    supcon_denominator: str = "negatives"
    spar_swap_stat_roles: bool = False
    # data
    sd: Optional[str] = None
    td: Optional[str] = None
    checkpoint: Optional[str] = None
    # "scene": each cube by its own band range; "source": by the training cube's range.
    # None trains per scene and evaluates the way the checkpoint was trained.
    normalize: Optional[str] = None
    split_ratio: float = 0.8
    augment_factor: int = 1
    flips: bool = False
    radiation_noise: float = 0.0
    # evaluation
    render_map: bool = False
    full_map: bool = False
    palette: Optional[dict] = None
    # ablation grid
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    # synthetic data
    classes: int = 5
    bands: int = 16
    size: List[int] = field(default_factory=lambda: [56, 56])
    blobs: int = 3
    max_gain: float = 1.3
    gain: Optional[List[float]] = None
    offset: Optional[List[float]] = None
    nonlinearity: float = 1.2
    noise: float = 0.02

    def validate(self):
        from .trainer import ABLATIONS

        if self.ablation not in ABLATIONS:
            raise UsageError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        bad = [v for v in self.variants if v not in ABLATIONS]
        if bad:
            raise UsageError(f"unknown variants {bad}")
        if self.normalize not in (None, "scene", "source"):
            raise UsageError("normalize must be 'scene' or 'source'")
        if not 0 < self.split_ratio < 1:
            raise UsageError("split_ratio must lie in (0, 1)")
        if self.d_se is not None and self.d_se < 2:
            raise UsageError("d_se must be >= 2")
        if not self.seeds:
            raise UsageError("need at least one seed")
        try:
            self.train_config(self.bands)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def resolved_d_se(self, n_bands: int) -> int:
        if self.d_se is not None:
            return self.d_se
        return 16 if n_bands <= 4 else 64

    def train_config(self, n_bands: int, **overrides):
        from .trainer import TrainConfig

        kw = dict(
            eta=self.eta,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            tau=self.tau,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            d_se=self.resolved_d_se(n_bands),
            ablation=self.ablation,
            patch_size=self.patch_size,
            supcon_denominator=self.supcon_denominator,
            spar_swap_stat_roles=self.spar_swap_stat_roles,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def synthetic_spec(self):
        from .data import SyntheticSpec

        return SyntheticSpec(
            class_count=self.classes,
            band_count=self.bands,
            scene_size=tuple(self.size),
            blob_count=self.blobs,
            gain=self.gain,
            offset=self.offset,
            max_gain=self.max_gain,
            nonlinearity=self.nonlinearity,
            noise_sigma=self.noise,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# flag name -> RunConfig field
FLAG_FIELDS = {
    "seed": "seed",
    "ablation": "ablation",
    "eta": "eta",
    "lambda_": "lambda1",
    "dse": "d_se",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "sd": "sd",
    "td": "td",
    "checkpoint": "checkpoint",
    "normalize": "normalize",
    "render_map": "render_map",
    "full_map": "full_map",
    "seeds": "seeds",
    "variants": "variants",
    "classes": "classes",
    "bands": "bands",
    "size": "size",
    "max_gain": "max_gain",
    "nonlinearity": "nonlinearity",
    "noise": "noise",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
            values = json.loads(text) if text.strip() else {}
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError("config file must hold a JSON object")
        values.pop("command", None)  # present in echoed configs
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            values[name] = value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    cfg.validate()
    return cfg


def write_config(cfg: RunConfig, out: Path, command: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps({"command": command, **cfg.to_dict()}, indent=2, sort_keys=True))
    return path


def _cube_dir(path: str, default_child: str) -> Path:
    p = Path(path)
    if not (p / "meta.json").exists() and (p / default_child / "meta.json").exists():
        return p / default_child
    return p


def _require(value, name: str):
    if value is None:
        raise UsageError(f"--{name} is required")
    return value


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> int:
    from .data import save_cube, synth_pair

    try:
        spec = cfg.synthetic_spec()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sd, td = synth_pair(spec)
    save_cube(sd, out / "sd")
    save_cube(td, out / "td")
    manifest = {
        "sd": "sd",
        "td": "td",
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(spec).items()},
        "labeled_pixels": int((sd.labels > 0).sum()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {out / 'sd'} and {out / 'td'} ({manifest['labeled_pixels']} labeled pixels each)")
    return 0


def _load_training_data(cfg: RunConfig):
    from .data import augment, band_range, extract_patches, load_cube, normalize_bands, split_train_val, RasterCube

    raw = load_cube(_cube_dir(_require(cfg.sd, "sd"), "sd"), normalize=False)
    ref = band_range(raw.bands)
    cube = RasterCube(normalize_bands(raw.bands), raw.labels, raw.class_count)
    train, val = split_train_val(extract_patches(cube, cfg.patch_size), cfg.split_ratio, cfg.seed)
    if cfg.augment_factor > 1 or cfg.flips or cfg.radiation_noise > 0:
        train = augment(train, cfg.flips, cfg.radiation_noise, cfg.augment_factor, cfg.seed)
    return cube, train, val, ref


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .trainer import fit, save_checkpoint

    cube, train, val, ref = _load_training_data(cfg)
    tc = cfg.train_config(cube.band_count)
    log_path = out / "log.jsonl"
    log_path.unlink(missing_ok=True)
    state, log = fit(train, val, tc, n_classes=cube.class_count, log_path=log_path)
    state.extra.update(
        band_lo=[float(v) for v in ref[0]],
        band_hi=[float(v) for v in ref[1]],
        normalize=cfg.normalize or "scene",
    )
    ckpt = save_checkpoint(state, out / "checkpoint.bin")
    summary = {
        "ablation": tc.ablation,
        "epochs_run": len(log),
        "best_epoch": state.epoch,
        "best_val_oa": state.best_val_oa,
        "final_val_oa": log[-1]["val_oa"],
        "train_samples": len(train),
        "val_samples": len(val),
        "d_se": tc.d_se,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"checkpoint {ckpt}: best validation OA {state.best_val_oa:.4f} at epoch {state.epoch}")
    return 0


def _load_target(cfg: RunConfig, state):
    from .data import RasterCube, load_cube, normalize_bands

    raw = load_cube(_cube_dir(_require(cfg.td, "td"), "td"), normalize=False)
    if raw.band_count != state.n_bands:
        raise RuntimeError(f"band mismatch: the model was trained on {state.n_bands} bands, {cfg.td} has {raw.band_count}")
    mode = cfg.normalize or state.extra.get("normalize", "scene")
    reference = None
    if mode == "source" and "band_lo" in state.extra:
        reference = (np.asarray(state.extra["band_lo"]), np.asarray(state.extra["band_hi"]))
    return RasterCube(normalize_bands(raw.bands, reference), raw.labels, raw.class_count)


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    from .data import RasterCube, save_cube
    from .evaluation import compute_metrics, predict_scene, render_map
    from .trainer import load_checkpoint

    state = load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    cube = _load_target(cfg, state)
    raster, emb = predict_scene(state, cube, full_map=cfg.full_map, patch_size=state.config.patch_size)
    labeled = cube.labels > 0
    report = compute_metrics(raster[labeled], cube.labels[labeled], state.n_classes)
    report.to_json(out / "metrics.json")
    emb.save(out / "embeddings")
    save_cube(RasterCube(np.zeros(raster.shape + (1,), np.float32), raster, state.n_classes), out / "prediction")
    if cfg.render_map:
        palette = {int(k): v for k, v in cfg.palette.items()} if cfg.palette else None
        render_map(raster, out / "map.png", palette)
    print(f"OA {report.overall_accuracy:.4f}  kappa {report.kappa:.4f}  ({report.sample_count} pixels)")
    return 0


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    from .evaluation import compute_metrics, predict_scene
    from .trainer import fit

    cube, train, val, ref = _load_training_data(cfg)
    rows = []
    table = out / "ablation.tsv"
    with open(table, "w") as fh:
        fh.write("variant\tseed\tOA\tKC\tval_OA\n")
        for variant in cfg.variants:
            for seed in cfg.seeds:
                tc = cfg.train_config(cube.band_count, ablation=variant, seed=seed)
                state, _ = fit(train, val, tc, n_classes=cube.class_count)
                state.extra.update(band_lo=list(map(float, ref[0])), band_hi=list(map(float, ref[1])), normalize=cfg.normalize or "scene")
                target = _load_target(cfg, state)
                raster, _ = predict_scene(state, target, patch_size=tc.patch_size)
                mask = target.labels > 0
                rep = compute_metrics(raster[mask], target.labels[mask], cube.class_count)
                row = {"variant": variant, "seed": seed, "oa": rep.overall_accuracy, "kappa": rep.kappa, "val_oa": state.best_val_oa}
                rows.append(row)
                fh.write(f"{variant}\t{seed}\t{rep.overall_accuracy:.4f}\t{rep.kappa:.4f}\t{state.best_val_oa:.4f}\n")
                fh.flush()
                print(f"{variant:7s} seed {seed}: OA {rep.overall_accuracy:.4f}  KC {rep.kappa:.4f}", flush=True)
    summary = {}
    for variant in cfg.variants:
        oa = [r["oa"] for r in rows if r["variant"] == variant]
        kc = [r["kappa"] for r in rows if r["variant"] == variant]
        summary[variant] = {"oa": float(np.mean(oa)), "oa_std": float(np.std(oa)), "kappa": float(np.mean(kc)), "kappa_std": float(np.std(kc))}
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "summary": summary}, indent=2))
    return 0


def cmd_render_map(cfg: RunConfig, out: Path, source: str) -> int:
    from .data import load_cube
    from .evaluation import render_map

    cube = load_cube(source, normalize=False)
    palette = {int(k): v for k, v in cfg.palette.items()} if cfg.palette else None
    path = render_map(cube.labels, out / "map.png", palette)
    print(f"wrote {path}")
    return 0


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with run settings (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablation", help="full, no_se, no_me, no_con, no_adv or sd_only")
    p.add_argument("--eta", type=float, help="learning rate")
    p.add_argument("--lambda", dest="lambda_", type=float, help="weight of both contrastive terms")
    p.add_argument("--dse", type=int, help="semantic embedding width")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdenet", description="Single-source domain expansion for hyperspectral scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic source/target cube pair")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--max-gain", type=float)
    p.add_argument("--nonlinearity", type=float)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train on a source cube")
    _common(p)
    p.add_argument("--sd", help="source cube directory (or a synth output directory)")
    p.add_argument("--normalize", choices=["scene", "source"])

    p = sub.add_parser("eval", help="classify a target cube with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--td", help="target cube directory (or a synth output directory)")
    p.add_argument("--normalize", choices=["scene", "source"])
    p.add_argument("--render-map", action="store_true")
    p.add_argument("--full-map", action="store_true")

    p = sub.add_parser("ablate", help="train and score every variant over a seed list")
    _common(p)
    p.add_argument("--sd")
    p.add_argument("--td")
    p.add_argument("--normalize", choices=["scene", "source"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--variants", nargs="+")

    p = sub.add_parser("render-map", help="render the label raster of a cube directory as PNG")
    _common(p)
    p.add_argument("--input", required=True, help="cube directory, e.g. an eval 'prediction' output")
    return parser


def _apply_threads():
    value = os.environ.get("SDENET_THREADS")
    if not value:
        return
    import torch

    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"SDENET_THREADS must be a positive integer, got {value!r}") from exc
    if n < 1:
        raise UsageError(f"SDENET_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on malformed flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        _apply_threads()
        cfg = resolve_config(args)
        if args.command == "synth":
            cfg.synthetic_spec()
    except (UsageError, ValueError) as exc:
        print(f"sdenet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    write_config(cfg, out, args.command)
    try:
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_render_map(cfg, out, args.input)
    except UsageError as exc:
        print(f"sdenet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        logger.debug("failure", exc_info=True)
        print(f"sdenet {args.command}: failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
