"""Alternating discriminator/generator optimization, model selection and checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import PatchBatch
from .discriminator import Discriminator
from .generator import Generator, mix_id, to_tensor
from .losses import adv_loss, cross_entropy, d_objective, g_objective, supcon_loss

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_se", "no_me", "no_con", "no_adv", "sd_only")
CHECKPOINT_MAGIC = b"SDENETCK"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    eta: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: Optional[float] = None
    d_se: int = 64
    ablation: str = "full"
    betas: Tuple[float, float] = (0.9, 0.999)
    patch_size: int = 13
    supcon_denominator: str = "negatives"
    spar_swap_stat_roles: bool = False

    def __post_init__(self):
        if self.lambda2 is None:
            self.lambda2 = self.lambda1
        self.betas = tuple(self.betas)
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    @property
    def effective_lambdas(self) -> Tuple[float, float]:
        lam1 = 0.0 if self.ablation in ("no_con", "sd_only") else self.lambda1
        lam2 = 0.0 if self.ablation in ("no_adv", "sd_only") else self.lambda2
        return lam1, lam2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class ModelState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    best_val_oa: float = -1.0
    extra: Dict = field(default_factory=dict)

    @property
    def n_bands(self) -> int:
        return self.generator.in_bands

    @property
    def n_classes(self) -> int:
        return self.discriminator.n_classes

    def snapshot(self) -> "ModelState":
        return copy.deepcopy(self)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.eta, betas=cfg.betas, weight_decay=cfg.weight_decay)


def init_state(n_bands: int, n_classes: int, config: TrainConfig) -> ModelState:
    """Fresh generator/discriminator pair, initialized deterministically from ``config.seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        g = Generator(
            n_bands,
            d_se=config.d_se,
            patch_size=config.patch_size,
            use_semantic=config.ablation != "no_se",
            use_morph=config.ablation != "no_me",
            spar_swap_stat_roles=config.spar_swap_stat_roles,
        )
        d = Discriminator(n_bands, n_classes, patch_size=config.patch_size)
    return ModelState(g, d, _adam(g.parameters(), config), _adam(d.parameters(), config), config)


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5DE, step]).generate_state(1)[0])


def d_step(state: ModelState, x: torch.Tensor, y: torch.Tensor, gen: torch.Generator) -> Dict[str, float]:
    """Discriminator update on SD, ED and ID with the generator held fixed."""
    cfg = state.config
    G, D = state.generator, state.discriminator
    lam1, _ = cfg.effective_lambdas
    n = len(y)
    if cfg.ablation == "sd_only":
        l_sd = cross_entropy(D.classify(D.embed(x)), y)
        state.opt_d.zero_grad()
        l_sd.backward()
        state.opt_d.step()
        return {"l_sd": l_sd.item(), "loss_d": l_sd.item()}

    with torch.no_grad():
        ed = G(x, gen)
        x_id, _ = mix_id(x, ed, gen)
    feats = D.embed(torch.cat([x, ed, x_id]))
    probs = D.classify(feats)
    l_sd, l_ed, l_id = (cross_entropy(p, y) for p in probs.split(n))
    if lam1 > 0:
        z = D.project(feats)
        l_con = supcon_loss(z, y.repeat(3), cfg.tau, cfg.supcon_denominator)
    else:
        l_con = torch.zeros(())
    loss_d = d_objective(l_sd, l_ed, l_id, l_con, lam1)
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()
    return {"l_sd": l_sd.item(), "l_ed": l_ed.item(), "l_id": l_id.item(), "l_supcon": l_con.item(), "loss_d": loss_d.item()}


def g_step(state: ModelState, x: torch.Tensor, y: torch.Tensor, gen: torch.Generator) -> Dict[str, float]:
    """Generator update through a frozen discriminator, with fresh randomization.

    ED or ID (chosen with probability 1/2) supplies the adversarial negatives.
    """
    cfg = state.config
    G, D = state.generator, state.discriminator
    _, lam2 = cfg.effective_lambdas
    D.requires_grad_(False)
    try:
        ed = G(x, gen)
        x_id, _ = mix_id(x, ed, gen)
        use_id = bool(torch.rand((), generator=gen) < 0.5)
        f_ed = D.embed(ed)
        l_ed_g = cross_entropy(D.classify(f_ed), y)
        if lam2 > 0:
            with torch.no_grad():
                z_sd = D.project(D.embed(x))
            z_neg = D.project(D.embed(x_id) if use_id else f_ed)
            l_adv = adv_loss(z_sd, y, z_neg, y, cfg.tau)
        else:
            l_adv = torch.zeros(())
        loss_g = g_objective(l_ed_g, l_adv, lam2)
        state.opt_g.zero_grad()
        loss_g.backward()
        state.opt_g.step()
    finally:
        D.requires_grad_(True)
    return {"l_ed_g": l_ed_g.item(), "l_adv": l_adv.item(), "loss_g": loss_g.item(), "neg_is_id": float(use_id)}


def train_step(state: ModelState, x: torch.Tensor, y: torch.Tensor) -> Dict[str, float]:
    """One discriminator update followed by one generator update on minibatch ``x``.

    ``x`` is ``N x d x s x s`` (float32), ``y`` holds 1-based labels. Mutates
    ``state`` in place and returns the loss components. Randomness comes from a
    generator seeded by ``(config.seed, state.step)``, so resumed runs replay
    exactly.
    """
    gen = torch.Generator().manual_seed(step_seed(state.config.seed, state.step))
    y = torch.as_tensor(y, dtype=torch.long)
    metrics = d_step(state, x, y, gen)
    if state.config.ablation != "sd_only":
        metrics.update(g_step(state, x, y, gen))
    state.step += 1
    return metrics


@torch.no_grad()
def predict(D: Discriminator, patches: np.ndarray, chunk: int = 1024) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels (1-based), probabilities and projections for ``N x s x s x d`` patches."""
    labels, probs, proj = [], [], []
    for start in range(0, len(patches), chunk):
        f = D.embed(to_tensor(patches[start:start + chunk]))
        p = D.classify(f)
        probs.append(p.numpy())
        labels.append(p.argmax(dim=1).numpy() + 1)
        proj.append(D.project(f).numpy())
    if not labels:
        return np.zeros(0, dtype=np.int64), np.zeros((0, D.n_classes)), np.zeros((0, D.proj.out_features))
    return np.concatenate(labels), np.concatenate(probs), np.concatenate(proj)


def accuracy(D: Discriminator, batch: PatchBatch) -> float:
    if len(batch) == 0:
        return float("nan")
    pred, _, _ = predict(D, batch.patches)
    return float(np.mean(pred == batch.labels))


def fit(
    sd_train: PatchBatch,
    sd_val: PatchBatch,
    config: TrainConfig,
    n_classes: Optional[int] = None,
    state: Optional[ModelState] = None,
    log_path=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Tuple[ModelState, List[dict]]:
    """Train for ``config.epochs`` epochs; return the best-validation-OA state and the log.

    Resumes from ``state`` when given (its epoch counter is honoured).
    """
    if len(sd_train) < 4:
        raise ValueError("need at least 4 training samples")
    if n_classes is None:
        n_classes = int(max(sd_train.labels.max(), sd_val.labels.max() if len(sd_val) else 0))
    if state is None:
        state = init_state(sd_train.band_count, n_classes, config)
    x_all = to_tensor(sd_train.patches)
    y_all = torch.as_tensor(sd_train.labels)
    n = len(sd_train)
    best = state.snapshot() if state.best_val_oa >= 0 else None
    log: List[dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(state.epoch, config.epochs):
            order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
            n_batches = max(1, math.ceil(n / config.batch_size))
            sums: Dict[str, float] = {}
            for b, idx in enumerate(np.array_split(order, n_batches)):
                idx = torch.as_tensor(idx)
                m = train_step(state, x_all[idx], y_all[idx])
                if not all(math.isfinite(v) for v in m.values()):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}: {m}")
                for k, v in m.items():
                    sums[k] = sums.get(k, 0.0) + v
            state.epoch = epoch + 1
            val_oa = accuracy(state.discriminator, sd_val) if len(sd_val) else accuracy(state.discriminator, sd_train)
            record = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sums.items()}}
            record["alpha"] = float(state.generator.alpha.detach())
            record["val_oa"] = val_oa
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(record)
            logger.info("epoch %d: val OA %.4f", epoch + 1, val_oa)
            # later epochs win ties
            if val_oa >= state.best_val_oa:
                state.best_val_oa = val_oa
                best = state.snapshot()
    finally:
        if log_file:
            log_file.close()
    return best, log


# -- checkpoints --------------------------------------------------------------

def _blocks(state: ModelState) -> List[Tuple[str, torch.Tensor]]:
    blocks = []
    for prefix, module, opt in (
        ("generator", state.generator, state.opt_g),
        ("discriminator", state.discriminator, state.opt_d),
    ):
        for name, p in module.named_parameters():
            blocks.append((f"{prefix}.{name}", p.data))
        for name, p in module.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                blocks.append((f"opt_{prefix}.{name}.{key}", torch.as_tensor(st[key])))
    return blocks


def save_checkpoint(state: ModelState, path) -> Path:
    """Write ``magic | u64 manifest length | JSON manifest | f32 LE blocks``."""
    path = Path(path)
    blocks = _blocks(state)
    manifest = {
        "format": 1,
        "config": state.config.to_dict(),
        "n_bands": state.n_bands,
        "n_classes": state.n_classes,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.config.seed,
        "best_val_oa": state.best_val_oa,
        "extra": state.extra,
        "blocks": [{"name": n, "shape": list(t.shape)} for n, t in blocks],
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, t in blocks:
            fh.write(t.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return path


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (size,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    manifest = json.loads(raw[offset: offset + size].decode("utf-8"))
    offset += size

    config = TrainConfig(**manifest["config"])
    state = init_state(manifest["n_bands"], manifest["n_classes"], config)
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.best_val_oa = manifest["best_val_oa"]
    state.extra = manifest.get("extra", {})

    params = {}
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        for name, p in module.named_parameters():
            params[f"{prefix}.{name}"] = p
    opts = {"opt_generator": state.opt_g, "opt_discriminator": state.opt_d}

    for block in manifest["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensor = torch.from_numpy(values.astype(np.float32))
        name = block["name"]
        if name in params:
            with torch.no_grad():
                params[name].copy_(tensor)
            continue
        opt_key, rest = name.split(".", 1)
        pname, key = rest.rsplit(".", 1)
        param = params[f"{opt_key[4:]}.{pname}"]
        opts[opt_key].state[param][key] = tensor.clone()
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return state


__all__ = [
    "ABLATIONS",
    "TrainingDivergedError",
    "TrainConfig",
    "ModelState",
    "init_state",
    "step_seed",
    "d_step",
    "g_step",
    "train_step",
    "predict",
    "accuracy",
    "fit",
    "save_checkpoint",
    "read_manifest",
    "load_checkpoint",
]
