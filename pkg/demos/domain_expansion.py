"""Look at what an untrained and a briefly trained generator do to source patches.

Prints per-band statistics of SD, ED and ID patches and the MMD between them,
then writes a false-colour strip (SD | ED | ID for eight patches) to
``domain_expansion.png``.

    python demos/domain_expansion.py
"""
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sdenet.benchmark import make_benchmark
from sdenet.data import SyntheticSpec
from sdenet.evaluation import mmd
from sdenet.generator import mix_id, to_patches, to_tensor
from sdenet.trainer import TrainConfig, init_state, train_step

OUT = Path(__file__).with_name("domain_expansion.png")


def triplet(state, x, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        ed = state.generator(x, gen)
        x_id, _ = mix_id(x, ed, gen)
    return ed, x_id


def describe(tag, x, ed, x_id):
    flat = lambda t: to_patches(t).reshape(len(t), -1)
    print(f"[{tag}]")
    for name, t in (("SD", x), ("ED", ed), ("ID", x_id)):
        band_mean = t.mean(dim=(0, 2, 3)).numpy()
        print(f"  {name}  mean {t.mean():.3f}  std {t.std():.3f}  band means {np.round(band_mean[:4], 3)} ...")
    print(f"  MMD^2(SD, ED) {mmd(flat(x), flat(ed)):.4f}   MMD^2(SD, ID) {mmd(flat(x), flat(x_id)):.4f}")


def false_colour(t):
    rgb = to_patches(t)[..., [12, 7, 2]]
    return (np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def main():
    bench = make_benchmark(SyntheticSpec())
    x, y = to_tensor(bench.train.patches[:64]), torch.as_tensor(bench.train.labels[:64])
    state = init_state(16, bench.n_classes, TrainConfig(d_se=16, seed=0))

    describe("untrained", x, *triplet(state, x, 1))
    for _ in range(50):
        train_step(state, x, y)
    ed, x_id = triplet(state, x, 1)
    describe("after 50 steps", x, ed, x_id)

    tiles = [np.concatenate([false_colour(t)[i] for t in (x, ed, x_id)], axis=1) for i in range(8)]
    strip = np.concatenate(tiles, axis=0)
    Image.fromarray(strip).resize((strip.shape[1] * 6, strip.shape[0] * 6), Image.NEAREST).save(OUT)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
