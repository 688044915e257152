"""Linear probe on separable Gaussian embeddings and decoder-only segmentation on blobs."""
import argparse

import numpy as np
import torch

from retmae.adapt import ProbeProtocol, SegProtocol, fit_linear_head, mean_dice, seg_predict, seg_tune
from retmae.core import ModelConfig
from retmae.data import synth_blobs
from retmae.metrics import balanced_accuracy


def probe(seeds: int, dim: int = 64) -> list[float]:
    out = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        y = np.arange(450) % 2
        x = torch.from_numpy(rng.standard_normal((450, dim)) + 3 * np.outer(2 * y - 1, u)).float()
        torch.manual_seed(seed)
        head = torch.nn.Linear(dim, 2)
        fit_linear_head(head, x[:200], y[:200], x[200:250], y[200:250], ProbeProtocol(), seed)
        with torch.no_grad():
            out.append(balanced_accuracy(head(x[250:]).argmax(1).numpy(), y[250:]))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    torch.set_num_threads(1)
    b = probe(args.seeds)
    print(f"probe BAcc {np.mean(b):.4f} +/- {np.std(b, ddof=1):.4f} over {len(b)} seeds")
    cfg = ModelConfig.tiny()
    blobs = synth_blobs(24, cfg.image_size, seed=0)
    res = seg_tune(blobs[:16], blobs[16:], cfg, 2, protocol=SegProtocol(crop=cfg.image_size, epochs=args.epochs))
    dice = mean_dice(seg_predict(blobs[16:], res.model), np.stack([s.mask for s in blobs[16:]]), 2)
    print(f"decoder-only Dice {dice:.3f} (best validation epoch {res.best_epoch})")


if __name__ == "__main__":
    main()
