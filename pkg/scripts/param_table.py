"""Print analytic parameter counts (millions) for every preset and mode."""
import argparse

from retmae.core import ModelConfig, count_params

PUBLISHED_M = {("Base", "pretrain"): 99.01, ("Large", "pretrain"): 318.23,
               ("Base", "classify"): 90.37, ("Large", "classify"): 309.40,
               ("Base", "segment"): 96.16, ("Large", "segment"): 315.52}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=2)
    args = ap.parse_args()
    print(f"{'variant':<8}{'mode':<10}{'params (M)':>12}{'reference':>12}{'dev %':>8}")
    for variant in ("Tiny", "Base", "Large"):
        cfg = ModelConfig.preset(variant)
        for mode in ("pretrain", "classify", "segment"):
            got = count_params(cfg, mode, args.classes) / 1e6
            ref = PUBLISHED_M.get((variant, mode))
            dev = f"{100 * (got - ref) / ref:+.2f}" if ref else ""
            print(f"{variant:<8}{mode:<10}{got:>12.2f}{ref or '':>12}{dev:>8}")


if __name__ == "__main__":
    main()
