"""Generate a directory of synthetic PE files for pipeline experiments.

The files are structurally valid but contain no real code, so they are
safe to mutate, score, and ship around freely.
"""

import argparse

from advforge.synth import write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", help="directory to write pe_NNNN.exe files into")
    ap.add_argument("--count", type=int, default=60, help="number of files")
    ap.add_argument("--seed", type=int, default=7, help="corpus RNG seed")
    args = ap.parse_args()

    paths = write_corpus(args.out_dir, args.count, seed=args.seed)
    total = sum(p.stat().st_size for p in paths)
    print(f"wrote {len(paths)} files ({total / 1024:.1f} KiB) to {args.out_dir}")


if __name__ == "__main__":
    main()
