"""Run the whole experiment once: dataset, codebook, NAR and AR models, sample grids.

    python scripts/run_pipeline.py --out runs/main
    python scripts/run_pipeline.py --out runs/small --n-images 512 --epochs 4
"""

import argparse

from ctrlsynth.pipeline import PipelineConfig, run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-images", type=int, default=4096)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--ar-epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    cfg = PipelineConfig(n_images=args.n_images, epochs=args.epochs, ar_epochs=args.ar_epochs, seed=args.seed)
    result = run_pipeline(cfg, args.out, progress=print)
    print(f"NAR training {result.train_seconds / 60:.1f} min, AR training {result.ar_seconds / 60:.1f} min")
    print(f"artifacts in {result.out_dir}")


if __name__ == "__main__":
    main()
