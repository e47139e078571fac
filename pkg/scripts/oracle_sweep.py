"""Measure how often the compliance oracle survives patch quantization.

Fits a K-code patch codebook on one set of renders, then checks the oracle on
quantized renders of every attribute spec under fresh seeds.

    python scripts/oracle_sweep.py --k 64 --seeds 4
"""

import argparse
from collections import Counter

import numpy as np

from ctrlsynth import data, vq


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--k", type=int, default=64)
    ap.add_argument("--fit-images", type=int, default=1024)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    fit = data.make_records(args.fit_images, args.seed)
    patches = np.concatenate([vq.image_to_patches(r.image, 4, 4) for r in fit])
    pick = np.random.default_rng(0).choice(len(patches), min(30000, len(patches)), replace=False)
    cb = vq.fit_codebook(patches[pick], args.k, 50, seed=args.seed)

    misses = Counter()
    total = ok = 0
    psnr = []
    for spec in data.all_specs():
        for s in range(args.seeds):
            image = data.render(spec, 10_000 + s)
            rec = vq.decode_tokens(vq.encode_image(image, cb), cb)
            psnr.append(vq.reconstruction_psnr(image, rec))
            got = data.recover_spec(rec)
            total += 1
            if got == spec:
                ok += 1
            else:
                misses[(spec.shape, spec.position, got.shape if got else None)] += 1
    print(f"pristine-then-quantized compliance {ok / total:.4f} over {total} images")
    print(f"mean reconstruction PSNR {np.mean(psnr):.2f} dB")
    for key, n in misses.most_common(10):
        print(f"  {key}: {n}")


if __name__ == "__main__":
    main()
