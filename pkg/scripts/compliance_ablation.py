"""Text-only compliance for several decoders on one trained model, with paired tests.

Expects a directory written by run_pipeline.py.

    python scripts/compliance_ablation.py runs/main --prompts 256
"""

import argparse
from pathlib import Path

import torch

from ctrlsynth import bench, vq
from ctrlsynth.codec import Vocabulary
from ctrlsynth.decode import PnagConfig
from ctrlsynth.model import load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--prompts", type=int, default=256)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--temperature", type=float, default=1.0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    run = Path(args.run_dir)
    cb = vq.Codebook.load(run / "codebook.ufcv")
    vocab = Vocabulary.load(run / "vocab.txt", cb.K)
    model = load_checkpoint(run / "nar" / "final.ufcb", torch.float32).eval()

    fns = {f"pnag_b{b}": bench.pnag_fn(model, vocab, PnagConfig(B=b, temperature=args.temperature))
           for b in (1, 5, 10)}
    fns["pnag_b1_greedy"] = bench.pnag_fn(model, vocab, PnagConfig(B=1, greedy=True))
    fns["mnag"] = bench.mnag_fn(model, vocab, T=10)
    rates = {}
    for name, fn in fns.items():
        rates[name] = r = bench.compliance_suite(fn, vocab, cb, args.prompts, seed=args.seed)
        print(f"{name:16s} {r.rate:.3f}  [{r.low:.3f}, {r.high:.3f}]")
    for other in ("pnag_b1", "mnag"):
        cmp = bench.paired_comparison(rates["pnag_b5"], rates[other])
        print(f"pnag_b5 vs {other}: wins {cmp.wins} losses {cmp.losses} p={cmp.p_value:.4f}")


if __name__ == "__main__":
    main()
