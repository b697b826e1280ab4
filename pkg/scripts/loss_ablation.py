"""Rank-1 of identification-only, verification-only and combined training on the synthetic benchmark."""

from dataclasses import replace

from _common import parser, run
from reidtl.experiments import BenchConfig, loss_ablation

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--iters", type=int, default=BenchConfig.iters)
    p.add_argument("--noise", type=float, default=BenchConfig.noise)
    args = p.parse_args()
    cfg = replace(BenchConfig(), iters=args.iters, noise=args.noise)
    run("loss", loss_ablation, args.seeds, args.out, cfg=cfg)
