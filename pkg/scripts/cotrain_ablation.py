"""Source-only, subspace-only, self-training and co-training on an unlabelled two-camera target."""

from dataclasses import replace

from _common import parser, run
from reidtl.experiments import CoTrainBench, cotrain_ablation

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--rounds", type=int, default=CoTrainBench.rounds)
    p.add_argument("--lam", type=float, default=CoTrainBench.lam)
    p.add_argument("--noise", type=float, default=CoTrainBench.noise)
    args = p.parse_args()
    bench = replace(CoTrainBench(), rounds=args.rounds, lam=args.lam, noise=args.noise)
    run("cotrain", cotrain_ablation, args.seeds, args.out, b=bench)
