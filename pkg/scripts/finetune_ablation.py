"""One-stepped vs two-stepped fine-tuning of a source-trained model on a small labelled target."""

from dataclasses import replace

from _common import parser, run
from reidtl.experiments import TransferBench, finetune_ablation

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--source-ids", type=int, default=TransferBench.source_ids)
    p.add_argument("--target-ids", type=int, default=TransferBench.target_train_ids)
    args = p.parse_args()
    bench = replace(TransferBench(), source_ids=args.source_ids, target_train_ids=args.target_ids)
    run("finetune", finetune_ablation, args.seeds, args.out, b=bench)
