"""Autoencoder feature adaptation next to the source-only model on the co-training benchmark."""

from _common import parser, run
from reidtl.adapt import AEConfig, autoencoder_baseline
from reidtl.evaluation import evaluate
from reidtl.experiments import CoTrainBench, source_model, target_split


def autoencoder_row(seed: int, b: CoTrainBench) -> dict[str, float]:
    model, src = source_model(seed, b)
    train, probe, gallery = target_split(seed, b, b.target_train_ids)
    adapted = autoencoder_baseline(model, train.unlabelled(), src, AEConfig(seed=seed))
    return {"source_only": evaluate(model, probe, gallery).rank1,
            "autoencoder": evaluate(adapted, probe, gallery).rank1}


if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("autoencoder", autoencoder_row, args.seeds, args.out, b=CoTrainBench())
