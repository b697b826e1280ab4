"""Command-line entry point: ``reidtl <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from reidtl.adapt.cotrain import co_train, select_lambda, self_train
from reidtl.adapt.dictionary import write_diagnostics
from reidtl.config import ConfigError, ExperimentConfig, load_config
from reidtl.data import (
    DataError,
    Dataset,
    generate_synthetic,
    load_manifest,
    make_probe_gallery,
    split_identities,
    write_manifest,
)
from reidtl.evaluation import EvaluationError, evaluate_features, extract_features, write_features
from reidtl.model import CheckpointError, ShapeError, build_model, load_checkpoint, save_checkpoint
from reidtl.train import FreezePlan, augment_dataset, fit, label_map_for, staged_transfer, write_loss_log

log = logging.getLogger("reidtl")


class CommandError(RuntimeError):
    pass


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "config.yaml").write_text(cfg.to_yaml())


def _load_split(path, split: str) -> Dataset:
    ds = load_manifest(path)
    if not split:
        return ds
    sub = ds.subset(split=split)
    if len(sub) == 0:
        raise CommandError(f"{path}: no rows with split {split!r}")
    return sub


def _manifests(cfg: ExperimentConfig) -> list[str]:
    if not cfg.data.manifests:
        raise CommandError("[data] data.manifests is empty; list at least one manifest")
    return cfg.data.manifests


def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = Path(cfg.output_dir)
    manifest = out / "manifest.csv"
    if manifest.exists() and not force:
        raise CommandError(f"{manifest} already exists; pass --force to overwrite")
    if force and (out / "images").is_dir():
        shutil.rmtree(out / "images")
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.synth
    ds = generate_synthetic(cfg.synthetic_spec())
    split_of = {pid: "train" for pid in ds.person_ids}
    rest = ds
    seed = cfg.module_seed("synth")
    for name, count in (("test", s.num_test_identities), ("val", s.num_val_identities)):
        if count:
            if count >= rest.num_identities:
                raise CommandError(f"[synth] {name} identities ({count}) leave no training identities")
            rest, held = split_identities(rest, count, seed)
            split_of.update({pid: name for pid in held.person_ids})
    recs = [dataclasses.replace(r, split=split_of[r.person_id]) for r in ds.records]
    write_manifest(Dataset(recs, ds.name, ds.image_size), manifest, image_format=s.image_format)
    _write_resolved_config(cfg, out)
    return manifest


def _new_model(cfg: ExperimentConfig, num_classes: int, image_size) -> torch.nn.Module:
    m = cfg.model
    if m.backbone == "toy":
        kwargs = {"image_size": tuple(image_size), "out_dim": m.out_dim}
    elif m.backbone == "googlenet":
        kwargs = {"pretrained": m.pretrained}
    else:
        raise CommandError(f"[model] unknown backbone {m.backbone!r}")
    return build_model(m.backbone, num_classes, cfg.loss_config(), keep_prob=m.keep_prob,
                       verif_hidden=m.verif_hidden, seed=cfg.module_seed("train"), backbone_kwargs=kwargs)


def cmd_train(cfg: ExperimentConfig, resume: str | None = None) -> Path:
    out = _out_dir(cfg)
    paths = _manifests(cfg)
    stages = [_load_split(p, cfg.data.split) for p in paths]
    tcfg = cfg.train_config()
    history = []
    if resume:
        model, meta = load_checkpoint(resume)
        target = stages[-1]
        if model.num_classes != target.num_identities:
            raise CommandError(f"{resume}: head has {model.num_classes} classes but {paths[-1]} "
                               f"has {target.num_identities} identities")
        start = int(meta.get("iteration", 0))
        runs = int(meta.get("resumes", 0)) + 1
        train_ds = augment_dataset(target, tcfg.augmentations_per_image, seed=tcfg.seed + 31 * runs,
                                   bounds=tcfg.bounds)
        end = fit(model, train_ds, tcfg, FreezePlan.all_trainable(), tcfg.step2_iters, start,
                  seed_offset=1000 + runs, history=history, label_map=label_map_for(target))
        meta = {**meta, "iteration": end, "resumes": runs}
    else:
        first = stages[0]
        model = _new_model(cfg, first.num_identities, first.image_size)
        staged_transfer([(ds, tcfg) for ds in stages], model, history, two_stepped=cfg.train.two_stepped)
        end = len(stages) * (tcfg.step1_iters + tcfg.step2_iters)
        meta = {"iteration": end, "resumes": 0, "stages": [str(p) for p in paths]}
    ckpt = save_checkpoint(model, out / "checkpoint.pt", meta)
    write_loss_log(history, out / "loss.csv")
    _write_resolved_config(cfg, out)
    return ckpt


def cmd_adapt(cfg: ExperimentConfig, checkpoint: str) -> Path:
    out = _out_dir(cfg)
    model, meta = load_checkpoint(checkpoint)
    target_path = _manifests(cfg)[-1]
    full = load_manifest(target_path)
    target = _load_split(target_path, cfg.data.split)
    truth = {r.image_id: r.person_id for r in target.records} if target.labelled else None
    target = target.unlabelled()
    a = cfg.adapt
    tcfg = cfg.train_config()
    seed = cfg.module_seed("adapt")
    lam = a.lambda_
    if a.lambda_candidates and a.method == "co_train":
        if cfg.data.validation != "hyperparameters":
            raise CommandError("[adapt] adapt.lambda_candidates needs data.validation=hyperparameters")
        val = full.subset(split="val")
        pool = val.unlabelled() if len(val) else target
        lam = select_lambda(model, pool, a.lambda_candidates, seed, a.k_atoms, a.knn_k, tcfg, a.anchor_camera)
        log.info("selected lambda %g", lam)
    history = []
    if a.method == "co_train":
        co_train(model, target, a.rounds, lam, a.k_atoms, a.knn_k, tcfg, a.anchor_camera, seed, history,
                 a.solver_iters)
    else:
        self_train(model, target, a.rounds, tcfg, a.anchor_camera, history)
    rows = []
    for rec in history:
        if rec.dict_model is not None:
            write_diagnostics(rec.dict_model, out / f"solver_round{rec.round}.csv")
        purity = None
        if truth is not None:
            lab = rec.labeling
            matches = lab.matches()
            if matches:
                purity = float(np.mean([truth[k] == truth[lab.anchor_ids[v]] for k, v in matches.items()]))
        rows.append({"round": rec.round, "num_classes": rec.labeling.num_classes,
                     "agreement": rec.agreement, "label_purity": purity})
    (out / "label_agreement.json").write_text(json.dumps({"lambda": lam, "rounds": rows}, indent=2) + "\n")
    ckpt = save_checkpoint(model, out / "adapted.pt",
                           {**meta, "adapted_from": str(checkpoint), "adapt_method": a.method, "lambda": lam})
    _write_resolved_config(cfg, out)
    return ckpt


def _plot_cmc(cmc, path: Path, protocol: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ranks = np.arange(1, len(cmc) + 1)
    ax.plot(ranks, 100 * np.asarray(cmc), marker=".")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_title(f"CMC ({protocol})")
    ax.set_ylim(0, 101)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, manifest: str | None = None) -> Path:
    out = _out_dir(cfg)
    model, _ = load_checkpoint(checkpoint)
    path = manifest or _manifests(cfg)[-1]
    ds = _load_split(path, cfg.eval.split)
    shape = getattr(model.backbone, "input_shape", None)
    if shape is not None and ds.image_size is not None:
        h, w, c = ds.image_size
        if (c, h, w) != tuple(shape):
            raise CommandError(f"{path}: images are {h}x{w}x{c} but {checkpoint} expects "
                               f"{shape[1]}x{shape[2]}x{shape[0]}")
    probe, gallery = make_probe_gallery(ds, cfg.eval.protocol, cfg.module_seed("eval"))
    pf = extract_features(model, probe, cfg.eval.batch_size)
    gf = extract_features(model, gallery, cfg.eval.batch_size)
    report = evaluate_features(pf.features, probe, gf.features, gallery, cfg.eval.protocol)
    write_features(pf, out / "probe_features.f32")
    write_features(gf, out / "gallery_features.f32")
    if cfg.eval.plot:
        _plot_cmc(report.cmc, out / "cmc.png", report.protocol)
    _write_resolved_config(cfg, out)
    return report.write_json(out / "report.json")


def _to_gray(resp: np.ndarray) -> np.ndarray:
    peak = float(np.abs(resp).max())
    scaled = resp / peak if peak > 0 else resp
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


def cmd_dump_responses(cfg: ExperimentConfig, layer: str, checkpoint: str | None = None,
                       manifest: str | None = None, image_ids=()) -> list[Path]:
    """One grayscale PNG per (image, channel) of ``layer``; maps scaled by each image's peak response."""
    from PIL import Image

    out = _out_dir(cfg) / "responses"
    out.mkdir(parents=True, exist_ok=True)
    path = manifest or _manifests(cfg)[-1]
    ds = load_manifest(path)
    if image_ids:
        wanted = set(image_ids)
        missing = wanted - {r.image_id for r in ds.records}
        if missing:
            raise CommandError(f"{path}: unknown image ids {sorted(missing)}")
        records = [r for r in ds.records if r.image_id in wanted]
    else:
        records = ds.records
    if checkpoint:
        model, _ = load_checkpoint(checkpoint)
    else:
        model = _new_model(cfg, max(ds.num_identities, 1), ds.image_size)
    bb = model.backbone
    if layer not in bb.layer_names():
        raise CommandError(f"unknown layer {layer!r}; available: {', '.join(bb.layer_names())}")
    dtype = next(model.parameters()).dtype
    model.eval()
    written = []
    for rec in records:
        x = torch.from_numpy(np.ascontiguousarray(rec.pixels.transpose(2, 0, 1)[None])).to(dtype)
        resp = bb.responses(layer, x)[0].double().numpy()
        gray = _to_gray(resp)
        for ch in range(gray.shape[0]):
            p = out / f"{rec.image_id}_{layer}_c{ch:03d}.png"
            Image.fromarray(gray[ch]).save(p, format="PNG")
            written.append(p)
    return written


def cmd_bench_sir_cir(cfg: ExperimentConfig, checkpoint: str | None = None, probes: int = 20,
                      gallery: int = 200, repeats: int = 3) -> Path:
    """Wall-clock of single-image-representation ranking vs cross-image pair scoring."""
    out = _out_dir(cfg)
    if checkpoint:
        model, _ = load_checkpoint(checkpoint)
    else:
        model = _new_model(cfg, 2, cfg.synth.image_size)
    shape = model.backbone.input_shape or (3, 224, 224)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    xp = torch.rand((probes, *shape), generator=gen, dtype=dtype)
    xg = torch.rand((gallery, *shape), generator=gen, dtype=dtype)
    model.eval()

    def sir():
        with torch.no_grad():
            fp, fg = model.embed(xp), model.embed(xg)
            torch.cdist(fp, fg).argsort(dim=1)

    def cir():
        # every probe-gallery pair goes through the network and the verification subnet
        ver = model.verifiers[0]
        with torch.no_grad():
            for i in range(probes):
                yp = model.embed(xp[i:i + 1])
                yg = model.embed(xg)
                torch.softmax(ver(yp.expand_as(yg), yg), dim=1)[:, 1].argsort(descending=True)

    timings = {}
    for name, fn in (("sir", sir), ("cir", cir)):
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    result = {"probes": probes, "gallery": gallery, "sir_seconds": timings["sir"],
              "cir_seconds": timings["cir"], "speedup": timings["cir"] / max(timings["sir"], 1e-12)}
    path = out / "bench_sir_cir.json"
    path.write_text(json.dumps(result, indent=2) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidtl", description="Person re-identification transfer learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON config with flat dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        return p

    common(sub.add_parser("synth", help="write a synthetic dataset")).add_argument("--force", action="store_true")
    common(sub.add_parser("train", help="staged transfer training")).add_argument("--resume")
    p = common(sub.add_parser("adapt", help="unsupervised transfer to an unlabelled target"))
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("eval", help="rank a probe/gallery split and report CMC and mAP"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p = common(sub.add_parser("dump-responses", help="write per-channel response maps of a layer"))
    p.add_argument("--layer", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--images", nargs="*", default=[])
    p = common(sub.add_parser("bench-sir-cir", help="time SIR ranking against CIR pair scoring"))
    p.add_argument("--checkpoint")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--gallery", type=int, default=200)
    p.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        overrides = list(args.set) + ([f"output_dir={args.out}"] if args.out else [])
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            result = cmd_synth(cfg, args.force)
        elif args.command == "train":
            result = cmd_train(cfg, args.resume)
        elif args.command == "adapt":
            result = cmd_adapt(cfg, args.checkpoint)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint, args.manifest)
        elif args.command == "dump-responses":
            result = f"{len(cmd_dump_responses(cfg, args.layer, args.checkpoint, args.manifest, args.images))} files"
        else:
            result = cmd_bench_sir_cir(cfg, args.checkpoint, args.probes, args.gallery, args.repeats)
    except (ConfigError, CommandError, DataError, CheckpointError, ShapeError, EvaluationError) as exc:
        print(f"reidtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"reidtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
