import argparse
import json
import logging
import time
from pathlib import Path

import torch

from reidtl.experiments import summarise


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    p.add_argument("--out", type=Path, default=None, help="write per-seed rows and the average as JSON")
    return p


def run(name: str, runner, seeds, out: Path | None, **kwargs) -> dict:
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = []
    for seed in seeds:
        t = time.perf_counter()
        rows.append(runner(seed, **kwargs))
        print(f"{name} seed {seed}: {fmt(rows[-1])}  ({time.perf_counter() - t:.0f}s)", flush=True)
    avg = summarise(rows)
    print(f"{name} average over {len(rows)} seeds: {fmt(avg)}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"seeds": list(seeds), "rows": rows, "average": avg}, indent=2))
    return avg


def fmt(row: dict) -> str:
    return " ".join(f"{k}={v:.3f}" for k, v in row.items())
