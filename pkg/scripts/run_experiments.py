"""Run the desk-scale comparison suite on the synthetic city pair.

    python3 scripts/run_experiments.py --out runs/desk --seeds 0,1,2,3,4

Writes one JSON file per experiment plus a combined summary.json.
"""
import argparse
import json
import time
from pathlib import Path

from metatraffic import experiments as ex
from metatraffic.config import desk_config, load_config
from metatraffic.data import synth_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--config", default=None, help="JSON config (defaults to the desk preset)")
    ap.add_argument("--only", default="transfer,ablation,memory,tasks")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = load_config(args.config) if args.config else desk_config()
    pair = synth_pair()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = {
        "transfer": lambda: ex.run_transfer_vs_scratch(pair, cfg, seeds),
        "ablation": lambda: ex.run_ablation(pair, cfg, seeds),
        "memory": lambda: ex.sweep_memory(pair, cfg, [2, 8, 32, 64], seeds),
        "tasks": lambda: ex.sweep_tasks(pair, cfg, [1, 2, 3], seeds),
    }
    summary = {"config_hash": cfg.digest(), "split_hash": ex.split_hash(pair, cfg), "seeds": seeds}
    for name in args.only.split(","):
        t0 = time.perf_counter()
        result = jobs[name]()
        summary[name] = result
        (out / f"{name}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        print(f"{name}: done in {time.perf_counter() - t0:.0f}s", flush=True)
        print(json.dumps(result, indent=2, sort_keys=True), flush=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
