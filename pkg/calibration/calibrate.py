"""Run the desk training experiments behind the acceptance thresholds and append one JSON
line per run to a record file.

    python3 calibration/calibrate.py desk --seeds 0 1 2 --out calibration/desk_runs.jsonl
    python3 calibration/calibrate.py localized --seeds 0 1 2 --grid --out calibration/localized_runs.jsonl

Each run trains on a freshly generated corpus (seed 0) with ``desk_train_config`` plus any
``--set key=value`` overrides.
"""

import argparse
import json
import tempfile
from pathlib import Path

from ksvqe.trainer import desk_train_config, train
from ksvqe.worksim import CorpusConfig, generate_corpus

ABLATION_ROWS = {
    "baseline": {"qrs": False, "cam": False, "dam": False},
    "+QRS": {"qrs": True, "cam": False, "dam": False},
    "+CaM": {"qrs": False, "cam": True, "dam": False},
    "+DaM": {"qrs": False, "cam": False, "dam": True},
    "all": {"qrs": True, "cam": True, "dam": True},
}


def parse_overrides(items):
    out = {}
    for item in items or []:
        key, _, value = item.partition("=")
        out[key] = json.loads(value)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("corpus", choices=("desk", "localized"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--grid", action="store_true", help="run the five ablation rows per seed")
    ap.add_argument("--set", action="append", help="train config override, key=json")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    overrides = parse_overrides(args.set)
    rows = ABLATION_ROWS if args.grid else {"all": ABLATION_ROWS["all"]}
    with tempfile.TemporaryDirectory() as tmp:
        corpus = Path(tmp) / "corpus"
        generate_corpus(CorpusConfig(localized=args.corpus == "localized"), corpus)
        with open(args.out, "a") as fh:
            for seed in args.seeds:
                for name, toggles in rows.items():
                    cfg = desk_train_config(seed=seed, **toggles, **overrides)
                    res = train(cfg, corpus, log_every_epoch=False)
                    rec = {
                        "corpus": args.corpus,
                        "row": name,
                        "seed": seed,
                        "overrides": overrides,
                        "epoch_srocc": [round(h["test_srocc"], 4) for h in res.history],
                        "srocc": res.final["srocc"],
                        "plcc": res.final["plcc"],
                        "wall_time": round(res.wall_time, 1),
                    }
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                    print(json.dumps(rec, sort_keys=True))


if __name__ == "__main__":
    main()
