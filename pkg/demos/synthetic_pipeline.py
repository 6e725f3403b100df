"""Generate a synthetic corpus, then train and evaluate semi-supervised and supervised forests.

    python3 demos/synthetic_pipeline.py OUT_DIR [--seed S]
"""

import argparse
import json
from pathlib import Path

from sscontour import cli
from sscontour.synthetic import write_split_corpus

HERE = Path(__file__).resolve().parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    if not (data / "train").exists():
        write_split_corpus(data, 43, 17, (96, 96), seed=2024)
    common = ["--data", str(data), "--config", str(HERE / "small.cfg"), "--seed", str(args.seed), "--threads", "1"]

    semi = out / "semi"
    if cli.main(["pipeline", *common, "--run-dir", str(semi)]) != 0:
        raise SystemExit("pipeline failed")

    # supervised baseline reuses the weak detector, then trains without unlabeled images
    sup = out / "supervised"
    sup.mkdir(parents=True, exist_ok=True)
    (sup / cli.GAMMA_FILE).write_bytes((semi / cli.GAMMA_FILE).read_bytes())
    for argv in (["train", "--supervised"], ["detect"], ["eval"]):
        if cli.main([*argv, *common, "--run-dir", str(sup)]) != 0:
            raise SystemExit(f"{argv[0]} failed")

    for name, run in (("semi-supervised", semi), ("supervised", sup)):
        doc = json.loads((run / "eval.json").read_text())
        print(f"{name:16s} ODS {doc['ods']:.4f}  OIS {doc['ois']:.4f}  AP {doc['ap']:.4f}")


if __name__ == "__main__":
    main()
