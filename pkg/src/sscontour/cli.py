"""Command-line driver: weak detector, dictionary, forest, detection, evaluation.

Every stage reads and writes a run directory::

    gamma.model  dict.bin  forest.model  maps/<name>.png  maps/thin/<name>.png
    eval.json  pr_curve.csv  bench.csv

Training stages read ``<data>/train`` and detection / evaluation read
``<data>/test``; both are corpora with ``images/`` and ``groundTruth/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, PipelineConfig, load_config
from .detect import detect, nms_thin
from .errors import FormatError
from .evaluation import evaluate, write_eval_json, write_pr_csv
from .features import RAW_IMAGE
from .forest.model import load_forest, save_forest
from .forest.train import train_forest, train_weak_detector, weak_detector_maps
from .io import load_corpus, read_soft_map, resolve_data_path, write_soft_map
from .pipeline import dictionary_patches, learn_token_dictionary, split_corpus
from .sparse import fast_sparse_code_batch, load_dictionary, omp_sparse_code_batch, reconstruct_batch, save_dictionary

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_FORMAT = 6

GAMMA_FILE = "gamma.model"
DICT_FILE = "dict.bin"
FOREST_FILE = "forest.model"


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found (run the stage that produces it first)")
    return path


def training_split(cfg: PipelineConfig, data):
    """(labeled [(name, image, masks)], unlabeled [(name, image)]) from ``<data>/train``."""
    items = load_corpus(resolve_data_path(data) / "train")
    by_name = {it.name: it for it in items}
    if cfg.labeled_images:
        missing = [n for n in cfg.labeled_images + cfg.unlabeled_images if n not in by_name]
        if missing:
            raise FileNotFoundError(f"images not in the training corpus: {', '.join(missing)}")
        lab = [by_name[n] for n in cfg.labeled_images]
        rest = cfg.unlabeled_images or [n for n in by_name if n not in cfg.labeled_images]
        unl = [by_name[n] for n in rest]
    else:
        lab, unl = split_corpus(items, cfg.n_labeled, cfg.seed)
    for it in lab:
        if not it.truth_paths:
            raise ValueError(f"labeled image {it.name} has no ground truth")
    labeled = [(it.name, it.image(), it.truth()) for it in lab]
    unlabeled = [(it.name, it.image()) for it in unl]
    return labeled, unlabeled


def run_train_weak(cfg: PipelineConfig, data, run: Path, threads: int = 1) -> None:
    labeled, _ = training_split(cfg, data)
    gamma = train_weak_detector([(img, gt) for _, img, gt in labeled], cfg.forest_config(threads))
    save_forest(run / GAMMA_FILE, gamma)


def _weak_maps(cfg, gamma, labeled, unlabeled):
    wl = weak_detector_maps([img for _, img, _ in labeled], gamma, cfg.stride)
    wu = weak_detector_maps([img for _, img in unlabeled], gamma, cfg.stride)
    return wl, wu


def run_learn_dict(cfg: PipelineConfig, data, run: Path, threads: int = 1) -> None:
    gamma = load_forest(_require(run / GAMMA_FILE))
    labeled, unlabeled = training_split(cfg, data)
    wl, wu = _weak_maps(cfg, gamma, labeled, unlabeled)
    fg, bg = dictionary_patches([(img, gt) for _, img, gt in labeled], [img for _, img in unlabeled],
                                wl, wu, cfg.forest_config(threads), cfg.dict_tokens_per_class, cfg.seed)
    dictionary = learn_token_dictionary(fg, bg, cfg.atoms_per_class, cfg.k_train, cfg.k,
                                        cfg.dict_iterations, cfg.incoherence_weight, cfg.seed)
    save_dictionary(run / DICT_FILE, dictionary)


def run_train(cfg: PipelineConfig, data, run: Path, threads: int = 1, supervised: bool = False) -> None:
    gamma = load_forest(_require(run / GAMMA_FILE))
    labeled, unlabeled = training_split(cfg, data)
    if supervised:
        unlabeled = []
    dictionary = load_dictionary(_require(run / DICT_FILE)) if unlabeled else None
    wl, wu = _weak_maps(cfg, gamma, labeled, unlabeled)
    forest = train_forest([(img, gt) for _, img, gt in labeled], [img for _, img in unlabeled],
                          cfg.forest_config(threads), dictionary, gamma, wl, wu)
    save_forest(run / FOREST_FILE, forest)


def run_detect(cfg: PipelineConfig, data, run: Path, out=sys.stdout) -> None:
    forest = load_forest(_require(run / FOREST_FILE))
    gamma = None
    if forest.feature_config.gradient_source != RAW_IMAGE:
        gamma = load_forest(_require(run / GAMMA_FILE))
    thin_dir = run / "maps" / "thin"
    thin_dir.mkdir(parents=True, exist_ok=True)
    for it in load_corpus(resolve_data_path(data) / "test"):
        start = time.perf_counter()
        soft = detect(it.image(), forest, gamma, cfg.detect_scales, cfg.stride)
        elapsed = time.perf_counter() - start
        write_soft_map(run / "maps" / f"{it.name}.png", soft)
        write_soft_map(thin_dir / f"{it.name}.png", nms_thin(soft))
        print(f"{it.name}: {elapsed:.3f} s", file=out)


def run_eval(cfg: PipelineConfig, data, run: Path):
    maps, truths = [], []
    for it in load_corpus(resolve_data_path(data) / "test"):
        if not it.truth_paths:
            continue
        maps.append(read_soft_map(_require(run / "maps" / "thin" / f"{it.name}.png")))
        truths.append(it.truth())
    if not maps:
        raise ValueError("no annotated test images to evaluate")
    thresholds = np.linspace(0.01, 0.99, cfg.n_thresholds) if cfg.n_thresholds > 1 else np.array([0.5])
    summary = evaluate(maps, truths, thresholds, cfg.tolerance)
    write_eval_json(run / "eval.json", summary)
    write_pr_csv(run / "pr_curve.csv", summary)
    return summary


def run_bench(d: int, V: int, K: int, ns, lam: float, seed: int, path: Path, out=sys.stdout) -> None:
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, V))
    M /= np.linalg.norm(M, axis=0)
    rows = []
    for n in ns:
        X = rng.standard_normal((n, d))
        for solver, fn in (("fast", lambda: fast_sparse_code_batch(X, M, K, lam)),
                           ("omp", lambda: omp_sparse_code_batch(X, M, K))):
            start = time.perf_counter()
            idx, val = fn()
            seconds = time.perf_counter() - start
            resid = np.linalg.norm(X - reconstruct_batch(M, idx, val), axis=1).mean()
            rows.append([solver, n, d, V, K, f"{seconds:.6f}", f"{resid:.10g}"])
            print(f"{solver} n={n}: {seconds:.3f} s, mean residual {resid:.4g}", file=out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["solver", "n_targets", "d", "V", "K", "seconds", "mean_residual"])
        w.writerows(rows)


def run_pipeline(cfg: PipelineConfig, data, run: Path, threads: int = 1, repeats: int = 1, out=sys.stdout):
    results = []
    for r in range(repeats):
        rcfg = cfg if repeats == 1 else cfg.with_overrides([f"seed={cfg.seed + r}"])
        rdir = run if repeats == 1 else run / f"repeat_{r}"
        rdir.mkdir(parents=True, exist_ok=True)
        run_train_weak(rcfg, data, rdir, threads)
        run_learn_dict(rcfg, data, rdir, threads)
        run_train(rcfg, data, rdir, threads)
        run_detect(rcfg, data, rdir, out)
        s = run_eval(rcfg, data, rdir)
        print(f"seed {rcfg.seed}: ODS {s.ods_f:.4f} OIS {s.ois_f:.4f} AP {s.ap:.4f}", file=out)
        results.append({"seed": rcfg.seed, "ods": s.ods_f, "ois": s.ois_f, "ap": s.ap})
    if repeats > 1:
        mean = {k: float(np.mean([x[k] for x in results])) for k in ("ods", "ois", "ap")}
        doc = {**mean, "repeats": results}
        (run / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"mean: ODS {mean['ods']:.4f} OIS {mean['ois']:.4f} AP {mean['ap']:.4f}", file=out)
    return results


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; 1 is the fully deterministic reference mode")
    common.add_argument("--run-dir", default="run", help="directory for models, maps and reports")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True,
                      help="corpus root with train/ and test/ (relative paths use $SSCONTOUR_DATA)")

    ap = argparse.ArgumentParser(prog="sscontour", description="Semi-supervised contour detection.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train-weak", parents=[common, data], help="train the supervised weak detector")
    sub.add_parser("learn-dict", parents=[common, data], help="learn the token dictionary")
    p = sub.add_parser("train", parents=[common, data], help="train the semi-supervised forest")
    p.add_argument("--supervised", action="store_true", help="ignore unlabeled images")
    sub.add_parser("detect", parents=[common, data], help="write soft and thinned maps for test images")
    sub.add_parser("eval", parents=[common, data], help="benchmark thinned maps against ground truth")
    p = sub.add_parser("bench-sparse", parents=[common], help="time fast coding against OMP")
    p.add_argument("--d", type=int, default=576)
    p.add_argument("--V", type=int, default=512)
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--n", type=_int_list, default=[1000, 10000])
    p.add_argument("--out", help="CSV path (default <run-dir>/bench.csv)")
    p = sub.add_parser("pipeline", parents=[common, data], help="run every stage in order")
    p.add_argument("--labeled", type=int, help="number of labeled training images")
    p.add_argument("--repeats", type=int, default=1, help="repeat with seeds seed..seed+R-1 and average")
    return ap


def _config(args) -> PipelineConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "labeled", None) is not None:
        overrides.append(f"n_labeled={args.labeled}")
    return load_config(args.config, overrides)


def _dispatch(args) -> None:
    cfg = _config(args)
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    threads = max(1, args.threads)
    cmd = args.command
    if cmd == "train-weak":
        run_train_weak(cfg, args.data, run, threads)
    elif cmd == "learn-dict":
        run_learn_dict(cfg, args.data, run, threads)
    elif cmd == "train":
        run_train(cfg, args.data, run, threads, args.supervised)
    elif cmd == "detect":
        run_detect(cfg, args.data, run)
    elif cmd == "eval":
        s = run_eval(cfg, args.data, run)
        print(f"ODS {s.ods_f:.4f} OIS {s.ois_f:.4f} AP {s.ap:.4f}")
    elif cmd == "bench-sparse":
        out = Path(args.out) if args.out else run / "bench.csv"
        run_bench(args.d, args.V, args.K, args.n, cfg.lam, cfg.seed, out)
    elif cmd == "pipeline":
        if args.repeats < 1:
            raise ConfigError("--repeats must be >= 1")
        run_pipeline(cfg, args.data, run, threads, args.repeats)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            _dispatch(args)
    except ConfigError as exc:
        print(f"sscontour: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"sscontour: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"sscontour: bad artifact: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"sscontour: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
