"""Command-line entry point for every experiment and the labeling service.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure. All options can also come from a flat key=value config file with one
section per subcommand; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import signal
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import synthetic, training
from .dataset_io import (GalleryEntry, dump_gallery, load_dataset_files,
                         load_gallery, write_idx_images, write_idx_labels)
from .digits import make_dataset
from .errors import InvattackError
from .rng import rng_stream
from .service import AnnotationStore, serve
from .transforms import TransformGrid, default_grid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

_STREAM_SOURCES = 41


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _load_config(path: str | None, section: str) -> dict:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def _setting(args, cfg: dict, key: str, default, cast=str):
    """Explicit flag > config file > default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in cfg:
        raw = cfg[key]
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _parse_range(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected start,stop,step, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _grid_from_config(cfg: dict) -> TransformGrid:
    base = default_grid()
    kwargs = {}
    for field, key in (("rotation", "grid_rotation"), ("shift_x", "grid_shift_x"),
                       ("shift_y", "grid_shift_y"), ("shear", "grid_shear"),
                       ("scale", "grid_scale")):
        kwargs[field] = (_parse_range(cfg[key]) if key in cfg
                         else getattr(base, field))
    return TransformGrid(**kwargs)


def _load_pair(args, what: str):
    images = getattr(args, f"{what}_images")
    labels = getattr(args, f"{what}_labels")
    if not images or not labels:
        raise InvattackError(f"--{what}-images and --{what}-labels are required")
    return load_dataset_files(images, labels)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ---

def cmd_make_dataset(args) -> int:
    out = _out_dir(args)
    for split, count, seed in (("train", args.train, args.seed),
                               ("test", args.test, args.seed + 1)):
        if count <= 0:
            continue
        ds = make_dataset(count, seed=seed)
        (out / f"{split}-images.idx").write_bytes(
            write_idx_images([ex.image for ex in ds.examples]))
        (out / f"{split}-labels.idx").write_bytes(
            write_idx_labels([ex.label for ex in ds.examples]))
        print(f"wrote {split}: {count} examples under {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg_file = _load_config(args.config, "attack")
    norm = _setting(args, cfg_file, "norm", attack_mod.NORM_L0)
    epsilon = _setting(args, cfg_file, "epsilon",
                       25.0 if norm == attack_mod.NORM_L0 else 0.3, float)
    count = _setting(args, cfg_file, "count", 100, int)
    seed = _setting(args, cfg_file, "seed", 0, int)
    donor_pool = _setting(args, cfg_file, "donor_pool", 24, int)
    threads = _setting(args, cfg_file, "threads", 1, int)
    out = _out_dir(args)

    train = _load_pair(args, "train")
    test = _load_pair(args, "test")
    acfg = attack_mod.AttackConfig(
        norm=norm, epsilon=epsilon, grid=_grid_from_config(cfg_file),
        donor_pool=donor_pool if donor_pool > 0 else None)
    prepared = attack_mod.prepare_donors(train, acfg)

    picks = rng_stream(seed, _STREAM_SOURCES).choice(
        len(test), size=min(count, len(test)), replace=False)
    sources = [int(i) for i in picks]

    def run_one(src_idx: int):
        t0 = time.time()
        if norm == attack_mod.NORM_L0:
            example, cands = attack_mod.l0_attack(
                test[src_idx], train, acfg, src_idx, prepared)
            full = cands.candidates[-1].l0_distortion
        else:
            example = attack_mod.linf_attack(
                test[src_idx], train, acfg, src_idx, prepared)
            full = None
        return example, full, time.time() - t0

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, sources))
    else:
        results = [run_one(i) for i in sources]

    entries, records = [], []
    for (example, full, wall) in results:
        entries.append(GalleryEntry(
            source_index=example.source_index, label=example.source.label,
            norm=norm, epsilon=epsilon, adversarial=example.adversarial))
        records.append({
            "source_index": example.source_index,
            "donor_index": example.donor_index,
            "donor_label": example.donor_label,
            "transform": {
                "rotation_deg": example.transform.rotation_deg,
                "shift_x": example.transform.shift_x,
                "shift_y": example.transform.shift_y,
                "shear_frac": example.transform.shear_frac,
                "scale": example.transform.scale,
            },
            "cluster_subset": example.cluster_subset,
            "l0_distortion": example.l0_distortion,
            "linf_distortion": example.linf_distortion,
            "full_mask_l0": full,
            "score": example.score,
            "wall_time_s": round(wall, 3),
        })

    (out / "gallery.json").write_text(dump_gallery(entries))
    with open(out / "provenance.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    l0s = [r["l0_distortion"] for r in records]
    summary = {"norm": norm, "epsilon": epsilon, "count": len(records),
               "seed": seed}
    if records:
        summary.update(l0_mean=float(np.mean(l0s)),
                       l0_median=float(np.median(l0s)))
        if norm == attack_mod.NORM_L0:
            reds = [(r["full_mask_l0"] - r["l0_distortion"]) / r["full_mask_l0"]
                    for r in records if r["full_mask_l0"]]
            summary["mean_reduction_vs_full_mask"] = float(np.mean(reds))
        else:
            summary["linf_max"] = float(max(r["linf_distortion"] for r in records))
            summary["full_budget_fraction"] = float(np.mean(
                [r["linf_distortion"] == epsilon for r in records]))
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True,
                                                 indent=2) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_synthetic_verify(args) -> int:
    cfg_file = _load_config(args.config, "synthetic-verify")
    params = synthetic.SyntheticParams(
        d=_setting(args, cfg_file, "d", 100, int),
        k=_setting(args, cfg_file, "k", 100.0, float),
        alpha=_setting(args, cfg_file, "alpha", 0.05, float),
        delta=_setting(args, cfg_file, "delta", 0.01, float))
    n = _setting(args, cfg_file, "n", 100_000, int)
    seed = _setting(args, cfg_file, "seed", 0, int)
    out = _out_dir(args)
    checks, rows = synthetic.run_verification(params, n, seed)
    (out / "synthetic_report.csv").write_text(synthetic.rows_to_csv(rows))
    ok = True
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        ok &= c.passed
        print(f"{status} {c.name}: {c.detail}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(args) -> int:
    cfg_file = _load_config(args.config, "train")
    subset = _setting(args, cfg_file, "subset", 10_000, int)
    tcfg = training.TrainConfig(
        eps_train=_setting(args, cfg_file, "eps_train", 0.0, float),
        pgd_steps=_setting(args, cfg_file, "pgd_steps", 40, int),
        epochs=_setting(args, cfg_file, "epochs", 10, int),
        batch_size=_setting(args, cfg_file, "batch_size", 100, int),
        seed=_setting(args, cfg_file, "seed", 0, int))
    train = _load_pair(args, "train")
    if subset and subset < len(train):
        train = train.take(range(subset))
    model = training.adversarial_train(train, tcfg)
    out = _out_dir(args)
    ckpt = out / (args.name or f"model_eps{tcfg.eps_train:g}.ckpt")
    training.save_model(model, ckpt)
    msg = {"checkpoint": str(ckpt), "eps_train": tcfg.eps_train,
           "epochs": tcfg.epochs, "n_train": len(train)}
    if args.test_images and args.test_labels:
        test = _load_pair(args, "test")
        report = training.robust_error(model, test, 0.0,
                                       training.PgdAttack(steps=1))
        msg["clean_test_error"] = report.clean_error
    print(json.dumps(msg, sort_keys=True))
    return EXIT_OK


def _eval_rows(args, cfg_file, eps_list, attack):
    test = _load_pair(args, "test")
    rows = []
    for ckpt in args.checkpoints.split(","):
        model = training.load_model(ckpt)
        for rep in training.robust_error_sweep(model, test, eps_list, attack):
            rows.append({"model": Path(ckpt).name, "eps_eval": rep.eps_eval,
                         "n": rep.n, "clean_error": rep.clean_error,
                         "robust_error": rep.robust_error,
                         "attack": rep.attack})
    return rows


def cmd_eval(args) -> int:
    cfg_file = _load_config(args.config, "eval")
    eps_list = sorted(float(e) for e in
                      str(_setting(args, cfg_file, "eps", "0.3")).split(","))
    steps = _setting(args, cfg_file, "pgd_steps", 40, int)
    kind = _setting(args, cfg_file, "attack", "pgd")
    if kind == "spatial":
        scfg = training.SpatialAdversaryConfig(pgd_steps=steps)
        attack = training.SpatialPgdAttack(scfg)
    else:
        attack = training.PgdAttack(steps=steps)
    rows = _eval_rows(args, cfg_file, eps_list, attack)
    out = _out_dir(args)
    with open(out / "robust_error.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_invariance_eval(args) -> int:
    test = _load_pair(args, "test")
    entries = load_gallery(Path(args.gallery).read_text())
    if not entries:
        raise InvattackError("gallery is empty")

    class _Pair:
        def __init__(self, source, adversarial):
            self.source = source
            self.adversarial = adversarial

    pairs = [_Pair(test[e.source_index], e.adversarial) for e in entries]
    rows = []
    for ckpt in args.checkpoints.split(","):
        model = training.load_model(ckpt)
        rate = training.invariance_rate(model, pairs)
        rows.append({"model": Path(ckpt).name, "invariance_rate": rate,
                     "n": len(pairs)})
    rates = [r["invariance_rate"] for r in rows]
    inversions = sum(1 for a, b in zip(rates, rates[1:]) if b < a)
    out = _out_dir(args)
    with open(out / "invariance_rates.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["model", "invariance_rate", "n"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    result = {"rows": rows, "monotone_trend": inversions == 0,
              "inversions": inversions}
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_serve(args) -> int:
    train = _load_pair(args, "train")
    gallery = None
    if args.gallery:
        gallery = load_gallery(Path(args.gallery).read_text())
    store = AnnotationStore(train, args.data_dir, gallery)
    try:
        server = serve(store, host=args.host, port=args.port, ui_dir=args.ui_dir)
    except OSError as exc:
        print(f"error: cannot bind {args.host}:{args.port}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME

    def _stop(_sig, _frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _stop)
    print(f"serving on http://{args.host}:{server.server_address[1]} "
          f"(data dir {args.data_dir})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="invattack",
                     description="invariance adversarial example toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file with sections")
        p.add_argument("--out", help="output directory (default: cwd)")

    p = sub.add_parser("make-dataset", help="write a synthetic digit corpus")
    common(p)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("attack", help="generate an invariance example gallery")
    common(p)
    p.add_argument("--norm", choices=["l0", "linf"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--donor-pool", dest="donor_pool", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--train-images");  p.add_argument("--train-labels")
    p.add_argument("--test-images");   p.add_argument("--test-labels")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("synthetic-verify",
                       help="check every synthetic-task claim by sampling")
    common(p)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synthetic_verify)

    p = sub.add_parser("train", help="adversarially train a classifier")
    common(p)
    p.add_argument("--eps-train", dest="eps_train", type=float)
    p.add_argument("--pgd-steps", dest="pgd_steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="checkpoint filename")
    p.add_argument("--train-images");  p.add_argument("--train-labels")
    p.add_argument("--test-images");   p.add_argument("--test-labels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="robust error of saved checkpoints")
    common(p)
    p.add_argument("--checkpoints", required=True,
                   help="comma-separated checkpoint files")
    p.add_argument("--eps", help="comma-separated eval radii")
    p.add_argument("--attack", choices=["pgd", "spatial"])
    p.add_argument("--pgd-steps", dest="pgd_steps", type=int)
    p.add_argument("--test-images");   p.add_argument("--test-labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("invariance-eval",
                       help="invariance rate of checkpoints on a gallery")
    common(p)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--test-images");   p.add_argument("--test-labels")
    p.set_defaults(func=cmd_invariance_eval)

    p = sub.add_parser("serve", help="run the annotation/labeling service")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--gallery", help="gallery JSON to expose for labeling")
    p.add_argument("--ui-dir", dest="ui_dir", help="static frontend directory")
    p.add_argument("--train-images");  p.add_argument("--train-labels")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvattackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
