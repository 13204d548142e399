"""Command-line entry point.

Every subcommand takes ``--config FILE`` and repeated ``--set key=value``
overrides, writes its outputs to files, and records a run manifest (config
echo and hash, seed, package versions, input hashes) next to them. Progress
goes to stderr; any error exits nonzero with a one-line message.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

from . import _accel

SUBCOMMANDS = (
    "gen-data",
    "train-detector",
    "train-stcd",
    "infer",
    "eval",
    "sweep-tau",
    "ablate-scheduler",
    "bench",
    "flops",
    "selftest",
)


def log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def results_dir(args) -> Path:
    root = Path(args.results or os.environ.get("STCD_RESULTS_DIR") or "results")
    root.mkdir(parents=True, exist_ok=True)
    return root


def hash_path(path) -> str:
    """sha256 over a file, or over the sorted relative names and contents of a directory."""
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file())
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "threadpoolctl"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(path: Path, args, cfg, inputs: dict, outputs: list):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg.echo(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "deterministic": bool(args.deterministic),
        "kernel_backend": _accel.backend_name(),
        "versions": _versions(),
        "inputs": {k: hash_path(v) for k, v in sorted(inputs.items())},
        "outputs": sorted(str(o) for o in outputs),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _stem(args, cfg) -> str:
    return f"{args.command}-{cfg.hash()}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    from .pipeline import make_datasets
    from .synthgen import write_dataset

    out = Path(args.out)
    ds = make_datasets(cfg)
    parts = {"stills": ds.stills, "test_stills": ds.test_stills, "unlabeled": ds.unlabeled, "test_videos": ds.test_videos}
    for name, items in parts.items():
        write_dataset(out / name, items)
        log(f"wrote {len(items)} items to {out / name}")
    return {}, [out / n for n in parts], out / "gen-data.manifest.json"


def _load_split(data: Path, name: str):
    from .synthgen import read_dataset

    return read_dataset(data / name)


def cmd_train_detector(args, cfg):
    from .checkpoint import save_checkpoint
    from .pipeline import fit_detector, still_map

    data = Path(args.data)
    stills = _load_split(data, "stills")
    ckpt = fit_detector(cfg, stills, log=log)
    if (data / "test_stills").exists():
        ckpt.meta["test_still_map"] = still_map(ckpt, _load_split(data, "test_stills"), cfg)
        log(f"held-out still mAP@0.5: {ckpt.meta['test_still_map']:.4f}")
    save_checkpoint(args.out, ckpt)
    return {"stills": data / "stills"}, [Path(args.out)], Path(str(args.out) + ".manifest.json")


def cmd_train_stcd(args, cfg):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .pipeline import fit_stcd

    data = Path(args.data)
    det = load_checkpoint(args.detector)
    ckpt = fit_stcd(cfg, det, _load_split(data, "unlabeled"), log=log)
    save_checkpoint(args.out, ckpt)
    inputs = {"unlabeled": data / "unlabeled", "detector": Path(args.detector)}
    return inputs, [Path(args.out)], Path(str(args.out) + ".manifest.json")


def _scheduler_inputs(args, cfg):
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    videos = _load_split(Path(args.data), "test_videos") if args.data else None
    return ckpt, videos


def cmd_infer(args, cfg):
    from .checkpoint import load_checkpoint
    from .evalbench import run_scheduler
    from .pipeline import resolve_tau
    from .scheduler import scheduler_init, write_diagnostics_csv
    from .synthgen import read_sequence

    ckpt = load_checkpoint(args.ckpt)
    seq = read_sequence(args.sequence)
    tau, _ = resolve_tau(cfg, ckpt, [seq])
    state = scheduler_init(ckpt, tau, cfg.mode, cfg.warp_kind, cfg.detector_config(), cfg.temporal_config())
    dets, diag, _ = run_scheduler(state, seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "seq_id": seq.seq_id,
        "frames": [
            {"index": f.frame_index, "boxes": [[*map(float, d.box), float(d.score)] for d in fd]}
            for f, fd in zip(seq.frames, dets)
        ],
    }
    det_path = out / f"{seq.seq_id}.detections.json"
    det_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    diag_path = out / f"{seq.seq_id}.diagnostics.csv"
    write_diagnostics_csv(diag_path, diag)
    log(f"tau {tau:.6g}: {sum(d.path == 'key' for d in diag)}/{len(diag)} key frames")
    return {"ckpt": Path(args.ckpt), "sequence": Path(args.sequence)}, [det_path, diag_path], out / f"{seq.seq_id}.manifest.json"


def cmd_eval(args, cfg):
    from .evalbench import evaluate_framewise, evaluate_sequences, write_results_csv
    from .pipeline import resolve_tau
    from .training import stcd_params

    ckpt, videos = _scheduler_inputs(args, cfg)
    det_cfg, tcfg = cfg.detector_config(), cfg.temporal_config()
    tau, _ = resolve_tau(cfg, ckpt, videos)
    fw = evaluate_framewise(stcd_params(ckpt, det_cfg, tcfg), videos, det_cfg, seed=cfg.seed)
    res = evaluate_sequences(ckpt, tau, cfg.mode, videos, cfg.seed, cfg.warp_kind, det_cfg, tcfg)
    out = results_dir(args) / f"{_stem(args, cfg)}.csv"
    write_results_csv(out, [fw, res], timed=False)
    summary = out.with_suffix(".summary.json")
    summary.write_text(
        json.dumps(
            {
                "framewise": {"map": fw.map, "corrupted_map": fw.corrupted_map, "per_sequence_ap": fw.per_sequence_ap},
                "stcd": {
                    "tau": tau,
                    "mode": res.mode,
                    "map": res.map,
                    "corrupted_map": res.corrupted_map,
                    "key_fraction": res.key_fraction,
                    "flops_per_frame": res.flops_per_frame,
                    "per_sequence_ap": res.per_sequence_ap,
                },
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    log(f"framewise mAP {fw.map:.4f}; {res.mode} tau={tau:.6g} mAP {res.map:.4f} key fraction {res.key_fraction:.3f}")
    return {"ckpt": Path(args.ckpt), "test_videos": Path(args.data) / "test_videos"}, [out, summary], out.with_suffix(".manifest.json")


def auto_taus(ckpt, videos, n: int, det_cfg=None, tcfg=None) -> list:
    """``n`` τ values spanning the observed decision scores (inclusive of both tails)."""
    import numpy as np

    from .evalbench import observed_scores

    s = observed_scores(ckpt, videos, det_cfg, tcfg)
    qs = np.quantile(s, np.linspace(0.0, 1.0, n))
    qs[0] = s.min() - 1e-3
    qs[-1] = s.max() + 1e-3
    return [float(q) for q in qs]


def cmd_sweep_tau(args, cfg):
    from .evalbench import sweep_tau, write_results_csv

    ckpt, videos = _scheduler_inputs(args, cfg)
    det_cfg, tcfg = cfg.detector_config(), cfg.temporal_config()
    taus = list(cfg.sweep_taus) or auto_taus(ckpt, videos, cfg.sweep_points, det_cfg, tcfg)
    rows = sweep_tau(ckpt, taus, videos, seed=cfg.seed, warp_kind=cfg.warp_kind, det_cfg=det_cfg, tcfg=tcfg)
    out = results_dir(args) / f"{_stem(args, cfg)}.csv"
    write_results_csv(out, rows, timed=False)
    for r in rows:
        log(f"tau {r.tau:.6g}: key fraction {r.key_fraction:.3f} mAP {r.map:.4f}")
    return {"ckpt": Path(args.ckpt), "test_videos": Path(args.data) / "test_videos"}, [out], out.with_suffix(".manifest.json")


def cmd_ablate(args, cfg):
    from .evalbench import ablate_scheduler, results_csv
    from .pipeline import resolve_tau

    ckpt, videos = _scheduler_inputs(args, cfg)
    det_cfg, tcfg = cfg.detector_config(), cfg.temporal_config()
    tau, kf = resolve_tau(cfg, ckpt, videos)
    modes = [("decision_net", tau), *cfg.ablation_modes]
    rows = ablate_scheduler(ckpt, modes, kf, videos, cfg.seed, cfg.ablation_tol, det_cfg, tcfg)
    out = results_dir(args) / f"{_stem(args, cfg)}.csv"
    text = results_csv([r.result for r in rows if r.result], timed=False)
    out.write_text(text, encoding="utf-8")
    report = out.with_suffix(".calibration.json")
    report.write_text(
        json.dumps(
            [{"mode": r.mode, "target_key_fraction": r.target_key_fraction, "calibrated": r.calibrated, "note": r.note} for r in rows],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    for r in rows:
        log(f"{r.mode}: " + (r.note if r.result is None else f"key fraction {r.result.key_fraction:.3f} mAP {r.result.map:.4f}"))
    return {"ckpt": Path(args.ckpt), "test_videos": Path(args.data) / "test_videos"}, [out, report], out.with_suffix(".manifest.json")


def cmd_bench(args, cfg):
    from .evalbench import benchmark_runtime
    from .flops import FlopModel
    from .pipeline import resolve_tau

    ckpt, videos = _scheduler_inputs(args, cfg)
    det_cfg, tcfg = cfg.detector_config(), cfg.temporal_config()
    tau, _ = resolve_tau(cfg, ckpt, videos)
    fm = FlopModel(det_cfg, tcfg)
    rows = []
    for mode in ("all_key", cfg.mode):
        r = benchmark_runtime(ckpt, tau, videos, cfg.bench_repeats, mode, det_cfg, tcfg)
        r["flop_ratio_vs_framewise"] = r["flops_per_frame"] / fm.framewise
        rows.append(r)
        log(f"{r['mode']}: {r['ms_per_frame_mean']:.3f} ± {r['ms_per_frame_std']:.3f} ms/frame, key fraction {r['key_fraction']:.3f}")
    out = results_dir(args) / f"{_stem(args, cfg)}.csv"
    import csv

    from .evalbench import CSV_COLUMNS

    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([repr(float(tau)), r["mode"], "", repr(r["key_fraction"]), repr(r["flops_per_frame"]), repr(r["ms_per_frame_mean"]), repr(r["ms_per_frame_std"]), cfg.seed])
    return {"ckpt": Path(args.ckpt), "test_videos": Path(args.data) / "test_videos"}, [out], out.with_suffix(".manifest.json")


def cmd_flops(args, cfg):
    from .flops import FlopModel

    fm = FlopModel(cfg.detector_config(), cfg.temporal_config())
    doc = {
        "parts": fm.parts,
        "key_path": fm.key_path,
        "nonkey_path": fm.nonkey_path,
        "framewise": fm.framewise,
        "nonkey_over_key": fm.nonkey_path / fm.key_path,
        "blended_at_target_over_framewise": (
            cfg.target_key_fraction * fm.key_path + (1 - cfg.target_key_fraction) * fm.nonkey_path
        )
        / fm.framewise,
    }
    out = results_dir(args) / f"{_stem(args, cfg)}.json"
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log(f"key path {fm.key_path} FLOPs, non-key path {fm.nonkey_path} FLOPs")
    return {}, [out], out.with_suffix(".manifest.json")


def cmd_selftest(args, cfg):
    from .selftest import run_selftest

    ok = run_selftest(log=log)
    out = results_dir(args) / f"{_stem(args, cfg)}.txt"
    out.write_text("pass\n" if ok else "fail\n", encoding="utf-8")
    if not ok:
        raise SelfTestFailed("one or more invariant suites failed")
    return {}, [out], out.with_suffix(".manifest.json")


class SelfTestFailed(RuntimeError):
    pass


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-detector": cmd_train_detector,
    "train-stcd": cmd_train_stcd,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep-tau": cmd_sweep_tau,
    "ablate-scheduler": cmd_ablate,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--results", help="results directory (default: $STCD_RESULTS_DIR or ./results)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded reference mode")

    parser = argparse.ArgumentParser(prog="stcd", description="Adaptive key-frame video lesion detection at toy scale.")
    parser.add_argument("--print-config", action="store_true", help="print every config key with its default and unit, then exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate stills and videos")
    p.add_argument("--out", required=True, help="dataset root directory")
    p = sub.add_parser("train-detector", parents=[common], help="train the detector on labeled stills")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p = sub.add_parser("train-stcd", parents=[common], help="train motion/warp/decision networks on unlabeled videos")
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p = sub.add_parser("infer", parents=[common], help="run the scheduler over one sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output directory")
    for name, text in (
        ("eval", "framewise and scheduled mAP on the test videos"),
        ("sweep-tau", "key fraction / mAP / FLOPs over a range of tau"),
        ("ablate-scheduler", "compare scheduling policies at a matched key rate"),
        ("bench", "wall-clock ms/frame"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", required=True, help="full checkpoint from train-stcd")
        p.add_argument("--data", required=True, help="dataset root with test_videos/")
    sub.add_parser("flops", parents=[common], help="analytic FLOP model")
    sub.add_parser("selftest", parents=[common], help="run the invariant suites")
    return parser


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    from .config import ConfigError, parse_config

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.print_config:
        sys.stdout.write(parse_config().echo(docs=True))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config, args.set)
        t0 = time.perf_counter()
        with _thread_limit(args.deterministic):
            inputs, outputs, manifest = COMMANDS[args.command](args, cfg)
        if args.config:
            inputs["config_file"] = Path(args.config)
        write_manifest(manifest, args, cfg, inputs, outputs)
        log(f"{args.command} done in {time.perf_counter() - t0:.1f}s; manifest {manifest}")
        return 0
    except ConfigError as exc:
        log(f"error: {exc}")
        return 2
    except KeyboardInterrupt:
        log("interrupted")
        return 130
    except Exception as exc:
        log(f"error: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
