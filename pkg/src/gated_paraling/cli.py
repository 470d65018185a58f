"""Command-line entry point: ``synth``, ``extract``, ``train``, ``eval``, ``predict``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error. ``GATED_PARALING_THREADS`` caps the extraction worker count.

Feature directory layout written by ``extract``::

    index.jsonl          one line per session: ids, label, segment list
    extract.txt          preprocessing parameters (key = value)
    cache/<session>/NNNN.lldc   unpadded 76 x T descriptor matrices
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio_io import (
    AudioClip,
    cross_channel_spectral_subtraction,
    extract_turn_utterances,
    normalize_dbfs,
    read_turns,
    read_wav,
    rms_dbfs,
    segment_bounds,
)
from .config import RunConfig, load_run_config
from .errors import ConfigError, DataError, GatedParalingError, InvalidSpec, MissingCache
from .evaluation import (
    Segment,
    budget_name,
    class_names,
    evaluate_cv,
    fit_fold,
    labelled_sessions,
    majority_vote,
    parse_budgets,
    plan_folds,
)
from .features import assemble_feature_matrix, lld_matrix, read_cache, write_cache
from .gcnn_model import decide, load_model, save_model
from .manifest import load_manifest
from .synth_data import SynthSpec, load_synth_spec, synth_dataset
from .training import write_training_log

log = logging.getLogger("gated_paraling")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MAX_FAILURE_FRACTION = 0.10
TURN_PAD_S = 0.01


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("GATED_PARALING_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"GATED_PARALING_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_jobs))


def _pmap(fn, items):
    items = list(items)
    workers = worker_count(len(items))
    if workers == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- preprocessing ----------------------------------------------------------------


def session_audio(record, cfg: RunConfig) -> AudioClip:
    """Patient channel, with interviewer leakage removed when a second channel exists."""
    clip = read_wav(record.patient_wav, allow_resample=cfg.allow_resample)
    if record.interviewer_wav:
        other = read_wav(record.interviewer_wav, allow_resample=cfg.allow_resample)
        clip = cross_channel_spectral_subtraction(clip, other, cfg.subtraction)
    return clip


def split_session(clip: AudioClip, turns_path, segment_seconds: float) -> list[tuple[AudioClip, float]]:
    """Turn utterances when a turns file is given, else fixed-length segments; with start times."""
    if turns_path:
        turns = read_turns(turns_path)
        utterances = extract_turn_utterances(clip, turns)
        return [(u, max(0.0, t.start_s - TURN_PAD_S)) for u, t in zip(utterances, turns)]
    sr = clip.sample_rate
    return [(AudioClip(clip.samples[a:b], sr), a / sr) for a, b in segment_bounds(len(clip), sr, segment_seconds)]


def preprocess(clip: AudioClip, turns_path, cfg: RunConfig, target_dbfs: float) -> list[Segment]:
    clip = normalize_dbfs(clip, target_dbfs)
    return [
        Segment(lld_matrix(piece), start, piece.duration)
        for piece, start in split_session(clip, turns_path, cfg.segment_seconds)
    ]


def _level_job(job):
    record, cfg = job
    try:
        return rms_dbfs(session_audio(record, cfg)), None
    except (DataError, OSError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _extract_job(job):
    record, cfg, target = job
    try:
        return preprocess(session_audio(record, cfg), record.turns, cfg, target), None
    except (DataError, OSError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _safe_name(session_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", session_id)


def run_extract(manifest_path, out_dir, cfg: RunConfig) -> dict:
    """Preprocess every manifest session into a feature directory; returns a summary."""
    records = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    cache_dir = out_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    failures: dict[str, str] = {}

    target = cfg.target_dbfs
    if target is None:
        levels = _pmap(_level_job, [(r, cfg) for r in records])
        good = [lv for lv, _ in levels if lv is not None]
        if not good:
            raise DataError("no readable, non-silent session to measure the dataset level")
        target = float(np.mean(good))
        log.info("dataset mean level %.3f dBFS over %d sessions", target, len(good))

    results = _pmap(_extract_job, [(r, cfg, target) for r in records])
    with open(out_dir / "index.jsonl", "w") as index:
        for record, (segments, err) in zip(records, results):
            if err is None and not segments:
                err = "no segments"
            if err is not None:
                failures[record.session_id] = err
                log.error("session %s skipped: %s", record.session_id, err)
                continue
            sdir = cache_dir / _safe_name(record.session_id)
            sdir.mkdir(exist_ok=True)
            entries = []
            for i, seg in enumerate(segments):
                rel = f"cache/{sdir.name}/{i:04d}.lldc"
                write_cache(out_dir / rel, seg.lld)
                entries.append({"file": rel, "start_s": round(seg.start_s, 6), "duration_s": round(seg.duration_s, 6)})
            line = {
                "session_id": record.session_id,
                "speaker_id": record.speaker_id,
                "class_label": record.class_label,
                "segments": entries,
            }
            index.write(json.dumps(line) + "\n")

    meta = {
        "target_dbfs": target,
        "segment_seconds": cfg.segment_seconds,
        "subtract_alpha": cfg.subtract_alpha,
        "subtract_beta": cfg.subtract_beta,
        "sessions": len(records),
        "failed": len(failures),
    }
    (out_dir / "extract.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in meta.items()))
    meta["failures"] = failures
    return meta


def read_extract_meta(features_dir) -> dict:
    path = Path(features_dir) / "extract.txt"
    if not path.is_file():
        raise MissingCache(f"{path} not found; run extract first")
    meta = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip():
            meta[key.strip()] = float(value)
    return meta


def load_features(features_dir) -> dict[str, list[Segment]]:
    features_dir = Path(features_dir)
    index = features_dir / "index.jsonl"
    if not index.is_file():
        raise MissingCache(f"{index} not found; run extract first")
    segments = {}
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        segs = []
        for s in entry["segments"]:
            path = features_dir / s["file"]
            if not path.is_file():
                raise MissingCache(f"cache file missing: {path}")
            segs.append(Segment(read_cache(path), float(s["start_s"]), float(s["duration_s"])))
        segments[entry["session_id"]] = segs
    return segments


def load_inputs(manifest_path, features_dir):
    records = load_manifest(manifest_path)
    segments = load_features(features_dir)
    missing = [r.session_id for r in records if r.session_id not in segments]
    if missing:
        log.warning("%d manifest sessions have no cached features and are skipped", len(missing))
    if not any(r.session_id in segments for r in records):
        raise MissingCache("no manifest session has cached features")
    return records, segments


# -- report writing -------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def write_report(out_dir, result, cfg: RunConfig) -> str:
    """Write summary.txt, metrics.csv, roc.csv, det.csv, confusion CSVs and audit.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = result.report
    names = class_names(report.condition)
    budgets = list(report.budgets)

    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write("condition,budget,fold,n_sessions,accuracy,kappa\n")
        for b in budgets:
            m = report.budgets[b]
            for fold, (cm, acc, kap) in enumerate(zip(m.fold_cms, m.fold_accuracies, m.fold_kappas)):
                fold_id = report.audit[fold]["fold"]
                fh.write(f"{report.condition},{budget_name(b)},{fold_id},{int(cm.sum())},{_fmt(acc)},{_fmt(kap)}\n")

    header = "actual\\predicted," + ",".join(names) + "\n"
    for b in budgets:
        cm = report.budgets[b].pooled_cm
        rows = "".join(f"{names[i]}," + ",".join(str(int(v)) for v in cm[i]) + "\n" for i in range(len(names)))
        (out_dir / f"confusion_{budget_name(b)}.csv").write_text(header + rows)
    seg = report.segment_cm
    rows = "".join(f"{names[i]}," + ",".join(str(int(v)) for v in seg[i]) + "\n" for i in range(len(names)))
    (out_dir / "confusion_segments.csv").write_text(header + rows)

    aucs = {}
    if report.classes == 2:
        with open(out_dir / "roc.csv", "w") as roc_fh, open(out_dir / "det.csv", "w") as det_fh:
            roc_fh.write("budget,threshold,fpr,tpr\n")
            det_fh.write("budget,threshold,fpr,fnr\n")
            for b in budgets:
                m = report.budgets[b]
                try:
                    curve, auc = m.roc()
                except GatedParalingError as exc:
                    log.warning("no ROC for budget %s: %s", budget_name(b), exc)
                    continue
                aucs[b] = auc
                for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
                    roc_fh.write(f"{budget_name(b)},{t:.6f},{x:.6f},{y:.6f}\n")
                for t, x, y in m.det():
                    det_fh.write(f"{budget_name(b)},{t:.6f},{x:.6f},{y:.6f}\n")

    (out_dir / "audit.json").write_text(json.dumps(report.audit, indent=1) + "\n")

    n_sessions = len(report.budgets[budgets[0]].session_ids)
    lines = [
        f"condition: {report.condition} ({' vs '.join(reversed(names)) if report.classes == 2 else '/'.join(names)})",
        f"sessions: {n_sessions}   folds: {len(report.audit)}   seed: {cfg.seed}",
        "",
        "budget (s)      " + "".join(f"{budget_name(b):>9}" for b in budgets),
        "accuracy        " + "".join(f"{report.budgets[b].mean_accuracy:9.3f}" for b in budgets),
        "pooled accuracy " + "".join(f"{report.budgets[b].pooled_accuracy:9.3f}" for b in budgets),
        "kappa           " + "".join(f"{report.budgets[b].kappa:9.3f}" for b in budgets),
    ]
    if aucs:
        lines.append("auc             " + "".join(f"{aucs.get(b, float('nan')):9.3f}" for b in budgets))
        lines.append("fpr             " + "".join(f"{report.budgets[b].error_rates()[0]:9.3f}" for b in budgets))
        lines.append("fnr             " + "".join(f"{report.budgets[b].error_rates()[1]:9.3f}" for b in budgets))
    if seg.sum():
        lines += ["", f"segment accuracy: {np.trace(seg) / seg.sum():.3f} over {int(seg.sum())} segments"]
    text = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(text)
    return text


# -- commands ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for name in ("condition", "folds", "seed", "target_dbfs", "segment_seconds", "subtract_alpha", "subtract_beta"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "budgets", None):
        overrides["budgets"] = parse_budgets(args.budgets)
    if getattr(args, "allow_resample", False):
        overrides["allow_resample"] = True
    if getattr(args, "epochs", None) is not None:
        overrides["train"] = replace(cfg.train, epochs=args.epochs)
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest, records = synth_dataset(spec, args.out_dir)
    print(f"wrote {len(records)} sessions; manifest {manifest}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    meta = run_extract(args.manifest, args.out_dir, cfg)
    ok = meta["sessions"] - meta["failed"]
    print(f"extracted {ok}/{meta['sessions']} sessions at {meta['target_dbfs']:.2f} dBFS into {args.out_dir}")
    if meta["sessions"] and meta["failed"] / meta["sessions"] > MAX_FAILURE_FRACTION:
        log.error("%d of %d sessions failed", meta["failed"], meta["sessions"])
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not 0 <= args.fold < cfg.folds:
        raise ConfigError(f"--fold must lie in [0, {cfg.folds})")
    records, segments = load_inputs(args.manifest, args.features)
    kept, label_of = labelled_sessions(records, segments, cfg.condition)
    plan = plan_folds(kept, k=cfg.folds, seed=cfg.seed)
    train, test = plan.split(kept, args.fold)
    result = fit_fold(train, segments, label_of, cfg.model, cfg.train, cfg.seed + args.fold)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, result.model)
    write_training_log(out.with_suffix(".log.csv"), result.history)
    audit = {
        "fold": args.fold,
        "folds": cfg.folds,
        "seed": cfg.seed,
        "condition": cfg.condition,
        "train_speakers": sorted({s.speaker_id for s in train}),
        "test_speakers": sorted({s.speaker_id for s in test}),
        "train_sessions": [s.session_id for s in train],
        "test_sessions": [s.session_id for s in test],
    }
    out.with_suffix(".audit.json").write_text(json.dumps(audit, indent=1) + "\n")
    print(f"fold {args.fold}: trained on {len(train)} sessions; weights {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    records, segments = load_inputs(args.manifest, args.features)
    models = {}
    if args.models:
        for k in range(cfg.folds):
            path = Path(args.models) / f"fold{k}.gcnn"
            if path.is_file():
                models[k] = load_model(path)
        log.info("loaded %d pre-trained fold models", len(models))
    out_dir = Path(args.out_dir)
    model_dir = out_dir / "models"

    def keep(fold, result):
        if args.save_models:
            model_dir.mkdir(parents=True, exist_ok=True)
            save_model(model_dir / f"fold{fold}.gcnn", result.model)
            write_training_log(model_dir / f"fold{fold}.log.csv", result.history)

    result = evaluate_cv(
        records,
        segments,
        condition=cfg.condition,
        model_config=cfg.model,
        train_config=cfg.train,
        budgets=cfg.budgets,
        k=cfg.folds,
        seed=cfg.seed,
        models=models,
        on_fold=keep,
    )
    print(write_report(out_dir, result, cfg), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    model = load_model(args.model)
    if model.feature_stats is None:
        raise ConfigError(f"{args.model} carries no feature statistics")
    if model.config.classes != len(class_names(cfg.condition)):
        raise ConfigError(f"model has {model.config.classes} classes; condition {cfg.condition} needs a different head")
    target = cfg.target_dbfs
    if target is None:
        if not args.features:
            raise ConfigError("give --target-dbfs or --features to fix the normalization level")
        target = read_extract_meta(args.features)["target_dbfs"]

    record = argparse.Namespace(patient_wav=args.wav, interviewer_wav=args.interviewer)
    segments = preprocess(session_audio(record, cfg), args.turns, cfg, target)
    if not segments:
        raise DataError("recording yields no segments")
    x = np.stack([assemble_feature_matrix(s.lld, model.feature_stats).values for s in segments]).astype(np.float32)
    probs = model.predict_proba(x)
    label = majority_vote([(decide(p), p) for p in probs])
    names = class_names(cfg.condition)
    print(f"session_label: {names[label]} ({label})")
    print("segment,start_s,duration_s," + ",".join(f"p_{n}" for n in (names[1:] if model.config.classes == 2 else names)))
    for i, (seg, p) in enumerate(zip(segments, probs)):
        values = np.atleast_1d(p)
        print(f"{i},{seg.start_s:.3f},{seg.duration_s:.3f}," + ",".join(f"{v:.6f}" for v in values))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------------


def _add_run_options(p, *, training: bool = True):
    p.add_argument("--config", help="run configuration file (key = value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--condition", choices=("dvh", "dvmh", "dmvh", "3class"))
    if training:
        p.add_argument("--folds", type=int, help="number of cross-validation folds")
        p.add_argument("--epochs", type=int)


def _add_preprocess_options(p):
    p.add_argument("--target-dbfs", type=float, help="normalization level; default: dataset mean RMS dBFS")
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--subtract-alpha", type=float, help="over-subtraction factor")
    p.add_argument("--subtract-beta", type=float, help="spectral floor")
    p.add_argument("--allow-resample", action="store_true", help="resample rates other than 16 kHz / 44.1 kHz")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gated-paraling", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--spec", help="synthetic spec file (key = value)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="preprocess sessions into cached descriptor matrices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    _add_preprocess_options(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the model for one cross-validation fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True, help="weight file to write")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="speaker-disjoint cross-validation report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--budgets", help="comma list of seconds, 'all' for no limit")
    p.add_argument("--models", help="directory of foldK.gcnn files to reuse instead of training")
    p.add_argument("--save-models", action="store_true", help="write trained fold models under OUT_DIR/models")
    _add_run_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one recording")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--interviewer", help="interviewer channel for spectral subtraction")
    p.add_argument("--turns", help="turns file: one 'start end' pair per line")
    p.add_argument("--features", help="feature directory whose extraction level to reuse")
    _add_run_options(p, training=False)
    _add_preprocess_options(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
