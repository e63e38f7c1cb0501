"""Command line entry point: ``mvecho {generate,train,eval,predict,occlude,benchmark}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes ``run_config.json`` next to its outputs; pass it back with
``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from mvecho import __version__
from mvecho import aggregation as A
from mvecho import checkpoint
from mvecho import dataio as D
from mvecho import metrics as MT
from mvecho import models as M
from mvecho import saliency as S
from mvecho import viewrouter as R
from mvecho.errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from mvecho.preprocess import Geometry, ViewKind, load_png, preprocess_frame

log = logging.getLogger("mvecho")

THREADS_ENV = "MVECHO_THREADS"
ARCHS = ("mc-dsc", "mb-dsc", "mb-dsc-fifth", "mc-standard")
HEAD_NAMES = {"binary": "binary", "three": "three_class"}
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ------------------------------------------------------------------------


def label_names(head):
    return ["negative", "positive"] if head == "binary" else list(D.LABELS)


def targets(labels, head):
    labels = np.asarray(labels)
    return (labels > 0).astype(int) if head == "binary" else labels


def resolve_threads(value):
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            value = 1
    if value < 1:
        raise UsageError("--threads must be at least 1")
    return value


def write_json(path, doc):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


def write_run_config(out_dir, args, **resolved):
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    doc.update(resolved)
    doc["version"] = __version__
    write_json(Path(out_dir) / "run_config.json", doc)
    return doc


def dtype_of(name):
    return {"float32": np.float32, "float64": np.float64}[name]


def checkpoint_kind(path):
    header, _ = checkpoint.read_header(path)
    return header["kind"], header["config"]


def load_any(path):
    """``(kind, params, optimizer_state, meta)`` for either checkpoint kind."""
    kind, _ = checkpoint_kind(path)
    if kind == "keyframe":
        params, opt, meta = M.load_model(path)
    elif kind == "video":
        params, opt, meta = A.load_video_model(path)
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return kind, params, opt, meta


def arch_config(args):
    overrides = {"head": HEAD_NAMES[args.head], "input_size": args.input_size, "conv_layers": args.conv_layers}
    if args.width is not None:
        overrides["width_multiplier"] = args.width
    if args.fc1 is not None:
        overrides["fc1_units"] = args.fc1
    if args.fc2 is not None:
        overrides["fc2_units"] = args.fc2
    return M.ArchitectureConfig.preset(args.arch, **overrides)


def video_config(args, head=None):
    if args.arch not in ("mb-dsc", "mb-dsc-fifth"):
        raise ConfigError(f"video models use a multi-branch encoder; --arch {args.arch} is key-frame only")
    base = M.ArchitectureConfig.preset(args.arch)
    return A.VideoConfig(
        scheme=args.aggregation,
        head=head or HEAD_NAMES[args.head],
        input_size=args.input_size,
        conv_layers=args.conv_layers,
        width_multiplier=args.width if args.width is not None else base.width_multiplier,
        fc1_units=args.fc1 if args.fc1 is not None else base.fc1_out,
        fc2_units=args.fc2 if args.fc2 is not None else 128,
        rnn_hidden=args.rnn_hidden,
    )


def studies_from(clips, head):
    """``load_view_clips`` output -> list of :class:`StudyClips` with head-specific labels."""
    out = []
    for record, views in clips:
        label = int(targets([record.label_index], head)[0]) if head != "view" else None
        out.append(
            A.StudyClips(
                {int(v): c.frames for v, c in views.items()},
                {int(v): c.key_frame_index for v, c in views.items() if c.key_frame_index is not None},
                label,
                record.subject_id,
            )
        )
    return out


def load_manifest(args, augment=False):
    manifest = D.Manifest.load(args.manifest)
    if augment and args.augment_factor:
        manifest = D.augment_virtual_patients(manifest, args.augment_factor, args.seed)
        problems = D.audit_leakage(manifest)
        if problems:
            raise DataError("augmentation leaked subjects across splits: " + "; ".join(problems[:3]))
    return manifest


def has_split(manifest, name):
    return bool(manifest.split(name))


# -- generate -------------------------------------------------------------------------


def cmd_generate(args, threads):
    spec = D.PhantomSpec.load(args.spec) if args.spec else D.PhantomSpec()
    split_counts = None
    if args.split_counts:
        try:
            split_counts = tuple(int(v) for v in args.split_counts.split(","))
        except ValueError:
            raise UsageError("--split-counts must be three comma-separated integers") from None
        if len(split_counts) != 3:
            raise UsageError("--split-counts must be three comma-separated integers")
    n_per_class = args.n_per_class
    if n_per_class is None and split_counts is None:
        n_per_class = 10
    out = Path(args.out)
    manifest = D.generate_phantom_dataset(spec, n_per_class, args.seed, out, split_counts, workers=threads)
    write_run_config(out, args, threads=threads, phantom_spec=spec.to_json())
    print(f"wrote {len(manifest.records)} studies to {out / 'manifest.json'}")


# -- train ---------------------------------------------------------------------------


def cmd_train(args, threads):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args, augment=True)
    dtype = dtype_of(args.dtype)
    if args.mode == "keyframe":
        resolved = train_keyframe_mode(args, manifest, out, threads, dtype)
    else:
        resolved = train_video_mode(args, manifest, out, threads, dtype)
    write_run_config(out, args, threads=threads, **resolved)


def _resume_state(args, expected_fp):
    if not args.resume:
        return None, None, 0
    kind, params, opt, meta = load_any(args.resume)
    if params.fingerprint != expected_fp:
        raise CheckpointError(f"{args.resume}: architecture does not match the requested configuration")
    return params, opt, int(meta.get("epoch", -1)) + 1


def train_keyframe_mode(args, manifest, out, threads, dtype):
    cfg = arch_config(args)
    train = D.load_keyframe_set(manifest, "train", cfg.input_size, threads, dtype)
    val = D.load_keyframe_set(manifest, "val", cfg.input_size, threads, dtype) if has_split(manifest, "val") else None
    params, opt_state, start = _resume_state(args, cfg.fingerprint())
    if params is None:
        if args.init:
            params, _, _ = M.load_model(args.init, expected=cfg, migrate_head=True)
            params = params.astype(dtype)
        else:
            params = M.build_model(cfg, seed=args.seed, dtype=dtype)
    dataset = M.KeyframeDataset(
        train.x, targets(train.labels, cfg.head),
        val.x if val else None, targets(val.labels, cfg.head) if val else None,
    )
    schedule = M.Schedule(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, patience=args.patience,
        seed=args.seed, head_only=args.head_only, checkpoint_dir=str(out),
    )
    report = M.train_keyframe(params, dataset, schedule, optimizer_state=opt_state, start_epoch=start)
    report.write_csv(out / "curves.csv")
    summary = {"best_epoch": report.best_epoch, "best_val_acc": report.best_val_acc, "epochs_run": len(report.rows),
               "steps": report.optimizer_state.step_count}
    write_json(out / "train_report.json", summary)
    print(f"best epoch {report.best_epoch}, val accuracy {report.best_val_acc}")
    return {"architecture": cfg.to_dict(), "fingerprint": cfg.fingerprint()}


def train_video_mode(args, manifest, out, threads, dtype):
    diag = video_config(args)
    cfg = R.view_model_config(diag) if args.mode == "view" else diag
    params, opt_state, start = _resume_state(args, cfg.fingerprint())
    if params is None:
        params = A.build_video_model(cfg, seed=args.seed, dtype=dtype)

    def load(split, seed):
        clips = D.load_view_clips(manifest, split, cfg.input_size, args.duration, seed, True, threads, dtype)
        studies = studies_from(clips, "view" if args.mode == "view" else cfg.head)
        return R.view_training_set(studies) if args.mode == "view" else studies

    train = load("train", args.seed)
    val = load("val", args.seed + 1) if has_split(manifest, "val") else None
    resample = None
    if args.recrop:
        full = D.load_full_clips(manifest, "train", cfg.input_size, threads, dtype)

        def resample(epoch):
            clips = D.crop_studies(full, D.clip_fps, args.duration, args.seed + 1000 * epoch, True)
            studies = studies_from(clips, "view" if args.mode == "view" else cfg.head)
            return R.view_training_set(studies) if args.mode == "view" else studies

    schedule = A.VideoSchedule(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, patience=args.patience,
        seed=args.seed, keyframe_weight=args.keyframe_loss, checkpoint_dir=str(out),
    )
    report = A.train_video(params, train, val, schedule, optimizer_state=opt_state, start_epoch=start, resample=resample)
    report.write_csv(out / "curves.csv")
    write_json(out / "train_report.json", {
        "best_epoch": report.best_epoch, "best_val_acc": report.best_val_acc, "epochs_run": len(report.rows),
        "steps": report.optimizer_state.step_count,
    })
    print(f"best epoch {report.best_epoch}, val accuracy {report.best_val_acc}")
    return {"architecture": cfg.to_dict(), "fingerprint": cfg.fingerprint()}


# -- eval -----------------------------------------------------------------------------


def evaluate_checkpoint(path, manifest, split, threads, seed=0, duration=0.8):
    """Predictions and metric report of one checkpoint on one split."""
    kind, params, _, _ = load_any(path)
    cfg = params.config
    if kind == "keyframe":
        data = D.load_keyframe_set(manifest, split, cfg.input_size, threads, params.dtype)
        probs, _ = M.predict_proba(params, data.x)
        labels = M.labels_from_probabilities(probs, cfg.head)
        y = targets(data.labels, cfg.head)
        return "keyframe", data.subject_ids, y, probs, labels, MT.evaluate(y, probs, labels, cfg.head)
    clips = D.load_view_clips(manifest, split, cfg.input_size, duration, seed, True, threads, params.dtype)
    if cfg.head == "view":
        examples = R.view_training_set(studies_from(clips, "view"))
        preds = R.classify_views(params, [e.clips[0] for e in examples], threads)
        probs = np.stack([p.probs for p in preds])
        labels = probs.argmax(axis=1)
        y = np.array([e.label for e in examples])
        report = {"n": len(y), "accuracy": MT.accuracy(y, labels),
                  "confusion": MT.confusion_matrix(y, labels, 5).tolist(),
                  "confusion_normalized": MT.normalize_columns(MT.confusion_matrix(y, labels, 5)).tolist()}
        return "view", [e.subject_id for e in examples], y, probs, labels, report
    studies = studies_from(clips, cfg.head)
    preds = A.video_predict(params, studies)
    probs = np.stack([p.probabilities for p in preds])
    labels = np.array([p.label for p in preds])
    y = np.array([s.label for s in studies])
    return "video", [s.subject_id for s in studies], y, probs, labels, MT.evaluate(y, probs, labels, cfg.head)


def cmd_eval(args, threads):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = D.Manifest.load(args.manifest)
    _, ids, y, probs, labels, report = evaluate_checkpoint(args.checkpoint, manifest, args.split, threads, args.seed, args.duration)
    report["split"] = args.split
    report["checkpoint"] = str(args.checkpoint)
    write_json(out / "metrics.json", report)
    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicted\\true"] + list(range(len(report["confusion"]))))
        for i, row in enumerate(report["confusion_normalized"]):
            writer.writerow([i] + [f"{v:.6f}" for v in row])
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "target", "predicted"] + [f"p{i}" for i in range(probs.shape[1])])
        for sid, t, lab, p in zip(ids, y, labels, probs):
            writer.writerow([sid, int(t), int(lab)] + [f"{v:.8g}" for v in p])
    write_run_config(out, args, threads=threads)
    print(json.dumps({k: report[k] for k in ("n", "accuracy") if k in report} | {"auc": report.get("auc")}))


# -- predict --------------------------------------------------------------------------


def read_clip_dir(path):
    """``{clip name: raw frames [K, H, W]}`` from sub-directories of PNG frames."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"clip directory {root} does not exist")
    clips = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.png"))
        if not files:
            raise DataError(f"clip {sub.name} holds no PNG frames")
        frames = [load_png(f) for f in files]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise DataError(f"clip {sub.name} mixes frame sizes {sorted(shapes)}")
        clips[sub.name] = np.stack(frames)
    if not clips:
        raise DataError(f"no clips found in {root}")
    if len(clips) > 5:
        raise DataError(f"at most five clips per study, found {len(clips)}")
    return clips


def prepare_clips(raw, geometry, size, dtype):
    return {name: np.stack([preprocess_frame(f, geometry, size) for f in frames]).astype(dtype)
            for name, frames in raw.items()}


def key_frame_of(name, frames, keys):
    return int(keys.get(name, len(frames) // 2))


def cmd_predict(args, threads):
    kind, params, _, _ = load_any(args.checkpoint)
    cfg = params.config
    if kind == "video" and cfg.head == "view":
        raise UsageError("predict needs a diagnosis checkpoint, not a view classifier")
    raw = read_clip_dir(args.clips)
    geo_path = Path(args.geometry) if args.geometry else Path(args.clips) / "geometry.json"
    geometry = Geometry.load(geo_path) if geo_path.exists() else None
    keys_path = Path(args.clips) / "keyframes.json"
    keys = json.loads(keys_path.read_text()) if keys_path.exists() else {}
    clips = prepare_clips(raw, geometry, cfg.input_size, params.dtype)

    audit = None
    if args.unordered_views:
        if not args.router:
            raise UsageError("--unordered-views needs --router CHECKPOINT (a view classifier)")
        _, router, _, _ = load_any(args.router)
        if router.config.input_size != cfg.input_size:
            router_clips = prepare_clips(raw, geometry, router.config.input_size, router.dtype)
        else:
            router_clips = {n: c.astype(router.dtype) for n, c in clips.items()}
        assignment, preds = R.route_clips(router, router_clips, threads)
        slots = {int(v): name for v, name in assignment.filled().items()}
        audit = [dict(zip(("clip_id", "predicted_view", "confidence", "slot"), row))
                 for row in R.audit_rows(preds, assignment)]
        if args.out:
            R.write_audit_csv(Path(args.out).with_suffix(".audit.csv"), preds, assignment)
    else:
        slots = {}
        for name in clips:
            try:
                slots[int(ViewKind.parse(name))] = name
            except ValueError:
                raise DataError(f"ordered mode needs clip folders named after views, got {name!r}") from None

    names = label_names(cfg.head)
    if kind == "keyframe":
        stack = np.zeros((cfg.input_size, cfg.input_size, 5), dtype=params.dtype)
        present = np.zeros(5, dtype=bool)
        for slot, name in slots.items():
            stack[:, :, slot] = clips[name][key_frame_of(name, clips[name], keys)]
            present[slot] = True
        pred = M.forward(params, stack)
        doc = {"label": pred.label, "probabilities": pred.probabilities.tolist(),
               "logits": pred.logits.tolist(), "present": present.tolist(), "attention": None}
    else:
        study = A.StudyClips({slot: clips[name] for slot, name in slots.items()})
        doc = A.video_forward(params, study).to_json()
    doc["label_name"] = names[doc["label"]]
    doc["labels"] = names
    doc["views"] = {ViewKind(s).name: n for s, n in sorted(slots.items())}
    doc["assignment_audit"] = audit
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, doc)
        write_run_config(out.parent, args, threads=threads)
    print(json.dumps(doc))


# -- occlude --------------------------------------------------------------------------


def cmd_occlude(args, threads):
    params, _, _ = M.load_model(args.checkpoint)
    cfg = params.config
    manifest = D.Manifest.load(args.manifest)
    data = D.load_keyframe_set(manifest, args.split, cfg.input_size, threads, params.dtype)
    if args.subject:
        if args.subject not in data.subject_ids:
            raise DataError(f"subject {args.subject!r} is not in split {args.split!r}")
        idx = data.subject_ids.index(args.subject)
    else:
        positives = np.flatnonzero(data.labels > 0)
        idx = int(positives[0]) if len(positives) else 0
    sid = data.subject_ids[idx]
    view = ViewKind.parse(args.view)
    omap = S.occlusion_scan(params, data.x[idx], view, args.box, args.stride, workers=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    S.render_heatmap(omap, out / "heatmap.png", scale=args.scale)
    record = D.records_by_id(manifest)[sid]
    doc = {"subject_id": sid, "view": view.name, "box": args.box, "stride": args.stride,
           "baseline": omap.baseline, "argmin": list(omap.argmin()), "min_delta": float(omap.deltas.min())}
    clip = record.clips.get(view.name)
    if clip is not None and clip.defect_box is not None:
        geo = manifest.load_geometry()
        scale = cfg.input_size / geo.roi.height
        box = [int(round(v * scale)) for v in clip.defect_box]
        doc["defect_box"] = box
        doc["hit"] = bool(S.hits_box(omap, box))
    write_json(out / "occlusion.json", doc)
    write_run_config(out, args, threads=threads)
    print(json.dumps(doc))


# -- benchmark ------------------------------------------------------------------------


def time_studies(params, studies, repeats=1):
    """Per-study wall times in milliseconds (each study predicted alone)."""
    A.video_predict(params, studies[:1])  # warm-up
    times = []
    for _ in range(repeats):
        for st in studies:
            t0 = time.perf_counter()
            A.video_predict(params, [st])
            times.append((time.perf_counter() - t0) * 1e3)
    return np.array(times)


def cmd_benchmark(args, threads):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = D.Manifest.load(args.manifest)
    models = []
    if args.checkpoint:
        for path in args.checkpoint:
            kind, params, _, _ = load_any(path)
            if kind != "video" or params.config.head == "view":
                raise UsageError(f"{path} is not a video diagnosis checkpoint")
            models.append((params.config.scheme, params, str(path)))
    else:
        for scheme in args.schemes.split(","):
            args.aggregation = scheme
            cfg = video_config(args)
            models.append((scheme, A.build_video_model(cfg, seed=args.seed, dtype=dtype_of(args.dtype)), "untrained"))
    rows = []
    clip_cache = {}
    for scheme, params, source in models:
        cfg = params.config
        key = (cfg.input_size, np.dtype(params.dtype).str)
        if key not in clip_cache:
            clip_cache[key] = D.load_view_clips(manifest, args.split, cfg.input_size, args.duration, args.seed, True,
                                                threads, params.dtype)
        studies = studies_from(clip_cache[key], cfg.head)
        if args.limit:
            studies = studies[: args.limit]
        times = time_studies(params, studies, args.repeats)
        acc = A.video_accuracy(params, studies) if source != "untrained" else None
        rows.append({"scheme": scheme, "source": source, "studies": len(studies), "mean_ms": float(times.mean()),
                     "median_ms": float(np.median(times)), "accuracy": acc})
    with open(out / "benchmark.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    write_run_config(out, args, threads=threads)
    for r in rows:
        print(f"{r['scheme']:>9}  mean {r['mean_ms']:8.2f} ms  median {r['median_ms']:8.2f} ms  acc {r['accuracy']}")


# -- parser ---------------------------------------------------------------------------


def add_common(p):
    p.add_argument("--config", help="run_config.json from an earlier run; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def add_model_flags(p):
    p.add_argument("--arch", choices=ARCHS, default="mc-dsc")
    p.add_argument("--head", choices=tuple(HEAD_NAMES), default="binary")
    p.add_argument("--aggregation", choices=A.SCHEMES, default="temporal")
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--conv-layers", type=int, default=5)
    p.add_argument("--width", type=float, default=None, help="width multiplier (default from --arch)")
    p.add_argument("--fc1", type=int, default=None)
    p.add_argument("--fc2", type=int, default=None)
    p.add_argument("--rnn-hidden", type=int, default=64)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--duration", type=float, default=0.8, help="clip crop length in seconds")


def build_parser():
    parser = Parser(prog="mvecho", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("generate", help="render a synthetic phantom dataset")
    add_common(p)
    p.add_argument("--spec", help="phantom spec JSON (default: built-in)")
    p.add_argument("--n-per-class", type=int, help="studies per label (default 10, or sum of --split-counts)")
    p.add_argument("--split-counts", help="train,val,test study counts (default 80/10/10 percent)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a key-frame, video or view model")
    add_common(p)
    add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("keyframe", "video", "view"), default="keyframe")
    p.add_argument("--keyframe-loss", type=float, default=1.0, help="weight of the key-frame attention loss")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--augment-factor", type=int, default=0, help="virtual copies per positive training study")
    p.add_argument("--head-only", action="store_true", help="freeze everything but the classifier head")
    p.add_argument("--init", help="key-frame checkpoint to start from (binary heads migrate to three-class)")
    p.add_argument("--resume", help="last.ckpt to continue from")
    p.add_argument("--recrop", action="store_true", help="draw new clip windows every epoch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, AUC and confusion matrix on a split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--duration", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="diagnose one study from a directory of clips")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clips", required=True, help="directory with one sub-directory of PNG frames per clip")
    p.add_argument("--geometry", help="geometry JSON (default: <clips>/geometry.json if present)")
    p.add_argument("--unordered-views", action="store_true", help="route clips to views with --router")
    p.add_argument("--router", help="view classifier checkpoint")
    p.add_argument("--out", help="prediction JSON path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("occlude", help="occlusion heat map for one study")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--subject")
    p.add_argument("--view", default="A4C")
    p.add_argument("--box", type=int, default=4)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--scale", type=int, default=4, help="heat map upscaling for viewing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("benchmark", help="per-study latency of the aggregation schemes")
    add_common(p)
    add_model_flags(p)
    p.set_defaults(arch="mb-dsc-fifth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--checkpoint", action="append", help="trained video checkpoint (repeatable)")
    p.add_argument("--schemes", default=",".join(A.SCHEMES), help="schemes to time with untrained models")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--limit", type=int, default=0, help="time at most this many studies")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            saved = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from None
        if saved.get("command") not in (None, args.command):
            raise UsageError(f"{args.config} is for {saved['command']!r}, not {args.command!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in saved.items() if k in known and k not in ("config", "func")})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        threads = resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            args.func(args, threads)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
