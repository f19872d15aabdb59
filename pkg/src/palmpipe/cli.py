"""Command-line entry point.

Every subcommand accepts the global flags ``--config`` (flat JSON object of
pipeline settings), ``--seed``, ``--jobs`` and ``--out``. Settings resolve as
built-in defaults < config file < command-line flags. Exit codes: 0 success,
1 runtime failure, 2 usage error. ``PALMPIPE_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .errors import PalmError
from .evaluation import age_breakdown, export_report, generate_pairs, read_scores, summarize
from .features import PATCH_IDS, read_embedding
from .fusion import fuse_records
from .gallery import GalleryEntry, default_enrolled_at, enroll_file, load_gallery
from .manifest import Manifest, ManifestRow, read_manifest
from .pipeline import PipelineConfig, embed, prepare_manifest, realign_context, score_pairs_views, write_artifacts

log = logging.getLogger("palmpipe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# ------------------------------------------------------------------ config

CONFIG_KEYS = set(PipelineConfig.field_names())


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise UsageError("config must be a flat JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve_config(args) -> PipelineConfig:
    values = load_config(args.config) if getattr(args, "config", None) else {}
    flags = {
        "keypoints": getattr(args, "keypoints", None),
        "seed": getattr(args, "seed", None),
        "threshold": getattr(args, "threshold", None),
        "grid_n": getattr(args, "grid_n", None),
        "radius": getattr(args, "radius", None),
        "lam": getattr(args, "lam", None),
        "block": getattr(args, "block", None),
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    for flag, key in (("no_enhance", "enhance"), ("no_tps", "tps"), ("no_ensemble", "ensemble")):
        if getattr(args, flag, False):
            values[key] = False
    types = {f.name: f.type for f in fields(PipelineConfig)}
    try:
        for k, v in values.items():
            if types[k] in ("bool", bool) and not isinstance(v, bool):
                raise ValueError(f"{k} must be true or false")
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from . import synth

    _need(args, "out")
    if args.benchmark:
        cfg = synth.benchmark_config(args.benchmark)
        args.subjects = args.subjects or synth.BENCHMARK_SUBJECTS
        args.captures = args.captures or synth.BENCHMARK_CAPTURES
        if args.seed is None:
            args.seed = synth.BENCHMARK_SEED
    else:
        _need(args, "subjects")
        _need(args, "captures")
        cfg = synth.DatasetConfig()
    if args.subjects < 2 or args.captures < 2:
        raise UsageError("--subjects and --captures must be at least 2")
    cfg = replace(cfg, size=args.size, left_probability=args.left_probability)
    ranges = {}
    if args.tps_jitter is not None:
        ranges["tps_jitter_px"] = args.tps_jitter
    if args.blur is not None:
        ranges["blur_sigma"] = (args.blur[0], args.blur[-1])
    if args.noise is not None:
        ranges["noise_sigma"] = (args.noise[0], args.noise[-1])
    if args.shading is not None:
        ranges["shading"] = args.shading
    if args.cluttered is not None:
        ranges["cluttered_probability"] = args.cluttered
    try:
        cfg = synth.with_ranges(cfg, **ranges)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = synth.generate_dataset(args.subjects, args.captures, _seed(args), args.out, cfg, jobs=args.jobs)
    print(manifest)
    return 0


def _seed(args) -> int:
    if args.seed is None:
        raise UsageError("--seed is required")
    return args.seed


def _need(args, name):
    if getattr(args, name, None) is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")


def _single_manifest(args) -> Manifest:
    """Manifest from --manifest, or an ad-hoc one from --image."""
    if args.manifest:
        return read_manifest(args.manifest)
    if not args.image:
        raise UsageError("give --manifest or at least one --image")
    if args.keypoint_file and len(args.keypoint_file) != len(args.image):
        raise UsageError("--keypoint-file must be given once per --image")
    rows = []
    for k, img in enumerate(args.image):
        kp = args.keypoint_file[k] if args.keypoint_file else ""
        cid = Path(img).stem
        rows.append(ManifestRow(args.subject or cid, cid, args.hand_side, None, str(Path(img).resolve()), str(Path(kp).resolve()) if kp else ""))
    return Manifest(tuple(rows), Path("/"))


def cmd_pipeline(args) -> int:
    _need(args, "out")
    cfg = resolve_config(args)
    manifest = _single_manifest(args)
    prepared = prepare_manifest(manifest, cfg, args.jobs)
    if args.reference:
        if args.reference in prepared.failures:
            raise PalmError(f"reference capture {args.reference} failed: {prepared.failures[args.reference]}")
        if args.reference not in prepared.contexts:
            raise UsageError(f"unknown reference capture {args.reference}")
        if cfg.tps:
            ref = prepared.contexts[args.reference]
            for cid in sorted(prepared.contexts):
                if cid != args.reference:
                    prepared.embeddings[cid] = embed(realign_context(prepared.contexts[cid], ref, cfg), cfg)
    write_artifacts(prepared, args.out, save_roi=args.save_roi)
    status = {
        "config": cfg.to_dict(),
        "prepared": sorted(prepared.embeddings),
        "failed": {k: prepared.failures[k] for k in sorted(prepared.failures)},
    }
    (Path(args.out) / "pipeline.json").write_text(_dump(status) + "\n", encoding="utf-8")
    return 1 if prepared.failures else 0


def cmd_eval(args) -> int:
    _need(args, "out")
    _need(args, "manifest")
    cfg = resolve_config(args)
    manifest = read_manifest(args.manifest)
    pairs = generate_pairs(manifest.rows, args.policy, args.cap, cfg.seed)
    prepared = prepare_manifest(manifest, cfg, args.jobs)
    views = score_pairs_views(pairs, prepared, cfg, args.jobs)
    records = views["fused"]
    ages = {r.capture_id: r.age_months for r in manifest.rows}
    extra = age_breakdown(records, ages.get)
    if "whole" in views:
        whole = summarize(views["whole"])
        extra.update({f"whole_only.{k}": v for k, v in whole.items() if k.startswith(("tar", "eer"))})
    extra["failed_captures"] = len(prepared.failures)
    extra.update(impostor_policy=args.policy, impostor_cap=args.cap, impostor_seed=cfg.seed)
    summary = export_report(records, args.out, extra)
    print(_dump(summary))
    return 1 if prepared.failures else 0


def cmd_fuse(args) -> int:
    _need(args, "out")
    primary = read_scores(args.primary)
    external = read_scores(args.external)
    fused, info = fuse_records(primary, external, args.far)
    summary = export_report(fused, args.out, info)
    print(_dump(summary))
    return 0


def _probe_embeddings(args, cfg: PipelineConfig):
    """Five embeddings from --embeddings files or a freshly prepared --image/--manifest capture."""
    if args.embeddings:
        base = Path(args.embeddings)
        if base.is_dir():
            return _dir_embeddings(base, args.capture)
        return [read_embedding(base.parent / f"{base.name}.{p}.emb") for p in PATCH_IDS]
    manifest = _single_manifest(args)
    rows = [r for r in manifest.rows if args.capture in (None, r.capture_id)]
    if len(rows) != 1:
        raise UsageError("select exactly one probe capture (--capture)")
    prepared = prepare_manifest(manifest, replace(cfg, ensemble=True), rows=rows)
    if prepared.failures:
        raise PalmError(next(iter(prepared.failures.values())))
    return prepared.embeddings[rows[0].capture_id]


def _dir_embeddings(base: Path, capture):
    if capture is None:
        raise UsageError("--capture is required with an embeddings directory")
    return [read_embedding(base / f"{capture}.{p}.emb") for p in PATCH_IDS]


def cmd_enroll(args) -> int:
    if not args.server:
        _need(args, "gallery")
    cfg = replace(resolve_config(args), ensemble=True)
    at = args.enrolled_at if args.enrolled_at is not None else default_enrolled_at()
    manifest = _single_manifest(args)
    rows = [r for r in manifest.rows if not args.capture or r.capture_id in args.capture]
    if not rows:
        raise UsageError("no captures selected for enrollment")
    prepared = prepare_manifest(manifest, cfg, args.jobs, rows=rows)
    enrolled = []
    for r in rows:
        if r.capture_id not in prepared.embeddings:
            continue
        entry = GalleryEntry(r.subject_id, r.capture_id, r.hand_side, tuple(prepared.embeddings[r.capture_id]), r.age_months, at)
        if args.server:
            _post(args.server, "/enroll", _enroll_body(entry))
        else:
            enroll_file(args.gallery, entry)
        enrolled.append(r.capture_id)
    print(_dump({"enrolled": enrolled, "failed": sorted(prepared.failures)}))
    return 1 if prepared.failures else 0


def _enroll_body(entry: GalleryEntry) -> dict:
    from .schemas import encode_embedding

    return {
        "subject_id": entry.subject_id,
        "capture_id": entry.capture_id,
        "hand_side": entry.hand_side,
        "age_months": entry.age_months,
        "enrolled_at": entry.enrolled_at,
        "embeddings": [encode_embedding(e) for e in entry.embeddings],
    }


def _post(server: str, path: str, body: dict) -> dict:
    import httpx

    try:
        resp = httpx.post(server.rstrip("/") + path, json=body, timeout=60.0)
    except httpx.HTTPError as exc:
        raise PalmError(f"cannot reach {server}: {exc}") from exc
    data = resp.json()
    if resp.status_code >= 400:
        raise PalmError(f"{data.get('code', resp.status_code)}: {data.get('detail', '')}")
    return data


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    probe = _probe_embeddings(args, cfg)
    if not cfg.ensemble:
        probe = probe[:1]
    if args.server:
        from .schemas import encode_embedding

        data = _post(args.server, "/verify", {"subject_id": args.subject, "embeddings": [encode_embedding(e) for e in probe], "threshold": cfg.threshold})
        decision, score = data["decision"], data["score"]
    else:
        _need(args, "gallery")
        decision, score = load_gallery(args.gallery).verify(args.subject, probe, cfg.threshold, ensemble=cfg.ensemble)
    print(_dump({"subject_id": args.subject, "decision": decision, "score": score, "threshold": cfg.threshold}))
    return 0


def cmd_identify(args) -> int:
    cfg = resolve_config(args)
    probe = _probe_embeddings(args, cfg)
    if not cfg.ensemble:
        probe = probe[:1]
    if args.server:
        from .schemas import encode_embedding

        data = _post(args.server, "/identify", {"embeddings": [encode_embedding(e) for e in probe], "n": args.top})
        ranked = [(c["subject_id"], c["score"]) for c in data["candidates"]]
    else:
        _need(args, "gallery")
        ranked = load_gallery(args.gallery).identify_topn(probe, args.top, ensemble=cfg.ensemble)
    print(_dump({"candidates": [{"rank": k + 1, "subject_id": s, "score": v} for k, (s, v) in enumerate(ranked)]}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    _need(args, "gallery")
    uvicorn.run(create_app(args.gallery), host=args.host, port=args.port, log_level=os.environ.get("PALMPIPE_LOG", "warning").lower())
    return 0


# ------------------------------------------------------------------ parser

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d, help="flat JSON file of pipeline settings")
    p.add_argument("--seed", type=int, default=d, help="seed for every random draw")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker processes")
    p.add_argument("--out", default=d, help="output directory")
    return p


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--keypoints", choices=("file", "heuristic"), help="keypoint provider")
    p.add_argument("--no-enhance", action="store_true")
    p.add_argument("--no-tps", action="store_true")
    p.add_argument("--no-ensemble", action="store_true")
    p.add_argument("--grid-n", type=int)
    p.add_argument("--radius", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--block", type=int)
    p.add_argument("--threshold", type=float)


def _input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--image", action="append", help="image file (repeatable) instead of a manifest")
    p.add_argument("--keypoint-file", action="append", help="keypoint JSON for each --image")
    p.add_argument("--hand-side", choices=("left", "right"), default="right")
    p.add_argument("--subject", help="subject id for --image inputs")


SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="palmpipe", description="Contactless palmprint matching pipeline.", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_global_flags(True)]

    p = sub.add_parser("synth", parents=g, help="generate a synthetic dataset")
    p.add_argument("--benchmark", choices=("base", "distorted", "blurred"), help="published benchmark settings; seed, subjects and captures default to the benchmark's")
    p.add_argument("--subjects", type=int)
    p.add_argument("--captures", type=int)
    p.add_argument("--size", type=int, default=384)
    p.add_argument("--left-probability", type=float, default=0.5)
    p.add_argument("--tps-jitter", type=float)
    p.add_argument("--blur", type=float, nargs="+", metavar="SIGMA", help="fixed value or min max")
    p.add_argument("--noise", type=float, nargs="+", metavar="SIGMA", help="fixed value or min max")
    p.add_argument("--shading", type=float)
    p.add_argument("--cluttered", type=float, metavar="P", help="probability of a cluttered background")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", parents=g, help="write ROI embeddings for every capture")
    _input_flags(p)
    _pipeline_flags(p)
    p.add_argument("--reference", help="capture id every other capture is re-aligned onto")
    p.add_argument("--save-roi", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", parents=g, help="score all pairs of a manifest and write a report")
    p.add_argument("--manifest")
    _pipeline_flags(p)
    p.add_argument("--policy", choices=("first-capture", "all"), default="first-capture")
    p.add_argument("--cap", type=int, default=1_000_000, help="maximum impostor pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", parents=g, help="sum-fuse two score files")
    p.add_argument("--primary", required=True, help="scores.csv with scores in [0, 1]")
    p.add_argument("--external", required=True, help="scores.csv with scores in [0, 100]")
    p.add_argument("--far", type=float, default=0.001, help="operating FAR of the contingency tables")
    p.set_defaults(func=cmd_fuse)

    for name, func, helptext in (
        ("enroll", cmd_enroll, "add captures to a gallery"),
        ("verify", cmd_verify, "1:1 check of a probe against a subject"),
        ("identify", cmd_identify, "rank gallery subjects for a probe"),
    ):
        p = sub.add_parser(name, parents=g, help=helptext)
        p.add_argument("--gallery", help="gallery file (.plmg)")
        p.add_argument("--server", help="base URL of a running 'palmpipe serve' instead of a local gallery")
        _input_flags(p)
        _pipeline_flags(p)
        if name == "enroll":
            p.add_argument("--capture", action="append", help="only enroll these capture ids")
            p.add_argument("--enrolled-at", type=int, help="enrollment time, Unix seconds (default SOURCE_DATE_EPOCH or 0)")
        else:
            p.add_argument("--capture", help="probe capture id within --manifest or --embeddings")
            p.add_argument("--embeddings", help="directory of .emb files, or a <dir>/<capture> prefix")
        if name == "identify":
            p.add_argument("--top", type=int, default=5)
        p.set_defaults(func=func)

    p = sub.add_parser("serve", parents=g, help="serve a gallery over HTTP")
    p.add_argument("--gallery", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    SUBPARSERS.update(sub.choices)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("PALMPIPE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        if args.command == "verify" and not args.subject:
            raise UsageError("verify needs --subject")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        if args is not None:
            SUBPARSERS[args.command].print_usage(sys.stderr)
        print(str(exc), file=sys.stderr)
        return 2
    except PalmError as exc:
        log.error("%s: %s", exc.code, exc)
        return 1
    except OSError as exc:
        log.error("IoError: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
