"""Command-line entry point: gen-data, train, fuse, eval, judge.

Exit codes: 0 ok, 2 config or parse error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ditfuse import imaging, m3, metrics, model, train
from ditfuse import judge as J
from ditfuse import prompt as P
from ditfuse.flow import NonFiniteState, null_condition, sample_euler
from ditfuse.tensor import NonFiniteError

logger = logging.getLogger("ditfuse")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

DEFAULT_CONFIG: dict = {
    "model": {"d_model": 64, "n_layers": 2, "n_heads": 4, "latent_factor": 2, "patch": 2, "lora_rank": 8, "lora_alpha": 0.5},
    "train": {"lr": 1e-4, "batch": 64, "epochs": 2, "cond_dropout": 0.01, "seed": 0, "trainable": "lora", "max_steps": None},
    "data": {
        "mix_weights": dict(m3.DEFAULT_WEIGHTS),
        "grid_sizes": [16, 32, 64],
        "joint_fraction": 0.25,
        "total": 1000,
        "image_size": 32,
    },
    "degrade": {"blur_sigma": [1.0, 3.0], "noise_sigma": [0.05, 0.2]},
    "sample": {"steps": 32, "guidance": 1.0},
}


class ConfigError(ValueError):
    pass


class CliIOError(OSError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            # mix_weights replaces wholesale so that a category can be omitted
            out[key] = _merge(base[key], value, where + ".") if key != "mix_weights" else _check_weights(value)
        else:
            out[key] = value
    return out


def _check_weights(w: dict) -> dict:
    unknown = set(w) - set(m3.CATEGORIES)
    if unknown:
        raise ConfigError(f"unknown mix_weights categories {sorted(unknown)}")
    return {c: float(w.get(c, 0.0)) for c in m3.CATEGORIES}


def _validate(cfg: dict) -> None:
    try:
        model.ModelConfig.from_dict(cfg["model"])
        train_cfg = cfg["train"]
        if train_cfg["trainable"] not in ("lora", "full"):
            raise ConfigError("train.trainable must be 'lora' or 'full'")
        if not float(train_cfg["lr"]) >= 0 or int(train_cfg["batch"]) < 1 or int(train_cfg["epochs"]) < 0:
            raise ConfigError("train.lr must be >= 0, batch >= 1, epochs >= 0")
        if not 0.0 <= float(train_cfg["cond_dropout"]) <= 1.0:
            raise ConfigError("train.cond_dropout must lie in [0, 1]")
        data = cfg["data"]
        w = np.asarray(list(data["mix_weights"].values()), dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("data.mix_weights must be non-negative and sum to 1")
        if not 0.0 <= float(data["joint_fraction"]) <= 1.0:
            raise ConfigError("data.joint_fraction must lie in [0, 1]")
        if int(data["total"]) < 0 or int(data["image_size"]) < 1 or not data["grid_sizes"]:
            raise ConfigError("data.total, data.image_size and data.grid_sizes are invalid")
        for key in ("blur_sigma", "noise_sigma"):
            lo, hi = cfg["degrade"][key]
            if not 0 <= lo <= hi:
                raise ConfigError(f"degrade.{key} must be [lo, hi] with 0 <= lo <= hi")
        if int(cfg["sample"]["steps"]) < 1:
            raise ConfigError("sample.steps must be >= 1")
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | None) -> dict:
    override: dict = {}
    if path is not None:
        try:
            override = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, override)
    _validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    raw = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def announce(cfg: dict) -> None:
    print(f"config_hash {config_hash(cfg)}", flush=True)
    logger.info("resolved config %s", json.dumps(cfg, sort_keys=True))


def model_config(cfg: dict) -> model.ModelConfig:
    return model.ModelConfig.from_dict(cfg["model"])


def _ranges(cfg: dict) -> m3.DegradeRanges:
    return m3.DegradeRanges(tuple(cfg["degrade"]["blur_sigma"]), tuple(cfg["degrade"]["noise_sigma"]))


def _jobs(n: int | None) -> int:
    return max(1, n if n else (os.cpu_count() or 1))


def _pool_map(fn, items: list, jobs: int) -> list:
    """Order-preserving map; runs in-process for one job."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _list_images(directory: Path) -> list[str]:
    if not directory.is_dir():
        raise CliIOError(f"{directory} is not a directory")
    return sorted(p.name for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------- gen-data


def _gen_one(job: tuple) -> None:
    rec, src_path, out, size, grids, joint, ranges = job
    source = imaging.load_png(src_path, size=size)
    a, b, target, _ = m3.synthesize_record(rec, source, grids, joint, ranges)
    m3.write_sample(Path(out), rec, a, b, target)


def cmd_gen_data(args, cfg: dict) -> int:
    images = Path(args.images)
    names = _list_images(images)
    if not names:
        raise CliIOError(f"no images in {images}")
    data = cfg["data"]
    size = int(data["image_size"])
    grids = list(data["grid_sizes"])
    if not m3.valid_grids(size, size, grids):
        raise ConfigError(f"no grid size in {grids} divides image_size {size}")
    pools = {c: names for c in m3.CATEGORIES}
    manifest = m3.mix_manifest(pools, data["mix_weights"], int(data["total"]), args.seed)
    out = Path(args.out)
    for cat in m3.CATEGORIES:
        (out / "data" / cat).mkdir(parents=True, exist_ok=True)
    ranges = _ranges(cfg)
    jobs = [
        (rec, str(images / manifest.sources[rec.id]), str(out), size, grids, float(data["joint_fraction"]), ranges)
        for rec in manifest.records
    ]
    _pool_map(_gen_one, jobs, _jobs(args.jobs))
    manifest.write(out / "manifest.jsonl")
    print(json.dumps(manifest.counts, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args, cfg: dict) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = m3.Manifest.read(manifest_path)
    except OSError as exc:
        raise CliIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"malformed manifest {manifest_path}: {exc}") from exc
    if len(manifest) == 0:
        raise ConfigError("manifest is empty")
    mcfg = model_config(cfg)
    if args.resume:
        state = train.load_checkpoint(args.resume)
        if state.config.get("model") != cfg["model"]:
            raise ConfigError("resumed checkpoint was trained with a different model config")
        state.config = cfg
    else:
        state = train.new_state(mcfg, cfg["train"], config=cfg)
    codec = model.Codec(mcfg.latent_factor, mcfg.codec_seed)
    samples = train.load_samples(manifest, manifest_path.parent, codec)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".loss.csv")
    max_steps = cfg["train"]["max_steps"]
    losses = train.run_training(state, samples, cfg["train"], max_steps=max_steps, log_path=log_path)
    train.save_checkpoint(state, args.out)
    if losses:
        print(f"steps {state.step} first_loss {losses[0]:.6g} last_loss {losses[-1]:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- fuse


def fuse_image(state: train.TrainerState, img_a, img_b, prompt_text: str, steps: int, guidance: float, seed: int) -> np.ndarray:
    P.parse_prompt(prompt_text)
    mcfg = model.ModelConfig.from_dict(state.config["model"])
    codec = model.Codec(mcfg.latent_factor, mcfg.codec_seed)
    lat = (codec.encode(img_a), codec.encode(img_b))
    tokens = P.tokenize(prompt_text)
    v = train.velocity_fn(state)
    return sample_euler(
        v,
        (tokens, lat),
        lat[0].shape,
        steps=steps,
        guidance=guidance,
        rng=np.random.default_rng(seed),
        uncond=(null_condition(tokens), lat),
        decode=codec.decode,
    )


def cmd_fuse(args, cfg: dict) -> int:
    text = P.base_template(args.prompt) if args.template == "base" else args.prompt
    P.parse_prompt(text)
    state = train.load_checkpoint(args.ckpt)
    size = state.config.get("data", {}).get("image_size")
    try:
        a = imaging.load_png(args.image_a, size=size)
        b = imaging.load_png(args.image_b, size=size)
    except OSError as exc:
        raise CliIOError(str(exc)) from exc
    steps = args.steps if args.steps is not None else int(cfg["sample"]["steps"])
    guidance = args.guidance if args.guidance is not None else float(cfg["sample"]["guidance"])
    fused = fuse_image(state, a, b, text, steps, guidance, args.seed)
    imaging.save_png(fused, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _eval_one(job: tuple) -> dict:
    sid, f, a, b = job
    row = {"id": sid}
    row.update(metrics.fusion_row(imaging.load_png(f), imaging.load_png(a), imaging.load_png(b)))
    return row


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def cmd_eval(args, cfg: dict) -> int:
    fused, src_a, src_b = Path(args.fused), Path(args.src_a), Path(args.src_b)
    names = _list_images(fused)
    if not names:
        raise CliIOError(f"no images in {fused}")
    jobs = []
    for name in names:
        pa, pb = src_a / name, src_b / name
        if not pa.exists() or not pb.exists():
            raise CliIOError(f"{name} missing from a source directory")
        jobs.append((Path(name).stem, str(fused / name), str(pa), str(pb)))
    rows = _pool_map(_eval_one, jobs, _jobs(args.jobs))
    cols = metrics.FUSION_COLUMNS
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *cols])
        for r in rows:
            w.writerow([r["id"], *(_fmt(r[c]) for c in cols)])
        w.writerow(["MEAN", *(_fmt(np.mean([r[c] for r in rows])) for c in cols)])
    return EXIT_OK


# ---------------------------------------------------------------- judge


def load_pairs(pairs: Path, need_gt: bool) -> tuple[list[J.JudgeItem], dict]:
    try:
        labels = json.loads((pairs / "labels.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliIOError(f"cannot read {pairs / 'labels.json'}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"labels.json is not valid JSON: {exc}") from exc
    items, gts = [], {}
    for sid in sorted(labels):
        try:
            fused = imaging.load_png(pairs / f"{sid}_fused.png")
            seg = imaging.load_png(pairs / f"{sid}_seg.png")
            if need_gt:
                gts[sid] = imaging.load_mask_png(pairs / f"{sid}_gt.png")
        except OSError as exc:
            raise CliIOError(f"missing images for {sid}: {exc}") from exc
        items.append(J.JudgeItem(sid, fused, seg, labels[sid]))
    return items, gts


def cmd_judge(args, cfg: dict) -> int:
    pairs = Path(args.pairs)
    items, gts = load_pairs(pairs, need_gt=args.backend == "stub")
    if not items:
        raise CliIOError(f"no pairs listed in {pairs / 'labels.json'}")
    if args.backend == "stub":
        backend = J.StubBackend(gts)
    else:
        if not args.endpoint:
            raise ConfigError("--endpoint is required for the http backend")
        backend = J.HttpJudgeBackend(args.endpoint, timeout=args.timeout)
    try:
        verdicts = J.judge_many(backend, items, max_in_flight=args.max_in_flight)
    except J.JudgeError as exc:
        raise CliIOError(f"judge backend failed: {exc}") from exc
    report = J.aggregate_ratios(verdicts)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "precision_ok", "recall_ok", "iou_ok"])
        for v in verdicts:
            w.writerow([v.id, v.label, int(v.precision_ok), int(v.recall_ok), int(v.iou_ok)])
        w.writerow(["RATIO", report.n, repr(report.p_ratio), repr(report.r_ratio), repr(report.i_ratio)])
    print(f"p_ratio {report.p_ratio:.4f} r_ratio {report.r_ratio:.4f} i_ratio {report.i_ratio:.4f} n {report.n}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ditfuse", description="Desk-scale prompt-driven image fusion toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesise a mixed training manifest and its PNG tree")
    g.add_argument("--config")
    g.add_argument("--images", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse two images under a prompt")
    f.add_argument("--config")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--image-a", required=True)
    f.add_argument("--image-b", required=True)
    f.add_argument("--prompt", required=True)
    f.add_argument("--template", choices=("base",), help="wrap a bare instruction in the canonical image slots")
    f.add_argument("--steps", type=int)
    f.add_argument("--guidance", type=float)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="fusion statistics for a directory of fused images")
    e.add_argument("--config")
    e.add_argument("--fused", required=True)
    e.add_argument("--src-a", required=True)
    e.add_argument("--src-b", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("judge", help="three-question segmentation judging")
    j.add_argument("--config")
    j.add_argument("--pairs", required=True)
    j.add_argument("--backend", choices=("stub", "http"), default="stub")
    j.add_argument("--endpoint")
    j.add_argument("--timeout", type=float, default=30.0)
    j.add_argument("--max-in-flight", type=int, default=4)
    j.add_argument("--out", required=True)
    j.set_defaults(func=cmd_judge)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        announce(cfg)
        return args.func(args, cfg)
    except (ConfigError, P.PromptError, m3.IndivisibleGrid, m3.EmptyPool) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, train.NonFiniteLoss, NonFiniteState) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, train.CheckpointError, imaging.ShapeMismatch, J.DegenerateGT) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
