"""``pansearch`` command line: data generation, training, evaluation, inference and the ablation grid.

Paths default to ``$PANSEARCH_DATA_DIR/data`` (phantoms + manifest) and
``$PANSEARCH_DATA_DIR/runs`` (checkpoints, logs, reports). Settings come from
defaults, then ``--config FILE``, then ``--set key=value`` and the dedicated
flags, later sources winning. Run with ``OMP_NUM_THREADS=1`` (and the
matching BLAS variables) for bit-identical repeat runs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dqn, pipeline
from .config import (
    SCHEMA_VERSION,
    ConfigError,
    RunConfig,
    default_root,
    load_run_config,
    parse_split,
    read_csv,
    write_csv,
    write_json,
)
from .deform_unet import build as build_unet
from .deform_unet import load_model, save_model, train_segmenter
from .geometry import MOVE_ACTIONS
from .nn.checkpoint import CheckpointError, file_sha256
from .synthdata import (
    PhantomConfig,
    PhantomError,
    ViewAxis,
    VolumeFormatError,
    clip_rescale,
    foreground_fractions,
    generate_phantom,
    read_volume,
    resize_bilinear,
    resize_nearest,
    slice_view,
    write_volume,
)

log = logging.getLogger("pansearch")

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("volume_id", "seed", "volume_file", "label_file", "dims", "target_voxels", "fraction_min", "fraction_max")
VIEW_NAMES = [v.value for v in pipeline.VIEWS]


class CommandError(RuntimeError):
    """A command cannot run with the given inputs."""


# -- shared plumbing ---------------------------------------------------------


@dataclasses.dataclass
class Context:
    cfg: RunConfig
    data_dir: Path
    run_dir: Path
    split: tuple[int, int] | None
    force: bool
    jobs: int

    def stamp(self, scope: str | None = None) -> dict[str, str]:
        return self.cfg.stamp(scope)

    def echo(self, scope: str | None = None) -> dict[str, str]:
        return self.cfg.items(scope)


def _views(arg: str) -> list[ViewAxis]:
    return list(pipeline.VIEWS) if arg == "all" else [ViewAxis(arg)]


def load_manifest(data_dir: Path) -> list[dict[str, str]]:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise CommandError(f"no dataset manifest at {path}; run `pansearch gen-data` first")
    rows = read_csv(path)
    if not rows:
        raise CommandError(f"manifest {path} lists no volumes")
    return rows


def select_rows(ctx: Context, purpose: str) -> list[dict[str, str]]:
    """Manifest rows for ``purpose`` ("train" or "eval") under the active ``--split``."""
    rows = load_manifest(ctx.data_dir)
    if ctx.split is None:
        return rows
    k, n = ctx.split
    picked = [r for i, r in enumerate(rows) if (i % n == k) == (purpose == "eval")]
    if not picked:
        raise CommandError(f"split {k}/{n} leaves no {purpose} volumes out of {len(rows)}")
    return picked


def load_pairs(ctx: Context, rows) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
    ids, vols, labs = [], [], []
    for r in rows:
        ids.append(r["volume_id"])
        vols.append(read_volume(ctx.data_dir / r["volume_file"]))
        labs.append(read_volume(ctx.data_dir / r["label_file"]))
    return ids, vols, labs


def _loc_path(ctx: Context, view: ViewAxis) -> Path:
    return ctx.run_dir / f"loc_{view.value}.ckpt"


def _seg_path(ctx: Context, view: ViewAxis) -> Path:
    return ctx.run_dir / f"seg_{view.value}.ckpt"


def _check_hash(ctx: Context, path: Path, meta: dict[str, str], scope: str | None = None) -> None:
    found, want = meta.get("config_hash"), ctx.cfg.hash(scope)
    if found != want:
        msg = f"{path} was written under config hash {found}, current config hashes to {want}"
        if not ctx.force:
            raise CommandError(msg + " (pass --force to use it anyway)")
        log.warning("%s; continuing because of --force", msg)


def load_agents(ctx: Context, views=pipeline.VIEWS) -> tuple[dict, dict[str, str]]:
    agents, hashes = {}, {}
    for view in views:
        path = _loc_path(ctx, view)
        if not path.is_file():
            raise CommandError(f"missing localizer checkpoint {path}; run `pansearch train-loc --view {view.value}`")
        net, env_cfg, meta = dqn.load_agent(path)
        if meta.get("view_axis") != view.value:
            raise pipeline.ViewMismatchError(f"{path} holds a {meta.get('view_axis')} agent, expected {view.value}")
        _check_hash(ctx, path, meta, "loc")
        agents[view] = pipeline.Agent(net, env_cfg, view, ctx.cfg.loc_side)
        hashes[path.name] = file_sha256(path)
    return agents, hashes


def load_segmenters(ctx: Context, localized: bool) -> tuple[dict, dict[str, str]]:
    models, hashes = {}, {}
    for view in pipeline.VIEWS:
        path = _seg_path(ctx, view)
        if not path.is_file():
            raise CommandError(f"missing segmenter checkpoint {path}; run `pansearch train-seg --view {view.value}`")
        model, meta = load_model(path)
        if meta.get("view_axis") != view.value:
            raise pipeline.ViewMismatchError(f"{path} holds a {meta.get('view_axis')} segmenter, expected {view.value}")
        if (meta.get("localization") == "on") != localized:
            raise CommandError(f"{path} was trained with localization={meta.get('localization')}; pass --no-loc consistently")
        _check_hash(ctx, path, meta)
        models[view] = model
        hashes[path.name] = file_sha256(path)
    return models, hashes


def _target_slices(vols_u8, labels, view: ViewAxis, side: int):
    """Target-containing slices of ``view``, resized to the localizer side when needed."""
    ims, ms = [], []
    for vol, lab in zip(vols_u8, labels):
        for img, m in zip(slice_view(vol, view), slice_view(lab, view)):
            if not m.any():
                continue
            img, m = _fit_slice(img, m, side)
            if m.any():
                ims.append(img)
                ms.append(m)
    return ims, ms


def _fit_slice(img: np.ndarray, mask: np.ndarray, side: int):
    if img.shape == (side, side):
        return img, mask
    small = np.floor(resize_bilinear(img.astype(np.float64), side, side) + 0.5).astype(np.uint8)
    return small, resize_nearest(mask, side, side)


def _loc_training_set(ctx: Context, view: ViewAxis):
    _, vols, labs = load_pairs(ctx, select_rows(ctx, "train"))
    ims, ms = _target_slices([clip_rescale(v) for v in vols], labs, view, ctx.cfg.loc_side)
    if not ims:
        raise CommandError(f"no {view.value} slices contain the target")
    return ims, ms


def train_agent(ctx: Context, view: ViewAxis, out_dir: Path) -> Path:
    ims, ms = _loc_training_set(ctx, view)
    log.info("train-loc %s: %d target slices, %d epochs", view.value, len(ims), ctx.cfg.dqn.epochs)
    net, rows = dqn.train_localizer(ims, ms, ctx.cfg.env, ctx.cfg.dqn)
    path = out_dir / f"loc_{view.value}.ckpt"
    dqn.save_agent(path, net, ctx.cfg.env, ctx.cfg.dqn, view.value, {**ctx.stamp("loc"), **_echo_meta(ctx, "loc")})
    write_csv(out_dir / f"loc_{view.value}_log.csv", rows, dqn.LOG_FIELDS, ctx.stamp("loc"))
    return path


def _echo_meta(ctx: Context, scope: str | None = None) -> dict[str, str]:
    return {f"config.{k}": v for k, v in ctx.echo(scope).items()}


def train_view_segmenter(
    ctx: Context, view: ViewAxis, agent, deformable: bool, out_path: Path, log_path: Path, stamp: dict[str, str]
) -> Path:
    _, vols, labs = load_pairs(ctx, select_rows(ctx, "train"))
    unet_cfg = dataclasses.replace(ctx.cfg.unet, deformable_encoder=deformable)
    xs, ys = pipeline.training_crops(
        [clip_rescale(v) for v in vols],
        labs,
        view,
        agent,
        unet_cfg.input_side,
        negative_fraction=ctx.cfg.seg_negative_fraction,
        seed=ctx.cfg.seed,
    )
    log.info("train-seg %s: %d crops, deformable=%s, localization=%s", view.value, len(xs), deformable, agent is not None)
    model, rows = train_segmenter(xs, ys, unet_cfg, ctx.cfg.seg, build_unet(unet_cfg))
    meta = {"view_axis": view.value, "localization": "on" if agent is not None else "off", **stamp, **_echo_meta(ctx)}
    save_model(out_path, model, meta)
    write_csv(log_path, rows, ("epoch", "train_dice", "val_dice", "lr"), stamp)
    return out_path


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args, ctx: Context) -> int:
    out = Path(args.out_dir) if args.out_dir else ctx.data_dir
    dims = tuple(int(v) for v in args.dims.lower().split("x"))
    if len(dims) != 3:
        raise ConfigError(f"--dims expects WxHxD, got {args.dims!r}")
    if args.count < 1:
        raise ConfigError("--count must be positive")
    base = PhantomConfig(
        dims=dims,
        target_fraction_range=(args.fraction_min, args.fraction_max),
        distractor_count=args.distractors,
        noise_std=args.noise_std,
    )
    base.validate()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create {out}: {exc}") from exc
    echo = {
        "dims": "x".join(map(str, dims)),
        "fraction_min": repr(args.fraction_min),
        "fraction_max": repr(args.fraction_max),
        "distractors": str(args.distractors),
        "noise_std": repr(args.noise_std),
        "seed": str(ctx.cfg.seed),
        "count": str(args.count),
    }
    stamp = {
        "schema_version": str(SCHEMA_VERSION),
        "config_hash": hashlib.sha256("".join(f"{k}={v}\n" for k, v in sorted(echo.items())).encode()).hexdigest()[:16],
    }
    rows = []
    for i in range(args.count):
        seed = ctx.cfg.seed + i
        vol, lab = generate_phantom(dataclasses.replace(base, seed=seed))
        vid = f"{i:04d}"
        vf, lf = f"vol_{vid}.psv", f"lab_{vid}.psv"
        write_volume(out / vf, vol)
        write_volume(out / lf, lab)
        fr = foreground_fractions(lab)
        fr = fr[fr > 0]
        rows.append(
            {
                "volume_id": vid,
                "seed": seed,
                "volume_file": vf,
                "label_file": lf,
                "dims": echo["dims"],
                "target_voxels": int(lab.sum()),
                "fraction_min": float(fr.min()),
                "fraction_max": float(fr.max()),
            }
        )
        log.info("gen-data %s seed %d: %d target voxels", vid, seed, int(lab.sum()))
    write_csv(out / MANIFEST, rows, MANIFEST_FIELDS, stamp)
    print(f"wrote {len(rows)} phantom pairs and {out / MANIFEST}")
    return 0


def cmd_train_loc(args, ctx: Context) -> int:
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    for view in _views(args.view):
        path = train_agent(ctx, view, ctx.run_dir)
        print(f"{view.value}: wrote {path}")
    return 0


def cmd_train_seg(args, ctx: Context) -> int:
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    for view in _views(args.view):
        agent = None if args.no_loc else load_agents(ctx, [view])[0][view]
        path = train_view_segmenter(
            ctx,
            view,
            agent,
            ctx.cfg.unet.deformable_encoder,
            _seg_path(ctx, view),
            ctx.run_dir / f"seg_{view.value}_log.csv",
            ctx.stamp(),
        )
        print(f"{view.value}: wrote {path}")
    return 0


EVAL_FIELDS = ["volume_id", "dsc", "both_empty"] + [
    f"{v}_{m}" for v in VIEW_NAMES for m in ("recall", "iou", "dsc")
]


def _progress(row) -> None:
    log.info("volume %s dsc %.4f", row["volume_id"], row["dsc"])


def cmd_eval(args, ctx: Context) -> int:
    agents, hashes = (None, {}) if args.no_loc else load_agents(ctx)
    models, seg_hashes = load_segmenters(ctx, not args.no_loc)
    ids, vols, labs = load_pairs(ctx, select_rows(ctx, "eval"))
    rows, summary = pipeline.evaluate_dataset(ids, vols, labs, agents, models, jobs=ctx.jobs, progress=_progress)
    prefix = args.prefix
    write_csv(ctx.run_dir / f"{prefix}.csv", rows, EVAL_FIELDS, ctx.stamp())
    payload = {
        **ctx.stamp(),
        "config": ctx.echo(),
        "checkpoints": {**hashes, **seg_hashes},
        "volumes": len(rows),
        "both_empty": sum(r["both_empty"] for r in rows),
        "dsc": summary,
        "localization": "off" if args.no_loc else "on",
    }
    write_json(ctx.run_dir / f"{prefix}.json", payload)
    print(f"DSC mean {summary['mean']:.4f} std {summary['std']:.4f} min {summary['min']:.4f} max {summary['max']:.4f} over {len(rows)} volumes")
    return 0


EPISODE_FIELDS = ("volume_id", "slice", "x0", "y0", "w", "h", "iou", "recall", "steps", "total_reward", "actions")


def cmd_eval_loc(args, ctx: Context) -> int:
    for view in _views(args.view):
        agents, hashes = load_agents(ctx, [view])
        agent = agents[view]
        ids, vols, labs = load_pairs(ctx, select_rows(ctx, args.subset))
        rows, recs = [], []
        ims_all, ms_all = [], []
        for vid, vol, lab in zip(ids, vols, labs):
            v8 = clip_rescale(vol)
            for k, (img, m) in enumerate(zip(slice_view(v8, view), slice_view(lab, view))):
                if not m.any():
                    continue
                img, m = _fit_slice(img, m, ctx.cfg.loc_side)
                if not m.any():
                    continue
                rec = dqn.run_episode(agent.net, img, m, agent.env_cfg)
                recs.append(rec)
                ims_all.append(img)
                ms_all.append(m)
                rows.append(
                    {
                        "volume_id": vid,
                        "slice": k,
                        **dict(zip(("x0", "y0", "w", "h"), map(int, rec.window))),
                        "iou": rec.iou,
                        "recall": rec.recall,
                        "steps": rec.steps,
                        "total_reward": rec.total_reward,
                        "actions": " ".join(str(a) for a in rec.actions),
                    }
                )
        if not recs:
            raise CommandError(f"no {view.value} evaluation slices contain the target")
        _, rand = dqn.evaluate_random(ims_all, ms_all, agent.env_cfg, seed=ctx.cfg.seed)
        greedy = dqn.summarize(r.recall for r in recs)
        stem = f"eval_loc_{view.value}" + ("_train" if args.subset == "train" else "")
        write_csv(ctx.run_dir / f"{stem}_episodes.csv", rows, EPISODE_FIELDS, ctx.stamp("loc"))
        payload = {
            **ctx.stamp("loc"),
            "config": ctx.echo("loc"),
            "checkpoints": hashes,
            "view_axis": view.value,
            "subset": args.subset,
            "slices": len(recs),
            "recall": greedy,
            "iou": dqn.summarize(r.iou for r in recs),
            "random_recall": rand,
        }
        write_json(ctx.run_dir / f"{stem}.json", payload)
        print(
            f"{view.value}: recall mean {greedy['mean']:.4f} std {greedy['std']:.4f} "
            f"min {greedy['min']:.4f} max {greedy['max']:.4f} (random {rand['mean']:.4f}) over {len(recs)} slices"
        )
    return 0


def cmd_infer(args, ctx: Context) -> int:
    agents, _ = (None, {}) if args.no_loc else load_agents(ctx)
    models, _ = load_segmenters(ctx, not args.no_loc)
    vol = read_volume(args.volume)
    if vol.dtype != np.int16:
        raise CommandError(f"{args.volume} is a label file; infer expects an intensity volume")
    fused, _ = pipeline.segment_volume(vol, agents, models)
    write_volume(args.out, fused)
    print(f"wrote {args.out}: {int(fused.sum())} foreground voxels")
    return 0


ABLATION_ROWS = (
    ("DRL localization + deformable", True, True),
    ("DRL localization + non-deformable", True, False),
    ("no localization + deformable", False, True),
    ("no localization + non-deformable", False, False),
)
ABLATION_FIELDS = ("configuration", "localization", "deformable", "mean", "std", "min", "max", "volumes")


def _reusable_agent(ctx: Context, view: ViewAxis):
    path = _loc_path(ctx, view)
    if not path.is_file():
        return None
    net, env_cfg, meta = dqn.load_agent(path)
    if meta.get("config_hash") != ctx.cfg.hash("loc") or meta.get("view_axis") != view.value:
        return None
    return pipeline.Agent(net, env_cfg, view, ctx.cfg.loc_side)


def _reusable_segmenter(ctx: Context, view: ViewAxis, localized: bool, deformable: bool):
    """The train-seg checkpoint for this view, if it was trained under this exact grid cell and config."""
    path = _seg_path(ctx, view)
    if not path.is_file():
        return None
    model, meta = load_model(path)
    same = (
        meta.get("config_hash") == ctx.cfg.hash()
        and meta.get("view_axis") == view.value
        and meta.get("localization") == ("on" if localized else "off")
        and model.cfg.deformable_encoder == deformable
    )
    return model if same else None


def cmd_ablate(args, ctx: Context) -> int:
    """Train and evaluate the localization x deformable grid on one shared split.

    Localizers and train-seg segmenters already in the run directory are reused
    when their config hash and grid cell match.
    """
    out = ctx.run_dir / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    agents = {}
    for view in pipeline.VIEWS:
        agent = _reusable_agent(ctx, view)
        if agent is None:
            path = train_agent(ctx, view, out)
            net, env_cfg, _ = dqn.load_agent(path)
            agent = pipeline.Agent(net, env_cfg, view, ctx.cfg.loc_side)
        else:
            log.info("ablate: reusing %s", _loc_path(ctx, view))
        agents[view] = agent
    ids, vols, labs = load_pairs(ctx, select_rows(ctx, "eval"))
    report, per_volume = [], []
    for label, localized, deformable in ABLATION_ROWS:
        tag = f"{'loc' if localized else 'noloc'}_{'deform' if deformable else 'plain'}"
        models = {}
        for view in pipeline.VIEWS:
            reused = _reusable_segmenter(ctx, view, localized, deformable)
            if reused is not None:
                log.info("ablate: reusing %s", _seg_path(ctx, view))
                models[view] = reused
                continue
            path = out / f"seg_{tag}_{view.value}.ckpt"
            train_view_segmenter(
                ctx,
                view,
                agents[view] if localized else None,
                deformable,
                path,
                out / f"seg_{tag}_{view.value}_log.csv",
                ctx.stamp(),
            )
            models[view] = load_model(path)[0]
        rows, summary = pipeline.evaluate_dataset(
            ids, vols, labs, agents if localized else None, models, jobs=ctx.jobs, progress=_progress
        )
        per_volume += [{"configuration": label, "volume_id": r["volume_id"], "dsc": r["dsc"]} for r in rows]
        report.append(
            {
                "configuration": label,
                "localization": int(localized),
                "deformable": int(deformable),
                **summary,
                "volumes": len(rows),
            }
        )
        print(f"{label}: DSC mean {summary['mean']:.4f} min {summary['min']:.4f} max {summary['max']:.4f}")
    write_csv(ctx.run_dir / "ablation.csv", report, ABLATION_FIELDS, ctx.stamp())
    write_csv(out / "ablation_volumes.csv", per_volume, ("configuration", "volume_id", "dsc"), ctx.stamp())
    return 0


ACTION_NAMES = [a.name.lower() for a in MOVE_ACTIONS]


def cmd_action_stats(args, ctx: Context) -> int:
    for view in _views(args.view):
        path = ctx.run_dir / f"eval_loc_{view.value}_episodes.csv"
        if not path.is_file():
            raise CommandError(f"no episode records at {path}; run `pansearch eval-loc --view {view.value}` first")
        rows = read_csv(path)
        if rows:
            _check_hash(ctx, path, rows[0], "loc")
        recs = [
            dqn.EpisodeRecord(None, float(r["iou"]), float(r["recall"]), int(r["steps"]), [int(a) for a in r["actions"].split()], 0.0)
            for r in rows
        ]
        freqs = dqn.action_frequencies(recs)
        corr = dqn.action_correlation(freqs)
        matrix = []
        for i, name in enumerate(ACTION_NAMES):
            row = {"action": name}
            for j, other in enumerate(ACTION_NAMES):
                row[other] = "undefined" if np.isnan(corr[i, j]) else repr(float(corr[i, j]))
            row["flags"] = " ".join(ACTION_NAMES[j] for j in range(len(ACTION_NAMES)) if corr[i, j] > 0.5)
            matrix.append(row)
        write_csv(ctx.run_dir / f"action_corr_{view.value}.csv", matrix, ["action", *ACTION_NAMES, "flags"], ctx.stamp("loc"))
        table = [
            {
                "action": name,
                "total": int(freqs[:, j].sum()),
                "mean_per_episode": float(freqs[:, j].mean()),
                "episodes_using": int((freqs[:, j] > 0).sum()),
            }
            for j, name in enumerate(ACTION_NAMES)
        ]
        write_csv(
            ctx.run_dir / f"action_freq_{view.value}.csv", table, ("action", "total", "mean_per_episode", "episodes_using"), ctx.stamp("loc")
        )
        strong = [(ACTION_NAMES[i], ACTION_NAMES[j]) for i in range(9) for j in range(i + 1, 9) if corr[i, j] > 0.5]
        print(f"{view.value}: {len(recs)} episodes, pairs above 0.5: {', '.join(f'{a}/{b}' for a, b in strong) or 'none'}")
    return 0


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (flags override it)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--data-dir", help="directory holding manifest.csv and the phantoms")
    common.add_argument("--run-dir", help="directory for checkpoints, logs and reports")
    common.add_argument("--split", metavar="FOLD/FOLDS", help="hold out manifest rows i with i %% FOLDS == FOLD for evaluation")
    common.add_argument("--force", action="store_true", help="accept artifacts written under a different config hash")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation fan-out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pansearch", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write phantom volume/label pairs and a manifest")
    g.add_argument("--out-dir")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--dims", default="64x64x64", help="WxHxD")
    g.add_argument("--fraction-min", type=float, default=0.001)
    g.add_argument("--fraction-max", type=float, default=0.008)
    g.add_argument("--distractors", type=int, default=4)
    g.add_argument("--noise-std", type=float, default=12.0)
    g.set_defaults(func=cmd_gen_data)

    views = ["all", *VIEW_NAMES]
    t = sub.add_parser("train-loc", parents=[common], help="train localization agents")
    t.add_argument("--view", choices=views, default="all")
    t.add_argument("--epochs", type=int, help="shorthand for --set dqn.epochs=N")
    t.set_defaults(func=cmd_train_loc)

    s = sub.add_parser("train-seg", parents=[common], help="train per-view segmenters")
    s.add_argument("--view", choices=views, default="all")
    s.add_argument("--epochs", type=int, help="shorthand for --set seg.epochs=N")
    s.add_argument("--no-deform", action="store_true", help="shorthand for --set unet.deformable_encoder=false")
    s.add_argument("--no-loc", action="store_true", help="train on whole slices instead of agent crops")
    s.set_defaults(func=cmd_train_seg)

    e = sub.add_parser("eval", parents=[common], help="three-view DSC on the evaluation volumes")
    e.add_argument("--no-loc", action="store_true")
    e.add_argument("--prefix", default="eval", help="basename of the CSV/JSON outputs")
    e.set_defaults(func=cmd_eval)

    el = sub.add_parser("eval-loc", parents=[common], help="greedy localization recall against a random policy")
    el.add_argument("--view", choices=views, default="all")
    el.add_argument("--subset", choices=["eval", "train"], default="eval", help="manifest rows to roll out on")
    el.set_defaults(func=cmd_eval_loc)

    i = sub.add_parser("infer", parents=[common], help="segment one intensity volume file")
    i.add_argument("--volume", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-loc", action="store_true")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", parents=[common], help="localization x deformable ablation report")
    a.set_defaults(func=cmd_ablate)

    st = sub.add_parser("action-stats", parents=[common], help="action frequency and correlation tables")
    st.add_argument("--view", choices=views, default="all")
    st.set_defaults(func=cmd_action_stats)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.split is not None:
        out["split"] = args.split
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        out["dqn.epochs" if args.command == "train-loc" else "seg.epochs"] = str(args.epochs)
    if getattr(args, "no_deform", False):
        out["unet.deformable_encoder"] = "false"
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        cfg = load_run_config(args.config, _overrides(args))
        root = default_root()
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        ctx = Context(
            cfg=cfg,
            data_dir=Path(args.data_dir) if args.data_dir else root / "data",
            run_dir=Path(args.run_dir) if args.run_dir else root / "runs",
            split=parse_split(cfg.split),
            force=args.force,
            jobs=args.jobs,
        )
        return args.func(args, ctx)
    except ConfigError as exc:
        print(f"pansearch: config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, CheckpointError, VolumeFormatError, PhantomError, pipeline.ViewMismatchError, OSError) as exc:
        print(f"pansearch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
