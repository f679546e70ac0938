"""Command-line entry point.

Subcommands cover the whole workflow: scene generation, training,
rendering (including cross-driven audio), evaluation, the ray-routing
benchmark, and the gradient verification matrix.

Exit codes: 0 success, 1 bad input or configuration, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path


def _set_thread_env(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage errors through the exit-code-1 path."""

    def error(self, message):
        from .errors import ValidationError

        raise ValidationError(message)


def _common(sub):
    sub.add_argument("--seed", type=int, default=None,
                     help="override the run seed")
    sub.add_argument("--config", type=Path, default=None,
                     help="key=value settings file; flags take precedence")
    sub.add_argument("--out", type=Path, default=None,
                     help="output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="BLAS/OpenMP thread cap (default 1)")


def build_parser():
    p = _Parser(prog="dualnerf",
                description="Audio-routed dual radiance field engine.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[], help="generate a synthetic scene")
    _common(g)
    g.add_argument("--size", type=int, default=None, help="image side length")
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--identity-seed", type=int, default=None)
    g.add_argument("--audio-dim", type=int, default=None)

    t = sub.add_parser("train", help="train a model")
    _common(t)
    t.add_argument("--data", type=Path, nargs="+", required=True,
                   help="one or more scene directories")
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--phase", choices=("pretrain", "finetune"), default=None)
    t.add_argument("--epsilon", type=float, default=None,
                   help="overlap fraction for ray routing")
    t.add_argument("--base", type=Path, default=None,
                   help="base checkpoint (required for finetune)")
    t.add_argument("--no-rrs", action="store_const", const=True, default=None,
                   help="route every ray through both fields")
    t.add_argument("--no-aaa", action="store_const", const=True, default=None,
                   help="replace attention aggregation with a plain mean")
    t.add_argument("--no-warper", action="store_const", const=True, default=None)
    t.add_argument("--single-field", action="store_const", const=True,
                   default=None, help="drop the audio-independent field")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any other training setting")

    r = sub.add_parser("render", help="render frames from a checkpoint")
    _common(r)
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True,
                   help="scene directory providing poses (and ground truth)")
    r.add_argument("--frames", default="test",
                   help="'test', 'all', 'N', 'A-B', or comma list")
    r.add_argument("--audio", type=Path, default=None,
                   help="drive with another scene's audio track")
    r.add_argument("--chunk", type=int, default=256)

    e = sub.add_parser("eval", help="score rendered frames against a scene")
    _common(e)
    e.add_argument("--rendered", type=Path, required=True,
                   help="directory produced by the render command")
    e.add_argument("--data", type=Path, required=True)

    b = sub.add_parser("bench", help="wall-clock the ray-routing settings")
    _common(b)
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--iters", type=int, default=100,
                   help="training iterations per setting")
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    c = sub.add_parser("gradcheck", help="run the gradient verification matrix")
    _common(c)
    c.add_argument("--only", default=None,
                   help="restrict to one scope (primitives, modules, fields, "
                        "rendering, e2e)")
    return p


# -- config plumbing -------------------------------------------------------

def _read_config_file(path):
    from .errors import ValidationError

    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"bad config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def _parse_sets(pairs):
    from .errors import ValidationError

    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--set expects KEY=VALUE, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _require_out(args):
    from .errors import ValidationError

    if args.out is None:
        raise ValidationError("--out is required for this command")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _train_config(args):
    """File settings, then --set pairs, then dedicated flags on top."""
    from . import training as tr

    values = {}
    if args.config is not None:
        values.update(_read_config_file(args.config))
    values.update(_parse_sets(getattr(args, "set", [])))
    for key in ("seed", "iterations", "phase", "epsilon", "no_rrs", "no_aaa",
                "no_warper", "single_field"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return tr.TrainConfig.from_dict(values)


def _parse_frames(spec, ds):
    from .errors import ValidationError

    if spec == "all":
        return list(range(len(ds)))
    if spec == "test":
        return list(ds.test_indices)
    if spec == "train":
        return list(ds.train_indices)
    m = re.fullmatch(r"(\d+)-(\d+)", spec)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        frames = list(range(lo, hi + 1))
    else:
        try:
            frames = [int(s) for s in spec.split(",")]
        except ValueError:
            raise ValidationError(f"bad frame selection {spec!r}") from None
    for f in frames:
        if not 0 <= f < len(ds):
            raise ValidationError(f"frame {f} outside dataset of {len(ds)}")
    return frames


def _echo_config(out_dir, values):
    text = "".join(f"{k} = {v}\n" for k, v in values.items())
    (Path(out_dir) / "config.txt").write_text(text)


# -- commands --------------------------------------------------------------

def cmd_gen_scene(args):
    from . import synthscene as ss

    out = _require_out(args)
    values = {}
    if args.config is not None:
        values.update(_read_config_file(args.config))
    for key, flag in (("image_size", "size"), ("frames", "frames"),
                      ("identity_seed", "identity_seed"),
                      ("audio_dim", "audio_dim")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    known = {f.name: f.type for f in dc_fields(ss.SceneSpec)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            from .errors import ValidationError

            raise ValidationError(f"unknown scene setting {key!r}")
        typ = float if "float" in str(known[key]) else int
        kwargs[key] = typ(val)
    spec = ss.SceneSpec(**kwargs)
    spec.validate()
    seed = 0 if args.seed is None else args.seed
    ds = ss.generate(spec, seed=seed)
    ds.save(out)
    echo = {f.name: getattr(spec, f.name) for f in dc_fields(ss.SceneSpec)}
    echo["seed"] = seed
    _echo_config(out, echo)
    print(f"wrote {len(ds)} frames of {spec.image_size}x{spec.image_size} "
          f"to {out}")
    return 0


def _load_datasets(paths):
    from . import synthscene as ss

    return [ss.SceneDataset.load(p) for p in paths]


def cmd_train(args):
    from . import training as tr
    from .errors import ValidationError

    out = _require_out(args)
    cfg = _train_config(args)
    datasets = _load_datasets(args.data)
    for ds, path in zip(datasets, args.data):
        if ds.audio.shape[1] != cfg.audio_dim:
            raise ValidationError(
                f"{path}: audio features have {ds.audio.shape[1]} dims, "
                f"model expects {cfg.audio_dim}")
    if cfg.phase == "finetune" and args.base is None:
        raise ValidationError("finetune phase needs --base checkpoint")
    t0 = time.monotonic()
    _, _, _, losses = tr.train(cfg, datasets, out, base_checkpoint=args.base)
    dt = time.monotonic() - t0
    print(f"trained {cfg.iterations} iterations in {dt / 60:.1f} min, "
          f"final loss {losses[-1]:.5f}" if losses else
          f"nothing to do, checkpoint written to {out}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def _restore_for_inference(checkpoint):
    from . import training as tr

    ckpt = tr.load_checkpoint(checkpoint)
    cfg = tr.TrainConfig.from_text(ckpt.config_text)
    model = tr.build_model(cfg)
    tr.restore_model(ckpt, model)
    return model, cfg


def _inference_references(ds, n_refs):
    """Evenly spaced training frames; deterministic."""
    from . import aggregation as agg

    train = ds.train_indices
    idx = [train[int(round(i * (len(train) - 1) / max(n_refs - 1, 1)))]
           for i in range(n_refs)]
    return agg.ReferenceSet.from_dataset(ds, idx)


def cmd_render(args):
    from . import autodiff as ad
    from . import rendering as rnd
    from .errors import ValidationError

    out = _require_out(args)
    model, cfg = _restore_for_inference(args.checkpoint)
    ds = _load_datasets([args.data])[0]
    frames = _parse_frames(args.frames, ds)

    audio = ds.audio
    if args.audio is not None:
        driver = _load_datasets([args.audio])[0]
        if driver.audio.shape[1] != cfg.audio_dim:
            raise ValidationError(
                f"{args.audio}: audio features have {driver.audio.shape[1]} "
                f"dims, model expects {cfg.audio_dim}")
        if len(driver.audio) < len(ds):
            raise ValidationError(
                f"{args.audio}: driving track has {len(driver.audio)} frames, "
                f"scene has {len(ds)}")
        audio = driver.audio

    refs = _inference_references(ds, cfg.n_refs)
    with ad.no_grad():
        for f in frames:
            model.prepare(refs, audio[f])
            model.begin_step()
            rgb, m_aa, m_ai = rnd.render_image(
                model, ds.cameras[f], ds.spec.near, ds.spec.far,
                cfg.n_coarse, cfg.n_fine, chunk=args.chunk,
                renormalize=cfg.renormalize_masks,
                route=rnd.ROUTE_AA if cfg.single_field else rnd.ROUTE_OVERLAP)
            rnd.save_image(out / f"frame_{f:05d}.png", rgb)
            rnd.save_image(out / f"mask_aa_{f:05d}.png", m_aa)
            rnd.save_image(out / f"mask_ai_{f:05d}.png", m_ai)
    _echo_config(out, {
        "checkpoint": args.checkpoint, "data": args.data,
        "frames": ",".join(str(f) for f in frames),
        "audio": args.audio if args.audio is not None else args.data,
        "chunk": args.chunk})
    print(f"rendered {len(frames)} frames to {out}")
    return 0


def _load_png(path):
    import numpy as np
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def cmd_eval(args):
    import numpy as np

    from . import metrics
    from .errors import ValidationError

    ds = _load_datasets([args.data])[0]
    rendered = sorted(Path(args.rendered).glob("frame_*.png"))
    if not rendered:
        raise ValidationError(f"no rendered frames in {args.rendered}")
    frames = [int(p.stem.split("_")[1]) for p in rendered]
    for f in frames:
        if f >= len(ds):
            raise ValidationError(
                f"rendered frame {f} not present in the {len(ds)}-frame scene")

    rows = []
    for f, path in zip(frames, rendered):
        rgb = _load_png(path)
        if rgb.shape != ds.images[f].shape:
            raise ValidationError(
                f"{path}: image is {rgb.shape}, scene frame is "
                f"{ds.images[f].shape}")
        p = metrics.psnr(rgb, ds.images[f])
        s = metrics.ssim(rgb, ds.images[f])
        mask_path = path.with_name(path.name.replace("frame_", "mask_aa_"))
        iou = ""
        if mask_path.exists():
            iou = metrics.mask_iou(_load_png(mask_path) > 0.5, ds.masks[f])
        rows.append((f, p, s, iou))

    out = args.out if args.out is not None else Path(args.rendered)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "psnr", "ssim", "iou"])
        w.writerows(rows)
        mean = ["mean", np.mean([r[1] for r in rows]),
                np.mean([r[2] for r in rows]),
                np.mean([r[3] for r in rows]) if rows[0][3] != "" else ""]
        w.writerow(mean)
    print(f"{'frame':>6s} {'psnr':>8s} {'ssim':>8s} {'iou':>8s}")
    for f, p, s, iou in rows:
        print(f"{f:6d} {p:8.2f} {s:8.4f} "
              + (f"{iou:8.3f}" if iou != "" else f"{'-':>8s}"))
    print(f"{'mean':>6s} {mean[1]:8.2f} {mean[2]:8.4f} "
          + (f"{mean[3]:8.3f}" if mean[3] != "" else f"{'-':>8s}"))
    return 0


def cmd_bench(args):
    import numpy as np

    from . import autodiff as ad
    from . import metrics
    from . import rendering as rnd
    from . import training as tr

    out = _require_out(args)
    datasets = _load_datasets([args.data])
    ds = datasets[0]
    probe = ds.test_indices[len(ds.test_indices) // 2]

    settings = [("eps0.2", dict(epsilon=0.2)), ("eps0.4", dict(epsilon=0.4)),
                ("eps0.6", dict(epsilon=0.6)), ("no-rrs", dict(no_rrs=True))]
    rows = []
    for name, overrides in settings:
        values = {}
        if args.config is not None:
            values.update(_read_config_file(args.config))
        values.update(_parse_sets(args.set))
        values.update({"iterations": args.iters, **overrides})
        if args.seed is not None:
            values["seed"] = args.seed
        cfg = tr.TrainConfig.from_dict(values)
        t0 = time.monotonic()
        model, _, _, _ = tr.train(cfg, datasets, out / name)
        seconds = time.monotonic() - t0
        points = model.eval_points          # training only: read before render
        refs = _inference_references(ds, cfg.n_refs)
        with ad.no_grad():
            model.prepare(refs, ds.audio[probe])
            model.begin_step()
            rgb, _, _ = rnd.render_image(
                model, ds.cameras[probe], ds.spec.near, ds.spec.far,
                cfg.n_coarse, cfg.n_fine,
                route=rnd.ROUTE_AA if cfg.single_field else rnd.ROUTE_OVERLAP)
        p = metrics.psnr(rgb, ds.images[probe])
        rows.append((name, 100.0 * seconds / args.iters, points, p))

    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "seconds_per_100_iters", "eval_points", "psnr"])
        w.writerows(rows)
    print(f"{'setting':>8s} {'s/100it':>9s} {'points':>12s} {'psnr':>7s}")
    for name, spc, points, p in rows:
        print(f"{name:>8s} {spc:9.2f} {points:12d} {p:7.2f}")
    return 0


def cmd_gradcheck(args):
    from . import checks
    from .errors import NumericError

    seed = 0 if args.seed is None else args.seed
    results = checks.run_checks(only=args.only, seed=seed)
    width = max(len(r.name) for r in results)
    for r in results:
        state = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}s}  max_rel_err={r.max_err:.3e}  "
              f"tol={r.tol:g}  {state}")
    bad = [r for r in results if not r.passed]
    if bad:
        raise NumericError(
            f"{len(bad)} gradient check(s) failed: "
            + ", ".join(r.name for r in bad))
    print(f"all {len(results)} checks passed")
    return 0


_COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    from .errors import NumericError, ValidationError

    try:
        args = build_parser().parse_args(argv)
        _set_thread_env(args.threads)
        return _COMMANDS[args.command](args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
