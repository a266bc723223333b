"""``omniepi`` command line: gen-data, train, infer, eval, inspect, gradcheck.

Exit codes: 0 success, 1 contract or budget failure, 2 bad input, 3 internal error.
Configuration layers: preset, then ``--config`` file, then ``--set`` / flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import os
import subprocess
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__, budget, checkpoint, config as cfgio, io, synthetic
from .autodiff import Tensor, grad_check, precision
from .errors import (CheckpointError, ConfigError, ContractError, EstimationError, NumericError,
                     ShapeError)
from .imaging import rgb_to_ycbcr
from .inference import TileSpec, super_resolve, super_resolve_y
from .metrics import psnr_y, ssim_y
from .model import PRESETS, ModelConfig, build_model
from .training import TRAIN_PRESETS, PairSet, TrainConfig, train_loop

EXIT_OK, EXIT_CONTRACT, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
THREADS_ENV = "OMNI_EPI_THREADS"


class ContractFailure(Exception):
    """A check ran and failed (budget gate, gradient check)."""


# -- configuration layering ----------------------------------------------------------------

def resolve_configs(preset: str, config_file=None, overrides=(), seed=None) -> tuple[ModelConfig, TrainConfig]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    mcfg, tcfg = PRESETS[preset], TRAIN_PRESETS[preset]
    raw: dict[str, str] = {}
    if config_file is not None:
        raw.update(cfgio.load_file(config_file))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    m_over, t_over = {}, {}
    for key, value in raw.items():
        section, _, name = key.rpartition(".")
        if section == "model" or (not section and name in model_fields and name not in train_fields):
            m_over[name] = value
        elif section == "train" or (not section and name in train_fields and name not in model_fields):
            t_over[name] = value
        elif not section and name in model_fields:        # shared key (seed) sets both
            m_over[name] = t_over[name] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if seed is not None:
        m_over["seed"] = t_over["seed"] = str(seed)
    return cfgio.apply_overrides(mcfg, m_over), cfgio.apply_overrides(tcfg, t_over)


# -- run manifest -----------------------------------------------------------------------------

def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out_dir, command: str, argv, configs=(), seed=None, outputs=(), started=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"argv={' '.join(argv)}", f"seed={seed if seed is not None else 'none'}",
             f"build={build_id()}", f"started={started or dt.datetime.now().isoformat(timespec='seconds')}",
             f"finished={dt.datetime.now().isoformat(timespec='seconds')}"]
    for prefix, cfg in configs:
        lines += [f"{prefix}.{ln}" for ln in cfgio.to_text(cfg).splitlines()]
    lines += [f"output={o}" for o in outputs]
    path = out / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- helpers ----------------------------------------------------------------------------------

def to_y(lf: np.ndarray) -> np.ndarray:
    return lf[:, :1] if lf.shape[1] == 1 else rgb_to_ycbcr(lf, axis=1)[:, :1]


def scene_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / io.MANIFEST).exists():
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and ((p / io.MANIFEST).exists() or (p / "hr").is_dir()))
    if not found:
        raise FileNotFoundError(f"{root}: no light-field bundles found")
    return found


def load_pairs(root, scale: int) -> PairSet:
    lrs, hrs, names, grid = [], [], [], None
    for scene in scene_dirs(root):
        hr, U, V, _ = io.read_bundle(scene / "hr")
        lr, U2, V2, _ = io.read_bundle(scene / "lr")
        if (U, V) != (U2, V2):
            raise ShapeError(f"{scene}: LR and HR angular grids differ")
        if grid not in (None, (U, V)):
            raise ShapeError(f"{scene}: angular grid {U}x{V} differs from {grid}")
        grid = (U, V)
        lrs.append(to_y(lr))
        hrs.append(to_y(hr))
        names.append(scene.name)
    return PairSet(lrs, hrs, grid[0], grid[1], scale, names)


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


# -- commands ----------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    mcfg, _ = resolve_configs(args.preset, args.config, args.set, args.seed)
    out = Path(args.out)
    rng = np.random.default_rng(mcfg.seed)
    size = args.size or 8 * mcfg.scale * 4
    if size % mcfg.scale:
        raise ConfigError(f"--size {size} not divisible by scale {mcfg.scale}")
    lo, hi = args.disparity
    written = []
    for split, count in (("train", args.scenes), ("val", args.val_scenes)):
        for i in range(count):
            if args.layers == 1:
                d = float(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1)) if args.integer \
                    else float(rng.uniform(lo, hi))
                scene = synthetic.single_layer_scene(rng, d, mcfg.U, mcfg.V, size, size, channels=3)
            else:
                scene = synthetic.random_scene(rng, mcfg.U, mcfg.V, size, size, channels=3,
                                               disparities=(lo, hi))
            hr, lr = synthetic.gen_synthetic_lf(scene, mcfg.scale)
            meta = {"scale": mcfg.scale,
                    "disparities": ",".join(repr(d) for d in scene.meta["disparities"])}
            base = out / split / f"scene_{i:03d}"
            io.write_bundle(base / "hr", hr, mcfg.U, mcfg.V, args.format, args.bits, meta)
            io.write_bundle(base / "lr", lr, mcfg.U, mcfg.V, args.format, args.bits, meta)
            written.append(str(base))
    write_run_manifest(out, "gen-data", args.argv, [("model", mcfg)], mcfg.seed, written, args.started)
    print(f"wrote {args.scenes} training and {args.val_scenes} validation scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    mcfg, tcfg = resolve_configs(args.preset, args.config, args.set, args.seed)
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, epochs=-(-args.steps // tcfg.steps_per_epoch))
    data = Path(args.data)
    train = load_pairs(data / "train" if (data / "train").is_dir() else data, mcfg.scale)
    val = load_pairs(data / "val", mcfg.scale) if (data / "val").is_dir() else None
    out = Path(args.out)
    resume = args.resume
    if resume is not None:
        ck = checkpoint.load(resume, TrainConfig)
        if ck.model_config != mcfg:
            raise CheckpointError("checkpoint model config differs from the resolved config")
        resume = ck
    result = train_loop(mcfg, tcfg, train, val, out_dir=out, resume=resume, max_steps=args.steps)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"step {last['step']} loss {last['loss']:.6g} val_psnr "
              f"{'-' if last['val_psnr'] is None else format(last['val_psnr'], '.4f')}")
    write_run_manifest(out, "train", args.argv, [("model", mcfg), ("train", tcfg)], tcfg.seed,
                       [str(out / "metrics.log"), str(out / "last.ckpt")], args.started)
    return EXIT_OK


def load_model(path, use_ema: bool = True):
    ck = checkpoint.load(path, TrainConfig)
    model = build_model(ck.model_config, np.float32)
    ck.check_against({k: p.shape for k, p in model.named_parameters()})
    model.load_state_dict(ck.ema if use_ema and ck.ema is not None else ck.params)
    return model


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint, not args.raw_weights)
    cfg = model.cfg
    spec = TileSpec(args.patch, args.stride, args.window) if args.epsw else None
    outputs = []
    for scene in scene_dirs(args.input):
        src = scene / "lr" if (scene / "lr").is_dir() else scene
        lr, U, V, meta = io.read_bundle(src)
        if (U, V) != (cfg.U, cfg.V):
            raise ShapeError(f"{src}: angular grid {U}x{V} does not match the model's {cfg.U}x{cfg.V}")
        with precision("f32"):
            if lr.shape[1] == 3:
                sr = super_resolve(model, lr, spec, args.tta)
            else:
                sr = np.clip(super_resolve_y(model, lr, spec, args.tta), 0.0, 1.0)
        dest = Path(args.out) if src == Path(args.input) else Path(args.out) / scene.name
        bits = args.bits or (16 if args.format == "pgm" else 8)
        io.write_bundle(dest, sr, U, V, args.format, bits, dict(meta, epsw=bool(spec), tta=args.tta))
        outputs.append(str(dest))
    write_run_manifest(args.out, "infer", args.argv, [("model", cfg)], cfg.seed, outputs, args.started)
    print(f"super-resolved {len(outputs)} bundle(s) into {args.out}")
    return EXIT_OK


def _pair_bundles(pred_root, gt_root):
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    if (pred_root / io.MANIFEST).exists():
        gt = gt_root / "hr" if (gt_root / "hr").is_dir() else gt_root
        return [(pred_root.name, pred_root, gt)]
    pairs = []
    for scene in scene_dirs(pred_root):
        gt = gt_root / scene.name
        gt = gt / "hr" if (gt / "hr").is_dir() else gt
        pairs.append((scene.name, scene, gt))
    return pairs


def cmd_eval(args) -> int:
    rows = []
    for name, pred_dir, gt_dir in _pair_bundles(args.pred, args.gt):
        pred, U, V, _ = io.read_bundle(pred_dir)
        gt, U2, V2, _ = io.read_bundle(gt_dir)
        if pred.shape != gt.shape or (U, V) != (U2, V2):
            raise ShapeError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        p, _ = psnr_y(pred, gt)
        s, _ = ssim_y(pred, gt)
        for a in range(U * V):
            rows.append((name, f"{a // V}_{a % V}", float(p[0, a]), float(s[0, a])))
    report = io.format_report(rows)
    sys.stdout.write(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.csv").write_text(report)
        write_run_manifest(args.out, "eval", args.argv, outputs=[str(Path(args.out) / "report.csv")],
                           started=args.started)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        mcfg = checkpoint.load(args.checkpoint).model_config
    else:
        mcfg, _ = resolve_configs(args.preset, args.config, args.set, args.seed)
    h, w = args.size
    report = budget.budget_report(mcfg, h, w)
    text = budget.format_report(mcfg, h, w)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "budget.txt").write_text(text + "\n")
        write_run_manifest(args.out, "inspect", args.argv, [("model", mcfg)], mcfg.seed,
                           [str(Path(args.out) / "budget.txt")], args.started)
    if not (report["params_ok"] and report["flops_ok"]):
        raise ContractFailure("budget gate violated")
    return EXIT_OK


def gradcheck_suite(mcfg: ModelConfig, seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference errors for each registered block of a (small) model config."""
    from .nn import TPFFN, DirectionalFusion, MultiHeadSelfAttention, band_mask
    from .model import pixel_shuffle
    from .training import charbonnier_ohem

    results = []
    with precision("f64"):
        rng = np.random.default_rng(seed)
        C, U, V = mcfg.channels, mcfg.U, mcfg.V
        H = W = 4

        def rand(*shape):
            return Tensor(rng.standard_normal(shape))

        def randomize(m):
            for p in m.parameters():
                p.data[...] = rng.standard_normal(p.shape) * 0.3
            return m

        attn = randomize(MultiHeadSelfAttention(C, mcfg.heads, rng))
        x = rand(2, U * H, C)
        results.append(("mhsa", grad_check(lambda t: attn(t), x, wrt=attn.parameters())))
        mask = band_mask((U, H), 1)
        results.append(("mhsa_band", grad_check(lambda t: attn(t, mask), x, wrt=attn.parameters())))
        ffn = randomize(TPFFN(C, mcfg.ffn_ratio, rng))
        results.append(("tp_ffn", grad_check(lambda t: ffn(t, (U, H)), x, wrt=ffn.parameters())))
        fu = randomize(DirectionalFusion(mcfg.fusion_config(), rng))
        others = [rand(1, C, U * V, H, W) for _ in range(mcfg.fusion_config().directions - 1)]
        f_in = rand(1, C, U * V, H, W)
        results.append(("fusion", grad_check(lambda t: fu([t, *others], f_in), rand(1, C, U * V, H, W),
                                             wrt=fu.parameters(), max_coords=64)))
        model = randomize(build_model(dataclasses.replace(mcfg, blocks=1, mla_taps=(1,) if mcfg.tiny else ()),
                                      np.float64))
        feat = rand(1, C, U * V, H, W)
        blk = model.blocks[0]
        results.append(("omni_epi_block", grad_check(lambda t: blk(t, U, V), feat, wrt=blk.parameters(),
                                                     max_coords=8)))
        gmodel = randomize(build_model(dataclasses.replace(mcfg, variant="gtf", mla_taps=(), blocks=1,
                                                           use_macpi_prior=True, use_angular_embed=False),
                                       np.float64))
        y = Tensor(rng.random((1, 1, U * V, H, W)))
        results.append(("macpi_prior", grad_check(gmodel.macpi_prior, y, wrt=[gmodel.prior.weight])))
        a = mcfg.scale
        head = rand(1, C, U * V, H, W)
        results.append(("pixel_shuffle_head", grad_check(
            lambda t: model.reconstruct(t, y), head,
            wrt=[model.head_expand.weight, model.head_out.weight], max_coords=32)))
        shuffled = rand(1, 4 * a * a, 2, 2, 2)
        results.append(("pixel_shuffle", grad_check(lambda t: pixel_shuffle(t, a), shuffled)))
        target = rand(1, 1, U * V, H, W)
        results.append(("ohem_loss", grad_check(lambda t: charbonnier_ohem(t, target, 0.5, 1e-3),
                                                rand(1, 1, U * V, H, W))))
        results.append(("end_to_end", grad_check(model.forward_y, y, wrt=model.parameters(), max_coords=4)))
    return results


def cmd_gradcheck(args) -> int:
    mcfg, _ = resolve_configs(args.preset, args.config, args.set, args.seed)
    results = gradcheck_suite(mcfg, mcfg.seed)
    failed = [name for name, err in results if not err < args.tol]
    lines = [f"{name:<20} {err:.3e}  {'pass' if err < args.tol else 'FAIL'}" for name, err in results]
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text + "\n")
        write_run_manifest(args.out, "gradcheck", args.argv, [("model", mcfg)], mcfg.seed,
                           [str(Path(args.out) / "gradcheck.txt")], args.started)
    if failed:
        raise ContractFailure(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="gtf_tiny", choices=sorted(PRESETS))
    common.add_argument("--config", type=Path, help="key=value file applied over the preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help=f"BLAS thread count (default ${THREADS_ENV})")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="omniepi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"omniepi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic paired LR/HR bundles")
    g.add_argument("--scenes", type=int, default=4)
    g.add_argument("--val-scenes", type=int, default=1)
    g.add_argument("--size", type=int, help="HR spatial size (default 32 * scale)")
    g.add_argument("--layers", type=int, choices=(1, 2), default=2)
    g.add_argument("--integer", action="store_true", help="integer disparities (single-layer scenes)")
    g.add_argument("--disparity", type=float, nargs=2, default=(-1.0, 1.0), metavar=("MIN", "MAX"))
    g.add_argument("--format", choices=io.FORMATS, default="png")
    g.add_argument("--bits", type=int, choices=(8, 16), default=8)
    g.set_defaults(func=cmd_gen_data, needs_out=True)

    t = sub.add_parser("train", parents=[common], help="train and write checkpoints plus metrics.log")
    t.add_argument("--data", required=True, help="directory from gen-data (train/ and val/)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="stop after this many optimisation steps")
    t.set_defaults(func=cmd_train, needs_out=True)

    i = sub.add_parser("infer", parents=[common], help="super-resolve LR bundles")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="LR bundle, scene directory or dataset split")
    i.add_argument("--epsw", action="store_true", help="tiled overlap-blended inference")
    i.add_argument("--tta", action="store_true", help="8-fold dihedral test-time augmentation")
    i.add_argument("--patch", type=int, default=32)
    i.add_argument("--stride", type=int, default=16)
    i.add_argument("--window", choices=("hann", "uniform"), default="hann")
    i.add_argument("--raw-weights", action="store_true", help="use raw rather than EMA weights")
    i.add_argument("--format", choices=io.FORMATS, default="png")
    i.add_argument("--bits", type=int, choices=(8, 16), help="default 16 for pgm, 8 for png")
    i.set_defaults(func=cmd_infer, needs_out=True)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM on Y against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval, needs_out=False)

    s = sub.add_parser("inspect", parents=[common], help="parameter and FLOP budget table")
    s.add_argument("--checkpoint")
    s.add_argument("--size", type=_size, default=(32, 32), help="LR spatial size HxW")
    s.set_defaults(func=cmd_inspect, needs_out=False)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every block")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck, needs_out=False)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    args.started = dt.datetime.now().isoformat(timespec="seconds")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        threads = _threads(args)
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except ContractFailure as exc:
        print(f"omniepi: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ContractError, NumericError) as exc:
        print(f"omniepi: contract failure: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConfigError, ShapeError, CheckpointError, EstimationError, FileNotFoundError, ValueError) as exc:
        print(f"omniepi: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:                       # noqa: BLE001 - last-resort mapping to exit code 3
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
