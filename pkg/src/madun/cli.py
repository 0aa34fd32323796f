"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the INI file
given with ``--config`` (sections ``[model]``, ``[train]``, ``[paths]``), the
``MADUN_SEED`` environment variable, then explicit command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cs_ops import ConfigError, DataError, GaussianOperator, MRIOperator, build_gaussian_operator, load_mask
from .data import load_directory, load_image, save_pgm, synthetic_images
from .model import ModelConfig, init_params
from .tensor import ContractError, Tensor

log = logging.getLogger("madun")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


@dataclass
class RunConfig:
    """Everything a run needs; desk-scale defaults (the full-scale regime is
    stages=25, channels=32, epochs_phase1=400)."""

    stages: int = 9
    channels: int = 16
    hsm: str = "rb2"
    clm: str = "lstm"
    operator: str = "gaussian"
    ratio: float = 0.25
    block: int = 33
    lr: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    epochs_phase1: int = 200
    epochs_phase2: int = 10
    block_phase2: int = 99
    stride_phase2: int = 22
    augment: bool = True
    seed: int = 0
    learnable_phi: bool = False
    max_steps: int | None = None
    save_every: int = 500
    stride: int = 22
    data: str | None = None
    checkpoint: str | None = None
    out: str = "runs"
    operator_file: str | None = None
    mask: str | None = None
    sources: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.stages, self.channels, self.hsm, self.clm, self.operator, self.ratio, self.block)

    def train_config(self):
        from .trainer import TrainConfig

        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            beta1=self.beta1,
            beta2=self.beta2,
            epochs_phase1=self.epochs_phase1,
            epochs_phase2=self.epochs_phase2,
            block=self.block,
            block_phase2=self.block_phase2,
            stride_phase2=self.stride_phase2,
            augment=self.augment,
            seed=self.seed,
            learnable_phi=self.learnable_phi,
            max_steps=self.max_steps,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "sources"}


def _coerce(name: str, raw: str):
    default = getattr(RunConfig, name, None)
    kind = _FIELDS[name].type
    if raw.lower() in ("none", "") and ("None" in str(kind)):
        return None
    if "bool" in str(kind):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if "int" in str(kind):
            return int(raw)
        if "float" in str(kind):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw if default is None or isinstance(default, str) else raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    sources = {}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                name = key.replace("-", "_")
                if name not in _FIELDS:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                setattr(cfg, name, _coerce(name, raw))
                sources[name] = f"file:{args.config}"
    env_seed = os.environ.get("MADUN_SEED")
    if env_seed is not None:
        cfg.seed = _coerce("seed", env_seed)
        sources["seed"] = "env:MADUN_SEED"
    for name in _FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
            sources[name] = "flag"
    cfg.sources = sources
    cfg.model_config()  # validates
    cfg.train_config()
    return cfg


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    import scipy

    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {
            "madun": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# -- operators ---------------------------------------------------------------------------


def save_operator(path: Path, op) -> None:
    if isinstance(op, GaussianOperator):
        meta = {"kind": "gaussian", "ratio": op.ratio, "n": op.n, "seed": op.seed}
        np.savez(path, phi=op.phi.data, meta=json.dumps(meta))
    else:
        np.savez(path, mask=op.mask.astype(np.uint8), meta=json.dumps({"kind": "mri", "ratio": op.ratio}))


def load_operator(path: str | Path):
    try:
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            if meta["kind"] == "mri":
                return MRIOperator(z["mask"])
            phi = z["phi"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read operator file {path}: {exc}") from None
    return GaussianOperator(Tensor(phi, dtype=phi.dtype, name="phi"), meta["ratio"], meta["n"], meta["seed"])


def operator_for(cfg: RunConfig):
    if cfg.operator_file:
        return load_operator(cfg.operator_file)
    if cfg.operator == "mri":
        if not cfg.mask:
            raise ConfigError("the MRI operator needs --mask (an 8-bit PGM)")
        return load_mask(cfg.mask)
    return build_gaussian_operator(cfg.ratio, cfg.block**2, seed=cfg.seed)


def _load_model(path: str):
    from .trainer import operator_from_checkpoint, params_from_checkpoint

    ckpt = load_checkpoint(path)
    config, params = params_from_checkpoint(ckpt)
    return ckpt, config, params, operator_from_checkpoint(ckpt)


# -- commands ------------------------------------------------------------------------------


def cmd_gen_operator(args, cfg: RunConfig) -> int:
    op = operator_for(cfg)
    out = Path(args.output)
    save_operator(out, op)
    print(f"wrote {out} ({'Phi %dx%d' % op.phi.shape if isinstance(op, GaussianOperator) else 'MRI mask'})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .trainer import Trainer, make_dataset

    if not cfg.data:
        raise ConfigError("train needs --data DIR")
    images = load_directory(cfg.data)
    mc, tc = cfg.model_config(), cfg.train_config()
    op = operator_for(cfg)
    if isinstance(op, MRIOperator):
        block = op.mask.shape[0]
        mc = dataclasses.replace(mc, operator="mri", block=block)
        ds = make_dataset(images, block, augment=tc.augment, seed=tc.seed)
        ds2 = None
    else:
        mc = dataclasses.replace(mc, block=op.block, ratio=op.ratio)
        ds = make_dataset(images, op.block, augment=tc.augment, seed=tc.seed)
        big = {k: v for k, v in images.items() if min(v.shape) >= cfg.block_phase2}
        ds2 = None
        if tc.epochs_phase2 > 0 and big:
            ds2 = make_dataset(big, cfg.block_phase2, augment=tc.augment, seed=tc.seed + 1)
        elif tc.epochs_phase2 > 0:
            log.warning("no image reaches %d pixels; skipping the fine-tune phase", cfg.block_phase2)
    params = init_params(mc, seed=cfg.seed)
    trainer = Trainer(mc, params, op, tc, ds, ds2)
    if args.resume:
        trainer.load_state(load_checkpoint(args.resume))
    out = Path(cfg.out)
    write_manifest(out, "train", cfg, {"resume": args.resume, "training_blocks": len(ds)})
    ckpt_path = out / "checkpoint.madn"

    def save(tr):
        ckpt = tr.checkpoint()
        ckpt.metadata["run_config"] = cfg.to_dict()
        save_checkpoint(ckpt_path, ckpt)

    def periodic(tr):
        if cfg.save_every and tr.step % cfg.save_every == 0:
            save(tr)

    try:
        history = trainer.run(callback=periodic)
    except KeyboardInterrupt:
        # the trainer only mutates state inside a completed step, so this is consistent
        save(trainer)
        print(f"interrupted at step {trainer.step}; saved {ckpt_path}", file=sys.stderr)
        return 130
    save(trainer)
    (out / "history.json").write_text(json.dumps(history))
    last = history["epoch_loss"][-1] if history["epoch_loss"] else (history["step_loss"] or [float("nan")])[-1]
    print(f"trained {trainer.step} steps, final loss {last:.6f}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    from .metrics import psnr, reconstruct_image, ssim

    if not cfg.checkpoint:
        raise ConfigError("reconstruct needs --checkpoint")
    _, mc, params, op = _load_model(cfg.checkpoint)
    out = Path(cfg.out)
    write_manifest(out, "reconstruct", cfg, {"inputs": args.images})
    for path in map(Path, args.images):
        img = load_image(path)
        rec = reconstruct_image(img, op, params, mc, cfg.stride)
        target = out / f"{path.stem}_rec.pgm"
        save_pgm(target, rec)
        rec8 = load_image(target).astype(np.float64)
        p = psnr(img, rec8)
        metrics = {
            "input": str(path),
            "output": str(target),
            "psnr": "inf" if p == float("inf") else p,
            "ssim": ssim(img, rec8) if min(img.shape) >= 11 else None,
            "stride": cfg.stride,
            "checkpoint": cfg.checkpoint,
        }
        (out / f"{path.stem}_rec.json").write_text(json.dumps(metrics, indent=2))
        print(f"{path.name}: PSNR {p:.2f} dB -> {target}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .metrics import evaluate

    if not cfg.checkpoint or not cfg.data:
        raise ConfigError("evaluate needs --checkpoint and --data")
    _, mc, params, op = _load_model(cfg.checkpoint)
    report = evaluate(load_directory(cfg.data), op, params, mc, cfg.stride, {"checkpoint": cfg.checkpoint})
    out = Path(cfg.out)
    write_manifest(out, "evaluate", cfg)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table() + "\n")
    print(report.to_table())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .ablation import GRID_CASES, TABLE_CASES, format_table, run_ablation
    from .trainer import TrainConfig, make_dataset

    images = load_directory(cfg.data) if cfg.data else synthetic_images(3, 99, seed=cfg.seed)
    ds = make_dataset(images, cfg.block, seed=cfg.seed)
    if args.blocks:
        ds.x, ds.sources = ds.x[: args.blocks], ds.sources[: args.blocks]
    tc = TrainConfig(
        lr=cfg.lr, batch_size=cfg.batch_size, max_steps=cfg.max_steps or 400, epochs_phase1=10**9, seed=cfg.seed
    )
    test = load_directory(args.test) if args.test else synthetic_images(2, 66, seed=cfg.seed + 1000)
    cases = GRID_CASES if args.grid == "full" else TABLE_CASES
    rows = run_ablation(ds, cases, cfg.stages, cfg.channels, cfg.ratio, tc, test, cfg.stride, cfg.seed)
    table = format_table(rows)
    out = Path(cfg.out)
    write_manifest(out, "ablate", cfg, {"grid": args.grid, "blocks": len(ds)})
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(
        json.dumps(
            [
                {"case": r.label, "hsm": r.hsm, "clm": r.clm, "final_loss": r.final_loss,
                 "reduction": r.reduction, "psnr": r.psnr, "ssim": r.ssim, "losses": r.losses}
                for r in rows
            ],
            indent=1,
        )
    )
    print(table)
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    from .analysis import average_curves, curves_csv, gate_weight_norms, norms_csv, spectral_density
    from .model import model_forward

    if not cfg.checkpoint:
        raise ConfigError("analyze needs --checkpoint")
    _, mc, params, op = _load_model(cfg.checkpoint)
    out = Path(cfg.out)
    write_manifest(out, "analyze", cfg)
    if mc.clm == "lstm":
        (out / "gate_norms.csv").write_text(norms_csv(gate_weight_norms(params, mc), f"checkpoint {cfg.checkpoint}"))
        print(f"wrote {out / 'gate_norms.csv'}")
    if mc.clm == "none":
        print("model has no long-term memory; no spectra written")
        return EXIT_OK
    images = load_directory(cfg.data) if cfg.data else synthetic_images(2, 66, seed=cfg.seed)
    per_stage: dict[str, list] = {}
    used = []
    dtype = params.stages[0].rho.dtype
    for name, img in images.items():
        side = min(img.shape)
        img = img[:side, :side]
        sampler = op.for_image(side, side, cfg.stride) if isinstance(op, GaussianOperator) else op.for_image(*img.shape)
        x = Tensor((img / 255.0)[None, None].astype(dtype))
        _, traj = model_forward(sampler.measure(x), sampler, params, mc, record=True)
        for k, state in enumerate(traj[1:], start=1):
            per_stage.setdefault(f"stage{k}", []).append(spectral_density(state.h))
        used.append(f"{name}[{side}x{side}]")
    curves = {k: average_curves(v) for k, v in per_stage.items()}
    (out / "spectra.csv").write_text(curves_csv(curves, f"clm={mc.clm}; images: {' '.join(used)}"))
    print(f"wrote {out / 'spectra.csv'}")
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run

    _, failed = run()
    return EXIT_OK if failed == 0 else EXIT_ERROR


# -- parser --------------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [model]/[train]/[paths] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stages", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--hsm", choices=("none", "star", "circle", "rb2"))
    p.add_argument("--clm", choices=("none", "plus", "concat", "lstm"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--block", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madun", description="Memory-augmented deep unfolding for compressive sensing")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-operator", help="build and save a sampling operator")
    _add_common(p)
    p.add_argument("--kind", dest="operator", choices=("gaussian", "mri"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--block", type=int)
    p.add_argument("--mask", help="8-bit PGM k-space mask (mri)")
    p.add_argument("-o", "--output", required=True, help="output .npz")
    p.set_defaults(func=cmd_gen_operator)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_model(p)
    p.add_argument("--data")
    p.add_argument("--operator", choices=("gaussian", "mri"))
    p.add_argument("--operator-file")
    p.add_argument("--mask", help="8-bit PGM k-space mask (mri)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs-phase1", type=int)
    p.add_argument("--epochs-phase2", type=int)
    p.add_argument("--stride-phase2", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--save-every", type=int)
    p.add_argument("--learnable-phi", action="store_true", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct images with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--stride", type=int)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="PSNR/SSIM over a directory")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train every memory variant under one budget")
    _add_common(p)
    p.add_argument("--stages", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--data")
    p.add_argument("--test", help="directory of evaluation images")
    p.add_argument("--blocks", type=int, default=20, help="training blocks (default 20)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--grid", choices=("table", "full"), default="table")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="gate norms and memory spectra from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import TrainingDiverged

    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, DataError, CheckpointError, T.ShapeError, ContractError, TrainingDiverged) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
