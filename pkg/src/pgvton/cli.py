"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import metrics, pipeline, ptm, rsim, tpim
from . import synthdata as sd
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .errors import NumericalError, PGVTError, ValidationError
from .training import log_path_for, LossLog

log = logging.getLogger("pgvton")

TRAINERS = {
    "tpim": (tpim.train_tpim, tpim.LOG_COLUMNS),
    "ptm": (ptm.train_ptm, ptm.LOG_COLUMNS),
    "rsim": (rsim.train_rsim, rsim.LOG_COLUMNS),
}


def _dataset_dir(args, cfg=None) -> Path:
    d = args.data or (cfg.dataset if cfg else "")
    if not d:
        raise ValidationError("no dataset directory: pass --data or set dataset in the config")
    return Path(d)


def cmd_gen_data(args):
    samples = sd.generate(args.count, args.seed, args.height, args.width, args.test_fraction)
    manifest = sd.write_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), manifest.parent)


def cmd_train(args):
    cfg = Config.load(args.config) if args.config else Config()
    train, columns = TRAINERS[args.module]
    samples = sd.read_dataset(_dataset_dir(args, cfg), split="train")
    if not samples:
        raise ValidationError("training split is empty")
    resume = None
    out = Path(args.out)
    if args.resume and out.exists():
        resume = load_checkpoint(out, args.module)
        log.info("resuming %s from iteration %s", args.module, resume.metadata.get("iterations"))

    def progress(row, *_):
        it = int(row["iteration"])
        if cfg.log_every and it % max(cfg.log_every, 1) == 0:
            log.debug("%s it=%d loss=%.5f", args.module, it, row["loss"])

    _, ckpt = train(samples, cfg, iterations=args.iterations, resume=resume, callback=progress)
    save_checkpoint(ckpt, out)
    LossLog.unpack(ckpt, columns).write_tsv(log_path_for(out))
    log.info("saved %s checkpoint to %s (final loss %.5f)", args.module, out, ckpt.metadata["final_loss"])


def _find(directory, sample_id):
    for sid, seed, split in sd.read_manifest(directory):
        if sid == sample_id:
            return sd.read_sample(directory, sid, seed, split)
    raise ValidationError(f"sample id {sample_id!r} not in {directory}/manifest.tsv")


def cmd_tryon(args):
    data = _dataset_dir(args)
    person = _find(data, args.person)
    garment = _find(data, args.garment)
    models = pipeline.load_models(args.ckpt_dir)
    res = pipeline.run_tryon(person, garment, models, args.tau)
    pipeline.save_png(res.image, args.out)
    log.info("wrote %s (skin inpainted: %s)", args.out, res.inpainted)


def cmd_eval(args):
    samples = sd.read_dataset(_dataset_dir(args), split=args.split)
    if not samples:
        raise ValidationError(f"split {args.split!r} is empty")
    models = pipeline.load_models(args.ckpt_dir)
    rows = pipeline.evaluate(samples, models, args.tau)
    n = len(rows)
    mean = ("mean", sum(r[1] for r in rows) / n, sum(r[2] for r in rows) / n, sum(r[3] for r in rows) / n)
    _emit(pipeline.to_tsv(["id", "mse", "psnr", "ssim"], rows + [mean]), args.out)


def cmd_select_trend(args):
    taus = pipeline.parse_tau_range(args.tau)
    samples = sd.read_dataset(_dataset_dir(args), split=args.split)
    if not samples:
        raise ValidationError(f"split {args.split!r} is empty")
    model = ptm.load_ptm(load_checkpoint(Path(args.ckpt_dir) / pipeline.CHECKPOINT_NAMES["ptm"], ptm.MODULE_ID))
    rows = metrics.selection_proportions(samples, model, taus)
    _emit(pipeline.to_tsv(["tau", "p3", "p4", "p5", "p6"], rows), args.out)


def cmd_erasure_ladder(args):
    if args.dump:
        sys.stdout.write(rsim.ladder_tsv())
        return
    spec = rsim.erasure_ladder(args.level)
    print(f"level {args.level}: probability={spec.probability} area={spec.area_range} aspect={spec.aspect_range}")


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgvton", description="Progressive virtual try-on on synthetic data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=48)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one module")
    t.add_argument("module", choices=sorted(TRAINERS))
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data")
    t.add_argument("--iterations", type=int, help="stop after this many total iterations")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("try-on", help="dress one person in one garment")
    r.add_argument("--person", required=True)
    r.add_argument("--garment", required=True)
    r.add_argument("--ckpt-dir", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data")
    r.add_argument("--tau", type=float, default=0.2)
    r.set_defaults(func=cmd_tryon)

    e = sub.add_parser("eval", help="MSE/PSNR/SSIM of paired reconstructions")
    e.add_argument("--ckpt-dir", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--data")
    e.add_argument("--tau", type=float, default=0.2)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("select-trend", help="warp-scale selection proportions per tau")
    s.add_argument("--tau", default="0.0:1.0:0.1")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_select_trend)

    el = sub.add_parser("erasure-ladder", help="show the erasure-extent ladder")
    el.add_argument("--dump", action="store_true", help="print the full table as TSV")
    el.add_argument("--level", type=int, default=5)
    el.set_defaults(func=cmd_erasure_ladder)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"pgvton {args.command}: numerical error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"pgvton {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, PGVTError) as exc:
        print(f"pgvton {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
