"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (bad or inconsistent
files, invalid values), 3 numerical failure (non-finite loss, failed
gradient check).  Metrics go to stdout as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io
from .fields import TransformedGrid, jacobian_folding, warp
from .grid import Volume, build_pyramid
from .loss import LossConfig
from .metrics import MetricsReport, dice, tre
from .multilevel import (MultilevelConfig, MultilevelResult, apply_to_points, level_transform,
                         register, train_progressive)
from .padding import crop, pad_to_multiple
from .solver import NumericalError
from .unet import UNetConfig, xavier_init

log = logging.getLogger("mlreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

CASE_FILES = {"F": "fixed.json", "M": "moving.json", "bF": "fixed_labels.json",
              "bM": "moving_labels.json"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dims(text: str) -> tuple:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ with positive values, got {text!r}")
    return tuple(parts)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, default=float)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(a):
    from .synth import generate_synth
    case = generate_synth(a.seed, a.dims, a.labels, a.max_disp)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_volume(case.F, out / CASE_FILES["F"])
    io.write_volume(case.M, out / CASE_FILES["M"])
    io.write_labels(case.bF, out / CASE_FILES["bF"])
    io.write_labels(case.bM, out / CASE_FILES["bM"])
    io.write_field(case.truth, out / "truth_field.json")
    io.write_landmarks(case.landmarks_fixed, out / "landmarks_fixed.csv")
    io.write_landmarks(case.landmarks_moving, out / "landmarks_moving.csv")
    _emit({"seed": a.seed, "dims": list(case.F.dims), "labels": list(case.bF.labels()),
           "max_disp_mm": a.max_disp, "landmarks": len(case.landmarks_fixed),
           "out_dir": str(out)})


def cmd_pyramid(a):
    v = io.read_volume(a.input)
    padded, rec = pad_to_multiple(v, 2 ** (a.levels - 1))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    levels = []
    for l, p in enumerate(build_pyramid(padded, a.levels), start=1):
        io.write_volume(p, out / f"level_{l}.json")
        levels.append({"level": l, "dims": list(p.dims), "spacing_mm": list(p.spacing_mm)})
    _emit({"levels": levels, "padded": list(rec.pad)})


def _case_dirs(data_dir: Path) -> list:
    if (data_dir / CASE_FILES["F"]).exists():
        return [data_dir]
    dirs = sorted(d for d in data_dir.iterdir() if (d / CASE_FILES["F"]).exists())
    if not dirs:
        raise ValueError(f"no cases under {data_dir} (expected {CASE_FILES['F']} files)")
    return dirs


def _load_case(d: Path):
    F = io.read_volume(d / CASE_FILES["F"])
    M = io.read_volume(d / CASE_FILES["M"])
    has_masks = (d / CASE_FILES["bF"]).exists() and (d / CASE_FILES["bM"]).exists()
    bF = io.read_labels(d / CASE_FILES["bF"]) if has_masks else None
    bM = io.read_labels(d / CASE_FILES["bM"]) if has_masks else None
    return F, M, bF, bM


def cmd_train(a):
    t0 = time.perf_counter()
    cases = [_load_case(d) for d in _case_dirs(Path(a.data_dir))]
    cfg = MultilevelConfig(levels=a.levels, epochs=a.epochs, lr=a.lr, init=a.init,
                           loss=LossConfig(alpha=a.alpha, beta=a.beta, ngf_eps=a.ngf_eps),
                           unet=UNetConfig())
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = train_progressive(cases, cfg, seed=a.seed, log_path=out / "train_log.csv")
    for l, w in enumerate(res.weights, start=1):
        io.write_weights(w, io.weights_path(out, l))
    final = {}
    for row in res.log:
        final[row["level"]] = row["mean_loss"]
    _emit({"cases": len(cases), "levels": a.levels, "epochs": a.epochs,
           "final_mean_loss": {str(k): v for k, v in sorted(final.items())},
           "runtime_s": time.perf_counter() - t0})


def _crop_result(res: MultilevelResult, rec) -> MultilevelResult:
    """Restrict a result on a padded grid to the original voxels.

    Coarser fields stay whole: they are evaluated at world points, and the
    cropped finest grid is a subset of the padded one.
    """
    if rec.empty:
        return res
    fields = [crop(res.fields[0], rec)] + list(res.fields[1:])
    Y = level_transform(fields, fields[0].grid, 0)
    fold = jacobian_folding(Y.displacement())[1]
    return MultilevelResult(fields, Y, res.loss_before, res.loss_after, fold, res.runtime_s)


def _mask_pair(a):
    if (a.masks_fixed is None) != (a.masks_moving is None):
        raise UsageError("--masks-fixed and --masks-moving must be given together")
    if a.masks_fixed is None:
        return None, None
    return io.read_labels(a.masks_fixed), io.read_labels(a.masks_moving)


def cmd_register(a):
    F, M = io.read_volume(a.fixed), io.read_volume(a.moving)
    bF, bM = _mask_pair(a)
    weights = []
    for l in range(1, a.levels + 1):
        path = io.weights_path(a.weights_dir, l)
        if not path.exists():
            raise ValueError(f"missing weights for level {l}: {path}")
        weights.append(io.read_weights(path))
    m = 2 ** (a.levels - 1) * max(w.config.divisor for w in weights)
    Fp, rec = pad_to_multiple(F, m)
    Mp, _ = pad_to_multiple(M, m)
    bFp = pad_to_multiple(bF, m)[0] if bF is not None else None
    bMp = pad_to_multiple(bM, m)[0] if bM is not None else None
    cfg = MultilevelConfig(levels=a.levels, predictors=tuple(weights))
    res = _crop_result(register(Fp, Mp, cfg, bFp, bMp), rec)
    io.write_result(res, a.out)
    report = MetricsReport(folding_fraction=res.folding_fraction, runtime_s=res.runtime_s)
    if bF is not None:
        report.dice, report.mean_dice = dice(bF, warp(bM, res.Y))
    _emit(report.as_dict())


def _landmarks(path, grid):
    if io.is_landmark_csv(path):
        return io.read_landmarks(path)
    return io.read_dirlab_landmarks(path, grid)


def cmd_eval(a):
    res = io.read_result(a.result)
    bF, bM = _mask_pair(a)
    if (a.landmarks_fixed is None) != (a.landmarks_moving is None):
        raise UsageError("--landmarks-fixed and --landmarks-moving must be given together")
    report = MetricsReport(folding_fraction=res.folding_fraction)
    if bF is not None:
        Y = TransformedGrid(bF.grid, apply_to_points(res, bF.grid.points()))
        report.dice, report.mean_dice = dice(bF, warp(bM, Y))
    if a.landmarks_fixed is not None:
        grid = res.fields[0].grid
        lf, lm = _landmarks(a.landmarks_fixed, grid), _landmarks(a.landmarks_moving, grid)
        report.tre_mean_mm, report.tre_std_mm, _ = tre(res, lf, lm)
    _emit(report.as_dict())


def cmd_gradcheck(a):
    from .gradcheck import TOLERANCES, passed, run_all
    errors = run_all(a.seed)
    ok = passed(errors, a.tolerance)
    tol = {k: a.tolerance for k in errors} if a.tolerance is not None else dict(TOLERANCES)
    _emit({"seed": a.seed, "max_rel_err": max(errors.values()), "errors": errors,
           "tolerances": tol, "passed": ok})
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bench(a):
    rng = np.random.default_rng(0)
    cfg_net = UNetConfig()
    weights = tuple(xavier_init(cfg_net, l) for l in range(a.levels))
    F = Volume(rng.normal(size=a.dims), (1.0, 1.0, 1.0))
    M = Volume(rng.normal(size=a.dims), (1.0, 1.0, 1.0))
    m = 2 ** (a.levels - 1) * cfg_net.divisor
    F, _ = pad_to_multiple(F, m)
    M, _ = pad_to_multiple(M, m)
    cfg = MultilevelConfig(levels=a.levels, predictors=weights)
    times = []
    for _ in range(a.repeats):
        t0 = time.perf_counter()
        register(F, M, cfg)
        times.append(time.perf_counter() - t0)
    _emit({"dims": list(F.dims), "levels": a.levels, "repeats": a.repeats,
           "median_s": float(np.median(times)), "min_s": float(np.min(times)), "times_s": times})


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlreg", description="Multilevel learned deformable registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic case with ground truth")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--dims", type=_dims, default=(32, 32, 32))
    s.add_argument("--labels", type=int, default=5)
    s.add_argument("--max-disp", type=float, default=4.0, help="largest displacement in mm")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pyramid", help="write the image pyramid of a volume")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pyramid)

    s = sub.add_parser("train", help="progressive multilevel training")
    s.add_argument("--data-dir", required=True, help="case directory or directory of cases")
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--ngf-eps", type=float, default=100.0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", choices=("xavier", "pretrained"), default="pretrained")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("register", help="register a pair with trained networks")
    s.add_argument("--fixed", required=True)
    s.add_argument("--moving", required=True)
    s.add_argument("--weights-dir", required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--out", required=True, help="result directory")
    s.add_argument("--masks-fixed")
    s.add_argument("--masks-moving")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", help="Dice, landmark error and folding of a result")
    s.add_argument("--result", required=True, help="result directory or field file")
    s.add_argument("--masks-fixed")
    s.add_argument("--masks-moving")
    s.add_argument("--landmarks-fixed")
    s.add_argument("--landmarks-moving")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--tolerance", type=float, help="one relative tolerance for every check")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time multilevel inference")
    s.add_argument("--dims", type=_dims, default=(32, 32, 32))
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def _validate(a):
    for name in ("levels", "epochs", "repeats", "labels"):
        if getattr(a, name, 1) < 1:
            raise UsageError(f"mlreg {a.command}: error: --{name} must be >= 1")


def _thread_limit():
    raw = os.environ.get("MLREG_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"mlreg: error: MLREG_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        _validate(a)
        threads = _thread_limit()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            code = a.func(a)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"mlreg {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mlreg {a.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (io.FormatError, ValueError, OSError) as exc:
        code = getattr(exc, "code", None)
        tag = f" [code {int(code)}]" if code is not None else ""
        print(f"mlreg {a.command}: data error{tag}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
