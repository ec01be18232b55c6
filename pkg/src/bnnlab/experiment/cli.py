"""Command line entry point: ``bnnlab verify|analyze|train|ablate``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from ..autodiff import composed_batch_norm, grad_check
from ..harness import MCConfig, GradVarianceReport, compare_report, measure_gradient_variance
from .ablation import ABLATION_HEADER, run_ablation
from .config import analysis_spec, dataset_spec, read_kv, train_config
from .csvio import emit_csv, to_csv
from .data import load_dataset
from .train import RunRecord, train


def _write(rows, header, out):
    if out:
        emit_csv(rows, out, header)
    else:
        sys.stdout.write(to_csv(rows, header))


def _gradcheck_suite(seed: int):
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    yield "linear", lambda t, x, w: t.linear(x, w), {"x": r(4, 3), "w": r(3, 2)}
    yield "batch_norm (fused)", (lambda t, s, g, b: t.batch_norm(s, g, b, eps=0.0)[0]), \
        {"s": r(8, 4), "g": r(1, 4), "b": r(1, 4)}
    yield "batch_norm (composed)", lambda t, s, g, b: composed_batch_norm(t, s, g, b), \
        {"s": r(8, 4), "g": r(1, 4), "b": r(1, 4)}
    yield "center_scale", lambda t, s: t.center_scale(s, 0.25)[0], {"s": r(8, 4)}
    yield "relu", lambda t, x: t.relu(x), {"x": r(6, 5) + 0.05}
    labels = rng.integers(0, 3, 5)
    yield "softmax_xent", lambda t, z: t.softmax_cross_entropy(z, labels), {"z": r(5, 3)}
    yield "linear+bn+relu+linear", (lambda t, x, w1, g, b, w2: t.linear(
        t.relu(t.batch_norm(t.linear(x, w1), g, b, eps=0.0)[0]), w2)), \
        {"x": r(8, 5), "w1": r(5, 4), "g": r(1, 4), "b": r(1, 4), "w2": r(4, 3)}


def cmd_verify(args) -> int:
    ok = True
    for name, fn, inputs in _gradcheck_suite(args.seed):
        rep = grad_check(fn, inputs, tolerance=args.tolerance)
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<24} max rel err {rep.worst:.2e} (tol {rep.tolerance:g})")
    return 0 if ok else 1


def cmd_analyze(args) -> int:
    kv = read_kv(args.spec)
    spec, scheme, extra = analysis_spec(kv)
    mc = MCConfig(trials=args.trials, batch_size=args.batch or spec.batch_size, master_seed=args.seed,
                  input_dist=extra.get("input", "rademacher"), ste=extra.get("ste", "identity"))
    report = measure_gradient_variance(spec, scheme, mc)
    _write(report.rows(), GradVarianceReport.CSV_HEADER, args.out)
    for v in compare_report(report, args.tolerance):
        print(f"layer {v.layer}: measured/predicted ({v.model}) = {v.ratio:.3f} "
              f"{'pass' if v.passed else 'FAIL'}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = train_config(read_kv(args.config))
    data = load_dataset(dataset_spec(read_kv(args.data)))
    rec = train(cfg, data)
    _write(rec.rows(), RunRecord.CSV_HEADER, args.out)
    print(f"status {rec.status}, best accuracy {rec.best_accuracy:.4f}, "
          f"wall time {rec.wall_time:.1f}s", file=sys.stderr)
    return 0 if rec.status == "ok" else 2


def cmd_ablate(args) -> int:
    kv = read_kv(args.suite)
    data = load_dataset(dataset_spec(read_kv(args.data))) if args.data else None
    rows = run_ablation(kv, data)
    _write(rows, ABLATION_HEADER, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="finite-difference check of every differentiable op")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("analyze", help="Monte-Carlo gradient variance report (CSV)")
    a.add_argument("--spec", required=True)
    a.add_argument("--trials", type=int, default=200)
    a.add_argument("--batch", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tolerance", type=float, default=1.33)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train one network (per-epoch CSV)")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="run a normalizer x variance suite (CSV)")
    s.add_argument("--suite", required=True)
    s.add_argument("--data", help="dataset spec; defaults to data.* keys in the suite")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
