"""Command-line front end.

    ecfse synth    --case case14 --plan rtu-all --sigma 0.001 --seed 1 --out meas.json
    ecfse estimate --case case14 --plan pmu-all --seed 1 --out ecf.json
    ecfse wls      --case case14 --plan rtu-all --init flat --out wls.json
    ecfse compare  --case case14 --plan rtu-all --seeds 1..10 --out report.json --format table

Exit codes: 0 success, 2 when any method ends singular / divergent /
unanchored (the report is still written), 1 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import BUNDLED_CASES, load_bundled_case
from .ecf import estimate_ecf
from .measurements import dumps as dump_measurements
from .measurements import loads as load_measurements
from .metrics import ecf_metrics, wls_metrics
from .netmodel import CaseError, build_ybus, load_case
from .synth import PRNG_NAME, PlanConflict, compute_truth, load_plan, synthesize_measurements, true_state_from_case
from .wls import WlsOptions, estimate_wls

METHODS = ("ecf", "wls_flat", "wls_case")
EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class BadConfig(ValueError):
    pass


@dataclass
class RunConfig:
    case_path: str
    plan: str = "rtu-all"
    sigma: float = 0.001
    seeds: list[int] = field(default_factory=lambda: [1])
    methods: tuple[str, ...] = METHODS
    output_path: Optional[str] = None
    format: str = "json"
    max_iters: int = 20
    meas_path: Optional[str] = None
    timing: bool = False

    def check(self):
        if not self.methods:
            raise BadConfig("at least one method is required")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise BadConfig(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if not self.sigma >= 0:
            raise BadConfig("sigma must be >= 0")
        if self.format not in ("json", "table"):
            raise BadConfig("format must be json or table")
        if not self.seeds:
            raise BadConfig("no seeds given")


def parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise BadConfig(f"empty seed range {text}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def load_network(case: str):
    if case in BUNDLED_CASES:
        return case, load_bundled_case(case)
    try:
        return Path(case).stem, load_case(case)
    except OSError as exc:
        raise IOError(f"cannot read case {case}: {exc}") from exc


def write_atomic(path: str, text: str):
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(v):
    """Make floats JSON-safe (NaN/inf become null)."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# pipeline


def _measurements(cfg: RunConfig, net, adm, truth, seed: int):
    if cfg.meas_path:
        with open(cfg.meas_path) as fh:
            return load_measurements(net, fh.read())
    plan = load_plan(cfg.plan, net)
    return synthesize_measurements(net, truth, plan, cfg.sigma, seed)


def _run_method(method: str, cfg: RunConfig, net, adm, ms, truth) -> dict:
    if method == "ecf":
        est = estimate_ecf(net, adm, ms)
        out = {"status": est.status, "iterations": 1, "factorizations": est.factorizations,
               "objective": est.objective, "kkt_residual": est.kkt_residual}
        if est.ok:
            out.update(ecf_metrics(net, adm, ms, truth, est).summary())
            out["zi_multipliers"] = {
                f"{int(net.bus_ids[i])}{p}": float(l) for (i, p), l in zip(_zi_rows(ms), est.lam)
            }
        else:
            out.update({"res": None, "mse_z": None, "mse_x": None})
        if cfg.timing:
            out["solve_time"] = est.solve_time
        return out
    init = "flat" if method == "wls_flat" else "case_data"
    res = estimate_wls(net, adm, ms, init, WlsOptions(max_iters=cfg.max_iters))
    out = {"status": "converged" if res.converged else "diverged",
           "divergence_reason": res.divergence_reason, "iterations": res.iterations,
           "objective": res.objective, "final_gradient_norm": res.final_gradient_norm}
    out.update(wls_metrics(net, adm, ms, truth, res, method).summary())
    return out


def _zi_rows(ms):
    return [(i, p) for i in sorted(ms.zi_buses) for p in ("R", "I")]


def _failed(result: dict) -> bool:
    return result["status"] not in ("optimal", "converged")


def run_compare(cfg: RunConfig) -> tuple[int, dict]:
    cfg.check()
    name, net = load_network(cfg.case_path)
    adm = build_ybus(net)
    truth = compute_truth(net, adm, true_state_from_case(net))
    seeds = []
    for seed in cfg.seeds:
        ms = _measurements(cfg, net, adm, truth, seed)
        results = {m: _run_method(m, cfg, net, adm, ms, truth) for m in cfg.methods}
        seeds.append({"seed": seed, "results": results})

    aggregate = {}
    for m in cfg.methods:
        rows = [s["results"][m] for s in seeds]
        agg = {"runs": len(rows), "failures": sum(_failed(r) for r in rows)}
        for key in ("res", "mse_z", "mse_x", "iterations"):
            vals = [r[key] for r in rows if r.get(key) is not None and not _failed(r)]
            agg[f"{key}_mean"] = float(np.mean(vals)) if vals else None
        aggregate[m] = agg

    report = {
        "case": name,
        "n_bus": net.n,
        "plan": cfg.plan if not cfg.meas_path else cfg.meas_path,
        "sigma": cfg.sigma,
        "prng": PRNG_NAME,
        "methods": list(cfg.methods),
        "notes": {
            "mse_z_space": "ecf scored in its current-space channels (anchor included), "
                           "wls in measured quantities; ZI pseudo-channels excluded",
        },
        "seeds": seeds,
        "aggregate": aggregate,
    }
    report = _clean(report)
    failed = any(_failed(s["results"][m]) for s in seeds for m in cfg.methods)
    return (EXIT_FAILED if failed else EXIT_OK), report


def render_table(report: dict) -> str:
    """Aligned text view of a report, in report order."""
    head = f"{report['case']}  plan={report['plan']}  sigma={report['sigma']}"
    cols = ("method", "seed", "res", "MSE_z", "MSE_x", "#iter", "note")
    lines = [head, "  ".join(f"{c:>10}" for c in cols)]

    def num(v):
        return f"{v:10.4g}" if isinstance(v, (int, float)) and v is not None else f"{'-':>10}"

    def note(r):
        if r["status"] in ("optimal", "converged"):
            return ""
        return r.get("divergence_reason") or r["status"]

    for m in report["methods"]:
        for s in report["seeds"]:
            r = s["results"][m]
            lines.append("  ".join([f"{m:>10}", f"{s['seed']:>10}", num(r["res"]), num(r["mse_z"]),
                                    num(r["mse_x"]), f"{r['iterations']:>10}", note(r)]).rstrip())
        a = report["aggregate"][m]
        fail = f"{a['failures']}/{a['runs']} failed" if a["failures"] else ""
        it = a["iterations_mean"]
        lines.append("  ".join([f"{m:>10}", f"{'mean':>10}", num(a["res_mean"]), num(a["mse_z_mean"]),
                                num(a["mse_x_mean"]), f"{it:10.3g}" if it is not None else f"{'-':>10}",
                                fail]).rstrip())
    return "\n".join(lines) + "\n"


def run_synth(cfg: RunConfig) -> str:
    _, net = load_network(cfg.case_path)
    adm = build_ybus(net)
    truth = compute_truth(net, adm, true_state_from_case(net))
    ms = synthesize_measurements(net, truth, load_plan(cfg.plan, net), cfg.sigma, cfg.seeds[0])
    text = dump_measurements(net, ms) + "\n"
    if cfg.output_path:
        write_atomic(cfg.output_path, text)
    return text


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecfse", description="Equivalent-circuit vs WLS state estimation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp_, seeds=False):
        sp_.add_argument("--case", required=True, help=f"case file or bundled name {BUNDLED_CASES}")
        sp_.add_argument("--plan", default="rtu-all", help="built-in plan name or plan JSON path")
        sp_.add_argument("--sigma", type=float, default=0.001)
        sp_.add_argument("--seed", type=int, default=1)
        if seeds:
            sp_.add_argument("--seeds", help="N..M range or comma list (overrides --seed)")
        sp_.add_argument("--out", help="output path (stdout when omitted)")

    common(sub.add_parser("synth", help="write a synthetic measurement JSON"))
    for name, hlp in (("estimate", "run the ECF estimator"), ("wls", "run the WLS baseline")):
        s = sub.add_parser(name, help=hlp)
        common(s)
        s.add_argument("--meas", help="measurement JSON instead of synthesizing")
        s.add_argument("--format", choices=("json", "table"), default="json")
        s.add_argument("--timing", action="store_true", help="include wall-clock times")
        if name == "wls":
            s.add_argument("--init", choices=("flat", "case"), default="case")
            s.add_argument("--max-iters", type=int, default=20)
    c = sub.add_parser("compare", help="run several methods over several seeds")
    common(c, seeds=True)
    c.add_argument("--methods", default=",".join(METHODS))
    c.add_argument("--format", choices=("json", "table"), default="json")
    c.add_argument("--max-iters", type=int, default=20)
    c.add_argument("--timing", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    seeds = parse_seeds(args.seeds) if getattr(args, "seeds", None) else [args.seed]
    if args.command == "estimate":
        methods = ("ecf",)
    elif args.command == "wls":
        methods = ("wls_flat",) if args.init == "flat" else ("wls_case",)
    elif args.command == "compare":
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    else:
        methods = METHODS
    return RunConfig(
        case_path=args.case, plan=args.plan, sigma=args.sigma, seeds=seeds, methods=methods,
        output_path=args.out, format=getattr(args, "format", "json"),
        max_iters=getattr(args, "max_iters", 20), meas_path=getattr(args, "meas", None),
        timing=getattr(args, "timing", False),
    )


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            text = run_synth(cfg)
            if not cfg.output_path:
                sys.stdout.write(text)
            return EXIT_OK
        code, report = run_compare(cfg)
        text = json.dumps(report, indent=1) + "\n"
        table = render_table(report) if cfg.format == "table" else None
        if cfg.output_path:
            write_atomic(cfg.output_path, text)
            if table is not None:
                write_atomic(str(Path(cfg.output_path).with_suffix(".txt")), table)
        if table is not None:
            sys.stdout.write(table)
        elif not cfg.output_path:
            sys.stdout.write(text)
        return code
    except (BadConfig, PlanConflict, CaseError, ValueError) as exc:
        print(f"ecfse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ecfse: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
