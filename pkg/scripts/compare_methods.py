"""ECF vs WLS comparison over ten seeds on the bundled cases.

    python scripts/compare_methods.py                      # case14, case118
    python scripts/compare_methods.py --cases case2000 --plans rtu-all rtu-flows
"""

import argparse

from ecfse.cli import RunConfig, render_table, run_compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", nargs="+", default=["case14", "case118"])
    ap.add_argument("--plans", nargs="+", default=["rtu-all", "rtu-flows"])
    ap.add_argument("--sigma", type=float, default=0.001)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    for case in args.cases:
        for plan in args.plans:
            cfg = RunConfig(case, plan=plan, sigma=args.sigma, seeds=list(range(1, args.seeds + 1)))
            _, report = run_compare(cfg)
            print(render_table(report))


if __name__ == "__main__":
    main()
