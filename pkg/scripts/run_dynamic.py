"""Dynamic-preference comparison: the preferred label changes every 20 instances.

The five labels with the highest attainable pool-averaged probability are
cycled in order.  Same options and outputs as ``run_stationary.py``.

    python scripts/run_dynamic.py --envs 0,1,2,3,4 --runs 100 --out results/dynamic
"""

from run_stationary import parse_args, run

if __name__ == "__main__":
    run("dynamic", parse_args("dynamic"))
