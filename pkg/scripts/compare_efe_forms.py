"""Compare the two extrinsic-term forms of the active-inference agent.

``surprise`` scores options by the expected negative log preference of the
predicted outcome; ``divergence`` by the KL divergence from the predicted
outcome distribution to the preference.  Both share the epistemic term.
Prints the mean final regret of each form per environment and schedule.
"""

import argparse

from aifbandit.environment import EnvSpec
from aifbandit.harness import ExperimentConfig, ScheduleSpec, default_workers, paired_less_pvalue, run_experiment

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--envs", default="0,1,2,3,4")
p.add_argument("--runs", type=int, default=20)
p.add_argument("--workers", type=int, default=default_workers())
args = p.parse_args()

for kind in ("stationary", "dynamic"):
    for seed in (int(s) for s in args.envs.split(",")):
        finals = {}
        for form in ("surprise", "divergence"):
            cfg = ExperimentConfig(env=EnvSpec(seed=seed), agents=("aif",), runs=args.runs, seed=seed,
                                   schedule=ScheduleSpec(kind=kind), workers=args.workers,
                                   hyper={"aif": {"gamma": 30.0, "extrinsic": form}})
            finals[form] = run_experiment(cfg).final_regrets("aif")
        pv = paired_less_pvalue(finals["surprise"], finals["divergence"])
        print(f"{kind:10s} env {seed}: surprise {finals['surprise'].mean():6.2f}  "
              f"divergence {finals['divergence'].mean():6.2f}  p(surprise <) = {pv:.3g}")
