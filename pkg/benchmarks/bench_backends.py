"""Compare the compiled kernels with the numpy fallback.

Two levels are timed: the individual kernels on fixed random inputs, and an
end-to-end simulate-plus-weight run in a subprocess per backend (backend
selection happens at import, so a fresh interpreter is needed).

    python3 benchmarks/bench_backends.py [--paths 2000] [--steps 500] [--d 2] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from malliavin_mc import _pykernels
from malliavin_mc._backend import available, load

E2E = r"""
import json, sys, time
from malliavin_mc._backend import kernels
from malliavin_mc.flow import TimeGrid, simulate_paths
from malliavin_mc.model import builtin_model
from malliavin_mc.rng import brownian_increments
from malliavin_mc.weight import batch_weights
n_paths, n_steps, d = map(int, sys.argv[1:4])
model = builtin_model("trig_multiplicative", {"eps": 0.3, "alpha": 0.1, "d": d})
grid = TimeGrid(1.0, n_steps)
x0 = [0.5] * d
out = {"backend": kernels.NAME}
t = time.perf_counter(); brownian_increments(0, 0, n_paths, n_steps, d, 1.0)
out["rng"] = time.perf_counter() - t
t = time.perf_counter(); batch = simulate_paths(model, x0, grid, 0, 0, n_paths)
out["simulate"] = time.perf_counter() - t
t = time.perf_counter(); batch_weights(batch, model, [1.0] * d)
out["weights"] = time.perf_counter() - t
print(json.dumps(out))
"""


def kernel_inputs(N, d, seed=0):
    rng = np.random.default_rng(seed)
    m = d
    return dict(
        J=rng.standard_normal((N, d, d)), Jinv=rng.standard_normal((N, d, d)),
        B=rng.standard_normal((N, d, d)), S=rng.standard_normal((N, m, d, d)),
        dW=rng.standard_normal((N, m)) * 0.03, P=rng.standard_normal((N, m, d)),
        H2=rng.standard_normal((N, d, d)), H=rng.standard_normal((N, m, d, d)),
        u=rng.standard_normal((N, d)), w=rng.standard_normal((N, d)),
    )


def time_kernels(mod, N, d, repeat=5, number=20):
    x = kernel_inputs(N, d)
    acc = np.zeros((N, 5))
    g1 = np.zeros((N, d))
    cases = {
        "noise_matrix": lambda: mod.noise_matrix(x["S"], x["dW"]),
        "flow_step": lambda: mod.flow_step(x["J"], x["Jinv"], x["B"], x["S"], x["dW"], 1e-3, True),
        "weight_step": lambda: mod.weight_step(acc, g1, x["P"], x["Jinv"], x["S"], x["H2"], x["H"],
                                               x["u"], x["w"], x["dW"], 0.5, 1e-3),
        "standard_normals": lambda: mod.standard_normals(1, 2, 0, 0, N, 2 * d),
    }
    return {name: min(timeit.repeat(fn, repeat=repeat, number=number)) / number
            for name, fn in cases.items()}


def time_end_to_end(backend, n_paths, n_steps, d):
    env = dict(os.environ, MALLIAVIN_MC_BACKEND=backend)
    proc = subprocess.run([sys.executable, "-c", E2E, str(n_paths), str(n_steps), str(d)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    backends = available()
    results = {"n_paths": args.paths, "n_steps": args.steps, "d": args.d, "kernels": {}, "e2e": {}}
    for name in backends:
        mod = _pykernels if name == "python" else load(name)
        results["kernels"][name] = time_kernels(mod, args.paths, args.d)
        results["e2e"][name] = time_end_to_end(name, args.paths, args.steps, args.d)

    print(f"kernels, {args.paths} paths, d={args.d} (seconds per call)")
    names = list(results["kernels"][backends[0]])
    print(f"  {'kernel':18s}" + "".join(f"{b:>12s}" for b in backends)
          + ("     speedup" if len(backends) > 1 else ""))
    for k in names:
        row = [results["kernels"][b][k] for b in backends]
        line = f"  {k:18s}" + "".join(f"{t:12.2e}" for t in row)
        if len(backends) > 1:
            line += f"{row[-1] / row[0]:12.1f}x"
        print(line)
    print(f"end to end, {args.paths} paths x {args.steps} steps (seconds)")
    for stage in ("rng", "simulate", "weights"):
        row = [results["e2e"][b][stage] for b in backends]
        line = f"  {stage:18s}" + "".join(f"{t:12.3f}" for t in row)
        if len(backends) > 1:
            line += f"{row[-1] / row[0]:12.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
