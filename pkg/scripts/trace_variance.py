"""Per-channel Hessian trace estimates on a tiny net versus the explicit Hessian.

Prints the relative error of the probe estimator at several probe counts next to
its predicted standard deviation, sqrt(sum of squared off-diagonal entries in
the channel's rows / probes) / |trace|. Off-block curvature sets the noise floor.

    python scripts/trace_variance.py --seed 4 --probes 100 1000 4000
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from onda.model import build  # noqa: E402
from onda.pruning import estimate_channel_traces  # noqa: E402
from oracles import complex_step_hessian, hutchinson_std, probe_loss, tiny_spec  # noqa: E402


def run():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=4)
    ap.add_argument("--probes", type=int, nargs="+", default=[100, 1000, 4000])
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    m = build(tiny_spec(), args.seed)
    x = rng.standard_normal((4, 1, 4, 4))
    loss = probe_loss(m, x, rng)
    H = complex_step_hessian(loss, m.params.values)
    ests = {n: estimate_channel_traces(m, lambda th, _: loss(th), x, n_probes=n, rng_seed=0, clamp=False)
            for n in args.probes}
    print(f"{'channel':<9}{'trace':>11}" + "".join(f"{f'err@{n}':>11}{'sd':>8}" for n in args.probes))
    for cid in ests[args.probes[0]]:
        idx = m.params.layout.channel_indices(cid.layer_index, cid.channel_index, ("weight", "bias"))
        exact = float(np.trace(H[np.ix_(idx, idx)]))
        cells = ""
        for n in args.probes:
            err = abs(ests[n][cid] - exact) / abs(exact) if exact else 0.0
            sd = hutchinson_std(H, idx, n) / abs(exact) if exact else 0.0
            cells += f"{err:>11.1%}{sd:>8.1%}"
        print(f"L{cid.layer_index}c{cid.channel_index:<6}{exact:>11.4g}{cells}")


if __name__ == "__main__":
    run()
