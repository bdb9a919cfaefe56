"""Shared table printing for the experiment scripts."""

from bmax.experiments import PAPER_METHODS, cumulative_frequency, run_replications


def run_and_print(spec, replicates, workers, boundaries):
    result = run_replications(spec, PAPER_METHODS, replicates, workers=workers)
    keys = result.keys()
    print(f"{'method':<10} {'k':>5} {'mean':>9} {'sd':>9}")
    for key, k in keys:
        print(f"{key:<10} {'' if k is None else k:>5} {result.mean(key, k):9.4f} {result.sd(key, k):9.4f}")
    print()
    print("cumulative frequency (regret <= boundary)")
    print(f"{'method':<14}" + "".join(f"{b:>7g}" for b in boundaries))
    table = cumulative_frequency(result, boundaries)
    for (key, k), counts in table.items():
        if k not in (None, 150):
            continue
        print(f"{key:<14}" + "".join(f"{c:>7d}" for c in counts))
    return result
