"""Streaming activation statistics: chunked updates, shard merging, task profiles.

Runs on synthetic data only; no model involved.
"""

import numpy as np

from taskprune import stats as st

WIDTH = 8
SEED = 0


def brute_force(data):
    mean = data.mean(axis=0)
    var = ((data - mean) ** 2).mean(axis=0)
    l2 = np.sqrt((data ** 2).sum(axis=0))
    return mean, var, l2


def main():
    rng = np.random.default_rng(SEED)
    data = rng.standard_normal((5000, WIDTH)) * np.linspace(0.5, 4.0, WIDTH) + 1.5

    # feed the same stream in uneven chunks
    acc = st.ActivationStats(layer=0, site="mlp", task_id="demo", width=WIDTH)
    for chunk in np.array_split(data, 13):
        acc.add_tokens(chunk)
        acc.n_prompts += 1  # one "prompt" per chunk, as the collector would count

    mean, var, l2 = brute_force(data)
    print(f"streamed {acc.n} tokens in 13 chunks")
    print(f"  max |mean - two_pass|: {np.abs(acc.mean() - mean).max():.3e}")
    print(f"  max |var  - two_pass|: {np.abs(acc.var() - var).max():.3e}")
    print(f"  max |l2   - two_pass|: {np.abs(acc.raw_l2() - l2).max():.3e}")

    # shards computed independently merge into the same totals
    half_a = st.ActivationStats(layer=0, site="mlp", task_id="demo", width=WIDTH)
    half_b = st.ActivationStats(layer=0, site="mlp", task_id="demo", width=WIDTH)
    half_a.add_tokens(data[:2200])
    half_a.n_prompts = 6
    half_b.add_tokens(data[2200:])
    half_b.n_prompts = 7
    merged = st.merge(half_a, half_b)
    print(f"merged shards: n={merged.n}, "
          f"max |var - streamed|: {np.abs(merged.var() - acc.var()).max():.3e}")

    # normalized l2 profiles separate distributions; cosine quantifies it
    other = rng.standard_normal((5000, WIDTH)) * np.linspace(4.0, 0.5, WIDTH)
    acc_other = st.ActivationStats(layer=0, site="mlp", task_id="other", width=WIDTH)
    acc_other.add_tokens(other)
    acc_other.n_prompts = 13
    same = st.cosine(acc.normalized_l2(), merged.normalized_l2())
    cross = st.cosine(acc.normalized_l2(), acc_other.normalized_l2())
    print(f"profile cosine, same distribution:  {same:.6f}")
    print(f"profile cosine, swapped scales:     {cross:.6f}")


if __name__ == "__main__":
    main()
