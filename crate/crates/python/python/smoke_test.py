"""Smoke test for the saap Python bindings.

Build and install first:  pip install --no-build-isolation crates/python
"""

import math

import numpy as np

import saap


def main():
    spec = saap.HeadSpec(n_clusters=8, planted_min_gap=512, local_span=128, seed=3)
    prompt = saap.generate_prompt(spec, 3000, 16)
    assert len(prompt) == 3000
    assert prompt.keys_roped.shape == (3000, 64)

    # numpy round trip through the buffer protocol
    arr = np.asarray(prompt.keys_deroped.tolist(), dtype=np.float32)
    block = saap.TensorBlock(arr)
    assert block.to_bytes() == prompt.keys_deroped.to_bytes()
    assert saap.TensorBlock.from_bytes(block.to_bytes()).tolist() == block.tolist()

    rope = saap.RopeConfig(64)
    x = [float(v) for v in np.random.default_rng(0).standard_normal(64)]
    back = rope.remove(rope.apply(x, 777), 777)
    assert max(abs(a - b) for a, b in zip(x, back)) < 1e-4

    part = saap.Partition.kmeans(prompt.keys_deroped, 16, iters=5, seed=1)
    assert part.n_buckets == 16
    store = saap.SparseStore(prompt.keys_roped, prompt.values, part, prompt.keys_deroped)
    assert store.bucket_of(0) is None
    assert sum(len(store.bucket(c)) for c in range(16)) == 2999

    q = prompt.queries_roped.select_rows([0])
    qd = prompt.queries_deroped.select_rows([0])
    exact = saap.full_attention(q, prompt.keys_roped, prompt.values)
    everything = store.attend(q, qd, 16, recent=128)
    assert saap.mse(everything.output, exact) < 1e-12
    assert everything.selectivity == 1.0

    partial = store.attend(q, qd, 2, recent=128)
    assert partial.keys_scored < everything.keys_scored
    cov = store.coverage(q.row(0), partial.buckets, recent=128)
    assert 0.0 <= cov <= 1.0 + 1e-9

    model = saap.QModel(64, 32, 16, seed=0)
    probs = model.predict([float(v) for v in qd.row(0)])
    assert math.isclose(sum(probs), 1.0, rel_tol=1e-9)
    routed = store.attend(q, qd, 4, recent=128, model=model)
    assert len(routed.buckets) == 4

    try:
        store.attend(q, qd, 17)
    except saap.Error as e:
        assert "invalid_argument" in str(e)
    else:
        raise AssertionError("ell > C accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
