"""Quick end-to-end check of the Python bindings.

Run after `maturin develop -m crates/python/Cargo.toml`, or with the built
extension on PYTHONPATH.
"""

import math
import tempfile
from pathlib import Path

import vismem_py as vm


def main():
    data = vm.Dataset.synthetic(6, 120, seed=3)
    assert len(data) == 120
    test_ids = data.ids("test")
    assert len(test_ids) == 24

    model = vm.Model.train(data, variant="full", s_dim=12, u_dim=12, epochs=4, seed=3)
    assert len(model.history) >= 1
    ppl = model.perplexity(data)
    assert 1.0 < ppl < data.vocab_size, ppl

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "m.ckpt")
        model.save(path)
        again = vm.Model.load(path)
        assert again.perplexity(data) == ppl

    gens = model.generate(data, candidates=10, seed=5)
    assert [g[0] for g in gens] == test_ids
    assert gens == model.generate(data, candidates=10, seed=5)

    first = test_ids[0]
    ll = model.log_likelihood(data.features(first), data.captions(first)[0])
    assert ll < 0.0 and math.isfinite(ll)

    res = model.retrieve(data, mode="t+i")
    assert res["r_at_1"] <= res["r_at_5"] <= res["r_at_10"]
    assert 1.0 <= res["mean_rank"] <= 24.0

    s, u = model.stability(data, first)
    assert s >= 0.0 and u >= 0.0

    assert vm.bleu("a dog on the left", ["a dog on the left"]) == 1.0
    assert vm.gradcheck("full") < 1e-4

    print(f"ppl {ppl:.3f}  mean rank {res['mean_rank']:.2f}  example: {gens[0][1]}")
    print("smoke test ok")


if __name__ == "__main__":
    main()
