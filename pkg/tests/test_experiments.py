import numpy as np

from supra.experiments import AblationSetup, attention_similarity, run_ablation


def test_tiny_ablation_plumbing():
    setup = AblationSetup(d_model=16, n_heads=2, n_layers=1, d_ff=32, seq=17, batch_seqs=4, pretrain_steps=20,
                          uptrain_steps=10, val_chunks=4)
    res = run_ablation(setup)
    assert set(res.ppl) == {"supra", "new_only", "t2r", "staged"}
    assert all(np.isfinite(v) and v > 1 for v in res.ppl.values())
    assert res.models["t2r"].cfg.attention.normalizer == "sum_clamp"
    grids = attention_similarity(res.base, res.models["supra"], np.arange(16) + 97)
    assert set(grids) == {"cosine", "cosine_normalized", "singular_value_distance",
                          "singular_value_distance_normalized"}
    assert all(g.shape == (1, 2) for g in grids.values())
