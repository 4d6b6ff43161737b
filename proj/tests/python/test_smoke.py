import math

import numpy as np
import pytest

import bmt

TINY = {
    "encoder_layers": "1",
    "decoder_layers": "1",
    "d_model": "16",
    "d_ff": "32",
    "n_heads": "2",
    "n_train": "200",
    "n_eval": "20",
    "max_len": "6",
    "batch_size": "8",
    "schedule": "10:none,10:w",
    "eval_every": "10",
    "sites": "w_qkv,w_out,w_ffn",
}


def test_binarize_values_and_mask():
    x = np.array([-3.0, -1.0, -0.2, 0.0, 0.7, 1.0, 2.5], dtype=np.float32)
    got = bmt.binarize(x, 1.0)
    np.testing.assert_array_equal(got, [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5])
    np.testing.assert_array_equal(bmt.ste_mask(x, 1.0), (np.abs(x) <= 1.0).astype(np.float32))


def test_dynamic_bound_is_per_row():
    x = np.array([[1.0, -4.0], [0.5, 0.25]], dtype=np.float32)
    np.testing.assert_array_equal(bmt.binarize(x), [[2.0, -2.0], [0.25, 0.25]])


def test_packed_matmul_matches_float():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 65)).astype(np.float32)
    w = rng.normal(size=(65, 3)).astype(np.float32)
    packed, fake = bmt.binary_matmul(a, w)
    assert packed.shape == (5, 3)
    np.testing.assert_allclose(packed, fake, rtol=1e-5, atol=1e-5)


def test_variance_theory():
    r = bmt.variance_oracle(256, 2.0, trials=20000, seed=3)
    assert r["theory_var"] == 256.0
    assert 0.9 < r["empirical_var"] / r["theory_var"] < 1.1


def test_scaling_fit_recovers_law():
    pts = []
    for i in range(5):
        for j in range(5):
            ne, nd = 1e5 * 4**i, 2e5 * 4**j
            pts.append((ne, nd, 2 * (1e6 / ne) ** 0.2 * (2e6 / nd) ** 0.3 + 1))
    f = bmt.fit_scaling_law(pts, 1e6, 2e6)
    assert math.isclose(f["p_e"], 0.2, rel_tol=1e-3)
    assert math.isclose(f["p_d"], 0.3, rel_tol=1e-3)
    assert f["r2"] > 0.9999
    assert len(f["residuals"]) == len(pts)


def test_bleu_and_mbr():
    assert bmt.bleu([[3, 4, 5]], [[3, 4, 5]]) == pytest.approx(100.0)
    assert bmt.bleu([[3, 4, 5]], [[6, 7, 8]]) == 0.0
    assert bmt.mbr_argmax([[0.1, 0.2], [0.9, 0.3]]) == 1
    assert bmt.length_penalty(7, 0.6) == pytest.approx(2**0.6)


def test_config_errors_are_value_errors():
    with pytest.raises(ValueError):
        bmt.resolve_config("colour=blue")
    items = dict(bmt.resolve_config("d_model=32", {"seed": "9"}))
    assert items["d_model"] == "32"
    assert items["seed"] == "9"


def test_train_decode_and_packed_round_trip(tmp_path):
    model, rows = bmt.train(overrides=TINY, out_dir=str(tmp_path / "run"))
    assert [r["step"] for r in rows] == [10, 20]
    assert all(math.isfinite(r["eval_loss"]) for r in rows)
    assert (tmp_path / "run" / "metrics.csv").exists()

    src, tgt_in = [5, 6, 7], [1, 9, 8]
    ref = model.logits(src, tgt_in)
    assert ref.shape == (1, 3, 32)

    path = str(tmp_path / "packed.bmt")
    model.save(path, packed=True)
    packed = bmt.Model.load(path)
    assert packed.uses_packed_weights
    np.testing.assert_allclose(packed.logits(src, tgt_in), ref, rtol=1e-4, atol=1e-4)

    tokens, score = packed.translate(src, beam=2)
    assert all(3 <= t < 32 for t in tokens)
    assert score <= 0.0
