from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grads
from gridcast import tensorcore as tc
from gridcast.errors import ConfigurationError, DimensionError, FormatError, WindowError
from gridcast.griddata import ClockIndex, TrainingExample
from gridcast.models import (
    TRConfig,
    bias_sum,
    decode_params,
    encode_params,
    init_params,
    init_pomponia,
    load_params,
    nero_forward,
    pomponia_forward,
    save_params,
    tr_predict,
)
from gridcast.training import forward_loss

CLOCK = ClockIndex(hour=5, weekday=2, month=0)


def example(history, clock=CLOCK, targets=None):
    h, H, W, C = history.shape
    targets = np.zeros((3, H, W, C)) if targets is None else targets
    return TrainingExample(history, targets, clock, (0, 0))


def with_arrays(params, **updates):
    arrays = dict(params.arrays)
    arrays.update(updates)
    return params.with_arrays(arrays)


class TestInit:
    def test_tables_zero(self):
        p = init_params(TRConfig(), 0, (4, 5))
        for table in p.bias_tables.values():
            assert not table.any()
        assert p.bias_tables["LxH"].shape == (4, 5, 12, 9)
        assert p.bias_tables["WxH"].shape == (7, 12, 9)
        assert p.bias_tables["M"].shape == (12, 9)

    def test_deterministic(self):
        a, b = init_params(TRConfig(), 3, (2, 2)), init_params(TRConfig(), 3, (2, 2))
        for k in a.arrays:
            np.testing.assert_array_equal(a.arrays[k], b.arrays[k])

    def test_layer_shapes(self):
        p = init_params(TRConfig(n_layers=2, hidden_channels=16, history=4, channels=3), 0)
        assert p.arrays["tr.0.weight"].shape == (16, 12)
        assert p.arrays["tr.1.weight"].shape == (9, 16)
        assert not p.arrays["tr.0.bias"].any()

    def test_he_scale(self):
        p = init_params(TRConfig(n_layers=2, hidden_channels=400, history=10, channels=10), 0)
        assert p.arrays["tr.0.weight"].std() == pytest.approx(np.sqrt(2 / 100), rel=0.05)

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            TRConfig(kernel_size=2)
        with pytest.raises(ConfigurationError):
            TRConfig(activation="tanh")
        with pytest.raises(ConfigurationError):
            init_params(TRConfig(), biases=("LxW",))


class TestTR:
    def test_null_network(self, rng):
        p = init_params(TRConfig(), 0, (3, 3))
        p = p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays.items()})
        assert not tr_predict(rng.random((4, 3, 3, 3)), p).data.any()

    def test_identity_copy_is_naive(self, rng):
        cfg = TRConfig(n_layers=1, history=3, channels=2)
        w = np.zeros((6, 6))
        for f in range(3):
            for c in range(2):
                w[f * 2 + c, 2 * 2 + c] = 1.0
        p = with_arrays(init_params(cfg, 0), **{"tr.0.weight": w})
        hist = rng.random((3, 4, 5, 2))
        out = tr_predict(hist, p).data
        for f in range(3):
            np.testing.assert_array_equal(out[f], hist[-1])

    def test_mean_of_two(self):
        cfg = TRConfig(n_layers=1, history=2, channels=1)
        p = with_arrays(init_params(cfg, 0), **{"tr.0.weight": np.full((3, 2), 0.5)})
        out = tr_predict(np.array([0.2, 0.6]).reshape(2, 1, 1, 1), p).data
        np.testing.assert_allclose(out.reshape(-1), [0.4, 0.4, 0.4], rtol=1e-15)

    def test_shape_mismatch(self, rng):
        p = init_params(TRConfig(history=4), 0)
        with pytest.raises(DimensionError):
            tr_predict(rng.random((3, 2, 2, 3)), p)

    def test_kernel_three_sees_neighbours(self):
        cfg = TRConfig(n_layers=1, history=1, channels=1, kernel_size=3)
        p = init_params(cfg, 0, (5, 5))
        hist = np.zeros((1, 5, 5, 1))
        hist[0, 2, 2, 0] = 1.0
        out = tr_predict(hist, p).data[0, ..., 0]
        assert np.count_nonzero(out) > 1
        assert not out[0].any() and not out[:, 0].any()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pixel_permutation(self, seed):
        r = np.random.default_rng(seed)
        p = init_params(TRConfig(history=2), seed % 100, (3, 4))
        hist = r.random((2, 3, 4, 3))
        perm = r.permutation(12)
        permute = lambda a: a.reshape(a.shape[0], 12, -1)[:, perm].reshape(a.shape)
        ex, ex_p = example(hist), example(permute(hist))
        np.testing.assert_array_equal(nero_forward(ex_p, p).data, permute(nero_forward(ex, p).data))


class TestBiases:
    def test_zero_tables(self):
        p = init_params(TRConfig(), 0, (3, 2))
        assert not bias_sum(p, CLOCK).data.any()

    def test_month_broadcast(self):
        p = init_params(TRConfig(channels=1), 0, (3, 2))
        m = np.zeros((12, 3))
        m[CLOCK.month] = 0.7
        p = with_arrays(p, **{"bias.M": m})
        assert np.all(bias_sum(p, CLOCK).data == 0.7)

    def test_additive(self):
        p = init_params(TRConfig(channels=2), 0, (3, 2))
        wh = np.zeros((7, 12, 6))
        wh[2, 5] = 0.1
        m = np.zeros((12, 6))
        m[0] = 0.2
        p = with_arrays(p, **{"bias.WxH": wh, "bias.M": m})
        np.testing.assert_allclose(bias_sum(p, ClockIndex(5, 2, 0)).data, 0.3, rtol=1e-15)
        assert not bias_sum(p, ClockIndex(4, 2, 1)).data.any()

    def test_location_table(self, rng):
        p = init_params(TRConfig(channels=1), 0, (2, 3))
        lxh = rng.normal(size=(2, 3, 12, 3))
        p = with_arrays(p, **{"bias.LxH": lxh})
        out = bias_sum(p, CLOCK).data
        for f in range(3):
            np.testing.assert_array_equal(out[f, ..., 0], lxh[:, :, CLOCK.hour, f])

    def test_out_of_range(self):
        p = init_params(TRConfig(), 0, (2, 2))
        with pytest.raises(WindowError):
            bias_sum(p, ClockIndex(12, 0, 0))

    def test_gradient_only_on_indexed_slices(self, rng):
        p = init_params(TRConfig(history=2), 0, (3, 3))
        ex = example(rng.random((2, 3, 3, 3)), targets=rng.random((3, 3, 3, 3)))
        tensors = {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in p.arrays.items()}
        with tc.Tape() as tape:
            loss, _ = forward_loss(p, ex, tensors)
        g = tc.reverse_gradients(tape, loss, tensors.values())
        lxh, wxh, m = g["bias.LxH"], g["bias.WxH"], g["bias.M"]
        assert np.abs(lxh[:, :, CLOCK.hour]).min() > 0
        assert not np.delete(lxh, CLOCK.hour, axis=2).any()
        assert not np.delete(wxh.reshape(84, -1), CLOCK.weekday * 12 + CLOCK.hour, axis=0).any()
        assert not np.delete(m, CLOCK.month, axis=0).any()
        assert np.abs(m[CLOCK.month]).min() > 0


class TestNero:
    def test_reduces_to_tr(self, rng):
        p = init_params(TRConfig(), 1, (4, 4))
        ex = example(rng.random((4, 4, 4, 3)))
        np.testing.assert_array_equal(nero_forward(ex, p).data, tr_predict(ex.history, p).data)

    def test_reduces_to_biases(self, rng):
        p = init_params(TRConfig(), 1, (4, 4))
        zeroed = {k: (np.zeros_like(v) if k.startswith("tr.") else rng.normal(size=v.shape))
                  for k, v in p.arrays.items()}
        p = p.with_arrays(zeroed)
        ex = example(rng.random((4, 4, 4, 3)))
        np.testing.assert_array_equal(nero_forward(ex, p).data, bias_sum(p, ex.clock).data)

    def test_composition(self):
        cfg = TRConfig(n_layers=1, history=2, channels=1)
        p = init_params(cfg, 0, (1, 1))
        wh = np.zeros((7, 12, 3))
        wh[2, 5] = 0.1
        m = np.zeros((12, 3))
        m[0] = 0.2
        p = with_arrays(p, **{"tr.0.weight": np.full((3, 2), 0.5), "bias.WxH": wh, "bias.M": m})
        ex = example(np.array([0.2, 0.6]).reshape(2, 1, 1, 1), ClockIndex(5, 2, 0))
        # TR oracle 0.4 plus bias oracle 0.3
        np.testing.assert_allclose(nero_forward(ex, p).data.reshape(-1), [0.7] * 3, rtol=1e-14)

    def test_tr_only_has_no_tables(self, rng):
        p = init_params(TRConfig(), 0, (2, 2), biases=())
        assert not any(k.startswith("bias.") for k in p.arrays)
        ex = example(rng.random((4, 2, 2, 3)))
        np.testing.assert_array_equal(nero_forward(ex, p).data, tr_predict(ex.history, p).data)


def pomponia_example(history, targets=None):
    return example(history, targets=targets)


class TestPomponia:
    def test_transparent_mask(self, rng):
        p = init_pomponia(TRConfig(history=2), 0, (3, 4))
        p = p.with_arrays({k: (np.zeros_like(v) if k.startswith("disp.") else v)
                           for k, v in p.arrays.items()})
        hist = rng.uniform(0.1, 1.0, size=(2, 3, 4, 3))
        y_final, warped, y_value = pomponia_forward(example(hist), p)
        assert np.all(warped.data == 1.0)
        np.testing.assert_array_equal(y_final.data, y_value.data)

    def test_annihilating_mask(self, rng):
        p = init_pomponia(TRConfig(history=2), 0, (3, 4))
        hist = rng.uniform(0.1, 1.0, size=(2, 3, 4, 3))
        hist[-1, ..., 0] = 0.0
        y_final, _, y_value = pomponia_forward(example(hist), p)
        assert np.any(y_value.data != 0)
        assert not y_final.data.any()

    def test_integer_shift(self, rng):
        cfg = TRConfig(n_layers=1, history=1, channels=1)
        p = init_pomponia(cfg, 0, (3, 4), biases=())
        arrays = dict(p.arrays)
        arrays["disp.0.weight"] = np.zeros((2, 3))
        arrays["disp.0.bias"] = np.array([1.0, 0.0])
        arrays["tr.0.weight"] = np.zeros((3, 1))
        arrays["tr.0.bias"] = np.ones(3)
        p = p.with_arrays(arrays)
        hist = np.zeros((1, 3, 4, 1))
        hist[0, 1, 2, 0] = 0.5
        y_final, warped, _ = pomponia_forward(example(hist), p)
        expected = np.zeros((3, 4))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(warped.data, expected)
        hist[0, 1, 2, 0] = 0.0
        hist[0, 1, 3, 0] = 0.5
        y_final, warped, _ = pomponia_forward(example(hist), p)
        # the edge column is read by both itself (clamped) and its left neighbour
        expected = np.zeros((3, 4))
        expected[1, 2:] = 1.0
        np.testing.assert_array_equal(warped.data, expected)
        np.testing.assert_array_equal(y_final.data[0, ..., 0], expected)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_magnitude_bound(self, seed):
        r = np.random.default_rng(seed)
        p = init_pomponia(TRConfig(history=2), seed % 50, (4, 4))
        p = p.with_arrays({k: v + r.normal(scale=0.5, size=v.shape) for k, v in p.arrays.items()})
        hist = r.random((2, 4, 4, 3)) * (r.random((2, 4, 4, 1)) < 0.5)
        y_final, warped, y_value = pomponia_forward(example(hist), p)
        assert warped.data.min() >= 0 and warped.data.max() <= 1
        assert np.abs(y_final.data).max() <= np.abs(y_value.data).max() + 1e-12


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        p = init_params(TRConfig(history=3), 5, (3, 4), biases=("LxH", "M"), n_hour_bins=24)
        p = p.with_arrays({k: rng.normal(size=v.shape) for k, v in p.arrays.items()})
        save_params(p, tmp_path / "c.gcp")
        back = load_params(tmp_path / "c.gcp")
        assert back.config == p.config and back.biases == ("LxH", "M") and back.n_hour_bins == 24
        assert list(back.arrays) == list(p.arrays)
        for k in p.arrays:
            np.testing.assert_array_equal(back.arrays[k], p.arrays[k])

    def test_pomponia_round_trip(self, rng):
        p = init_pomponia(TRConfig(history=2), 1, (2, 2))
        back = decode_params(encode_params(p))
        assert set(back.displacement) == set(p.displacement)
        for k in p.arrays:
            np.testing.assert_array_equal(back.arrays[k], p.arrays[k])

    def test_corrupt(self):
        blob = encode_params(init_params(TRConfig(), 0, (2, 2)))
        with pytest.raises(FormatError):
            decode_params(b"GCPX" + blob[4:])
        with pytest.raises(FormatError):
            decode_params(blob[:-8])
        with pytest.raises(FormatError):
            decode_params(blob + b"\0")


def test_full_nero_gradient(rng):
    p = init_params(TRConfig(history=2, hidden_channels=5), 0, (3, 3))
    arrays = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in p.arrays.items()}
    ex = example(rng.random((2, 3, 3, 3)), targets=rng.random((3, 3, 3, 3)))
    loss = lambda t: forward_loss(p, ex, t)[0]
    assert check_grads(loss, arrays) < 1e-4
