"""Tests for the static/dynamic radiance fields and the flow head."""

import numpy as np
import pytest

import dynrad.fields as fields
import dynrad.tensorcore as tc
from dynrad.errors import ConfigurationError, InputError


def small_cfg():
    return fields.FieldConfig(hidden_width=16, n_resblocks=2, flow_clamp=0.25,
                              feature_dim=4)


def make_static(seed=0, cfg=None):
    cfg = cfg or small_cfg()
    store = tc.ParameterStore()
    fields.init_field_params(store, "f", cfg, np.random.default_rng(seed))
    return store, cfg


def make_flow(seed=0, single=False, cfg=None):
    cfg = cfg or small_cfg()
    store = tc.ParameterStore()
    fields.init_flow_head_params(store, "h", cfg, np.random.default_rng(seed),
                                 single_layer=single)
    return store, cfg


def rand_inputs(rng, n, cfg, with_dir=True):
    x_pe = tc.Tensor(rng.normal(size=(n, fields.X_PE_DIM)))
    t_pe = tc.Tensor(rng.normal(size=(n, fields.T_PE_DIM)))
    d_pe = tc.Tensor(rng.normal(size=(n, fields.D_PE_DIM))) if with_dir else None
    feat = tc.Tensor(rng.normal(size=(n, cfg.feature_dim)))
    return x_pe, t_pe, d_pe, feat


class TestFieldConfig:
    def test_width_floor(self):
        with pytest.raises(ConfigurationError):
            fields.FieldConfig(hidden_width=4)


class TestStaticQuery:
    def test_bounds_random_inputs(self):
        store, cfg = make_static(1)
        rng = np.random.default_rng(2)
        x_pe, t_pe, d_pe, feat = rand_inputs(rng, 10_000, cfg)
        out = fields.static_query(x_pe, t_pe, d_pe, feat, store, "f", cfg)
        assert (out.sigma_s.data >= 0).all()
        assert (out.c_s.data >= 0).all() and (out.c_s.data <= 1).all()

    def test_zero_init_heads(self):
        store, cfg = make_static(3)
        rng = np.random.default_rng(4)
        x_pe, t_pe, d_pe, feat = rand_inputs(rng, 5, cfg)
        out = fields.static_query(x_pe, t_pe, d_pe, feat, store, "f", cfg)
        np.testing.assert_allclose(out.sigma_s.data, np.log(2.0), atol=1e-12)
        np.testing.assert_allclose(out.c_s.data, 0.5, atol=1e-12)

    def test_nonfinite_rejected(self):
        store, cfg = make_static(5)
        rng = np.random.default_rng(6)
        x_pe, t_pe, d_pe, feat = rand_inputs(rng, 3, cfg)
        x_pe.data[0, 0] = np.inf
        with pytest.raises(InputError):
            fields.static_query(x_pe, t_pe, d_pe, feat, store, "f", cfg)

    def test_pure_function(self):
        store, cfg = make_static(7)
        rng = np.random.default_rng(8)
        args = rand_inputs(rng, 4, cfg)
        a = fields.static_query(*args, store, "f", cfg)
        b = fields.static_query(*args, store, "f", cfg)
        np.testing.assert_array_equal(a.c_s.data, b.c_s.data)
        np.testing.assert_array_equal(a.sigma_s.data, b.sigma_s.data)

    def test_grad(self):
        store, cfg = make_static(9)
        # nonzero heads so gradients reach every parameter
        rng = np.random.default_rng(10)
        store["f/sigma/w"].data[...] = rng.normal(size=store["f/sigma/w"].shape) * 0.1
        store["f/rgb/w"].data[...] = rng.normal(size=store["f/rgb/w"].shape) * 0.1
        x_pe, t_pe, d_pe, feat = rand_inputs(rng, 2, cfg)
        readout = rng.normal(size=(2, 3))

        def loss():
            out = fields.static_query(x_pe, t_pe, d_pe, feat, store, "f", cfg)
            return (out.c_s * readout).sum() + (out.sigma_s * 0.3).sum()
        assert tc.grad_check(loss, store) < 1e-3


class TestFlowHead:
    def test_zero_init(self):
        store, cfg = make_flow(11)
        rng = np.random.default_rng(12)
        x_pe, t_pe, _, feat = rand_inputs(rng, 6, cfg)
        s_fw, s_bw, b = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg)
        np.testing.assert_allclose(s_fw.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(s_bw.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(b.data, 0.5, atol=1e-12)

    def test_flow_clamp_bound(self):
        store, cfg = make_flow(13)
        rng = np.random.default_rng(14)
        store["h/flow/w"].data[...] = rng.normal(size=store["h/flow/w"].shape) * 50
        x_pe, t_pe, _, feat = rand_inputs(rng, 1000, cfg)
        s_fw, s_bw, b = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg)
        assert np.abs(s_fw.data).max() <= cfg.flow_clamp + 1e-9
        assert np.abs(s_bw.data).max() <= cfg.flow_clamp + 1e-9
        assert (b.data >= 0).all() and (b.data <= 1).all()

    def test_single_layer_variant(self):
        store, cfg = make_flow(15, single=True)
        rng = np.random.default_rng(16)
        x_pe, t_pe, _, feat = rand_inputs(rng, 4, cfg)
        s_fw, s_bw, b = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg,
                                                 single_layer=True)
        assert s_fw.shape == (4, 3) and b.shape == (4,)

    def test_grad(self):
        store, cfg = make_flow(17)
        rng = np.random.default_rng(18)
        store["h/flow/w"].data[...] = rng.normal(size=store["h/flow/w"].shape) * 0.1
        store["h/blend/w"].data[...] = rng.normal(size=store["h/blend/w"].shape) * 0.1
        x_pe, t_pe, _, feat = rand_inputs(rng, 2, cfg)
        r = rng.normal(size=(2, 3))

        def loss():
            s_fw, s_bw, b = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg)
            return (s_fw * r).sum() + (s_bw * r).sum() + b.sum()
        assert tc.grad_check(loss, store) < 1e-3


class TestDynamicQuery:
    def test_bounds(self):
        cfg = small_cfg()
        store = tc.ParameterStore()
        rng = np.random.default_rng(19)
        fields.init_field_params(store, "d", cfg, rng, time_in_density=True)
        fields.init_flow_head_params(store, "h", cfg, rng)
        x_pe, t_pe, d_pe, feat = rand_inputs(np.random.default_rng(20), 10_000, cfg)
        flow = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg)
        out = fields.dynamic_query(x_pe, t_pe, d_pe, feat, flow, store, "d", cfg)
        assert (out.sigma_d.data >= 0).all()
        assert (out.c_d.data >= 0).all() and (out.c_d.data <= 1).all()
        assert (out.b.data >= 0).all() and (out.b.data <= 1).all()
        assert np.abs(out.s_fw.data).max() <= cfg.flow_clamp + 1e-9

    def test_grad_full(self):
        cfg = small_cfg()
        store = tc.ParameterStore()
        rng = np.random.default_rng(21)
        fields.init_field_params(store, "d", cfg, rng, time_in_density=True)
        fields.init_flow_head_params(store, "h", cfg, rng)
        for p in ("d/sigma/w", "d/rgb/w", "h/flow/w", "h/blend/w"):
            store[p].data[...] = rng.normal(size=store[p].shape) * 0.1
        for p in store.paths():  # keep relu units away from their kinks
            if p.endswith("/b"):
                store[p].data[...] = 0.05
        x_pe, t_pe, d_pe, feat = rand_inputs(np.random.default_rng(22), 2, cfg)
        r = np.random.default_rng(23).normal(size=(2, 3))

        def loss():
            flow = fields.dynamic_flow_head(x_pe, t_pe, feat, store, "h", cfg)
            out = fields.dynamic_query(x_pe, t_pe, d_pe, feat, flow, store, "d", cfg)
            return ((out.c_d * r).sum() + out.sigma_d.sum() * 0.1
                    + (out.s_fw * r).sum() + out.b.sum() * 0.2)
        assert tc.grad_check(loss, store) < 1e-3


class TestEncodeInputs:
    def test_shapes(self):
        pts = np.zeros((2, 3, 3))
        dirs = np.zeros((2, 3, 3))
        x_pe, t_pe, d_pe = fields.encode_inputs(pts, 0.5, dirs)
        assert x_pe.shape == (2, 3, fields.X_PE_DIM)
        assert t_pe.shape == (2, 3, fields.T_PE_DIM)
        assert d_pe.shape == (2, 3, fields.D_PE_DIM)
