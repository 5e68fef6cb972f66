import numpy as np
import pytest

from navwm import autodiff as ad
from navwm.autodiff import ADALN, BACKBONE
from navwm.model import (
    Denoiser,
    ModelConfig,
    checkpoint_meta,
    condition_features,
    denoiser_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sincos_features,
)

TINY = ModelConfig(obs_dim=6, hidden=16, blocks=2, memory=2, embed=8, init_seed=3)


def _inputs(n=3, cfg=TINY, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(n, cfg.obs_dim)),
        rng.normal(size=(n, cfg.obs_dim)),
        rng.normal(size=(n, cfg.memory, cfg.obs_dim)),
        rng.normal(size=(n, 2)) * 0.3,
    )


def _randomize(model, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        p.value = rng.normal(0, scale, size=p.value.shape).astype(p.value.dtype)


class TestConditionEmbedding:
    def test_sincos_t0_pattern(self):
        feats = sincos_features(np.array([0.0]), n_bands=4)
        assert np.array_equal(feats[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_deterministic(self):
        model = Denoiser(TINY)
        a = np.array([[0.2, -0.1]])
        c1 = model.embed_condition(a, 500).value
        c2 = model.embed_condition(a, 500).value
        assert np.array_equal(c1, c2)

    def test_distinct_timesteps_distinct_conditions(self):
        model = Denoiser(TINY)
        a = np.array([[0.1, 0.1]])
        cs = [model.embed_condition(a, t).value for t in (200, 400, 600, 800, 1000)]
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                assert np.linalg.norm(cs[i] - cs[j]) > 0

    def test_condition_features_layout(self):
        feats = condition_features(np.array([[0.0, 0.0]]), 0, embed=8, n=1)
        assert feats.shape == (1, 24)
        assert np.array_equal(feats[0], np.tile([0, 1], 12))


class TestDenoiserForward:
    def test_identity_blocks_at_init(self):
        model = Denoiser(TINY, dtype=np.float64)
        s_t, ctx, mem, acts = _inputs()
        out = model.predict(s_t, 500, ctx, mem, acts)
        # with zero gates, output is the head projection of the input tokens
        p = model.params
        x_s = s_t @ p["tok_s.W"].value + p["tok_s.b"].value
        x_c = ctx @ p["tok_c.W"].value + p["tok_c.b"].value
        expected = np.concatenate([x_s, x_c], axis=1) @ p["out.W"].value + p["out.b"].value
        assert np.allclose(out, expected, atol=1e-12)

    def test_deterministic_bitwise(self):
        model = Denoiser(TINY)
        _randomize(model)
        s_t, ctx, mem, acts = _inputs()
        o1 = model.predict(s_t, 500, ctx, mem, acts)
        o2 = model.predict(s_t, 500, ctx, mem, acts)
        assert np.array_equal(o1, o2)

    def test_memory_order_matters(self):
        model = Denoiser(TINY)
        _randomize(model)
        s_t, ctx, mem, acts = _inputs()
        out = model.predict(s_t, 500, ctx, mem, acts)
        permuted = model.predict(s_t, 500, ctx, mem[:, ::-1, :], acts)
        assert not np.allclose(out, permuted)

    def test_action_and_timestep_condition_output(self):
        model = Denoiser(TINY)
        _randomize(model)
        s_t, ctx, mem, acts = _inputs()
        base = model.predict(s_t, 500, ctx, mem, acts)
        assert not np.allclose(base, model.predict(s_t, 900, ctx, mem, acts))
        assert not np.allclose(base, model.predict(s_t, 500, ctx, mem, acts + 0.1))

    def test_shape_errors(self):
        model = Denoiser(TINY)
        s_t, ctx, mem, acts = _inputs()
        with pytest.raises(ad.ContractViolation):
            model.forward(s_t[:, :4], 500, ctx, mem, acts)
        with pytest.raises(ad.ContractViolation):
            model.forward(s_t, 500, ctx, mem[:, :1, :], acts)

    def test_memoryless_config(self):
        cfg = ModelConfig(obs_dim=4, hidden=8, blocks=1, memory=0, embed=4)
        model = Denoiser(cfg)
        rng = np.random.default_rng(0)
        out = model.predict(rng.normal(size=(2, 4)), 100, rng.normal(size=(2, 4)),
                            np.empty((2, 0, 4)), rng.normal(size=(2, 2)))
        assert out.shape == (2, 4)

    def test_adaln_jacobian_matches_finite_differences(self):
        model = Denoiser(TINY, dtype=np.float64)
        _randomize(model, seed=2)
        s_t, ctx, mem, acts = _inputs(n=2)
        target = np.random.default_rng(5).normal(size=(2, TINY.obs_dim))

        def loss_value():
            with ad.no_grad():
                out = model.forward(s_t, 700, ctx, mem, acts).value
            return float(((target - out) ** 2).mean())

        out = model.forward(s_t, 700, ctx, mem, acts)
        diff = ad.sub(ad.constant(target), out)
        ad.backward(ad.mean_(ad.mul(diff, diff)))

        rng = np.random.default_rng(6)
        h = 1e-5
        for name in model.params.names():
            if model.params.group(name) != ADALN:
                continue
            p = model.params[name]
            for flat in rng.choice(p.value.size, size=3, replace=False):
                idx = np.unravel_index(flat, p.value.shape)
                orig = p.value[idx]
                p.value[idx] = orig + h
                fp = loss_value()
                p.value[idx] = orig - h
                fm = loss_value()
                p.value[idx] = orig
                fd = (fp - fm) / (2 * h)
                an = p.grad[idx]
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-10) <= 1e-4, name


class TestPartition:
    def test_covering_disjoint(self):
        model = Denoiser(TINY)
        backbone, adaln = model.partition_params()
        assert set(backbone) | set(adaln) == set(model.params.names())
        assert not set(backbone) & set(adaln)

    def test_adaln_smaller_than_backbone_at_default(self):
        model = Denoiser(ModelConfig())
        backbone, adaln = model.partition_params()
        assert 0 < len(adaln) < len(backbone)
        n_back = sum(model.params[n].value.size for n in backbone)
        n_ada = sum(model.params[n].value.size for n in adaln)
        assert 0 < n_ada < n_back


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = Denoiser(TINY)
        _randomize(model, seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.params, checkpoint_meta(TINY, {"T": 1000}))
        values, groups, meta = load_checkpoint(path)
        assert set(values) == set(model.params.names())
        for name, arr in values.items():
            assert np.array_equal(arr, model.params[name].value)
            assert groups[name] == model.params.group(name)
        assert meta["model"]["hidden"] == TINY.hidden
        assert meta["diffusion"]["T"] == 1000

    def test_magic_bytes(self, tmp_path):
        model = Denoiser(TINY)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.params)
        assert path.read_bytes()[:4] == b"MWM1"

    def test_rebuild_model(self, tmp_path):
        model = Denoiser(TINY)
        _randomize(model, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.params, checkpoint_meta(TINY))
        loaded = denoiser_from_checkpoint(path)
        s_t, ctx, mem, acts = _inputs()
        assert np.array_equal(loaded.predict(s_t, 300, ctx, mem, acts),
                              model.predict(s_t, 300, ctx, mem, acts))

    def test_byte_identical_saves(self, tmp_path):
        model = Denoiser(TINY)
        _randomize(model, seed=4)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model.params)
        save_checkpoint(p2, model.params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)
