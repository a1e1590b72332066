import numpy as np
import pytest

from depmil import autograd as ag
from depmil.autograd import Tensor
from depmil.heads import VARIANTS, BagOutput, MilModel, ModelSpec, attention_pool, bag_predict
from depmil.nn import ConfigError, Linear, Module

from conftest import tiny_spec


def pool_layers(rng, m=4, hidden=3, gated=False):
    v = Linear(m, hidden, rng, bias=False, dtype=np.float64)
    w = Linear(hidden, 1, rng, bias=False, dtype=np.float64)
    u = Linear(m, hidden, rng, bias=False, dtype=np.float64) if gated else None
    return v, w, u


class TestAttentionPool:
    def test_single_instance(self, rng):
        h = rng.standard_normal((1, 4))
        z, a = attention_pool(Tensor(h), *pool_layers(rng))
        np.testing.assert_array_equal(a.data, [1.0])
        np.testing.assert_allclose(z.data, h[0], rtol=1e-12)

    def test_duplicate_instance(self, rng):
        h = rng.standard_normal((3, 4))
        layers = pool_layers(rng)
        z1, a1 = attention_pool(Tensor(h), *layers)
        z2, a2 = attention_pool(Tensor(np.vstack([h, h[:1]])), *layers)
        assert a2.data[0] == pytest.approx(a2.data[3])
        # the duplicated row gains weight, so compare against the analytic mixture
        w = np.exp(np.tanh(h @ layers[0].weight.data.T) @ layers[1].weight.data.T).ravel()
        w2 = np.append(w, w[0])
        np.testing.assert_allclose(z2.data, (w2[:, None] * np.vstack([h, h[:1]])).sum(0) / w2.sum(), rtol=1e-10)

    def test_duplicating_every_instance_keeps_z(self, rng):
        h = rng.standard_normal((5, 4))
        layers = pool_layers(rng)
        z1, _ = attention_pool(Tensor(h), *layers)
        z2, a2 = attention_pool(Tensor(np.vstack([h, h])), *layers)
        np.testing.assert_allclose(z2.data, z1.data, atol=1e-12)
        assert a2.data.sum() == pytest.approx(1.0)

    def test_convex_hull(self, rng):
        h = rng.standard_normal((6, 4))
        z, a = attention_pool(Tensor(h), *pool_layers(rng))
        assert np.all(z.data >= h.min(0) - 1e-12) and np.all(z.data <= h.max(0) + 1e-12)
        assert np.all(a.data >= 0)

    def test_gate_saturated_matches_plain(self, rng):
        h = np.abs(rng.standard_normal((5, 4))) + 0.5
        v, w, u = pool_layers(rng, gated=True)
        u.weight.data[...] = 50.0
        _, a_gated = attention_pool(Tensor(h), v, w, u)
        _, a_plain = attention_pool(Tensor(h), v, w)
        np.testing.assert_allclose(a_gated.data, a_plain.data, atol=1e-3)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ag.ShapeError):
            attention_pool(Tensor(rng.standard_normal((3, 5))), *pool_layers(rng))


class TestModels:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shapes(self, variant):
        stages = (8, 8) if variant == "pyramid_transformer" else (8,)
        model = MilModel(tiny_spec(variant, stage_dims=stages), 0)
        out = model(np.zeros((3, 7, 16), np.float32))
        assert out.bag_logits.shape == (3, 4)
        assert out.attention.shape == (3, 7)
        assert out.instance_logits.shape == (3, 7, 4)

    def test_single_bag_input(self):
        model = MilModel(tiny_spec(), 0)
        out = model(np.zeros((5, 16), np.float32))
        assert out.bag_logits.shape == (1, 4)

    def test_max_single_instance(self, rng):
        model = MilModel(tiny_spec("max"), 0, np.float64)
        out = model(rng.standard_normal((1, 16)))
        np.testing.assert_array_equal(out.bag_logits.data, out.instance_logits.data[:, 0])

    def test_max_attention_one_hot(self, rng):
        model = MilModel(tiny_spec("max"), 0, np.float64)
        out = model(rng.standard_normal((2, 6, 16)))
        np.testing.assert_array_equal(out.attention.data.sum(1), 1.0)
        np.testing.assert_array_equal(out.attention.data[np.arange(2), out.selected], 1.0)

    def test_max_strong_positive_instance_wins(self, rng):
        model = MilModel(tiny_spec("max", num_classes=2), 0, np.float64)
        inst = rng.standard_normal((8, 16)) * 0.01
        model.classifier.weight.data[...] = 0
        model.backbone.stages[0].weight.data[...] = 0
        model.backbone.stages[0].bias.data[...] = 0
        model.backbone.stages[0].weight.data[0, 0] = 1.0
        model.classifier.weight.data[1, 0] = 1.0
        inst[3, 0] = 5.0
        out = model(inst)
        assert out.selected[0] == 3
        assert bag_predict(out)[0][0] == 1

    def test_pyramid_concat_dims(self):
        spec = tiny_spec("pyramid_transformer", stage_dims=(8, 4, 6))
        assert spec.encoder_dims() == [8, 12, 18]
        model = MilModel(spec, 0)
        assert [enc.dim for enc in model.encoders] == [8, 12, 18]

    def test_pyramid_single_scale_is_transformer(self, rng):
        spec_p = tiny_spec("pyramid_transformer")
        spec_t = tiny_spec("transformer")
        mp, mt = MilModel(spec_p, 3, np.float64), MilModel(spec_t, 3, np.float64)
        x = rng.standard_normal((2, 5, 16))
        np.testing.assert_array_equal(mp(x).bag_logits.data, mt(x).bag_logits.data)

    def test_pyramid_needs_depth(self):
        with pytest.raises(ConfigError):
            MilModel(tiny_spec("pyramid_transformer", depth=0), 0)

    def test_separate_instance_head(self, rng):
        model = MilModel(tiny_spec(instance_head="separate"), 0)
        assert model.instance_classifier is not None
        assert "instance_classifier.weight" in dict(model.named_parameters())

    def test_spec_round_trip(self):
        spec = tiny_spec("gated_attention")
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_transformer_parameter_names(self):
        model = MilModel(tiny_spec("transformer", depth=2), 0)
        names = model.transformer_parameter_names()
        assert names and all(n.startswith("encoders.0.blocks.") for n in names)
        assert not any(n.startswith("encoders") for n in set(dict(model.named_parameters())) - set(names))

    def test_attention_maps_exposed(self, rng):
        model = MilModel(tiny_spec("transformer", depth=2), 0)
        model(rng.standard_normal((2, 5, 16)).astype(np.float32))
        maps = model.self_attention_maps()
        assert len(maps) == 1 and len(maps[0]) == 2 and maps[0][0].shape == (2, 2, 5, 5)


class TestBagPredict:
    def _out(self, logits):
        return BagOutput(Tensor(np.asarray(logits, np.float32)), None, None, None)

    def test_argmax(self):
        pred, probs = bag_predict(self._out([[5, 0, 0, 0, 0, 0]]))
        assert pred[0] == 0

    def test_tie_goes_low(self):
        pred, _ = bag_predict(self._out([[1, 1, 1, 1, 1, 1]]))
        assert pred[0] == 0

    def test_probs_sum_to_one(self, rng):
        _, probs = bag_predict(self._out(rng.standard_normal((4, 6)) * 10))
        np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
