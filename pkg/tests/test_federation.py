import json
import math

import numpy as np
import pytest

from condistfl import federation as F
from condistfl import losses as L
from condistfl import synth_data as S
from condistfl import tensor as T
from condistfl.config import ExperimentConfig, with_method
from condistfl.seg_model import Checkpoint, ModelConfig


def _update(cid, entries, n, rnd=0):
    return F.ClientUpdate(cid, Checkpoint({k: np.asarray(v, np.float32) for k, v in entries.items()}, rnd), n)


TINY_MODEL = ModelConfig(depth=2, base_channels=2)


@pytest.fixture(scope="module")
def tiny_data():
    spec = S.DatasetSpec(seed=5, image_size=32, organ_radius=(3.0, 5.0), train_samples=4, val_samples=2,
                         test_samples=2, external_samples=2)
    return S.generate(spec)


def _tiny_cfg(**fed):
    cfg = ExperimentConfig(model=TINY_MODEL)
    return cfg.replace_federation(**{"rounds": 2, "local_steps": 2, "batch_size": 2, **fed})


class TestCosine:
    def test_endpoints_exact(self):
        assert F.cosine_lr(0, 1000) == 1e-2
        assert F.cosine_lr(999, 1000) == 1e-7

    def test_midpoint(self):
        assert F.cosine_lr(50, 101) == pytest.approx((1e-2 + 1e-7) / 2, rel=1e-12)

    @pytest.mark.parametrize("total", [1, 2, 3, 17, 1000])
    def test_non_increasing(self, total):
        lrs = [F.cosine_lr(s, total) for s in range(total)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step", [-1, 10])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            F.cosine_lr(step, 10)


class TestConfigs:
    @pytest.mark.parametrize("kw", [{"rounds": 0}, {"local_steps": -1}, {"lr_start": 1e-8},
                                    {"loss_mode": "dice"}, {"batch_size": 0}])
    def test_train_invalid(self, kw):
        with pytest.raises(ValueError):
            F.TrainConfig(**kw)

    @pytest.mark.parametrize("kw", [{"kind": "sgd"}, {"server_momentum": 1.0}, {"prox_mu": -1}, {"server_lr": 0}])
    def test_aggregator_invalid(self, kw):
        with pytest.raises(ValueError):
            F.AggregatorConfig(**kw)

    def test_defaults(self):
        a = F.AggregatorConfig()
        assert (a.server_momentum, a.server_lr, a.prox_mu) == (0.6, 1.0, 0.01)
        t = F.TrainConfig()
        assert (t.batch_size, t.lr_start, t.lr_end) == (4, 1e-2, 1e-7)

    def test_messages(self):
        ck = Checkpoint({"a": np.zeros(1, np.float32)})
        with pytest.raises(ValueError):
            F.RoundMessage("to_client", 0, ck)
        with pytest.raises(ValueError):
            F.RoundMessage("to_server", 0)
        with pytest.raises(ValueError):
            F.RoundMessage("sideways", 0, ck, 0.1)
        with pytest.raises(ValueError):
            _update("A", {"a": [0]}, 0)


class TestFedAvg:
    def test_scalar_example(self):
        out = F.aggregate_fedavg([_update("A", {"w": 0.0}, 1), _update("B", {"w": 1.0}, 3)])
        assert out.entries["w"] == np.float32(0.75)

    def test_single_client_exact(self):
        u = _update("A", {"w": np.random.default_rng(0).normal(size=(3, 4))}, 7)
        assert F.aggregate_fedavg([u]).equals(u.parameters)

    def test_identical_updates(self):
        e = {"w": np.random.default_rng(1).normal(size=5)}
        out = F.aggregate_fedavg([_update(c, e, n) for c, n in zip("ABC", (1, 5, 9))])
        np.testing.assert_array_equal(out.entries["w"], np.float32(e["w"]))

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        ups = [_update(c, {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}, int(rng.integers(1, 50)))
               for c in "ABC"]
        out = F.aggregate_fedavg(ups)
        N = sum(u.sample_count for u in ups)
        for name in ("a", "b"):
            flat = out.entries[name].reshape(-1)
            for j in range(flat.size):
                ref = sum(u.sample_count / N * float(u.parameters.entries[name].reshape(-1)[j]) for u in ups)
                assert abs(flat[j] - ref) <= 1e-7 * max(1.0, abs(ref))

    def test_shape_mismatch_names_parameter(self):
        with pytest.raises(ValueError, match="'w'"):
            F.aggregate_fedavg([_update("A", {"w": np.zeros(2)}, 1), _update("B", {"w": np.zeros(3)}, 1)])

    def test_name_mismatch(self):
        with pytest.raises(ValueError):
            F.aggregate_fedavg([_update("A", {"w": 0}, 1), _update("B", {"v": 0}, 1)])

    def test_empty(self):
        with pytest.raises(ValueError):
            F.aggregate_fedavg([])


class TestFedOpt:
    def test_zero_delta(self):
        g = Checkpoint({"w": np.array([1.5, -2.0], np.float32)})
        out, v = F.aggregate_fedopt(g, [_update("A", {"w": [1.5, -2.0]}, 3)], F.AggregatorConfig("fedopt"))
        assert out.equals(g)
        assert not v["w"].any()

    def test_two_round_unroll(self):
        cfg = F.AggregatorConfig("fedopt", server_momentum=0.6)
        g0 = Checkpoint({"w": np.array([0.0, 1.0], np.float32)})
        d = np.array([0.5, -0.25])
        g1, v = F.aggregate_fedopt(g0, [_update("A", {"w": g0.entries["w"] + d}, 2)], cfg)
        np.testing.assert_allclose(v["w"], d, atol=1e-7)
        np.testing.assert_allclose(g1.entries["w"], g0.entries["w"] + d, atol=1e-7)
        g2, v = F.aggregate_fedopt(g1, [_update("A", {"w": g1.entries["w"] + d}, 2)], cfg, v)
        np.testing.assert_allclose(v["w"], 1.6 * d, atol=1e-7)
        np.testing.assert_allclose(g2.entries["w"], g0.entries["w"] + 2.6 * d, atol=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_no_momentum_is_fedavg(self, seed):
        rng = np.random.default_rng(seed)
        g = Checkpoint({"w": rng.normal(size=(3, 3)).astype(np.float32)})
        ups = [_update(c, {"w": rng.normal(size=(3, 3))}, int(rng.integers(1, 20))) for c in "ABC"]
        out, _ = F.aggregate_fedopt(g, ups, F.AggregatorConfig("fedopt", server_momentum=0.0))
        np.testing.assert_allclose(out.entries["w"], F.aggregate_fedavg(ups).entries["w"], atol=1e-7)

    def test_velocity_mismatch(self):
        g = Checkpoint({"w": np.zeros(2, np.float32)})
        with pytest.raises(ValueError):
            F.aggregate_fedopt(g, [_update("A", {"w": [0, 0]}, 1)], F.AggregatorConfig("fedopt"),
                               {"w": np.zeros(3)})


class TestClient:
    def _client(self, data, k="A"):
        return F.build_clients(data, {c: i for i, c in enumerate(S.CLIENTS)})[S.CLIENTS.index(k)]

    def test_zero_steps_identity(self, tiny_data):
        g = TINY_MODEL.build(8).checkpoint()
        cfg = F.TrainConfig(rounds=1, local_steps=0, batch_size=2)
        up = F.local_train(self._client(tiny_data), g, 0, cfg, L.DistillConfig(), TINY_MODEL)
        assert up.parameters.equals(g) and up.sample_count == 4

    def test_training_moves_parameters(self, tiny_data):
        g = TINY_MODEL.build(8).checkpoint()
        cfg = F.TrainConfig(rounds=1, local_steps=2, batch_size=2, loss_mode="marginal")
        up = F.local_train(self._client(tiny_data), g, 0, cfg, L.DistillConfig(), TINY_MODEL)
        assert not up.parameters.equals(g)
        assert up.metrics["lr_first"] == 1e-2 and up.metrics["lr_last"] == 1e-7
        assert set(up.metrics) >= {"loss_sup", "loss_total", "weight"}

    @pytest.mark.parametrize("mode", F.LOSS_MODES)
    def test_modes_run_and_log_terms(self, tiny_data, mode):
        g = TINY_MODEL.build(8).checkpoint()
        cfg = F.TrainConfig(rounds=2, local_steps=1, batch_size=2, loss_mode=mode)
        up = F.local_train(self._client(tiny_data), g, 1, cfg, L.DistillConfig(total_rounds=2), TINY_MODEL,
                           F.AggregatorConfig("fedprox"))
        assert ("loss_condist" in up.metrics) == (mode == "marginal_plus_condist")
        assert "loss_prox" in up.metrics
        assert up.metrics["weight"] == 1.0

    def test_huge_mu_pins_parameters(self, tiny_data):
        g = TINY_MODEL.build(8).checkpoint()
        cfg = F.TrainConfig(rounds=1, local_steps=10, batch_size=2, lr_start=1e-6, lr_end=1e-7,
                            loss_mode="marginal")
        up = F.local_train(self._client(tiny_data), g, 0, cfg, L.DistillConfig(), TINY_MODEL,
                           F.AggregatorConfig("fedprox", prox_mu=1e6))
        for k, v in up.parameters.entries.items():
            assert np.max(np.abs(v - g.entries[k])) < 1e-3

    def test_prox_zero_equals_plain(self, tiny_data):
        c = self._client(tiny_data)
        net = TINY_MODEL.build(8)
        x, y = c.train.images[:2], c.train.labels[:2]
        anchor = {k: v.data + 0.5 for k, v in net.params.items()}
        with T.no_grad():
            plain, _ = F.client_objective(net, x, y, c.topology, "marginal")
            prox0, terms = F.client_objective(net, x, y, c.topology, "marginal", prox_mu=0.0, anchor=anchor)
        assert plain.item() == prox0.item() and "prox" not in terms

    def test_proximal_value(self):
        p = {"a": T.parameter(np.array([1.0, 2.0])), "b": T.parameter(np.array([[3.0]]))}
        anchor = {"a": np.array([0.0, 0.0], np.float32), "b": np.array([[1.0]], np.float32)}
        assert F.proximal_term(p, anchor, 0.5).item() == pytest.approx(0.25 * (1 + 4 + 4))

    def test_non_finite_aborts(self, tiny_data, monkeypatch):
        c = self._client(tiny_data, "B")
        g = TINY_MODEL.build(8).checkpoint()
        g.entries["head0.bias"][:] = np.nan
        cfg = F.TrainConfig(rounds=1, local_steps=3, batch_size=2, loss_mode="marginal")
        with pytest.raises(F.ClientAbort, match="client B step 0: non-finite sup"):
            F.local_train(c, g, 0, cfg, L.DistillConfig(), TINY_MODEL)


class TestRun:
    def test_identity_run(self, tiny_data, tmp_path):
        cfg = _tiny_cfg(rounds=1, local_steps=0)
        init = cfg.model.build(8).checkpoint()
        for method in ("fedavg", "fedopt", "fedprox"):
            res = F.run_experiment(with_method(cfg, method), tiny_data, tmp_path / method)
            assert Checkpoint(res.final.entries).equals(Checkpoint(init.entries))

    def test_log_structure(self, tiny_data, tmp_path):
        cfg = with_method(_tiny_cfg(rounds=3, local_steps=1), "condistfl")
        res = F.run_experiment(cfg, tiny_data, tmp_path)
        recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        clients = [r for r in recs if r["type"] == "client"]
        rounds = [r for r in recs if r["type"] == "round"]
        assert len(clients) == 3 * 4 and len(rounds) == 3
        assert [r["client"] for r in clients[:4]] == list(S.CLIENTS)
        dist = cfg.distill_for_run()
        assert [r["weight"] for r in rounds] == [L.schedule_weight(r, dist) for r in range(3)]
        assert set(rounds[0]["val_dice"]) == {str(c) for c in range(1, 8)}
        assert (tmp_path / "final.cdfl").exists() and (tmp_path / "best.cdfl").exists()
        assert res.final.round == 3

    def test_deterministic_logs(self, tiny_data, tmp_path):
        cfg = with_method(_tiny_cfg(), "condistfl")
        F.run_experiment(cfg, tiny_data, tmp_path / "a", workers=4)
        F.run_experiment(cfg, tiny_data, tmp_path / "b", workers=1)
        for name in ("metrics.jsonl", "final.cdfl", "best.cdfl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_client_failure_aborts(self, tiny_data, monkeypatch):
        real = F.local_train

        def flaky(client, *a, **k):
            if client.client_id == "C":
                raise F.ClientAbort("C", 0, "sup", math.nan)
            return real(client, *a, **k)

        monkeypatch.setattr(F, "local_train", flaky)
        with pytest.raises(F.RunAbort, match="client C"):
            F.run_experiment(_tiny_cfg(), tiny_data)
