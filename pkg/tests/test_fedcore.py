import math

import numpy as np
import pytest

from ecgfed.dpcore import DpConfig
from ecgfed.fedcore import (CSV_COLUMNS, CSV_VERSION_LINE, FedConfig, Federation, PrivacyConfig, RoundAborted,
                            RoundPlan, RunFailed, ServerState, agg_fedadam, agg_fedavg, client_opt_config, evaluate,
                            make_plan, read_round_csv, run_experiment, weighted_params)
from ecgfed.rng import make_rng
from ecgfed.segnet import OptConfig, OptState, local_train
from toys import toy_clients

SITE_SIZES = (6100, 4900, 4300, 3500, 3000)
OPT = OptConfig(warmup_steps=3)


def state_with(theta, **kw):
    return ServerState.initial(np.asarray(theta, dtype=float), FedConfig(**kw))


class TestServerRules:
    def test_fedavg_zero_sum(self):
        g = np.array([0.5, -2.0])
        assert np.array_equal(agg_fedavg(g, np.zeros(2)), g)

    def test_fedavg_two_clients(self):
        w = np.array([1, 3]) / 4
        s = w[0] * np.array([4.0]) + w[1] * np.array([0.0])
        assert agg_fedavg(np.array([2.0]), s)[0] == 3.0

    def test_delta_form_equals_parameter_form(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(50)
        locals_ = [theta + 0.1 * rng.standard_normal(50) for _ in SITE_SIZES]
        w = np.array(SITE_SIZES) / sum(SITE_SIZES)
        delta_form = agg_fedavg(theta, weighted_params([p - theta for p in locals_], w))
        np.testing.assert_allclose(delta_form, weighted_params(locals_, w), rtol=0, atol=1e-14)

    def test_identical_updates(self):
        rng = np.random.default_rng(1)
        theta, d = rng.standard_normal(20), rng.standard_normal(20)
        w = np.array(SITE_SIZES) / sum(SITE_SIZES)
        out = weighted_params([theta + d] * 5, w)
        np.testing.assert_allclose(out - theta, d, rtol=0, atol=1e-14)

    def test_fedadam_zero_gradient(self):
        st = state_with([1.0, -3.0])
        for _ in range(5):
            st = agg_fedadam(st, np.zeros(2))
        assert np.array_equal(st.global_params, [1.0, -3.0]) and st.adam_steps == 5

    def test_fedadam_first_step_sign(self):
        g = np.array([2.0, -0.5, 1e-1])
        st = agg_fedadam(state_with(np.zeros(3), server_lr=0.1, adaptivity_tau=1e-9), g)
        np.testing.assert_allclose(st.global_params, 0.1 * np.sign(g), rtol=1e-7)

    def test_fedadam_large_tau_limit(self):
        g = np.array([0.3, -0.2])
        st = agg_fedadam(state_with(np.zeros(2), server_betas=(0.0, 0.0), adaptivity_tau=1e6, server_lr=1.0), g)
        np.testing.assert_allclose(st.global_params, g / 1e6, rtol=1e-6)

    def test_fedadam_moments_persist(self):
        st = state_with(np.zeros(1), server_betas=(0.9, 0.99))
        st = agg_fedadam(st, np.array([1.0]))
        st = agg_fedadam(st, np.array([1.0]))
        assert st.fedadam_m[0] == pytest.approx(0.19) and st.fedadam_v[0] == pytest.approx(0.0199)

    def test_fedadam_relabel_invariant(self):
        rng = np.random.default_rng(2)
        deltas = [rng.standard_normal(30) for _ in SITE_SIZES]
        w = np.array(SITE_SIZES) / sum(SITE_SIZES)
        perm = [3, 0, 4, 1, 2]
        a = agg_fedadam(state_with(np.zeros(30)), weighted_params(deltas, w))
        b = agg_fedadam(state_with(np.zeros(30)), weighted_params([deltas[i] for i in perm], w[perm]))
        np.testing.assert_allclose(a.global_params, b.global_params, rtol=1e-12)

    def test_layout_checks(self):
        with pytest.raises(ValueError):
            agg_fedavg(np.zeros(3), np.zeros(2))
        with pytest.raises(ValueError):
            agg_fedadam(state_with(np.zeros(3)), np.zeros(4))


class TestPlans:
    def test_full_participation(self):
        plan = make_plan(0, dict(enumerate(SITE_SIZES)), FedConfig(), 0)
        assert plan.participants == (0, 1, 2, 3, 4)
        assert plan.weights == tuple(n / 21800 for n in SITE_SIZES)
        assert math.fsum(plan.weights) == pytest.approx(1.0, abs=1e-12)
        plan.validate()

    def test_too_few(self):
        plan = make_plan(0, {0: 4, 1: 5}, FedConfig(k_min=3), 0)
        with pytest.raises(RoundAborted):
            plan.validate()

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            RoundPlan(0, (0, 1), (0.5, 0.6), 1, "fedavg", 1).validate()

    def test_partial_participation_seeded(self):
        fed = FedConfig(participation=0.6, k_min=1)
        counts = dict(enumerate(SITE_SIZES))
        a, b = make_plan(4, counts, fed, 7), make_plan(4, counts, fed, 7)
        assert a == b and len(a.participants) == 3
        assert math.fsum(a.weights) == pytest.approx(1.0, abs=1e-12)
        assert {make_plan(4, counts, fed, 7, attempt=t).participants for t in range(6)} != {a.participants}

    def test_config_checks(self):
        with pytest.raises(ValueError):
            FedConfig(aggregator="fedsgd")
        with pytest.raises(ValueError):
            FedConfig(server_betas=(0.9, 1.0))
        assert FedConfig(rounds=30).milestone_rounds() == (10, 20, 30)
        assert FedConfig(rounds=100).milestone_rounds() == (10, 20, 40, 100)


@pytest.fixture(scope="module")
def clients():
    return toy_clients((3, 2, 4, 2, 3))


class TestRound:
    def test_single_client_exact(self, tiny_model, clients):
        c = clients[0]
        fed = FedConfig(k_min=1, rounds=4)
        fedn = Federation(tiny_model, [c], fed, OPT, seed=3)
        theta = tiny_model.init_params(np.random.default_rng(0))
        st0 = fedn.opt_states[0]
        new, rec = fedn.run_round(ServerState.initial(theta, fed), make_plan(0, fedn.counts, fed, 3))
        ref, _, _ = local_train(tiny_model, theta, st0, c, seed=3, epoch_index=0)
        assert np.array_equal(new.global_params, ref)
        assert rec.weights == {c.name: 1.0} and new.round == 1

    def test_site_size_convex_combination(self, tiny_model, clients):
        fed = FedConfig(rounds=2)
        fedn = Federation(tiny_model, clients, fed, OPT, seed=5)
        theta = tiny_model.init_params(np.random.default_rng(1))
        w = tuple(n / 21800 for n in SITE_SIZES)
        plan = RoundPlan(0, (0, 1, 2, 3, 4), w, 1, "fedavg", 3)
        starts = {k: s for k, s in fedn.opt_states.items()}
        new, _ = fedn.run_round(ServerState.initial(theta, fed), plan)
        trained = [local_train(tiny_model, theta, starts[k], clients[k], seed=5, epoch_index=0)[0] for k in range(5)]
        expected = w[0] * trained[0]
        for wk, p in zip(w[1:], trained[1:]):
            expected = expected + wk * p
        assert np.array_equal(new.global_params, expected)
        stack = np.stack(trained)
        assert np.all(new.global_params >= stack.min(axis=0) - 1e-12)
        assert np.all(new.global_params <= stack.max(axis=0) + 1e-12)

    def test_abort_leaves_state(self, tiny_model, clients):
        fed = FedConfig(k_min=3)
        fedn = Federation(tiny_model, clients, fed, OPT, seed=0)
        theta = tiny_model.init_params(np.random.default_rng(2))
        st = ServerState.initial(theta, fed)
        before = {k: s.step for k, s in fedn.opt_states.items()}
        with pytest.raises(RoundAborted):
            fedn.run_round(st, RoundPlan(0, (0, 1), (0.5, 0.5), 1, "fedavg", 3))
        assert np.array_equal(st.global_params, theta) and st.round == 0
        assert {k: s.step for k, s in fedn.opt_states.items()} == before

    def test_record_contents(self, tiny_model, clients):
        fed = FedConfig(aggregator="fedadam")
        fedn = Federation(tiny_model, clients, fed, OPT, seed=0, val=clients)
        theta = tiny_model.init_params(np.random.default_rng(2))
        _, rec = fedn.run_round(ServerState.initial(theta, fed), make_plan(0, fedn.counts, fed, 0))
        assert rec.participants == [c.name for c in clients]
        assert rec.n_k == {c.name: len(c) for c in clients}
        assert rec.preclip_norm == rec.postclip_norm and rec.noise_sigma == 0.0
        assert 0.0 <= rec.val_dice <= 1.0 and set(rec.val_client) == set(rec.participants)

    def test_privacy_path_clips(self, tiny_model, clients):
        fed = FedConfig()
        priv = PrivacyConfig(secagg=True, dp=DpConfig(sigma=0.6, C=0.05, delta=1e-5, enabled=True))
        fedn = Federation(tiny_model, clients, fed, OPT, priv, seed=0)
        theta = tiny_model.init_params(np.random.default_rng(2))
        new, rec = fedn.run_round(ServerState.initial(theta, fed), make_plan(0, fedn.counts, fed, 0))
        assert all(v <= 0.05 + 1e-9 for v in rec.postclip_norm.values())
        assert rec.noise_sigma == pytest.approx(0.6 * 0.05)
        assert fedn.ledger.sigmas == [0.6]
        assert not np.array_equal(new.global_params, theta)

    def test_client_schedule_spans_run(self):
        cfg = client_opt_config(OptConfig(), 161, 2, 30)
        assert cfg.total_steps == 30 * 81


class TestEvaluate:
    def test_weighting(self, tiny_model):
        x = np.full((2, 16, 16), 0.9)
        m = np.zeros((2, 16, 16), bool)
        crops = {"A": (x, m), "B": (x, m | True)}
        params = np.zeros(tiny_model.n_params)
        params[tiny_model.layout.entries["head.b"][0]] = -1.0
        glob, per = evaluate(tiny_model, params, crops, {"A": 3, "B": 1})
        assert per == {"A": 1.0, "B": 0.0}
        assert glob == pytest.approx(0.75)


def run(tiny_model, clients, path, **kw):
    fed = FedConfig(**{"rounds": 3, "milestones": (2,), **kw})
    return run_experiment(tiny_model, clients, fed, path, OPT, seed=11, val=clients[:2], resume=False)


class TestExperiment:
    def test_fedprox_mu_zero_is_fedavg(self, tiny_model, clients, tmp_path):
        a = run(tiny_model, clients, tmp_path / "a", aggregator="fedavg")
        b = run(tiny_model, clients, tmp_path / "b", aggregator="fedprox", prox_mu=0.0)
        assert np.array_equal(a.state.global_params, b.state.global_params)

    def test_outputs(self, tiny_model, clients, tmp_path):
        res = run(tiny_model, clients, tmp_path / "r")
        assert res.checkpoints == {2: "ckpt_r002.bin", 3: "ckpt_r003.bin"}
        lines = (tmp_path / "r" / "rounds.csv").read_text().splitlines()
        assert lines[0] == CSV_VERSION_LINE and lines[1] == ",".join(CSV_COLUMNS)
        rows = read_round_csv(tmp_path / "r" / "rounds.csv")
        assert len(rows) == 3 * (len(clients) + 1)
        assert [r["client"] for r in rows if r["round"] == "1"][-1] == "global"

    def test_seed_replicated(self, tiny_model, clients, tmp_path):
        run(tiny_model, clients, tmp_path / "a", aggregator="fedadam")
        run(tiny_model, clients, tmp_path / "b", aggregator="fedadam")
        for name in ("rounds.csv", "state.bin", "ckpt_r002.bin", "ckpt_r003.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_after_interruption(self, tiny_model, clients, tmp_path):
        fed = FedConfig(aggregator="fedadam", rounds=4, milestones=(2,))
        full = run_experiment(tiny_model, clients, fed, tmp_path / "full", OPT, seed=2, val=clients[:2])

        def crash(msg):
            if msg.startswith("round 2/"):
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            run_experiment(tiny_model, clients, fed, tmp_path / "cut", OPT, seed=2, val=clients[:2], log=crash)
        with open(tmp_path / "cut" / "rounds.csv", "a") as fh:
            fh.write("3,T1,3,0.2")  # torn row of an uncommitted round
        res = run_experiment(tiny_model, clients, fed, tmp_path / "cut", OPT, seed=2, val=clients[:2])
        assert res.resumed_from == 2
        assert np.array_equal(res.state.global_params, full.state.global_params)
        for name in ("rounds.csv", "state.bin", "ckpt_r002.bin", "ckpt_r004.bin"):
            assert (tmp_path / "cut" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()

    def test_retry_then_fail(self, tiny_model, clients, tmp_path):
        messages = []
        fed = FedConfig(rounds=2, k_min=5, dropout=0.3, retries=6)
        res = run_experiment(tiny_model, clients, fed, tmp_path / "ok", OPT, seed=0, log=messages.append)
        attempts = [r.attempt for r in res.records]
        assert any("aborted" in m for m in messages) == any(a > 0 for a in attempts)
        for r, rec in zip(range(2), res.records):
            assert make_plan(r, {k: 1 for k in range(5)}, fed, 0, rec.attempt).participants == (0, 1, 2, 3, 4)
        with pytest.raises(RunFailed):
            run_experiment(tiny_model, clients, FedConfig(rounds=2, k_min=5, dropout=0.9, retries=2),
                           tmp_path / "fail", OPT, seed=0)

    def test_refuses_overwrite(self, tiny_model, clients, tmp_path):
        run(tiny_model, clients, tmp_path / "r")
        with pytest.raises(FileExistsError):
            run(tiny_model, clients, tmp_path / "r")

    def test_centralized_single_client(self, tiny_model, clients, tmp_path):
        fed = FedConfig(rounds=3, k_min=1)
        a = run_experiment(tiny_model, clients[:1], fed, tmp_path / "f", OPT, seed=4)
        b = run_experiment(tiny_model, clients[:1], FedConfig(aggregator="centralized", rounds=3), tmp_path / "c",
                           OPT, seed=4)
        assert np.array_equal(a.state.global_params, b.state.global_params)

    def test_centralized_loop_reference(self, tiny_model, clients, tmp_path):
        c = clients[2]
        res = run_experiment(tiny_model, [c], FedConfig(aggregator="centralized", rounds=2), tmp_path / "c", OPT,
                             seed=1)
        params = tiny_model.init_params(make_rng(1, "init"))
        st = OptState.zeros(tiny_model.n_params, client_opt_config(OPT, len(c), 2, 2))
        for e in range(2):
            params, st, _ = local_train(tiny_model, params, st, c, seed=1, epoch_index=e)
        assert np.array_equal(res.state.global_params, params)
