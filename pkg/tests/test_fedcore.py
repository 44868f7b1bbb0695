import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedlora.config import from_dict
from fedlora.data import Dataset
from fedlora.experiment import prepare, run_experiment, run_federated, train_config
from fedlora.fedcore import (AggregationError, ClientState, ServerState, Strategy, TrainConfig, aggregate,
                             factor_average_product, interference_gap, local_train, make_clients,
                             oracle_product_average, phase_of_round, run_round, synchronize)
from fedlora.linalg import Rng, as_matrix, frobenius_norm, relative_error
from fedlora.lora import FreezePhase, LoraAdapter, adapter_forward, adapter_grads, delta
from fedlora.model import AdaptedModel, Layer, LossKind, loss_and_grad
from fedlora.wire import MatrixKind, UpdateMessage


def cls_config(**fed):
    federation = {"num_clients": 3, "rounds": 4, "lr": 0.05, "local_epochs": 1, "batch_size": 16}
    federation.update(fed)
    return from_dict({"task": {"kind": "synthetic_classification", "n_train": 240, "n_test": 60, "d": 6},
                      "model": {"hidden": [8, 8], "rank": 2, "pretrain_epochs": 5},
                      "federation": federation})


def reg_config(**fed):
    federation = {"num_clients": 3, "rounds": 4, "lr": 0.1, "local_epochs": 1, "batch_size": 16}
    federation.update(fed)
    return from_dict({"task": {"kind": "lowrank_regression", "d": 6, "r_true": 2, "n_train": 120, "n_test": 30},
                      "model": {"rank": 2}, "federation": federation})


def fresh(cfg, strategy, seed=0):
    setup = prepare(cfg, seed)
    server = ServerState(setup.model.replica(), strategy, train_config(cfg), setup.loss, setup.test)
    clients = make_clients(server.model, setup.shards, Rng(seed).spawn(12))
    return server, clients


# --- phases -----------------------------------------------------------------

def test_phase_schedule():
    assert phase_of_round(Strategy.ROLORA, 1) is FreezePhase.FREEZE_A
    assert phase_of_round(Strategy.ROLORA, 2) is FreezePhase.FREEZE_B
    assert phase_of_round(Strategy.ROLORA, 7) is FreezePhase.FREEZE_A
    assert all(phase_of_round(Strategy.FFA_LORA, t) is FreezePhase.FREEZE_A for t in range(1, 20))
    assert all(phase_of_round(Strategy.FEDAVG_LORA, t) is FreezePhase.BOTH_TRAINABLE for t in range(1, 20))
    with pytest.raises(ValueError):
        phase_of_round(Strategy.ROLORA, 0)


# --- local training ---------------------------------------------------------

def test_local_train_lr_zero_returns_synchronized_state():
    server, clients = fresh(cls_config(), Strategy.FEDAVG_LORA)
    c = clients[0]
    synchronize(c, server)
    msg = local_train(c, FreezePhase.BOTH_TRAINABLE, TrainConfig(lr=0.0, local_epochs=2), server.loss)
    for layer_id, kind, m in msg.entries:
        if kind is MatrixKind.HEAD:
            assert np.array_equal(m, server.model.head)
        else:
            ad = server.model.layers[layer_id].adapter
            assert np.array_equal(m, ad.a if kind is MatrixKind.A else ad.b)


def test_local_train_freeze_a_sends_b_and_head_only():
    server, clients = fresh(cls_config(), Strategy.FFA_LORA)
    synchronize(clients[0], server)
    msg = local_train(clients[0], FreezePhase.FREEZE_A, server.config, server.loss)
    assert msg.kinds() == {MatrixKind.B, MatrixKind.HEAD}
    both = local_train(clients[1], FreezePhase.BOTH_TRAINABLE, server.config, server.loss)
    a_bytes = sum(11 + 4 * m.size for _, k, m in both.entries if k is MatrixKind.A)
    assert both.byte_size - msg.byte_size == a_bytes


def test_single_full_batch_step_matches_adapter_grads_bitwise():
    rng = Rng(3)
    w0 = rng.normal(size=(4, 5))
    ad = LoraAdapter(rng.normal(size=(2, 5)), rng.normal(size=(4, 2)), 1.0)
    x, y = rng.normal(size=(5, 12)), rng.normal(size=(4, 12))
    client = ClientState(0, Dataset(x, y), AdaptedModel([Layer(w0, ad.copy())]), Rng(0))
    lr = 0.05
    msg = local_train(client, FreezePhase.BOTH_TRAINABLE, TrainConfig(lr=lr, batch_size=12), LossKind.MSE)

    order = Rng(0).permutation(12)
    xb = x[:, order]
    _, g = loss_and_grad(LossKind.MSE, adapter_forward(ad, w0, xb), y[:, order])
    g_a, g_b = adapter_grads(ad, xb, g)
    assert np.array_equal(msg.matrix(0, MatrixKind.A), ad.a - lr * g_a)
    assert np.array_equal(msg.matrix(0, MatrixKind.B), ad.b - lr * g_b)


def test_local_train_empty_data():
    client = ClientState(0, Dataset(np.zeros((2, 0)), np.zeros((2, 0))),
                         AdaptedModel([Layer(np.eye(2), LoraAdapter.init(2, 2, 1, Rng(0)))]), Rng(0))
    with pytest.raises(ValueError):
        local_train(client, FreezePhase.FREEZE_A, TrainConfig(), LossKind.MSE)


# --- aggregation ------------------------------------------------------------

def _one_layer_server(a, b, strategy=Strategy.FEDAVG_LORA):
    model = AdaptedModel([Layer(np.zeros((b.shape[0], a.shape[1])), LoraAdapter(a, b))])
    return ServerState(model, strategy, TrainConfig(), LossKind.MSE)


def _msg(cid, b=None, a=None, phase=FreezePhase.FREEZE_A, rnd=1):
    entries = []
    if a is not None:
        entries.append((0, MatrixKind.A, a))
    if b is not None:
        entries.append((0, MatrixKind.B, b))
    return UpdateMessage(rnd, cid, phase, entries)


def test_aggregate_identical_is_bitwise():
    rng = Rng(4)
    b = rng.normal(size=(3, 2))
    for n in (1, 2, 3, 7):
        server = _one_layer_server(rng.normal(size=(2, 4)), np.zeros((3, 2)))
        aggregate(server, [_msg(i, b=b.copy()) for i in range(n)])
        assert np.array_equal(server.model.layers[0].adapter.b, b)


def test_aggregate_two_clients_hand_example():
    server = _one_layer_server(as_matrix([[1.0, 0.0]]), np.zeros((2, 1)))
    aggregate(server, [_msg(0, b=as_matrix([[1], [0]])), _msg(1, b=as_matrix([[0], [1]]))])
    assert np.array_equal(server.model.layers[0].adapter.b, [[0.5], [0.5]])


def test_aggregate_leaves_untransmitted_factor():
    rng = Rng(5)
    a = rng.normal(size=(2, 4))
    server = _one_layer_server(a, np.zeros((3, 2)))
    aggregate(server, [_msg(i, b=rng.normal(size=(3, 2))) for i in range(3)])
    assert server.model.layers[0].adapter.a is a


@pytest.mark.parametrize("bad", ["duplicate", "phase", "round", "shape", "missing"])
def test_aggregate_errors(bad):
    rng = Rng(6)
    server = _one_layer_server(rng.normal(size=(2, 4)), np.zeros((3, 2)))
    msgs = [_msg(i, b=rng.normal(size=(3, 2))) for i in range(3)]
    expected = None
    if bad == "duplicate":
        msgs[2].client_id = 0
    elif bad == "phase":
        msgs[1].phase = FreezePhase.FREEZE_B
    elif bad == "round":
        msgs[1].round = 2
    elif bad == "shape":
        msgs[1] = _msg(1, b=rng.normal(size=(3, 3)))
    else:
        expected = [0, 1, 2, 3]
    with pytest.raises(AggregationError):
        aggregate(server, msgs, expected_ids=expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32))
def test_aggregate_order_sensitivity_is_tiny(n, seed):
    rng = Rng(seed)
    bs = [rng.normal(size=(5, 2)) for _ in range(n)]
    s1 = _one_layer_server(rng.normal(size=(2, 4)), np.zeros((5, 2)))
    s2 = _one_layer_server(s1.model.layers[0].adapter.a, np.zeros((5, 2)))
    aggregate(s1, [_msg(i, b=b) for i, b in enumerate(bs)])
    perm = rng.permutation(n)
    aggregate(s2, [_msg(int(perm[i]), b=b) for i, b in enumerate(bs)])
    expected = sum(bs) / n
    for s in (s1, s2):
        assert relative_error(s.model.layers[0].adapter.b, expected) <= 1e-12


# --- oracle and interference -------------------------------------------------

def test_oracle_examples():
    rng = Rng(7)
    ad = LoraAdapter(rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), 1.5)
    assert np.allclose(oracle_product_average([ad, ad.copy(), ad.copy()]), delta(ad), rtol=0, atol=1e-15)
    one = LoraAdapter(as_matrix([[1, 0]]), as_matrix([[1], [0]]))
    two = LoraAdapter(as_matrix([[0, 1]]), as_matrix([[0], [1]]))
    assert np.array_equal(oracle_product_average([one, two]), [[0.5, 0], [0, 0.5]])
    assert interference_gap([one, two]) == 0.5


def test_oracle_with_shared_a_is_product_of_mean_b():
    rng = Rng(8)
    a = rng.normal(size=(2, 5))
    ads = [LoraAdapter(a, rng.normal(size=(4, 2)), 0.8) for _ in range(6)]
    mean_b = sum(ad.b for ad in ads) / 6
    assert relative_error(oracle_product_average(ads), 0.8 * mean_b @ a) <= 1e-12


adapters_strategy = st.tuples(st.integers(2, 10), st.integers(1, 8), st.integers(1, 8), st.integers(1, 4),
                              st.integers(0, 2**32))


@settings(max_examples=60, deadline=None)
@given(adapters_strategy, st.sampled_from(["a", "b", "all"]))
def test_gap_vanishes_when_a_factor_is_shared(params, shared):
    n, d_in, d_out, r, seed = params
    rng = Rng(seed)
    a0, b0 = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r))
    ads = []
    for _ in range(n):
        a = a0 if shared in ("a", "all") else rng.normal(size=(r, d_in))
        b = b0 if shared in ("b", "all") else rng.normal(size=(d_out, r))
        ads.append(LoraAdapter(a, b))
    assert interference_gap(ads) <= 1e-12 * max(frobenius_norm(oracle_product_average(ads)), 1e-300)


@settings(max_examples=60, deadline=None)
@given(adapters_strategy)
def test_gap_positive_for_independent_factors(params):
    n, d_in, d_out, r, seed = params
    rng = Rng(seed)
    ads = [LoraAdapter(rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r))) for _ in range(n)]
    assert interference_gap(ads) > 1e-6
    gap_matrix = oracle_product_average(ads) - factor_average_product(ads)
    assert interference_gap(ads) == frobenius_norm(gap_matrix)


# --- rounds -----------------------------------------------------------------

def test_rolora_first_two_rounds_are_exact():
    server, clients = fresh(cls_config(), Strategy.ROLORA)
    for t in (1, 2):
        m = run_round(server, clients)
        assert m.phase is (FreezePhase.FREEZE_A if t == 1 else FreezePhase.FREEZE_B)
        for i in server.model.adapter_layers:
            oracle = oracle_product_average([c.layers[i].adapter for c in server.last_submissions])
            assert relative_error(delta(server.model.layers[i].adapter), oracle) <= 1e-12
        if t == 1:
            a_vals = [c.model.layers[0].adapter.a.tobytes() for c in clients]
            assert len(set(a_vals)) == 1


def test_fedavg_heterogeneous_round_has_interference():
    server, clients = fresh(cls_config(partition="dirichlet", beta=0.1), Strategy.FEDAVG_LORA)
    run_round(server, clients)  # B leaves zero during round 1
    assert run_round(server, clients).interference_gap > 0


def test_zero_local_epochs_leave_adapters_unchanged():
    server, clients = fresh(cls_config(local_epochs=0), Strategy.FEDAVG_LORA)
    before = [(l.adapter.a.copy(), l.adapter.b.copy()) for l in server.model.layers]
    head = server.model.head.copy()
    run_round(server, clients)
    for (a, b), layer in zip(before, server.model.layers):
        assert np.array_equal(a, layer.adapter.a) and np.array_equal(b, layer.adapter.b)
    assert np.array_equal(head, server.model.head)


def test_ffa_keeps_a_bitwise_constant_and_clients_synchronized():
    server, clients = fresh(cls_config(rounds=5), Strategy.FFA_LORA)
    a0 = [l.adapter.a.tobytes() for l in server.model.layers]
    for _ in range(5):
        run_round(server, clients)
        assert [l.adapter.a.tobytes() for l in server.model.layers] == a0
        for c in clients:
            assert [l.adapter.a.tobytes() for l in c.model.layers] == a0


def test_frozen_factor_synchronized_at_round_start():
    server, clients = fresh(cls_config(), Strategy.ROLORA)
    for t in range(1, 5):
        for c in clients:
            synchronize(c, server)
        phase = phase_of_round(Strategy.ROLORA, t)
        frozen = "a" if phase is FreezePhase.FREEZE_A else "b"
        for c in clients:
            for i in server.model.adapter_layers:
                assert getattr(c.model.layers[i].adapter, frozen).tobytes() == \
                    getattr(server.model.layers[i].adapter, frozen).tobytes()
        run_round(server, clients)


def test_round_index_and_byte_accounting():
    server, clients = fresh(cls_config(), Strategy.ROLORA)
    logs = [run_round(server, clients) for _ in range(4)]
    assert [m.round for m in logs] == [1, 2, 3, 4] and server.round_index == 5
    # rounds 1 and 3 send B, rounds 2 and 4 send A; with square-free shapes these differ
    assert logs[0].uplink_bytes == logs[2].uplink_bytes
    assert logs[1].uplink_bytes == logs[3].uplink_bytes
    assert all(m.downlink_bytes > 0 for m in logs)


def test_downlink_only_rebroadcasts_changed_matrices():
    server, clients = fresh(cls_config(), Strategy.FFA_LORA)
    first = run_round(server, clients)
    second = run_round(server, clients)
    # round 1 ships everything, later rounds only B and head
    assert second.downlink_bytes < first.downlink_bytes
    assert second.downlink_bytes == second.uplink_bytes


def test_message_minimality_for_square_adapters():
    server, clients = fresh(reg_config(), Strategy.FEDAVG_LORA)
    full = local_train(clients[0], FreezePhase.BOTH_TRAINABLE, server.config, server.loss)
    half_b = local_train(clients[1], FreezePhase.FREEZE_A, server.config, server.loss)
    half_a = local_train(clients[2], FreezePhase.FREEZE_B, server.config, server.loss)
    assert half_b.adapter_bytes() * 2 == full.adapter_bytes() == half_a.adapter_bytes() * 2


def test_weighted_aggregation_uses_sample_counts():
    rng = Rng(9)
    server = _one_layer_server(rng.normal(size=(2, 4)), np.zeros((3, 2)))
    b0, b1 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    aggregate(server, [_msg(0, b=b0), _msg(1, b=b1)], weights=[0.25, 0.75])
    assert relative_error(server.model.layers[0].adapter.b, 0.25 * b0 + 0.75 * b1) <= 1e-14


# --- experiments ------------------------------------------------------------

def test_zero_rounds_gives_initial_evaluation_only():
    log = run_experiment(cls_config(rounds=0), Strategy.ROLORA, seed=0)
    assert log.rounds == [] and 0 <= log.initial_test_accuracy <= 1
    assert log.best_test_accuracy is None


@pytest.mark.parametrize("strategy", list(Strategy))
def test_run_experiment_is_deterministic(strategy):
    from fedlora.metrics import csv_text, json_text
    a = run_experiment(cls_config(), strategy, seed=3)
    b = run_experiment(cls_config(), strategy, seed=3)
    assert csv_text(a) == csv_text(b) and json_text(a) == json_text(b)


def test_threaded_clients_match_sequential(monkeypatch):
    from fedlora.metrics import csv_text
    seq = run_experiment(cls_config(num_clients=4), Strategy.FEDAVG_LORA, seed=1)
    monkeypatch.setenv("ROLORA_THREADS", "3")
    par = run_experiment(cls_config(num_clients=4), Strategy.FEDAVG_LORA, seed=1)
    assert csv_text(seq) == csv_text(par)


def test_all_strategies_near_central_ceiling_on_iid_task():
    base = {"task": {"kind": "synthetic_classification", "d": 16, "n_train": 600, "n_test": 300,
                     "cluster_spread": 1.0},
            "model": {"rank": 2, "pretrain_epochs": 20},
            "federation": {"num_clients": 3, "rounds": 30, "lr": 0.05, "local_epochs": 2, "batch_size": 16}}
    cfg = from_dict(base)
    central_cfg = cfg.replace(**{"federation.num_clients": 1})
    ceiling = run_experiment(central_cfg, Strategy.FEDAVG_LORA, seed=0).best_test_accuracy
    setup = prepare(cfg, 0)
    for strategy in Strategy:
        acc = run_experiment(cfg, strategy, seed=0, setup=setup).best_test_accuracy
        assert acc >= 0.95 * ceiling, (strategy, acc, ceiling)
