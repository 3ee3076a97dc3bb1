import numpy as np
import pytest

from fedprog import data, federation as fed, nn
from fedprog.errors import ContractError, DataError, ShapeError
from fedprog.federation import (
    Channel,
    Coordinator,
    FederationSchedule,
    FrozenWeights,
    MessageLog,
    ModelUpdate,
    NetworkConfig,
    build_client,
    decode_update,
    encode_update,
    fed_avg,
    predict_rul,
    train_variant,
)


def quick_schedule(**kw):
    base = dict(rounds_autoencoder=2, rounds_rul=2, clients_per_round=2,
                data_ratio=0.5, epochs=1, batch_size=16)
    base.update(kw)
    return FederationSchedule(**base)


@pytest.fixture(scope="module")
def small_fleet_matrices():
    fleet = data.generate_synthetic_fleet(n_batteries=5, max_cycles=400, seed=11)
    return {
        t.battery_id: data.engineer_features(t) for t in fleet.traces
    }


def snap_of(values, spec=None):
    values = np.asarray(values, dtype=float)
    return nn.WeightSnapshot(values, spec or ((values.size, 1),))


# ---------------------------------------------------------------------------
# fed_avg
# ---------------------------------------------------------------------------


def test_fed_avg_single_update_is_identity():
    update = ModelUpdate("a", "rul", (snap_of([1.0, 2.0, 3.0]),), 4)
    (avg,) = fed_avg([update])
    assert avg == update.snapshots[0]


def test_fed_avg_two_updates_arithmetic_mean():
    u1 = ModelUpdate("a", "rul", (snap_of([1.0, 3.0]),), 1)
    u2 = ModelUpdate("b", "rul", (snap_of([3.0, 5.0]),), 1)
    (avg,) = fed_avg([u1, u2])
    assert np.array_equal(avg.values, [2.0, 4.0])


def test_fed_avg_matches_ordered_sum_oracle():
    rng = np.random.default_rng(3)
    vecs = {cid: rng.normal(size=17) for cid in ("c", "a", "b")}
    updates = [ModelUpdate(cid, "rul", (snap_of(v),), 1) for cid, v in vecs.items()]
    (avg,) = fed_avg(updates)
    total = vecs["a"].copy()
    total += vecs["b"]
    total += vecs["c"]
    assert np.array_equal(avg.values, total / 3.0)


def test_fed_avg_is_permutation_invariant_bitwise():
    rng = np.random.default_rng(4)
    updates = [
        ModelUpdate(f"c{i}", "rul", (snap_of(rng.normal(size=9)),), 1) for i in range(5)
    ]
    (a,) = fed_avg(updates)
    (b,) = fed_avg(list(reversed(updates)))
    assert np.array_equal(a.values, b.values)


def test_schedule_rejects_zero_rounds_and_bad_ratio():
    with pytest.raises(DataError):
        quick_schedule(rounds_rul=0)
    with pytest.raises(DataError):
        quick_schedule(rounds_autoencoder=0)
    with pytest.raises(DataError):
        quick_schedule(data_ratio=0.0)
    with pytest.raises(DataError):
        quick_schedule(data_ratio=1.5)


def test_fed_avg_rejects_mixed_stages_and_shapes():
    u1 = ModelUpdate("a", "rul", (snap_of([1.0]),), 1)
    u2 = ModelUpdate("b", "autoencoder", (snap_of([1.0]), snap_of([2.0])), 1)
    with pytest.raises(ContractError):
        fed_avg([u1, u2])
    u3 = ModelUpdate("b", "rul", (snap_of([1.0, 2.0]),), 1)
    with pytest.raises(ShapeError):
        fed_avg([u1, u3])
    with pytest.raises(ContractError):
        fed_avg([])


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def test_update_encoding_round_trips_exactly():
    rng = np.random.default_rng(8)
    net = nn.build_network([4, 3, 4], rng)
    update = ModelUpdate("B007", "autoencoder",
                         (nn.snapshot(net), nn.snapshot(net)), 123)
    back = decode_update(encode_update(update))
    assert back.client_id == "B007"
    assert back.stage == "autoencoder"
    assert back.sample_count == 123
    assert back.snapshots == update.snapshots


def test_channel_logs_and_preserves_payloads():
    log = MessageLog()
    channel = Channel(log)
    update = ModelUpdate("x", "rul", (snap_of([1.5, -2.5]),), 7)
    back = channel.send_weights("client->coordinator", update, round_no=3)
    assert back.snapshots[0] == update.snapshots[0]
    assert log.records[0].kind == "weights"
    assert log.records[0].round == 3
    assert log.records[0].n_bytes == len(encode_update(update))


def test_channel_rejects_non_update_weights():
    channel = Channel(MessageLog())
    with pytest.raises(ContractError):
        channel.send_weights("client->coordinator", np.zeros(3), 0)


# ---------------------------------------------------------------------------
# client rounds
# ---------------------------------------------------------------------------


def client_from(matrices, bid, schedule, cfg=NetworkConfig(), seed=0):
    return build_client(bid, [matrices[bid]], seed, schedule, cfg)


def global_snaps(cfg, width, seed=0):
    coord = Coordinator(quick_schedule(), cfg, seed, None)
    enc = coord._init_snapshot(cfg.encoder_dims(width), "encoder")
    dec = coord._init_snapshot(cfg.decoder_dims(width), "decoder")
    rul = coord._init_snapshot(cfg.rul_dims(cfg.bottleneck), "rul")
    return enc, dec, rul


def test_zero_epoch_round_returns_received_globals(small_fleet_matrices):
    cfg = NetworkConfig()
    schedule = quick_schedule(epochs=0, data_ratio=1.0)
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, schedule)
    enc, dec, rul = global_snaps(cfg, client.input_width)
    update = client.autoencoder_round(enc, dec)
    assert update.snapshots == (enc, dec)
    client.transform(FrozenWeights.freeze(enc))
    update2 = client.rul_round(rul, use_compressed=True)
    assert update2.snapshots == (rul,)


def test_autoencoder_round_does_not_increase_loss(small_fleet_matrices):
    cfg = NetworkConfig()
    schedule = quick_schedule(epochs=5, data_ratio=1.0)
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, schedule)
    enc, dec, _ = global_snaps(cfg, client.input_width)
    rows = client._features
    enc_net = fed.network_from_snapshot(cfg.encoder_dims(client.input_width), enc)
    dec_net = fed.network_from_snapshot(cfg.decoder_dims(client.input_width), dec)
    before = nn.reconstruction_mse(enc_net, dec_net, rows)
    update = client.autoencoder_round(enc, dec)
    enc_net2 = fed.network_from_snapshot(cfg.encoder_dims(client.input_width), update.snapshots[0])
    dec_net2 = fed.network_from_snapshot(cfg.decoder_dims(client.input_width), update.snapshots[1])
    after = nn.reconstruction_mse(enc_net2, dec_net2, rows)
    assert after <= before


def test_rul_round_does_not_increase_loss(small_fleet_matrices):
    cfg = NetworkConfig()
    schedule = quick_schedule(epochs=5, data_ratio=1.0)
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, schedule)
    enc, _, rul = global_snaps(cfg, client.input_width)
    client.transform(FrozenWeights.freeze(enc))
    inputs = client.stage2_inputs(True)
    net_before = fed.network_from_snapshot(cfg.rul_dims(cfg.bottleneck), rul)
    out, _ = nn.forward(net_before, inputs)
    before, _ = nn.mse_loss(out, client._targets)
    update = client.rul_round(rul, use_compressed=True)
    net_after = fed.network_from_snapshot(cfg.rul_dims(cfg.bottleneck), update.snapshots[0])
    out, _ = nn.forward(net_after, inputs)
    after, _ = nn.mse_loss(out, client._targets)
    assert after <= before


def test_transform_requires_frozen_encoder(small_fleet_matrices):
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, quick_schedule())
    enc, _, _ = global_snaps(NetworkConfig(), client.input_width)
    with pytest.raises(ContractError):
        client.transform(enc)  # bare snapshot, not frozen


def test_transform_width_is_the_configured_bottleneck(small_fleet_matrices):
    cfg = NetworkConfig()  # default bottleneck 30
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, quick_schedule(), cfg)
    enc, _, _ = global_snaps(cfg, client.input_width)
    client.transform(FrozenWeights.freeze(enc))
    assert client.compressed.shape == (client.n_rows, 30)


def test_transform_zero_encoder_gives_zero_rows(small_fleet_matrices):
    cfg = NetworkConfig()
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, quick_schedule(), cfg)
    dims = cfg.encoder_dims(client.input_width)
    zero = nn.snapshot(fed.empty_network(dims))
    client.transform(FrozenWeights.freeze(zero))
    assert np.array_equal(client.compressed, np.zeros((client.n_rows, 30)))


def test_transform_matches_forward_oracle(small_fleet_matrices):
    # compressed rows = encoder forward pass, rescaled with local statistics
    cfg = NetworkConfig()
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, quick_schedule(), cfg)
    enc, _, _ = global_snaps(cfg, client.input_width)
    client.transform(FrozenWeights.freeze(enc))
    net = fed.network_from_snapshot(cfg.encoder_dims(client.input_width), enc)
    code, _ = nn.forward(net, client._features)
    expected, _ = data.normalize(code)
    assert np.array_equal(client.compressed, expected)


def test_rul_stage_before_transform_is_a_contract_error(small_fleet_matrices):
    bid = sorted(small_fleet_matrices)[0]
    client = client_from(small_fleet_matrices, bid, quick_schedule())
    _, _, rul = global_snaps(NetworkConfig(), client.input_width)
    with pytest.raises(ContractError):
        client.rul_round(rul, use_compressed=True)


# ---------------------------------------------------------------------------
# stages, message accounting, diode
# ---------------------------------------------------------------------------


def test_stage_message_count_and_diode(small_fleet_matrices):
    schedule = quick_schedule(rounds_autoencoder=3, rounds_rul=4, clients_per_round=2)
    model = train_variant("fully-federated", small_fleet_matrices, schedule,
                          NetworkConfig(), base_seed=1)
    weights = model.message_log.weight_messages()
    assert len(weights) == 2 * (3 + 4) * 2
    model.message_log.assert_diode()
    assert model.message_log.raw_row_messages() == []
    assert model.diode_audited


def test_per_round_bytes_independent_of_dataset_size():
    # same batteries, twice the cycle budget: more feature rows, same messages
    def run(max_cycles):
        fleet = data.generate_synthetic_fleet(n_batteries=4, max_cycles=max_cycles, seed=17)
        mats = {t.battery_id: data.engineer_features(t) for t in fleet.traces}
        schedule = quick_schedule(rounds_autoencoder=2, rounds_rul=2, clients_per_round=2)
        model = train_variant("fully-federated", mats, schedule, NetworkConfig(), base_seed=2)
        rows = sum(m.n_rows for m in mats.values())
        return rows, model.message_log.bytes_by_round()

    rows_small, bytes_small = run(400)
    rows_big, bytes_big = run(800)
    assert rows_big > rows_small
    assert bytes_small == bytes_big


def test_round_bytes_stay_below_raw_training_bytes():
    # one round of each stage on the default fleet; weight traffic per round
    # must undercut what pooling the raw rows would cost
    fleet = data.generate_synthetic_fleet(seed=0)
    data.split_train_test(fleet, 0.75, seed=0)
    mats = {t.battery_id: data.engineer_features(t) for t in fleet.train_traces()}
    schedule = quick_schedule(rounds_autoencoder=1, rounds_rul=1, clients_per_round=10)
    model = train_variant("fully-federated", mats, schedule, NetworkConfig(), base_seed=0)
    raw_bytes = sum(m.values.size * 8 for m in mats.values())
    assert max(model.message_log.bytes_by_round().values()) < raw_bytes


def test_results_identical_under_thread_pool(small_fleet_matrices, monkeypatch):
    kw = dict(schedule=quick_schedule(), net_config=NetworkConfig(), base_seed=13)
    monkeypatch.setenv("FEDPROG_THREADS", "1")
    serial = train_variant("fully-federated", small_fleet_matrices, **kw)
    monkeypatch.setenv("FEDPROG_THREADS", "4")
    threaded = train_variant("fully-federated", small_fleet_matrices, **kw)
    assert serial.rul.snapshot == threaded.rul.snapshot
    assert serial.encoder.snapshot == threaded.encoder.snapshot


def test_stage_sampling_clamps_when_fleet_is_small(small_fleet_matrices):
    schedule = quick_schedule(clients_per_round=50)
    model = train_variant("fully-federated", small_fleet_matrices, schedule,
                          NetworkConfig(), base_seed=3)
    # every round used all 5 clients
    assert len(model.message_log.weight_messages()) == 2 * (2 + 2) * 5


def test_frozen_weights_checksums_verify(small_fleet_matrices):
    model = train_variant("fully-federated", small_fleet_matrices, quick_schedule(),
                          NetworkConfig(), base_seed=4)
    assert model.encoder.verify()
    assert model.decoder.verify()
    assert model.rul.verify()


def test_training_is_deterministic_across_runs(small_fleet_matrices):
    kw = dict(schedule=quick_schedule(), net_config=NetworkConfig(), base_seed=5)
    a = train_variant("fully-federated", small_fleet_matrices, **kw)
    b = train_variant("fully-federated", small_fleet_matrices, **kw)
    assert a.rul.snapshot == b.rul.snapshot
    assert a.encoder.snapshot == b.encoder.snapshot


def test_single_client_federation_equals_local_run(small_fleet_matrices):
    bid = sorted(small_fleet_matrices)[0]
    matrices = {bid: small_fleet_matrices[bid]}
    schedule = quick_schedule(rounds_autoencoder=3, rounds_rul=3,
                              clients_per_round=1, data_ratio=1.0)
    cfg = NetworkConfig()
    federated = train_variant("fully-federated", matrices, schedule, cfg, base_seed=9)

    # plain local run: same client id and seeds, no channel, no averaging
    client = build_client(bid, [matrices[bid]], 9, schedule, cfg)
    coord = Coordinator(schedule, cfg, 9, channel=None)
    enc, dec = coord.run_autoencoder_stage({bid: client}, client.input_width)
    client.transform(enc)
    rul = coord.run_rul_stage({bid: client}, cfg.bottleneck, use_compressed=True)

    assert federated.encoder.snapshot == enc.snapshot
    assert federated.decoder.snapshot == dec.snapshot
    assert federated.rul.snapshot == rul.snapshot


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def test_predictions_cover_every_eligible_cycle(small_fleet_matrices):
    model = train_variant("fully-federated", small_fleet_matrices, quick_schedule(),
                          NetworkConfig(), base_seed=6)
    for bid, m in small_fleet_matrices.items():
        preds = predict_rul(model, m)
        assert preds.shape == (m.n_rows,)
        assert (preds >= 0.0).all()


def test_zero_weight_model_predicts_zero(small_fleet_matrices):
    cfg = NetworkConfig()
    bid = sorted(small_fleet_matrices)[0]
    m = small_fleet_matrices[bid]
    width = m.values.shape[1]
    model = fed.TrainedModel(
        mode="fully-federated",
        input_width=width,
        encoder=FrozenWeights.freeze(nn.snapshot(fed.empty_network(cfg.encoder_dims(width)))),
        decoder=FrozenWeights.freeze(nn.snapshot(fed.empty_network(cfg.decoder_dims(width)))),
        rul=FrozenWeights.freeze(nn.snapshot(fed.empty_network(cfg.rul_dims(cfg.bottleneck)))),
        net_config=cfg,
        message_log=MessageLog(),
        diode_audited=True,
    )
    assert np.array_equal(predict_rul(model, m), np.zeros(m.n_rows))


def test_prediction_matches_composed_forward_oracle(small_fleet_matrices):
    cfg = NetworkConfig()
    model = train_variant("fully-federated", small_fleet_matrices, quick_schedule(),
                          cfg, base_seed=7)
    bid = sorted(small_fleet_matrices)[0]
    m = small_fleet_matrices[bid]
    scaled, _ = data.normalize(m.values)
    enc_net = fed.network_from_snapshot(cfg.encoder_dims(model.input_width),
                                        model.encoder.snapshot)
    rul_net = fed.network_from_snapshot(cfg.rul_dims(cfg.bottleneck), model.rul.snapshot)
    code, _ = nn.forward(enc_net, scaled)
    code, _ = data.normalize(code)
    raw, _ = nn.forward(rul_net, code)
    assert np.array_equal(predict_rul(model, m), np.maximum(raw[:, 0], 0.0))


# ---------------------------------------------------------------------------
# pipeline variants
# ---------------------------------------------------------------------------


def test_no_autoencoder_variant_takes_raw_width(small_fleet_matrices):
    model = train_variant("fl-no-autoencoder", small_fleet_matrices, quick_schedule(),
                          NetworkConfig(), base_seed=8)
    assert model.encoder is None
    assert model.rul_network().input_dim == 40
    # stage 1 never ran: only rul-stage weight messages
    rul_msgs = model.message_log.weight_messages()
    assert len(rul_msgs) == 2 * 2 * 2
    model.message_log.assert_diode()


def test_fully_centralized_pools_and_declares_it(small_fleet_matrices):
    model = train_variant("fully-centralized", small_fleet_matrices, quick_schedule(),
                          NetworkConfig(), base_seed=8)
    assert not model.diode_audited
    pooled = model.message_log.raw_row_messages()
    assert len(pooled) == 1
    total_bytes = sum(m.values.size * 8 for m in small_fleet_matrices.values())
    assert pooled[0].n_bytes == total_bytes
    # nothing else crossed a boundary
    assert model.message_log.weight_messages() == []


def test_partially_federated_pools_stage1_only(small_fleet_matrices):
    schedule = quick_schedule(rounds_autoencoder=2, rounds_rul=3, clients_per_round=2)
    model = train_variant("partially-federated", small_fleet_matrices, schedule,
                          NetworkConfig(), base_seed=8)
    assert not model.diode_audited
    assert len(model.message_log.raw_row_messages()) == 1
    # federated RUL stage still exchanged weights
    assert len(model.message_log.weight_messages()) == 2 * 3 * 2


def test_batch_federated_with_one_cluster_matches_centralized_client_set(
    small_fleet_matrices,
):
    model = train_variant("batch-federated", small_fleet_matrices, quick_schedule(),
                          NetworkConfig(), base_seed=8, n_clusters=1)
    pooled = model.message_log.raw_row_messages()
    assert len(pooled) == 1
    # a single client holds every row: weight messages show S clamped to 1
    assert len(model.message_log.weight_messages()) == 2 * (2 + 2) * 1


def test_batch_federated_full_clusters_is_fully_federated(small_fleet_matrices):
    kw = dict(schedule=quick_schedule(), net_config=NetworkConfig(), base_seed=10)
    batch = train_variant("batch-federated", small_fleet_matrices,
                          n_clusters=len(small_fleet_matrices), **kw)
    full = train_variant("fully-federated", small_fleet_matrices, **kw)
    assert batch.message_log.shape() == full.message_log.shape()
    assert batch.diode_audited
    assert batch.rul.snapshot == full.rul.snapshot


def test_batch_federated_rejects_too_many_clusters(small_fleet_matrices):
    with pytest.raises(DataError):
        train_variant("batch-federated", small_fleet_matrices, quick_schedule(),
                      NetworkConfig(), base_seed=0,
                      n_clusters=len(small_fleet_matrices) + 1)


def test_unknown_variant_rejected(small_fleet_matrices):
    with pytest.raises(DataError):
        train_variant("half-federated", small_fleet_matrices, quick_schedule(),
                      NetworkConfig(), base_seed=0)
