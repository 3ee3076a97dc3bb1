"""Two-stage federated training over simulated battery clients.

Stage 1 trains an autoencoder by federated averaging, stage 2 freezes the
encoder, transforms every client's features locally and federates a RUL
regression network the same way. The coordinator never sees feature rows:
everything that crosses the client boundary goes through a Channel that
serializes weight payloads and records them in a MessageLog, which is what
the information-diode audit inspects afterwards.

Benchmark variants (fully-centralized, fl-no-autoencoder, partially-
federated, batch-federated clustering) reuse the same round/epoch loop so
comparisons are paired; pooled variants declare their pooling in the log
instead of pretending to be private.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import FeatureMatrix, normalize
from .errors import ContractError, DataError, ShapeError
from .nn import AdamState, DenseNetwork, Layer, WeightSnapshot

log = logging.getLogger(__name__)

STAGE_AUTOENCODER = "autoencoder"
STAGE_RUL = "rul"
_STAGE_TAGS = {STAGE_AUTOENCODER: 0, STAGE_RUL: 1}
_TAG_STAGES = {v: k for k, v in _STAGE_TAGS.items()}

VARIANTS = (
    "fully-federated",
    "fully-centralized",
    "fl-no-autoencoder",
    "partially-federated",
    "batch-federated",
)


def derive_seed(base_seed: int, *parts: str) -> np.random.SeedSequence:
    """Stable, platform-independent seed stream for a named role."""
    hashed = [
        int.from_bytes(hashlib.sha256(p.encode("utf-8")).digest()[:8], "little")
        for p in parts
    ]
    return np.random.SeedSequence([int(base_seed)] + hashed)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDPROG_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FederationSchedule:
    rounds_autoencoder: int = 200
    rounds_rul: int = 500
    clients_per_round: int = 10  # S
    data_ratio: float = 0.5  # R
    epochs: int = 5  # local epochs per round
    batch_size: int = 32

    def __post_init__(self):
        if self.rounds_autoencoder < 1 or self.rounds_rul < 1:
            raise DataError("round counts must be >= 1")
        if self.clients_per_round < 1:
            raise DataError("clients_per_round must be >= 1")
        if not 0.0 < self.data_ratio <= 1.0:
            raise DataError("data_ratio must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("bad epochs or batch_size")


@dataclass(frozen=True)
class NetworkConfig:
    bottleneck: int = 30
    rul_hidden: tuple[int, ...] = (64, 64, 32, 32, 16, 16)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def encoder_dims(self, input_width: int) -> list[int]:
        return [input_width, max(1, math.ceil(input_width / 2)), self.bottleneck]

    def decoder_dims(self, input_width: int) -> list[int]:
        return [self.bottleneck, max(1, math.ceil(input_width / 2)), input_width]

    def rul_dims(self, input_width: int) -> list[int]:
        return [input_width, *self.rul_hidden, 1]

    def adam_for(self, net: DenseNetwork) -> AdamState:
        return AdamState.for_size(
            net.parameter_count(), self.learning_rate, self.beta1, self.beta2, self.epsilon
        )


def empty_network(dims: list[int]) -> DenseNetwork:
    layers = [
        Layer(np.zeros((out, inp)), np.zeros(out), "relu" if i < len(dims) - 2 else "linear")
        for i, (inp, out) in enumerate(zip(dims, dims[1:]))
    ]
    return DenseNetwork(layers)


def network_from_snapshot(dims: list[int], snap: WeightSnapshot) -> DenseNetwork:
    net = empty_network(dims)
    nn.restore(net, snap)
    return net


# ---------------------------------------------------------------------------
# Payloads, wire format and the message log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelUpdate:
    """The only thing a client hands back: weight snapshots plus scalars."""

    client_id: str
    stage: str
    snapshots: tuple[WeightSnapshot, ...]
    sample_count: int

    def __post_init__(self):
        if self.stage not in _STAGE_TAGS:
            raise DataError(f"unknown stage {self.stage!r}")
        if not self.snapshots:
            raise DataError("update carries no snapshots")


def encode_update(update: ModelUpdate) -> bytes:
    """Little-endian wire encoding: stage tag, client id, sample count, then
    one shape_spec + float64 vector per snapshot."""
    out = bytearray()
    out += struct.pack("<B", _STAGE_TAGS[update.stage])
    cid = update.client_id.encode("utf-8")
    out += struct.pack("<I", len(cid)) + cid
    out += struct.pack("<Q", update.sample_count)
    out += struct.pack("<B", len(update.snapshots))
    for snap in update.snapshots:
        out += struct.pack("<I", len(snap.shape_spec))
        for rows, cols in snap.shape_spec:
            out += struct.pack("<II", rows, cols)
        out += struct.pack("<Q", snap.values.size)
        out += snap.values.astype("<f8").tobytes()
    return bytes(out)


def decode_update(data: bytes) -> ModelUpdate:
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (tag,) = take("<B")
    (cid_len,) = take("<I")
    client_id = bytes(view[pos : pos + cid_len]).decode("utf-8")
    pos += cid_len
    (sample_count,) = take("<Q")
    (n_snaps,) = take("<B")
    snapshots = []
    for _ in range(n_snaps):
        (n_blocks,) = take("<I")
        spec = tuple(take("<II") for _ in range(n_blocks))
        (n_vals,) = take("<Q")
        values = np.frombuffer(view, dtype="<f8", count=n_vals, offset=pos).copy()
        pos += n_vals * 8
        snapshots.append(WeightSnapshot(values, spec))
    return ModelUpdate(client_id, _TAG_STAGES[tag], tuple(snapshots), sample_count)


@dataclass(frozen=True)
class MessageRecord:
    direction: str  # coordinator->client | client->coordinator
    kind: str  # weights | config | metrics-scalar | raw-rows
    n_bytes: int
    round: int


class MessageLog:
    def __init__(self):
        self.records: list[MessageRecord] = []

    def record(self, direction: str, kind: str, n_bytes: int, round_no: int) -> None:
        self.records.append(MessageRecord(direction, kind, n_bytes, round_no))

    def weight_messages(self) -> list[MessageRecord]:
        return [r for r in self.records if r.kind == "weights"]

    def raw_row_messages(self) -> list[MessageRecord]:
        return [r for r in self.records if r.kind == "raw-rows"]

    def bytes_by_round(self) -> dict[int, int]:
        totals: dict[int, int] = {}
        for r in self.records:
            totals[r.round] = totals.get(r.round, 0) + r.n_bytes
        return totals

    def total_bytes(self) -> int:
        return sum(r.n_bytes for r in self.records)

    def assert_diode(self) -> None:
        leaked = self.raw_row_messages()
        if leaked:
            raise ContractError(
                f"information diode violated: {len(leaked)} raw-row payload(s) in the log"
            )

    def shape(self) -> list[tuple[str, str, int, int]]:
        """Structure of the log with client identity stripped (for comparing
        message patterns across variants)."""
        return [(r.direction, r.kind, r.n_bytes, r.round) for r in self.records]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "direction": r.direction,
                            "kind": r.kind,
                            "bytes": r.n_bytes,
                            "round": r.round,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


class Channel:
    """In-process stand-in for the network link between coordinator and
    clients. Every payload is serialized, measured and logged; only weight
    updates, config blobs and scalar metrics are accepted."""

    def __init__(self, message_log: MessageLog):
        self.log = message_log

    def send_weights(self, direction: str, update: ModelUpdate, round_no: int) -> ModelUpdate:
        if not isinstance(update, ModelUpdate):
            raise ContractError(f"only ModelUpdate may cross as weights, got {type(update)}")
        data = encode_update(update)
        self.log.record(direction, "weights", len(data), round_no)
        return decode_update(data)

    def send_config(self, direction: str, payload: dict, round_no: int) -> dict:
        data = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.log.record(direction, "config", len(data), round_no)
        return json.loads(data.decode("utf-8"))

    def send_metric(self, direction: str, value: float, round_no: int) -> float:
        data = struct.pack("<d", float(value))
        self.log.record(direction, "metrics-scalar", len(data), round_no)
        return struct.unpack("<d", data)[0]

    def note_pooled_rows(self, n_bytes: int, n_rows: int) -> None:
        """Pooled variants declare their raw-data movement here."""
        log.info("pooling %d raw rows (%d bytes) onto the coordinator", n_rows, n_bytes)
        self.log.record("client->coordinator", "raw-rows", n_bytes, 0)


# ---------------------------------------------------------------------------
# Frozen weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrozenWeights:
    snapshot: WeightSnapshot
    checksum: str

    @classmethod
    def freeze(cls, snap: WeightSnapshot) -> "FrozenWeights":
        return cls(snap, hashlib.sha256(snap.values.tobytes()).hexdigest())

    def verify(self) -> bool:
        return hashlib.sha256(self.snapshot.values.tobytes()).hexdigest() == self.checksum


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


class FederatedClient:
    """One client (a battery, or a pooled battery cluster).

    Holds its normalized feature rows and RUL targets privately; the only
    values that ever leave are ModelUpdate snapshots.
    """

    def __init__(
        self,
        client_id: str,
        features: np.ndarray,
        targets: np.ndarray,
        base_seed: int,
        schedule: FederationSchedule,
        net_config: NetworkConfig,
    ):
        if features.shape[0] < 1:
            raise DataError(f"client {client_id} has no feature rows")
        self.client_id = client_id
        self._features = features
        self._targets = targets.reshape(-1, 1)
        self.schedule = schedule
        self.net_config = net_config
        self.rng = np.random.default_rng(derive_seed(base_seed, "client", client_id))
        self.compressed: np.ndarray | None = None

    @property
    def input_width(self) -> int:
        return self._features.shape[1]

    @property
    def n_rows(self) -> int:
        return self._features.shape[0]

    def _sample_rows(self, n: int) -> np.ndarray:
        take = max(1, math.ceil(self.schedule.data_ratio * n))
        return self.rng.choice(n, size=take, replace=False)

    def autoencoder_round(self, enc_snap: WeightSnapshot, dec_snap: WeightSnapshot) -> ModelUpdate:
        cfg = self.net_config
        encoder = network_from_snapshot(cfg.encoder_dims(self.input_width), enc_snap)
        decoder = network_from_snapshot(cfg.decoder_dims(self.input_width), dec_snap)
        idx = self._sample_rows(self.n_rows)
        rows = self._features[idx]
        nn.train_autoencoder_epochs(
            encoder,
            decoder,
            cfg.adam_for(encoder),
            cfg.adam_for(decoder),
            rows,
            self.schedule.epochs,
            self.schedule.batch_size,
            self.rng,
        )
        return ModelUpdate(
            self.client_id,
            STAGE_AUTOENCODER,
            (nn.snapshot(encoder), nn.snapshot(decoder)),
            int(idx.size),
        )

    def transform(self, frozen_encoder: FrozenWeights) -> None:
        """Encode the local rows and min-max scale the code, all locally.

        Rescaling keeps the RUL stage's inputs as well-conditioned as the
        raw path's; like the feature scaling it never leaves the client.
        """
        if not isinstance(frozen_encoder, FrozenWeights):
            raise ContractError("transform requires the frozen stage-1 encoder")
        cfg = self.net_config
        encoder = network_from_snapshot(cfg.encoder_dims(self.input_width), frozen_encoder.snapshot)
        code, _ = nn.forward(encoder, self._features)
        self.compressed, _ = normalize(code)

    def stage2_inputs(self, use_compressed: bool) -> np.ndarray:
        if use_compressed:
            if self.compressed is None:
                raise ContractError(
                    f"client {self.client_id}: transform() must run before the RUL stage"
                )
            return self.compressed
        return self._features

    def rul_round(self, rul_snap: WeightSnapshot, use_compressed: bool) -> ModelUpdate:
        cfg = self.net_config
        inputs = self.stage2_inputs(use_compressed)
        net = network_from_snapshot(cfg.rul_dims(inputs.shape[1]), rul_snap)
        idx = self._sample_rows(inputs.shape[0])
        nn.train_epochs(
            net,
            cfg.adam_for(net),
            inputs[idx],
            self._targets[idx],
            self.schedule.epochs,
            self.schedule.batch_size,
            self.rng,
        )
        return ModelUpdate(self.client_id, STAGE_RUL, (nn.snapshot(net),), int(idx.size))


def build_client(
    client_id: str,
    matrices: list[FeatureMatrix],
    base_seed: int,
    schedule: FederationSchedule,
    net_config: NetworkConfig,
) -> FederatedClient:
    """Stack one or more batteries' normalized rows into a client."""
    parts = sorted(matrices, key=lambda m: m.battery_id)
    rows, targets = [], []
    for m in parts:
        scaled, _ = normalize(m.values)
        rows.append(scaled)
        targets.append(m.targets)
    return FederatedClient(
        client_id,
        np.concatenate(rows, axis=0),
        np.concatenate(targets),
        base_seed,
        schedule,
        net_config,
    )


# ---------------------------------------------------------------------------
# FedAvg and the coordinator
# ---------------------------------------------------------------------------


def fed_avg(updates: list[ModelUpdate]) -> tuple[WeightSnapshot, ...]:
    """Unweighted elementwise mean, summed in ascending client_id order."""
    if not updates:
        raise ContractError("fed_avg needs at least one update")
    stages = {u.stage for u in updates}
    if len(stages) != 1:
        raise ContractError(f"fed_avg over mixed stages {sorted(stages)}")
    n_snaps = {len(u.snapshots) for u in updates}
    if len(n_snaps) != 1:
        raise ContractError("updates carry different snapshot counts")
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered[1:]:
        for a, b in zip(u.snapshots, ordered[0].snapshots):
            if a.shape_spec != b.shape_spec:
                raise ShapeError("updates carry incompatible shape_specs")
    averaged = []
    for pos in range(len(ordered[0].snapshots)):
        total = ordered[0].snapshots[pos].values.copy()
        for u in ordered[1:]:
            total += u.snapshots[pos].values
        averaged.append(WeightSnapshot(total / len(ordered), ordered[0].snapshots[pos].shape_spec))
    return tuple(averaged)


def _run_clients(tasks: list) -> list:
    """Execute per-client closures, optionally on a thread pool. Results are
    aggregated in client_id order afterwards, so scheduling cannot change
    the outcome."""
    workers = worker_count()
    if workers == 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


class Coordinator:
    """Owns the global snapshots, the round loop and the client sampling."""

    def __init__(
        self,
        schedule: FederationSchedule,
        net_config: NetworkConfig,
        base_seed: int,
        channel: Channel | None,
    ):
        self.schedule = schedule
        self.net_config = net_config
        self.base_seed = base_seed
        self.channel = channel
        self.rng = np.random.default_rng(derive_seed(base_seed, "coordinator"))
        self.round_no = 0
        self._warned_clamp = False

    def _init_snapshot(self, dims: list[int], name: str) -> WeightSnapshot:
        rng = np.random.default_rng(derive_seed(self.base_seed, "init", name))
        return nn.snapshot(nn.build_network(dims, rng))

    def _sample_clients(self, clients: dict[str, FederatedClient]) -> list[FederatedClient]:
        ids = sorted(clients)
        s = self.schedule.clients_per_round
        if s > len(ids):
            if not self._warned_clamp:
                log.warning("clients_per_round=%d exceeds %d clients; using all", s, len(ids))
                self._warned_clamp = True
            s = len(ids)
        chosen = self.rng.choice(len(ids), size=s, replace=False)
        return [clients[ids[i]] for i in chosen]

    def _broadcast(self, stage: str, snaps: tuple[WeightSnapshot, ...],
                   n_clients: int) -> list[tuple[WeightSnapshot, ...]]:
        """One broadcast per sampled client, logged in sampling order."""
        out = []
        for _ in range(n_clients):
            if self.channel is None:
                out.append(snaps)
            else:
                received = self.channel.send_weights(
                    "coordinator->client", ModelUpdate("", stage, snaps, 0), self.round_no
                )
                out.append(received.snapshots)
        return out

    def _collect(self, updates: list[ModelUpdate]) -> list[ModelUpdate]:
        if self.channel is None:
            return updates
        return [
            self.channel.send_weights("client->coordinator", u, self.round_no)
            for u in updates
        ]

    def run_autoencoder_stage(
        self, clients: dict[str, FederatedClient], input_width: int
    ) -> tuple[FrozenWeights, FrozenWeights]:
        cfg = self.net_config
        enc = self._init_snapshot(cfg.encoder_dims(input_width), "encoder")
        dec = self._init_snapshot(cfg.decoder_dims(input_width), "decoder")
        for _ in range(self.schedule.rounds_autoencoder):
            self.round_no += 1
            sampled = self._sample_clients(clients)
            # channel traffic stays serial so the log is deterministic;
            # only the local training itself may fan out to threads
            received = self._broadcast(STAGE_AUTOENCODER, (enc, dec), len(sampled))
            updates = _run_clients(
                [
                    lambda c=c, s=s: c.autoencoder_round(s[0], s[1])
                    for c, s in zip(sampled, received)
                ]
            )
            enc, dec = fed_avg(self._collect(updates))
        return FrozenWeights.freeze(enc), FrozenWeights.freeze(dec)

    def run_rul_stage(
        self, clients: dict[str, FederatedClient], input_width: int, use_compressed: bool
    ) -> FrozenWeights:
        cfg = self.net_config
        w = self._init_snapshot(cfg.rul_dims(input_width), "rul")
        for _ in range(self.schedule.rounds_rul):
            self.round_no += 1
            sampled = self._sample_clients(clients)
            received = self._broadcast(STAGE_RUL, (w,), len(sampled))
            updates = _run_clients(
                [
                    lambda c=c, s=s: c.rul_round(s[0], use_compressed)
                    for c, s in zip(sampled, received)
                ]
            )
            (w,) = fed_avg(self._collect(updates))
        return FrozenWeights.freeze(w)


# ---------------------------------------------------------------------------
# Trained model + prediction
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    mode: str
    input_width: int
    encoder: FrozenWeights | None
    decoder: FrozenWeights | None
    rul: FrozenWeights
    net_config: NetworkConfig
    message_log: MessageLog
    diode_audited: bool

    def encoder_network(self) -> DenseNetwork | None:
        if self.encoder is None:
            return None
        return network_from_snapshot(
            self.net_config.encoder_dims(self.input_width), self.encoder.snapshot
        )

    def rul_network(self) -> DenseNetwork:
        width = self.net_config.bottleneck if self.encoder is not None else self.input_width
        return network_from_snapshot(self.net_config.rul_dims(width), self.rul.snapshot)


def predict_rul(model: TrainedModel, matrix: FeatureMatrix) -> np.ndarray:
    """Per-cycle RUL predictions for one battery, clamped at 0.

    The battery is normalized with its own statistics, mirroring training;
    compressed codes are rescaled the same way clients do after transform.
    """
    scaled, _ = normalize(matrix.values)
    if model.encoder is not None:
        if not model.encoder.verify():
            raise ContractError("frozen encoder failed its checksum")
        encoder = model.encoder_network()
        code, _ = nn.forward(encoder, scaled)
        scaled, _ = normalize(code)
    net = model.rul_network()
    raw, _ = nn.forward(net, scaled)
    return np.maximum(raw[:, 0], 0.0)


def reconstruction_mse(model: TrainedModel, matrix: FeatureMatrix) -> float:
    if model.encoder is None or model.decoder is None:
        raise ContractError("model has no autoencoder")
    scaled, _ = normalize(matrix.values)
    encoder = model.encoder_network()
    decoder = network_from_snapshot(
        model.net_config.decoder_dims(model.input_width), model.decoder.snapshot
    )
    return nn.reconstruction_mse(encoder, decoder, scaled)


# ---------------------------------------------------------------------------
# Pipeline variants
# ---------------------------------------------------------------------------


def _matrix_bytes(matrices: list[FeatureMatrix]) -> int:
    return sum(m.values.size * 8 for m in matrices)


def group_into_clusters(
    matrices: dict[str, FeatureMatrix], k: int, base_seed: int
) -> dict[str, list[FeatureMatrix]]:
    """Randomly partition batteries into k clusters of near-equal size.

    Singleton clusters keep their battery's id, so k == n degenerates to the
    fully-federated client set exactly.
    """
    ids = sorted(matrices)
    if not 1 <= k <= len(ids):
        raise DataError(f"cannot form {k} clusters from {len(ids)} batteries")
    rng = np.random.default_rng(derive_seed(base_seed, "clusters"))
    order = rng.permutation(len(ids))
    buckets: list[list[FeatureMatrix]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        buckets[pos % k].append(matrices[ids[idx]])
    width = max(2, len(str(k - 1)))
    groups: dict[str, list[FeatureMatrix]] = {}
    for i, bucket in enumerate(buckets):
        name = bucket[0].battery_id if len(bucket) == 1 else f"C{i:0{width}d}"
        if name in groups:
            name = f"cluster-{i:0{width}d}"
        groups[name] = bucket
    return groups


def train_variant(
    mode: str,
    train_matrices: dict[str, FeatureMatrix],
    schedule: FederationSchedule,
    net_config: NetworkConfig,
    base_seed: int,
    n_clusters: int | None = None,
) -> TrainedModel:
    """Train one benchmark variant end to end and return the frozen model."""
    if mode not in VARIANTS:
        raise DataError(f"unknown variant {mode!r}; pick one of {VARIANTS}")
    if not train_matrices:
        raise DataError("no training batteries")
    input_width = next(iter(train_matrices.values())).values.shape[1]

    message_log = MessageLog()
    channel = Channel(message_log)

    def per_battery_clients() -> dict[str, FederatedClient]:
        return {
            bid: build_client(bid, [m], base_seed, schedule, net_config)
            for bid, m in train_matrices.items()
        }

    def pooled_client(client_id: str) -> dict[str, FederatedClient]:
        all_matrices = [train_matrices[b] for b in sorted(train_matrices)]
        channel.note_pooled_rows(_matrix_bytes(all_matrices), sum(m.n_rows for m in all_matrices))
        return {client_id: build_client(client_id, all_matrices, base_seed, schedule, net_config)}

    coordinator = Coordinator(schedule, net_config, base_seed, channel)
    diode_audited = True

    if mode == "fully-federated":
        clients = per_battery_clients()
        enc, dec = coordinator.run_autoencoder_stage(clients, input_width)
        for cid in sorted(clients):
            clients[cid].transform(enc)
        rul = coordinator.run_rul_stage(clients, net_config.bottleneck, use_compressed=True)
        return TrainedModel(mode, input_width, enc, dec, rul, net_config, message_log, True)

    if mode == "fully-centralized":
        # Everything pools on the coordinator; no client/coordinator traffic.
        clients = pooled_client("pooled")
        coordinator.channel = None
        diode_audited = False
        enc, dec = coordinator.run_autoencoder_stage(clients, input_width)
        clients["pooled"].transform(enc)
        rul = coordinator.run_rul_stage(clients, net_config.bottleneck, use_compressed=True)
        return TrainedModel(mode, input_width, enc, dec, rul, net_config, message_log, False)

    if mode == "fl-no-autoencoder":
        clients = per_battery_clients()
        rul = coordinator.run_rul_stage(clients, input_width, use_compressed=False)
        return TrainedModel(mode, input_width, None, None, rul, net_config, message_log, True)

    if mode == "partially-federated":
        # Stage 1 pools data (declared); stage 2 is federated per battery.
        pooled = pooled_client("pooled")
        coordinator.channel = None
        enc, dec = coordinator.run_autoencoder_stage(pooled, input_width)
        coordinator.channel = channel
        clients = per_battery_clients()
        for cid in sorted(clients):
            clients[cid].transform(enc)
        rul = coordinator.run_rul_stage(clients, net_config.bottleneck, use_compressed=True)
        return TrainedModel(mode, input_width, enc, dec, rul, net_config, message_log, False)

    # batch-federated(k)
    if n_clusters is None:
        raise DataError("batch-federated needs a cluster count")
    groups = group_into_clusters(train_matrices, n_clusters, base_seed)
    if n_clusters < len(train_matrices):
        pooled_matrices = [m for ms in groups.values() for m in ms if len(ms) > 1]
        if pooled_matrices:
            channel.note_pooled_rows(
                _matrix_bytes(pooled_matrices), sum(m.n_rows for m in pooled_matrices)
            )
            diode_audited = False
    clients = {
        cid: build_client(cid, ms, base_seed, schedule, net_config)
        for cid, ms in groups.items()
    }
    enc, dec = coordinator.run_autoencoder_stage(clients, input_width)
    for cid in sorted(clients):
        clients[cid].transform(enc)
    rul = coordinator.run_rul_stage(clients, net_config.bottleneck, use_compressed=True)
    return TrainedModel(mode, input_width, enc, dec, rul, net_config, message_log, diode_audited)
