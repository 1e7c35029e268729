"""Desk-scale simulation of DP federated averaging with an enclave aggregator.

One round: the enclave samples participants, each sampled client trains
locally, keeps the top-k coordinates of its model delta, clips them to L2
norm ``C`` and seals them under its shared key. The enclave checks membership
and authenticity, aggregates with the selected algorithm, adds Gaussian noise
of std ``sigma * C`` and divides by the expected participant count ``q * N``.

When the Linear aggregator is selected the round also returns what a
memory-access observer learns: each participant's index set, extracted from
the aggregation trace.
"""

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import (
    AGGREGATORS,
    AggregationInput,
    SparseGradient,
    aggregate,
    average_and_perturb,
)
from .data import load_idx_dataset, make_synthetic_dataset
from .envelope import AuthenticationError, Envelope, open_envelope, provision_keys, seal
from .mlp import TinyMlp
from .trace import LinearLayout, Tracer, leaked_indices

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OLVM"
_RECORD = np.dtype([("index", "<u4"), ("value", "<f4")])


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class VerificationError(ValueError):
    """An update rejected by the enclave; ``reason`` is one of the three checks."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class RoundAborted(RuntimeError):
    pass


@dataclass
class FlConfig:
    n_users: int = 100
    q: float = 0.3
    rounds: int = 3
    alpha: float = 0.1
    sigma: float = 1.12
    clip: float = 2.0
    lr_client: float = 0.5
    lr_server: float = 2.0
    local_epochs: int = 10
    batch_size: int = 0  # 0: full shard
    seed: int = 0
    aggregator: str = "advanced"
    group_h: int = 0
    cacheline_c: int = 1
    n_labels: int = 10
    labels_per_client: int = 2
    dataset_kind: str = "synthetic"
    dataset_path: str = ""
    samples_per_client: int = 40
    test_per_label: int = 100
    separation: float = 1.0
    model_input: int = 32
    model_hidden: int = 16

    def __post_init__(self):
        checks = [
            ("q", 0 < self.q <= 1, "must be in (0, 1]"),
            ("alpha", 0 < self.alpha <= 1, "must be in (0, 1]"),
            ("sigma", self.sigma >= 0, "must be non-negative"),
            ("clip", self.clip > 0, "must be positive"),
            ("n_users", self.n_users >= 1, "must be positive"),
            ("rounds", self.rounds >= 0, "must be non-negative"),
            ("aggregator", self.aggregator in AGGREGATORS, f"must be one of {', '.join(AGGREGATORS)}"),
            ("group_h", self.aggregator != "grouped" or self.group_h >= 1, "required for grouped"),
            ("cacheline_c", self.cacheline_c >= 1, "must be positive"),
            ("dataset.kind", self.dataset_kind in ("synthetic", "idx"), "must be synthetic or idx"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)

    @property
    def expected_participants(self):
        return self.q * self.n_users

    @property
    def noise_std(self):
        return self.sigma * self.clip


# file key -> FlConfig field
CONFIG_KEYS = {
    "n_users": "n_users",
    "q": "q",
    "rounds": "rounds",
    "alpha": "alpha",
    "sigma": "sigma",
    "clip": "clip",
    "lr_client": "lr_client",
    "lr_server": "lr_server",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "aggregator": "aggregator",
    "group_h": "group_h",
    "cacheline_c": "cacheline_c",
    "n_labels": "n_labels",
    "labels_per_client": "labels_per_client",
    "dataset.kind": "dataset_kind",
    "dataset.path": "dataset_path",
    "dataset.samples_per_client": "samples_per_client",
    "dataset.test_per_label": "test_per_label",
    "dataset.separation": "separation",
    "model.input": "model_input",
    "model.hidden": "model_hidden",
}


def parse_config(text, **overrides):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(FlConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown key")
        name = CONFIG_KEYS[key]
        cast = types[name]
        try:
            values[name] = cast(raw)
        except ValueError:
            raise ConfigError(key, f"cannot parse {raw!r} as {cast.__name__}") from None
    values.update(overrides)
    return FlConfig(**values)


def load_config(path, **overrides):
    return parse_config(Path(path).read_text(), **overrides)


def dump_config(config):
    inverse = {v: k for k, v in CONFIG_KEYS.items()}
    return "".join(f"{inverse[f.name]} = {getattr(config, f.name)}\n" for f in dataclasses.fields(config))


@dataclass
class GlobalModel:
    theta: np.ndarray
    round: int = 0

    @property
    def d(self):
        return len(self.theta)


@dataclass
class ClientUpdate:
    user_id: int
    envelope: Envelope


@dataclass
class RoundLeak:
    """Index sets an access-pattern observer recorded in one round, per user."""

    round: int
    observed: dict = field(default_factory=dict)

    def __bool__(self):
        return bool(self.observed)


@dataclass
class TrainMetrics:
    accuracy: list = field(default_factory=list)
    participants: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # model each round's clients started from


def sparse_k(alpha, d):
    return max(1, math.ceil(round(alpha * d, 9)))


def topk_sparsify(delta, alpha):
    """Keep the ``ceil(alpha * d)`` largest-magnitude entries; ties go to the lower index."""
    delta = np.asarray(delta, dtype=np.float32)
    k = sparse_k(alpha, len(delta))
    order = np.argsort(-np.abs(delta), kind="stable")[:k]
    idx = np.sort(order)
    return SparseGradient(idx.astype(np.uint32), delta[idx], len(delta))


def l2_clip(g, clip):
    if clip <= 0:
        raise ValueError("clip norm must be positive")
    norm = g.norm()
    scale = 1.0 if norm <= clip else clip / norm
    return SparseGradient(g.indices.copy(), (g.values.astype(np.float64) * scale).astype(np.float32), g.dim)


def sample_participants(n_users, q, rng):
    """Independent Bernoulli(q) draw per user."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    return set(np.flatnonzero(rng.random(n_users) < q).tolist())


def encode_gradient(g):
    rec = np.empty(g.k, dtype=_RECORD)
    rec["index"] = g.indices
    rec["value"] = g.values
    return struct.pack("<I", g.dim) + rec.tobytes()


def decode_gradient(payload):
    (dim,) = struct.unpack("<I", payload[:4])
    rec = np.frombuffer(payload[4:], dtype=_RECORD)
    return SparseGradient(rec["index"].copy(), rec["value"].copy(), dim)


def enc_client(client, model, config, mlp, key):
    """Local SGD, top-k, clip, seal. Returns the update and the plaintext gradient."""
    bs = config.batch_size or None
    local = mlp.fit(model.theta, client.x, client.y, config.lr_client, config.local_epochs, bs)
    delta = (local - model.theta.astype(np.float64)).astype(np.float32)
    g = l2_clip(topk_sparsify(delta, config.alpha), config.clip)
    env = seal(key, client.user_id, model.round, encode_gradient(g))
    return ClientUpdate(client.user_id, env), g


def verify_and_decrypt(update, keystore, expected_set, seen=None):
    """Enclave-side membership, authenticity and replay checks."""
    uid = update.user_id
    if uid not in expected_set or update.envelope.user != uid:
        raise VerificationError("not sampled")
    if seen is not None and uid in seen:
        raise VerificationError("duplicate submission")
    key = keystore.get(uid)
    if key is None:
        raise VerificationError("authentication failure")
    try:
        payload = open_envelope(key, update.envelope)
    except AuthenticationError:
        raise VerificationError("authentication failure") from None
    if seen is not None:
        seen.add(uid)
    return decode_gradient(payload)


class Enclave:
    """Trusted-side state: key store and dedicated RNG streams."""

    def __init__(self, keystore, seed):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        sampling, noise, oram = ss.spawn(3)
        self.keystore = keystore
        self.sample_rng = np.random.default_rng(sampling)
        self.noise_rng = np.random.default_rng(noise)
        self.oram_rng = np.random.default_rng(oram)
        self.sampled = {}

    def sample(self, n_users, q, rnd):
        chosen = sample_participants(n_users, q, self.sample_rng)
        self.sampled[rnd] = chosen
        return chosen


def run_round(model, config, clients, aggregator, enclave, mlp, tracer=None, updates=None):
    """One training round; returns the new model and the observer's leak.

    ``updates`` lets a caller inject extra (possibly forged) submissions that
    are delivered after the honest ones.
    """
    rnd = model.round
    chosen = enclave.sample(config.n_users, config.q, rnd)
    by_id = {c.user_id: c for c in clients}
    inbox = []
    for uid in sorted(chosen):
        upd, _ = enc_client(by_id[uid], model, config, mlp, enclave.keystore[uid])
        inbox.append(upd)
    inbox.extend(updates or [])
    seen, users, grads = set(), [], []
    for upd in inbox:
        try:
            g = verify_and_decrypt(upd, enclave.keystore, chosen, seen)
        except VerificationError as exc:
            log.warning("round %d: rejected update from user %s: %s", rnd, upd.user_id, exc.reason)
            continue
        users.append(upd.user_id)
        grads.append(g)
    if not grads:
        raise RoundAborted(f"round {rnd}: no valid updates")
    k = sparse_k(config.alpha, model.d)
    inp = AggregationInput.from_gradients(grads, k=k, d=model.d)
    leak = RoundLeak(rnd)
    if aggregator == "linear":
        sink = tracer if tracer is not None and tracer.records else Tracer()
        start = len(sink)
        agg = aggregate(inp, "linear", tracer=sink)
        t = sink.trace()
        sub = type(t)(t.region[start:], t.cell[start:], t.op[start:])
        sets = leaked_indices(sub, LinearLayout(inp.n, inp.k, inp.d))
        leak.observed = {u: sorted(s) for u, s in zip(users, sets)}
    else:
        agg = aggregate(
            inp,
            aggregator,
            cacheline_c=config.cacheline_c,
            group_h=config.group_h or None,
            tracer=tracer,
            rng=enclave.oram_rng,
        )
    noisy = average_and_perturb(agg, config.expected_participants, config.noise_std, enclave.noise_rng, tracer)
    theta = (model.theta.astype(np.float64) + config.lr_server * noisy.astype(np.float64)).astype(np.float32)
    return GlobalModel(theta, rnd + 1), leak


def build_model(config, dataset):
    return TinyMlp(dataset.n_features, config.model_hidden, dataset.n_labels)


def train(config, dataset, aggregator=None):
    """Run ``config.rounds`` rounds; returns (final model, leak log, metrics)."""
    aggregator = aggregator or config.aggregator
    mlp = build_model(config, dataset)
    init_ss, key_ss, enclave_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = GlobalModel(mlp.init_params(np.random.default_rng(init_ss)), 0)
    keystore = provision_keys([c.user_id for c in dataset.clients], np.random.default_rng(key_ss))
    enclave = Enclave(keystore, enclave_ss)
    leaks, metrics = [], TrainMetrics()
    for _ in range(config.rounds):
        metrics.checkpoints.append(model.theta.copy())
        try:
            model, leak = run_round(model, config, dataset.clients, aggregator, enclave, mlp)
        except RoundAborted as exc:
            log.warning("%s", exc)
            model, leak = GlobalModel(model.theta, model.round + 1), RoundLeak(model.round)
        leaks.append(leak)
        metrics.participants.append(len(enclave.sampled[model.round - 1]))
        metrics.accuracy.append(mlp.accuracy(model.theta, dataset.test_x, dataset.test_y))
    return model, leaks, metrics


def write_checkpoint(path, theta):
    """OLVM: magic, u32 d, then d little-endian float32."""
    theta = np.asarray(theta, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", len(theta)))
        f.write(theta.tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an OLVM checkpoint")
    (d,) = struct.unpack("<I", raw[4:8])
    theta = np.frombuffer(raw[8:], dtype="<f4")
    if len(theta) != d:
        raise ValueError("truncated checkpoint")
    return theta.astype(np.float32)


def write_leak_log(path, leaks):
    """JSON lines, one ``{"round", "user", "indices"}`` object per participant-round."""
    with open(path, "w") as f:
        for leak in leaks:
            for user in sorted(leak.observed):
                f.write(json.dumps({"round": leak.round, "user": user, "indices": list(leak.observed[user])}) + "\n")


def read_leak_log(path):
    rounds = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            rounds.setdefault(obj["round"], RoundLeak(obj["round"])).observed[int(obj["user"])] = list(obj["indices"])
    return [rounds[r] for r in sorted(rounds)]


def build_dataset(config):
    """The dataset a config describes; its RNG stream depends only on ``seed``."""
    rng = np.random.default_rng([config.seed, 0xDA7A])
    if config.dataset_kind == "idx":
        if not config.dataset_path:
            raise ConfigError("dataset.path", "required for idx datasets")
        return load_idx_dataset(
            config.dataset_path,
            config.n_users,
            rng,
            labels_per_client=config.labels_per_client,
            samples_per_client=config.samples_per_client,
            test_per_label=config.test_per_label,
            n_features=config.model_input,
        )
    return make_synthetic_dataset(
        config.n_users,
        rng,
        n_labels=config.n_labels,
        labels_per_client=config.labels_per_client,
        n_features=config.model_input,
        samples_per_client=config.samples_per_client,
        test_per_label=config.test_per_label,
        separation=config.separation,
    )
