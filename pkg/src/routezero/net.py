"""Policy/value network over routing states.

Encoder: linear node embedding followed by transformer layers where batch
norm runs *before* each sublayer and a learned sigmoid gate blends the
sublayer output with its input,

    h'  = gate_1(h,  attention(norm(h)))
    h'' = gate_2(h', feedforward(norm(h')))
    gate(x, f) = s * x + (1 - s) * f,   s = sigmoid(W [x || f] + b).

The graph embedding is the mean over node embeddings.  The policy head is
a pointer: a context vector (graph embedding, current node embedding and,
for EVRP, the vehicle's battery/clock/cargo readings) is projected to a
query q and each node scores ``C * tanh(q . h_j / sqrt(d))``.  The value
head reads the pooled embeddings of the two players' states side by side
and squashes through tanh into [-1, 1].

Gradients come from the in-repo tape in `autodiff`; there is no external
ML runtime, which keeps checkpoints exact and runs reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .env import PlayerState, legal_actions
from .instance import COORD_RANGE_KM, EvrpInstance, TspInstance

LOGIT_CLIP = 10.0
CHECKPOINT_VERSION = 1

TSP_NODE_FEATURES = 5
EVRP_NODE_FEATURES = 7
EVRP_GLOBAL_FEATURES = 4


class CheckpointError(RuntimeError):
    """A network checkpoint is unreadable or incompatible."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture and optimizer knobs; problem picks the feature layout."""

    problem: str = "evrp"
    embed_dim: int = 128
    n_heads: int = 8
    n_layers: int = 3
    ffn_dim: int = 512
    batch_size: int = 256
    learning_rate: float = 1e-4

    def __post_init__(self) -> None:
        if self.problem not in ("tsp", "evrp"):
            raise ValueError(f"problem must be tsp or evrp, got {self.problem!r}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if min(self.embed_dim, self.n_heads, self.n_layers, self.ffn_dim, self.batch_size) < 1:
            raise ValueError("architecture sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def node_features(self) -> int:
        return TSP_NODE_FEATURES if self.problem == "tsp" else EVRP_NODE_FEATURES

    @property
    def global_features(self) -> int:
        return 0 if self.problem == "tsp" else EVRP_GLOBAL_FEATURES

    @property
    def context_features(self) -> int:
        if self.problem == "tsp":
            return 3 * self.embed_dim
        return 2 * self.embed_dim + EVRP_GLOBAL_FEATURES


@dataclass(frozen=True)
class StateFeatures:
    """Network-ready view of one player state.

    ``nodes`` is (n_nodes, F) with every entry in [0, 1]; ``globals_``
    carries the vehicle readings (empty for TSP); ``current`` and ``first``
    are node indices, -1 when undefined.
    """

    nodes: np.ndarray
    globals_: np.ndarray
    current: int
    first: int


def featurize(state: PlayerState) -> StateFeatures:
    inst = state.instance
    if isinstance(inst, TspInstance):
        n = inst.n_nodes
        first = state.route[0] if state.route else -1
        feats = np.zeros((n, TSP_NODE_FEATURES))
        feats[:, 0:2] = inst.coords
        feats[:, 2] = state.served
        if first >= 0:
            feats[first, 3] = 1.0
        if state.position >= 0:
            feats[state.position, 4] = 1.0
        return StateFeatures(feats, np.zeros(0), int(state.position), int(first))

    assert isinstance(inst, EvrpInstance)
    n = inst.n_nodes
    veh = inst.vehicle
    feats = np.zeros((n, EVRP_NODE_FEATURES))
    feats[:, 0:2] = inst.coords / COORD_RANGE_KM
    feats[:, 2] = inst.demands / veh.cargo_capacity_kg
    feats[np.arange(n), 3 + inst.kinds] = 1.0
    feats[inst.customer_ids, 6] = state.served
    globals_ = np.array(
        [
            state.battery_kwh / veh.battery_capacity_kwh,
            state.clock_h / inst.t_max_h,
            state.load_kg / veh.cargo_capacity_kg,
            state.position / max(1, n - 1),
        ]
    )
    return StateFeatures(feats, globals_, int(state.position), 0)


def stack_features(batch: list[StateFeatures]) -> dict[str, np.ndarray]:
    """Stack same-shape features into arrays the forward pass consumes."""
    return {
        "nodes": np.stack([f.nodes for f in batch]),
        "globals": np.stack([f.globals_ for f in batch]),
        "current": np.array([f.current for f in batch], dtype=np.int64),
        "first": np.array([f.first for f in batch], dtype=np.int64),
    }


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class PolicyValueNet:
    """Shared-trunk policy and value network with its own Adam state."""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray], bn_stats: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats
        self.adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_t = 0

    @classmethod
    def create(cls, config: NetConfig, seed: int = 0) -> "PolicyValueNet":
        rng = np.random.default_rng(seed)
        d, f = config.embed_dim, config.ffn_dim
        p: dict[str, np.ndarray] = {}
        stats: dict[str, np.ndarray] = {}
        p["embed/W"] = _glorot(rng, config.node_features, d)
        p["embed/b"] = np.zeros(d)
        for i in range(config.n_layers):
            pre = f"layer{i}"
            for bn in ("bn1", "bn2"):
                p[f"{pre}/{bn}/gamma"] = np.ones(d)
                p[f"{pre}/{bn}/beta"] = np.zeros(d)
                stats[f"{pre}/{bn}/mean"] = np.zeros(d)
                stats[f"{pre}/{bn}/var"] = np.ones(d)
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{pre}/attn/{w}"] = _glorot(rng, d, d)
            for gate in ("gate1", "gate2"):
                p[f"{pre}/{gate}/W"] = _glorot(rng, 2 * d, d)
                p[f"{pre}/{gate}/b"] = np.zeros(d)
            p[f"{pre}/ffn/W1"] = _glorot(rng, d, f)
            p[f"{pre}/ffn/b1"] = np.zeros(f)
            p[f"{pre}/ffn/W2"] = _glorot(rng, f, d)
            p[f"{pre}/ffn/b2"] = np.zeros(d)
        p["policy/Wctx"] = _glorot(rng, config.context_features, d)
        p["policy/bctx"] = np.zeros(d)
        p["value/W1"] = _glorot(rng, 2 * d, d)
        p["value/b1"] = np.zeros(d)
        p["value/W2"] = _glorot(rng, d, 1)
        p["value/b2"] = np.zeros(1)
        return cls(config, p, stats)

    def copy(self) -> "PolicyValueNet":
        """Deep snapshot including optimizer state and running statistics."""
        twin = PolicyValueNet(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.bn_stats.items()},
        )
        twin.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        twin.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        twin.adam_t = self.adam_t
        return twin

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def _tensors(self, train: bool) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=train) for k, v in self.params.items()}

    def _encode(self, t, nodes: np.ndarray, training: bool, update_stats: bool):
        cfg = self.config
        h = ad.add(ad.matmul(ad.Tensor(nodes), t["embed/W"]), t["embed/b"])
        heads, dh = cfg.n_heads, cfg.embed_dim // cfg.n_heads
        b, n = nodes.shape[0], nodes.shape[1]
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            normed = ad.batchnorm_nodes(
                h,
                t[f"{pre}/bn1/gamma"],
                t[f"{pre}/bn1/beta"],
                self.bn_stats[f"{pre}/bn1/mean"],
                self.bn_stats[f"{pre}/bn1/var"],
                training,
                update_stats,
            )
            q = ad.transpose(ad.reshape(ad.matmul(normed, t[f"{pre}/attn/Wq"]), (b, n, heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(ad.matmul(normed, t[f"{pre}/attn/Wk"]), (b, n, heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(ad.matmul(normed, t[f"{pre}/attn/Wv"]), (b, n, heads, dh)), (0, 2, 1, 3))
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
            mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, cfg.embed_dim))
            attn = ad.matmul(mixed, t[f"{pre}/attn/Wo"])
            h = self._gate(t, f"{pre}/gate1", h, attn)
            normed = ad.batchnorm_nodes(
                h,
                t[f"{pre}/bn2/gamma"],
                t[f"{pre}/bn2/beta"],
                self.bn_stats[f"{pre}/bn2/mean"],
                self.bn_stats[f"{pre}/bn2/var"],
                training,
                update_stats,
            )
            ffn = ad.add(
                ad.matmul(
                    ad.relu(ad.add(ad.matmul(normed, t[f"{pre}/ffn/W1"]), t[f"{pre}/ffn/b1"])),
                    t[f"{pre}/ffn/W2"],
                ),
                t[f"{pre}/ffn/b2"],
            )
            h = self._gate(t, f"{pre}/gate2", h, ffn)
        pooled = ad.mean(h, axis=1)
        return h, pooled

    @staticmethod
    def _gate(t, prefix: str, x, f):
        s = ad.sigmoid(ad.add(ad.matmul(ad.concat([x, f], axis=-1), t[f"{prefix}/W"]), t[f"{prefix}/b"]))
        return ad.add(ad.mul(s, x), ad.mul(ad.add(ad.scale(s, -1.0), 1.0), f))

    def _policy_logits(self, t, h, pooled, batch: dict[str, np.ndarray]):
        cfg = self.config
        cur = ad.gather_nodes(h, batch["current"])
        if cfg.problem == "tsp":
            first = ad.gather_nodes(h, batch["first"])
            ctx = ad.concat([pooled, cur, first], axis=-1)
        else:
            ctx = ad.concat([pooled, cur, ad.Tensor(batch["globals"])], axis=-1)
        query = ad.add(ad.matmul(ctx, t["policy/Wctx"]), t["policy/bctx"])
        q3 = ad.reshape(query, (query.shape[0], cfg.embed_dim, 1))
        scores = ad.scale(ad.reshape(ad.matmul(h, q3), h.shape[:2]), 1.0 / np.sqrt(cfg.embed_dim))
        return ad.scale(ad.tanh(scores), LOGIT_CLIP)

    def _value(self, t, pooled_own, pooled_opp):
        joint = ad.concat([pooled_own, pooled_opp], axis=-1)
        hidden = ad.relu(ad.add(ad.matmul(joint, t["value/W1"]), t["value/b1"]))
        out = ad.tanh(ad.add(ad.matmul(hidden, t["value/W2"]), t["value/b2"]))
        return ad.reshape(out, (out.shape[0],))

    def encode(self, features: StateFeatures) -> tuple[np.ndarray, np.ndarray]:
        """Per-node embeddings and the pooled graph embedding (inference)."""
        t = self._tensors(train=False)
        h, pooled = self._encode(t, features.nodes[None], training=False, update_stats=False)
        return h.data[0], pooled.data[0]

    def policy_logits(self, features: StateFeatures, legal: np.ndarray) -> np.ndarray:
        """Pointer logits with illegal entries at -inf."""
        t = self._tensors(train=False)
        batch = stack_features([features])
        h, pooled = self._encode(t, batch["nodes"], training=False, update_stats=False)
        logits = self._policy_logits(t, h, pooled, batch).data[0]
        return np.where(np.asarray(legal, dtype=bool), logits, -np.inf)

    def value(self, own: StateFeatures, opp: StateFeatures) -> float:
        """Expected outcome in [-1, 1] of own vs opponent from this pair."""
        t = self._tensors(train=False)
        batch = stack_features([own, opp])
        _, pooled = self._encode(t, batch["nodes"], training=False, update_stats=False)
        own_p = ad.Tensor(pooled.data[0:1])
        opp_p = ad.Tensor(pooled.data[1:2])
        return float(self._value(t, own_p, opp_p).data[0])

    def evaluate(self, own: StateFeatures, opp: StateFeatures, legal: np.ndarray) -> tuple[np.ndarray, float]:
        """One fused forward: masked policy logits for own plus pair value."""
        t = self._tensors(train=False)
        batch = stack_features([own, opp])
        h, pooled = self._encode(t, batch["nodes"], training=False, update_stats=False)
        own_batch = {
            "current": batch["current"][0:1],
            "first": batch["first"][0:1],
            "globals": batch["globals"][0:1],
        }
        h_own = ad.Tensor(h.data[0:1])
        pooled_own = ad.Tensor(pooled.data[0:1])
        logits = self._policy_logits(t, h_own, pooled_own, own_batch).data[0]
        value = float(self._value(t, pooled_own, ad.Tensor(pooled.data[1:2])).data[0])
        return np.where(np.asarray(legal, dtype=bool), logits, -np.inf), value

    def train_step(
        self,
        policy_batch: dict[str, np.ndarray] | None,
        value_batch: dict[str, np.ndarray] | None,
    ) -> tuple[float, float]:
        """One Adam update on cross-entropy (policy) plus MSE (value).

        ``policy_batch`` holds stacked features with ``legal`` and
        ``target``; ``value_batch`` holds ``own_*``/``opp_*`` feature stacks
        and ``z``.  Either side may be ``None``.  Returns the two losses.
        """
        t = self._tensors(train=True)
        losses = []
        p_loss_val = v_loss_val = 0.0
        if policy_batch is not None:
            h, pooled = self._encode(t, policy_batch["nodes"], training=True, update_stats=True)
            logits = self._policy_logits(t, h, pooled, policy_batch)
            p_loss = ad.masked_cross_entropy(logits, policy_batch["legal"], policy_batch["target"])
            losses.append(p_loss)
            p_loss_val = float(p_loss.data)
        if value_batch is not None:
            _, pooled_own = self._encode(t, value_batch["own_nodes"], training=True, update_stats=True)
            _, pooled_opp = self._encode(t, value_batch["opp_nodes"], training=True, update_stats=True)
            v_loss = ad.mse(self._value(t, pooled_own, pooled_opp), value_batch["z"])
            losses.append(v_loss)
            v_loss_val = float(v_loss.data)
        if not losses:
            return 0.0, 0.0
        total = losses[0] if len(losses) == 1 else ad.add(losses[0], losses[1])
        total.backward()
        self._adam({k: tt.grad for k, tt in t.items() if tt.grad is not None})
        return p_loss_val, v_loss_val

    def _adam(self, grads: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        self.adam_t += 1
        lr = self.config.learning_rate
        c1 = 1.0 - beta1**self.adam_t
        c2 = 1.0 - beta2**self.adam_t
        for k, g in grads.items():
            m = self.adam_m[k]
            v = self.adam_v[k]
            m += (1.0 - beta1) * (g - m)
            v += (1.0 - beta2) * (g * g - v)
            self.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def greedy_action(net: PolicyValueNet, state: PlayerState) -> int:
    """Highest-logit legal move; ties resolve to the lowest node id."""
    logits = net.policy_logits(featurize(state), legal_actions(state))
    return int(np.argmax(logits))


def net_to_arrays(net: PolicyValueNet, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten one net (weights, BN stats, Adam state, config) to arrays."""
    arrays = {f"{prefix}param/{k}": v for k, v in net.params.items()}
    arrays |= {f"{prefix}stat/{k}": v for k, v in net.bn_stats.items()}
    arrays |= {f"{prefix}adam_m/{k}": v for k, v in net.adam_m.items()}
    arrays |= {f"{prefix}adam_v/{k}": v for k, v in net.adam_v.items()}
    arrays[f"{prefix}meta/adam_t"] = np.array(net.adam_t, dtype=np.int64)
    arrays[f"{prefix}meta/config"] = np.frombuffer(json.dumps(asdict(net.config)).encode(), dtype=np.uint8)
    return arrays


def net_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> PolicyValueNet:
    """Rebuild a net from a flat array dump produced by net_to_arrays."""
    def sub(group: str) -> dict[str, np.ndarray]:
        head = f"{prefix}{group}/"
        return {k.removeprefix(head): v for k, v in arrays.items() if k.startswith(head)}

    try:
        config = NetConfig(**json.loads(arrays[f"{prefix}meta/config"].tobytes().decode()))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad embedded net config: {exc}") from exc
    net = PolicyValueNet(config, sub("param"), sub("stat"))
    net.adam_m = sub("adam_m")
    net.adam_v = sub("adam_v")
    net.adam_t = int(arrays[f"{prefix}meta/adam_t"])
    return net


def save_net(net: PolicyValueNet, path) -> None:
    """Write a versioned tensor dump with the config embedded."""
    arrays = net_to_arrays(net)
    arrays["meta/version"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_net(path, expected_config: NetConfig | None = None) -> PolicyValueNet:
    """Read a tensor dump; rejects version or config mismatches."""
    try:
        with np.load(path) as data:
            arrays = {k: data[k].copy() for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    version = int(arrays.get("meta/version", np.array(-1)))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
    net = net_from_arrays(arrays)
    if expected_config is not None and net.config != expected_config:
        raise CheckpointError(f"{path}: checkpoint config {net.config} does not match {expected_config}")
    return net
